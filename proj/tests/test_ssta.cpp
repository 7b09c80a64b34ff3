#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ssmtad/optim.hpp"
#include "ssmtad/ssta.hpp"

using namespace ssmtad;

namespace {

SstaConfig small_ssta(int64_t d = 16, int64_t lambda = 4) {
    SstaConfig cfg;
    cfg.d = d;
    cfg.lambda = lambda;
    cfg.dmbss.c = d / lambda;
    cfg.dmbss.lambda = 2;
    cfg.dmbss.n = 2;
    cfg.dmbss.conv_k = 3;
    return cfg;
}

ToyBackboneConfig small_bb(int64_t d = 16, int64_t blocks = 2) {
    ToyBackboneConfig cfg;
    cfg.d = d;
    cfg.blocks = blocks;
    cfg.hidden_mult = 2;
    cfg.conv_k = 3;
    cfg.seed = 404;
    return cfg;
}

Tensor rand_tensor(const Shape& s, RandomStream& rng) {
    std::vector<double> v(size_t(numel_of(s)));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from_vector(s, v);
}

int64_t total_numel(const std::vector<Tensor>& ts) {
    int64_t n = 0;
    for (const auto& t : ts) n += t.numel();
    return n;
}

}  // namespace

TEST_CASE("adapter config rejects lambda 1, indivisible widths, and width drift") {
    SstaConfig cfg = small_ssta();
    cfg.lambda = 1;
    cfg.dmbss.c = 16;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = small_ssta();
    cfg.d = 10;  // not divisible by 4
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = small_ssta();
    cfg.dmbss.c = 8;  // inner() is 4
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    CHECK_NOTHROW(small_ssta().validate());
}

TEST_CASE("zero up-projection makes the adapter an exact identity at any rank") {
    SstaConfig cfg = small_ssta();
    SstaParams p = ssta_init(cfg, 3);
    for (double v : p.w_up.to_vector()) CHECK(v == 0.0);

    RandomStream rng(5);
    for (const Shape& s : {Shape{2, 6, 16}, Shape{5, 3, 2, 16}, Shape{2, 5, 3, 2, 16}}) {
        Tensor x = rand_tensor(s, rng);
        Tensor y = ssta_forward(x, p, cfg);
        CHECK(y.shape() == s);
        auto xv = x.to_vector(), yv = y.to_vector();
        for (size_t i = 0; i < xv.size(); ++i) CHECK(yv[i] == xv[i]);
    }

    CHECK_THROWS_AS(ssta_forward(rand_tensor({2, 6, 8}, rng), p, cfg), ShapeError);
    CHECK_THROWS_AS(ssta_forward(rand_tensor({6, 16}, rng), p, cfg), ShapeError);
}

TEST_CASE("a moved up-projection leaves identity and folds spatial dims into batch") {
    SstaConfig cfg = small_ssta();
    SstaParams p = ssta_init(cfg, 3);
    RandomStream rng(7);
    {
        std::vector<double> w(size_t(p.w_up.numel()));
        for (auto& v : w) v = 0.05 * rng.normal();
        p.w_up.copy_from(Tensor::from_vector(p.w_up.shape(), w));
    }

    Tensor x = rand_tensor({2, 6, 16}, rng);
    Tensor y = ssta_forward(x, p, cfg);
    double moved = 0;
    auto xv = x.to_vector(), yv = y.to_vector();
    for (size_t i = 0; i < xv.size(); ++i) moved = std::max(moved, std::abs(yv[i] - xv[i]));
    CHECK(moved > 1e-6);

    // [b,t,h,w,d]: each spatial site must behave as its own batch row
    const int64_t t = 5;
    Tensor x5 = rand_tensor({1, t, 2, 1, 16}, rng);
    Tensor y5 = ssta_forward(x5, p, cfg);
    auto x5v = x5.to_vector(), y5v = y5.to_vector();
    for (int64_t site = 0; site < 2; ++site) {
        std::vector<double> slice(size_t(t * 16));
        for (int64_t ti = 0; ti < t; ++ti)
            for (int64_t k = 0; k < 16; ++k)
                slice[size_t(ti * 16 + k)] = x5v[size_t((ti * 2 + site) * 16 + k)];
        Tensor ys = ssta_forward(Tensor::from_vector({1, t, 16}, slice), p, cfg);
        auto ysv = ys.to_vector();
        for (int64_t ti = 0; ti < t; ++ti)
            for (int64_t k = 0; k < 16; ++k)
                CHECK(ysv[size_t(ti * 16 + k)] ==
                      doctest::Approx(y5v[size_t((ti * 2 + site) * 16 + k)]).epsilon(1e-12));
    }
}

TEST_CASE("adapted model equals the frozen backbone until training moves it") {
    ToyBackbone bb = toy_backbone_init(small_bb());
    AdaptedModel m = adapt_backbone(bb, small_ssta(), 11);
    REQUIRE(m.adapters.size() == 2);

    RandomStream rng(13);
    Tensor x = rand_tensor({2, 8, 16}, rng);
    auto plain = toy_backbone_forward(x, bb).to_vector();
    auto adapted = adapted_forward(x, m).to_vector();
    REQUIRE(plain.size() == adapted.size());
    for (size_t i = 0; i < plain.size(); ++i) CHECK(adapted[i] == plain[i]);
}

TEST_CASE("insert_every controls adapter placement") {
    ToyBackbone bb = toy_backbone_init(small_bb(16, 4));
    CHECK(adapt_backbone(bb, small_ssta(), 1, 1).insert_after ==
          std::vector<int64_t>{0, 1, 2, 3});
    CHECK(adapt_backbone(bb, small_ssta(), 1, 2).insert_after == std::vector<int64_t>{1, 3});
    CHECK(adapt_backbone(bb, small_ssta(), 1, 5).insert_after.empty());
    CHECK_THROWS_AS(adapt_backbone(bb, small_ssta(), 1, 0), ConfigError);

    SstaConfig wrong = small_ssta(32, 4);
    CHECK_THROWS_AS(adapt_backbone(bb, wrong, 1), ConfigError);
}

TEST_CASE("gradients flow to adapters only; the backbone never sees any") {
    ToyBackbone bb = toy_backbone_init(small_bb());
    AdaptedModel m = adapt_backbone(bb, small_ssta(), 17);
    RandomStream rng(19);
    Tensor x = rand_tensor({1, 8, 16}, rng);
    backward(sum_all(adapted_forward(x, m)));

    for (const auto& t : toy_backbone_tensors(bb)) {
        CHECK(!t.requires_grad());
        CHECK(!t.has_grad());
    }
    for (const auto& a : m.adapters) {
        CHECK(a.w_up.has_grad());
        double g = 0;
        for (double v : a.w_up.grad_vector()) g = std::max(g, std::abs(v));
        CHECK(g > 0.0);
    }
}

TEST_CASE("frozen weights are bit-identical after a hundred training steps") {
    ToyBackbone bb = toy_backbone_init(small_bb());
    AdaptedModel m = adapt_backbone(bb, small_ssta(), 23);
    RandomStream rng(29);
    Tensor x = rand_tensor({1, 8, 16}, rng);
    Tensor target = rand_tensor({1, 8, 16}, rng);

    std::vector<std::vector<double>> before;
    for (const auto& t : toy_backbone_tensors(bb)) before.push_back(t.to_vector());

    AdamW opt(adapted_trainable_params(m));
    double first = -1, last = -1;
    for (int step = 0; step < 100; ++step) {
        Tensor diff = sub(adapted_forward(x, m), target);
        Tensor loss = mean_all(mul(diff, diff));
        last = loss.item();
        if (step == 0) first = last;
        opt.zero_grad();
        backward(loss);
        opt.step(1e-2);
    }
    CHECK(last < first);  // the adapters actually trained

    auto tensors = toy_backbone_tensors(bb);
    for (size_t i = 0; i < tensors.size(); ++i) {
        auto now = tensors[i].to_vector();
        REQUIRE(now.size() == before[i].size());
        for (size_t k = 0; k < now.size(); ++k) CHECK(now[k] == before[i][k]);
    }
}

TEST_CASE("parameter counts match the closed form at the published scale") {
    // d=256, lambda=4 adapter around a 4-block width-256 backbone
    ToyBackboneConfig bcfg;  // defaults: d 256, 4 blocks, hidden 4x, k 3
    ToyBackbone bb = toy_backbone_init(bcfg);
    SstaConfig scfg;  // defaults: d 256, lambda 4, dmbss at c 64
    scfg.dmbss.c = 64;
    AdaptedModel m = adapt_backbone(bb, scfg, 31);
    REQUIRE(m.adapters.size() == 4);

    // one block: 256*1024 + 1024 + 1024*256 + 256 + 256*3
    const int64_t block = 262144 + 1024 + 262144 + 256 + 768;
    CHECK(total_numel(toy_backbone_tensors(bb)) == 4 * block);

    // one adapter: down 256*64, up 64*256, inner block at c=64
    // (lambda 4, n 8, k 4, shared directions): in 64*256, out 256*64 + 64,
    // two branches of 128-wide pathway+gate params
    const int64_t branch = 16384 + 128 + 512 + 1024 + 1024 + 1024 + 16384 + 128 + 16384 + 128;
    const int64_t dmbss = 16384 + 16384 + 64 + 2 * branch;
    const int64_t adapter = 16384 + 16384 + dmbss;
    CHECK(total_numel(ssta_collect_params(m.adapters[0])) == adapter);

    ParamCounts counts = count_trainable(adapted_all_tensors(m));
    CHECK(counts.trainable == 4 * adapter);
    CHECK(counts.frozen == 4 * block);
    CHECK(counts.ratio() ==
          doctest::Approx(double(4 * adapter) / double(4 * adapter + 4 * block)));

    // the efficiency pitch: one adapter under 35% of one backbone block
    CHECK(double(adapter) < 0.35 * double(block));
}

TEST_CASE("adapter size shrinks monotonically as lambda grows") {
    std::vector<int64_t> sizes;
    for (int64_t lambda : {2, 4, 8}) {
        SstaConfig cfg = small_ssta(64, lambda);
        SstaParams p = ssta_init(cfg, 37);
        sizes.push_back(total_numel(ssta_collect_params(p)));
    }
    CHECK(sizes[0] > sizes[1]);
    CHECK(sizes[1] > sizes[2]);
}

TEST_CASE("count_trainable splits by requires_grad") {
    Tensor a = Tensor::zeros({5});                      // frozen
    Tensor b = Tensor::zeros({7});                      // frozen
    Tensor c = Tensor::zeros({3}, DType::f64, true);    // trainable
    ParamCounts counts = count_trainable({a, b, c});
    CHECK(counts.trainable == 3);
    CHECK(counts.frozen == 12);
    CHECK(counts.ratio() == doctest::Approx(0.2));

    CHECK(count_trainable({}).trainable == 0);
    CHECK(count_trainable({}).ratio() == 0.0);
    CHECK_THROWS_AS(count_trainable({Tensor{}}), ValueError);
}

TEST_CASE("adapter gradients match finite differences through the frozen stack") {
    SstaConfig scfg = small_ssta(8, 2);
    scfg.dmbss.conv_k = 2;
    ToyBackbone bb = toy_backbone_init(small_bb(8, 1));
    AdaptedModel m = adapt_backbone(bb, scfg, 41);
    RandomStream rng(43);
    {
        // move w_up off zero so down-projection gradients are nontrivial
        auto& a = m.adapters[0];
        std::vector<double> w(size_t(a.w_up.numel()));
        for (auto& v : w) v = 0.1 * rng.normal();
        a.w_up.copy_from(Tensor::from_vector(a.w_up.shape(), w));
    }
    Tensor x = rand_tensor({1, 4, 8}, rng);
    Tensor w = rand_tensor({1, 4, 8}, rng);
    std::vector<Tensor> params = adapted_trainable_params(m);
    auto f = [&](const std::vector<Tensor>&) {
        return sum_all(mul(adapted_forward(x, m), w));
    };
    auto rep = grad_check(f, params);
    INFO("worst: ", rep.worst_param, "[", rep.worst_index, "]");
    CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("adapter named params are unique and align with collect") {
    SstaParams p = ssta_init(small_ssta(), 47);
    auto named = ssta_named_params(p, "ssta.0.");
    auto flat = ssta_collect_params(p);
    REQUIRE(named.size() == flat.size());
    std::vector<std::string> names;
    for (auto& [n, t] : named) names.push_back(n);
    std::sort(names.begin(), names.end());
    CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
    CHECK(names[0].rfind("ssta.0.", 0) == 0);
}
