#include "ssmtad/ssta.hpp"

#include <limits>

namespace ssmtad {

void SstaConfig::validate() const {
    if (lambda <= 1)
        throw ConfigError("ssta: lambda must exceed 1, got " + std::to_string(lambda));
    if (d < 1 || d % lambda != 0)
        throw ConfigError("ssta: d (" + std::to_string(d) + ") must be divisible by lambda (" +
                          std::to_string(lambda) + ")");
    if (dmbss.c != inner())
        throw ConfigError("ssta: dmbss.c (" + std::to_string(dmbss.c) + ") must equal d/lambda (" +
                          std::to_string(inner()) + ")");
    dmbss.validate();
}

namespace {

uint64_t next_seed(RandomStream& rng) {
    return uint64_t(rng.uniform_int(0, std::numeric_limits<int64_t>::max()));
}

}  // namespace

SstaParams ssta_init(const SstaConfig& cfg, uint64_t seed, DType dt) {
    cfg.validate();
    RandomStream rng(seed);
    SstaParams p;
    p.w_down = Tensor::uniform_fan_in({cfg.d, cfg.inner()}, cfg.d, rng, dt);
    p.w_up = Tensor::zeros({cfg.inner(), cfg.d}, dt, true);
    p.block = dmbss_init(cfg.dmbss, next_seed(rng), dt);
    return p;
}

NamedTensors ssta_named_params(const SstaParams& p, const std::string& prefix) {
    NamedTensors out;
    out.emplace_back(prefix + "down_w", p.w_down);
    out.emplace_back(prefix + "up_w", p.w_up);
    auto block = dmbss_named_params(p.block, prefix + "dmbss.");
    out.insert(out.end(), block.begin(), block.end());
    return out;
}

std::vector<Tensor> ssta_collect_params(const SstaParams& p) {
    std::vector<Tensor> out;
    for (auto& [name, t] : ssta_named_params(p, "")) out.push_back(t);
    return out;
}

Tensor ssta_forward(const Tensor& x, const SstaParams& p, const SstaConfig& cfg) {
    if (x.rank() < 3 || x.rank() > 5 || x.shape().back() != cfg.d)
        throw ShapeError("ssta_forward: want [b,t,d], [t,h,w,d] or [b,t,h,w,d] with d=" +
                         std::to_string(cfg.d) + ", got " + shape_str(x.shape()));

    // fold spatial dims into batch so the block sees [b', t, d]
    Tensor seq;
    switch (x.rank()) {
        case 3:
            seq = x;
            break;
        case 4: {  // [t,h,w,d]
            int64_t t = x.dim(0), hw = x.dim(1) * x.dim(2);
            seq = swap_axes(reshape(x, {t, hw, cfg.d}), 0, 1);
            break;
        }
        default: {  // [b,t,h,w,d]
            int64_t b = x.dim(0), t = x.dim(1), hw = x.dim(2) * x.dim(3);
            seq = reshape(swap_axes(reshape(x, {b, t, hw, cfg.d}), 1, 2), {b * hw, t, cfg.d});
        }
    }

    Tensor xh = linear(seq, p.w_down);
    Tensor xbar = gelu(xh);
    Tensor xp = add(add(dmbss_forward(xh, p.block, cfg.dmbss), xh), xbar);
    Tensor delta = linear(xp, p.w_up);

    switch (x.rank()) {
        case 3:
            break;
        case 4: {
            int64_t t = x.dim(0);
            delta = reshape(swap_axes(delta, 0, 1), {t, x.dim(1), x.dim(2), cfg.d});
            break;
        }
        default: {
            int64_t b = x.dim(0), t = x.dim(1), hw = x.dim(2) * x.dim(3);
            delta = reshape(swap_axes(reshape(delta, {b, hw, t, cfg.d}), 1, 2), x.shape());
        }
    }
    return add(delta, x);
}

void ToyBackboneConfig::validate() const {
    if (d < 1 || blocks < 1 || hidden_mult < 1 || conv_k < 1)
        throw ConfigError("toy backbone: all dimensions must be >= 1");
}

ToyBackbone toy_backbone_init(const ToyBackboneConfig& cfg, DType dt) {
    cfg.validate();
    RandomStream rng(cfg.seed);
    ToyBackbone bb;
    bb.cfg = cfg;
    int64_t h = cfg.d * cfg.hidden_mult;
    for (int64_t i = 0; i < cfg.blocks; ++i) {
        ToyBlock blk;
        blk.w1 = Tensor::uniform_fan_in({cfg.d, h}, cfg.d, rng, dt, false);
        blk.b1 = Tensor::zeros({h}, dt);
        blk.w2 = Tensor::uniform_fan_in({h, cfg.d}, h, rng, dt, false);
        blk.b2 = Tensor::zeros({cfg.d}, dt);
        blk.conv_w = Tensor::uniform_fan_in({cfg.d, cfg.conv_k}, cfg.conv_k, rng, dt, false);
        bb.blocks.push_back(std::move(blk));
    }
    return bb;
}

namespace {

Tensor toy_block_forward(const Tensor& x, const ToyBlock& blk) {
    Tensor h = linear(gelu(linear(x, blk.w1, blk.b1)), blk.w2, blk.b2);
    Tensor mixed = swap_axes(conv1d_depthwise(swap_axes(h, 1, 2), blk.conv_w), 1, 2);
    return add(x, mixed);
}

}  // namespace

Tensor toy_backbone_forward(const Tensor& x, const ToyBackbone& bb) {
    if (x.rank() != 3 || x.dim(2) != bb.cfg.d)
        throw ShapeError("toy backbone: expected [b,t," + std::to_string(bb.cfg.d) + "], got " +
                         shape_str(x.shape()));
    Tensor h = x;
    for (const auto& blk : bb.blocks) h = toy_block_forward(h, blk);
    return h;
}

std::vector<Tensor> toy_backbone_tensors(const ToyBackbone& bb) {
    std::vector<Tensor> out;
    for (const auto& blk : bb.blocks)
        for (const Tensor& t : {blk.w1, blk.b1, blk.w2, blk.b2, blk.conv_w}) out.push_back(t);
    return out;
}

AdaptedModel adapt_backbone(const ToyBackbone& bb, const SstaConfig& scfg, uint64_t seed,
                            int64_t insert_every) {
    scfg.validate();
    if (scfg.d != bb.cfg.d)
        throw ConfigError("adapt_backbone: adapter width " + std::to_string(scfg.d) +
                          " does not match backbone width " + std::to_string(bb.cfg.d));
    if (insert_every < 1) throw ConfigError("adapt_backbone: insert_every must be >= 1");

    AdaptedModel m;
    m.bb = bb;
    m.ssta = scfg;
    RandomStream rng(seed);
    DType dt = bb.blocks.empty() ? DType::f64 : bb.blocks[0].w1.dtype();
    for (int64_t i = 0; i < bb.cfg.blocks; ++i) {
        if ((i + 1) % insert_every != 0) continue;
        m.adapters.push_back(ssta_init(scfg, next_seed(rng), dt));
        m.insert_after.push_back(i);
    }
    return m;
}

Tensor adapted_forward(const Tensor& x, const AdaptedModel& m) {
    if (x.rank() != 3 || x.dim(2) != m.bb.cfg.d)
        throw ShapeError("adapted_forward: expected [b,t," + std::to_string(m.bb.cfg.d) +
                         "], got " + shape_str(x.shape()));
    Tensor h = x;
    size_t next = 0;
    for (int64_t i = 0; i < m.bb.cfg.blocks; ++i) {
        h = toy_block_forward(h, m.bb.blocks[size_t(i)]);
        if (next < m.insert_after.size() && m.insert_after[next] == i) {
            h = ssta_forward(h, m.adapters[next], m.ssta);
            ++next;
        }
    }
    return h;
}

std::vector<Tensor> adapted_trainable_params(const AdaptedModel& m) {
    std::vector<Tensor> out;
    for (const auto& a : m.adapters)
        for (auto& t : ssta_collect_params(a)) out.push_back(t);
    return out;
}

NamedTensors adapted_named_params(const AdaptedModel& m) {
    NamedTensors out;
    for (size_t i = 0; i < m.adapters.size(); ++i) {
        auto a = ssta_named_params(m.adapters[i], "ssta." + std::to_string(i) + ".");
        out.insert(out.end(), a.begin(), a.end());
    }
    return out;
}

std::vector<Tensor> adapted_all_tensors(const AdaptedModel& m) {
    std::vector<Tensor> out = toy_backbone_tensors(m.bb);
    for (auto& t : adapted_trainable_params(m)) out.push_back(t);
    return out;
}

ParamCounts count_trainable(const std::vector<Tensor>& tensors) {
    ParamCounts c;
    for (const auto& t : tensors) {
        if (!t.defined()) throw ValueError("count_trainable: undefined tensor");
        (t.requires_grad() ? c.trainable : c.frozen) += t.numel();
    }
    return c;
}

}  // namespace ssmtad
