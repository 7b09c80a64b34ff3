#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "ssmtad/detector.hpp"
#include "ssmtad/optim.hpp"

using namespace ssmtad;

namespace {

DetectorConfig small_cfg() {
    DetectorConfig cfg;
    cfg.c_in = 6;
    cfg.c = 8;
    cfg.embed_layers = 2;
    cfg.levels = 4;
    cfg.num_classes = 3;
    cfg.trunk_layers = 1;
    cfg.head_kernel = 3;
    cfg.dmbss.c = 8;
    cfg.dmbss.lambda = 2;
    cfg.dmbss.n = 2;
    cfg.dmbss.conv_k = 3;
    return cfg;
}

Tensor rand_input(int64_t b, int64_t t, int64_t c, RandomStream& rng) {
    std::vector<double> v(size_t(b * t * c));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from_vector({b, t, c}, v);
}

void zero_all(const std::vector<Tensor>& ts) {
    for (auto t : ts) t.fill_(0.0);
}

// kills every path that could move features: pyramid norms and blocks,
// the fusion block and its pre-norm; post-norm keeps its identity init
void zero_mixing(DetectorParams& p) {
    for (auto& g : p.ln_g) g.fill_(0.0);
    for (auto& b : p.ln_b) b.fill_(0.0);
    for (auto& blk : p.blocks) zero_all(dmbss_collect_params(blk));
    p.fuse_ln_pre_g.fill_(0.0);
    p.fuse_ln_pre_b.fill_(0.0);
    zero_all(dmbss_collect_params(p.fuse_block));
}

void zero_heads(DetectorParams& p) {
    for (auto& w : p.trunk_w) w.fill_(0.0);
    for (auto& b : p.trunk_b) b.fill_(0.0);
    p.cls_w.fill_(0.0);
    p.cls_b.fill_(0.0);
    p.reg_w.fill_(0.0);
    p.reg_b.fill_(0.0);
}

// ceil-mode window-2 stride-2 max over time, by hand
std::vector<double> pool2(const std::vector<double>& v, int64_t t, int64_t c) {
    int64_t to = (t + 1) / 2;
    std::vector<double> out(size_t(to * c));
    for (int64_t i = 0; i < to; ++i)
        for (int64_t k = 0; k < c; ++k) {
            double m = v[size_t((2 * i) * c + k)];
            if (2 * i + 1 < t) m = std::max(m, v[size_t((2 * i + 1) * c + k)]);
            out[size_t(i * c + k)] = m;
        }
    return out;
}

std::vector<double> ln_rows(const std::vector<double>& v, int64_t c, double eps = 1e-5) {
    std::vector<double> out(v.size());
    int64_t rows = int64_t(v.size()) / c;
    for (int64_t r = 0; r < rows; ++r) {
        double mean = 0;
        for (int64_t k = 0; k < c; ++k) mean += v[size_t(r * c + k)];
        mean /= double(c);
        double var = 0;
        for (int64_t k = 0; k < c; ++k) {
            double d = v[size_t(r * c + k)] - mean;
            var += d * d;
        }
        var /= double(c);
        for (int64_t k = 0; k < c; ++k)
            out[size_t(r * c + k)] = (v[size_t(r * c + k)] - mean) / std::sqrt(var + eps);
    }
    return out;
}

GlobalSequence hand_seq(const std::vector<int64_t>& lengths, const std::vector<int64_t>& strides) {
    GlobalSequence seq;
    int64_t off = 0;
    for (size_t l = 0; l < lengths.size(); ++l) {
        seq.offsets.push_back(off);
        seq.lengths.push_back(lengths[l]);
        seq.strides.push_back(strides[l]);
        off += lengths[l];
    }
    return seq;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    auto va = a.to_vector(), vb = b.to_vector();
    REQUIRE(va.size() == vb.size());
    double m = 0;
    for (size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
    return m;
}

}  // namespace

TEST_CASE("pyramid halves each level and the finest level stays unpooled") {
    DetectorConfig cfg = small_cfg();
    RandomStream rng(11);
    DetectorParams p = detector_init(cfg, 7);

    Tensor x = rand_input(1, 16, cfg.c_in, rng);
    auto pyr = pyramid_forward(embed_forward(x, p, cfg), p, cfg);
    REQUIRE(pyr.levels.size() == 4);
    std::vector<int64_t> want_t{16, 8, 4, 2}, want_s{1, 2, 4, 8};
    for (size_t l = 0; l < 4; ++l) {
        CHECK(pyr.levels[l].dim(1) == want_t[l]);
        CHECK(pyr.levels[l].dim(2) == cfg.c);
        CHECK(pyr.strides[l] == want_s[l]);
    }

    // odd lengths round up (ceil-mode pooling)
    Tensor x13 = rand_input(1, 13, cfg.c_in, rng);
    auto pyr13 = pyramid_forward(embed_forward(x13, p, cfg), p, cfg);
    CHECK(pyr13.levels[1].dim(1) == 7);
    CHECK(pyr13.levels[2].dim(1) == 4);
    CHECK(pyr13.levels[3].dim(1) == 2);

    // too short for the requested depth
    Tensor x7 = rand_input(1, 7, cfg.c_in, rng);
    CHECK_THROWS_AS(pyramid_forward(embed_forward(x7, p, cfg), p, cfg), ValueError);

    // fused bookkeeping is a bijection
    auto seq = global_fusion(pyr, p, cfg);
    CHECK(seq.total() == 30);
    CHECK(seq.f.dim(1) == 30);
    for (int64_t pos = 0; pos < 30; ++pos) {
        auto [l, i] = seq.level_of(pos);
        CHECK(seq.offsets[size_t(l)] + i == pos);
        CHECK(i < seq.lengths[size_t(l)]);
    }
    CHECK_THROWS_AS(seq.level_of(30), ValueError);
}

TEST_CASE("zeroed blocks reduce the pyramid to pooling and fusion to layer norm") {
    DetectorConfig cfg = small_cfg();
    RandomStream rng(21);
    DetectorParams p = detector_init(cfg, 9);
    zero_mixing(p);
    zero_heads(p);

    Tensor x = rand_input(1, 16, cfg.c_in, rng);
    Tensor f0 = embed_forward(x, p, cfg);
    auto pyr = pyramid_forward(f0, p, cfg);

    CHECK(max_abs_diff(pyr.levels[0], f0) == 0.0);  // finest level untouched
    std::vector<double> cur = f0.to_vector();
    int64_t t = 16;
    for (size_t l = 1; l < 4; ++l) {
        cur = pool2(cur, t, cfg.c);
        t = (t + 1) / 2;
        auto got = pyr.levels[l].to_vector();
        REQUIRE(got.size() == cur.size());
        for (size_t i = 0; i < cur.size(); ++i) CHECK(got[i] == cur[i]);
    }

    // fusion collapses to a plain layer norm of the concatenated pyramid
    auto seq = global_fusion(pyr, p, cfg);
    std::vector<double> flat;
    for (auto& lvl : pyr.levels) {
        auto v = lvl.to_vector();
        flat.insert(flat.end(), v.begin(), v.end());
    }
    auto want = ln_rows(flat, cfg.c);
    auto got = seq.f.to_vector();
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));

    // zeroed heads: probability one half everywhere, offsets log 2
    auto out = heads_forward(seq, p, cfg);
    for (double v : out.cls_logits.to_vector()) CHECK(v == 0.0);
    for (double v : sigmoid(out.cls_logits).to_vector()) CHECK(v == doctest::Approx(0.5));
    for (double v : out.reg_offsets.to_vector())
        CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("regression ranges double per level, first from zero, last unbounded") {
    DetectorConfig cfg = small_cfg();
    cfg.levels = 7;
    auto r = level_ranges(cfg);
    REQUIRE(r.size() == 7);
    CHECK(r[0].first == 0.0);
    CHECK(r[0].second == 4.0);
    CHECK(r[1] == std::pair<double, double>{4.0, 8.0});
    CHECK(r[2] == std::pair<double, double>{8.0, 16.0});
    CHECK(r[5] == std::pair<double, double>{64.0, 128.0});
    CHECK(r[6].first == 128.0);
    CHECK(std::isinf(r[6].second));
}

TEST_CASE("target assignment lands centered anchors on the matching scale") {
    DetectorConfig cfg = small_cfg();
    cfg.levels = 7;
    auto seq = hand_seq({128, 64, 32, 16, 8, 4, 2}, {1, 2, 4, 8, 16, 32, 64});

    std::vector<std::vector<FrameGt>> gts = {{{10.0, 30.0, 2}}};
    Targets tgt = assign_targets(gts, seq, cfg);
    CHECK(tgt.num_pos == 3);

    // length 20 at center 20: only stride-4 anchors 16, 20, 24 qualify
    std::vector<int64_t> want_pos = {seq.offsets[2] + 4, seq.offsets[2] + 5, seq.offsets[2] + 6};
    for (int64_t pos = 0; pos < seq.total(); ++pos) {
        bool want = std::find(want_pos.begin(), want_pos.end(), pos) != want_pos.end();
        CHECK(tgt.labels[0][size_t(pos)] == (want ? 2 : -1));
        if (want) {
            auto [l, i] = seq.level_of(pos);
            double s = double(seq.strides[size_t(l)]);
            double a = double(i) * s;
            // offsets reconstruct the segment exactly
            CHECK(a - tgt.d_start[0][size_t(pos)] * s == 10.0);
            CHECK(a + tgt.d_end[0][size_t(pos)] * s == 30.0);
        }
    }
}

TEST_CASE("overlapping ground truths resolve to the shortest one") {
    DetectorConfig cfg = small_cfg();
    cfg.levels = 7;
    auto seq = hand_seq({128, 64, 32, 16, 8, 4, 2}, {1, 2, 4, 8, 16, 32, 64});

    // same center, lengths 8 and 12, both eligible at stride-2 anchor 20
    std::vector<std::vector<FrameGt>> gts = {{{16.0, 24.0, 0}, {14.0, 26.0, 1}}};
    Targets tgt = assign_targets(gts, seq, cfg);
    int64_t pos20 = seq.offsets[1] + 10;  // level 1, index 10, anchor 20
    CHECK(tgt.labels[0][size_t(pos20)] == 0);

    // the longer one still owns scales where the short one is out of range
    bool longer_seen = false;
    for (int64_t pos = 0; pos < seq.total(); ++pos)
        if (tgt.labels[0][size_t(pos)] == 1) longer_seen = true;
    CHECK(!longer_seen);  // len 12 max offset 6..12 never fits [8,16) centered

    // distinct scales: len 8 on stride 2, len 16 on stride 4, same center
    std::vector<std::vector<FrameGt>> gts2 = {{{16.0, 24.0, 0}, {12.0, 28.0, 1}}};
    Targets tgt2 = assign_targets(gts2, seq, cfg);
    CHECK(tgt2.labels[0][size_t(seq.offsets[1] + 10)] == 0);  // stride 2, anchor 20
    CHECK(tgt2.labels[0][size_t(seq.offsets[2] + 5)] == 1);   // stride 4, anchor 20
}

TEST_CASE("assignment validates labels and clips out-of-extent ground truth") {
    DetectorConfig cfg = small_cfg();
    auto seq = hand_seq({16, 8, 4, 2}, {1, 2, 4, 8});
    CHECK_THROWS_AS(assign_targets({{{2.0, 6.0, 3}}}, seq, cfg), ValueError);
    CHECK_THROWS_AS(assign_targets({{{2.0, 6.0, -1}}}, seq, cfg), ValueError);

    // reaches past t=16 frames, clipped instead of rejected
    Targets tgt = assign_targets({{{12.0, 40.0, 1}}}, seq, cfg);
    for (size_t b = 0; b < tgt.labels.size(); ++b)
        for (int64_t pos = 0; pos < seq.total(); ++pos)
            if (tgt.labels[b][size_t(pos)] >= 0) {
                auto [l, i] = seq.level_of(pos);
                double s = double(seq.strides[size_t(l)]);
                double a = double(i) * s;
                CHECK(a + tgt.d_end[b][size_t(pos)] * s <= 16.0);
            }

    // entirely outside: clipped away, zero positives
    Targets none = assign_targets({{{20.0, 40.0, 1}}}, seq, cfg);
    CHECK(none.num_pos == 0);
}

TEST_CASE("assignment agrees with a direct re-derivation on random instances") {
    DetectorConfig cfg = small_cfg();
    cfg.levels = 5;
    auto seq = hand_seq({64, 32, 16, 8, 4}, {1, 2, 4, 8, 16});
    auto ranges = level_ranges(cfg);
    RandomStream rng(31);

    for (int trial = 0; trial < 20; ++trial) {
        std::vector<FrameGt> gts;
        int n = int(rng.uniform_int(1, 5));
        for (int g = 0; g < n; ++g) {
            double s = rng.uniform(0.0, 56.0);
            double e = s + rng.uniform(2.0, 60.0 - s);
            gts.push_back({s, std::min(e, 63.0), int(rng.uniform_int(0, 2))});
        }
        Targets got = assign_targets({gts}, seq, cfg);

        for (int64_t pos = 0; pos < seq.total(); ++pos) {
            auto [l, i] = seq.level_of(pos);
            double s = double(seq.strides[size_t(l)]);
            double a = double(i) * s;
            int best = -1;
            double best_len = std::numeric_limits<double>::infinity();
            for (size_t gi = 0; gi < gts.size(); ++gi) {
                const auto& g = gts[gi];
                bool inside = a >= g.start && a <= g.end;
                bool centered = std::abs(a - 0.5 * (g.start + g.end)) <= 1.5 * s;
                double off = std::max(a - g.start, g.end - a);
                bool scaled = off >= ranges[size_t(l)].first && off < ranges[size_t(l)].second;
                if (inside && centered && scaled && g.end - g.start < best_len) {
                    best_len = g.end - g.start;
                    best = int(gi);
                }
            }
            CHECK(got.labels[0][size_t(pos)] == (best < 0 ? -1 : gts[size_t(best)].label));
        }
    }
}

TEST_CASE("loss hand values: neutral logits and exact or offset regression") {
    DetectorConfig cfg = small_cfg();
    cfg.num_classes = 1;
    auto seq = hand_seq({4}, {1});

    Targets tgt;
    tgt.labels = {{-1, 0, -1, -1}};
    tgt.d_start = {{0, 1, 0, 0}};
    tgt.d_end = {{0, 1, 0, 0}};
    tgt.num_pos = 1;

    DetectorOutput out;
    out.seq = seq;
    out.cls_logits = Tensor::zeros({1, 4, 1});

    // exact offsets: positive decodes to its target, DIoU vanishes
    out.reg_offsets = Tensor::from_vector({1, 4, 2}, {9, 9, 1, 1, 9, 9, 9, 9});
    DetectorLoss l1 = detector_loss(out, tgt, cfg);
    const double ln2 = std::log(2.0);
    // one positive + three negatives, all at p = 1/2, gamma 2, alpha 1/4:
    // (0.25 + 3 * 0.75) * 0.25 * ln 2
    CHECK(l1.cls == doctest::Approx(2.5 * 0.25 * ln2).epsilon(1e-12));
    CHECK(l1.reg == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(l1.total.item() == doctest::Approx(l1.cls + l1.reg).epsilon(1e-12));

    // shrunken prediction [0.5, 1.5] against target [0, 2]: IoU 1/2,
    // centers coincide, so the loss is exactly 1/2
    out.reg_offsets = Tensor::from_vector({1, 4, 2}, {9, 9, 0.5, 0.5, 9, 9, 9, 9});
    DetectorLoss l2 = detector_loss(out, tgt, cfg);
    CHECK(l2.reg == doctest::Approx(0.5).epsilon(1e-12));

    // confident correct logits push the classification term toward zero
    out.cls_logits = Tensor::from_vector({1, 4, 1}, {-14, 14, -14, -14});
    out.reg_offsets = Tensor::from_vector({1, 4, 2}, {9, 9, 1, 1, 9, 9, 9, 9});
    DetectorLoss l3 = detector_loss(out, tgt, cfg);
    CHECK(l3.cls < 1e-10);
    CHECK(l3.reg == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(l3.total.item() >= 0.0);

    // class count mismatch is rejected
    DetectorConfig bad = cfg;
    bad.num_classes = 2;
    CHECK_THROWS_AS(detector_loss(out, tgt, bad), ShapeError);
}

TEST_CASE("decode maps positions to clipped second-unit segments") {
    auto seq = hand_seq({16}, {4});  // one level, stride 4, t = 64 frames
    const int64_t t_frames = 64;
    const double fps = 4.0;

    std::vector<double> logits(16 * 2, -20.0);
    std::vector<double> regs(16 * 2, std::log(2.0));
    logits[10 * 2 + 1] = 2.0;  // position 10, class 1
    regs[10 * 2 + 0] = 2.0;
    regs[10 * 2 + 1] = 3.0;
    logits[0 * 2 + 0] = 2.0;  // position 0, class 0, start clips at zero
    regs[0 * 2 + 0] = 5.0;
    regs[0 * 2 + 1] = 1.0;

    DetectorOutput out;
    out.seq = seq;
    out.cls_logits = Tensor::from_vector({1, 16, 2}, logits);
    out.reg_offsets = Tensor::from_vector({1, 16, 2}, regs);

    auto dets = detector_decode(out, "v", fps, t_frames, DecodeConfig{});
    REQUIRE(dets.size() == 2);
    double want_score = 1.0 / (1.0 + std::exp(-2.0));
    for (const auto& d : dets) {
        CHECK(d.video_id == "v");
        CHECK(d.score == doctest::Approx(want_score));
        if (d.label == 1) {
            // (10 - 2) * 4 .. (10 + 3) * 4 frames, over 4 fps
            CHECK(d.seg.start == doctest::Approx(8.0));
            CHECK(d.seg.end == doctest::Approx(13.0));
        } else {
            CHECK(d.label == 0);
            CHECK(d.seg.start == doctest::Approx(0.0));
            CHECK(d.seg.end == doctest::Approx(1.0));
        }
    }

    DetectorOutput batch2;
    batch2.seq = seq;
    batch2.cls_logits = Tensor::zeros({2, 16, 2});
    batch2.reg_offsets = Tensor::zeros({2, 16, 2});
    CHECK_THROWS_AS(detector_decode(batch2, "v", fps, t_frames, DecodeConfig{}), ValueError);
}

TEST_CASE("decode inverts assignment when outputs are crafted from targets") {
    DetectorConfig cfg = small_cfg();
    auto seq = hand_seq({64, 32, 16, 8}, {1, 2, 4, 8});
    const int64_t t_frames = 64;

    std::vector<std::vector<FrameGt>> gts = {
        {{5.0, 11.0, 0}, {20.0, 52.0, 2}, {40.0, 44.0, 1}}};
    Targets tgt = assign_targets(gts, seq, cfg);
    REQUIRE(tgt.num_pos > 0);

    int64_t tot = seq.total();
    std::vector<double> logits(size_t(tot * cfg.num_classes), -20.0);
    std::vector<double> regs(size_t(tot * 2), std::log(2.0));
    for (int64_t pos = 0; pos < tot; ++pos) {
        int lab = tgt.labels[0][size_t(pos)];
        if (lab < 0) continue;
        logits[size_t(pos * cfg.num_classes + lab)] = 3.0;
        regs[size_t(pos * 2 + 0)] = tgt.d_start[0][size_t(pos)];
        regs[size_t(pos * 2 + 1)] = tgt.d_end[0][size_t(pos)];
    }
    DetectorOutput out;
    out.seq = seq;
    out.cls_logits = Tensor::from_vector({1, tot, cfg.num_classes}, logits);
    out.reg_offsets = Tensor::from_vector({1, tot, 2}, regs);

    auto dets = detector_decode(out, "v", 1.0, t_frames, DecodeConfig{});
    for (const auto& g : gts[0]) {
        bool found = false;
        for (const auto& d : dets)
            if (d.label == g.label && std::abs(d.seg.start - g.start) < 1e-9 &&
                std::abs(d.seg.end - g.end) < 1e-9)
                found = true;
        CHECK(found);
    }
    // nothing but the crafted positives clears the score threshold
    for (const auto& d : dets) {
        bool matches_gt = false;
        for (const auto& g : gts[0])
            if (d.label == g.label && std::abs(d.seg.start - g.start) < 1e-9 &&
                std::abs(d.seg.end - g.end) < 1e-9)
                matches_gt = true;
        CHECK(matches_gt);
    }
}

TEST_CASE("soft nms decays by overlap within one video and class only") {
    auto inst = [](const std::string& vid, int label, double s, double e, double score) {
        ActionInstance a;
        a.video_id = vid;
        a.label = label;
        a.seg = {s, e};
        a.score = score;
        return a;
    };

    // identical segments: survivor keeps its score, the other decays e^-2
    auto r1 = soft_nms({inst("v", 0, 1, 2, 0.9), inst("v", 0, 1, 2, 0.8)}, 0.5, 1e-3);
    REQUIRE(r1.size() == 2);
    CHECK(r1[0].score == doctest::Approx(0.9));
    CHECK(r1[1].score == doctest::Approx(0.8 * std::exp(-2.0)));

    // disjoint segments: untouched
    auto r2 = soft_nms({inst("v", 0, 1, 2, 0.9), inst("v", 0, 5, 6, 0.8)}, 0.5, 1e-3);
    REQUIRE(r2.size() == 2);
    CHECK(r2[1].score == doctest::Approx(0.8));

    // other class or other video: untouched
    auto r3 = soft_nms({inst("v", 0, 1, 2, 0.9), inst("v", 1, 1, 2, 0.8),
                        inst("w", 0, 1, 2, 0.7)},
                       0.5, 1e-3);
    REQUIRE(r3.size() == 3);
    CHECK(r3[1].score == doctest::Approx(0.8));
    CHECK(r3[2].score == doctest::Approx(0.7));

    // min_score drops decayed candidates entirely
    auto r4 = soft_nms({inst("v", 0, 1, 2, 0.9), inst("v", 0, 1, 2, 0.8)}, 0.5, 0.2);
    REQUIRE(r4.size() == 1);
    CHECK(r4[0].score == doctest::Approx(0.9));

    // max_keep truncates the merged descending list
    auto r5 = soft_nms({inst("v", 0, 1, 2, 0.9), inst("v", 0, 5, 6, 0.8),
                        inst("v", 0, 9, 10, 0.7)},
                       0.5, 1e-3, 2);
    REQUIRE(r5.size() == 2);
    CHECK(r5[0].score == doctest::Approx(0.9));
    CHECK(r5[1].score == doctest::Approx(0.8));

    // scores come out non-increasing
    RandomStream rng(47);
    std::vector<ActionInstance> many;
    for (int i = 0; i < 30; ++i) {
        double s = rng.uniform(0.0, 50.0);
        many.push_back(inst("v", int(rng.uniform_int(0, 1)), s, s + rng.uniform(1.0, 10.0),
                            rng.uniform(0.05, 1.0)));
    }
    auto r6 = soft_nms(many, 0.5, 1e-3);
    for (size_t i = 1; i < r6.size(); ++i) CHECK(r6[i - 1].score >= r6[i].score);

    CHECK_THROWS_AS(soft_nms({}, 0.0, 1e-3), ValueError);
}

TEST_CASE("fusion moves information across pyramid levels") {
    DetectorConfig cfg = small_cfg();
    DetectorParams p = detector_init(cfg, 13);
    zero_mixing(p);
    // restore only the fusion block so it is the sole mixer
    DetectorParams fresh = detector_init(cfg, 13);
    auto dst = dmbss_collect_params(p.fuse_block);
    auto src = dmbss_collect_params(fresh.fuse_block);
    for (size_t i = 0; i < dst.size(); ++i) dst[i].copy_from(src[i]);
    p.fuse_ln_pre_g.fill_(1.0);

    RandomStream rng(51);
    Tensor x = rand_input(1, 16, cfg.c_in, rng);
    std::vector<double> xv = x.to_vector();
    std::vector<double> xv2 = xv;
    xv2[size_t(12 * cfg.c_in + 3)] += 0.7;  // frame 12, one channel
    Tensor x2 = Tensor::from_vector({1, 16, cfg.c_in}, xv2);

    auto run = [&](const Tensor& in) {
        return global_fusion(pyramid_forward(embed_forward(in, p, cfg), p, cfg), p, cfg);
    };
    auto s1 = run(x), s2 = run(x2);

    // with mixing zeroed, the pyramid itself is local: embedding has a
    // k=3 stack (radius 2), so frame 0 cannot see frame 12 before fusion
    auto p1 = pyramid_forward(embed_forward(x, p, cfg), p, cfg);
    auto p2 = pyramid_forward(embed_forward(x2, p, cfg), p, cfg);
    auto l0a = p1.levels[0].to_vector(), l0b = p2.levels[0].to_vector();
    for (int64_t k = 0; k < cfg.c; ++k) CHECK(l0a[size_t(k)] == l0b[size_t(k)]);

    // after fusion the same fused position 0 responds to the frame-12 edit
    auto f1 = s1.f.to_vector(), f2 = s2.f.to_vector();
    double d0 = 0;
    for (int64_t k = 0; k < cfg.c; ++k)
        d0 = std::max(d0, std::abs(f1[size_t(k)] - f2[size_t(k)]));
    CHECK(d0 > 1e-12);

    // and every level's fused slice feels it
    for (size_t l = 0; l < 4; ++l) {
        double dl = 0;
        int64_t base = s1.offsets[l] * cfg.c;
        for (int64_t k = 0; k < s1.lengths[l] * cfg.c; ++k)
            dl = std::max(dl, std::abs(f1[size_t(base + k)] - f2[size_t(base + k)]));
        CHECK(dl > 1e-12);
    }
}

TEST_CASE("every detector parameter receives a finite-difference-correct gradient") {
    DetectorConfig cfg;
    cfg.c_in = 3;
    cfg.c = 4;
    cfg.embed_layers = 1;
    cfg.levels = 2;
    cfg.num_classes = 2;
    cfg.trunk_layers = 1;
    cfg.head_kernel = 3;
    cfg.dmbss.c = 4;
    cfg.dmbss.lambda = 2;
    cfg.dmbss.n = 2;
    cfg.dmbss.conv_k = 2;
    DetectorParams p = detector_init(cfg, 23);

    RandomStream rng(61);
    std::vector<double> xv(size_t(1 * 4 * 3));
    for (auto& v : xv) v = rng.uniform(-1.0, 1.0);
    Tensor x = Tensor::from_vector({1, 4, 3}, xv);
    x.set_requires_grad(true);

    std::vector<std::vector<FrameGt>> gts = {{{0.5, 3.5, 1}}};
    std::vector<Tensor> params = detector_collect_params(p);
    params.push_back(x);

    auto f = [&](const std::vector<Tensor>&) {
        auto out = detector_forward(x, p, cfg);
        Targets tgt = assign_targets(gts, out.seq, cfg);
        return detector_loss(out, tgt, cfg).total;
    };
    auto rep = grad_check(f, params, 1e-5, 4);
    INFO("worst: ", rep.worst_param, "[", rep.worst_index, "] analytic ", rep.analytic,
         " numeric ", rep.numeric);
    CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("named parameters are unique, cover the collect list, and apply back") {
    DetectorConfig cfg = small_cfg();
    DetectorParams p = detector_init(cfg, 33);
    auto named = detector_named_params(p);
    auto flat = detector_collect_params(p);
    REQUIRE(named.size() == flat.size());
    std::vector<std::string> names;
    for (size_t i = 0; i < named.size(); ++i) {
        names.push_back(named[i].first);
        CHECK(named[i].second.node() == flat[i].node());
    }
    std::sort(names.begin(), names.end());
    CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
}

TEST_CASE("the detector overfits one synthetic sequence") {
    DetectorConfig cfg;
    cfg.c_in = 4;
    cfg.c = 8;
    cfg.embed_layers = 2;
    cfg.levels = 3;
    cfg.num_classes = 2;
    cfg.trunk_layers = 1;
    cfg.head_kernel = 3;
    cfg.dmbss.c = 8;
    cfg.dmbss.lambda = 2;
    cfg.dmbss.n = 2;
    cfg.dmbss.conv_k = 3;
    DetectorParams p = detector_init(cfg, 101);

    // one clean bump on channel 0 over frames [8, 24)
    RandomStream rng(71);
    const int64_t t = 32;
    std::vector<double> xv(size_t(t * cfg.c_in));
    for (auto& v : xv) v = 0.05 * rng.normal();
    for (int64_t i = 8; i < 24; ++i) xv[size_t(i * cfg.c_in + 0)] += 1.5;
    Tensor x = Tensor::from_vector({1, t, cfg.c_in}, xv);
    std::vector<std::vector<FrameGt>> gts = {{{8.0, 24.0, 0}}};

    AdamWConfig ocfg;
    ocfg.weight_decay = 1e-4;
    AdamW opt(detector_collect_params(p), ocfg);
    double initial = -1, current = -1;
    for (int step = 0; step < 500; ++step) {
        auto out = detector_forward(x, p, cfg);
        Targets tgt = assign_targets(gts, out.seq, cfg);
        REQUIRE(tgt.num_pos > 0);
        DetectorLoss loss = detector_loss(out, tgt, cfg);
        current = loss.total.item();
        if (step == 0) initial = current;
        if (current < 0.05 * initial) break;
        opt.zero_grad();
        backward(loss.total);
        opt.step(lr_schedule(step, 500, 25, 0.01));
    }
    INFO("initial ", initial, " final ", current);
    CHECK(current < 0.05 * initial);
}
