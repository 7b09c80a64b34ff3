#include "ssmtad/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

namespace ssmtad {

void DetectorConfig::validate() const {
    if (c_in < 1 || c < 1) throw ConfigError("detector: channel widths must be >= 1");
    if (embed_layers < 1) throw ConfigError("detector: embed_layers must be >= 1");
    if (levels < 1) throw ConfigError("detector: levels must be >= 1");
    if (num_classes < 1) throw ConfigError("detector: num_classes must be >= 1");
    if (trunk_layers < 1) throw ConfigError("detector: trunk_layers must be >= 1");
    if (head_kernel < 1 || head_kernel % 2 == 0)
        throw ConfigError("detector: head_kernel must be odd (same padding)");
    if (!(r0 > 0)) throw ConfigError("detector: r0 must be positive");
    if (!(center_radius > 0)) throw ConfigError("detector: center_radius must be positive");
    if (dmbss.c != c)
        throw ConfigError("detector: dmbss.c (" + std::to_string(dmbss.c) +
                          ") must equal model width c (" + std::to_string(c) + ")");
    dmbss.validate();
}

namespace {

Tensor ones_param(int64_t n, DType dt) {
    return Tensor::param({n}, std::vector<double>(size_t(n), 1.0), dt);
}

uint64_t next_seed(RandomStream& rng) {
    return uint64_t(rng.uniform_int(0, std::numeric_limits<int64_t>::max()));
}

}  // namespace

DetectorParams detector_init(const DetectorConfig& cfg, uint64_t seed, DType dt) {
    cfg.validate();
    RandomStream rng(seed);
    DetectorParams p;

    int64_t prev = cfg.c_in;
    for (int64_t i = 0; i < cfg.embed_layers; ++i) {
        p.embed_w.push_back(Tensor::uniform_fan_in({cfg.c, prev, 3}, prev * 3, rng, dt));
        p.embed_b.push_back(Tensor::zeros({cfg.c}, dt, true));
        prev = cfg.c;
    }
    for (int64_t l = 0; l < cfg.levels; ++l) {
        p.ln_g.push_back(ones_param(cfg.c, dt));
        p.ln_b.push_back(Tensor::zeros({cfg.c}, dt, true));
        p.blocks.push_back(dmbss_init(cfg.dmbss, next_seed(rng), dt));
    }
    p.fuse_ln_pre_g = ones_param(cfg.c, dt);
    p.fuse_ln_pre_b = Tensor::zeros({cfg.c}, dt, true);
    p.fuse_block = dmbss_init(cfg.dmbss, next_seed(rng), dt);
    p.fuse_ln_post_g = ones_param(cfg.c, dt);
    p.fuse_ln_post_b = Tensor::zeros({cfg.c}, dt, true);

    for (int64_t i = 0; i < cfg.trunk_layers; ++i) {
        p.trunk_w.push_back(
            Tensor::uniform_fan_in({cfg.c, cfg.c, cfg.head_kernel}, cfg.c * cfg.head_kernel, rng, dt));
        p.trunk_b.push_back(Tensor::zeros({cfg.c}, dt, true));
    }
    p.cls_w = Tensor::uniform_fan_in({cfg.num_classes, cfg.c, cfg.head_kernel},
                                     cfg.c * cfg.head_kernel, rng, dt);
    // start near prior probability 0.01 so the focal background term is calm
    double prior_bias = -std::log(99.0);
    p.cls_b = Tensor::param({cfg.num_classes},
                            std::vector<double>(size_t(cfg.num_classes), prior_bias), dt);
    p.reg_w = Tensor::uniform_fan_in({2, cfg.c, cfg.head_kernel}, cfg.c * cfg.head_kernel, rng, dt);
    p.reg_b = Tensor::zeros({2}, dt, true);
    return p;
}

NamedTensors detector_named_params(const DetectorParams& p) {
    NamedTensors out;
    for (size_t i = 0; i < p.embed_w.size(); ++i) {
        out.emplace_back("embed." + std::to_string(i) + ".w", p.embed_w[i]);
        out.emplace_back("embed." + std::to_string(i) + ".b", p.embed_b[i]);
    }
    for (size_t l = 0; l < p.blocks.size(); ++l) {
        std::string pre = "pyr." + std::to_string(l) + ".";
        out.emplace_back(pre + "ln.g", p.ln_g[l]);
        out.emplace_back(pre + "ln.b", p.ln_b[l]);
        auto block = dmbss_named_params(p.blocks[l], pre + "dmbss.");
        out.insert(out.end(), block.begin(), block.end());
    }
    out.emplace_back("fuse.ln_pre.g", p.fuse_ln_pre_g);
    out.emplace_back("fuse.ln_pre.b", p.fuse_ln_pre_b);
    auto fuse = dmbss_named_params(p.fuse_block, "fuse.dmbss.");
    out.insert(out.end(), fuse.begin(), fuse.end());
    out.emplace_back("fuse.ln_post.g", p.fuse_ln_post_g);
    out.emplace_back("fuse.ln_post.b", p.fuse_ln_post_b);
    for (size_t i = 0; i < p.trunk_w.size(); ++i) {
        out.emplace_back("head.trunk." + std::to_string(i) + ".w", p.trunk_w[i]);
        out.emplace_back("head.trunk." + std::to_string(i) + ".b", p.trunk_b[i]);
    }
    out.emplace_back("head.cls.w", p.cls_w);
    out.emplace_back("head.cls.b", p.cls_b);
    out.emplace_back("head.reg.w", p.reg_w);
    out.emplace_back("head.reg.b", p.reg_b);
    return out;
}

std::vector<Tensor> detector_collect_params(const DetectorParams& p) {
    std::vector<Tensor> out;
    for (auto& [name, t] : detector_named_params(p)) out.push_back(t);
    return out;
}

Tensor embed_forward(const Tensor& x, const DetectorParams& p, const DetectorConfig& cfg) {
    if (x.rank() != 3 || x.dim(2) != cfg.c_in)
        throw ShapeError("embed_forward: expected [b,t," + std::to_string(cfg.c_in) + "], got " +
                         shape_str(x.shape()));
    Tensor h = swap_axes(x, 1, 2);
    for (size_t i = 0; i < p.embed_w.size(); ++i) {
        if (i > 0) h = relu(h);
        h = conv1d(h, p.embed_w[i], p.embed_b[i], Pad1d::same);
    }
    return swap_axes(h, 1, 2);
}

PyramidFeatures pyramid_forward(const Tensor& f0, const DetectorParams& p,
                                const DetectorConfig& cfg) {
    if (f0.rank() != 3 || f0.dim(2) != cfg.c)
        throw ShapeError("pyramid_forward: expected [b,t," + std::to_string(cfg.c) + "], got " +
                         shape_str(f0.shape()));
    int64_t t = f0.dim(1);
    if (t < (int64_t(1) << (cfg.levels - 1)))
        throw ValueError("pyramid_forward: length " + std::to_string(t) + " too short for " +
                         std::to_string(cfg.levels) + " levels");
    PyramidFeatures pyr;
    Tensor f = f0;
    for (int64_t l = 0; l < cfg.levels; ++l) {
        Tensor z = dmbss_forward(layer_norm(f, p.ln_g[size_t(l)], p.ln_b[size_t(l)]),
                                 p.blocks[size_t(l)], cfg.dmbss);
        Tensor fp = add(z, f);
        Tensor fl = l == 0 ? fp : swap_axes(maxpool1d(swap_axes(fp, 1, 2), 2, 2), 1, 2);
        pyr.levels.push_back(fl);
        pyr.strides.push_back(int64_t(1) << l);
        f = fl;
    }
    return pyr;
}

int64_t GlobalSequence::total() const {
    int64_t n = 0;
    for (int64_t len : lengths) n += len;
    return n;
}

std::pair<int, int64_t> GlobalSequence::level_of(int64_t pos) const {
    for (size_t l = 0; l < lengths.size(); ++l)
        if (pos < offsets[l] + lengths[l]) return {int(l), pos - offsets[l]};
    throw ValueError("level_of: position " + std::to_string(pos) + " out of range");
}

GlobalSequence global_fusion(const PyramidFeatures& pyr, const DetectorParams& p,
                             const DetectorConfig& cfg) {
    if (pyr.levels.empty()) throw ValueError("global_fusion: empty pyramid");
    GlobalSequence seq;
    int64_t off = 0;
    for (size_t l = 0; l < pyr.levels.size(); ++l) {
        seq.offsets.push_back(off);
        seq.lengths.push_back(pyr.levels[l].dim(1));
        seq.strides.push_back(pyr.strides[l]);
        off += pyr.levels[l].dim(1);
    }
    Tensor f = concat(pyr.levels, 1);
    Tensor z = dmbss_forward(layer_norm(f, p.fuse_ln_pre_g, p.fuse_ln_pre_b), p.fuse_block,
                             cfg.dmbss);
    seq.f = layer_norm(add(z, f), p.fuse_ln_post_g, p.fuse_ln_post_b);
    return seq;
}

DetectorOutput heads_forward(const GlobalSequence& seq, const DetectorParams& p,
                             const DetectorConfig& cfg) {
    if (seq.f.dim(2) != cfg.c)
        throw ShapeError("heads_forward: fused width " + std::to_string(seq.f.dim(2)) +
                         " does not match config c " + std::to_string(cfg.c));
    Tensor h = swap_axes(seq.f, 1, 2);
    for (size_t i = 0; i < p.trunk_w.size(); ++i)
        h = relu(conv1d(h, p.trunk_w[i], p.trunk_b[i], Pad1d::same));
    DetectorOutput out;
    out.cls_logits = swap_axes(conv1d(h, p.cls_w, p.cls_b, Pad1d::same), 1, 2);
    out.reg_offsets = softplus(swap_axes(conv1d(h, p.reg_w, p.reg_b, Pad1d::same), 1, 2));
    out.seq = seq;
    return out;
}

DetectorOutput detector_forward(const Tensor& x, const DetectorParams& p,
                                const DetectorConfig& cfg) {
    return heads_forward(global_fusion(pyramid_forward(embed_forward(x, p, cfg), p, cfg), p, cfg),
                         p, cfg);
}

std::vector<std::pair<double, double>> level_ranges(const DetectorConfig& cfg) {
    std::vector<std::pair<double, double>> out;
    for (int64_t l = 0; l < cfg.levels; ++l) {
        double lo = l == 0 ? 0.0 : cfg.r0 * double(int64_t(1) << l);
        double hi = l == cfg.levels - 1 ? std::numeric_limits<double>::infinity()
                                        : cfg.r0 * double(int64_t(1) << (l + 1));
        out.emplace_back(lo, hi);
    }
    return out;
}

Targets assign_targets(const std::vector<std::vector<FrameGt>>& gts, const GlobalSequence& seq,
                       const DetectorConfig& cfg) {
    int64_t tot = seq.total();
    double t_frames = double(seq.lengths[0] * seq.strides[0]);
    auto ranges = level_ranges(cfg);

    Targets tgt;
    for (const auto& sample : gts) {
        std::vector<FrameGt> clipped;
        for (FrameGt g : sample) {
            if (g.label < 0 || g.label >= int(cfg.num_classes))
                throw ValueError("assign_targets: label " + std::to_string(g.label) +
                                 " outside [0," + std::to_string(cfg.num_classes) + ")");
            if (g.start < 0 || g.end > t_frames) {
                std::fprintf(stderr, "warning: GT [%g,%g) clipped to sequence extent [0,%g)\n",
                             g.start, g.end, t_frames);
                g.start = std::max(g.start, 0.0);
                g.end = std::min(g.end, t_frames);
            }
            if (!(g.start < g.end)) {
                std::fprintf(stderr, "warning: GT degenerate after clipping, dropped\n");
                continue;
            }
            clipped.push_back(g);
        }

        std::vector<int> labels(size_t(tot), -1);
        std::vector<double> ds(size_t(tot), 0.0), de(size_t(tot), 0.0);
        for (int64_t pos = 0; pos < tot; ++pos) {
            auto [l, i] = seq.level_of(pos);
            double s = double(seq.strides[size_t(l)]);
            double a = double(i) * s;
            int best = -1;
            double best_len = std::numeric_limits<double>::infinity();
            for (size_t gi = 0; gi < clipped.size(); ++gi) {
                const auto& g = clipped[gi];
                if (a < g.start || a > g.end) continue;
                if (std::abs(a - 0.5 * (g.start + g.end)) > cfg.center_radius * s) continue;
                double off = std::max(a - g.start, g.end - a);
                if (off < ranges[size_t(l)].first || off >= ranges[size_t(l)].second) continue;
                double len = g.end - g.start;
                if (len < best_len) {
                    best_len = len;
                    best = int(gi);
                }
            }
            if (best >= 0) {
                const auto& g = clipped[size_t(best)];
                labels[size_t(pos)] = g.label;
                ds[size_t(pos)] = (a - g.start) / s;
                de[size_t(pos)] = (g.end - a) / s;
                tgt.num_pos++;
            }
        }
        tgt.labels.push_back(std::move(labels));
        tgt.d_start.push_back(std::move(ds));
        tgt.d_end.push_back(std::move(de));
    }
    return tgt;
}

DetectorLoss detector_loss(const DetectorOutput& out, const Targets& tgt,
                           const DetectorConfig& cfg) {
    int64_t b = out.cls_logits.dim(0);
    int64_t t = out.cls_logits.dim(1);
    int64_t nc = out.cls_logits.dim(2);
    if (nc != cfg.num_classes)
        throw ShapeError("detector_loss: logits carry " + std::to_string(nc) + " classes, config says " +
                         std::to_string(cfg.num_classes));
    if (int64_t(tgt.labels.size()) != b || (b > 0 && int64_t(tgt.labels[0].size()) != t))
        throw ShapeError("detector_loss: targets do not match output positions");
    DType dt = out.cls_logits.dtype();

    // constant target planes
    std::vector<double> y(size_t(b * t * nc), 0.0), pos(size_t(b * t), 0.0);
    std::vector<double> ts(size_t(b * t), 0.0), te(size_t(b * t), 0.0);
    std::vector<double> anchor(size_t(b * t), 0.0), stride(size_t(b * t), 0.0);
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t p = 0; p < t; ++p) {
            auto [l, i] = out.seq.level_of(p);
            double s = double(out.seq.strides[size_t(l)]);
            double a = double(i) * s;
            size_t flat = size_t(bi * t + p);
            anchor[flat] = a;
            stride[flat] = s;
            int lab = tgt.labels[size_t(bi)][size_t(p)];
            if (lab >= 0) {
                y[size_t((bi * t + p) * nc + lab)] = 1.0;
                pos[flat] = 1.0;
                ts[flat] = a - tgt.d_start[size_t(bi)][size_t(p)] * s;
                te[flat] = a + tgt.d_end[size_t(bi)][size_t(p)] * s;
            } else {
                ts[flat] = a;  // harmless strictly-positive dummy segment
                te[flat] = a + s;
            }
        }
    }
    Tensor y_t = Tensor::from_vector({b, t, nc}, y, dt);
    Tensor pos_t = Tensor::from_vector({b, t, 1}, pos, dt);
    Tensor ts_t = Tensor::from_vector({b, t, 1}, ts, dt);
    Tensor te_t = Tensor::from_vector({b, t, 1}, te, dt);
    Tensor a_t = Tensor::from_vector({b, t, 1}, anchor, dt);
    Tensor s_t = Tensor::from_vector({b, t, 1}, stride, dt);

    double inv_npos = 1.0 / double(std::max<int64_t>(1, tgt.num_pos));
    const double alpha = 0.25;

    Tensor x = out.cls_logits;
    Tensor prob = sigmoid(x);
    Tensor one_m_p = add_scalar(neg(prob), 1.0);
    Tensor pos_term = mul(y_t, mul(mul(one_m_p, one_m_p), softplus(neg(x))));
    Tensor neg_term = mul(add_scalar(neg(y_t), 1.0), mul(mul(prob, prob), softplus(x)));
    Tensor cls = mul_scalar(
        add(mul_scalar(sum_all(pos_term), alpha), mul_scalar(sum_all(neg_term), 1.0 - alpha)),
        inv_npos);

    Tensor dso = narrow(out.reg_offsets, 2, 0, 1);
    Tensor deo = narrow(out.reg_offsets, 2, 1, 1);
    Tensor pred_s = sub(a_t, mul(dso, s_t));
    Tensor pred_e = add(a_t, mul(deo, s_t));
    Tensor inter = relu(sub(minimum(pred_e, te_t), maximum(pred_s, ts_t)));
    Tensor uni = sub(add(sub(pred_e, pred_s), sub(te_t, ts_t)), inter);
    Tensor iou = div(inter, uni);
    Tensor enc = sub(maximum(pred_e, te_t), minimum(pred_s, ts_t));
    Tensor dc = mul_scalar(sub(add(pred_s, pred_e), add(ts_t, te_t)), 0.5);
    Tensor ratio = div(dc, enc);
    Tensor diou = add(add_scalar(neg(iou), 1.0), mul(ratio, ratio));
    Tensor reg = mul_scalar(sum_all(mul(pos_t, diou)), inv_npos);

    DetectorLoss loss;
    loss.total = add(cls, reg);
    loss.cls = cls.item();
    loss.reg = reg.item();
    return loss;
}

std::vector<ActionInstance> detector_decode(const DetectorOutput& out, const std::string& video_id,
                                            double fps, int64_t t_frames, const DecodeConfig& dc) {
    if (out.cls_logits.dim(0) != 1)
        throw ValueError("detector_decode: expects batch size 1, got " +
                         std::to_string(out.cls_logits.dim(0)));
    if (!(fps > 0)) throw ValueError("detector_decode: fps must be positive");
    int64_t t = out.cls_logits.dim(1);
    int64_t nc = out.cls_logits.dim(2);
    auto logits = out.cls_logits.to_vector();
    auto regs = out.reg_offsets.to_vector();

    std::vector<ActionInstance> cands;
    for (int64_t p = 0; p < t; ++p) {
        auto [l, i] = out.seq.level_of(p);
        double s = double(out.seq.strides[size_t(l)]);
        double d0 = regs[size_t(p * 2 + 0)];
        double d1 = regs[size_t(p * 2 + 1)];
        double start = std::max(0.0, (double(i) - d0) * s);
        double end = std::min(double(t_frames), (double(i) + d1) * s);
        if (!(end - start > 1e-9)) continue;
        for (int64_t k = 0; k < nc; ++k) {
            double lg = logits[size_t(p * nc + k)];
            double score = 1.0 / (1.0 + std::exp(-lg));
            if (score < dc.score_thresh) continue;
            ActionInstance inst;
            inst.video_id = video_id;
            inst.label = int(k);
            inst.seg = {start / fps, end / fps};
            inst.score = score;
            cands.push_back(std::move(inst));
        }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const ActionInstance& a, const ActionInstance& b) { return a.score > b.score; });
    if (dc.pre_nms_topk > 0 && int64_t(cands.size()) > dc.pre_nms_topk)
        cands.resize(size_t(dc.pre_nms_topk));
    return soft_nms(std::move(cands), dc.nms_sigma, dc.nms_min_score, dc.max_dets);
}

std::vector<ActionInstance> soft_nms(std::vector<ActionInstance> cands, double sigma,
                                     double min_score, int64_t max_keep) {
    if (!(sigma > 0)) throw ValueError("soft_nms: sigma must be positive");
    std::map<std::pair<std::string, int>, std::vector<size_t>> groups;
    for (size_t i = 0; i < cands.size(); ++i)
        groups[{cands[i].video_id, cands[i].label}].push_back(i);

    std::vector<ActionInstance> kept;
    for (auto& [key, idx] : groups) {
        std::vector<char> alive(idx.size(), 1);
        std::vector<double> score(idx.size());
        for (size_t k = 0; k < idx.size(); ++k) score[k] = cands[idx[k]].score;
        for (;;) {
            int best = -1;
            for (size_t k = 0; k < idx.size(); ++k)
                if (alive[k] && (best < 0 || score[k] > score[size_t(best)])) best = int(k);
            if (best < 0) break;
            alive[size_t(best)] = 0;
            ActionInstance out = cands[idx[size_t(best)]];
            out.score = score[size_t(best)];
            kept.push_back(std::move(out));
            for (size_t k = 0; k < idx.size(); ++k) {
                if (!alive[k]) continue;
                double v = iou_1d(cands[idx[size_t(best)]].seg, cands[idx[k]].seg);
                score[k] *= std::exp(-(v * v) / sigma);
                if (score[k] < min_score) alive[k] = 0;
            }
        }
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const ActionInstance& a, const ActionInstance& b) { return a.score > b.score; });
    if (max_keep > 0 && int64_t(kept.size()) > max_keep) kept.resize(size_t(max_keep));
    return kept;
}

}  // namespace ssmtad
