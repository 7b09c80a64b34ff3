#include "ssmtad/dmbss.hpp"

#include <cmath>

namespace ssmtad {

void DmbssConfig::validate() const {
    if (c < 1) throw ConfigError("dmbss: c must be >= 1");
    if (lambda < 1) throw ConfigError("dmbss: lambda must be >= 1");
    if (expanded() % 2 != 0)
        throw ConfigError("dmbss: lambda*c must be even to chunk into two branches");
    if (n < 1) throw ConfigError("dmbss: state size n must be >= 1");
    if (conv_k < 1) throw ConfigError("dmbss: conv_k must be >= 1");
}

namespace {

DirectionParams direction_init(int64_t cp, int64_t n, int64_t k, RandomStream& rng, DType dt) {
    DirectionParams d;
    d.w_in = Tensor::uniform_fan_in({cp, cp}, cp, rng, dt);
    d.b_in = Tensor::zeros({cp}, dt, true);
    d.conv_w = Tensor::uniform_fan_in({cp, k}, k, rng, dt);
    // log-spaced decay rates: A[.,j] = -(j+1), slow to fast across states
    std::vector<double> al(static_cast<size_t>(cp * n));
    for (int64_t c = 0; c < cp; ++c)
        for (int64_t j = 0; j < n; ++j) al[size_t(c * n + j)] = std::log(double(j + 1));
    d.a_log = Tensor::param({cp, n}, al, dt);
    d.proj.w_b = Tensor::uniform_fan_in({cp, n}, cp, rng, dt);
    d.proj.w_c = Tensor::uniform_fan_in({cp, n}, cp, rng, dt);
    d.proj.w_delta = Tensor::uniform_fan_in({cp, cp}, cp, rng, dt);
    // softplus(bias) lands in [1e-3, 1e-1]; sample log-uniform inside the margins
    std::vector<double> db(static_cast<size_t>(cp));
    for (auto& v : db) {
        double step = std::exp(rng.uniform(std::log(1.2e-3), std::log(9e-2)));
        v = std::log(std::expm1(step));  // inverse softplus
    }
    d.proj.delta_bias = Tensor::param({cp}, db, dt);
    return d;
}

void push_direction(std::vector<Tensor>& out, const DirectionParams& d) {
    out.push_back(d.w_in);
    out.push_back(d.b_in);
    out.push_back(d.conv_w);
    out.push_back(d.a_log);
    out.push_back(d.proj.w_b);
    out.push_back(d.proj.w_c);
    out.push_back(d.proj.w_delta);
    out.push_back(d.proj.delta_bias);
}

// u = SiLU(DWConv(Linear(x))), the scan input shared by B/C/delta generators
Tensor pathway_stem(const Tensor& x, const DirectionParams& dp) {
    Tensor h = linear(x, dp.w_in, dp.b_in);
    h = swap_axes(h, 1, 2);  // [b,c',t] for the depthwise conv
    h = conv1d_depthwise(h, dp.conv_w, Pad1d::causal);
    return silu(swap_axes(h, 1, 2));
}

Tensor scan_direction(const Tensor& x, const DirectionParams& dp, bool masked,
                      const DmbssConfig& cfg) {
    Tensor u = pathway_stem(x, dp);
    Tensor a_param = dp.a_log;
    if (masked && cfg.mask_mode == MaskMode::literal) a_param = mask_diagonal(a_param);
    Tensor a = neg(exp(a_param));
    SsmParams p = selective_params(u, a, dp.proj);
    DiscreteSsm d = discretize_zoh(p);
    Tensor y = scan(d, p.c, u, cfg.scan);
    if (masked && cfg.mask_mode == MaskMode::semantic) y = subtract_self_term(y, d, p.c, u);
    return y;
}

template <typename F>
auto stage(const char* name, F&& f) {
    try {
        return f();
    } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(name) + ": " + e.what());
    }
}

}  // namespace

DmbssParams dmbss_init(const DmbssConfig& cfg, uint64_t seed, DType dt) {
    cfg.validate();
    RandomStream rng(seed);
    int64_t cp = cfg.branch_width();
    DmbssParams p;
    p.w_in = Tensor::uniform_fan_in({cfg.c, cfg.expanded()}, cfg.c, rng, dt);
    p.w_out = Tensor::uniform_fan_in({cfg.expanded(), cfg.c}, cfg.expanded(), rng, dt);
    p.b_out = Tensor::zeros({cfg.c}, dt, true);
    p.branches.resize(2);
    for (auto& br : p.branches) {
        br.fw = direction_init(cp, cfg.n, cfg.conv_k, rng, dt);
        br.bw = cfg.share_params ? br.fw : direction_init(cp, cfg.n, cfg.conv_k, rng, dt);
        br.w_gate = Tensor::uniform_fan_in({cp, cp}, cp, rng, dt);
        br.b_gate = Tensor::zeros({cp}, dt, true);
    }
    return p;
}

std::vector<Tensor> dmbss_collect_params(const DmbssParams& p) {
    std::vector<Tensor> all;
    all.push_back(p.w_in);
    all.push_back(p.w_out);
    all.push_back(p.b_out);
    for (const auto& br : p.branches) {
        push_direction(all, br.fw);
        push_direction(all, br.bw);
        all.push_back(br.w_gate);
        all.push_back(br.b_gate);
    }
    std::vector<Tensor> uniq;
    for (const auto& t : all) {
        bool seen = false;
        for (const auto& u : uniq)
            if (u.node() == t.node()) {
                seen = true;
                break;
            }
        if (!seen) uniq.push_back(t);
    }
    return uniq;
}

NamedTensors dmbss_named_params(const DmbssParams& p, const std::string& prefix) {
    NamedTensors out;
    auto dir_names = [&](const DirectionParams& d, const std::string& pre) {
        out.emplace_back(pre + "in_w", d.w_in);
        out.emplace_back(pre + "in_b", d.b_in);
        out.emplace_back(pre + "conv_w", d.conv_w);
        out.emplace_back(pre + "a_log", d.a_log);
        out.emplace_back(pre + "proj_b", d.proj.w_b);
        out.emplace_back(pre + "proj_c", d.proj.w_c);
        out.emplace_back(pre + "proj_delta", d.proj.w_delta);
        out.emplace_back(pre + "delta_bias", d.proj.delta_bias);
    };
    out.emplace_back(prefix + "in_w", p.w_in);
    out.emplace_back(prefix + "out_w", p.w_out);
    out.emplace_back(prefix + "out_b", p.b_out);
    for (size_t i = 0; i < p.branches.size(); ++i) {
        const auto& br = p.branches[i];
        std::string bp = prefix + "br" + std::to_string(i) + ".";
        dir_names(br.fw, bp + "fw.");
        if (br.bw.w_in.node() != br.fw.w_in.node()) dir_names(br.bw, bp + "bw.");
        out.emplace_back(bp + "gate_w", br.w_gate);
        out.emplace_back(bp + "gate_b", br.b_gate);
    }
    return out;
}

PathwayOut pathway_forward(const Tensor& x, const BranchParams& bp, Direction dir,
                           const DmbssConfig& cfg) {
    if (x.rank() != 3 || x.dim(2) != cfg.branch_width())
        throw ShapeError("pathway_forward: expected [b,t," + std::to_string(cfg.branch_width()) +
                         "], got " + shape_str(x.shape()));
    Tensor xl = dir == Direction::bwd ? flip(x, 1) : x;
    PathwayOut out;
    out.x1 = stage("pathway 1 (forward scan)", [&] { return scan_direction(xl, bp.fw, false, cfg); });
    out.x2 = stage("pathway 2 (reversed scan)", [&] {
        return flip(scan_direction(flip(xl, 1), bp.bw, cfg.diag_mask, cfg), 1);
    });
    out.x3 = stage("pathway 3 (gate)", [&] { return silu(linear(xl, bp.w_gate, bp.b_gate)); });
    if (dir == Direction::bwd) {
        out.x1 = flip(out.x1, 1);
        out.x2 = flip(out.x2, 1);
        out.x3 = flip(out.x3, 1);
    }
    return out;
}

Tensor fuse_pathways(const PathwayOut& p) {
    if (p.x1.shape() != p.x3.shape() || p.x2.shape() != p.x3.shape())
        throw ShapeError("fuse_pathways: pathway shapes differ");
    return concat({mul(p.x1, p.x3), mul(p.x2, p.x3)}, 2);
}

Tensor dmbss_forward(const Tensor& x, const DmbssParams& p, const DmbssConfig& cfg) {
    cfg.validate();
    if (x.rank() != 3 || x.dim(2) != cfg.c)
        throw ShapeError("dmbss_forward: expected [b,t," + std::to_string(cfg.c) + "], got " +
                         shape_str(x.shape()));
    int64_t cp = cfg.branch_width();
    Tensor ex = stage("input projection", [&] { return linear(x, p.w_in); });
    Tensor u1 = narrow(ex, 2, 0, cp);
    Tensor out = stage("branch 1", [&] { return fuse_pathways(pathway_forward(u1, p.branches[0], Direction::fwd, cfg)); });
    if (cfg.dual_branch) {
        Tensor u2 = narrow(ex, 2, cp, cp);
        Tensor out_bw = stage("branch 2", [&] {
            return fuse_pathways(pathway_forward(u2, p.branches[1], Direction::bwd, cfg));
        });
        out = add(out, out_bw);
    }
    Tensor y = stage("output projection", [&] { return linear(out, p.w_out, p.b_out); });
    return add(y, x);
}

std::vector<AblationVariant> ablation_matrix() {
    return {
        {"share", true, false, false},
        {"dual", false, true, false},
        {"share_dual", true, true, false},
        {"share_mask", true, false, true},
        {"dual_mask", false, true, true},
        {"plain", false, false, false},
        {"mask", false, false, true},
        {"share_dual_mask", true, true, true},
    };
}

}  // namespace ssmtad
