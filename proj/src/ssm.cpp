#include "ssmtad/ssm.hpp"

#include <algorithm>

#include "tensor_detail.hpp"

namespace ssmtad {

using detail::attach;
using detail::check_finite;
using detail::dispatch;
using detail::make_uninit;
using detail::Node;

DiscreteSsm discretize_zoh(const SsmParams& p) {
    if (p.a.rank() != 2) throw ShapeError("discretize_zoh: a must be [c,n]");
    int64_t c = p.a.dim(0), n = p.a.dim(1);
    if (p.delta.rank() != 3 || p.delta.dim(2) != c)
        throw ShapeError("discretize_zoh: delta must be [b,t," + std::to_string(c) + "]");
    int64_t bsz = p.delta.dim(0), t = p.delta.dim(1);
    if (p.b.rank() != 3 || p.b.dim(0) != bsz || p.b.dim(1) != t || p.b.dim(2) != n)
        throw ShapeError("discretize_zoh: b must be [b,t,n]");
    for (double v : p.a.to_vector())
        if (!(v < 0.0)) throw ValueError("discretize_zoh: a must be strictly negative");
    for (double v : p.delta.to_vector())
        if (!(v > 0.0)) throw ValueError("discretize_zoh: delta must be strictly positive");

    Tensor da = mul(reshape(p.delta, {bsz, t, c, 1}), p.a);  // [b,t,c,n]
    DiscreteSsm d;
    d.a_bar = exp(da);
    // expm1(da)/a * b; exact limit delta*b as da -> 0
    d.b_bar = mul(div(expm1(da), p.a), reshape(p.b, {bsz, t, 1, n}));
    return d;
}

SsmParams selective_params(const Tensor& x, const Tensor& a, const SelectiveProj& proj) {
    if (x.rank() != 3) throw ShapeError("selective_params: x must be [b,t,c]");
    int64_t c = x.dim(2);
    if (proj.w_b.rank() != 2 || proj.w_b.dim(0) != c || proj.w_c.dim(0) != c)
        throw ShapeError("selective_params: projection shapes must start at c=" + std::to_string(c));
    SsmParams p;
    p.a = a;
    p.b = linear(x, proj.w_b);
    p.c = linear(x, proj.w_c);
    p.delta = softplus(add(linear(x, proj.w_delta), proj.delta_bias));
    return p;
}

namespace {

struct ScanDims {
    int64_t b, t, c, n;
};

ScanDims validate_scan(const DiscreteSsm& d, const Tensor& cc, const Tensor& x) {
    if (d.a_bar.rank() != 4 || d.b_bar.rank() != 4) throw ShapeError("scan: a_bar/b_bar must be [b,t,c,n]");
    if (d.a_bar.shape() != d.b_bar.shape()) throw ShapeError("scan: a_bar/b_bar shape mismatch");
    ScanDims s{d.a_bar.dim(0), d.a_bar.dim(1), d.a_bar.dim(2), d.a_bar.dim(3)};
    if (cc.rank() != 3 || cc.dim(0) != s.b || cc.dim(1) != s.t || cc.dim(2) != s.n)
        throw ShapeError("scan: cc must be [b,t,n], got " + shape_str(cc.shape()));
    if (x.rank() != 3 || x.dim(0) != s.b || x.dim(1) != s.t || x.dim(2) != s.c)
        throw ShapeError("scan: x must be [b,t,c], got " + shape_str(x.shape()));
    if (d.a_bar.dtype() != x.dtype() || d.b_bar.dtype() != x.dtype() || cc.dtype() != x.dtype())
        throw ShapeError("scan: dtype mismatch across inputs");
    return s;
}

// h_t = a_t h_{t-1} + b_t x_t, stored for the adjoint pass
template <typename T>
void scan_forward_recurrent(const ScanDims& s, const T* ab, const T* bb, const T* cv, const T* xv, T* hv,
                            T* yv) {
    int64_t cn = s.c * s.n;
    for (int64_t b = 0; b < s.b; ++b) {
        const T* h_prev = nullptr;
        for (int64_t t = 0; t < s.t; ++t) {
            int64_t base = (b * s.t + t) * cn;
            T* h = hv + base;
            const T* a = ab + base;
            const T* bt = bb + base;
            const T* xt = xv + (b * s.t + t) * s.c;
            const T* ct = cv + (b * s.t + t) * s.n;
            T* yt = yv + (b * s.t + t) * s.c;
            for (int64_t ch = 0; ch < s.c; ++ch) {
                T acc = 0;
                T xs = xt[ch];
                int64_t off = ch * s.n;
                for (int64_t j = 0; j < s.n; ++j) {
                    T hh = bt[off + j] * xs;
                    if (h_prev) hh += a[off + j] * h_prev[off + j];
                    h[off + j] = hh;
                    acc += ct[j] * hh;
                }
                yt[ch] = acc;
            }
            h_prev = h;
        }
    }
}

// Work-efficient Blelloch scan over operator pairs (a, u), compose
// (a2,u2) after (a1,u1) = (a2*a1, a2*u1 + u2).  Tree shape is fixed by t,
// so results do not depend on threading.
template <typename T>
void scan_forward_parallel(const ScanDims& s, const T* ab, const T* bb, const T* cv, const T* xv, T* hv,
                           T* yv) {
    int64_t cn = s.c * s.n;
    int64_t m = 1;
    while (m < s.t) m <<= 1;
    parallel_for(s.b * cn, [&](int64_t lane_lo, int64_t lane_hi) {
        std::vector<T> av(static_cast<size_t>(m)), uv(static_cast<size_t>(m));
        for (int64_t lane = lane_lo; lane < lane_hi; ++lane) {
            int64_t b = lane / cn, ci = (lane % cn) / s.n;
            int64_t base = b * s.t * cn + (lane % cn);
            for (int64_t t = 0; t < s.t; ++t) {
                av[size_t(t)] = ab[base + t * cn];
                uv[size_t(t)] = bb[base + t * cn] * xv[(b * s.t + t) * s.c + ci];
            }
            for (int64_t t = s.t; t < m; ++t) {
                av[size_t(t)] = T(1);
                uv[size_t(t)] = T(0);
            }
            // up-sweep: node <- compose(right, left)
            for (int64_t len = 1; len < m; len <<= 1)
                for (int64_t i = 2 * len - 1; i < m; i += 2 * len) {
                    int64_t l = i - len;
                    uv[size_t(i)] = av[size_t(i)] * uv[size_t(l)] + uv[size_t(i)];
                    av[size_t(i)] = av[size_t(i)] * av[size_t(l)];
                }
            // down-sweep to exclusive prefixes
            av[size_t(m - 1)] = T(1);
            uv[size_t(m - 1)] = T(0);
            for (int64_t len = m >> 1; len >= 1; len >>= 1)
                for (int64_t i = 2 * len - 1; i < m; i += 2 * len) {
                    int64_t l = i - len;
                    T la = av[size_t(l)], lu = uv[size_t(l)];
                    av[size_t(l)] = av[size_t(i)];
                    uv[size_t(l)] = uv[size_t(i)];
                    // right prefix = compose(left subtree total, parent prefix)
                    uv[size_t(i)] = la * uv[size_t(i)] + lu;
                    av[size_t(i)] = la * av[size_t(i)];
                }
            // inclusive value: h_t = a_t * E_t + u_t
            for (int64_t t = 0; t < s.t; ++t) {
                T e = uv[size_t(t)];
                hv[base + t * cn] =
                    ab[base + t * cn] * e + bb[base + t * cn] * xv[(b * s.t + t) * s.c + ci];
            }
        }
    });
    // y from stored h
    for (int64_t b = 0; b < s.b; ++b)
        for (int64_t t = 0; t < s.t; ++t) {
            const T* ct = cv + (b * s.t + t) * s.n;
            const T* h = hv + (b * s.t + t) * cn;
            T* yt = yv + (b * s.t + t) * s.c;
            for (int64_t ch = 0; ch < s.c; ++ch) {
                T acc = 0;
                for (int64_t j = 0; j < s.n; ++j) acc += ct[j] * h[ch * s.n + j];
                yt[ch] = acc;
            }
        }
}

// Streams y_i = sum_{j<=i} C_i (prod_{k=j+1..i} A_k) B_j x_j column by
// column; O(t^2 c n) time, O(n) extra memory.
template <typename T>
void scan_forward_dense(const ScanDims& s, const T* ab, const T* bb, const T* cv, const T* xv, T* yv) {
    int64_t cn = s.c * s.n;
    std::fill_n(yv, s.b * s.t * s.c, T(0));
    parallel_for(s.b * s.c, [&](int64_t lo, int64_t hi) {
        std::vector<T> acc(static_cast<size_t>(s.n));
        for (int64_t bc = lo; bc < hi; ++bc) {
            int64_t b = bc / s.c, ch = bc % s.c;
            int64_t base = b * s.t * cn + ch * s.n;
            for (int64_t j = 0; j < s.t; ++j) {
                T xs = xv[(b * s.t + j) * s.c + ch];
                for (int64_t k = 0; k < s.n; ++k) acc[size_t(k)] = bb[base + j * cn + k] * xs;
                for (int64_t i = j; i < s.t; ++i) {
                    if (i > j)
                        for (int64_t k = 0; k < s.n; ++k) acc[size_t(k)] *= ab[base + i * cn + k];
                    const T* ci = cv + (b * s.t + i) * s.n;
                    T dot = 0;
                    for (int64_t k = 0; k < s.n; ++k) dot += ci[k] * acc[size_t(k)];
                    yv[(b * s.t + i) * s.c + ch] += dot;
                }
            }
        }
    });
}

// Reverse-time adjoint shared by both differentiable evaluators:
//   lam_t = dY_t (x) C_t + A_{t+1} (*) lam_{t+1}
//   dA_t = lam_t (*) h_{t-1};  dB_t = lam_t * x_t
//   dX_t = sum_n lam_t B_t;    dC_t = sum_c dY_t h_t
template <typename T>
void scan_backward(const ScanDims& s, const T* ab, const T* bb, const T* cv, const T* xv, const T* hv,
                   const T* gy, T* ga, T* gb, T* gc, T* gx) {
    int64_t cn = s.c * s.n;
    std::vector<T> lam(static_cast<size_t>(cn)), lam_next(static_cast<size_t>(cn));
    for (int64_t b = 0; b < s.b; ++b) {
        std::fill(lam_next.begin(), lam_next.end(), T(0));
        for (int64_t t = s.t - 1; t >= 0; --t) {
            int64_t base = (b * s.t + t) * cn;
            const T* at_next = t + 1 < s.t ? ab + base + cn : nullptr;
            const T* ct = cv + (b * s.t + t) * s.n;
            const T* gyt = gy + (b * s.t + t) * s.c;
            const T* xt = xv + (b * s.t + t) * s.c;
            const T* h = hv + base;
            const T* h_prev = t > 0 ? hv + base - cn : nullptr;
            for (int64_t ch = 0; ch < s.c; ++ch) {
                T gych = gyt[ch];
                T xs = xt[ch];
                T gxacc = 0;
                int64_t off = ch * s.n;
                for (int64_t j = 0; j < s.n; ++j) {
                    T l = gych * ct[j];
                    if (at_next) l += at_next[off + j] * lam_next[size_t(off + j)];
                    lam[size_t(off + j)] = l;
                    if (ga) ga[base + off + j] += h_prev ? l * h_prev[off + j] : T(0);
                    if (gb) gb[base + off + j] += l * xs;
                    gxacc += l * bb[base + off + j];
                }
                if (gx) gx[(b * s.t + t) * s.c + ch] += gxacc;
            }
            if (gc) {
                T* gct = gc + (b * s.t + t) * s.n;
                for (int64_t j = 0; j < s.n; ++j) {
                    T acc = 0;
                    for (int64_t ch = 0; ch < s.c; ++ch) acc += gyt[ch] * h[ch * s.n + j];
                    gct[j] += acc;
                }
            }
            std::swap(lam, lam_next);
        }
    }
}

}  // namespace

Tensor scan(const DiscreteSsm& d, const Tensor& cc, const Tensor& x, ScanKind kind) {
    ScanDims s = validate_scan(d, cc, x);
    Tensor y = make_uninit({s.b, s.t, s.c}, x.dtype());

    if (kind == ScanKind::dense_oracle) {
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            scan_forward_dense<T>(s, d.a_bar.node()->val<T>().data(), d.b_bar.node()->val<T>().data(),
                                  cc.node()->val<T>().data(), x.node()->val<T>().data(),
                                  y.node()->val<T>().data());
        });
        check_finite(y, "scan_dense_oracle");
        y.node()->op = "scan_dense_oracle";
        return y;  // reference evaluator: no tape
    }

    Tensor h = make_uninit({s.b, s.t, s.c, s.n}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* ab = d.a_bar.node()->val<T>().data();
        const T* bb = d.b_bar.node()->val<T>().data();
        const T* cv = cc.node()->val<T>().data();
        const T* xv = x.node()->val<T>().data();
        T* hv = h.node()->val<T>().data();
        T* yv = y.node()->val<T>().data();
        if (kind == ScanKind::recurrent)
            scan_forward_recurrent<T>(s, ab, bb, cv, xv, hv, yv);
        else
            scan_forward_parallel<T>(s, ab, bb, cv, xv, hv, yv);
    });
    check_finite(y, kind == ScanKind::recurrent ? "scan_recurrent" : "scan_parallel");

    Tensor a_bar = d.a_bar, b_bar = d.b_bar;
    attach(y, kind == ScanKind::recurrent ? "scan_recurrent" : "scan_parallel", {a_bar, b_bar, cc, x},
           [a_bar, b_bar, cc, x, h, s](Node& o) {
               dispatch(o.dt, [&](auto tag) {
                   using T = decltype(tag);
                   scan_backward<T>(s, a_bar.node()->val<T>().data(), b_bar.node()->val<T>().data(),
                                    cc.node()->val<T>().data(), x.node()->val<T>().data(),
                                    h.node()->val<T>().data(), o.grad_buf<T>().data(),
                                    a_bar.requires_grad() ? a_bar.node()->grad_buf<T>().data() : nullptr,
                                    b_bar.requires_grad() ? b_bar.node()->grad_buf<T>().data() : nullptr,
                                    cc.requires_grad() ? cc.node()->grad_buf<T>().data() : nullptr,
                                    x.requires_grad() ? x.node()->grad_buf<T>().data() : nullptr);
               });
           });
    return y;
}

Tensor scan_recurrent(const DiscreteSsm& d, const Tensor& cc, const Tensor& x) {
    return scan(d, cc, x, ScanKind::recurrent);
}
Tensor scan_parallel(const DiscreteSsm& d, const Tensor& cc, const Tensor& x) {
    return scan(d, cc, x, ScanKind::parallel);
}
Tensor scan_dense_oracle(const DiscreteSsm& d, const Tensor& cc, const Tensor& x) {
    return scan(d, cc, x, ScanKind::dense_oracle);
}

Tensor materialize_mixing_matrix(const DiscreteSsm& d, const Tensor& cc) {
    if (d.a_bar.rank() != 4) throw ShapeError("materialize_mixing_matrix: a_bar must be [b,t,c,n]");
    int64_t b = d.a_bar.dim(0), t = d.a_bar.dim(1), c = d.a_bar.dim(2), n = d.a_bar.dim(3);
    if (t > kMixingMatrixMaxT)
        throw ValueError("materialize_mixing_matrix: t=" + std::to_string(t) + " exceeds cap " +
                         std::to_string(kMixingMatrixMaxT));
    if (cc.rank() != 3 || cc.dim(0) != b || cc.dim(1) != t || cc.dim(2) != n)
        throw ShapeError("materialize_mixing_matrix: cc must be [b,t,n]");

    Tensor m = Tensor::zeros({b, c, t, t}, d.a_bar.dtype());
    dispatch(d.a_bar.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* ab = d.a_bar.node()->val<T>().data();
        const T* bb = d.b_bar.node()->val<T>().data();
        const T* cv = cc.node()->val<T>().data();
        T* mv = m.node()->val<T>().data();
        int64_t cn = c * n;
        std::vector<T> acc(static_cast<size_t>(n));
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ch = 0; ch < c; ++ch) {
                int64_t base = bi * t * cn + ch * n;
                T* mrow = mv + (bi * c + ch) * t * t;
                for (int64_t j = 0; j < t; ++j) {
                    for (int64_t k = 0; k < n; ++k) acc[size_t(k)] = bb[base + j * cn + k];
                    for (int64_t i = j; i < t; ++i) {
                        if (i > j)
                            for (int64_t k = 0; k < n; ++k) acc[size_t(k)] *= ab[base + i * cn + k];
                        const T* ci = cv + (bi * t + i) * n;
                        T dot = 0;
                        for (int64_t k = 0; k < n; ++k) dot += ci[k] * acc[size_t(k)];
                        mrow[i * t + j] = dot;
                    }
                }
            }
    });
    return m;
}

Tensor lti_kernel(const DiscreteSsm& d, const Tensor& cc, int64_t t) {
    if (d.a_bar.rank() != 4) throw ShapeError("lti_kernel: a_bar must be [b,t,c,n]");
    int64_t b = d.a_bar.dim(0), ts = d.a_bar.dim(1), c = d.a_bar.dim(2), n = d.a_bar.dim(3);
    if (t < 1) throw ValueError("lti_kernel: kernel length must be >= 1");
    // parameters must not vary along time
    auto constant_in_time = [&](const Tensor& x, int64_t inner) {
        auto v = x.to_vector();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ti = 1; ti < ts; ++ti)
                for (int64_t k = 0; k < inner; ++k)
                    if (v[size_t((bi * ts + ti) * inner + k)] != v[size_t(bi * ts * inner + k)]) return false;
        return true;
    };
    if (!constant_in_time(d.a_bar, c * n) || !constant_in_time(d.b_bar, c * n) || !constant_in_time(cc, n))
        throw ValueError("lti_kernel: parameters vary along time; kernel form requires LTI parameters");

    Tensor k = make_uninit({b, c, t}, d.a_bar.dtype());
    dispatch(d.a_bar.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* ab = d.a_bar.node()->val<T>().data();
        const T* bb = d.b_bar.node()->val<T>().data();
        const T* cv = cc.node()->val<T>().data();
        T* kv = k.node()->val<T>().data();
        std::vector<T> acc(static_cast<size_t>(n));
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ch = 0; ch < c; ++ch) {
                int64_t base = bi * ts * c * n + ch * n;  // slice t=0
                const T* c0 = cv + bi * ts * n;
                for (int64_t j = 0; j < n; ++j) acc[size_t(j)] = bb[base + j];
                for (int64_t tau = 0; tau < t; ++tau) {
                    if (tau > 0)
                        for (int64_t j = 0; j < n; ++j) acc[size_t(j)] *= ab[base + j];
                    T dot = 0;
                    for (int64_t j = 0; j < n; ++j) dot += c0[j] * acc[size_t(j)];
                    kv[(bi * c + ch) * t + tau] = dot;
                }
            }
    });
    check_finite(k, "lti_kernel");
    return k;
}

Tensor lti_apply(const Tensor& kernel, const Tensor& x) {
    if (kernel.rank() != 3 || x.rank() != 3) throw ShapeError("lti_apply: kernel [b,c,t_k], x [b,t,c]");
    int64_t b = x.dim(0), t = x.dim(1), c = x.dim(2), tk = kernel.dim(2);
    if (kernel.dim(0) != b || kernel.dim(1) != c) throw ShapeError("lti_apply: kernel/x mismatch");
    Tensor y = Tensor::zeros({b, t, c}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* kv = kernel.node()->val<T>().data();
        const T* xv = x.node()->val<T>().data();
        T* yv = y.node()->val<T>().data();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ch = 0; ch < c; ++ch) {
                const T* krow = kv + (bi * c + ch) * tk;
                for (int64_t i = 0; i < t; ++i) {
                    T acc = 0;
                    int64_t lim = std::min(i, tk - 1);
                    for (int64_t tau = 0; tau <= lim; ++tau)
                        acc += krow[tau] * xv[(bi * t + i - tau) * c + ch];
                    yv[(bi * t + i) * c + ch] = acc;
                }
            }
    });
    return y;
}

Tensor subtract_self_term(const Tensor& y, const DiscreteSsm& d, const Tensor& cc, const Tensor& x) {
    ScanDims s = validate_scan(d, cc, x);
    if (y.shape() != x.shape()) throw ShapeError("subtract_self_term: y/x shape mismatch");
    // diag_t[c] = sum_n cc_t[n] b_bar_t[c,n]
    Tensor diag = reduce_sum(mul(reshape(cc, {s.b, s.t, 1, s.n}), d.b_bar), 3);
    return sub(y, mul(diag, x));
}

Tensor bidirectional_compose(const DiscreteSsm& d_fw, const Tensor& c_fw, const DiscreteSsm& d_bw,
                             const Tensor& c_bw, const Tensor& x, bool mask_backward_diag, ScanKind kind) {
    Tensor y_fw = scan(d_fw, c_fw, x, kind);
    Tensor x_rev = flip(x, 1);
    Tensor y_bw = scan(d_bw, c_bw, x_rev, kind);
    if (mask_backward_diag) y_bw = subtract_self_term(y_bw, d_bw, c_bw, x_rev);
    return add(y_fw, flip(y_bw, 1));
}

}  // namespace ssmtad
