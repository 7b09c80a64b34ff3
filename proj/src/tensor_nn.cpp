#include "tensor_detail.hpp"

#include <algorithm>

namespace ssmtad {

using detail::attach;
using detail::check_finite;
using detail::dispatch;
using detail::make_uninit;
using detail::Node;

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank-2, got " + shape_str(w.shape()));
    int64_t ci = w.dim(0), co = w.dim(1);
    if (x.rank() < 1 || x.shape().back() != ci)
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not end in ci=" + std::to_string(ci));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != co)) throw ShapeError("linear: bias must be [co]");
    if (x.dtype() != w.dtype() || (b.defined() && b.dtype() != x.dtype()))
        throw ShapeError("linear: dtype mismatch");

    int64_t rows = x.numel() / ci;
    Shape os = x.shape();
    os.back() = co;
    Tensor out = make_uninit(os, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.node()->val<T>().data();
        const T* wv = w.node()->val<T>().data();
        const T* bv = b.defined() ? b.node()->val<T>().data() : nullptr;
        T* ov = out.node()->val<T>().data();
        parallel_for(rows, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                T* orow = ov + r * co;
                if (bv)
                    std::copy_n(bv, co, orow);
                else
                    std::fill_n(orow, co, T(0));
                const T* xrow = xv + r * ci;
                for (int64_t k = 0; k < ci; ++k) {
                    T a = xrow[k];
                    if (a == T(0)) continue;
                    const T* wrow = wv + k * co;
                    for (int64_t j = 0; j < co; ++j) orow[j] += a * wrow[j];
                }
            }
        });
    });
    check_finite(out, "linear");
    attach(out, "linear", {x, w, b}, [x, w, b, rows, ci, co](Node& o) {
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            const T* g = o.grad_buf<T>().data();
            const T* xv = x.node()->val<T>().data();
            const T* wv = w.node()->val<T>().data();
            if (x.requires_grad()) {
                T* gx = x.node()->grad_buf<T>().data();
                parallel_for(rows, [&](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r) {
                        const T* grow = g + r * co;
                        T* gxrow = gx + r * ci;
                        for (int64_t k = 0; k < ci; ++k) {
                            const T* wrow = wv + k * co;
                            T acc = 0;
                            for (int64_t j = 0; j < co; ++j) acc += grow[j] * wrow[j];
                            gxrow[k] += acc;
                        }
                    }
                });
            }
            if (w.requires_grad()) {
                T* gw = w.node()->grad_buf<T>().data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* grow = g + r * co;
                    const T* xrow = xv + r * ci;
                    for (int64_t k = 0; k < ci; ++k) {
                        T a = xrow[k];
                        if (a == T(0)) continue;
                        T* gwrow = gw + k * co;
                        for (int64_t j = 0; j < co; ++j) gwrow[j] += a * grow[j];
                    }
                }
            }
            if (b.defined() && b.requires_grad()) {
                T* gb = b.node()->grad_buf<T>().data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* grow = g + r * co;
                    for (int64_t j = 0; j < co; ++j) gb[j] += grow[j];
                }
            }
        });
    });
    return out;
}

namespace {
int64_t left_pad(Pad1d pad, int64_t k) {
    if (pad == Pad1d::causal) return k - 1;
    if (k % 2 == 0) throw ShapeError("conv1d: same padding requires odd kernel size");
    return (k - 1) / 2;
}
}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, Pad1d pad) {
    if (x.rank() != 3 || w.rank() != 3) throw ShapeError("conv1d: expected x [b,ci,t], w [co,ci,k]");
    int64_t bsz = x.dim(0), ci = x.dim(1), t = x.dim(2);
    int64_t co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ci) throw ShapeError("conv1d: channel mismatch");
    if (b.defined() && (b.rank() != 1 || b.dim(0) != co)) throw ShapeError("conv1d: bias must be [co]");
    int64_t lp = left_pad(pad, k);

    Tensor out = make_uninit({bsz, co, t}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.node()->val<T>().data();
        const T* wv = w.node()->val<T>().data();
        const T* bv = b.defined() ? b.node()->val<T>().data() : nullptr;
        T* ov = out.node()->val<T>().data();
        parallel_for(bsz * co, [&](int64_t lo, int64_t hi) {
            for (int64_t bo = lo; bo < hi; ++bo) {
                int64_t bi = bo / co, oc = bo % co;
                T* orow = ov + (bi * co + oc) * t;
                for (int64_t i = 0; i < t; ++i) orow[i] = bv ? bv[oc] : T(0);
                for (int64_t c = 0; c < ci; ++c) {
                    const T* xrow = xv + (bi * ci + c) * t;
                    const T* wrow = wv + (oc * ci + c) * k;
                    for (int64_t tau = 0; tau < k; ++tau) {
                        T wk = wrow[tau];
                        if (wk == T(0)) continue;
                        int64_t shift = tau - lp;  // out[i] += w[tau] * x[i + shift]
                        int64_t i0 = std::max<int64_t>(0, -shift), i1 = std::min(t, t - shift);
                        for (int64_t i = i0; i < i1; ++i) orow[i] += wk * xrow[i + shift];
                    }
                }
            }
        });
    });
    check_finite(out, "conv1d");
    attach(out, "conv1d", {x, w, b}, [x, w, b, bsz, ci, co, t, k, lp](Node& o) {
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            const T* g = o.grad_buf<T>().data();
            const T* xv = x.node()->val<T>().data();
            const T* wv = w.node()->val<T>().data();
            if (x.requires_grad()) {
                T* gx = x.node()->grad_buf<T>().data();
                for (int64_t bi = 0; bi < bsz; ++bi)
                    for (int64_t oc = 0; oc < co; ++oc) {
                        const T* grow = g + (bi * co + oc) * t;
                        for (int64_t c = 0; c < ci; ++c) {
                            T* gxrow = gx + (bi * ci + c) * t;
                            const T* wrow = wv + (oc * ci + c) * k;
                            for (int64_t tau = 0; tau < k; ++tau) {
                                T wk = wrow[tau];
                                if (wk == T(0)) continue;
                                int64_t shift = tau - lp;
                                int64_t i0 = std::max<int64_t>(0, -shift), i1 = std::min(t, t - shift);
                                for (int64_t i = i0; i < i1; ++i) gxrow[i + shift] += wk * grow[i];
                            }
                        }
                    }
            }
            if (w.requires_grad()) {
                T* gw = w.node()->grad_buf<T>().data();
                for (int64_t bi = 0; bi < bsz; ++bi)
                    for (int64_t oc = 0; oc < co; ++oc) {
                        const T* grow = g + (bi * co + oc) * t;
                        for (int64_t c = 0; c < ci; ++c) {
                            const T* xrow = xv + (bi * ci + c) * t;
                            T* gwrow = gw + (oc * ci + c) * k;
                            for (int64_t tau = 0; tau < k; ++tau) {
                                int64_t shift = tau - lp;
                                int64_t i0 = std::max<int64_t>(0, -shift), i1 = std::min(t, t - shift);
                                T acc = 0;
                                for (int64_t i = i0; i < i1; ++i) acc += grow[i] * xrow[i + shift];
                                gwrow[tau] += acc;
                            }
                        }
                    }
            }
            if (b.defined() && b.requires_grad()) {
                T* gb = b.node()->grad_buf<T>().data();
                for (int64_t bi = 0; bi < bsz; ++bi)
                    for (int64_t oc = 0; oc < co; ++oc) {
                        const T* grow = g + (bi * co + oc) * t;
                        T acc = 0;
                        for (int64_t i = 0; i < t; ++i) acc += grow[i];
                        gb[oc] += acc;
                    }
            }
        });
    });
    return out;
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& w, Pad1d pad) {
    if (x.rank() != 3 || w.rank() != 2) throw ShapeError("conv1d_depthwise: expected x [b,c,t], w [c,k]");
    int64_t bsz = x.dim(0), c = x.dim(1), t = x.dim(2), k = w.dim(1);
    if (w.dim(0) != c) throw ShapeError("conv1d_depthwise: channel mismatch");
    if (pad == Pad1d::same) left_pad(pad, k);  // validates odd k

    // out[i] = sum_tau w[tau] * x[i - tau + rp], causal: rp = 0 (tap 0 = current sample)
    int64_t rp = pad == Pad1d::causal ? 0 : (k - 1) / 2;
    Tensor out = make_uninit(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.node()->val<T>().data();
        const T* wv = w.node()->val<T>().data();
        T* ov = out.node()->val<T>().data();
        parallel_for(bsz * c, [&](int64_t lo, int64_t hi) {
            for (int64_t bc = lo; bc < hi; ++bc) {
                int64_t ch = bc % c;
                const T* xrow = xv + bc * t;
                const T* wrow = wv + ch * k;
                T* orow = ov + bc * t;
                for (int64_t i = 0; i < t; ++i) {
                    T acc = 0;
                    int64_t tlo = std::max<int64_t>(0, i + rp - (t - 1));
                    int64_t thi = std::min(k - 1, i + rp);
                    for (int64_t tau = tlo; tau <= thi; ++tau) acc += wrow[tau] * xrow[i - tau + rp];
                    orow[i] = acc;
                }
            }
        });
    });
    check_finite(out, "conv1d_depthwise");
    attach(out, "conv1d_depthwise", {x, w}, [x, w, bsz, c, t, k, rp](Node& o) {
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            const T* g = o.grad_buf<T>().data();
            const T* xv = x.node()->val<T>().data();
            const T* wv = w.node()->val<T>().data();
            T* gx = x.requires_grad() ? x.node()->grad_buf<T>().data() : nullptr;
            T* gw = w.requires_grad() ? w.node()->grad_buf<T>().data() : nullptr;
            for (int64_t bc = 0; bc < bsz * c; ++bc) {
                int64_t ch = bc % c;
                const T* grow = g + bc * t;
                const T* xrow = xv + bc * t;
                const T* wrow = wv + ch * k;
                for (int64_t i = 0; i < t; ++i) {
                    T gg = grow[i];
                    if (gg == T(0)) continue;
                    int64_t tlo = std::max<int64_t>(0, i + rp - (t - 1));
                    int64_t thi = std::min(k - 1, i + rp);
                    for (int64_t tau = tlo; tau <= thi; ++tau) {
                        if (gx) gx[bc * t + i - tau + rp] += gg * wrow[tau];
                        if (gw) gw[ch * k + tau] += gg * xrow[i - tau + rp];
                    }
                }
            }
        });
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: empty shape");
    int64_t c = x.shape().back();
    if (gamma.numel() != c || beta.numel() != c)
        throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(c) + " elements");
    if (x.dtype() != gamma.dtype() || x.dtype() != beta.dtype()) throw ShapeError("layer_norm: dtype mismatch");
    int64_t rows = x.numel() / c;

    Tensor out = make_uninit(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.node()->val<T>().data();
        const T* gv = gamma.node()->val<T>().data();
        const T* bv = beta.node()->val<T>().data();
        T* ov = out.node()->val<T>().data();
        parallel_for(rows, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const T* xr = xv + r * c;
                T* orow = ov + r * c;
                T mu = 0;
                for (int64_t j = 0; j < c; ++j) mu += xr[j];
                mu /= T(c);
                T var = 0;
                for (int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= T(c);
                T inv = T(1) / std::sqrt(var + T(eps));
                for (int64_t j = 0; j < c; ++j) orow[j] = gv[j] * (xr[j] - mu) * inv + bv[j];
            }
        });
    });
    check_finite(out, "layer_norm");
    attach(out, "layer_norm", {x, gamma, beta}, [x, gamma, beta, rows, c, eps](Node& o) {
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            const T* g = o.grad_buf<T>().data();
            const T* xv = x.node()->val<T>().data();
            const T* gv = gamma.node()->val<T>().data();
            T* gx = x.requires_grad() ? x.node()->grad_buf<T>().data() : nullptr;
            T* ggamma = gamma.requires_grad() ? gamma.node()->grad_buf<T>().data() : nullptr;
            T* gbeta = beta.requires_grad() ? beta.node()->grad_buf<T>().data() : nullptr;
            std::vector<T> xhat(static_cast<size_t>(c));
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = xv + r * c;
                const T* grow = g + r * c;
                T mu = 0;
                for (int64_t j = 0; j < c; ++j) mu += xr[j];
                mu /= T(c);
                T var = 0;
                for (int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= T(c);
                T inv = T(1) / std::sqrt(var + T(eps));
                for (int64_t j = 0; j < c; ++j) xhat[size_t(j)] = (xr[j] - mu) * inv;
                if (ggamma)
                    for (int64_t j = 0; j < c; ++j) ggamma[j] += grow[j] * xhat[size_t(j)];
                if (gbeta)
                    for (int64_t j = 0; j < c; ++j) gbeta[j] += grow[j];
                if (gx) {
                    // dx = inv * (gy*gamma - mean(gy*gamma) - xhat * mean(gy*gamma*xhat))
                    T m1 = 0, m2 = 0;
                    for (int64_t j = 0; j < c; ++j) {
                        T t = grow[j] * gv[j];
                        m1 += t;
                        m2 += t * xhat[size_t(j)];
                    }
                    m1 /= T(c);
                    m2 /= T(c);
                    T* gxr = gx + r * c;
                    for (int64_t j = 0; j < c; ++j)
                        gxr[j] += inv * (grow[j] * gv[j] - m1 - xhat[size_t(j)] * m2);
                }
            }
        });
    });
    return out;
}

Tensor maxpool1d(const Tensor& x, int64_t window, int64_t stride) {
    if (x.rank() != 3) throw ShapeError("maxpool1d: expected [b,c,t]");
    if (window < 1 || stride < 1) throw ValueError("maxpool1d: window/stride must be >= 1");
    int64_t bsz = x.dim(0), c = x.dim(1), t = x.dim(2);
    int64_t to = (t + stride - 1) / stride;  // ceil mode

    Tensor out = make_uninit({bsz, c, to}, x.dtype());
    // argmax is recomputed in backward from values (first index wins)
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.node()->val<T>().data();
        T* ov = out.node()->val<T>().data();
        for (int64_t bc = 0; bc < bsz * c; ++bc) {
            const T* xrow = xv + bc * t;
            T* orow = ov + bc * to;
            for (int64_t i = 0; i < to; ++i) {
                int64_t lo = i * stride, hi = std::min(t, lo + window);
                T best = xrow[lo];
                for (int64_t j = lo + 1; j < hi; ++j)
                    if (xrow[j] > best) best = xrow[j];
                orow[i] = best;
            }
        }
    });
    attach(out, "maxpool1d", {x}, [x, bsz, c, t, to, window, stride](Node& o) {
        if (!x.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            const T* g = o.grad_buf<T>().data();
            const T* xv = x.node()->val<T>().data();
            T* gx = x.node()->grad_buf<T>().data();
            for (int64_t bc = 0; bc < bsz * c; ++bc) {
                const T* xrow = xv + bc * t;
                const T* grow = g + bc * to;
                T* gxrow = gx + bc * t;
                for (int64_t i = 0; i < to; ++i) {
                    int64_t lo = i * stride, hi = std::min(t, lo + window);
                    int64_t arg = lo;
                    for (int64_t j = lo + 1; j < hi; ++j)
                        if (xrow[j] > xrow[arg]) arg = j;
                    gxrow[arg] += grow[i];
                }
            }
        });
    });
    return out;
}

}  // namespace ssmtad
