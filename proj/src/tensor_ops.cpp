#include "tensor_detail.hpp"

#include <algorithm>

namespace ssmtad {

using detail::attach;
using detail::bcast_iterate;
using detail::bcast_strides;
using detail::broadcast_shape;
using detail::check_finite;
using detail::dispatch;
using detail::make_uninit;
using detail::Node;
using detail::require;

namespace {

// sigmoid with the usual split to avoid overflow in exp
template <typename T>
T sigmoid_s(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T softplus_s(T x) {
    if (x > T(20)) return x;
    if (x < T(-20)) return std::exp(x);
    return std::log1p(std::exp(x));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// f: scalar forward; df: derivative from (x, z)
template <class F, class DF>
Tensor unary_ew(const char* name, const Tensor& a, F f, DF df) {
    Tensor out = make_uninit(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& av = a.node()->val<T>();
        auto& ov = out.node()->val<T>();
        for (size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
    });
    check_finite(out, name);
    attach(out, name, {a}, [a, df](Node& o) {
        if (!a.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            auto& g = o.grad_buf<T>();
            auto& av = a.node()->val<T>();
            auto& ov = o.val<T>();
            auto& pg = a.node()->grad_buf<T>();
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * df(av[i], ov[i]);
        });
    });
    return out;
}

// pa/pb: local partials from (x, y, z)
template <class F, class PA, class PB>
Tensor binary_ew(const char* name, const Tensor& a, const Tensor& b, F f, PA pa, PB pb) {
    require(a.defined() && b.defined(), std::string(name) + ": undefined operand");
    if (a.dtype() != b.dtype())
        throw ShapeError(std::string(name) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()) + ")");
    Shape os = broadcast_shape(a.shape(), b.shape(), name);
    Tensor out = make_uninit(os, a.dtype());
    bool same = a.shape() == b.shape();
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& av = a.node()->val<T>();
        auto& bv = b.node()->val<T>();
        auto& ov = out.node()->val<T>();
        if (same) {
            for (size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i], bv[i]);
        } else {
            auto sa = bcast_strides(a.shape(), os), sb = bcast_strides(b.shape(), os);
            bcast_iterate(os, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
                ov[size_t(lin)] = f(av[size_t(oa)], bv[size_t(ob)]);
            });
        }
    });
    check_finite(out, name);
    auto sa = bcast_strides(a.shape(), os), sb = bcast_strides(b.shape(), os);
    attach(out, name, {a, b}, [a, b, sa, sb, pa, pb, same](Node& o) {
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            auto& g = o.grad_buf<T>();
            auto& av = a.node()->val<T>();
            auto& bv = b.node()->val<T>();
            auto& ov = o.val<T>();
            T* ga = a.requires_grad() ? a.node()->grad_buf<T>().data() : nullptr;
            T* gb = b.requires_grad() ? b.node()->grad_buf<T>().data() : nullptr;
            if (same) {
                for (size_t i = 0; i < g.size(); ++i) {
                    if (ga) ga[i] += g[i] * pa(av[i], bv[i], ov[i]);
                    if (gb) gb[i] += g[i] * pb(av[i], bv[i], ov[i]);
                }
            } else {
                bcast_iterate(o.shape, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
                    T gg = g[size_t(lin)];
                    if (ga) ga[size_t(oa)] += gg * pa(av[size_t(oa)], bv[size_t(ob)], ov[size_t(lin)]);
                    if (gb) gb[size_t(ob)] += gg * pb(av[size_t(oa)], bv[size_t(ob)], ov[size_t(lin)]);
                });
            }
        });
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "add", a, b, [](auto x, auto y) { return x + y; }, [](auto, auto, auto) { return 1; },
        [](auto, auto, auto) { return 1; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "sub", a, b, [](auto x, auto y) { return x - y; }, [](auto, auto, auto) { return 1; },
        [](auto, auto, auto) { return -1; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "mul", a, b, [](auto x, auto y) { return x * y; }, [](auto, auto y, auto) { return y; },
        [](auto x, auto, auto) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "div", a, b, [](auto x, auto y) { return x / y; },
        [](auto, auto y, auto) { return decltype(y)(1) / y; },
        [](auto, auto y, auto z) { return -z / y; });
}

// ties route the gradient to the first operand
Tensor minimum(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "minimum", a, b, [](auto x, auto y) { return x <= y ? x : y; },
        [](auto x, auto y, auto) -> decltype(x) { return x <= y ? 1 : 0; },
        [](auto x, auto y, auto) -> decltype(x) { return x <= y ? 0 : 1; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return binary_ew(
        "maximum", a, b, [](auto x, auto y) { return x >= y ? x : y; },
        [](auto x, auto y, auto) -> decltype(x) { return x >= y ? 1 : 0; },
        [](auto x, auto y, auto) -> decltype(x) { return x >= y ? 0 : 1; });
}

Tensor neg(const Tensor& a) {
    return unary_ew(
        "neg", a, [](auto x) { return -x; }, [](auto x, auto) -> decltype(x) { return -1; });
}

Tensor exp(const Tensor& a) {
    return unary_ew(
        "exp", a, [](auto x) { return std::exp(x); }, [](auto, auto z) { return z; });
}

Tensor expm1(const Tensor& a) {
    return unary_ew(
        "expm1", a, [](auto x) { return std::expm1(x); }, [](auto, auto z) { return z + decltype(z)(1); });
}

Tensor log(const Tensor& a) {
    return unary_ew(
        "log", a, [](auto x) { return std::log(x); }, [](auto x, auto) { return decltype(x)(1) / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_ew(
        "sqrt", a, [](auto x) { return std::sqrt(x); },
        [](auto, auto z) { return decltype(z)(0.5) / z; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_ew(
        "sigmoid", a, [](auto x) { return sigmoid_s(x); },
        [](auto, auto z) { return z * (decltype(z)(1) - z); });
}

Tensor softplus(const Tensor& a) {
    return unary_ew(
        "softplus", a, [](auto x) { return softplus_s(x); }, [](auto x, auto) { return sigmoid_s(x); });
}

Tensor silu(const Tensor& a) {
    return unary_ew(
        "silu", a, [](auto x) { return x * sigmoid_s(x); },
        [](auto x, auto) {
            auto s = sigmoid_s(x);
            return s * (decltype(x)(1) + x * (decltype(x)(1) - s));
        });
}

Tensor gelu(const Tensor& a) {
    return unary_ew(
        "gelu", a,
        [](auto x) {
            using T = decltype(x);
            return T(0.5) * x * (T(1) + T(std::erf(double(x) * kInvSqrt2)));
        },
        [](auto x, auto) {
            using T = decltype(x);
            double xd = double(x);
            double phi_big = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
            double phi = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
            return T(phi_big + xd * phi);
        });
}

Tensor relu(const Tensor& a) {
    return unary_ew(
        "relu", a, [](auto x) { return x > decltype(x)(0) ? x : decltype(x)(0); },
        [](auto x, auto) -> decltype(x) { return x > decltype(x)(0) ? 1 : 0; });
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
    switch (op) {
        case EwOp::add: return add(a, b);
        case EwOp::sub: return sub(a, b);
        case EwOp::mul: return mul(a, b);
        case EwOp::div: return div(a, b);
        case EwOp::minimum: return minimum(a, b);
        case EwOp::maximum: return maximum(a, b);
        case EwOp::neg: return neg(a);
        case EwOp::exp: return exp(a);
        case EwOp::expm1: return expm1(a);
        case EwOp::log: return log(a);
        case EwOp::sqrt: return sqrt(a);
        case EwOp::sigmoid: return sigmoid(a);
        case EwOp::softplus: return softplus(a);
        case EwOp::silu: return silu(a);
        case EwOp::gelu: return gelu(a);
        case EwOp::relu: return relu(a);
    }
    throw ValueError("elementwise: unknown op kind");
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_ew(
        "add_scalar", a, [s](auto x) { return x + decltype(x)(s); },
        [](auto x, auto) -> decltype(x) { return 1; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_ew(
        "mul_scalar", a, [s](auto x) { return x * decltype(x)(s); },
        [s](auto x, auto) -> decltype(x) { return decltype(x)(s); });
}

// ---- shape / movement ----

namespace {
// collapse shape to [outer, k, inner] around `axis`
void split3(const Shape& s, int axis, int64_t& outer, int64_t& k, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[size_t(i)];
    k = s[size_t(axis)];
    for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

int norm_axis(const Shape& s, int axis, const char* op) {
    int r = int(s.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError(std::string(op) + ": axis out of range for " + shape_str(s));
    return axis;
}
}  // namespace

Tensor reshape(const Tensor& a, const Shape& s) {
    if (numel_of(s) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
    Tensor out = make_uninit(s, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        out.node()->val<T>() = a.node()->val<T>();
    });
    attach(out, "reshape", {a}, [a](Node& o) {
        if (!a.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            auto& g = o.grad_buf<T>();
            auto& pg = a.node()->grad_buf<T>();
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        });
    });
    return out;
}

namespace {
// shared kernel: copy with two axes swapped; used by forward and backward
template <typename T>
void swap_copy(const Shape& in_shape, int i, int j, const std::vector<T>& src, std::vector<T>& dst) {
    int64_t outer = 1, d0 = in_shape[size_t(i)], mid = 1, d1 = in_shape[size_t(j)], inner = 1;
    for (int k = 0; k < i; ++k) outer *= in_shape[size_t(k)];
    for (int k = i + 1; k < j; ++k) mid *= in_shape[size_t(k)];
    for (size_t k = size_t(j) + 1; k < in_shape.size(); ++k) inner *= in_shape[k];
    // src index [o, a, m, b, in] -> dst index [o, b, m, a, in]
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < d0; ++a)
            for (int64_t m = 0; m < mid; ++m)
                for (int64_t b = 0; b < d1; ++b) {
                    const T* s = &src[size_t((((o * d0 + a) * mid + m) * d1 + b) * inner)];
                    T* d = &dst[size_t((((o * d1 + b) * mid + m) * d0 + a) * inner)];
                    for (int64_t t = 0; t < inner; ++t) d[t] = s[t];
                }
}
}  // namespace

Tensor swap_axes(const Tensor& a, int ax0, int ax1) {
    int i = norm_axis(a.shape(), ax0, "swap_axes");
    int j = norm_axis(a.shape(), ax1, "swap_axes");
    if (i == j) return reshape(a, a.shape());
    if (i > j) std::swap(i, j);
    Shape os = a.shape();
    std::swap(os[size_t(i)], os[size_t(j)]);
    Tensor out = make_uninit(os, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        swap_copy(a.shape(), i, j, a.node()->val<T>(), out.node()->val<T>());
    });
    attach(out, "swap_axes", {a}, [a, i, j, os](Node& o) {
        if (!a.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            std::vector<T> tmp(o.grad_buf<T>().size());
            swap_copy(os, i, j, o.grad_buf<T>(), tmp);
            auto& pg = a.node()->grad_buf<T>();
            for (size_t k = 0; k < tmp.size(); ++k) pg[k] += tmp[k];
        });
    });
    return out;
}

Tensor flip(const Tensor& a, int axis) {
    int ax = norm_axis(a.shape(), axis, "flip");
    int64_t outer, k, inner;
    split3(a.shape(), ax, outer, k, inner);
    Tensor out = make_uninit(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& src = a.node()->val<T>();
        auto& dst = out.node()->val<T>();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t t = 0; t < k; ++t) {
                const T* s = &src[size_t((o * k + t) * inner)];
                T* d = &dst[size_t((o * k + (k - 1 - t)) * inner)];
                for (int64_t m = 0; m < inner; ++m) d[m] = s[m];
            }
    });
    attach(out, "flip", {a}, [a, outer, k, inner](Node& o) {
        if (!a.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            auto& g = o.grad_buf<T>();
            auto& pg = a.node()->grad_buf<T>();
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t t = 0; t < k; ++t) {
                    const T* s = &g[size_t((ou * k + (k - 1 - t)) * inner)];
                    T* d = &pg[size_t((ou * k + t) * inner)];
                    for (int64_t m = 0; m < inner; ++m) d[m] += s[m];
                }
        });
    });
    return out;
}

Tensor narrow(const Tensor& a, int axis, int64_t start, int64_t len) {
    int ax = norm_axis(a.shape(), axis, "narrow");
    int64_t outer, k, inner;
    split3(a.shape(), ax, outer, k, inner);
    if (start < 0 || len < 0 || start + len > k)
        throw ShapeError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") exceeds extent " + std::to_string(k));
    Shape os = a.shape();
    os[size_t(ax)] = len;
    Tensor out = make_uninit(os, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& src = a.node()->val<T>();
        auto& dst = out.node()->val<T>();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t t = 0; t < len; ++t)
                std::copy_n(&src[size_t((o * k + start + t) * inner)], inner,
                            &dst[size_t((o * len + t) * inner)]);
    });
    attach(out, "narrow", {a}, [a, outer, k, inner, start, len](Node& o) {
        if (!a.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            auto& g = o.grad_buf<T>();
            auto& pg = a.node()->grad_buf<T>();
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t t = 0; t < len; ++t) {
                    const T* s = &g[size_t((ou * len + t) * inner)];
                    T* d = &pg[size_t((ou * k + start + t) * inner)];
                    for (int64_t m = 0; m < inner; ++m) d[m] += s[m];
                }
        });
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    int ax = norm_axis(parts[0].shape(), axis, "concat");
    Shape os = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank() || p.dtype() != parts[0].dtype())
            throw ShapeError("concat: rank/dtype mismatch");
        for (int i = 0; i < p.rank(); ++i)
            if (i != ax && p.shape()[size_t(i)] != os[size_t(i)])
                throw ShapeError("concat: extent mismatch off the concat axis");
        total += p.shape()[size_t(ax)];
    }
    os[size_t(ax)] = total;
    Tensor out = make_uninit(os, parts[0].dtype());
    int64_t outer, ko, inner;
    split3(os, ax, outer, ko, inner);
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& dst = out.node()->val<T>();
        int64_t off = 0;
        for (const auto& p : parts) {
            int64_t kp = p.shape()[size_t(ax)];
            auto& src = p.node()->val<T>();
            for (int64_t o = 0; o < outer; ++o)
                std::copy_n(&src[size_t(o * kp * inner)], kp * inner,
                            &dst[size_t((o * ko + off) * inner)]);
            off += kp;
        }
    });
    attach(out, "concat", parts, [parts, outer, ko, inner, ax](Node& o) {
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            auto& g = o.grad_buf<T>();
            int64_t off = 0;
            for (const auto& p : parts) {
                int64_t kp = p.shape()[size_t(ax)];
                if (p.requires_grad()) {
                    auto& pg = p.node()->grad_buf<T>();
                    for (int64_t ou = 0; ou < outer; ++ou) {
                        const T* s = &g[size_t((ou * ko + off) * inner)];
                        T* d = &pg[size_t(ou * kp * inner)];
                        for (int64_t m = 0; m < kp * inner; ++m) d[m] += s[m];
                    }
                }
                off += kp;
            }
        });
    });
    return out;
}

Tensor cast(const Tensor& a, DType dt) {
    if (a.dtype() == dt) return reshape(a, a.shape());
    Tensor out = make_uninit(a.shape(), dt);
    if (dt == DType::f32) {
        auto& src = a.node()->val<double>();
        auto& dst = out.node()->val<float>();
        for (size_t i = 0; i < src.size(); ++i) dst[i] = float(src[i]);
    } else {
        auto& src = a.node()->val<float>();
        auto& dst = out.node()->val<double>();
        for (size_t i = 0; i < src.size(); ++i) dst[i] = double(src[i]);
    }
    attach(out, "cast", {a}, [a](Node& o) {
        if (!a.requires_grad()) return;
        if (o.dt == DType::f32) {
            auto& g = o.g32;
            auto& pg = a.node()->g64;
            for (size_t i = 0; i < g.size(); ++i) pg[i] += double(g[i]);
        } else {
            auto& g = o.g64;
            auto& pg = a.node()->g32;
            for (size_t i = 0; i < g.size(); ++i) pg[i] += float(g[i]);
        }
    });
    return out;
}

// ---- reductions ----

Tensor reduce_sum(const Tensor& a, int axis, bool keepdim) {
    int ax = norm_axis(a.shape(), axis, "reduce_sum");
    int64_t outer, k, inner;
    split3(a.shape(), ax, outer, k, inner);
    Shape os = a.shape();
    if (keepdim)
        os[size_t(ax)] = 1;
    else
        os.erase(os.begin() + ax);
    if (os.empty()) os = {1};
    Tensor out = make_uninit(os, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& src = a.node()->val<T>();
        auto& dst = out.node()->val<T>();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t m = 0; m < inner; ++m) {
                T acc = 0;
                for (int64_t t = 0; t < k; ++t) acc += src[size_t((o * k + t) * inner + m)];
                dst[size_t(o * inner + m)] = acc;
            }
    });
    check_finite(out, "reduce_sum");
    attach(out, "reduce_sum", {a}, [a, outer, k, inner](Node& o) {
        if (!a.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            auto& g = o.grad_buf<T>();
            auto& pg = a.node()->grad_buf<T>();
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t t = 0; t < k; ++t)
                    for (int64_t m = 0; m < inner; ++m)
                        pg[size_t((ou * k + t) * inner + m)] += g[size_t(ou * inner + m)];
        });
    });
    return out;
}

Tensor sum_all(const Tensor& a) {
    Tensor out = make_uninit({1}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& src = a.node()->val<T>();
        T acc = 0;
        for (T v : src) acc += v;
        out.node()->val<T>()[0] = acc;
    });
    check_finite(out, "sum_all");
    attach(out, "sum_all", {a}, [a](Node& o) {
        if (!a.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            T g = o.grad_buf<T>()[0];
            auto& pg = a.node()->grad_buf<T>();
            for (auto& v : pg) v += g;
        });
    });
    return out;
}

Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
    return mul_scalar(sum_all(a), 1.0 / double(a.numel()));
}

Tensor mask_diagonal(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("mask_diagonal: expected rank-2, got " + shape_str(a.shape()));
    int64_t r = a.dim(0), c = a.dim(1), d = std::min(r, c);
    Tensor out = make_uninit(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto& src = a.node()->val<T>();
        auto& dst = out.node()->val<T>();
        dst = src;
        for (int64_t i = 0; i < d; ++i) dst[size_t(i * c + i)] = 0;
    });
    attach(out, "mask_diagonal", {a}, [a, c, d](Node& o) {
        if (!a.requires_grad()) return;
        dispatch(o.dt, [&](auto tag) {
            using T = decltype(tag);
            auto& g = o.grad_buf<T>();
            auto& pg = a.node()->grad_buf<T>();
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            for (int64_t i = 0; i < d; ++i) pg[size_t(i * c + i)] -= g[size_t(i * c + i)];
        });
    });
    return out;
}

}  // namespace ssmtad
