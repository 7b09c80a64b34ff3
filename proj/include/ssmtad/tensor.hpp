#pragma once

#include <functional>
#include <initializer_list>
#include <memory>

#include "ssmtad/core.hpp"

namespace ssmtad {

namespace detail {
struct Node;
}

// Dense row-major tensor with a reverse-mode tape.  Values are immutable once
// an op has produced them; leaves (parameters, inputs) may be rewritten in
// place between graphs by the optimizer or by tests.  dtype is a per-tensor
// property: binary ops require matching dtypes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& s, DType dt = DType::f64, bool requires_grad = false);
    static Tensor full(const Shape& s, double v, DType dt = DType::f64);
    static Tensor scalar(double v, DType dt = DType::f64);
    static Tensor from_vector(const Shape& s, const std::vector<double>& v, DType dt = DType::f64);
    // leaf with requires_grad set
    static Tensor param(const Shape& s, const std::vector<double>& v, DType dt = DType::f64);
    static Tensor randn(const Shape& s, RandomStream& rng, double scale = 1.0, DType dt = DType::f64);
    // fan-in-scaled uniform noise in [-1/sqrt(fan_in), 1/sqrt(fan_in)]
    static Tensor uniform_fan_in(const Shape& s, int64_t fan_in, RandomStream& rng, DType dt = DType::f64,
                                 bool requires_grad = true);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t dim(int axis) const;
    int rank() const { return int(shape().size()); }
    int64_t numel() const;
    DType dtype() const;
    bool requires_grad() const;
    void set_requires_grad(bool rg);  // leaves only

    double at(const std::vector<int64_t>& idx) const;
    double item() const;  // numel()==1
    std::vector<double> to_vector() const;

    // in-place access, leaves/fixtures only; f64 tensors
    std::vector<double>& data_f64();
    const std::vector<double>& data_f64() const;
    std::vector<float>& data_f32();
    const std::vector<float>& data_f32() const;
    void set(const std::vector<int64_t>& idx, double v);
    void fill_(double v);
    void copy_from(const Tensor& src);  // same shape+dtype, values only

    bool has_grad() const;
    Tensor grad() const;  // detached copy of accumulated gradient
    std::vector<double> grad_vector() const;
    void zero_grad();

    Tensor detach() const;  // value copy, no tape, requires_grad off
    Tensor clone_leaf() const { return detach(); }

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// stable-ordered (name, tensor) pairs; the exchange format between model
// definitions, the optimizer, and checkpoints
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// ---- tape control ----

// RAII guard: ops built under it record no tape (inference / finite diffs).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_enabled();

// Reverse-mode sweep from a scalar loss.  Deterministic: nodes are visited in
// strictly decreasing creation order, each exactly once.
void backward(const Tensor& loss);

// ---- elementwise ops ----

enum class EwOp { add, sub, mul, div, minimum, maximum, neg, exp, expm1, log, sqrt, sigmoid, softplus, silu, gelu, relu };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor expm1(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);

// single dispatcher over the registered elementwise kinds (b ignored for unary)
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b = Tensor());

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// ---- shape / movement ----

Tensor reshape(const Tensor& a, const Shape& s);
Tensor swap_axes(const Tensor& a, int ax0, int ax1);
Tensor flip(const Tensor& a, int axis);  // time reversal when axis is the time axis
Tensor narrow(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor cast(const Tensor& a, DType dt);

// ---- reductions ----

Tensor reduce_sum(const Tensor& a, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);   // scalar, shape {1}
Tensor mean_all(const Tensor& a);  // scalar, shape {1}

// zeroes Mat[i][i] for i < min(rows, cols); rank-2 only
Tensor mask_diagonal(const Tensor& a);

// ---- NN ops ----

// x [..., ci] @ w [ci, co] + b [co]; bias optional (undefined Tensor)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

enum class Pad1d { same, causal };

// x [b, ci, t], w [co, ci, k], bias [co] optional.  same requires odd k.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, Pad1d pad);

// x [b, c, t], w [c, k]; causal: out[t] = sum_tau w[tau] * x[t - tau]
// (tap 0 multiplies the current sample, so w = [1, 0, ...] is the identity)
Tensor conv1d_depthwise(const Tensor& x, const Tensor& w, Pad1d pad = Pad1d::causal);

// normalizes the last axis; gamma/beta shaped [c]
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// x [b, c, t]; ceil-mode output length; ties keep the first index
Tensor maxpool1d(const Tensor& x, int64_t window, int64_t stride);

// ---- verification ----

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    double analytic = 0.0, numeric = 0.0;
};

// Central-difference check of d(loss)/d(param) for every (sampled) coordinate.
// f rebuilds the scalar loss from the given leaves; params must be f64.
// max_coords_per_param == 0 checks every coordinate.
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           const std::vector<Tensor>& params, double eps = 1e-5,
                           int64_t max_coords_per_param = 0, uint64_t seed = 17);

}  // namespace ssmtad
