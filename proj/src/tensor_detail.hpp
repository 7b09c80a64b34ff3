#pragma once

#include <atomic>
#include <cstring>

#include "ssmtad/tensor.hpp"

// Internal tape machinery shared by the op translation units.

namespace ssmtad {
namespace detail {

struct Node {
    Shape shape;
    DType dt = DType::f64;
    std::vector<float> v32;
    std::vector<double> v64;
    bool requires_grad = false;
    std::vector<float> g32;
    std::vector<double> g64;
    bool grad_alloc = false;

    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads own grad, accumulates into parents
    uint64_t seq = 0;
    const char* op = "leaf";

    int64_t numel() const { return numel_of(shape); }

    template <typename T>
    std::vector<T>& val();
    template <typename T>
    std::vector<T>& grad_buf();

    void ensure_grad() {
        if (grad_alloc) return;
        if (dt == DType::f32)
            g32.assign(v32.size(), 0.0f);
        else
            g64.assign(v64.size(), 0.0);
        grad_alloc = true;
    }
};

template <>
inline std::vector<float>& Node::val<float>() { return v32; }
template <>
inline std::vector<double>& Node::val<double>() { return v64; }
template <>
inline std::vector<float>& Node::grad_buf<float>() { return g32; }
template <>
inline std::vector<double>& Node::grad_buf<double>() { return g64; }

uint64_t next_seq();

// Fresh node with uninitialized storage of the right size.
Tensor make_uninit(const Shape& s, DType dt);

// Wire parents + backprop onto `out` if the tape is active and any parent
// needs grad.  Returns whether the edge was recorded.
bool attach(Tensor& out, const char* op, std::initializer_list<Tensor> parents,
            std::function<void(Node&)> backprop);
bool attach(Tensor& out, const char* op, const std::vector<Tensor>& parents,
            std::function<void(Node&)> backprop);

// Throws NonFiniteError naming `op` if any element is NaN/Inf.
void check_finite(const Tensor& t, const char* op);

template <class F>
auto dispatch(DType dt, F&& f) {
    if (dt == DType::f32) return f(float{});
    return f(double{});
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Row-major strides for a shape.
inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = int(s.size()) - 1; i >= 0; --i) {
        st[size_t(i)] = acc;
        acc *= s[size_t(i)];
    }
    return st;
}

// Broadcast result shape (numpy rules, right-aligned).
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);

// Strides of operand `s` aligned to broadcast shape `out` (0 on broadcast axes).
std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out);

// Odometer over `out`; yields (out_linear, a_offset, b_offset).
template <class Body>
void bcast_iterate(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb, Body&& body) {
    int rank = int(out.size());
    int64_t n = numel_of(out);
    std::vector<int64_t> idx(size_t(rank), 0);
    int64_t oa = 0, ob = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        body(lin, oa, ob);
        for (int ax = rank - 1; ax >= 0; --ax) {
            idx[size_t(ax)]++;
            oa += sa[size_t(ax)];
            ob += sb[size_t(ax)];
            if (idx[size_t(ax)] < out[size_t(ax)]) break;
            oa -= sa[size_t(ax)] * out[size_t(ax)];
            ob -= sb[size_t(ax)] * out[size_t(ax)];
            idx[size_t(ax)] = 0;
        }
    }
}

}  // namespace detail
}  // namespace ssmtad
