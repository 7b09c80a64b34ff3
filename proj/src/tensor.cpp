#include "tensor_detail.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace ssmtad {

// ---- thread cap ----

namespace {
int g_max_threads = 0;  // 0: not yet resolved from env

int resolve_threads() {
    if (g_max_threads > 0) return g_max_threads;
    int n = 1;
    if (const char* env = std::getenv("SSMTAD_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v >= 1 && v <= 1024) n = int(v);
    }
    g_max_threads = n;
    return n;
}
}  // namespace

int max_threads() { return resolve_threads(); }
void set_max_threads(int n) { g_max_threads = n < 1 ? 1 : n; }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    int workers = max_threads();
    if (workers <= 1 || n < 2048) {
        body(0, n);
        return;
    }
    if (int64_t(workers) > n) workers = int(n);
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers) - 1);
    int64_t chunk = (n + workers - 1) / workers;
    for (int w = 1; w < workers; ++w) {
        int64_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

void RandomStream::restore(const std::string& st) {
    std::stringstream ss(st);
    std::string tok;
    std::getline(ss, tok, ',');
    s_ = std::stoull(tok);
    std::getline(ss, tok, ',');
    have_spare_ = (tok == "1");
    if (have_spare_) {
        std::getline(ss, tok, ',');
        spare_ = std::stod(tok);
    }
}

namespace detail {

namespace {
thread_local uint64_t t_seq = 0;
thread_local bool t_grad_enabled = true;
}  // namespace

uint64_t next_seq() { return ++t_seq; }

Tensor make_uninit(const Shape& s, DType dt) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->dt = dt;
    int64_t count = numel_of(s);
    if (count < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    if (dt == DType::f32)
        n->v32.resize(size_t(count));
    else
        n->v64.resize(size_t(count));
    n->seq = next_seq();
    return Tensor(std::move(n));
}

bool attach(Tensor& out, const char* op, const std::vector<Tensor>& parents,
            std::function<void(Node&)> backprop) {
    out.node()->op = op;
    if (!t_grad_enabled) return false;
    bool need = false;
    for (const auto& p : parents)
        if (p.defined() && p.requires_grad()) need = true;
    if (!need) return false;
    auto& n = *out.node();
    n.requires_grad = true;
    n.parents.reserve(parents.size());
    for (const auto& p : parents)
        if (p.defined()) n.parents.push_back(p.node());
    n.backprop = std::move(backprop);
    return true;
}

bool attach(Tensor& out, const char* op, std::initializer_list<Tensor> parents,
            std::function<void(Node&)> backprop) {
    return attach(out, op, std::vector<Tensor>(parents), std::move(backprop));
}

void check_finite(const Tensor& t, const char* op) {
    auto& n = *t.node();
    bool ok = true;
    if (n.dt == DType::f32) {
        for (float v : n.v32)
            if (!std::isfinite(v)) { ok = false; break; }
    } else {
        for (double v : n.v64)
            if (!std::isfinite(v)) { ok = false; break; }
    }
    if (!ok) throw NonFiniteError(std::string("non-finite value produced by op '") + op + "'");
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
    auto st = strides_of(s);
    std::vector<int64_t> r(out.size(), 0);
    size_t off = out.size() - s.size();
    for (size_t i = 0; i < s.size(); ++i)
        r[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    return r;
}

}  // namespace detail

using detail::Node;

// ---- Tensor methods ----

Tensor Tensor::zeros(const Shape& s, DType dt, bool requires_grad) {
    Tensor t = detail::make_uninit(s, dt);
    t.fill_(0.0);
    t.node()->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(const Shape& s, double v, DType dt) {
    Tensor t = detail::make_uninit(s, dt);
    t.fill_(v);
    return t;
}

Tensor Tensor::scalar(double v, DType dt) { return full({1}, v, dt); }

Tensor Tensor::from_vector(const Shape& s, const std::vector<double>& v, DType dt) {
    if (int64_t(v.size()) != numel_of(s))
        throw ShapeError("from_vector: " + std::to_string(v.size()) + " values for shape " + shape_str(s));
    Tensor t = detail::make_uninit(s, dt);
    auto& n = *t.node();
    if (dt == DType::f32)
        for (size_t i = 0; i < v.size(); ++i) n.v32[i] = float(v[i]);
    else
        n.v64 = v;
    return t;
}

Tensor Tensor::param(const Shape& s, const std::vector<double>& v, DType dt) {
    Tensor t = from_vector(s, v, dt);
    t.node()->requires_grad = true;
    return t;
}

Tensor Tensor::randn(const Shape& s, RandomStream& rng, double scale, DType dt) {
    int64_t n = numel_of(s);
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.normal() * scale;
    return from_vector(s, v, dt);
}

Tensor Tensor::uniform_fan_in(const Shape& s, int64_t fan_in, RandomStream& rng, DType dt, bool requires_grad) {
    if (fan_in < 1) throw ValueError("uniform_fan_in: fan_in must be >= 1");
    double bound = 1.0 / std::sqrt(double(fan_in));
    int64_t n = numel_of(s);
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    Tensor t = from_vector(s, v, dt);
    t.node()->requires_grad = requires_grad;
    return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

int64_t Tensor::dim(int axis) const {
    const Shape& s = shape();
    if (axis < 0) axis += int(s.size());
    if (axis < 0 || axis >= int(s.size())) throw ShapeError("dim: axis out of range");
    return s[size_t(axis)];
}

int64_t Tensor::numel() const { return node_->numel(); }
DType Tensor::dtype() const { return node_->dt; }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    if (!node_->parents.empty()) throw ValueError("set_requires_grad: only valid on leaf tensors");
    node_->requires_grad = rg;
}

namespace {
int64_t flat_index(const Shape& s, const std::vector<int64_t>& idx) {
    if (idx.size() != s.size()) throw ShapeError("index rank mismatch");
    int64_t lin = 0;
    for (size_t i = 0; i < s.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= s[i]) throw ShapeError("index out of bounds");
        lin = lin * s[i] + idx[i];
    }
    return lin;
}
}  // namespace

double Tensor::at(const std::vector<int64_t>& idx) const {
    int64_t lin = flat_index(shape(), idx);
    return node_->dt == DType::f32 ? double(node_->v32[size_t(lin)]) : node_->v64[size_t(lin)];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->dt == DType::f32 ? double(node_->v32[0]) : node_->v64[0];
}

std::vector<double> Tensor::to_vector() const {
    if (node_->dt == DType::f64) return node_->v64;
    std::vector<double> v(node_->v32.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = double(node_->v32[i]);
    return v;
}

std::vector<double>& Tensor::data_f64() {
    if (node_->dt != DType::f64) throw ValueError("data_f64 on f32 tensor");
    return node_->v64;
}
const std::vector<double>& Tensor::data_f64() const {
    if (node_->dt != DType::f64) throw ValueError("data_f64 on f32 tensor");
    return node_->v64;
}
std::vector<float>& Tensor::data_f32() {
    if (node_->dt != DType::f32) throw ValueError("data_f32 on f64 tensor");
    return node_->v32;
}
const std::vector<float>& Tensor::data_f32() const {
    if (node_->dt != DType::f32) throw ValueError("data_f32 on f64 tensor");
    return node_->v32;
}

void Tensor::set(const std::vector<int64_t>& idx, double v) {
    int64_t lin = flat_index(shape(), idx);
    if (node_->dt == DType::f32)
        node_->v32[size_t(lin)] = float(v);
    else
        node_->v64[size_t(lin)] = v;
}

void Tensor::fill_(double v) {
    if (node_->dt == DType::f32)
        std::fill(node_->v32.begin(), node_->v32.end(), float(v));
    else
        std::fill(node_->v64.begin(), node_->v64.end(), v);
}

void Tensor::copy_from(const Tensor& src) {
    if (src.shape() != shape() || src.dtype() != dtype())
        throw ShapeError("copy_from: shape/dtype mismatch");
    if (node_->dt == DType::f32)
        node_->v32 = src.node_->v32;
    else
        node_->v64 = src.node_->v64;
}

bool Tensor::has_grad() const { return node_ && node_->grad_alloc; }

Tensor Tensor::grad() const {
    if (!has_grad()) throw ValueError("grad: no gradient accumulated");
    Tensor g = detail::make_uninit(shape(), dtype());
    if (node_->dt == DType::f32)
        g.node()->v32 = node_->g32;
    else
        g.node()->v64 = node_->g64;
    return g;
}

std::vector<double> Tensor::grad_vector() const { return grad().to_vector(); }

void Tensor::zero_grad() {
    node_->grad_alloc = false;
    node_->g32.clear();
    node_->g64.clear();
}

Tensor Tensor::detach() const {
    Tensor t = detail::make_uninit(shape(), dtype());
    if (node_->dt == DType::f32)
        t.node()->v32 = node_->v32;
    else
        t.node()->v64 = node_->v64;
    return t;
}

// ---- tape control / backward ----

NoGradGuard::NoGradGuard() : prev_(detail::t_grad_enabled) { detail::t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::t_grad_enabled = prev_; }
bool grad_enabled() { return detail::t_grad_enabled; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) throw ShapeError("backward: loss must be a single scalar");
    if (!loss.requires_grad()) throw ValueError("backward: loss does not require grad");

    // Gather the reachable grad-requiring subgraph, then run in decreasing
    // creation order.  Parents always precede children in seq, so this is a
    // topological order and every node is finalized before its backprop runs.
    std::vector<Node*> nodes;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

    loss.node()->ensure_grad();
    if (loss.dtype() == DType::f32)
        loss.node()->g32[0] = 1.0f;
    else
        loss.node()->g64[0] = 1.0;

    for (Node* n : nodes) {
        if (!n->backprop || !n->grad_alloc) continue;
        for (auto& p : n->parents)
            if (p->requires_grad) p->ensure_grad();
        n->backprop(*n);
    }
}

// ---- gradient checking ----

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           const std::vector<Tensor>& params, double eps, int64_t max_coords_per_param,
                           uint64_t seed) {
    for (const auto& p : params) {
        if (p.dtype() != DType::f64) throw ValueError("grad_check requires f64 parameters");
        if (!p.requires_grad()) throw ValueError("grad_check: parameter does not require grad");
    }

    Tensor loss = f(params);
    if (loss.dtype() != DType::f64) throw ValueError("grad_check requires an f64 loss");
    for (const auto& p : params) p.node()->grad_alloc = false;
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad_vector() : std::vector<double>(size_t(p.numel()), 0.0));

    GradCheckReport rep;
    RandomStream rng(seed);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto& data = p.data_f64();
        int64_t n = p.numel();
        std::vector<int64_t> coords;
        if (max_coords_per_param <= 0 || max_coords_per_param >= n) {
            coords.resize(size_t(n));
            std::iota(coords.begin(), coords.end(), 0);
        } else {
            for (int64_t k = 0; k < max_coords_per_param; ++k) coords.push_back(rng.uniform_int(0, n - 1));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }
        for (int64_t ci : coords) {
            double orig = data[size_t(ci)];
            double lp, lm;
            {
                NoGradGuard ng;
                data[size_t(ci)] = orig + eps;
                lp = f(params).item();
                data[size_t(ci)] = orig - eps;
                lm = f(params).item();
                data[size_t(ci)] = orig;
            }
            double numeric = (lp - lm) / (2.0 * eps);
            double a = analytic[pi][size_t(ci)];
            // the 1e-4 floor keeps structurally-zero coordinates from amplifying
            // central-difference noise (~|loss|*eps_mach/eps) into a fake error
            double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = "param" + std::to_string(pi);
                rep.worst_index = ci;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
    }
    return rep;
}

}  // namespace ssmtad
