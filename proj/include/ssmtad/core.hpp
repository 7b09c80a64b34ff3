#pragma once

#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmtad {

enum class DType { f32, f64 };

inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};
// Raised when a forward op produces NaN/Inf; callers map this to exit code 2.
struct NonFiniteError : std::runtime_error {
    explicit NonFiniteError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Thread cap for internal parallel loops.  SSMTAD_THREADS=k clamps it; the
// default is single-threaded so results never depend on an unset environment.
int max_threads();
void set_max_threads(int n);

// Deterministic static partition of [0,n) over at most max_threads() workers.
// Each worker owns a disjoint index range, so results are identical for any
// thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

// Deterministic RNG (splitmix64 core, Box-Muller normals).  Hand-rolled so
// streams do not depend on the standard library's implementation-defined
// distribution algorithms; seeded runs are bit-reproducible.
class RandomStream {
public:
    explicit RandomStream(uint64_t seed = 0) : s_(seed ? seed : 0x9e3779b97f4a7c15ull) {
        // splitmix64 warmup to decorrelate nearby seeds
        for (int i = 0; i < 4; ++i) next_u64();
    }

    uint64_t next_u64() {
        uint64_t z = (s_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
        return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Derive a child stream; pure function of (state-at-call, salt).
    RandomStream fork(uint64_t salt) {
        RandomStream child(next_u64() ^ (salt * 0xd1b54a32d192ed03ull));
        return child;
    }

    std::string state() const { return std::to_string(s_) + (have_spare_ ? ",1," + std::to_string(spare_) : ",0"); }
    void restore(const std::string& st);

private:
    uint64_t s_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ssmtad
