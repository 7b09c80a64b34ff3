#pragma once

#include "ssmtad/tensor.hpp"

namespace ssmtad {

// Continuous-time selective parameters for one scan direction.
// a is the state matrix diagonal per channel; b/c/delta vary per step.
struct SsmParams {
    Tensor a;      // [c, n], strictly negative
    Tensor b;      // [batch, t, n]
    Tensor c;      // [batch, t, n]
    Tensor delta;  // [batch, t, c], strictly positive
};

struct DiscreteSsm {
    Tensor a_bar;  // [batch, t, c, n]
    Tensor b_bar;  // [batch, t, c, n]
};

// Zero-order hold: a_bar = exp(delta*a), b_bar = expm1(delta*a)/a * b.
// The expm1 form stays exact in the delta*a -> 0 limit (b_bar -> delta*b).
DiscreteSsm discretize_zoh(const SsmParams& p);

// Input-dependent parameter generators: b, c from linear maps, delta through
// a softplus with learned bias.
struct SelectiveProj {
    Tensor w_b;         // [c, n]
    Tensor w_c;         // [c, n]
    Tensor w_delta;     // [c, c]
    Tensor delta_bias;  // [c]
};
SsmParams selective_params(const Tensor& x, const Tensor& a, const SelectiveProj& proj);

enum class ScanKind { recurrent, parallel, dense_oracle };

// h_t = a_bar_t (*) h_{t-1} + b_bar_t * x_t ; y_t[c] = sum_n cc_t[n] h_t[c,n].
// recurrent and parallel share one analytic reverse-time adjoint; the dense
// oracle is a forward-only reference that expands the full mixing matrix
// action in O(t^2) without storing it.
Tensor scan(const DiscreteSsm& d, const Tensor& cc, const Tensor& x, ScanKind kind);
Tensor scan_recurrent(const DiscreteSsm& d, const Tensor& cc, const Tensor& x);
Tensor scan_parallel(const DiscreteSsm& d, const Tensor& cc, const Tensor& x);
Tensor scan_dense_oracle(const DiscreteSsm& d, const Tensor& cc, const Tensor& x);

// Full per-lane mixing matrix M [batch, c, t, t], lower triangular:
//   M[i][j] = sum_n cc_i[n] * (prod_{k=j+1..i} a_bar_k[n]) * b_bar_j[n].
// Verification only (detached); t capped at 512 to bound the t^2 storage.
Tensor materialize_mixing_matrix(const DiscreteSsm& d, const Tensor& cc);
constexpr int64_t kMixingMatrixMaxT = 512;

// Convolution view for time-constant parameters: kernel [batch, c, t] with
// K[tau] = sum_n cc[n] * a_bar[n]^tau * b_bar[n].  Throws if any parameter
// varies along t.  lti_apply runs the causal convolution (both detached).
Tensor lti_kernel(const DiscreteSsm& d, const Tensor& cc, int64_t t);
Tensor lti_apply(const Tensor& kernel, const Tensor& x);

// Removes each position's self contribution from a scan output:
//   out = y - diag (*) x   with   diag_t[c] = sum_n cc_t[n] * b_bar_t[c,n].
// Differentiable; O(t*c*n), no matrix materialization.
Tensor subtract_self_term(const Tensor& y, const DiscreteSsm& d, const Tensor& cc, const Tensor& x);

// Forward scan over x plus a reverse scan over flip(x), flipped back and
// summed.  d_bw/c_bw must have been generated from flip(x).  When
// mask_backward_diag is set the reverse branch drops its self terms, so the
// composed mixing matrix keeps only the forward diagonal.
Tensor bidirectional_compose(const DiscreteSsm& d_fw, const Tensor& c_fw, const DiscreteSsm& d_bw,
                             const Tensor& c_bw, const Tensor& x, bool mask_backward_diag,
                             ScanKind kind = ScanKind::recurrent);

}  // namespace ssmtad
