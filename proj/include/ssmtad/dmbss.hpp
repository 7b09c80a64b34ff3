#pragma once

#include <string>
#include <vector>

#include "ssmtad/ssm.hpp"
#include "ssmtad/tensor.hpp"

namespace ssmtad {

enum class MaskMode { literal, semantic };
enum class Direction { fwd, bwd };

// Block layout: expand c -> lambda*c, chunk into two branch halves of width
// c' = lambda*c/2.  Each branch runs three pathways at width c' (causal scan,
// reversed scan, gate), fuses them to 2c' = lambda*c, branches are summed and
// projected back to c with a residual.
struct DmbssConfig {
    int64_t c = 64;
    int64_t lambda = 4;
    int64_t n = 8;
    int64_t conv_k = 4;
    bool share_params = true;
    bool dual_branch = true;
    bool diag_mask = true;
    MaskMode mask_mode = MaskMode::semantic;
    ScanKind scan = ScanKind::recurrent;

    int64_t expanded() const { return lambda * c; }
    int64_t branch_width() const { return expanded() / 2; }
    void validate() const;
};

// one scan direction inside a branch
struct DirectionParams {
    Tensor w_in, b_in;  // [c',c'], [c']  pathway linear
    Tensor conv_w;      // [c',k]         causal depthwise kernel
    Tensor a_log;       // [c',n]         A = -exp(a_log)
    SelectiveProj proj;
};

struct BranchParams {
    DirectionParams fw;
    DirectionParams bw;     // aliases fw's tensors when share_params
    Tensor w_gate, b_gate;  // [c',c'], [c']  third pathway
};

struct DmbssParams {
    Tensor w_in;   // [c, lambda*c]
    Tensor w_out;  // [lambda*c, c]
    Tensor b_out;  // [c]
    std::vector<BranchParams> branches;  // always 2; second unused when !dual_branch
};

DmbssParams dmbss_init(const DmbssConfig& cfg, uint64_t seed, DType dt = DType::f64);

// unique trainable leaves, aliased tensors listed once, stable order
std::vector<Tensor> dmbss_collect_params(const DmbssParams& p);

// same tensors with checkpoint names under a prefix ("" or "pyr.3." style);
// a bw direction aliased by share_params is skipped, like collect
NamedTensors dmbss_named_params(const DmbssParams& p, const std::string& prefix);

struct PathwayOut {
    Tensor x1, x2, x3;  // each [b,t,c']
};

// Direction::bwd runs the same pipelines on flip(X) and flips the outputs
// back, so the second branch sees the sequence reversed.
PathwayOut pathway_forward(const Tensor& x, const BranchParams& bp, Direction dir,
                           const DmbssConfig& cfg);

// (X1*X3) ++ (X2*X3) along channels
Tensor fuse_pathways(const PathwayOut& p);

Tensor dmbss_forward(const Tensor& x, const DmbssParams& p, const DmbssConfig& cfg);

struct AblationVariant {
    std::string name;
    bool share_params;
    bool dual_branch;
    bool diag_mask;
};

// the eight toggle combinations; entry 0 is {share on, dual off, mask off},
// entry 7 is all on
std::vector<AblationVariant> ablation_matrix();

}  // namespace ssmtad
