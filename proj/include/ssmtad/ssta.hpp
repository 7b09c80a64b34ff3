#pragma once

#include <string>
#include <vector>

#include "ssmtad/dmbss.hpp"

namespace ssmtad {

// Temporal adapter: project d down to d/lambda, run the state-space block
// over time, project back up with a residual.  The up-projection starts at
// zero so an adapted model is exactly the frozen one until training moves it.
struct SstaConfig {
    int64_t d = 256;
    int64_t lambda = 4;  // channel reduction, must exceed 1
    DmbssConfig dmbss;   // dmbss.c must equal d / lambda

    int64_t inner() const { return d / lambda; }
    void validate() const;
};

struct SstaParams {
    Tensor w_down;  // [d, d/lambda]
    Tensor w_up;    // [d/lambda, d], zero at init
    DmbssParams block;
};

SstaParams ssta_init(const SstaConfig& cfg, uint64_t seed, DType dt = DType::f64);
NamedTensors ssta_named_params(const SstaParams& p, const std::string& prefix);
std::vector<Tensor> ssta_collect_params(const SstaParams& p);

// accepts [b,t,d], [t,h,w,d], or [b,t,h,w,d]; spatial dims fold into batch
// for the temporal pass and the output keeps the input shape
Tensor ssta_forward(const Tensor& x, const SstaParams& p, const SstaConfig& cfg);

// Frozen stand-in for a pretrained encoder: per block an expansion MLP plus
// a causal depthwise conv over time, all residual.  Weights are created
// without grad and stay untouched by training.
struct ToyBackboneConfig {
    int64_t d = 256;
    int64_t blocks = 4;
    int64_t hidden_mult = 4;
    int64_t conv_k = 3;
    uint64_t seed = 2024;

    void validate() const;
};

struct ToyBlock {
    Tensor w1, b1;   // [d, d*mult] / [d*mult]
    Tensor w2, b2;   // [d*mult, d] / [d]
    Tensor conv_w;   // [d, k]
};

struct ToyBackbone {
    ToyBackboneConfig cfg;
    std::vector<ToyBlock> blocks;
};

ToyBackbone toy_backbone_init(const ToyBackboneConfig& cfg, DType dt = DType::f64);
Tensor toy_backbone_forward(const Tensor& x, const ToyBackbone& bb);
std::vector<Tensor> toy_backbone_tensors(const ToyBackbone& bb);

// backbone with one adapter after every insert_every-th block
struct AdaptedModel {
    ToyBackbone bb;
    SstaConfig ssta;
    std::vector<SstaParams> adapters;       // parallel to insert_after
    std::vector<int64_t> insert_after;      // 0-based block indices
};

AdaptedModel adapt_backbone(const ToyBackbone& bb, const SstaConfig& scfg, uint64_t seed,
                            int64_t insert_every = 1);
Tensor adapted_forward(const Tensor& x, const AdaptedModel& m);
std::vector<Tensor> adapted_trainable_params(const AdaptedModel& m);
NamedTensors adapted_named_params(const AdaptedModel& m);
std::vector<Tensor> adapted_all_tensors(const AdaptedModel& m);

struct ParamCounts {
    int64_t trainable = 0;
    int64_t frozen = 0;
    double ratio() const {
        int64_t total = trainable + frozen;
        return total == 0 ? 0.0 : double(trainable) / double(total);
    }
};

// splits a tensor list by requires_grad; the efficiency numbers reported
// by the trainer come straight from this
ParamCounts count_trainable(const std::vector<Tensor>& tensors);

}  // namespace ssmtad
