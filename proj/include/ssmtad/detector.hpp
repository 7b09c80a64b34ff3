#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssmtad/dmbss.hpp"
#include "ssmtad/eval.hpp"

namespace ssmtad {

// One-stage anchor-free detector: conv embedding, a pyramid of pre-norm
// sequence blocks with stride-2 max-pool downsampling (finest level stays
// unpooled), one fusion block over all levels concatenated along time, and
// shared conv heads predicting per-position class scores and nonnegative
// boundary offsets in level-stride units.
struct DetectorConfig {
    int64_t c_in = 16;
    int64_t c = 64;
    int64_t embed_layers = 2;
    int64_t levels = 7;
    int64_t num_classes = 5;
    int64_t trunk_layers = 1;
    int64_t head_kernel = 3;
    double r0 = 2.0;             // regression range base, frames
    double center_radius = 1.5;  // positive window around GT centers, strides
    DmbssConfig dmbss;           // dmbss.c must equal c

    void validate() const;
};

struct DetectorParams {
    std::vector<Tensor> embed_w, embed_b;  // [c, c_prev, 3] / [c]
    std::vector<Tensor> ln_g, ln_b;        // per pyramid level, [c]
    std::vector<DmbssParams> blocks;       // per pyramid level
    Tensor fuse_ln_pre_g, fuse_ln_pre_b;
    DmbssParams fuse_block;
    Tensor fuse_ln_post_g, fuse_ln_post_b;
    std::vector<Tensor> trunk_w, trunk_b;  // [c, c, k] / [c]
    Tensor cls_w, cls_b;                   // [C, c, k] / [C]
    Tensor reg_w, reg_b;                   // [2, c, k] / [2]
};

DetectorParams detector_init(const DetectorConfig& cfg, uint64_t seed, DType dt = DType::f64);
NamedTensors detector_named_params(const DetectorParams& p);
std::vector<Tensor> detector_collect_params(const DetectorParams& p);

struct PyramidFeatures {
    std::vector<Tensor> levels;    // [b, t_l, c], t_l = ceil(t_{l-1} / 2)
    std::vector<int64_t> strides;  // 1, 2, 4, ... in frames
};

struct GlobalSequence {
    Tensor f;  // [b, sum(t_l), c]
    std::vector<int64_t> offsets, lengths, strides;
    int64_t total() const;
    // bijection from a fused position to (level, index within level)
    std::pair<int, int64_t> level_of(int64_t pos) const;
};

Tensor embed_forward(const Tensor& x, const DetectorParams& p, const DetectorConfig& cfg);
PyramidFeatures pyramid_forward(const Tensor& f0, const DetectorParams& p,
                                const DetectorConfig& cfg);
GlobalSequence global_fusion(const PyramidFeatures& pyr, const DetectorParams& p,
                             const DetectorConfig& cfg);

struct DetectorOutput {
    Tensor cls_logits;   // [b, T, C] pre-sigmoid
    Tensor reg_offsets;  // [b, T, 2] after softplus, level-stride units
    GlobalSequence seq;
};

DetectorOutput heads_forward(const GlobalSequence& seq, const DetectorParams& p,
                             const DetectorConfig& cfg);
DetectorOutput detector_forward(const Tensor& x, const DetectorParams& p,
                                const DetectorConfig& cfg);

// ground truth in frame units for one sequence
struct FrameGt {
    double start = 0, end = 0;
    int label = 0;
};

struct Targets {
    std::vector<std::vector<int>> labels;  // [b][T], -1 = background
    std::vector<std::vector<double>> d_start, d_end;  // stride units, positives only
    int64_t num_pos = 0;
};

// [lo, hi) of the max boundary offset (frames) each level is responsible
// for: level 1 starts at 0, the last level is unbounded
std::vector<std::pair<double, double>> level_ranges(const DetectorConfig& cfg);

// a position is positive when it lies inside a GT, within center_radius
// strides of the GT center, and the larger boundary offset falls in its
// level's range; overlaps resolve to the shortest GT
Targets assign_targets(const std::vector<std::vector<FrameGt>>& gts, const GlobalSequence& seq,
                       const DetectorConfig& cfg);

struct DetectorLoss {
    Tensor total;             // scalar, cls + reg
    double cls = 0, reg = 0;  // component values
};

// sigmoid focal loss (alpha .25, gamma 2) on every position plus DIoU on
// decoded positive segments, both normalized by max(1, num_pos)
DetectorLoss detector_loss(const DetectorOutput& out, const Targets& tgt,
                           const DetectorConfig& cfg);

struct DecodeConfig {
    double score_thresh = 0.1;
    int64_t pre_nms_topk = 200;
    double nms_sigma = 0.5;
    double nms_min_score = 1e-3;
    int64_t max_dets = 200;
};

// batch-1 outputs to scored instances in seconds, clipped to [0, t_frames]
std::vector<ActionInstance> detector_decode(const DetectorOutput& out, const std::string& video_id,
                                            double fps, int64_t t_frames, const DecodeConfig& dc);

// Gaussian score decay exp(-iou^2/sigma) per (video, class) group; keeps
// max_keep best overall when positive
std::vector<ActionInstance> soft_nms(std::vector<ActionInstance> cands, double sigma,
                                     double min_score, int64_t max_keep = 0);

}  // namespace ssmtad
