#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssmtad/core.hpp"

namespace ssmtad {

struct Segment {
    double start = 0, end = 0;
    double length() const { return end - start; }
};

// |a n b| / |a u b|, 0 when disjoint; degenerate segments rejected
double iou_1d(const Segment& a, const Segment& b);

struct ActionInstance {
    std::string video_id;
    int label = 0;
    Segment seg;
    double score = 0;  // predictions only
};

struct EvalConfig {
    std::vector<double> tiou_thresholds;
    bool multi_label = false;
    void validate() const;  // thresholds in (0,1], strictly increasing
};

std::vector<double> thumos_thresholds();  // 0.3 .. 0.7 step 0.1
std::vector<double> anet_thresholds();    // 0.5 .. 0.95 step 0.05

// Greedy matching in descending score order (stable on ties): a prediction
// takes the highest-IoU unmatched GT of its video with IoU >= tiou.  AP is
// the exact area under the all-point interpolated PR curve.  Instances must
// all carry the same class label.
double average_precision(const std::vector<ActionInstance>& preds,
                         const std::vector<ActionInstance>& gts, double tiou);

// matched flag per GT (same order as gts) under the same greedy rule
std::vector<bool> greedy_match_flags(const std::vector<ActionInstance>& preds,
                                     const std::vector<ActionInstance>& gts, double tiou);

struct MeanApResult {
    std::vector<double> thresholds;
    std::vector<double> map_per_threshold;
    double average = 0;
    std::map<int, std::vector<double>> ap_per_class;  // label -> per-threshold AP
};

// class mean over classes present in GT; zero-GT classes are excluded
MeanApResult mean_ap(const std::vector<ActionInstance>& preds,
                     const std::vector<ActionInstance>& gts, const EvalConfig& cfg);

// Appendix-style characteristic bins.  Five coverage/length bins, four
// instance-count bins; the count boundary 40 goes to S.
enum class Bin5 : int { XS = 0, S, M, L, XL };
extern const std::array<const char*, 5> kBin5Names;
extern const std::array<const char*, 4> kCountBinNames;

int coverage_bin(double coverage);      // (0,.02] (.02,.04] (.04,.06] (.06,.08] (.08,1]
int length_bin(double seconds);         // (0,3] (3,6] (6,12] (12,18] (18,inf)
int instance_count_bin(int64_t count);  // 1 | [2,40] | (40,80] | >80

struct GtBinning {
    std::vector<int> coverage;  // per GT, index into Bin5
    std::vector<int> length;
    std::vector<int> count;  // index into the 4 count bins
};

GtBinning assign_bins(const std::vector<ActionInstance>& gts,
                      const std::map<std::string, double>& video_durations);

struct FnProfile {
    std::array<double, 5> coverage_miss{};  // fraction of GTs unmatched, per bin
    std::array<double, 5> length_miss{};
    std::array<double, 4> count_miss{};
    std::array<int64_t, 5> coverage_total{};
    std::array<int64_t, 5> length_total{};
    std::array<int64_t, 4> count_total{};
};

FnProfile fn_profile(const std::vector<ActionInstance>& preds,
                     const std::vector<ActionInstance>& gts,
                     const std::map<std::string, double>& video_durations, double tiou);

}  // namespace ssmtad
