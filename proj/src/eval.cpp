#include "ssmtad/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace ssmtad {

double iou_1d(const Segment& a, const Segment& b) {
    if (!(a.start < a.end) || !(b.start < b.end))
        throw ValueError("iou_1d: degenerate segment (start must be < end)");
    double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
    if (inter <= 0) return 0.0;
    double uni = (a.end - a.start) + (b.end - b.start) - inter;
    return inter / uni;
}

void EvalConfig::validate() const {
    if (tiou_thresholds.empty()) throw ConfigError("eval: tiou_thresholds must be non-empty");
    double prev = 0.0;
    for (double t : tiou_thresholds) {
        if (!(t > 0.0) || t > 1.0) throw ConfigError("eval: thresholds must lie in (0,1]");
        if (t <= prev) throw ConfigError("eval: thresholds must be strictly increasing");
        prev = t;
    }
}

std::vector<double> thumos_thresholds() { return {0.3, 0.4, 0.5, 0.6, 0.7}; }

std::vector<double> anet_thresholds() {
    std::vector<double> v;
    for (int i = 0; i < 10; ++i) v.push_back(0.5 + 0.05 * i);
    return v;
}

namespace {

// TP/FP flags per prediction in descending-score order plus GT matched flags
struct MatchOutcome {
    std::vector<bool> pred_tp;    // per sorted prediction
    std::vector<bool> gt_matched;  // per original GT index
};

MatchOutcome greedy_match(const std::vector<ActionInstance>& preds,
                          const std::vector<ActionInstance>& gts, double tiou) {
    std::vector<size_t> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return preds[a].score > preds[b].score; });
    MatchOutcome out;
    out.pred_tp.assign(preds.size(), false);
    out.gt_matched.assign(gts.size(), false);
    for (size_t k = 0; k < order.size(); ++k) {
        const ActionInstance& p = preds[order[k]];
        double best = 0.0;
        size_t best_g = gts.size();
        for (size_t g = 0; g < gts.size(); ++g) {
            if (out.gt_matched[g]) continue;
            if (gts[g].video_id != p.video_id || gts[g].label != p.label) continue;
            double v = iou_1d(p.seg, gts[g].seg);
            if (v > best) {  // strict: IoU ties keep the earliest GT
                best = v;
                best_g = g;
            }
        }
        if (best_g < gts.size() && best >= tiou) {
            out.gt_matched[best_g] = true;
            out.pred_tp[k] = true;
        }
    }
    return out;
}

}  // namespace

std::vector<bool> greedy_match_flags(const std::vector<ActionInstance>& preds,
                                     const std::vector<ActionInstance>& gts, double tiou) {
    return greedy_match(preds, gts, tiou).gt_matched;
}

double average_precision(const std::vector<ActionInstance>& preds,
                         const std::vector<ActionInstance>& gts, double tiou) {
    if (gts.empty()) return 0.0;
    if (preds.empty()) return 0.0;
    MatchOutcome m = greedy_match(preds, gts, tiou);
    size_t n = preds.size();
    std::vector<double> precision(n), recall(n);
    double tp = 0, fp = 0;
    for (size_t i = 0; i < n; ++i) {
        if (m.pred_tp[i])
            tp += 1;
        else
            fp += 1;
        precision[i] = tp / (tp + fp);
        recall[i] = tp / double(gts.size());
    }
    // exact area under the step-interpolated curve: running max from the right
    double ap = 0.0, pmax = 0.0;
    for (size_t i = n; i-- > 0;) {
        pmax = std::max(pmax, precision[i]);
        double r_prev = i == 0 ? 0.0 : recall[i - 1];
        if (recall[i] != r_prev) ap += (recall[i] - r_prev) * pmax;
    }
    return ap;
}

MeanApResult mean_ap(const std::vector<ActionInstance>& preds,
                     const std::vector<ActionInstance>& gts, const EvalConfig& cfg) {
    cfg.validate();
    std::set<int> classes;
    for (const auto& g : gts) classes.insert(g.label);

    MeanApResult res;
    res.thresholds = cfg.tiou_thresholds;
    res.map_per_threshold.assign(res.thresholds.size(), 0.0);
    for (int cls : classes) {
        std::vector<ActionInstance> pc, gc;
        for (const auto& p : preds)
            if (p.label == cls) pc.push_back(p);
        for (const auto& g : gts)
            if (g.label == cls) gc.push_back(g);
        auto& row = res.ap_per_class[cls];
        for (size_t i = 0; i < res.thresholds.size(); ++i) {
            double ap = average_precision(pc, gc, res.thresholds[i]);
            row.push_back(ap);
            res.map_per_threshold[i] += ap;
        }
    }
    if (!classes.empty())
        for (auto& v : res.map_per_threshold) v /= double(classes.size());
    res.average = res.map_per_threshold.empty()
                      ? 0.0
                      : std::accumulate(res.map_per_threshold.begin(), res.map_per_threshold.end(), 0.0) /
                            double(res.map_per_threshold.size());
    return res;
}

const std::array<const char*, 5> kBin5Names = {"XS", "S", "M", "L", "XL"};
const std::array<const char*, 4> kCountBinNames = {"XS", "S", "M", "L"};

int coverage_bin(double coverage) {
    if (!(coverage > 0.0) || coverage > 1.0) throw ValueError("coverage_bin: coverage must be in (0,1]");
    if (coverage <= 0.02) return 0;
    if (coverage <= 0.04) return 1;
    if (coverage <= 0.06) return 2;
    if (coverage <= 0.08) return 3;
    return 4;
}

int length_bin(double seconds) {
    if (!(seconds > 0.0)) throw ValueError("length_bin: length must be positive");
    if (seconds <= 3.0) return 0;
    if (seconds <= 6.0) return 1;
    if (seconds <= 12.0) return 2;
    if (seconds <= 18.0) return 3;
    return 4;
}

int instance_count_bin(int64_t count) {
    if (count < 1) throw ValueError("instance_count_bin: count must be >= 1");
    if (count == 1) return 0;
    if (count <= 40) return 1;  // boundary 40 goes to S
    if (count <= 80) return 2;
    return 3;
}

GtBinning assign_bins(const std::vector<ActionInstance>& gts,
                      const std::map<std::string, double>& video_durations) {
    std::map<std::pair<std::string, int>, int64_t> counts;
    for (const auto& g : gts) counts[{g.video_id, g.label}]++;

    GtBinning out;
    out.coverage.reserve(gts.size());
    for (const auto& g : gts) {
        auto it = video_durations.find(g.video_id);
        if (it == video_durations.end() || !(it->second > 0.0))
            throw ValueError("assign_bins: missing or non-positive duration for video " + g.video_id);
        out.coverage.push_back(coverage_bin(g.seg.length() / it->second));
        out.length.push_back(length_bin(g.seg.length()));
        out.count.push_back(instance_count_bin(counts[{g.video_id, g.label}]));
    }
    return out;
}

FnProfile fn_profile(const std::vector<ActionInstance>& preds,
                     const std::vector<ActionInstance>& gts,
                     const std::map<std::string, double>& video_durations, double tiou) {
    GtBinning bins = assign_bins(gts, video_durations);
    std::vector<bool> matched = greedy_match_flags(preds, gts, tiou);

    FnProfile p;
    std::array<int64_t, 5> cov_miss{}, len_miss{};
    std::array<int64_t, 4> cnt_miss{};
    for (size_t i = 0; i < gts.size(); ++i) {
        p.coverage_total[size_t(bins.coverage[i])]++;
        p.length_total[size_t(bins.length[i])]++;
        p.count_total[size_t(bins.count[i])]++;
        if (!matched[i]) {
            cov_miss[size_t(bins.coverage[i])]++;
            len_miss[size_t(bins.length[i])]++;
            cnt_miss[size_t(bins.count[i])]++;
        }
    }
    for (size_t b = 0; b < 5; ++b) {
        p.coverage_miss[b] = p.coverage_total[b] ? double(cov_miss[b]) / double(p.coverage_total[b]) : 0.0;
        p.length_miss[b] = p.length_total[b] ? double(len_miss[b]) / double(p.length_total[b]) : 0.0;
    }
    for (size_t b = 0; b < 4; ++b)
        p.count_miss[b] = p.count_total[b] ? double(cnt_miss[b]) / double(p.count_total[b]) : 0.0;
    return p;
}

}  // namespace ssmtad
