#pragma once

#include <map>
#include <string>
#include <vector>

#include "ssmtad/config.hpp"
#include "ssmtad/data.hpp"
#include "ssmtad/optim.hpp"
#include "ssmtad/ssta.hpp"

namespace ssmtad {

// dataset pulled fully into memory; desk-scale by construction
struct LoadedVideo {
    std::string id;
    double duration_s = 0;
    double fps = 0;
    int64_t t = 0, c = 0;
    std::vector<float> features;  // [t, c] time-major
    std::vector<ActionInstance> annotations;  // seconds
};

struct LoadedDataset {
    std::vector<LoadedVideo> videos;
    int64_t channels = 0;
    std::vector<ActionInstance> all_gts() const;
    std::map<std::string, double> durations() const;
};

LoadedDataset load_dataset(const std::string& dir);
LoadedDataset from_synth(const SynthDataset& ds);

// detector plus the optional frozen backbone + adapters in front of it
struct Model {
    bool e2e = false;
    DetectorConfig det_cfg;
    DetectorParams det;
    AdaptedModel adapted;  // engaged only when e2e
};

Model build_model(const RunConfig& cfg, int64_t data_channels, DType dt);
NamedTensors model_named_params(const Model& m);  // "det.*" and "ssta.<i>.*"
DetectorOutput model_forward(const Model& m, const Tensor& x);

struct TrainStats {
    int64_t steps = 0;
    std::vector<double> losses;  // one entry per step, in order
    double final_loss = 0;
    std::string final_checkpoint_dir;
    std::string log_csv_path;
    ParamCounts params;
};

// writes train_log.csv, periodic ckpt_<step>/ dirs, and ckpt_final/ under
// out_dir; resumes from cfg.train.resume when set; throws NonFiniteError
// (after dumping out_dir/diagnostic.json) if the loss leaves the reals
TrainStats cmd_train(const RunConfig& cfg, const std::string& out_dir, DType dt = DType::f32);

// generates train/ and test/ splits under out_dir and reports the
// matched-filter mAP@0.5 on the test split (the solvability floor)
double cmd_synth(const RunConfig& cfg, const std::string& out_dir, bool force);

struct EvalOutputs {
    MeanApResult metrics;
    FnProfile fn;
    double fn_tiou = 0;
    std::string results_path, csv_path, summary_path, bins_path;
};

// source is either a checkpoint dir (runs inference on cfg.data.val_dir)
// or a results JSON file (scores stored predictions against the same GTs)
EvalOutputs cmd_eval(const std::string& source, const RunConfig& cfg, const std::string& out_dir);

struct BenchRow {
    int64_t length = 0;
    std::string evaluator;
    int64_t ns = 0;  // best of reps
    int64_t reps = 0;
};

// evaluators: recurrent | parallel | dense | dmbss; dense is skipped above
// kBenchDenseMaxT; writes "length,evaluator,ns,reps" to csv_path when set
constexpr int64_t kBenchDenseMaxT = 4096;
std::vector<BenchRow> cmd_bench(const std::vector<int64_t>& lengths,
                                const std::vector<std::string>& evaluators, int64_t reps,
                                const std::string& csv_path);

struct OracleOptions {
    int64_t scan_instances = 200;
    int64_t lti_instances = 20;
    int64_t mask_instances = 20;
    int64_t palindrome_instances = 50;
    int64_t ap_instances = 100;
    int64_t grad_max_coords = 6;  // per-parameter cap for the heavy checks
    std::string fault;            // "", "scan", "diag-mask", "ap"
};

struct OracleResult {
    std::string suite;
    bool pass = false;
    double max_err = 0;
    double tol = 0;
    int64_t cases = 0;
    double seconds = 0;
    std::string note;  // e.g. the worst-offending sub-check
};

// suites: scan-equivalence, lti, mask, grad, palindrome, ap, bins; "all"
// runs everything; a fault makes exactly one suite fail (test of the tester)
std::vector<OracleResult> run_oracles(const std::string& which, const OracleOptions& opt = {});

// one line per suite with the max observed error; returns all-pass
bool print_oracle_report(const std::vector<OracleResult>& results);

}  // namespace ssmtad
