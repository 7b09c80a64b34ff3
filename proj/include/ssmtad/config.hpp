#pragma once

#include <string>

#include "ssmtad/detector.hpp"
#include "ssmtad/synth.hpp"

namespace ssmtad {

enum class RunMode { feature_input, e2e };

struct TrainConfig {
    double lr = 1.5e-3;
    double weight_decay = 1e-4;
    int64_t epochs = 8;
    int64_t batch_size = 4;
    int64_t max_steps = -1;      // -1: epochs * steps-per-epoch
    int64_t warmup_steps = -1;   // -1: 5% of total steps
    double grad_clip = 1.0;      // global norm, 0 disables
    uint64_t seed = 1234;
    int64_t crop_t = 256;        // fixed training crop, frames
    int64_t checkpoint_every = 200;
    int64_t log_every = 10;
    std::string resume;          // checkpoint dir, empty = fresh start

    void validate() const;
};

// metric thresholds plus the decode/NMS knobs used before scoring
struct EvalSection {
    EvalConfig metric;
    DecodeConfig decode;

    EvalSection() { metric.tiou_thresholds = thumos_thresholds(); }
    void validate() const;
};

struct DataConfig {
    std::string train_dir;
    std::string val_dir;
};

struct SynthSection {
    SynthConfig base;          // the training split
    int64_t test_videos = 50;  // test split: same config, seed + 1

    void validate() const;
};

// adapter plumbing for e2e mode; the frozen toy backbone runs at the data
// width, adapters sit after every insert_every-th block
struct SstaSection {
    int64_t lambda = 4;  // channel reduction, must divide the data width
    int64_t insert_every = 1;
    int64_t n = 4;       // state size of the adapter's inner block
    int64_t conv_k = 4;
    int64_t backbone_blocks = 2;
    int64_t backbone_hidden_mult = 2;
    uint64_t backbone_seed = 2024;

    void validate() const;
};

struct RunConfig {
    RunMode mode = RunMode::feature_input;
    DetectorConfig model;  // model.c_in is resolved from the data at run time
    TrainConfig train;
    EvalSection eval;
    DataConfig data;
    SynthSection synth;
    SstaSection ssta;

    void validate() const;
};

// defaults sized for the synthetic task; model.dmbss.c is tied to model.c
RunConfig default_run_config();

// strict parse: unknown keys, wrong types, and invalid values all throw
// ConfigError naming the offending key
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// full dump; parse_run_config(run_config_to_json(c)) round-trips
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace ssmtad
