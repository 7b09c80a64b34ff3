#pragma once

#include <string>
#include <vector>

#include "ssmtad/eval.hpp"

namespace ssmtad {

// Synthetic videos: Gaussian background; each action instance adds a constant
// mean shift plus a class-specific sinusoid on that class's dedicated channel.
// Lengths are drawn round-robin across the five length bins so every bin is
// populated; instances within a video never overlap.
struct SynthConfig {
    int64_t num_videos = 200;
    double min_duration_s = 50.0;
    double max_duration_s = 150.0;
    double fps = 4.0;
    int64_t channels = 16;  // must be >= num_classes
    int64_t num_classes = 5;
    int64_t min_instances = 3;
    int64_t max_instances = 8;
    double noise_sigma = 0.1;
    double signal_shift = 1.5;
    double signal_amp = 0.5;  // sinusoid amplitude on top of the shift
    uint64_t seed = 1234;
    void validate() const;
};

struct SynthVideo {
    std::string id;
    double duration_s = 0;
    double fps = 0;
    int64_t t = 0, c = 0;
    std::vector<float> features;  // [t, c] time-major
    std::vector<ActionInstance> annotations;
};

struct SynthDataset {
    SynthConfig cfg;
    std::vector<SynthVideo> videos;
    std::vector<ActionInstance> all_gts() const;
    std::map<std::string, double> durations() const;
};

double class_frequency_hz(int label);  // per-class sinusoid frequency

SynthDataset synth_generate(const SynthConfig& cfg);

// Independent baseline: per class, a centered moving average of the class
// channel thresholded at half the injected shift; run score = mean response.
std::vector<ActionInstance> matched_filter_detect(const SynthVideo& video, const SynthConfig& cfg);
std::vector<ActionInstance> matched_filter_detect_all(const SynthDataset& ds);

}  // namespace ssmtad
