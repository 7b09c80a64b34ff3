#include "ssmtad/synth.hpp"

#include <algorithm>
#include <cmath>

namespace ssmtad {

void SynthConfig::validate() const {
    if (num_videos < 1) throw ConfigError("synth: num_videos must be >= 1");
    if (!(min_duration_s > 0) || !(max_duration_s >= min_duration_s))
        throw ConfigError("synth: duration range invalid");
    if (!(fps > 0)) throw ConfigError("synth: fps must be positive");
    if (num_classes < 1) throw ConfigError("synth: num_classes must be >= 1");
    if (channels < num_classes) throw ConfigError("synth: channels must be >= num_classes");
    if (min_instances < 0 || max_instances < min_instances)
        throw ConfigError("synth: instance count range invalid");
    if (!(noise_sigma >= 0)) throw ConfigError("synth: noise_sigma must be >= 0");
    if (!(signal_shift > 0)) throw ConfigError("synth: signal_shift must be positive");
}

double class_frequency_hz(int label) { return 0.3 + 0.22 * double(label); }

std::vector<ActionInstance> SynthDataset::all_gts() const {
    std::vector<ActionInstance> out;
    for (const auto& v : videos) out.insert(out.end(), v.annotations.begin(), v.annotations.end());
    return out;
}

std::map<std::string, double> SynthDataset::durations() const {
    std::map<std::string, double> out;
    for (const auto& v : videos) out[v.id] = v.duration_s;
    return out;
}

namespace {

// one length per call, cycling the five bins; ranges sit inside bin borders
// and start at 2s so every instance spans >= 8 frames at fps 4
double sample_length(int bin, RandomStream& rng) {
    static const double lo[5] = {2.0, 3.5, 6.5, 12.5, 18.5};
    static const double hi[5] = {3.0, 6.0, 12.0, 18.0, 28.0};
    return rng.uniform(lo[bin], hi[bin]);
}

}  // namespace

SynthDataset synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    SynthDataset ds;
    ds.cfg = cfg;
    RandomStream root(cfg.seed);
    int64_t bin_cursor = 0;  // global round-robin over length bins

    for (int64_t vi = 0; vi < cfg.num_videos; ++vi) {
        RandomStream rng = root.fork(uint64_t(vi) + 1);
        SynthVideo v;
        v.id = "synth_" + std::to_string(vi);
        v.duration_s = rng.uniform(cfg.min_duration_s, cfg.max_duration_s);
        v.fps = cfg.fps;
        v.t = int64_t(std::llround(v.duration_s * cfg.fps));
        v.c = cfg.channels;
        v.features.assign(static_cast<size_t>(v.t * v.c), 0.0f);
        for (auto& f : v.features) f = float(rng.normal() * cfg.noise_sigma);

        int64_t want = rng.uniform_int(cfg.min_instances, cfg.max_instances);
        std::vector<Segment> placed;
        for (int64_t k = 0; k < want; ++k) {
            double len = sample_length(int(bin_cursor % 5), rng);
            bin_cursor++;
            if (len > v.duration_s - 2.0) continue;
            // rejection placement, 1s clearance between instances
            bool ok = false;
            Segment seg;
            for (int tries = 0; tries < 40 && !ok; ++tries) {
                double start = rng.uniform(0.5, v.duration_s - len - 0.5);
                seg = {start, start + len};
                ok = true;
                for (const auto& other : placed)
                    if (seg.start < other.end + 1.0 && other.start < seg.end + 1.0) {
                        ok = false;
                        break;
                    }
            }
            if (!ok) continue;
            placed.push_back(seg);

            ActionInstance inst;
            inst.video_id = v.id;
            inst.label = int(rng.uniform_int(0, cfg.num_classes - 1));
            inst.seg = seg;
            v.annotations.push_back(inst);

            int64_t f0 = int64_t(std::llround(seg.start * cfg.fps));
            int64_t f1 = int64_t(std::llround(seg.end * cfg.fps));
            f0 = std::max<int64_t>(f0, 0);
            f1 = std::min(f1, v.t);
            double freq = class_frequency_hz(inst.label);
            for (int64_t fr = f0; fr < f1; ++fr) {
                double tsec = double(fr) / cfg.fps;
                double sig = cfg.signal_shift + cfg.signal_amp * std::sin(2.0 * M_PI * freq * tsec);
                v.features[size_t(fr * v.c + inst.label)] += float(sig);
            }
        }
        std::sort(v.annotations.begin(), v.annotations.end(),
                  [](const ActionInstance& a, const ActionInstance& b) {
                      return a.seg.start < b.seg.start;
                  });
        ds.videos.push_back(std::move(v));
    }
    return ds;
}

std::vector<ActionInstance> matched_filter_detect(const SynthVideo& video, const SynthConfig& cfg) {
    std::vector<ActionInstance> out;
    double thresh = 0.5 * cfg.signal_shift;
    for (int label = 0; label < int(cfg.num_classes); ++label) {
        // centered 3-tap moving average of the class channel
        std::vector<double> m(static_cast<size_t>(video.t));
        for (int64_t t = 0; t < video.t; ++t) {
            double acc = 0;
            int64_t cnt = 0;
            for (int64_t d = -1; d <= 1; ++d) {
                int64_t u = t + d;
                if (u < 0 || u >= video.t) continue;
                acc += double(video.features[size_t(u * video.c + label)]);
                cnt++;
            }
            m[size_t(t)] = acc / double(cnt);
        }
        int64_t run_start = -1;
        double run_sum = 0;
        for (int64_t t = 0; t <= video.t; ++t) {
            bool on = t < video.t && m[size_t(t)] > thresh;
            if (on) {
                if (run_start < 0) {
                    run_start = t;
                    run_sum = 0;
                }
                run_sum += m[size_t(t)];
            } else if (run_start >= 0) {
                int64_t run_len = t - run_start;
                if (run_len >= 2) {
                    ActionInstance inst;
                    inst.video_id = video.id;
                    inst.label = label;
                    inst.seg = {double(run_start) / video.fps, double(t) / video.fps};
                    inst.score = run_sum / double(run_len);
                    out.push_back(inst);
                }
                run_start = -1;
            }
        }
    }
    return out;
}

std::vector<ActionInstance> matched_filter_detect_all(const SynthDataset& ds) {
    std::vector<ActionInstance> out;
    for (const auto& v : ds.videos) {
        auto dets = matched_filter_detect(v, ds.cfg);
        out.insert(out.end(), dets.begin(), dets.end());
    }
    return out;
}

}  // namespace ssmtad
