#include "ssmtad/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "ssmtad/checkpoint.hpp"

namespace ssmtad {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- dataset

std::vector<ActionInstance> LoadedDataset::all_gts() const {
    std::vector<ActionInstance> out;
    for (const auto& v : videos)
        out.insert(out.end(), v.annotations.begin(), v.annotations.end());
    return out;
}

std::map<std::string, double> LoadedDataset::durations() const {
    std::map<std::string, double> out;
    for (const auto& v : videos) out[v.id] = v.duration_s;
    return out;
}

LoadedDataset load_dataset(const std::string& dir) {
    fs::path root(dir);
    if (!fs::is_directory(root)) throw IoError("dataset dir '" + dir + "' not found");
    AnnotationFile ann = load_annotations((root / "annotations.json").string());
    LoadedDataset ds;
    for (const auto& vm : ann.videos) {
        LoadedVideo v;
        v.id = vm.id;
        v.duration_s = vm.duration_s;
        v.fps = vm.fps;
        v.annotations = vm.annotations;
        load_features((root / "features" / (vm.id + ".bin")).string(), v.t, v.c, v.features);
        if (ds.channels == 0) ds.channels = v.c;
        if (v.c != ds.channels)
            throw IoError("dataset '" + dir + "': video '" + vm.id + "' has " +
                          std::to_string(v.c) + " channels, expected " +
                          std::to_string(ds.channels));
        ds.videos.push_back(std::move(v));
    }
    return ds;
}

LoadedDataset from_synth(const SynthDataset& sd) {
    LoadedDataset ds;
    for (const auto& sv : sd.videos) {
        LoadedVideo v;
        v.id = sv.id;
        v.duration_s = sv.duration_s;
        v.fps = sv.fps;
        v.t = sv.t;
        v.c = sv.c;
        v.features = sv.features;
        v.annotations = sv.annotations;
        if (ds.channels == 0) ds.channels = v.c;
        ds.videos.push_back(std::move(v));
    }
    return ds;
}

// ------------------------------------------------------------------ model

Model build_model(const RunConfig& cfg, int64_t data_channels, DType dt) {
    Model m;
    m.e2e = cfg.mode == RunMode::e2e;
    m.det_cfg = cfg.model;
    m.det_cfg.c_in = data_channels;
    if (m.e2e) {
        const SstaSection& a = cfg.ssta;
        if (data_channels % a.lambda != 0)
            throw ConfigError("ssta.lambda " + std::to_string(a.lambda) +
                              " does not divide the data width " + std::to_string(data_channels));
        ToyBackboneConfig bcfg;
        bcfg.d = data_channels;
        bcfg.blocks = a.backbone_blocks;
        bcfg.hidden_mult = a.backbone_hidden_mult;
        bcfg.seed = a.backbone_seed;
        ToyBackbone bb = toy_backbone_init(bcfg, dt);
        SstaConfig scfg;
        scfg.d = data_channels;
        scfg.lambda = a.lambda;
        scfg.dmbss.c = data_channels / a.lambda;
        scfg.dmbss.lambda = 2;
        scfg.dmbss.n = a.n;
        scfg.dmbss.conv_k = a.conv_k;
        m.adapted = adapt_backbone(bb, scfg, cfg.train.seed + 1, a.insert_every);
    }
    m.det = detector_init(m.det_cfg, cfg.train.seed, dt);
    return m;
}

NamedTensors model_named_params(const Model& m) {
    NamedTensors out;
    for (auto& [name, t] : detector_named_params(m.det)) out.push_back({"det." + name, t});
    if (m.e2e)
        for (auto& [name, t] : adapted_named_params(m.adapted)) out.push_back({name, t});
    return out;
}

DetectorOutput model_forward(const Model& m, const Tensor& x) {
    return detector_forward(m.e2e ? adapted_forward(x, m.adapted) : x, m.det, m.det_cfg);
}

// ------------------------------------------------------------------ synth

double cmd_synth(const RunConfig& cfg, const std::string& out_dir, bool force) {
    fs::path root(out_dir);
    if (fs::exists(root) && !fs::is_empty(root) && !force)
        throw ConfigError("output dir '" + out_dir + "' is not empty (pass --force to overwrite)");
    SynthConfig tr = cfg.synth.base;
    SynthConfig te = tr;
    te.num_videos = cfg.synth.test_videos;
    te.seed = tr.seed + 1;
    SynthDataset dtr = synth_generate(tr);
    SynthDataset dte = synth_generate(te);
    save_dataset((root / "train").string(), dtr);
    save_dataset((root / "test").string(), dte);

    EvalConfig ec;
    ec.tiou_thresholds = {0.5};
    auto mf = mean_ap(matched_filter_detect_all(dte), dte.all_gts(), ec);
    std::printf("synth: %lld train / %lld test videos -> %s\n", (long long)tr.num_videos,
                (long long)te.num_videos, out_dir.c_str());
    std::printf("synth: matched-filter mAP@0.5 on test = %.4f\n", mf.average);
    if (mf.average < 0.95)
        std::fprintf(stderr, "warning: matched-filter score %.4f below the 0.95 solvability bar\n",
                     mf.average);
    return mf.average;
}

// ------------------------------------------------------------------ train

namespace {

// checkpoint tensors split into model weights and optimizer moments
void split_checkpoint(const Checkpoint& c, Checkpoint& model_part,
                      std::map<std::string, Tensor>& moments) {
    model_part.step = c.step;
    model_part.rng_state = c.rng_state;
    model_part.config_json = c.config_json;
    for (const auto& [name, t] : c.tensors) {
        if (name.rfind("opt.", 0) == 0)
            moments.emplace(name, t);
        else
            model_part.tensors.push_back({name, t});
    }
}

void load_moments(const std::map<std::string, Tensor>& moments, const NamedTensors& named,
                  AdamW& opt) {
    for (size_t i = 0; i < named.size(); ++i) {
        for (const char* kind : {"m", "v"}) {
            std::string key = std::string("opt.") + kind + "." + named[i].first;
            auto it = moments.find(key);
            if (it == moments.end())
                throw IoError("checkpoint is missing optimizer moment '" + key + "'");
            std::vector<double> v = it->second.to_vector();
            if (int64_t(v.size()) != named[i].second.numel())
                throw IoError("optimizer moment '" + key + "' has wrong size");
            (kind[0] == 'm' ? opt.moment_m() : opt.moment_v())[i] = std::move(v);
        }
    }
}

void save_train_checkpoint(const std::string& dir, int64_t step, const RunConfig& cfg,
                           const NamedTensors& named, AdamW& opt) {
    Checkpoint c;
    c.step = step;
    c.rng_state = RandomStream(cfg.train.seed).state();
    c.config_json = run_config_to_json(cfg);
    c.tensors = named;
    for (size_t i = 0; i < named.size(); ++i) {
        int64_t n = named[i].second.numel();
        c.tensors.push_back(
            {"opt.m." + named[i].first, Tensor::from_vector({n}, opt.moment_m()[i])});
        c.tensors.push_back(
            {"opt.v." + named[i].first, Tensor::from_vector({n}, opt.moment_v()[i])});
    }
    checkpoint_save(dir, c);
}

json finite_or_string(double x) {
    return std::isfinite(x) ? json(x) : json(std::to_string(x));
}

void dump_diagnostic(const std::string& out_dir, int64_t step, double lr, double total, double cls,
                     double reg, double last_gn, const std::vector<double>& losses,
                     const NamedTensors& named) {
    json d;
    d["step"] = step;
    d["lr"] = lr;
    d["loss_total"] = finite_or_string(total);
    d["loss_cls"] = finite_or_string(cls);
    d["loss_reg"] = finite_or_string(reg);
    d["grad_norm_last"] = finite_or_string(last_gn);
    size_t k = losses.size() > 20 ? losses.size() - 20 : 0;
    d["recent_losses"] = json::array();
    for (size_t i = k; i < losses.size(); ++i) d["recent_losses"].push_back(losses[i]);
    json pn = json::object();
    for (const auto& [name, t] : named) {
        double s = 0;
        for (double v : t.to_vector()) s += v * v;
        pn[name] = finite_or_string(std::sqrt(s));
    }
    d["param_l2"] = pn;
    std::ofstream f(fs::path(out_dir) / "diagnostic.json");
    f << d.dump(2) << "\n";
}

}  // namespace

TrainStats cmd_train(const RunConfig& cfg_in, const std::string& out_dir, DType dt) {
    RunConfig cfg = cfg_in;
    cfg.validate();
    if (cfg.data.train_dir.empty()) throw ConfigError("train: data.train_dir is not set");
    LoadedDataset ds = load_dataset(cfg.data.train_dir);
    if (ds.videos.empty()) throw ConfigError("train: dataset '" + cfg.data.train_dir + "' is empty");
    for (const auto& v : ds.videos)
        for (const auto& a : v.annotations)
            if (a.label < 0 || a.label >= cfg.model.num_classes)
                throw ConfigError("train: video '" + v.id + "' has label " +
                                  std::to_string(a.label) + " outside model.num_classes " +
                                  std::to_string(cfg.model.num_classes));
    cfg.model.c_in = ds.channels;
    cfg.model.dmbss.c = cfg.model.c;
    fs::create_directories(out_dir);

    Model m = build_model(cfg, ds.channels, dt);
    NamedTensors named = model_named_params(m);
    std::vector<Tensor> params;
    params.reserve(named.size());
    for (auto& [name, t] : named) params.push_back(t);

    AdamWConfig ocfg;
    ocfg.weight_decay = cfg.train.weight_decay;
    ocfg.clip_norm = cfg.train.grad_clip;
    AdamW opt(params, ocfg);

    const int64_t n = int64_t(ds.videos.size());
    const int64_t bs = cfg.train.batch_size;
    const int64_t crop = cfg.train.crop_t;
    const int64_t steps_per_epoch = (n + bs - 1) / bs;
    const int64_t total =
        cfg.train.max_steps > 0 ? cfg.train.max_steps : cfg.train.epochs * steps_per_epoch;
    const int64_t warmup = cfg.train.warmup_steps >= 0 ? cfg.train.warmup_steps
                                                       : std::max<int64_t>(1, total / 20);

    int64_t start = 0;
    if (!cfg.train.resume.empty()) {
        Checkpoint c = checkpoint_load(cfg.train.resume);
        Checkpoint model_part;
        std::map<std::string, Tensor> moments;
        split_checkpoint(c, model_part, moments);
        checkpoint_apply(model_part, named);
        load_moments(moments, named, opt);
        opt.set_steps_done(c.step);
        start = c.step;
        if (start >= total)
            throw ConfigError("train: resume checkpoint is already at step " +
                              std::to_string(start) + " of " + std::to_string(total));
    }

    TrainStats st;
    st.steps = total;
    st.log_csv_path = (fs::path(out_dir) / "train_log.csv").string();
    {
        std::vector<Tensor> all = detector_collect_params(m.det);
        if (m.e2e) {
            auto extra = adapted_all_tensors(m.adapted);
            all.insert(all.end(), extra.begin(), extra.end());
        }
        st.params = count_trainable(all);
    }
    std::ofstream log(st.log_csv_path, start > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("train: cannot write '" + st.log_csv_path + "'");
    if (start == 0) log << "step,loss,cls,reg,lr,grad_norm\n";

    std::printf("train: %lld videos, %lld steps (%lld warmup), %lld trainable params (%s)\n",
                (long long)n, (long long)total, (long long)warmup, (long long)st.params.trainable,
                dtype_name(dt));

    double last_gn = 0;
    for (int64_t step = start; step < total; ++step) {
        // per-step stream: a pure function of (seed, step) so resumed runs
        // see the exact same crops
        RandomStream sr = RandomStream(cfg.train.seed).fork(uint64_t(step) + 1);
        std::vector<double> xb;
        xb.reserve(size_t(bs * crop * ds.channels));
        std::vector<std::vector<FrameGt>> gts(static_cast<size_t>(bs));
        for (int64_t b = 0; b < bs; ++b) {
            const LoadedVideo& v = ds.videos[size_t(sr.uniform_int(0, n - 1))];
            int64_t off = v.t > crop ? sr.uniform_int(0, v.t - crop) : 0;
            for (int64_t i = 0; i < crop; ++i)
                for (int64_t ch = 0; ch < v.c; ++ch)
                    xb.push_back(off + i < v.t ? double(v.features[size_t((off + i) * v.c + ch)])
                                               : 0.0);
            for (const auto& a : v.annotations) {
                double s = a.seg.start * v.fps - double(off);
                double e = a.seg.end * v.fps - double(off);
                s = std::max(s, 0.0);
                e = std::min(e, double(crop));
                if (e - s >= 1.0) gts[size_t(b)].push_back({s, e, a.label});
            }
        }
        Tensor x = Tensor::from_vector({bs, crop, ds.channels}, xb, dt);
        double lr = lr_schedule(step, total, warmup, cfg.train.lr);
        double lv = 0, lcls = 0, lreg = 0;
        try {
            DetectorOutput out = model_forward(m, x);
            Targets tgt = assign_targets(gts, out.seq, m.det_cfg);
            DetectorLoss loss = detector_loss(out, tgt, m.det_cfg);
            lv = loss.total.item();
            lcls = loss.cls;
            lreg = loss.reg;
            if (!std::isfinite(lv)) throw NonFiniteError("non-finite loss");
            backward(loss.total);
        } catch (const NonFiniteError& e) {
            // dump enough state to see what blew up, then surface the abort
            dump_diagnostic(out_dir, step, lr, lv, lcls, lreg, last_gn, st.losses, named);
            throw NonFiniteError("train: " + std::string(e.what()) + " at step " +
                                 std::to_string(step) + " (see " + out_dir +
                                 "/diagnostic.json)");
        }
        last_gn = opt.step(lr);
        opt.zero_grad();
        st.losses.push_back(lv);

        if (step % cfg.train.log_every == 0 || step + 1 == total) {
            char line[160];
            std::snprintf(line, sizeof line, "%lld,%.6f,%.6f,%.6f,%.6g,%.6f", (long long)step, lv,
                          lcls, lreg, lr, last_gn);
            log << line << "\n";
            log.flush();
            std::printf("train: step %lld/%lld loss %.4f (cls %.4f reg %.4f) lr %.2e\n",
                        (long long)step, (long long)total, lv, lcls, lreg, lr);
            std::fflush(stdout);
        }
        if ((step + 1) % cfg.train.checkpoint_every == 0 && step + 1 < total)
            save_train_checkpoint((fs::path(out_dir) / ("ckpt_" + std::to_string(step + 1))).string(),
                                  step + 1, cfg, named, opt);
    }
    st.final_checkpoint_dir = (fs::path(out_dir) / "ckpt_final").string();
    save_train_checkpoint(st.final_checkpoint_dir, total, cfg, named, opt);
    st.final_loss = st.losses.empty() ? 0.0 : st.losses.back();
    return st;
}

// ------------------------------------------------------------------- eval

EvalOutputs cmd_eval(const std::string& source, const RunConfig& cfg_in, const std::string& out_dir) {
    RunConfig cfg = cfg_in;
    cfg.eval.validate();
    if (cfg.data.val_dir.empty()) throw ConfigError("eval: data.val_dir is not set");
    LoadedDataset ds = load_dataset(cfg.data.val_dir);
    fs::create_directories(out_dir);

    EvalOutputs eo;
    std::vector<ActionInstance> preds;
    if (fs::is_directory(source)) {
        Checkpoint c = checkpoint_load(source);
        DType dt = DType::f32;
        bool found = false;
        for (const auto& [name, t] : c.tensors)
            if (name.rfind("det.", 0) == 0) {
                dt = t.dtype();
                found = true;
                break;
            }
        if (!found) throw IoError("eval: checkpoint '" + source + "' has no detector tensors");
        // the architecture (and the frozen-backbone seed in e2e mode) must
        // match what was trained, so it comes from the checkpoint snapshot;
        // the caller's config only supplies data paths and decode knobs
        if (!c.config_json.empty()) {
            RunConfig snap = parse_run_config(c.config_json);
            cfg.mode = snap.mode;
            cfg.model = snap.model;
            cfg.ssta = snap.ssta;
            cfg.train.seed = snap.train.seed;
        }
        if (ds.channels != cfg.model.c_in)
            throw ConfigError("eval: dataset has " + std::to_string(ds.channels) +
                              " channels but the model expects " + std::to_string(cfg.model.c_in));
        Model m = build_model(cfg, ds.channels, dt);
        NamedTensors live = model_named_params(m);
        Checkpoint model_part;
        std::map<std::string, Tensor> moments;
        split_checkpoint(c, model_part, moments);
        checkpoint_apply(model_part, live);

        NoGradGuard ng;
        for (const auto& v : ds.videos) {
            std::vector<double> xv(v.features.begin(), v.features.end());
            Tensor x = Tensor::from_vector({1, v.t, v.c}, xv, dt);
            DetectorOutput out = model_forward(m, x);
            auto dets = detector_decode(out, v.id, v.fps, v.t, cfg.eval.decode);
            preds.insert(preds.end(), dets.begin(), dets.end());
        }
        eo.results_path = (fs::path(out_dir) / "results.json").string();
        save_results(eo.results_path, preds);
    } else if (fs::is_regular_file(source)) {
        preds = load_results(source);
        eo.results_path = source;
    } else {
        throw IoError("eval: source '" + source + "' is neither a checkpoint dir nor a results file");
    }

    auto gts = ds.all_gts();
    eo.metrics = mean_ap(preds, gts, cfg.eval.metric);
    eo.csv_path = (fs::path(out_dir) / "metrics.csv").string();
    save_metric_csv(eo.csv_path, eo.metrics.thresholds, eo.metrics.map_per_threshold);

    eo.summary_path = (fs::path(out_dir) / "metrics.json").string();
    {
        json s;
        s["average_map"] = eo.metrics.average;
        s["num_predictions"] = preds.size();
        s["num_gt"] = gts.size();
        json per = json::array();
        for (size_t i = 0; i < eo.metrics.thresholds.size(); ++i)
            per.push_back({{"threshold", eo.metrics.thresholds[i]},
                           {"mAP", eo.metrics.map_per_threshold[i]}});
        s["per_threshold"] = per;
        std::ofstream f(eo.summary_path);
        f << s.dump(2) << "\n";
    }

    const auto& th = eo.metrics.thresholds;
    eo.fn_tiou = th[th.size() / 2];
    eo.fn = fn_profile(preds, gts, ds.durations(), eo.fn_tiou);
    eo.bins_path = (fs::path(out_dir) / "bins.csv").string();
    {
        std::ofstream f(eo.bins_path);
        f << "kind,bin,total,miss_rate\n";
        char buf[96];
        for (int i = 0; i < 5; ++i) {
            std::snprintf(buf, sizeof buf, "coverage,%s,%lld,%.6f\n", kBin5Names[size_t(i)],
                          (long long)eo.fn.coverage_total[size_t(i)],
                          eo.fn.coverage_miss[size_t(i)]);
            f << buf;
        }
        for (int i = 0; i < 5; ++i) {
            std::snprintf(buf, sizeof buf, "length,%s,%lld,%.6f\n", kBin5Names[size_t(i)],
                          (long long)eo.fn.length_total[size_t(i)], eo.fn.length_miss[size_t(i)]);
            f << buf;
        }
        for (int i = 0; i < 4; ++i) {
            std::snprintf(buf, sizeof buf, "count,%s,%lld,%.6f\n", kCountBinNames[size_t(i)],
                          (long long)eo.fn.count_total[size_t(i)], eo.fn.count_miss[size_t(i)]);
            f << buf;
        }
    }

    for (size_t i = 0; i < th.size(); ++i)
        std::printf("eval: mAP@%.2f = %.4f\n", th[i], eo.metrics.map_per_threshold[i]);
    std::printf("eval: average mAP = %.4f (%zu predictions, %zu GTs)\n", eo.metrics.average,
                preds.size(), gts.size());
    return eo;
}

// ------------------------------------------------------------------ bench

namespace {

struct ScanBenchSetup {
    DiscreteSsm d;
    Tensor cc, x;
};

ScanBenchSetup scan_bench_setup(int64_t t, RandomStream& rs) {
    const int64_t c = 4, n = 4;
    std::vector<double> av(size_t(c * n)), bv(size_t(t * n)), cv(size_t(t * n)),
        dv(size_t(t * c)), xv(size_t(t * c));
    for (auto& v : av) v = -(0.05 + 1.5 * rs.uniform());
    for (auto& v : bv) v = rs.normal();
    for (auto& v : cv) v = rs.normal();
    for (auto& v : dv) v = 0.02 + 0.4 * rs.uniform();
    for (auto& v : xv) v = rs.normal();
    SsmParams p{Tensor::from_vector({c, n}, av), Tensor::from_vector({1, t, n}, bv),
                Tensor::from_vector({1, t, n}, cv), Tensor::from_vector({1, t, c}, dv)};
    return {discretize_zoh(p), p.c, Tensor::from_vector({1, t, c}, xv)};
}

int64_t time_best_ns(const std::function<void()>& fn, int64_t reps) {
    fn();  // warmup
    int64_t best = INT64_MAX;
    for (int64_t r = 0; r < reps; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        fn();
        auto t1 = std::chrono::steady_clock::now();
        best = std::min(best,
                        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
    }
    return best;
}

}  // namespace

std::vector<BenchRow> cmd_bench(const std::vector<int64_t>& lengths,
                                const std::vector<std::string>& evaluators, int64_t reps,
                                const std::string& csv_path) {
    if (lengths.empty()) throw ValueError("bench: empty length list");
    if (evaluators.empty()) throw ValueError("bench: empty evaluator list");
    if (reps < 1) throw ValueError("bench: reps must be at least 1");
    for (const auto& ev : evaluators)
        if (ev != "recurrent" && ev != "parallel" && ev != "dense" && ev != "dmbss")
            throw ValueError("bench: unknown evaluator '" + ev +
                             "' (expected recurrent|parallel|dense|dmbss)");
    for (int64_t t : lengths)
        if (t < 2) throw ValueError("bench: lengths must be at least 2");

    DmbssConfig bcfg;
    bcfg.c = 16;
    DmbssParams bparams = dmbss_init(bcfg, 77);

    NoGradGuard ng;
    std::vector<BenchRow> rows;
    for (int64_t t : lengths) {
        RandomStream rs(9000 + uint64_t(t));
        ScanBenchSetup s = scan_bench_setup(t, rs);
        std::vector<double> xv(size_t(t * bcfg.c));
        for (auto& v : xv) v = rs.normal();
        Tensor xb = Tensor::from_vector({1, t, bcfg.c}, xv);
        for (const auto& ev : evaluators) {
            if (ev == "dense" && t > kBenchDenseMaxT) {
                std::fprintf(stderr, "bench: skipping dense at t=%lld (O(t^2) cap is %lld)\n",
                             (long long)t, (long long)kBenchDenseMaxT);
                continue;
            }
            std::function<void()> fn;
            if (ev == "recurrent")
                fn = [&] { scan_recurrent(s.d, s.cc, s.x); };
            else if (ev == "parallel")
                fn = [&] { scan_parallel(s.d, s.cc, s.x); };
            else if (ev == "dense")
                fn = [&] { scan_dense_oracle(s.d, s.cc, s.x); };
            else
                fn = [&] { dmbss_forward(xb, bparams, bcfg); };
            rows.push_back({t, ev, time_best_ns(fn, reps), reps});
        }
    }

    if (!csv_path.empty()) {
        if (fs::path(csv_path).has_parent_path())
            fs::create_directories(fs::path(csv_path).parent_path());
        std::ofstream f(csv_path);
        if (!f) throw IoError("bench: cannot write '" + csv_path + "'");
        f << "length,evaluator,ns,reps\n";
        for (const auto& r : rows)
            f << r.length << "," << r.evaluator << "," << r.ns << "," << r.reps << "\n";
    }
    for (const auto& r : rows)
        std::printf("bench: t=%-6lld %-10s %12lld ns  (best of %lld)\n", (long long)r.length,
                    r.evaluator.c_str(), (long long)r.ns, (long long)r.reps);
    return rows;
}

// ---------------------------------------------------------------- oracles

namespace {

Tensor rand_t(const Shape& s, RandomStream& r, double lo, double hi, bool grad = false) {
    std::vector<double> v(size_t(numel_of(s)));
    for (auto& x : v) x = lo + (hi - lo) * r.uniform();
    return grad ? Tensor::param(s, v) : Tensor::from_vector(s, v);
}

Tensor randn_t(const Shape& s, RandomStream& r, bool grad = false) {
    std::vector<double> v(size_t(numel_of(s)));
    for (auto& x : v) x = r.normal();
    return grad ? Tensor::param(s, v) : Tensor::from_vector(s, v);
}

struct RawScanInstance {
    int64_t t, n, c;
    std::vector<double> a, b, cvec, delta, x;
};

RawScanInstance random_scan_instance(RandomStream& rs, int64_t max_t, int64_t max_n,
                                     int64_t max_c) {
    RawScanInstance in;
    in.t = rs.uniform_int(2, max_t);
    in.n = rs.uniform_int(1, max_n);
    in.c = rs.uniform_int(1, max_c);
    in.a.resize(size_t(in.c * in.n));
    in.b.resize(size_t(in.t * in.n));
    in.cvec.resize(size_t(in.t * in.n));
    in.delta.resize(size_t(in.t * in.c));
    in.x.resize(size_t(in.t * in.c));
    for (auto& v : in.a) v = -(0.05 + 1.5 * rs.uniform());
    for (auto& v : in.b) v = rs.normal();
    for (auto& v : in.cvec) v = rs.normal();
    for (auto& v : in.delta) v = 0.02 + 0.4 * rs.uniform();
    for (auto& v : in.x) v = rs.normal();
    return in;
}

struct ScanTensors {
    DiscreteSsm d;
    Tensor cc, x;
};

ScanTensors make_scan_tensors(const RawScanInstance& in, DType dt) {
    SsmParams p{Tensor::from_vector({in.c, in.n}, in.a, dt),
                Tensor::from_vector({1, in.t, in.n}, in.b, dt),
                Tensor::from_vector({1, in.t, in.n}, in.cvec, dt),
                Tensor::from_vector({1, in.t, in.c}, in.delta, dt)};
    return {discretize_zoh(p), p.c, Tensor::from_vector({1, in.t, in.c}, in.x, dt)};
}

// max |y - M x| with the product accumulated in f64 from the tensor values
double max_err_vs_matrix(const std::vector<double>& M, const std::vector<double>& x,
                         const std::vector<double>& y, int64_t t, int64_t c) {
    double worst = 0;
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < t; ++i) {
            double acc = 0;
            for (int64_t j = 0; j <= i; ++j)
                acc += M[size_t((ci * t + i) * t + j)] * x[size_t(j * c + ci)];
            worst = std::max(worst, std::abs(y[size_t(i * c + ci)] - acc));
        }
    return worst;
}

OracleResult oracle_scan_equivalence(const OracleOptions& opt) {
    OracleResult r;
    r.suite = "scan-equivalence";
    r.tol = 1e-12;
    r.cases = opt.scan_instances;
    NoGradGuard ng;
    RandomStream rs(91);
    double err64 = 0, err32 = 0;
    for (int64_t i = 0; i < opt.scan_instances; ++i) {
        RawScanInstance in = random_scan_instance(rs, 64, 8, 4);
        for (DType dt : {DType::f64, DType::f32}) {
            ScanTensors s = make_scan_tensors(in, dt);
            Tensor y_rec = scan_recurrent(s.d, s.cc, s.x);
            Tensor y_par = scan_parallel(s.d, s.cc, s.x);
            if (opt.fault == "scan") y_par = add_scalar(y_par, 1e-6);
            std::vector<double> M = materialize_mixing_matrix(s.d, s.cc).to_vector();
            std::vector<double> xv = s.x.to_vector();
            std::vector<double> rec = y_rec.to_vector(), par = y_par.to_vector();
            double e_mx = max_err_vs_matrix(M, xv, rec, in.t, in.c);
            double e_pr = 0;
            for (size_t k = 0; k < rec.size(); ++k)
                e_pr = std::max(e_pr, std::abs(par[k] - rec[k]));
            (dt == DType::f64 ? err64 : err32) = std::max(dt == DType::f64 ? err64 : err32,
                                                          std::max(e_mx, e_pr));
        }
    }
    r.max_err = std::max(err64, err32);
    r.pass = err64 <= 1e-12 && err32 <= 1e-5;
    char buf[96];
    std::snprintf(buf, sizeof buf, "f64 %.2e (tol 1e-12), f32 %.2e (tol 1e-05)", err64, err32);
    r.note = buf;
    return r;
}

OracleResult oracle_lti(const OracleOptions& opt) {
    OracleResult r;
    r.suite = "lti";
    r.tol = 1e-12;
    r.cases = opt.lti_instances;
    NoGradGuard ng;
    RandomStream rs(92);
    double worst = 0;
    for (int64_t i = 0; i < opt.lti_instances; ++i) {
        int64_t t = rs.uniform_int(4, 48), n = rs.uniform_int(1, 6), c = rs.uniform_int(1, 4);
        std::vector<double> av(static_cast<size_t>(c * n));
        std::vector<double> brow(static_cast<size_t>(n)), crow(static_cast<size_t>(n));
        std::vector<double> drow(static_cast<size_t>(c));
        for (auto& v : av) v = -(0.05 + 1.5 * rs.uniform());
        for (auto& v : brow) v = rs.normal();
        for (auto& v : crow) v = rs.normal();
        for (auto& v : drow) v = 0.02 + 0.4 * rs.uniform();
        std::vector<double> bv, cv, dv;
        for (int64_t k = 0; k < t; ++k) {
            bv.insert(bv.end(), brow.begin(), brow.end());
            cv.insert(cv.end(), crow.begin(), crow.end());
            dv.insert(dv.end(), drow.begin(), drow.end());
        }
        SsmParams p{Tensor::from_vector({c, n}, av), Tensor::from_vector({1, t, n}, bv),
                    Tensor::from_vector({1, t, n}, cv), Tensor::from_vector({1, t, c}, dv)};
        DiscreteSsm d = discretize_zoh(p);
        Tensor x = randn_t({1, t, c}, rs);
        Tensor y_conv = lti_apply(lti_kernel(d, p.c, t), x);
        Tensor y_rec = scan_recurrent(d, p.c, x);
        std::vector<double> a = y_conv.to_vector(), b = y_rec.to_vector();
        for (size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
    }
    r.max_err = worst;
    r.pass = worst <= r.tol;
    return r;
}

OracleResult oracle_mask(const OracleOptions& opt) {
    OracleResult r;
    r.suite = "mask";
    r.tol = 1e-12;
    r.cases = opt.mask_instances;
    NoGradGuard ng;
    RandomStream rs(93);
    const bool masked_flag = opt.fault == "diag-mask" ? false : true;
    double worst = 0;
    for (int64_t inst = 0; inst < opt.mask_instances; ++inst) {
        int64_t t = rs.uniform_int(4, 20), w = rs.uniform_int(1, 3), n = rs.uniform_int(1, 3);
        Tensor x = randn_t({1, t, w}, rs);
        SelectiveProj proj_fw{randn_t({w, n}, rs), randn_t({w, n}, rs), randn_t({w, w}, rs),
                              rand_t({w}, rs, -1.0, 0.5)};
        SelectiveProj proj_bw{randn_t({w, n}, rs), randn_t({w, n}, rs), randn_t({w, w}, rs),
                              rand_t({w}, rs, -1.0, 0.5)};
        Tensor a_fw = rand_t({w, n}, rs, -1.6, -0.05);
        Tensor a_bw = rand_t({w, n}, rs, -1.6, -0.05);
        SsmParams p_fw = selective_params(x, a_fw, proj_fw);
        DiscreteSsm d_fw = discretize_zoh(p_fw);
        Tensor xf = flip(x, 1);
        SsmParams p_bw = selective_params(xf, a_bw, proj_bw);
        DiscreteSsm d_bw = discretize_zoh(p_bw);

        std::vector<double> Mf = materialize_mixing_matrix(d_fw, p_fw.c).to_vector();
        std::vector<double> Mb = materialize_mixing_matrix(d_bw, p_bw.c).to_vector();
        auto mf_at = [&](int64_t ci, int64_t i, int64_t j) {
            return Mf[size_t((ci * t + i) * t + j)];
        };
        // the reverse branch in original coordinates: flip both time axes
        auto mb_at = [&](int64_t ci, int64_t i, int64_t j) {
            return Mb[size_t((ci * t + (t - 1 - i)) * t + (t - 1 - j))];
        };

        // composed operators materialized empirically from basis inputs
        std::vector<double> emp_m(size_t(w * t * t)), emp_u(size_t(w * t * t));
        for (int64_t j = 0; j < t; ++j) {
            std::vector<double> ev(size_t(t * w), 0.0);
            for (int64_t ci = 0; ci < w; ++ci) ev[size_t(j * w + ci)] = 1.0;
            Tensor e = Tensor::from_vector({1, t, w}, ev);
            std::vector<double> ym =
                bidirectional_compose(d_fw, p_fw.c, d_bw, p_bw.c, e, masked_flag).to_vector();
            std::vector<double> yu =
                bidirectional_compose(d_fw, p_fw.c, d_bw, p_bw.c, e, false).to_vector();
            for (int64_t ci = 0; ci < w; ++ci)
                for (int64_t i = 0; i < t; ++i) {
                    emp_m[size_t((ci * t + i) * t + j)] = ym[size_t(i * w + ci)];
                    emp_u[size_t((ci * t + i) * t + j)] = yu[size_t(i * w + ci)];
                }
        }
        for (int64_t ci = 0; ci < w; ++ci)
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < t; ++j) {
                    double fw = i >= j ? mf_at(ci, i, j) : 0.0;
                    double bw = i <= j ? mb_at(ci, i, j) : 0.0;
                    double want_u = fw + bw;
                    double want_m = fw + (i == j ? 0.0 : bw);
                    size_t k = size_t((ci * t + i) * t + j);
                    worst = std::max(worst, std::abs(emp_u[k] - want_u));
                    worst = std::max(worst, std::abs(emp_m[k] - want_m));
                }
    }
    r.max_err = worst;
    r.pass = worst <= r.tol;
    return r;
}

OracleResult oracle_palindrome(const OracleOptions& opt) {
    OracleResult r;
    r.suite = "palindrome";
    r.tol = 1e-10;
    r.cases = opt.palindrome_instances;
    NoGradGuard ng;
    RandomStream rs(94);
    double worst = 0;
    for (int64_t inst = 0; inst < opt.palindrome_instances; ++inst) {
        int64_t t = rs.uniform_int(5, 20), w = rs.uniform_int(1, 3), n = rs.uniform_int(1, 3);
        std::vector<double> half(size_t(((t + 1) / 2) * w));
        for (auto& v : half) v = rs.normal();
        std::vector<double> xv(size_t(t * w));
        for (int64_t i = 0; i < t; ++i) {
            int64_t src = std::min(i, t - 1 - i);
            for (int64_t ci = 0; ci < w; ++ci) xv[size_t(i * w + ci)] = half[size_t(src * w + ci)];
        }
        Tensor x = Tensor::from_vector({1, t, w}, xv);
        SelectiveProj proj{randn_t({w, n}, rs), randn_t({w, n}, rs), randn_t({w, w}, rs),
                           rand_t({w}, rs, -1.0, 0.5)};
        Tensor a = rand_t({w, n}, rs, -1.6, -0.05);
        SsmParams p_fw = selective_params(x, a, proj);
        DiscreteSsm d_fw = discretize_zoh(p_fw);
        SsmParams p_bw = selective_params(flip(x, 1), a, proj);
        DiscreteSsm d_bw = discretize_zoh(p_bw);
        for (bool mask : {false, true}) {
            std::vector<double> y =
                bidirectional_compose(d_fw, p_fw.c, d_bw, p_bw.c, x, mask).to_vector();
            for (int64_t i = 0; i < t; ++i)
                for (int64_t ci = 0; ci < w; ++ci)
                    worst = std::max(worst, std::abs(y[size_t(i * w + ci)] -
                                                     y[size_t((t - 1 - i) * w + ci)]));
        }
    }
    r.max_err = worst;
    r.pass = worst <= r.tol;
    return r;
}

OracleResult oracle_grad(const OracleOptions& opt) {
    OracleResult r;
    r.suite = "grad";
    r.tol = 1e-4;
    RandomStream rng(95);
    double worst = 0;
    std::string worst_name;
    bool ok = true;
    auto record = [&](const std::string& name, double err, double tol) {
        ++r.cases;
        if (err > worst) {
            worst = err;
            worst_name = name;
        }
        if (!(err <= tol)) ok = false;
    };

    struct EwCase {
        EwOp op;
        const char* name;
        bool binary;
        double lo, hi;
    };
    // domains keep inputs away from kinks and singularities
    std::vector<EwCase> ew = {
        {EwOp::add, "add", true, -1, 1},
        {EwOp::sub, "sub", true, -1, 1},
        {EwOp::mul, "mul", true, -1, 1},
        {EwOp::div, "div", true, 0.5, 2.0},
        {EwOp::minimum, "minimum", true, -1, 1},
        {EwOp::maximum, "maximum", true, -1, 1},
        {EwOp::neg, "neg", false, -1, 1},
        {EwOp::exp, "exp", false, -1, 1},
        {EwOp::expm1, "expm1", false, -1, 1},
        {EwOp::log, "log", false, 0.5, 3.0},
        {EwOp::sqrt, "sqrt", false, 0.5, 3.0},
        {EwOp::sigmoid, "sigmoid", false, -2, 2},
        {EwOp::softplus, "softplus", false, -2, 2},
        {EwOp::silu, "silu", false, -2, 2},
        {EwOp::gelu, "gelu", false, -2, 2},
        {EwOp::relu, "relu", false, 0.2, 2.0},
    };
    for (const auto& cs : ew) {
        Tensor a = rand_t({3, 4}, rng, cs.lo, cs.hi, true);
        Tensor b = rand_t({3, 4}, rng, cs.lo, cs.hi, true);
        Tensor w = randn_t({3, 4}, rng);
        std::vector<Tensor> params = cs.binary ? std::vector<Tensor>{a, b}
                                               : std::vector<Tensor>{a};
        auto f = [&](const std::vector<Tensor>& p) {
            Tensor y = cs.binary ? elementwise(cs.op, p[0], p[1]) : elementwise(cs.op, p[0]);
            return sum_all(mul(y, w));
        };
        record(cs.name, grad_check(f, params, 1e-5).max_rel_err, 1e-6);
    }
    {
        Tensor a = rand_t({3, 4}, rng, -1, 1, true);
        Tensor w = randn_t({3, 4}, rng);
        record("add_scalar",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(add_scalar(p[0], 0.7), w));
               }, {a}, 1e-5).max_rel_err,
               1e-6);
        record("mul_scalar",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(mul_scalar(p[0], -1.3), w));
               }, {a}, 1e-5).max_rel_err,
               1e-6);
        record("cast",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(cast(p[0], DType::f64), w));
               }, {a}, 1e-5).max_rel_err,
               1e-6);
        record("mean_all",
               grad_check([&](const std::vector<Tensor>& p) { return mean_all(p[0]); }, {a}, 1e-5)
                   .max_rel_err,
               1e-6);
    }
    {
        Tensor w = randn_t({2, 3, 4}, rng);
        struct ShapeCase {
            const char* name;
            std::function<Tensor(const Tensor&)> fn;
        };
        std::vector<ShapeCase> ops = {
            {"reshape", [](const Tensor& x) { return reshape(x, {6, 4}); }},
            {"swap_axes", [](const Tensor& x) { return swap_axes(x, 1, 2); }},
            {"flip", [](const Tensor& x) { return flip(x, 1); }},
            {"narrow", [](const Tensor& x) { return narrow(x, 1, 1, 2); }},
            {"reduce_sum", [](const Tensor& x) { return reduce_sum(x, 1); }},
        };
        for (const auto& op : ops) {
            Tensor x = rand_t({2, 3, 4}, rng, -1, 1, true);
            auto f = [&](const std::vector<Tensor>& p) {
                Tensor y = op.fn(p[0]);
                Tensor wf = reshape(w, {w.numel()});
                return sum_all(mul(reshape(y, {y.numel()}), narrow(wf, 0, 0, y.numel())));
            };
            record(op.name, grad_check(f, {x}, 1e-5).max_rel_err, 1e-6);
        }
        Tensor a = rand_t({2, 2, 4}, rng, -1, 1, true);
        Tensor b = rand_t({2, 1, 4}, rng, -1, 1, true);
        record("concat",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(concat({p[0], p[1]}, 1), w));
               }, {a, b}, 1e-5).max_rel_err,
               1e-6);
    }
    {
        Tensor x = rand_t({4, 4}, rng, -1, 1, true);
        Tensor w = randn_t({4, 4}, rng);
        record("mask_diagonal",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(mask_diagonal(p[0]), w));
               }, {x}, 1e-5).max_rel_err,
               1e-6);
    }
    {
        Tensor x = rand_t({2, 5, 3}, rng, -1, 1, true);
        Tensor w = rand_t({3, 4}, rng, -1, 1, true);
        Tensor b = rand_t({4}, rng, -1, 1, true);
        Tensor ww = randn_t({2, 5, 4}, rng);
        record("linear",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(linear(p[0], p[1], p[2]), ww));
               }, {x, w, b}, 1e-5).max_rel_err,
               1e-6);
    }
    {
        Tensor x = rand_t({1, 3, 8}, rng, -1, 1, true);
        Tensor w = rand_t({2, 3, 3}, rng, -1, 1, true);
        Tensor b = rand_t({2}, rng, -1, 1, true);
        Tensor ws = randn_t({1, 2, 8}, rng);
        record("conv1d_same",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(conv1d(p[0], p[1], p[2], Pad1d::same), ws));
               }, {x, w, b}, 1e-5).max_rel_err,
               1e-6);
        Tensor wv = randn_t({1, 2, 8}, rng);
        record("conv1d_causal",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(conv1d(p[0], p[1], p[2], Pad1d::causal), wv));
               }, {x, w, b}, 1e-5).max_rel_err,
               1e-6);
        Tensor dw = rand_t({3, 3}, rng, -1, 1, true);
        Tensor wd = randn_t({1, 3, 8}, rng);
        record("conv1d_depthwise",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(conv1d_depthwise(p[0], p[1]), wd));
               }, {x, dw}, 1e-5).max_rel_err,
               1e-6);
    }
    {
        Tensor x = rand_t({2, 4, 5}, rng, -1, 1, true);
        Tensor g = rand_t({5}, rng, 0.5, 1.5, true);
        Tensor b = rand_t({5}, rng, -0.5, 0.5, true);
        Tensor w = randn_t({2, 4, 5}, rng);
        record("layer_norm",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(layer_norm(p[0], p[1], p[2]), w));
               }, {x, g, b}, 1e-5).max_rel_err,
               1e-4);
    }
    {
        Tensor x = rand_t({1, 3, 9}, rng, -1, 1, true);
        Tensor w = randn_t({1, 3, 5}, rng);
        record("maxpool1d",
               grad_check([&](const std::vector<Tensor>& p) {
                   return sum_all(mul(maxpool1d(p[0], 2, 2), w));
               }, {x}, 1e-5).max_rel_err,
               1e-4);
    }

    // selective scan paths, differentiated through the parameter generators
    const int64_t t = 5, c = 3, n = 2;
    auto scan_params = [&]() {
        return std::vector<Tensor>{rand_t({c, n}, rng, -1.0, 0.5, true),  // a_raw
                                   rand_t({1, t, c}, rng, -1, 1, true),   // x
                                   randn_t({c, n}, rng, true),
                                   randn_t({c, n}, rng, true),
                                   randn_t({c, c}, rng, true),
                                   rand_t({c}, rng, -1.0, 0.5, true)};
    };
    {
        Tensor w = randn_t({1, t, c}, rng);
        for (auto [kind, name] : {std::pair<ScanKind, const char*>{ScanKind::recurrent,
                                                                   "scan_recurrent"},
                                  {ScanKind::parallel, "scan_parallel"}}) {
            auto params = scan_params();
            auto f = [&, kind = kind](const std::vector<Tensor>& p) {
                SelectiveProj proj{p[2], p[3], p[4], p[5]};
                Tensor a = neg(exp(p[0]));
                SsmParams sp = selective_params(p[1], a, proj);
                DiscreteSsm d = discretize_zoh(sp);
                return sum_all(mul(scan(d, sp.c, p[1], kind), w));
            };
            record(name, grad_check(f, params, 1e-5, opt.grad_max_coords).max_rel_err, 1e-4);
        }
        {
            auto params = scan_params();
            auto f = [&](const std::vector<Tensor>& p) {
                SelectiveProj proj{p[2], p[3], p[4], p[5]};
                Tensor a = neg(exp(p[0]));
                SsmParams sp = selective_params(p[1], a, proj);
                DiscreteSsm d = discretize_zoh(sp);
                Tensor y = subtract_self_term(scan(d, sp.c, p[1], ScanKind::recurrent), d, sp.c,
                                              p[1]);
                return sum_all(mul(y, w));
            };
            record("subtract_self_term",
                   grad_check(f, params, 1e-5, opt.grad_max_coords).max_rel_err, 1e-4);
        }
        {
            auto params = scan_params();
            auto f = [&](const std::vector<Tensor>& p) {
                SelectiveProj proj{p[2], p[3], p[4], p[5]};
                Tensor a = neg(exp(p[0]));
                SsmParams sp = selective_params(p[1], a, proj);
                DiscreteSsm d = discretize_zoh(sp);
                Tensor xf = flip(p[1], 1);
                SsmParams sb = selective_params(xf, a, proj);
                DiscreteSsm db = discretize_zoh(sb);
                return sum_all(mul(bidirectional_compose(d, sp.c, db, sb.c, p[1], true), w));
            };
            record("bidirectional_masked",
                   grad_check(f, params, 1e-5, opt.grad_max_coords).max_rel_err, 1e-4);
        }
    }
    {
        DmbssConfig cfg;
        cfg.c = 4;
        cfg.lambda = 2;
        cfg.n = 2;
        cfg.conv_k = 2;
        DmbssParams p = dmbss_init(cfg, 7);
        std::vector<Tensor> params = dmbss_collect_params(p);
        Tensor x = rand_t({1, 6, 4}, rng, -1, 1, true);
        params.push_back(x);
        Tensor w = randn_t({1, 6, 4}, rng);
        auto f = [&](const std::vector<Tensor>& ps) {
            return sum_all(mul(dmbss_forward(ps.back(), p, cfg), w));
        };
        record("dmbss_block", grad_check(f, params, 1e-5, opt.grad_max_coords).max_rel_err, 1e-4);
    }

    r.max_err = worst;
    r.pass = ok;
    r.note = "worst: " + worst_name + " (elementwise/linear tol 1e-06)";
    return r;
}

// the same greedy rule, written as plainly as possible: selection loop over
// predictions, full rescan of GTs each round
struct BruteMatch {
    std::vector<bool> gt_flags;
    std::vector<char> tp_in_order;  // per prediction, in descending-score order
};

BruteMatch brute_force_match(const std::vector<ActionInstance>& preds,
                             const std::vector<ActionInstance>& gts, double tiou) {
    size_t P = preds.size(), G = gts.size();
    BruteMatch out;
    out.gt_flags.assign(G, false);
    std::vector<char> used_p(P, 0), used_g(G, 0);
    for (size_t round = 0; round < P; ++round) {
        size_t best = P;
        for (size_t p = 0; p < P; ++p)
            if (!used_p[p] && (best == P || preds[p].score > preds[best].score)) best = p;
        used_p[best] = 1;
        size_t bg = G;
        double bi = 0;
        for (size_t g = 0; g < G; ++g) {
            if (used_g[g] || gts[g].video_id != preds[best].video_id ||
                gts[g].label != preds[best].label)
                continue;
            double v = iou_1d(preds[best].seg, gts[g].seg);
            if (v >= tiou && (bg == G || v > bi)) {
                bg = g;
                bi = v;
            }
        }
        if (bg < G) {
            used_g[bg] = 1;
            out.gt_flags[bg] = true;
            out.tp_in_order.push_back(1);
        } else {
            out.tp_in_order.push_back(0);
        }
    }
    return out;
}

double ap_from_tp_flags(const std::vector<char>& tp, size_t num_gt) {
    if (num_gt == 0 || tp.empty()) return 0.0;
    size_t P = tp.size();
    std::vector<double> prec(P), rec(P);
    int64_t ctp = 0;
    for (size_t i = 0; i < P; ++i) {
        ctp += tp[i];
        prec[i] = double(ctp) / double(i + 1);
        rec[i] = double(ctp) / double(num_gt);
    }
    double area = 0, pmax = 0;
    for (size_t i = P; i-- > 0;) {
        pmax = std::max(pmax, prec[i]);
        area += (rec[i] - (i > 0 ? rec[i - 1] : 0.0)) * pmax;
    }
    return area;
}

OracleResult oracle_ap(const OracleOptions& opt) {
    OracleResult r;
    r.suite = "ap";
    r.tol = 1e-12;
    NoGradGuard ng;
    double worst = 0;
    bool ok = true;
    std::string worst_name;
    auto check = [&](const std::string& name, double got, double want) {
        ++r.cases;
        double err = std::abs(got - want);
        if (err > worst) {
            worst = err;
            worst_name = name;
        }
        if (err > r.tol) ok = false;
    };
    auto inst = [](const char* vid, double s, double e, double score) {
        ActionInstance a;
        a.video_id = vid;
        a.label = 0;
        a.seg = {s, e};
        a.score = score;
        return a;
    };

    // one GT, one exact prediction -> 1.0 at every threshold
    {
        std::vector<ActionInstance> g{inst("v", 0, 10, 0)};
        for (double th : {0.3, 0.5, 0.7, 0.9})
            check("exact-hit", average_precision({inst("v", 0, 10, 0.9)}, g, th), 1.0);
    }
    // higher-scored IoU-0.4 miss ahead of an exact hit at tiou 0.5 -> 0.5
    {
        std::vector<ActionInstance> g{inst("v", 0, 10, 0)};
        std::vector<ActionInstance> p{inst("v", 0, 4, 0.9), inst("v", 0, 10, 0.8)};
        check("miss-then-hit", average_precision(p, g, 0.5),
              opt.fault == "ap" ? 0.6 : 0.5);
    }
    // duplicate exact predictions: the second is a false positive past full
    // recall, so the envelope still integrates to 1.0
    {
        std::vector<ActionInstance> g{inst("v", 0, 10, 0)};
        std::vector<ActionInstance> p{inst("v", 0, 10, 0.9), inst("v", 0, 10, 0.8)};
        check("duplicate-hit", average_precision(p, g, 0.5), 1.0);
    }

    // random small instances against the brute-force matcher
    RandomStream rs(202);
    for (int64_t i = 0; i < opt.ap_instances; ++i) {
        int64_t nG = rs.uniform_int(1, 4), nP = rs.uniform_int(0, 6);
        std::vector<ActionInstance> g, p;
        for (int64_t k = 0; k < nG; ++k) {
            double s = 18.0 * rs.uniform();
            g.push_back(inst(rs.uniform() < 0.5 ? "a" : "b", s, s + 0.5 + 6.0 * rs.uniform(), 0));
        }
        for (int64_t k = 0; k < nP; ++k) {
            double s = 18.0 * rs.uniform();
            double score = rs.uniform();
            if (!p.empty() && rs.uniform() < 0.3) score = p.back().score;  // exercise ties
            p.push_back(
                inst(rs.uniform() < 0.5 ? "a" : "b", s, s + 0.5 + 6.0 * rs.uniform(), score));
        }
        double tiou = std::vector<double>{0.3, 0.5, 0.7}[size_t(rs.uniform_int(0, 2))];
        BruteMatch bm = brute_force_match(p, g, tiou);
        std::vector<bool> flags = greedy_match_flags(p, g, tiou);
        ++r.cases;
        if (flags != bm.gt_flags) {
            ok = false;
            worst = std::max(worst, 1.0);
            worst_name = "matcher-disagreement";
        }
        check("ap-vs-brute", average_precision(p, g, tiou),
              ap_from_tp_flags(bm.tp_in_order, size_t(nG)));
    }
    r.max_err = worst;
    r.pass = ok;
    if (!worst_name.empty()) r.note = "worst: " + worst_name;
    return r;
}

OracleResult oracle_bins(const OracleOptions&) {
    OracleResult r;
    r.suite = "bins";
    r.tol = 0;
    int64_t bad = 0;
    auto expect = [&](int got, int want) {
        ++r.cases;
        if (got != want) ++bad;
    };
    // closed right edges land in the lower bin
    expect(coverage_bin(0.02), 0);
    expect(coverage_bin(0.04), 1);
    expect(coverage_bin(0.06), 2);
    expect(coverage_bin(0.08), 3);
    expect(coverage_bin(0.0801), 4);
    expect(coverage_bin(0.001), 0);
    expect(coverage_bin(1.0), 4);
    expect(length_bin(3), 0);
    expect(length_bin(6), 1);
    expect(length_bin(12), 2);
    expect(length_bin(18), 3);
    expect(length_bin(18.01), 4);
    expect(length_bin(0.5), 0);
    expect(length_bin(120), 4);
    expect(instance_count_bin(1), 0);
    expect(instance_count_bin(2), 1);
    expect(instance_count_bin(40), 1);
    expect(instance_count_bin(41), 2);
    expect(instance_count_bin(80), 2);
    expect(instance_count_bin(81), 3);

    // integration through assign_bins: 100 s video, class 0 thrice, class 1 once
    std::vector<ActionInstance> gts;
    auto gt = [](double s, double e, int label) {
        ActionInstance a;
        a.video_id = "v";
        a.label = label;
        a.seg = {s, e};
        return a;
    };
    gts.push_back(gt(0, 2, 0));     // len 2 -> XS, coverage .02 -> XS, count 3 -> S
    gts.push_back(gt(10, 16, 0));   // len 6 -> S, coverage .06 -> M
    gts.push_back(gt(20, 38, 0));   // len 18 -> L, coverage .18 -> XL
    gts.push_back(gt(50, 80, 1));   // len 30 -> XL, coverage .3 -> XL, count 1 -> XS
    GtBinning bn = assign_bins(gts, {{"v", 100.0}});
    expect(bn.length[0], 0);
    expect(bn.length[1], 1);
    expect(bn.length[2], 3);
    expect(bn.length[3], 4);
    expect(bn.coverage[0], 0);
    expect(bn.coverage[1], 2);
    expect(bn.coverage[2], 4);
    expect(bn.coverage[3], 4);
    expect(bn.count[0], 1);
    expect(bn.count[1], 1);
    expect(bn.count[2], 1);
    expect(bn.count[3], 0);

    r.max_err = double(bad);
    r.pass = bad == 0;
    return r;
}

}  // namespace

std::vector<OracleResult> run_oracles(const std::string& which, const OracleOptions& opt) {
    if (!opt.fault.empty() && opt.fault != "scan" && opt.fault != "diag-mask" &&
        opt.fault != "ap")
        throw ValueError("unknown fault '" + opt.fault + "' (expected scan|diag-mask|ap)");
    struct Entry {
        const char* name;
        OracleResult (*fn)(const OracleOptions&);
    };
    const std::vector<Entry> suites = {
        {"scan-equivalence", oracle_scan_equivalence},
        {"lti", oracle_lti},
        {"mask", oracle_mask},
        {"grad", oracle_grad},
        {"palindrome", oracle_palindrome},
        {"ap", oracle_ap},
        {"bins", oracle_bins},
    };
    if (which != "all") {
        bool known = false;
        for (const auto& s : suites) known = known || which == s.name;
        if (!known)
            throw ValueError("unknown oracle suite '" + which +
                             "' (expected all|scan-equivalence|lti|mask|grad|palindrome|ap|bins)");
    }
    std::vector<OracleResult> out;
    for (const auto& s : suites) {
        if (which != "all" && which != s.name) continue;
        auto t0 = std::chrono::steady_clock::now();
        OracleResult r = s.fn(opt);
        auto t1 = std::chrono::steady_clock::now();
        r.seconds = std::chrono::duration<double>(t1 - t0).count();
        out.push_back(std::move(r));
    }
    return out;
}

bool print_oracle_report(const std::vector<OracleResult>& results) {
    bool all = true;
    for (const auto& r : results) {
        all = all && r.pass;
        std::printf("%-18s %-4s  max err %.3e  tol %.0e  (%lld cases, %.2fs)%s%s\n",
                    r.suite.c_str(), r.pass ? "PASS" : "FAIL", r.max_err, r.tol,
                    (long long)r.cases, r.seconds, r.note.empty() ? "" : "  ",
                    r.note.c_str());
    }
    return all;
}

}  // namespace ssmtad
