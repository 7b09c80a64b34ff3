#include "ssmtad/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace ssmtad {

using nlohmann::json;

namespace {

std::string join_key(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

// tracks which keys a section consumed so leftovers can be rejected by name
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            throw ConfigError("config section '" + (path_.empty() ? "<root>" : path_) +
                              "' must be a JSON object");
    }

    double num(const char* key, double fallback) {
        const json* v = take(key);
        if (!v) return fallback;
        if (!v->is_number())
            throw ConfigError("config key '" + join_key(path_, key) + "' must be a number");
        return v->get<double>();
    }

    int64_t integer(const char* key, int64_t fallback) {
        const json* v = take(key);
        if (!v) return fallback;
        if (!v->is_number_integer())
            throw ConfigError("config key '" + join_key(path_, key) + "' must be an integer");
        return v->get<int64_t>();
    }

    uint64_t uinteger(const char* key, uint64_t fallback) {
        const json* v = take(key);
        if (!v) return fallback;
        if (!v->is_number_integer() || (v->is_number_integer() && v->get<int64_t>() < 0 &&
                                        !v->is_number_unsigned()))
            throw ConfigError("config key '" + join_key(path_, key) +
                              "' must be a nonnegative integer");
        return v->get<uint64_t>();
    }

    bool boolean(const char* key, bool fallback) {
        const json* v = take(key);
        if (!v) return fallback;
        if (!v->is_boolean())
            throw ConfigError("config key '" + join_key(path_, key) + "' must be a boolean");
        return v->get<bool>();
    }

    std::string str(const char* key, const std::string& fallback) {
        const json* v = take(key);
        if (!v) return fallback;
        if (!v->is_string())
            throw ConfigError("config key '" + join_key(path_, key) + "' must be a string");
        return v->get<std::string>();
    }

    std::vector<double> num_list(const char* key, std::vector<double> fallback) {
        const json* v = take(key);
        if (!v) return fallback;
        if (!v->is_array())
            throw ConfigError("config key '" + join_key(path_, key) +
                              "' must be an array of numbers");
        std::vector<double> out;
        for (const auto& e : *v) {
            if (!e.is_number())
                throw ConfigError("config key '" + join_key(path_, key) +
                                  "' must be an array of numbers");
            out.push_back(e.get<double>());
        }
        return out;
    }

    // empty object when absent, so defaults flow through the sub-parser
    json sub(const char* key) {
        const json* v = take(key);
        if (!v) return json::object();
        if (!v->is_object())
            throw ConfigError("config key '" + join_key(path_, key) + "' must be an object");
        return *v;
    }

    std::string subpath(const char* key) const { return join_key(path_, key); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError("unknown config key '" + join_key(path_, it.key()) + "'");
    }

private:
    const json* take(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

RunMode parse_mode(const std::string& s) {
    if (s == "feature-input") return RunMode::feature_input;
    if (s == "e2e") return RunMode::e2e;
    throw ConfigError("config key 'mode' must be \"feature-input\" or \"e2e\", got \"" + s + "\"");
}

MaskMode parse_mask_mode(const std::string& s, const std::string& path) {
    if (s == "semantic") return MaskMode::semantic;
    if (s == "literal") return MaskMode::literal;
    throw ConfigError("config key '" + path + "' must be \"semantic\" or \"literal\"");
}

ScanKind parse_scan(const std::string& s, const std::string& path) {
    if (s == "recurrent") return ScanKind::recurrent;
    if (s == "parallel") return ScanKind::parallel;
    throw ConfigError("config key '" + path + "' must be \"recurrent\" or \"parallel\"");
}

void parse_dmbss(const json& j, const std::string& path, DmbssConfig& d) {
    Section s(j, path);
    d.lambda = s.integer("lambda", d.lambda);
    d.n = s.integer("n", d.n);
    d.conv_k = s.integer("conv_k", d.conv_k);
    d.share_params = s.boolean("share_params", d.share_params);
    d.dual_branch = s.boolean("dual_branch", d.dual_branch);
    d.diag_mask = s.boolean("diag_mask", d.diag_mask);
    d.mask_mode = parse_mask_mode(
        s.str("mask_mode", d.mask_mode == MaskMode::semantic ? "semantic" : "literal"),
        join_key(path, "mask_mode"));
    d.scan = parse_scan(s.str("scan", d.scan == ScanKind::parallel ? "parallel" : "recurrent"),
                        join_key(path, "scan"));
    s.finish();
}

void parse_model(const json& j, DetectorConfig& m) {
    Section s(j, "model");
    m.c_in = s.integer("c_in", m.c_in);
    m.c = s.integer("c", m.c);
    m.embed_layers = s.integer("embed_layers", m.embed_layers);
    m.levels = s.integer("levels", m.levels);
    m.num_classes = s.integer("num_classes", m.num_classes);
    m.trunk_layers = s.integer("trunk_layers", m.trunk_layers);
    m.head_kernel = s.integer("head_kernel", m.head_kernel);
    m.r0 = s.num("r0", m.r0);
    m.center_radius = s.num("center_radius", m.center_radius);
    parse_dmbss(s.sub("dmbss"), "model.dmbss", m.dmbss);
    m.dmbss.c = m.c;  // the pyramid block always runs at the model width
    s.finish();
}

void parse_train(const json& j, TrainConfig& t) {
    Section s(j, "train");
    t.lr = s.num("lr", t.lr);
    t.weight_decay = s.num("weight_decay", t.weight_decay);
    t.epochs = s.integer("epochs", t.epochs);
    t.batch_size = s.integer("batch_size", t.batch_size);
    t.max_steps = s.integer("max_steps", t.max_steps);
    t.warmup_steps = s.integer("warmup_steps", t.warmup_steps);
    t.grad_clip = s.num("grad_clip", t.grad_clip);
    t.seed = s.uinteger("seed", t.seed);
    t.crop_t = s.integer("crop_t", t.crop_t);
    t.checkpoint_every = s.integer("checkpoint_every", t.checkpoint_every);
    t.log_every = s.integer("log_every", t.log_every);
    t.resume = s.str("resume", t.resume);
    s.finish();
}

void parse_eval(const json& j, EvalSection& e) {
    Section s(j, "eval");
    e.metric.tiou_thresholds = s.num_list("tiou_thresholds", e.metric.tiou_thresholds);
    e.metric.multi_label = s.boolean("multi_label", e.metric.multi_label);
    e.decode.score_thresh = s.num("score_thresh", e.decode.score_thresh);
    e.decode.pre_nms_topk = s.integer("pre_nms_topk", e.decode.pre_nms_topk);
    e.decode.nms_sigma = s.num("nms_sigma", e.decode.nms_sigma);
    e.decode.nms_min_score = s.num("nms_min_score", e.decode.nms_min_score);
    e.decode.max_dets = s.integer("max_dets", e.decode.max_dets);
    s.finish();
}

void parse_data(const json& j, DataConfig& d) {
    Section s(j, "data");
    d.train_dir = s.str("train_dir", d.train_dir);
    d.val_dir = s.str("val_dir", d.val_dir);
    s.finish();
}

void parse_synth(const json& j, SynthSection& sy) {
    Section s(j, "synth");
    sy.base.num_videos = s.integer("num_videos", sy.base.num_videos);
    sy.test_videos = s.integer("test_videos", sy.test_videos);
    sy.base.min_duration_s = s.num("min_duration_s", sy.base.min_duration_s);
    sy.base.max_duration_s = s.num("max_duration_s", sy.base.max_duration_s);
    sy.base.fps = s.num("fps", sy.base.fps);
    sy.base.channels = s.integer("channels", sy.base.channels);
    sy.base.num_classes = s.integer("num_classes", sy.base.num_classes);
    sy.base.min_instances = s.integer("min_instances", sy.base.min_instances);
    sy.base.max_instances = s.integer("max_instances", sy.base.max_instances);
    sy.base.noise_sigma = s.num("noise_sigma", sy.base.noise_sigma);
    sy.base.signal_shift = s.num("signal_shift", sy.base.signal_shift);
    sy.base.signal_amp = s.num("signal_amp", sy.base.signal_amp);
    sy.base.seed = s.uinteger("seed", sy.base.seed);
    s.finish();
}

void parse_ssta(const json& j, SstaSection& a) {
    Section s(j, "ssta");
    a.lambda = s.integer("lambda", a.lambda);
    a.insert_every = s.integer("insert_every", a.insert_every);
    a.n = s.integer("n", a.n);
    a.conv_k = s.integer("conv_k", a.conv_k);
    a.backbone_blocks = s.integer("backbone_blocks", a.backbone_blocks);
    a.backbone_hidden_mult = s.integer("backbone_hidden_mult", a.backbone_hidden_mult);
    a.backbone_seed = s.uinteger("backbone_seed", a.backbone_seed);
    s.finish();
}

}  // namespace

void TrainConfig::validate() const {
    if (lr <= 0) throw ConfigError("train.lr must be positive");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be nonnegative");
    if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (max_steps < -1 || max_steps == 0) throw ConfigError("train.max_steps must be -1 or positive");
    if (warmup_steps < -1) throw ConfigError("train.warmup_steps must be -1 (auto) or nonnegative");
    if (grad_clip < 0) throw ConfigError("train.grad_clip must be nonnegative");
    if (crop_t < 8) throw ConfigError("train.crop_t must be at least 8 frames");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be at least 1");
    if (log_every < 1) throw ConfigError("train.log_every must be at least 1");
}

void EvalSection::validate() const {
    metric.validate();
    if (decode.score_thresh < 0 || decode.score_thresh >= 1)
        throw ConfigError("eval.score_thresh must lie in [0, 1)");
    if (decode.pre_nms_topk < 1) throw ConfigError("eval.pre_nms_topk must be at least 1");
    if (decode.nms_sigma <= 0) throw ConfigError("eval.nms_sigma must be positive");
    if (decode.nms_min_score < 0) throw ConfigError("eval.nms_min_score must be nonnegative");
    if (decode.max_dets < 1) throw ConfigError("eval.max_dets must be at least 1");
}

void SynthSection::validate() const {
    base.validate();
    if (test_videos < 1) throw ConfigError("synth.test_videos must be at least 1");
}

void SstaSection::validate() const {
    if (lambda <= 1) throw ConfigError("ssta.lambda must exceed 1");
    if (insert_every < 1) throw ConfigError("ssta.insert_every must be at least 1");
    if (n < 1) throw ConfigError("ssta.n must be at least 1");
    if (conv_k < 1) throw ConfigError("ssta.conv_k must be at least 1");
    if (backbone_blocks < 1) throw ConfigError("ssta.backbone_blocks must be at least 1");
    if (backbone_hidden_mult < 1) throw ConfigError("ssta.backbone_hidden_mult must be at least 1");
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    eval.validate();
    synth.validate();
    ssta.validate();
}

RunConfig default_run_config() {
    RunConfig cfg;
    cfg.model.c_in = 16;
    cfg.model.c = 32;
    cfg.model.embed_layers = 2;
    cfg.model.levels = 4;
    cfg.model.num_classes = 5;
    cfg.model.trunk_layers = 1;
    cfg.model.head_kernel = 3;
    cfg.model.dmbss.c = cfg.model.c;
    cfg.model.dmbss.lambda = 2;
    cfg.model.dmbss.n = 4;
    cfg.model.dmbss.conv_k = 4;
    return cfg;
}

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg = default_run_config();
    Section root(j, "");
    cfg.mode = parse_mode(root.str("mode", "feature-input"));
    parse_model(root.sub("model"), cfg.model);
    parse_train(root.sub("train"), cfg.train);
    parse_eval(root.sub("eval"), cfg.eval);
    parse_data(root.sub("data"), cfg.data);
    parse_synth(root.sub("synth"), cfg.synth);
    parse_ssta(root.sub("ssta"), cfg.ssta);
    root.finish();
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["mode"] = cfg.mode == RunMode::e2e ? "e2e" : "feature-input";
    const DetectorConfig& m = cfg.model;
    j["model"] = {
        {"c_in", m.c_in},
        {"c", m.c},
        {"embed_layers", m.embed_layers},
        {"levels", m.levels},
        {"num_classes", m.num_classes},
        {"trunk_layers", m.trunk_layers},
        {"head_kernel", m.head_kernel},
        {"r0", m.r0},
        {"center_radius", m.center_radius},
        {"dmbss",
         {{"lambda", m.dmbss.lambda},
          {"n", m.dmbss.n},
          {"conv_k", m.dmbss.conv_k},
          {"share_params", m.dmbss.share_params},
          {"dual_branch", m.dmbss.dual_branch},
          {"diag_mask", m.dmbss.diag_mask},
          {"mask_mode", m.dmbss.mask_mode == MaskMode::semantic ? "semantic" : "literal"},
          {"scan", m.dmbss.scan == ScanKind::parallel ? "parallel" : "recurrent"}}},
    };
    const TrainConfig& t = cfg.train;
    j["train"] = {
        {"lr", t.lr},
        {"weight_decay", t.weight_decay},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"max_steps", t.max_steps},
        {"warmup_steps", t.warmup_steps},
        {"grad_clip", t.grad_clip},
        {"seed", t.seed},
        {"crop_t", t.crop_t},
        {"checkpoint_every", t.checkpoint_every},
        {"log_every", t.log_every},
        {"resume", t.resume},
    };
    j["eval"] = {
        {"tiou_thresholds", cfg.eval.metric.tiou_thresholds},
        {"multi_label", cfg.eval.metric.multi_label},
        {"score_thresh", cfg.eval.decode.score_thresh},
        {"pre_nms_topk", cfg.eval.decode.pre_nms_topk},
        {"nms_sigma", cfg.eval.decode.nms_sigma},
        {"nms_min_score", cfg.eval.decode.nms_min_score},
        {"max_dets", cfg.eval.decode.max_dets},
    };
    j["data"] = {{"train_dir", cfg.data.train_dir}, {"val_dir", cfg.data.val_dir}};
    const SynthConfig& sy = cfg.synth.base;
    j["synth"] = {
        {"num_videos", sy.num_videos},
        {"test_videos", cfg.synth.test_videos},
        {"min_duration_s", sy.min_duration_s},
        {"max_duration_s", sy.max_duration_s},
        {"fps", sy.fps},
        {"channels", sy.channels},
        {"num_classes", sy.num_classes},
        {"min_instances", sy.min_instances},
        {"max_instances", sy.max_instances},
        {"noise_sigma", sy.noise_sigma},
        {"signal_shift", sy.signal_shift},
        {"signal_amp", sy.signal_amp},
        {"seed", sy.seed},
    };
    const SstaSection& a = cfg.ssta;
    j["ssta"] = {
        {"lambda", a.lambda},
        {"insert_every", a.insert_every},
        {"n", a.n},
        {"conv_k", a.conv_k},
        {"backbone_blocks", a.backbone_blocks},
        {"backbone_hidden_mult", a.backbone_hidden_mult},
        {"backbone_seed", a.backbone_seed},
    };
    return j.dump(2);
}

}  // namespace ssmtad
