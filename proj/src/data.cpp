#include "ssmtad/data.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace ssmtad {

using nlohmann::json;

namespace {

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream f(path, mode);
    if (!f) throw IoError("cannot open for writing: " + path);
    return f;
}

std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream f(path, mode);
    if (!f) throw IoError("cannot open for reading: " + path);
    return f;
}

json parse_file(const std::string& path) {
    auto f = open_in(path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) throw IoError("malformed JSON in " + path);
    return j;
}

}  // namespace

std::vector<ActionInstance> AnnotationFile::all_gts() const {
    std::vector<ActionInstance> out;
    for (const auto& v : videos) out.insert(out.end(), v.annotations.begin(), v.annotations.end());
    return out;
}

std::map<std::string, double> AnnotationFile::durations() const {
    std::map<std::string, double> out;
    for (const auto& v : videos) out[v.id] = v.duration_s;
    return out;
}

void save_annotations(const std::string& path, const AnnotationFile& ann) {
    json vids = json::array();
    for (const auto& v : ann.videos) {
        json anns = json::array();
        for (const auto& a : v.annotations)
            anns.push_back({{"start_s", a.seg.start}, {"end_s", a.seg.end}, {"label", a.label}});
        vids.push_back({{"id", v.id},
                        {"duration_s", v.duration_s},
                        {"fps", v.fps},
                        {"annotations", std::move(anns)}});
    }
    json root = {{"version", 1}, {"videos", std::move(vids)}};
    open_out(path) << root.dump(2) << "\n";
}

AnnotationFile load_annotations(const std::string& path) {
    json j = parse_file(path);
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw IoError("annotation file version mismatch in " + path);
    AnnotationFile ann;
    for (const auto& jv : j.at("videos")) {
        VideoMeta v;
        v.id = jv.at("id").get<std::string>();
        v.duration_s = jv.at("duration_s").get<double>();
        v.fps = jv.at("fps").get<double>();
        for (const auto& ja : jv.at("annotations")) {
            ActionInstance a;
            a.video_id = v.id;
            a.seg.start = ja.at("start_s").get<double>();
            a.seg.end = ja.at("end_s").get<double>();
            a.label = ja.at("label").get<int>();
            if (!(a.seg.start < a.seg.end))
                throw IoError("degenerate annotation segment in " + path + " video " + v.id);
            v.annotations.push_back(std::move(a));
        }
        ann.videos.push_back(std::move(v));
    }
    return ann;
}

void save_features(const std::string& path, int64_t t, int64_t c, const std::vector<float>& data) {
    if (int64_t(data.size()) != t * c) throw ValueError("save_features: data size != t*c");
    auto f = open_out(path, std::ios::binary);
    f.write("MTAD", 4);
    auto put_u32 = [&](uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        f.write(reinterpret_cast<const char*>(b), 4);
    };
    put_u32(1);
    put_u32(static_cast<uint32_t>(t));
    put_u32(static_cast<uint32_t>(c));
    static_assert(sizeof(float) == 4);
    // assumes little-endian host, as does the rest of the toolchain
    f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 4));
    if (!f) throw IoError("short write to " + path);
}

void load_features(const std::string& path, int64_t& t, int64_t& c, std::vector<float>& data) {
    auto f = open_in(path, std::ios::binary);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "MTAD", 4) != 0) throw IoError("bad feature magic in " + path);
    auto get_u32 = [&]() {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    };
    uint32_t version = get_u32();
    if (version != 1) throw IoError("feature file version mismatch in " + path);
    t = get_u32();
    c = get_u32();
    if (!f || t < 1 || c < 1) throw IoError("bad feature header in " + path);
    data.assign(static_cast<size_t>(t * c), 0.0f);
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * 4));
    if (!f) throw IoError("truncated feature data in " + path);
}

void save_results(const std::string& path, const std::vector<ActionInstance>& preds) {
    json by_video = json::object();
    for (const auto& p : preds) {
        by_video[p.video_id].push_back(
            {{"segment", {p.seg.start, p.seg.end}}, {"label", p.label}, {"score", p.score}});
    }
    json root = {{"results", std::move(by_video)}};
    open_out(path) << root.dump(2) << "\n";
}

std::vector<ActionInstance> load_results(const std::string& path) {
    json j = parse_file(path);
    std::vector<ActionInstance> out;
    for (const auto& [vid, arr] : j.at("results").items()) {
        for (const auto& jp : arr) {
            ActionInstance p;
            p.video_id = vid;
            p.seg.start = jp.at("segment").at(0).get<double>();
            p.seg.end = jp.at("segment").at(1).get<double>();
            p.label = jp.at("label").get<int>();
            p.score = jp.at("score").get<double>();
            out.push_back(std::move(p));
        }
    }
    return out;
}

void save_metric_csv(const std::string& path, const std::vector<double>& thresholds,
                     const std::vector<double>& map_values) {
    if (thresholds.size() != map_values.size())
        throw ValueError("save_metric_csv: thresholds/values length mismatch");
    auto f = open_out(path);
    f << "threshold,mAP\n";
    char buf[64];
    for (size_t i = 0; i < thresholds.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.2f,%.6f\n", thresholds[i], map_values[i]);
        f << buf;
    }
}

void save_dataset(const std::string& out_dir, const SynthDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "features");
    AnnotationFile ann;
    for (const auto& v : ds.videos) {
        VideoMeta m;
        m.id = v.id;
        m.duration_s = v.duration_s;
        m.fps = v.fps;
        m.annotations = v.annotations;
        ann.videos.push_back(std::move(m));
        save_features((fs::path(out_dir) / "features" / (v.id + ".bin")).string(), v.t, v.c,
                      v.features);
    }
    save_annotations((fs::path(out_dir) / "annotations.json").string(), ann);
}

}  // namespace ssmtad
