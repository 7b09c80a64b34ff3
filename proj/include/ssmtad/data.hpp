#pragma once

#include <map>
#include <string>
#include <vector>

#include "ssmtad/eval.hpp"
#include "ssmtad/synth.hpp"

namespace ssmtad {

// Annotation JSON: {"version":1,"videos":[{"id","duration_s","fps",
//   "annotations":[{"start_s","end_s","label"}]}]}
struct VideoMeta {
    std::string id;
    double duration_s = 0;
    double fps = 0;
    std::vector<ActionInstance> annotations;
};

struct AnnotationFile {
    std::vector<VideoMeta> videos;
    std::vector<ActionInstance> all_gts() const;
    std::map<std::string, double> durations() const;
};

void save_annotations(const std::string& path, const AnnotationFile& ann);
AnnotationFile load_annotations(const std::string& path);

// Feature binary: magic "MTAD", u32 version, u32 t, u32 c, then t*c
// little-endian f32, time-major.
void save_features(const std::string& path, int64_t t, int64_t c, const std::vector<float>& data);
void load_features(const std::string& path, int64_t& t, int64_t& c, std::vector<float>& data);

// Results JSON: {"results": {video_id: [{"segment":[s,e],"label":int,"score":float}]}}
void save_results(const std::string& path, const std::vector<ActionInstance>& preds);
std::vector<ActionInstance> load_results(const std::string& path);

// CSV with a "threshold,mAP" header and one row per threshold
void save_metric_csv(const std::string& path, const std::vector<double>& thresholds,
                     const std::vector<double>& map_values);

// writes the dataset as annotation JSON + features/<id>.bin under out_dir
void save_dataset(const std::string& out_dir, const SynthDataset& ds);

}  // namespace ssmtad
