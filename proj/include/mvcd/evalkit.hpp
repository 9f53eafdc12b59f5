#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvcd/box.hpp"
#include "mvcd/datagen.hpp"
#include "mvcd/detector.hpp"

namespace mvcd {

/// A detection tagged with the image it came from.
struct ScoredBox {
  int image_id = 0;
  Box box;
  double score = 0.0;
};

struct GroundTruthBox {
  int image_id = 0;
  Box box;
};

/**
 * All-point interpolated AP for one class.
 *
 * Detections are matched greedily in descending score (stable on input
 * order). A detection is a true positive when an unmatched ground truth in
 * the same image has IoU >= iou_threshold; among candidates the highest IoU
 * wins, then the lowest ground-truth index. With no ground truth the AP is 0.
 */
double average_precision(const std::vector<ScoredBox>& detections, const std::vector<GroundTruthBox>& ground_truth,
                         double iou_threshold = 0.5);

/// Stability/plasticity summary against an up-bound model. Values carry the
/// units of the inputs (percent for published tables).
struct SpmapResult {
  double stability = 0.0;
  double plasticity = 0.0;
  double map_dif = 0.0;
  double spmap = 0.0;
};

/// The first n_old entries are old classes, the rest new. Negative
/// components are kept as is.
SpmapResult spmap(const std::vector<double>& up, const std::vector<double>& inc, std::size_t n_old);

struct EvalReport {
  std::string units = "fraction";  // "fraction" for [0,1] APs, "percent" for tables
  std::vector<std::string> class_names;
  std::vector<double> per_class_ap;
  double map = 0.0;
  // Present only for up-bound comparisons.
  bool has_spmap = false;
  std::vector<double> up;
  std::vector<double> inc;
  std::size_t n_old = 0;
  SpmapResult components;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Builds an EvalReport from up-bound and incremental AP vectors.
EvalReport spmap_report(const std::vector<std::string>& class_names, const std::vector<double>& up,
                        const std::vector<double>& inc, std::size_t n_old, const std::string& units = "percent");

/// Detection record used by result files.
struct DetectionRecord {
  int image_id = 0;
  int class_id = 0;
  Box box;
  double score = 0.0;
};
struct GroundTruthRecord {
  int image_id = 0;
  int class_id = 0;
  Box box;
};

/// Per-class AP and mAP over the listed classes.
EvalReport evaluate_records(const std::vector<DetectionRecord>& detections,
                            const std::vector<GroundTruthRecord>& ground_truth, const std::vector<int>& classes,
                            const std::vector<std::string>& class_names, double iou_threshold = 0.5);

/// Runs detect() on every image of the view and scores it against the
/// view's annotations.
EvalReport evaluate_model(const DetectorParams& params, const Dataset& dataset, const DataView& view,
                          const std::vector<int>& classes, double conf = 0.5, double nms_iou = 0.3);

std::vector<DetectionRecord> run_detections(const DetectorParams& params, const Dataset& dataset,
                                            const DataView& view, double conf = 0.5, double nms_iou = 0.3);
std::vector<GroundTruthRecord> view_ground_truth(const DataView& view, const Dataset& dataset);

// Result files: JSON arrays of {image_id, class, box: [x1,y1,x2,y2], score}
// and {image_id, class, box}.
nlohmann::json detections_to_json(const std::vector<DetectionRecord>& records);
std::vector<DetectionRecord> detections_from_json(const nlohmann::json& j);
nlohmann::json ground_truth_to_json(const std::vector<GroundTruthRecord>& records);
std::vector<GroundTruthRecord> ground_truth_from_json(const nlohmann::json& j);

/// CSV with header `class,up,inc`, values in percent.
struct ApTable {
  std::vector<std::string> classes;
  std::vector<double> up;
  std::vector<double> inc;
};
ApTable parse_ap_table(const std::string& csv);
ApTable read_ap_table(const std::filesystem::path& path);

}  // namespace mvcd
