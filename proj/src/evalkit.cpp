#include "mvcd/evalkit.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mvcd {

double average_precision(const std::vector<ScoredBox>& detections, const std::vector<GroundTruthBox>& ground_truth,
                         double iou_threshold) {
  if (ground_truth.empty()) return 0.0;

  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::vector<bool> matched(ground_truth.size(), false);
  std::vector<double> precision;
  std::vector<double> recall;
  precision.reserve(order.size());
  recall.reserve(order.size());
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const ScoredBox& det = detections[order[rank]];
    std::size_t best = ground_truth.size();
    double best_iou = -1.0;
    for (std::size_t g = 0; g < ground_truth.size(); ++g) {
      if (matched[g] || ground_truth[g].image_id != det.image_id) continue;
      const double overlap = iou(det.box, ground_truth[g].box);
      if (overlap >= iou_threshold && overlap > best_iou) {
        best = g;
        best_iou = overlap;
      }
    }
    if (best < ground_truth.size()) {
      matched[best] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(ground_truth.size()));
  }

  // Precision envelope, then area over the recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

namespace {

double mean_difference(const std::vector<double>& up, const std::vector<double>& inc, std::size_t begin,
                       std::size_t end) {
  double sum = 0.0;
  for (std::size_t i = begin; i < end; ++i) sum += up[i] - inc[i];
  return sum / static_cast<double>(end - begin);
}

std::string format_number(double v) {
  std::ostringstream out;
  out << std::setprecision(12) << v;
  return out.str();
}

}  // namespace

SpmapResult spmap(const std::vector<double>& up, const std::vector<double>& inc, std::size_t n_old) {
  if (up.size() != inc.size()) throw std::invalid_argument("spmap: UP and INC differ in length");
  if (n_old < 1 || n_old >= up.size())
    throw std::invalid_argument("spmap: need 1 <= N_old < N (N_old=" + std::to_string(n_old) +
                                ", N=" + std::to_string(up.size()) + ")");
  SpmapResult r;
  r.stability = mean_difference(up, inc, 0, n_old);
  r.plasticity = mean_difference(up, inc, n_old, up.size());
  r.map_dif = mean_difference(up, inc, 0, up.size());
  r.spmap = ((r.stability + r.plasticity) / 2.0 + r.map_dif) / 2.0;
  return r;
}

EvalReport spmap_report(const std::vector<std::string>& class_names, const std::vector<double>& up,
                        const std::vector<double>& inc, std::size_t n_old, const std::string& units) {
  EvalReport report;
  report.components = spmap(up, inc, n_old);
  if (class_names.size() != inc.size()) throw std::invalid_argument("spmap_report: class name count mismatch");
  report.units = units;
  report.class_names = class_names;
  report.per_class_ap = inc;
  report.map = std::accumulate(inc.begin(), inc.end(), 0.0) / static_cast<double>(inc.size());
  report.has_spmap = true;
  report.up = up;
  report.inc = inc;
  report.n_old = n_old;
  return report;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["units"] = units;
  nlohmann::json aps = nlohmann::json::object();
  for (std::size_t i = 0; i < per_class_ap.size(); ++i) aps[class_names[i]] = per_class_ap[i];
  j["per_class_ap"] = aps;
  j["mAP"] = map;
  if (has_spmap) {
    j["up"] = up;
    j["inc"] = inc;
    j["n_old"] = n_old;
    j["stability"] = components.stability;
    j["plasticity"] = components.plasticity;
    j["map_dif"] = components.map_dif;
    j["spmap"] = components.spmap;
  }
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "key,value\n";
  for (std::size_t i = 0; i < per_class_ap.size(); ++i)
    out << "ap:" << class_names[i] << ',' << format_number(per_class_ap[i]) << '\n';
  out << "mAP," << format_number(map) << '\n';
  if (has_spmap) {
    out << "stability," << format_number(components.stability) << '\n';
    out << "plasticity," << format_number(components.plasticity) << '\n';
    out << "map_dif," << format_number(components.map_dif) << '\n';
    out << "spmap," << format_number(components.spmap) << '\n';
  }
  return out.str();
}

EvalReport evaluate_records(const std::vector<DetectionRecord>& detections,
                            const std::vector<GroundTruthRecord>& ground_truth, const std::vector<int>& classes,
                            const std::vector<std::string>& class_names, double iou_threshold) {
  if (classes.size() != class_names.size()) throw std::invalid_argument("evaluate_records: class name count mismatch");
  EvalReport report;
  report.class_names = class_names;
  for (int c : classes) {
    std::vector<ScoredBox> dets;
    std::vector<GroundTruthBox> gts;
    for (const auto& d : detections)
      if (d.class_id == c) dets.push_back({d.image_id, d.box, d.score});
    for (const auto& g : ground_truth)
      if (g.class_id == c) gts.push_back({g.image_id, g.box});
    report.per_class_ap.push_back(average_precision(dets, gts, iou_threshold));
  }
  if (!classes.empty())
    report.map = std::accumulate(report.per_class_ap.begin(), report.per_class_ap.end(), 0.0) /
                 static_cast<double>(classes.size());
  return report;
}

std::vector<DetectionRecord> run_detections(const DetectorParams& params, const Dataset& dataset,
                                            const DataView& view, double conf, double nms_iou) {
  std::vector<DetectionRecord> out;
  for (const auto& sample : view.samples) {
    const Image& image = dataset.images.at(sample.index);
    for (const auto& d : detect(params, image.pixels, conf, nms_iou)) out.push_back({image.id, d.class_id, d.box, d.score});
  }
  return out;
}

std::vector<GroundTruthRecord> view_ground_truth(const DataView& view, const Dataset& dataset) {
  std::vector<GroundTruthRecord> out;
  for (const auto& sample : view.samples) {
    const int id = dataset.images.at(sample.index).id;
    for (const auto& a : sample.annotations) out.push_back({id, a.class_id, a.box});
  }
  return out;
}

EvalReport evaluate_model(const DetectorParams& params, const Dataset& dataset, const DataView& view,
                          const std::vector<int>& classes, double conf, double nms_iou) {
  std::vector<std::string> names;
  for (int c : classes) names.push_back(dataset.class_names.at(static_cast<std::size_t>(c)));
  return evaluate_records(run_detections(params, dataset, view, conf, nms_iou), view_ground_truth(view, dataset),
                          classes, names);
}

namespace {

nlohmann::json box_json(const Box& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

Box box_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [x1, y1, x2, y2]");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw std::invalid_argument("degenerate box in result file");
  return b;
}

void expect_keys(const nlohmann::json& entry, std::initializer_list<const char*> keys) {
  if (!entry.is_object()) throw std::invalid_argument("result entry must be an object");
  for (const char* k : keys)
    if (!entry.contains(k)) throw std::invalid_argument(std::string("result entry lacks '") + k + "'");
  if (entry.size() != keys.size()) throw std::invalid_argument("result entry has unknown keys");
}

}  // namespace

nlohmann::json detections_to_json(const std::vector<DetectionRecord>& records) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records)
    j.push_back({{"image_id", r.image_id}, {"class", r.class_id}, {"box", box_json(r.box)}, {"score", r.score}});
  return j;
}

std::vector<DetectionRecord> detections_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("detections file must hold a JSON array");
  std::vector<DetectionRecord> out;
  for (const auto& e : j) {
    expect_keys(e, {"image_id", "class", "box", "score"});
    out.push_back({e["image_id"].get<int>(), e["class"].get<int>(), box_from(e["box"]), e["score"].get<double>()});
  }
  return out;
}

nlohmann::json ground_truth_to_json(const std::vector<GroundTruthRecord>& records) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records) j.push_back({{"image_id", r.image_id}, {"class", r.class_id}, {"box", box_json(r.box)}});
  return j;
}

std::vector<GroundTruthRecord> ground_truth_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("ground-truth file must hold a JSON array");
  std::vector<GroundTruthRecord> out;
  for (const auto& e : j) {
    expect_keys(e, {"image_id", "class", "box"});
    out.push_back({e["image_id"].get<int>(), e["class"].get<int>(), box_from(e["box"])});
  }
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_number(const std::string& text, std::size_t line_no) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size())
    throw std::invalid_argument("AP table line " + std::to_string(line_no) + ": not a number: '" + text + "'");
  return v;
}

}  // namespace

ApTable parse_ap_table(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  ApTable table;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(trim(line));
    if (!header_seen) {
      if (fields != std::vector<std::string>{"class", "up", "inc"})
        throw std::invalid_argument("AP table header must be 'class,up,inc'");
      header_seen = true;
      continue;
    }
    if (fields.size() != 3)
      throw std::invalid_argument("AP table line " + std::to_string(line_no) + ": expected 3 fields");
    table.classes.push_back(fields[0]);
    table.up.push_back(parse_number(fields[1], line_no));
    table.inc.push_back(parse_number(fields[2], line_no));
  }
  if (!header_seen) throw std::invalid_argument("AP table is empty");
  return table;
}

ApTable read_ap_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read AP table " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_ap_table(buffer.str());
}

}  // namespace mvcd
