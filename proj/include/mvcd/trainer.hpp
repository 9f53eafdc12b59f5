#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvcd/attention.hpp"
#include "mvcd/datagen.hpp"
#include "mvcd/detector.hpp"

namespace mvcd {

/// Which incremental terms are active. Fine-tuning turns all of them off.
struct LossSwitches {
  bool dout = true;
  bool dcc = true;
  bool dpc = true;
  bool dic = true;
  bool pseudo_labels = true;
};

struct TrainConfig {
  std::size_t epochs_old = 30;
  std::size_t epochs_incr = 15;
  double lr_old = 0.01;
  double lr_incr = 0.001;
  std::size_t lr_decay_every = 10;
  double lr_gamma = 0.1;
  double momentum = 0.9;
  double lambda = 1.0;
  std::size_t k = 2;
  double theta_high = 0.8;
  double theta_low = 0.1;
  double channel_threshold = 0.5;
  std::uint64_t seed = 1;
  std::size_t train_proposals = 16;  // proposals used as training RoIs per image
  std::size_t random_rois = 8;       // extra random RoIs per image
  double grad_clip = 20.0;           // global L2 norm cap per step; 0 disables
  LossSwitches losses;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
/// Rejects unknown keys; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Step schedule: base * gamma^(epoch / decay_every), epochs counted from 0.
double learning_rate(double base, std::size_t epoch, std::size_t decay_every, double gamma);

/// Rescales grads so their global L2 norm is at most max_norm (0 = no cap).
/// Returns the norm before clipping.
double clip_gradients(DetectorParams& grads, double max_norm);

/// Momentum buffers, one per parameter tensor.
struct SgdState {
  std::vector<Tensor> velocity;
};

/// m <- momentum * m + g; p <- p - lr * m.
void sgd_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, double lr,
              double momentum, SgdState& state);
void sgd_step(DetectorParams& params, const DetectorParams& grads, double lr, double momentum, SgdState& state);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_frcnn = 0.0;
  double mean_dout = 0.0;
  double mean_dcc = 0.0;
  double mean_dpc = 0.0;
  double mean_dic = 0.0;
  double lr = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  DetectorParams params;
  std::vector<EpochLog> log;
};

void write_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

/// SGD on the detection loss over the old-class view.
TrainResult train_old(const Dataset& dataset, const DataView& view, const TrainConfig& cfg);

/// Old-model detections (class-wise NMS at the given thresholds) appended to
/// the new-class ground truth.
std::vector<Annotation> pseudo_label_merge(const DetectorParams& old, const Tensor& image,
                                           const std::vector<Annotation>& gt_new, double conf = 0.5,
                                           double nms_iou = 0.3);

/// What the frozen old model contributes for one image. Computed once per
/// image because the teacher never changes.
struct TeacherView {
  ImagePass pass;  // only conv2 and feature are populated
  ChannelAttentionVector v;
  std::vector<Annotation> merged;
  std::vector<std::size_t> channels;
  PointSelection points;
};

TeacherView prepare_teacher(const DetectorParams& old, const Tensor& image, const std::vector<Annotation>& gt_new,
                            const TrainConfig& cfg);

struct StepLosses {
  double frcnn = 0.0;
  double dout = 0.0;
  double dcc = 0.0;
  double dpc = 0.0;
  double dic = 0.0;
  double total = 0.0;
};

/// Loss and parameter gradient of one incremental step. With include_frcnn
/// unset only the distillation terms contribute.
StepLosses incremental_gradients(const DetectorParams& incr, const DetectorParams& old, const TeacherView& teacher,
                                 const Tensor& image, const TrainConfig& cfg, std::mt19937_64& rng,
                                 DetectorParams& grads, bool include_frcnn = true);

/// Trains a widened copy of `old` on new-class data under the dual-network
/// objective. `old` is only read.
TrainResult train_incremental(const DetectorParams& old, const Dataset& dataset, const DataView& view,
                              const std::vector<int>& all_classes, const TrainConfig& cfg);

}  // namespace mvcd
