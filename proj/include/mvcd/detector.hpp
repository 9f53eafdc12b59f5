#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvcd/attention.hpp"
#include "mvcd/box.hpp"
#include "mvcd/tensor.hpp"

namespace mvcd {

// Micro two-stage detector geometry.
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kStemChannels = 8;
inline constexpr std::size_t kFeatureChannels = 16;
inline constexpr std::size_t kStride = 4;
inline constexpr std::size_t kFeatureSize = kImageSize / kStride;
inline constexpr std::size_t kPoolSize = 4;
inline constexpr std::size_t kHiddenUnits = 64;
inline constexpr double kAnchorSize = 16.0;
inline constexpr std::size_t kMaxProposals = 32;

/// A labelled box; class_id is the dataset-wide class id.
struct Annotation {
  Box box;
  int class_id = 0;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

/**
 * All learnable tensors of the detector plus class metadata.
 *
 * Head column 0 is background; column i (1-based) predicts class_ids[i-1].
 * The regressor holds four outputs per foreground class in the same order.
 */
struct DetectorParams {
  std::vector<int> class_ids;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;

  Tensor conv1_w, conv1_b;  // backbone stage 1: 3 -> 8, stride 2
  Tensor conv2_w, conv2_b;  // backbone stage 2: 8 -> 16, stride 2
  Tensor rpn_w, rpn_b;      // RPN 3x3 conv 16 -> 16
  SEWeights se;
  Tensor obj_w, obj_b;  // 1x1 objectness
  Tensor box_w, box_b;  // 1x1 anchor deltas
  Tensor head_conv_w, head_conv_b;
  Tensor fc_w, fc_b;
  Tensor cls_w, cls_b;
  Tensor reg_w, reg_b;

  std::size_t num_classes() const { return class_ids.size(); }
  /// Head column of a dataset class id, or -1.
  int column_of(int class_id) const;

  /// Every tensor with a stable name, in serialization order.
  std::vector<std::pair<std::string, Tensor*>> tensors();
  std::vector<std::pair<std::string, const Tensor*>> tensors() const;

  /// Same shapes and metadata, all values zero.
  DetectorParams zeros_like() const;
};

/// He-normal convolution/dense weights, small-normal heads, zero biases.
DetectorParams init_detector(std::vector<int> class_ids, std::vector<std::string> class_names, std::uint64_t seed);

/// Every weight and bias zero.
DetectorParams zero_detector(std::vector<int> class_ids, std::vector<std::string> class_names);

/// Widens the classifier/regressor to the full class list. Old columns are
/// copied verbatim, new ones drawn from N(0, 0.01^2). Old ids must come first
/// and in their original order, which is what this function produces.
DetectorParams expand_classes(const DetectorParams& old, const std::vector<int>& all_class_ids,
                              const std::vector<std::string>& all_class_names, std::uint64_t seed);

/// FNV-1a over class metadata and every parameter byte.
std::uint64_t params_hash(const DetectorParams& params);

// ---------------------------------------------------------------------------
// Forward pass

/// Backbone and RPN activations for one image, kept for backward.
struct ImagePass {
  Tensor image;
  Tensor conv1_pre, conv1;
  Tensor conv2_pre, conv2;  // conv2 is the backbone feature that RoIs pool from
  Tensor rpn_pre, rpn;
  SECache se;
  Tensor feature;     // post-SE RPN feature
  Tensor objectness;  // H x W logits
  Tensor deltas;      // 4 x H x W
};

/// Head activations for one region of interest.
struct RoiPass {
  Box box;
  Tensor pooled;
  std::vector<std::size_t> argmax;
  Tensor instance_pre;
  Tensor instance;  // pooled feature after the head convolution
  std::vector<double> hidden_pre;
  std::vector<double> hidden;
  std::vector<double> cls;
  std::vector<double> reg;
};

ImagePass run_image(const DetectorParams& params, const Tensor& image);
RoiPass run_roi(const DetectorParams& params, const ImagePass& pass, const Box& box);

Box anchor_box(std::size_t row, std::size_t col);

struct Proposal {
  Box box;
  double objectness = 0.0;
};
/// Anchors with sigmoid objectness > 0.5, refined, clipped, top kMaxProposals.
std::vector<Proposal> propose(const ImagePass& pass);

struct FeatureBundle {
  Tensor image_feature;
  ChannelAttentionVector v;
  std::vector<Tensor> instance_features;
};

struct ForwardResult {
  FeatureBundle features;
  std::vector<Box> proposals;
  Tensor cls_logits;   // proposals x (num_classes + 1)
  Tensor reg_outputs;  // proposals x (4 * num_classes)
};

ForwardResult forward(const DetectorParams& params, const Tensor& image);

struct RoiPoolResult {
  Tensor out;
  std::vector<std::size_t> argmax;  // flat input index per output cell
};

/// Max pooling of a box (image coordinates) into an out_h x out_w grid.
RoiPoolResult roi_pool_indexed(const Tensor& feature, const Box& box, std::size_t out_h, std::size_t out_w,
                               std::size_t stride = kStride);
Tensor roi_pool(const Tensor& feature, const Box& box, std::size_t out_h, std::size_t out_w,
                std::size_t stride = kStride);

// ---------------------------------------------------------------------------
// Losses and backward

double smooth_l1(double x);
double smooth_l1_grad(double x);

/// Gradient seeds for one RoI; any member may be left empty.
struct RoiGrad {
  std::vector<double> d_cls;
  std::vector<double> d_reg;
  Tensor d_instance;
};

struct FrcnnLoss {
  double total = 0.0;
  double rpn_cls = 0.0;
  double rpn_box = 0.0;
  double head_cls = 0.0;
  double head_box = 0.0;
  Tensor d_objectness;
  Tensor d_deltas;
  std::vector<RoiGrad> roi_grads;
};

/**
 * Standard two-stage objective.
 *
 * RPN: BCE on anchors (IoU >= 0.5 positive, < 0.3 negative, rest ignored)
 * and smooth-L1 on positive-anchor deltas. Head: cross-entropy with each RoI
 * labelled by its best-IoU annotation at >= 0.5 (background otherwise) and
 * smooth-L1 on the class-specific deltas of foreground RoIs. Each term is
 * averaged over its contributing samples.
 */
FrcnnLoss frcnn_loss(const DetectorParams& params, const ImagePass& pass, const std::vector<RoiPass>& rois,
                     const std::vector<Annotation>& annotations);

/// Accumulates parameter gradients of one RoI and returns nothing; the
/// gradient into the backbone feature is added to d_backbone.
void backward_roi(const DetectorParams& params, const RoiPass& roi, const RoiGrad& grad, DetectorParams& grads,
                  Tensor& d_backbone);

/// Backward through the RPN and backbone. d_feature_extra is an additional
/// gradient on the post-SE feature (may be empty).
void backward_image(const DetectorParams& params, const ImagePass& pass, const Tensor& d_objectness,
                    const Tensor& d_deltas, const Tensor& d_feature_extra, const Tensor& d_backbone,
                    DetectorParams& grads);

// ---------------------------------------------------------------------------
// Inference

/// Greedy NMS; returns kept indices. Order is score descending, ties by index.
std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_threshold);

std::vector<Detection> detections_from(const DetectorParams& params, const std::vector<Box>& proposals,
                                       const Tensor& cls_logits, const Tensor& reg_outputs, double conf = 0.5,
                                       double nms_iou = 0.3);

std::vector<Detection> detect(const DetectorParams& params, const Tensor& image, double conf = 0.5,
                              double nms_iou = 0.3);

std::vector<double> softmax(const std::vector<double>& logits);

}  // namespace mvcd
