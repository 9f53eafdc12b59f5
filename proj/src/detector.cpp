#include "mvcd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <stdexcept>

namespace mvcd {

namespace {

// ---------------------------------------------------------------------------
// Convolution kernels. Weights are O x C x K x K, inputs C x H x W.

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Output positions o with 0 <= o*stride + offset < limit, as a half-open range.
std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t offset, std::size_t limit, std::size_t stride,
                                                std::size_t out) {
  std::ptrdiff_t lo = 0;
  if (offset < 0) lo = (-offset + static_cast<std::ptrdiff_t>(stride) - 1) / static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(limit) - 1 - offset);
  hi = hi < 0 ? 0 : hi / static_cast<std::ptrdiff_t>(stride) + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

Tensor conv2d(const Tensor& in, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t cin = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t ho = conv_out(h, k, stride, pad), wo = conv_out(wd, k, stride, pad);
  Tensor out({cout, ho, wo});
  const double* src = in.data().data();
  const double* wp = w.data().data();
  double* dst = out.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    double* oplane = dst + o * ho * wo;
    std::fill(oplane, oplane + ho * wo, b[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* iplane = src + c * h * wd;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t oy_off = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
        const auto [y0, y1] = valid_range(oy_off, h, stride, ho);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = wp[((o * cin + c) * k + ky) * k + kx];
          const std::ptrdiff_t ox_off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
          const auto [x0, x1] = valid_range(ox_off, wd, stride, wo);
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const double* irow = iplane + (oy * stride + oy_off) * wd;
            double* orow = oplane + oy * wo;
            for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += wv * irow[ox * stride + ox_off];
          }
        }
      }
    }
  }
  return out;
}

// Accumulates dw/db; returns d_in unless skip_input is set.
Tensor conv2d_backward(const Tensor& in, const Tensor& w, const Tensor& d_out, std::size_t stride, std::size_t pad,
                       Tensor& dw, Tensor& db, bool skip_input = false) {
  const std::size_t cin = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t ho = d_out.dim(1), wo = d_out.dim(2);
  Tensor d_in(skip_input ? Shape{} : in.shape());
  const double* src = in.data().data();
  const double* wp = w.data().data();
  const double* g = d_out.data().data();
  double* dwp = dw.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    const double* gplane = g + o * ho * wo;
    double bsum = 0.0;
    for (std::size_t i = 0; i < ho * wo; ++i) bsum += gplane[i];
    db[o] += bsum;
    for (std::size_t c = 0; c < cin; ++c) {
      const double* iplane = src + c * h * wd;
      double* dplane = skip_input ? nullptr : d_in.data().data() + c * h * wd;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t oy_off = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
        const auto [y0, y1] = valid_range(oy_off, h, stride, ho);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((o * cin + c) * k + ky) * k + kx;
          const double wv = wp[widx];
          const std::ptrdiff_t ox_off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
          const auto [x0, x1] = valid_range(ox_off, wd, stride, wo);
          double acc = 0.0;
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const std::size_t irow = (oy * stride + oy_off) * wd;
            const double* grow = gplane + oy * wo;
            for (std::size_t ox = x0; ox < x1; ++ox) {
              const std::size_t ii = irow + ox * stride + ox_off;
              acc += grow[ox] * iplane[ii];
              if (dplane) dplane[ii] += wv * grow[ox];
            }
          }
          dwp[widx] += acc;
        }
      }
    }
  }
  return d_in;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = std::max(v, 0.0);
  return y;
}

void relu_backward_inplace(const Tensor& pre, Tensor& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (pre[i] <= 0.0) grad[i] = 0.0;
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor he_tensor(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return normal_tensor(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

void validate_metadata(const std::vector<int>& ids, const std::vector<std::string>& names) {
  if (ids.empty()) throw std::invalid_argument("detector: at least one class is required");
  if (ids.size() != names.size()) throw std::invalid_argument("detector: class ids and names differ in length");
  std::vector<int> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("detector: duplicate class id");
  }
}

DetectorParams shaped_zeros(std::vector<int> ids, std::vector<std::string> names) {
  validate_metadata(ids, names);
  const std::size_t n = ids.size();
  DetectorParams p;
  p.class_ids = std::move(ids);
  p.class_names = std::move(names);
  p.conv1_w = Tensor({kStemChannels, kImageChannels, 3, 3});
  p.conv1_b = Tensor({kStemChannels});
  p.conv2_w = Tensor({kFeatureChannels, kStemChannels, 3, 3});
  p.conv2_b = Tensor({kFeatureChannels});
  p.rpn_w = Tensor({kFeatureChannels, kFeatureChannels, 3, 3});
  p.rpn_b = Tensor({kFeatureChannels});
  p.se = SEWeights::zeros(kFeatureChannels);
  p.obj_w = Tensor({1, kFeatureChannels, 1, 1});
  p.obj_b = Tensor({1});
  p.box_w = Tensor({4, kFeatureChannels, 1, 1});
  p.box_b = Tensor({4});
  p.head_conv_w = Tensor({kFeatureChannels, kFeatureChannels, 3, 3});
  p.head_conv_b = Tensor({kFeatureChannels});
  p.fc_w = Tensor({kHiddenUnits, kFeatureChannels * kPoolSize * kPoolSize});
  p.fc_b = Tensor({kHiddenUnits});
  p.cls_w = Tensor({n + 1, kHiddenUnits});
  p.cls_b = Tensor({n + 1});
  p.reg_w = Tensor({4 * n, kHiddenUnits});
  p.reg_b = Tensor({4 * n});
  return p;
}

}  // namespace

int DetectorParams::column_of(int class_id) const {
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    if (class_ids[i] == class_id) return static_cast<int>(i) + 1;
  }
  return -1;
}

std::vector<std::pair<std::string, Tensor*>> DetectorParams::tensors() {
  return {{"conv1_w", &conv1_w},         {"conv1_b", &conv1_b},         {"conv2_w", &conv2_w},
          {"conv2_b", &conv2_b},         {"rpn_w", &rpn_w},             {"rpn_b", &rpn_b},
          {"se_w1", &se.w1},             {"se_b1", &se.b1},             {"se_w2", &se.w2},
          {"se_b2", &se.b2},             {"obj_w", &obj_w},             {"obj_b", &obj_b},
          {"box_w", &box_w},             {"box_b", &box_b},             {"head_conv_w", &head_conv_w},
          {"head_conv_b", &head_conv_b}, {"fc_w", &fc_w},               {"fc_b", &fc_b},
          {"cls_w", &cls_w},             {"cls_b", &cls_b},             {"reg_w", &reg_w},
          {"reg_b", &reg_b}};
}

std::vector<std::pair<std::string, const Tensor*>> DetectorParams::tensors() const {
  auto mut = const_cast<DetectorParams*>(this)->tensors();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

DetectorParams DetectorParams::zeros_like() const {
  DetectorParams z = *this;
  for (auto& [name, t] : z.tensors()) t->fill(0.0);
  return z;
}

DetectorParams zero_detector(std::vector<int> class_ids, std::vector<std::string> class_names) {
  return shaped_zeros(std::move(class_ids), std::move(class_names));
}

DetectorParams init_detector(std::vector<int> class_ids, std::vector<std::string> class_names, std::uint64_t seed) {
  DetectorParams p = shaped_zeros(std::move(class_ids), std::move(class_names));
  p.seed = seed;
  std::mt19937_64 rng(seed);
  const std::size_t n = p.num_classes();
  p.conv1_w = he_tensor(p.conv1_w.shape(), kImageChannels * 9, rng);
  p.conv2_w = he_tensor(p.conv2_w.shape(), kStemChannels * 9, rng);
  p.rpn_w = he_tensor(p.rpn_w.shape(), kFeatureChannels * 9, rng);
  p.se.w1 = he_tensor(p.se.w1.shape(), kFeatureChannels, rng);
  p.se.w2 = he_tensor(p.se.w2.shape(), p.se.hidden(), rng);
  p.obj_w = normal_tensor(p.obj_w.shape(), 0.01, rng);
  p.box_w = normal_tensor(p.box_w.shape(), 0.001, rng);
  p.head_conv_w = he_tensor(p.head_conv_w.shape(), kFeatureChannels * 9, rng);
  p.fc_w = he_tensor(p.fc_w.shape(), kFeatureChannels * kPoolSize * kPoolSize, rng);
  p.cls_w = normal_tensor({n + 1, kHiddenUnits}, 0.01, rng);
  p.reg_w = normal_tensor({4 * n, kHiddenUnits}, 0.001, rng);
  return p;
}

DetectorParams expand_classes(const DetectorParams& old, const std::vector<int>& all_class_ids,
                              const std::vector<std::string>& all_class_names, std::uint64_t seed) {
  if (all_class_ids.size() != all_class_names.size()) {
    throw std::invalid_argument("expand_classes: class ids and names differ in length");
  }
  std::vector<int> ids = old.class_ids;
  std::vector<std::string> names = old.class_names;
  for (int id : old.class_ids) {
    if (std::find(all_class_ids.begin(), all_class_ids.end(), id) == all_class_ids.end()) {
      throw std::invalid_argument("expand_classes: old class " + std::to_string(id) + " missing from class list");
    }
  }
  for (std::size_t i = 0; i < all_class_ids.size(); ++i) {
    if (old.column_of(all_class_ids[i]) < 0) {
      ids.push_back(all_class_ids[i]);
      names.push_back(all_class_names[i]);
    }
  }
  validate_metadata(ids, names);

  DetectorParams p = old;
  p.class_ids = ids;
  p.class_names = names;
  p.seed = seed;
  const std::size_t n_old = old.num_classes();
  const std::size_t n = ids.size();
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> dist(0.0, 0.01);

  p.cls_w = Tensor({n + 1, kHiddenUnits});
  p.cls_b = Tensor({n + 1});
  std::copy(old.cls_w.data().begin(), old.cls_w.data().end(), p.cls_w.data().begin());
  std::copy(old.cls_b.data().begin(), old.cls_b.data().end(), p.cls_b.data().begin());
  for (std::size_t i = (n_old + 1) * kHiddenUnits; i < p.cls_w.size(); ++i) p.cls_w[i] = dist(rng);

  p.reg_w = Tensor({4 * n, kHiddenUnits});
  p.reg_b = Tensor({4 * n});
  std::copy(old.reg_w.data().begin(), old.reg_w.data().end(), p.reg_w.data().begin());
  std::copy(old.reg_b.data().begin(), old.reg_b.data().end(), p.reg_b.data().begin());
  for (std::size_t i = 4 * n_old * kHiddenUnits; i < p.reg_w.size(); ++i) p.reg_w[i] = dist(rng);
  return p;
}

std::uint64_t params_hash(const DetectorParams& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (int id : params.class_ids) mix(&id, sizeof id);
  for (const auto& name : params.class_names) mix(name.data(), name.size());
  for (const auto& [name, t] : params.tensors()) {
    mix(name.data(), name.size());
    for (std::size_t d : t->shape()) mix(&d, sizeof d);
    mix(t->data().data(), t->size() * sizeof(double));
  }
  return h;
}

// ---------------------------------------------------------------------------

ImagePass run_image(const DetectorParams& params, const Tensor& image) {
  if (image.shape() != Shape{kImageChannels, kImageSize, kImageSize}) {
    throw std::invalid_argument("run_image: expected a 3x64x64 image, got " + shape_string(image.shape()));
  }
  ImagePass p;
  p.image = image;
  p.conv1_pre = conv2d(image, params.conv1_w, params.conv1_b, 2, 1);
  p.conv1 = relu(p.conv1_pre);
  p.conv2_pre = conv2d(p.conv1, params.conv2_w, params.conv2_b, 2, 1);
  p.conv2 = relu(p.conv2_pre);
  p.rpn_pre = conv2d(p.conv2, params.rpn_w, params.rpn_b, 1, 1);
  p.rpn = relu(p.rpn_pre);
  SEOutput se = se_forward(p.rpn, params.se);
  p.feature = std::move(se.reweighted);
  p.se = std::move(se.cache);
  p.objectness = conv2d(p.feature, params.obj_w, params.obj_b, 1, 0).reshaped({kFeatureSize, kFeatureSize});
  p.deltas = conv2d(p.feature, params.box_w, params.box_b, 1, 0);
  return p;
}

RoiPoolResult roi_pool_indexed(const Tensor& feature, const Box& box, std::size_t out_h, std::size_t out_w,
                               std::size_t stride) {
  if (feature.rank() != 3 || out_h == 0 || out_w == 0 || stride == 0) {
    throw std::invalid_argument("roi_pool: expected C x H x W feature and a nonzero output grid");
  }
  const std::size_t h = feature.dim(1), w = feature.dim(2);
  const double s = static_cast<double>(stride);
  const auto clampi = [](double v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(hi)));
  };
  const std::size_t x0 = clampi(std::floor(box.x1 / s), w);
  const std::size_t y0 = clampi(std::floor(box.y1 / s), h);
  const std::size_t x1 = clampi(std::ceil(box.x2 / s), w);
  const std::size_t y1 = clampi(std::ceil(box.y2 / s), h);
  if (!box.valid() || x1 <= x0 || y1 <= y0) throw std::invalid_argument("roi_pool: degenerate box after clipping");

  const std::size_t rh = y1 - y0, rw = x1 - x0;
  RoiPoolResult r{Tensor({feature.dim(0), out_h, out_w}), {}};
  r.argmax.resize(r.out.size());
  for (std::size_t c = 0; c < feature.dim(0); ++c) {
    for (std::size_t by = 0; by < out_h; ++by) {
      const std::size_t ys = y0 + (by * rh) / out_h;
      const std::size_t ye = y0 + ((by + 1) * rh + out_h - 1) / out_h;
      for (std::size_t bx = 0; bx < out_w; ++bx) {
        const std::size_t xs = x0 + (bx * rw) / out_w;
        const std::size_t xe = x0 + ((bx + 1) * rw + out_w - 1) / out_w;
        std::size_t best = (c * h + ys) * w + xs;
        for (std::size_t y = ys; y < ye; ++y) {
          for (std::size_t x = xs; x < xe; ++x) {
            const std::size_t i = (c * h + y) * w + x;
            if (feature[i] > feature[best]) best = i;
          }
        }
        const std::size_t o = (c * out_h + by) * out_w + bx;
        r.out[o] = feature[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

Tensor roi_pool(const Tensor& feature, const Box& box, std::size_t out_h, std::size_t out_w, std::size_t stride) {
  return roi_pool_indexed(feature, box, out_h, out_w, stride).out;
}

RoiPass run_roi(const DetectorParams& params, const ImagePass& pass, const Box& box) {
  RoiPass r;
  r.box = box;
  RoiPoolResult pooled = roi_pool_indexed(pass.conv2, box, kPoolSize, kPoolSize);
  r.pooled = std::move(pooled.out);
  r.argmax = std::move(pooled.argmax);
  r.instance_pre = conv2d(r.pooled, params.head_conv_w, params.head_conv_b, 1, 1);
  r.instance = relu(r.instance_pre);

  const std::size_t in = r.instance.size();
  r.hidden_pre.resize(kHiddenUnits);
  r.hidden.resize(kHiddenUnits);
  for (std::size_t j = 0; j < kHiddenUnits; ++j) {
    const double* wrow = params.fc_w.data().data() + j * in;
    double z = params.fc_b[j];
    for (std::size_t i = 0; i < in; ++i) z += wrow[i] * r.instance[i];
    r.hidden_pre[j] = z;
    r.hidden[j] = std::max(z, 0.0);
  }
  auto dense = [&r](const Tensor& w, const Tensor& b, std::vector<double>& out) {
    out.resize(w.dim(0));
    for (std::size_t j = 0; j < w.dim(0); ++j) {
      const double* wrow = w.data().data() + j * kHiddenUnits;
      double z = b[j];
      for (std::size_t i = 0; i < kHiddenUnits; ++i) z += wrow[i] * r.hidden[i];
      out[j] = z;
    }
  };
  dense(params.cls_w, params.cls_b, r.cls);
  dense(params.reg_w, params.reg_b, r.reg);
  return r;
}

Box anchor_box(std::size_t row, std::size_t col) {
  const double cx = (static_cast<double>(col) + 0.5) * kStride;
  const double cy = (static_cast<double>(row) + 0.5) * kStride;
  const double half = kAnchorSize * 0.5;
  return Box{cx - half, cy - half, cx + half, cy + half};
}

std::vector<Proposal> propose(const ImagePass& pass) {
  struct Candidate {
    double score;
    std::size_t index;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < pass.objectness.size(); ++i) {
    const double s = sigmoid(pass.objectness[i]);
    if (s > 0.5) cands.push_back({s, i});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  std::vector<Proposal> out;
  const double limit = static_cast<double>(kImageSize);
  for (const Candidate& c : cands) {
    if (out.size() == kMaxProposals) break;
    const std::size_t row = c.index / kFeatureSize;
    const std::size_t col = c.index % kFeatureSize;
    const std::array<double, 4> d{pass.deltas.at(0, row, col), pass.deltas.at(1, row, col),
                                  pass.deltas.at(2, row, col), pass.deltas.at(3, row, col)};
    const Box b = clip_box(apply_deltas(anchor_box(row, col), d), limit, limit);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    out.push_back({b, c.score});
  }
  return out;
}

ForwardResult forward(const DetectorParams& params, const Tensor& image) {
  const ImagePass pass = run_image(params, image);
  ForwardResult out;
  out.features.image_feature = pass.feature;
  out.features.v = pass.se.v;
  const std::vector<Proposal> props = propose(pass);
  const std::size_t n = params.num_classes();
  out.cls_logits = Tensor({props.size(), n + 1});
  out.reg_outputs = Tensor({props.size(), 4 * n});
  for (std::size_t i = 0; i < props.size(); ++i) {
    RoiPass r = run_roi(params, pass, props[i].box);
    std::copy(r.cls.begin(), r.cls.end(), out.cls_logits.slice(i).begin());
    std::copy(r.reg.begin(), r.reg.end(), out.reg_outputs.slice(i).begin());
    out.features.instance_features.push_back(std::move(r.instance));
    out.proposals.push_back(props[i].box);
  }
  return out;
}

// ---------------------------------------------------------------------------

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) { return std::abs(x) < 1.0 ? x : sign_of(x); }

std::vector<double> softmax(const std::vector<double>& logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

FrcnnLoss frcnn_loss(const DetectorParams& params, const ImagePass& pass, const std::vector<RoiPass>& rois,
                     const std::vector<Annotation>& annotations) {
  std::vector<int> columns;
  columns.reserve(annotations.size());
  for (const Annotation& a : annotations) {
    const int col = params.column_of(a.class_id);
    if (col < 0) throw std::invalid_argument("frcnn_loss: annotation class " + std::to_string(a.class_id) +
                                             " is not predicted by this model");
    columns.push_back(col);
  }

  FrcnnLoss loss;
  loss.d_objectness = Tensor(pass.objectness.shape());
  loss.d_deltas = Tensor(pass.deltas.shape());

  // RPN anchors.
  struct Labelled {
    std::size_t index;
    double target;
    int gt;
  };
  std::vector<Labelled> labelled;
  for (std::size_t r = 0; r < kFeatureSize; ++r) {
    for (std::size_t c = 0; c < kFeatureSize; ++c) {
      const Box a = anchor_box(r, c);
      double best = 0.0;
      int best_gt = -1;
      for (std::size_t g = 0; g < annotations.size(); ++g) {
        const double v = iou(a, annotations[g].box);
        if (v > best) {
          best = v;
          best_gt = static_cast<int>(g);
        }
      }
      const std::size_t idx = r * kFeatureSize + c;
      if (best >= 0.5) {
        labelled.push_back({idx, 1.0, best_gt});
      } else if (best < 0.3) {
        labelled.push_back({idx, 0.0, -1});
      }
    }
  }
  std::size_t positives = 0;
  for (const Labelled& l : labelled) positives += l.target > 0.0;
  if (!labelled.empty()) {
    const double inv = 1.0 / static_cast<double>(labelled.size());
    for (const Labelled& l : labelled) {
      const double x = pass.objectness[l.index];
      loss.rpn_cls += (softplus(x) - l.target * x) * inv;
      loss.d_objectness[l.index] = (sigmoid(x) - l.target) * inv;
    }
  }
  if (positives > 0) {
    const double inv = 1.0 / static_cast<double>(positives);
    for (const Labelled& l : labelled) {
      if (l.target <= 0.0) continue;
      const std::size_t r = l.index / kFeatureSize, c = l.index % kFeatureSize;
      const auto t = box_deltas(anchor_box(r, c), annotations[static_cast<std::size_t>(l.gt)].box);
      for (std::size_t k = 0; k < 4; ++k) {
        const double diff = pass.deltas.at(k, r, c) - t[k];
        loss.rpn_box += smooth_l1(diff) * inv;
        loss.d_deltas.at(k, r, c) = smooth_l1_grad(diff) * inv;
      }
    }
  }

  // Detection head.
  loss.roi_grads.resize(rois.size());
  std::vector<int> roi_gt(rois.size(), -1);
  std::size_t foreground = 0;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    double best = 0.0;
    for (std::size_t g = 0; g < annotations.size(); ++g) {
      const double v = iou(rois[i].box, annotations[g].box);
      if (v > best) {
        best = v;
        roi_gt[i] = static_cast<int>(g);
      }
    }
    if (best < 0.5) roi_gt[i] = -1;
    foreground += roi_gt[i] >= 0;
  }
  if (!rois.empty()) {
    const double inv = 1.0 / static_cast<double>(rois.size());
    const double inv_fg = foreground ? 1.0 / static_cast<double>(foreground) : 0.0;
    for (std::size_t i = 0; i < rois.size(); ++i) {
      const RoiPass& roi = rois[i];
      RoiGrad& g = loss.roi_grads[i];
      const std::size_t label = roi_gt[i] >= 0 ? static_cast<std::size_t>(columns[static_cast<std::size_t>(roi_gt[i])]) : 0;
      std::vector<double> p = softmax(roi.cls);
      loss.head_cls += -std::log(std::max(p[label], 1e-300)) * inv;
      g.d_cls = p;
      g.d_cls[label] -= 1.0;
      for (double& v : g.d_cls) v *= inv;

      g.d_reg.assign(roi.reg.size(), 0.0);
      if (label > 0) {
        const auto t = box_deltas(roi.box, annotations[static_cast<std::size_t>(roi_gt[i])].box);
        const std::size_t base = 4 * (label - 1);
        for (std::size_t k = 0; k < 4; ++k) {
          const double diff = roi.reg[base + k] - t[k];
          loss.head_box += smooth_l1(diff) * inv_fg;
          g.d_reg[base + k] = smooth_l1_grad(diff) * inv_fg;
        }
      }
    }
  }
  loss.total = loss.rpn_cls + loss.rpn_box + loss.head_cls + loss.head_box;
  return loss;
}

void backward_roi(const DetectorParams& params, const RoiPass& roi, const RoiGrad& grad, DetectorParams& grads,
                  Tensor& d_backbone) {
  std::vector<double> d_hidden(kHiddenUnits, 0.0);
  auto dense_back = [&](const Tensor& w, const std::vector<double>& d_out, Tensor& dw, Tensor& db) {
    for (std::size_t j = 0; j < d_out.size(); ++j) {
      const double g = d_out[j];
      if (g == 0.0) continue;
      db[j] += g;
      double* dwrow = dw.data().data() + j * kHiddenUnits;
      const double* wrow = w.data().data() + j * kHiddenUnits;
      for (std::size_t i = 0; i < kHiddenUnits; ++i) {
        dwrow[i] += g * roi.hidden[i];
        d_hidden[i] += g * wrow[i];
      }
    }
  };
  if (!grad.d_cls.empty()) dense_back(params.cls_w, grad.d_cls, grads.cls_w, grads.cls_b);
  if (!grad.d_reg.empty()) dense_back(params.reg_w, grad.d_reg, grads.reg_w, grads.reg_b);

  Tensor d_instance = grad.d_instance.empty() ? Tensor(roi.instance.shape()) : grad.d_instance;
  const std::size_t in = roi.instance.size();
  for (std::size_t j = 0; j < kHiddenUnits; ++j) {
    if (roi.hidden_pre[j] <= 0.0 || d_hidden[j] == 0.0) continue;
    const double g = d_hidden[j];
    grads.fc_b[j] += g;
    double* dwrow = grads.fc_w.data().data() + j * in;
    const double* wrow = params.fc_w.data().data() + j * in;
    for (std::size_t i = 0; i < in; ++i) {
      dwrow[i] += g * roi.instance[i];
      d_instance[i] += g * wrow[i];
    }
  }
  relu_backward_inplace(roi.instance_pre, d_instance);
  const Tensor d_pooled =
      conv2d_backward(roi.pooled, params.head_conv_w, d_instance, 1, 1, grads.head_conv_w, grads.head_conv_b);
  for (std::size_t i = 0; i < d_pooled.size(); ++i) d_backbone[roi.argmax[i]] += d_pooled[i];
}

void backward_image(const DetectorParams& params, const ImagePass& pass, const Tensor& d_objectness,
                    const Tensor& d_deltas, const Tensor& d_feature_extra, const Tensor& d_backbone,
                    DetectorParams& grads) {
  Tensor d_feature = d_feature_extra.empty() ? Tensor(pass.feature.shape()) : d_feature_extra;
  if (!d_objectness.empty()) {
    d_feature += conv2d_backward(pass.feature, params.obj_w,
                                 d_objectness.reshaped({1, kFeatureSize, kFeatureSize}), 1, 0, grads.obj_w,
                                 grads.obj_b);
  }
  if (!d_deltas.empty()) {
    d_feature += conv2d_backward(pass.feature, params.box_w, d_deltas, 1, 0, grads.box_w, grads.box_b);
  }
  Tensor d_rpn = se_backward(pass.rpn, params.se, pass.se, d_feature, grads.se);
  relu_backward_inplace(pass.rpn_pre, d_rpn);
  Tensor d_conv2 = conv2d_backward(pass.conv2, params.rpn_w, d_rpn, 1, 1, grads.rpn_w, grads.rpn_b);
  if (!d_backbone.empty()) d_conv2 += d_backbone;
  relu_backward_inplace(pass.conv2_pre, d_conv2);
  Tensor d_conv1 = conv2d_backward(pass.conv1, params.conv2_w, d_conv2, 2, 1, grads.conv2_w, grads.conv2_b);
  relu_backward_inplace(pass.conv1_pre, d_conv1);
  conv2d_backward(pass.image, params.conv1_w, d_conv1, 2, 1, grads.conv1_w, grads.conv1_b, true);
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(boxes[i], boxes[k]) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

std::vector<Detection> detections_from(const DetectorParams& params, const std::vector<Box>& proposals,
                                       const Tensor& cls_logits, const Tensor& reg_outputs, double conf,
                                       double nms_iou) {
  const std::size_t n = params.num_classes();
  const double limit = static_cast<double>(kImageSize);
  // Candidates per head column, in proposal order.
  std::vector<std::vector<Box>> boxes(n + 1);
  std::vector<std::vector<double>> scores(n + 1);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    auto row = cls_logits.slice(i);
    const std::vector<double> p = softmax(std::vector<double>(row.begin(), row.end()));
    for (std::size_t c = 1; c <= n; ++c) {
      if (p[c] < conf) continue;
      const std::size_t base = 4 * (c - 1);
      const std::array<double, 4> d{reg_outputs.at(i, base), reg_outputs.at(i, base + 1),
                                    reg_outputs.at(i, base + 2), reg_outputs.at(i, base + 3)};
      const Box b = clip_box(apply_deltas(proposals[i], d), limit, limit);
      if (!b.valid()) continue;
      boxes[c].push_back(b);
      scores[c].push_back(p[c]);
    }
  }
  std::vector<Detection> out;
  for (std::size_t c = 1; c <= n; ++c) {
    for (std::size_t k : nms(boxes[c], scores[c], nms_iou)) {
      out.push_back({boxes[c][k], params.class_ids[c - 1], scores[c][k]});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

std::vector<Detection> detect(const DetectorParams& params, const Tensor& image, double conf, double nms_iou) {
  const ForwardResult f = forward(params, image);
  return detections_from(params, f.proposals, f.cls_logits, f.reg_outputs, conf, nms_iou);
}

}  // namespace mvcd
