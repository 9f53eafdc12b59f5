#include "mvcd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mvcd/distill.hpp"

namespace mvcd {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr_old > 0.0) || !(lr_incr > 0.0)) throw std::invalid_argument("train config: learning rates must be > 0");
  if (!(theta_low >= 0.0 && theta_low < theta_high && theta_high <= 1.0)) {
    throw std::invalid_argument("train config: need 0 <= theta_low < theta_high <= 1");
  }
  if (!(lambda >= 0.0)) throw std::invalid_argument("train config: lambda must be >= 0");
  if (k == 0 || kPoolSize % k != 0) {
    throw std::invalid_argument("train config: k must divide the pooled size " + std::to_string(kPoolSize));
  }
  if (lr_decay_every == 0) throw std::invalid_argument("train config: lr_decay_every must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train config: momentum must be in [0, 1)");
  if (!(lr_gamma > 0.0)) throw std::invalid_argument("train config: lr_gamma must be > 0");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("train config: grad_clip must be >= 0");
}

json train_config_to_json(const TrainConfig& c) {
  return {{"epochs_old", c.epochs_old},
          {"epochs_incr", c.epochs_incr},
          {"lr_old", c.lr_old},
          {"lr_incr", c.lr_incr},
          {"lr_decay_every", c.lr_decay_every},
          {"lr_gamma", c.lr_gamma},
          {"momentum", c.momentum},
          {"lambda", c.lambda},
          {"k", c.k},
          {"theta_high", c.theta_high},
          {"theta_low", c.theta_low},
          {"channel_threshold", c.channel_threshold},
          {"seed", c.seed},
          {"train_proposals", c.train_proposals},
          {"random_rois", c.random_rois},
          {"grad_clip", c.grad_clip},
          {"losses",
           {{"dout", c.losses.dout},
            {"dcc", c.losses.dcc},
            {"dpc", c.losses.dpc},
            {"dic", c.losses.dic},
            {"pseudo_labels", c.losses.pseudo_labels}}}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("train: expected a JSON object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs_old") c.epochs_old = value.get<std::size_t>();
    else if (key == "epochs_incr") c.epochs_incr = value.get<std::size_t>();
    else if (key == "lr_old") c.lr_old = value.get<double>();
    else if (key == "lr_incr") c.lr_incr = value.get<double>();
    else if (key == "lr_decay_every") c.lr_decay_every = value.get<std::size_t>();
    else if (key == "lr_gamma") c.lr_gamma = value.get<double>();
    else if (key == "momentum") c.momentum = value.get<double>();
    else if (key == "lambda") c.lambda = value.get<double>();
    else if (key == "k") c.k = value.get<std::size_t>();
    else if (key == "theta_high") c.theta_high = value.get<double>();
    else if (key == "theta_low") c.theta_low = value.get<double>();
    else if (key == "channel_threshold") c.channel_threshold = value.get<double>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "train_proposals") c.train_proposals = value.get<std::size_t>();
    else if (key == "random_rois") c.random_rois = value.get<std::size_t>();
    else if (key == "grad_clip") c.grad_clip = value.get<double>();
    else if (key == "losses") {
      if (!value.is_object()) throw std::invalid_argument("train.losses: expected a JSON object");
      for (const auto& [lk, lv] : value.items()) {
        if (lk == "dout") c.losses.dout = lv.get<bool>();
        else if (lk == "dcc") c.losses.dcc = lv.get<bool>();
        else if (lk == "dpc") c.losses.dpc = lv.get<bool>();
        else if (lk == "dic") c.losses.dic = lv.get<bool>();
        else if (lk == "pseudo_labels") c.losses.pseudo_labels = lv.get<bool>();
        else throw std::invalid_argument("train.losses: unknown key '" + lk + "'");
      }
    } else {
      throw std::invalid_argument("train: unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

double learning_rate(double base, std::size_t epoch, std::size_t decay_every, double gamma) {
  return base * std::pow(gamma, static_cast<double>(epoch / decay_every));
}

void sgd_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, double lr,
              double momentum, SgdState& state) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd_step: parameter/gradient count mismatch");
  if (state.velocity.empty()) {
    for (const Tensor* p : params) state.velocity.emplace_back(p->shape());
  }
  if (state.velocity.size() != params.size()) throw std::invalid_argument("sgd_step: state does not match params");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.velocity[i];
    if (g.shape() != p.shape() || m.shape() != p.shape()) {
      throw std::invalid_argument("sgd_step: shape mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t t = 0; t < p.size(); ++t) {
      m[t] = momentum * m[t] + g[t];
      p[t] -= lr * m[t];
    }
  }
}

double clip_gradients(DetectorParams& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : grads.tensors())
    for (double g : t->data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, t] : grads.tensors()) *t *= scale;
  }
  return norm;
}

void sgd_step(DetectorParams& params, const DetectorParams& grads, double lr, double momentum, SgdState& state) {
  std::vector<Tensor*> ps;
  std::vector<const Tensor*> gs;
  for (auto& [name, t] : params.tensors()) ps.push_back(t);
  for (const auto& [name, t] : grads.tensors()) gs.push_back(t);
  sgd_step(ps, gs, lr, momentum, state);
}

json EpochLog::to_json() const {
  return {{"epoch", epoch},         {"mean_frcnn", mean_frcnn}, {"mean_dout", mean_dout}, {"mean_dcc", mean_dcc},
          {"mean_dpc", mean_dpc},   {"mean_dic", mean_dic},     {"lr", lr}};
}

void write_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write log " + path.string());
  for (const EpochLog& e : log) out << e.to_json().dump() << "\n";
}

namespace {

std::vector<Box> training_rois(const std::vector<Annotation>& annotations, const std::vector<Proposal>& proposals,
                               const TrainConfig& cfg, std::mt19937_64& rng) {
  std::vector<Box> rois;
  for (const Annotation& a : annotations) rois.push_back(a.box);
  for (std::size_t i = 0; i < proposals.size() && i < cfg.train_proposals; ++i) rois.push_back(proposals[i].box);
  const double limit = static_cast<double>(kImageSize);
  std::uniform_real_distribution<double> size(8.0, 28.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < cfg.random_rois; ++i) {
    const double w = size(rng);
    const double h = size(rng);
    const double x = unit(rng) * (limit - w);
    const double y = unit(rng) * (limit - h);
    rois.push_back({x, y, x + w, y + h});
  }
  return rois;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("training produced a non-finite ") + what);
}

struct Accumulator {
  double frcnn = 0.0, dout = 0.0, dcc = 0.0, dpc = 0.0, dic = 0.0;
  std::size_t count = 0;

  void add(const StepLosses& s) {
    frcnn += s.frcnn;
    dout += s.dout;
    dcc += s.dcc;
    dpc += s.dpc;
    dic += s.dic;
    ++count;
  }
  EpochLog finish(std::size_t epoch, double lr) const {
    const double n = count ? static_cast<double>(count) : 1.0;
    return {epoch, frcnn / n, dout / n, dcc / n, dpc / n, dic / n, lr};
  }
};

std::vector<std::size_t> epoch_order(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::string> names_for(const Dataset& dataset, const std::vector<int>& ids) {
  std::vector<std::string> names;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= dataset.class_names.size()) {
      throw std::invalid_argument("class id " + std::to_string(id) + " not in dataset");
    }
    names.push_back(dataset.class_names[static_cast<std::size_t>(id)]);
  }
  return names;
}

}  // namespace

TrainResult train_old(const Dataset& dataset, const DataView& view, const TrainConfig& cfg) {
  cfg.validate();
  if (view.samples.empty()) throw std::invalid_argument("train_old: empty dataset view");
  TrainResult result{init_detector(view.classes, names_for(dataset, view.classes), cfg.seed), {}};
  DetectorParams& params = result.params;
  std::mt19937_64 rng(cfg.seed + 0x51ed27);
  SgdState state;

  for (std::size_t epoch = 0; epoch < cfg.epochs_old; ++epoch) {
    const double lr = learning_rate(cfg.lr_old, epoch, cfg.lr_decay_every, cfg.lr_gamma);
    Accumulator acc;
    for (std::size_t idx : epoch_order(view.samples.size(), rng)) {
      const Sample& sample = view.samples[idx];
      const Tensor& image = dataset.images[sample.index].pixels;
      const ImagePass pass = run_image(params, image);
      std::vector<RoiPass> rois;
      for (const Box& b : training_rois(sample.annotations, propose(pass), cfg, rng)) {
        rois.push_back(run_roi(params, pass, b));
      }
      const FrcnnLoss loss = frcnn_loss(params, pass, rois, sample.annotations);
      check_finite(loss.total, "detection loss");

      DetectorParams grads = params.zeros_like();
      Tensor d_backbone(pass.conv2.shape());
      for (std::size_t i = 0; i < rois.size(); ++i) backward_roi(params, rois[i], loss.roi_grads[i], grads, d_backbone);
      backward_image(params, pass, loss.d_objectness, loss.d_deltas, Tensor(), d_backbone, grads);
      clip_gradients(grads, cfg.grad_clip);
      sgd_step(params, grads, lr, cfg.momentum, state);

      StepLosses s;
      s.frcnn = s.total = loss.total;
      acc.add(s);
    }
    result.log.push_back(acc.finish(epoch + 1, lr));
  }
  return result;
}

std::vector<Annotation> pseudo_label_merge(const DetectorParams& old, const Tensor& image,
                                           const std::vector<Annotation>& gt_new, double conf, double nms_iou) {
  std::vector<Annotation> merged = gt_new;
  for (const Detection& d : detect(old, image, conf, nms_iou)) merged.push_back({d.box, d.class_id});
  return merged;
}

TeacherView prepare_teacher(const DetectorParams& old, const Tensor& image, const std::vector<Annotation>& gt_new,
                            const TrainConfig& cfg) {
  const ImagePass full = run_image(old, image);
  TeacherView t;
  t.pass.conv2 = full.conv2;
  t.pass.feature = full.feature;
  t.v = full.se.v;
  t.merged = cfg.losses.pseudo_labels ? pseudo_label_merge(old, image, gt_new) : gt_new;
  t.channels = select_important_channels(t.v, cfg.channel_threshold);
  t.points = select_points(spatial_attention(t.pass.feature), cfg.theta_high, cfg.theta_low);
  return t;
}

StepLosses incremental_gradients(const DetectorParams& incr, const DetectorParams& old, const TeacherView& teacher,
                                 const Tensor& image, const TrainConfig& cfg, std::mt19937_64& rng,
                                 DetectorParams& grads, bool include_frcnn) {
  const LossSwitches& on = cfg.losses;
  const ImagePass pass = run_image(incr, image);
  const std::vector<Box> boxes = training_rois(teacher.merged, propose(pass), cfg, rng);
  std::vector<RoiPass> rois;
  rois.reserve(boxes.size());
  for (const Box& b : boxes) rois.push_back(run_roi(incr, pass, b));

  StepLosses s;
  std::vector<RoiGrad> roi_grads(rois.size());
  Tensor d_objectness, d_deltas;
  if (include_frcnn) {
    FrcnnLoss loss = frcnn_loss(incr, pass, rois, teacher.merged);
    s.frcnn = loss.total;
    roi_grads = std::move(loss.roi_grads);
    d_objectness = std::move(loss.d_objectness);
    d_deltas = std::move(loss.d_deltas);
  }
  for (std::size_t i = 0; i < rois.size(); ++i) {
    if (roi_grads[i].d_cls.empty()) roi_grads[i].d_cls.assign(rois[i].cls.size(), 0.0);
    if (roi_grads[i].d_reg.empty()) roi_grads[i].d_reg.assign(rois[i].reg.size(), 0.0);
  }

  // Old-model head on the same boxes; shared by the output and instance terms.
  std::vector<RoiPass> old_rois;
  if (on.dout || on.dic) {
    const std::size_t needed = on.dout ? rois.size() : teacher.merged.size();
    for (std::size_t i = 0; i < needed; ++i) old_rois.push_back(run_roi(old, teacher.pass, boxes[i]));
  }

  if (on.dout && !rois.empty()) {
    const std::size_t n_cls = old.num_classes() + 1;
    const std::size_t n_reg = 4 * old.num_classes();
    Tensor cls({rois.size(), n_cls}), cls_old({rois.size(), n_cls});
    Tensor reg({rois.size(), n_reg}), reg_old({rois.size(), n_reg});
    for (std::size_t i = 0; i < rois.size(); ++i) {
      std::copy_n(rois[i].cls.begin(), n_cls, cls.slice(i).begin());
      std::copy_n(old_rois[i].cls.begin(), n_cls, cls_old.slice(i).begin());
      std::copy_n(rois[i].reg.begin(), n_reg, reg.slice(i).begin());
      std::copy_n(old_rois[i].reg.begin(), n_reg, reg_old.slice(i).begin());
    }
    const OutputLossResult d = output_distillation_loss(cls, cls_old, reg, reg_old);
    s.dout = d.value;
    for (std::size_t i = 0; i < rois.size(); ++i) {
      for (std::size_t j = 0; j < n_cls; ++j) roi_grads[i].d_cls[j] += d.grad_cls.at(i, j);
      for (std::size_t j = 0; j < n_reg; ++j) roi_grads[i].d_reg[j] += d.grad_reg.at(i, j);
    }
  }

  if (on.dic && !teacher.merged.empty()) {
    // The first merged.size() RoIs are the merged annotation boxes.
    const double inv = 1.0 / static_cast<double>(teacher.merged.size());
    for (std::size_t i = 0; i < teacher.merged.size(); ++i) {
      LossResult r = instance_correlation_loss(rois[i].instance, old_rois[i].instance, cfg.k);
      s.dic += r.value * inv;
      r.grad *= cfg.lambda * inv;
      roi_grads[i].d_instance = std::move(r.grad);
    }
  }

  Tensor d_feature(pass.feature.shape());
  if (on.dcc) {
    LossResult r = channel_correlation_loss(pass.feature, teacher.pass.feature, teacher.channels);
    s.dcc = r.value;
    r.grad *= cfg.lambda;
    d_feature += r.grad;
  }
  if (on.dpc) {
    LossResult r = point_correlation_loss(pass.feature, teacher.pass.feature, teacher.points);
    s.dpc = r.value;
    r.grad *= cfg.lambda;
    d_feature += r.grad;
  }
  s.total = total_loss(s.frcnn, s.dout, s.dcc, s.dpc, s.dic, cfg.lambda);
  check_finite(s.total, "incremental loss");

  Tensor d_backbone(pass.conv2.shape());
  for (std::size_t i = 0; i < rois.size(); ++i) backward_roi(incr, rois[i], roi_grads[i], grads, d_backbone);
  backward_image(incr, pass, d_objectness, d_deltas, d_feature, d_backbone, grads);
  return s;
}

TrainResult train_incremental(const DetectorParams& old, const Dataset& dataset, const DataView& view,
                              const std::vector<int>& all_classes, const TrainConfig& cfg) {
  cfg.validate();
  for (int id : old.class_ids) {
    if (std::find(all_classes.begin(), all_classes.end(), id) == all_classes.end()) {
      throw std::invalid_argument("train_incremental: old class " + std::to_string(id) + " missing from class list");
    }
  }
  TrainResult result{expand_classes(old, all_classes, names_for(dataset, all_classes), cfg.seed), {}};
  DetectorParams& params = result.params;

  std::vector<TeacherView> teachers;
  teachers.reserve(view.samples.size());
  for (const Sample& s : view.samples) {
    teachers.push_back(prepare_teacher(old, dataset.images[s.index].pixels, s.annotations, cfg));
  }

  std::mt19937_64 rng(cfg.seed + 0x1ac3e7);
  SgdState state;
  for (std::size_t epoch = 0; epoch < cfg.epochs_incr; ++epoch) {
    const double lr = learning_rate(cfg.lr_incr, epoch, cfg.lr_decay_every, cfg.lr_gamma);
    Accumulator acc;
    for (std::size_t idx : epoch_order(view.samples.size(), rng)) {
      const Tensor& image = dataset.images[view.samples[idx].index].pixels;
      DetectorParams grads = params.zeros_like();
      acc.add(incremental_gradients(params, old, teachers[idx], image, cfg, rng, grads));
      clip_gradients(grads, cfg.grad_clip);
      sgd_step(params, grads, lr, cfg.momentum, state);
    }
    result.log.push_back(acc.finish(epoch + 1, lr));
  }
  return result;
}

}  // namespace mvcd
