/*
 * Copyright 2026 The uwkd Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "uwkd/config.hpp"
#include "uwkd/data.hpp"
#include "uwkd/error.hpp"
#include "uwkd/laplace.hpp"
#include "uwkd/metrics.hpp"
#include "uwkd/network.hpp"
#include "uwkd/numerics.hpp"

namespace uwkd {

struct LossAndGradient {
  double value = 0.0;
  Vector grad;  // d value / d logits
};

/// Softmax cross-entropy; gradient softmax(z) - onehot(label).
inline LossAndGradient ce_loss(std::span<const double> logits, int label) {
  require(label >= 0 && static_cast<std::size_t>(label) < logits.size(), ErrorKind::LabelOutOfRange,
          "label " + std::to_string(label) + " with " + std::to_string(logits.size()) + " classes");
  const auto y = static_cast<std::size_t>(label);
  LossAndGradient out;
  out.value = -log_softmax(logits)[y];
  out.grad = softmax(logits);
  out.grad[y] -= 1.0;
  return out;
}

/*
 * KL(softmax(teacher / T) || softmax(student / T)), scaled by T^2 unless
 * `temp_squared` is off. The gradient is T^2 * (q_s - q_t) / T.
 */
inline LossAndGradient kd_loss(std::span<const double> student_logits,
                               std::span<const double> teacher_logits, double temp,
                               bool temp_squared = true) {
  require(student_logits.size() == teacher_logits.size(), ErrorKind::DimMismatch,
          "kd_loss: student has " + std::to_string(student_logits.size()) + " logits, teacher " +
              std::to_string(teacher_logits.size()));
  require(temp > 0.0, ErrorKind::InvalidHyperparameter, "kd_loss: temperature must be > 0");
  const Vector log_qt = log_softmax(teacher_logits, temp);
  const Vector log_qs = log_softmax(student_logits, temp);
  const double scale = temp_squared ? temp * temp : 1.0;
  LossAndGradient out;
  out.grad.resize(student_logits.size());
  double kl = 0.0;
  for (std::size_t k = 0; k < log_qt.size(); ++k) {
    const double qt = std::exp(log_qt[k]);
    if (qt > 0.0) kl += qt * (log_qt[k] - log_qs[k]);
    out.grad[k] = scale * (std::exp(log_qs[k]) - qt) / temp;
  }
  out.value = scale * std::max(kl, 0.0);
  return out;
}

/// exp(beta * cm^alpha) before clamping.
inline double margin_weight_uncapped(double cm, double beta, double alpha) {
  require(beta >= 0.0, ErrorKind::InvalidHyperparameter, "beta must be >= 0");
  require(alpha > 0.0, ErrorKind::InvalidHyperparameter, "alpha must be > 0");
  return std::exp(beta * std::pow(cm, alpha));
}

/*
 * Margin reweighting: weight 1 when the aux prediction is right, otherwise
 * exp(beta * cm(p_aux)^alpha) clamped to [1, weight_cap]. With
 * `gated == false` the exponential applies regardless of correctness.
 */
inline double margin_weight(std::span<const double> p_aux, int y_aux, int y, double beta,
                            double alpha, double weight_cap = 100.0, bool gated = true) {
  const double cm = confidence_margin(p_aux);
  require(weight_cap >= 1.0, ErrorKind::InvalidHyperparameter, "weight cap must be >= 1");
  if (gated && y_aux == y) return 1.0;
  return std::clamp(margin_weight_uncapped(cm, beta, alpha), 1.0, weight_cap);
}

inline double student_loss(double ce, double kd, double wt, const TrainingConfig& cfg) {
  require(wt >= 1.0, ErrorKind::InvalidHyperparameter, "sample weight must be >= 1");
  if (cfg.blend_mode == BlendMode::Alg2Additive) return ce + wt * kd;
  return (1.0 - cfg.lambda) * ce + cfg.lambda * wt * kd;
}

// D_w entry: example index plus its current loss weight.
struct WeightedExample {
  std::size_t index = 0;
  double wt = 1.0;
};

// Per-epoch training diagnostics.
struct EpochMetrics {
  std::size_t epoch = 0;
  bool aux_refreshed = false;
  std::size_t weights_updated = 0;
  double mean_weight = 1.0;
  std::array<std::size_t, 7> weight_histogram{};  // [1,2) [2,4) ... [64,inf)
  double train_loss = 0.0;
  std::optional<double> average_accuracy;
  std::optional<double> worst_group_accuracy;
};

inline std::size_t weight_bin(double w) {
  std::size_t b = 0;
  for (double edge = 2.0; b < 6 && w >= edge; edge *= 2.0) ++b;
  return b;
}

inline std::string history_to_csv(const std::vector<EpochMetrics>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,average_accuracy,worst_group_accuracy,mean_weight,aux_refreshed,"
        "weights_updated,w_1_2,w_2_4,w_4_8,w_8_16,w_16_32,w_32_64,w_64_inf\n";
  auto num = [](std::optional<double> v) { return v ? nlohmann::json(*v).dump() : std::string(); };
  for (const auto& m : history) {
    os << m.epoch << ',' << nlohmann::json(m.train_loss).dump() << ',' << num(m.average_accuracy)
       << ',' << num(m.worst_group_accuracy) << ',' << nlohmann::json(m.mean_weight).dump() << ','
       << (m.aux_refreshed ? 1 : 0) << ',' << m.weights_updated;
    for (auto c : m.weight_histogram) os << ',' << c;
    os << '\n';
  }
  return os.str();
}

struct DistillResult {
  Mlp student;
  std::optional<AuxHead> aux;
  std::vector<EpochMetrics> history;
  std::vector<double> final_weights;
};

// Independent random streams, all derived from the run's root seed.
namespace stream {
inline constexpr std::uint64_t kTeacherInit = 1;
inline constexpr std::uint64_t kTeacherShuffle = 2;
inline constexpr std::uint64_t kStudentInit = 3;
inline constexpr std::uint64_t kStudentShuffle = 4;
inline constexpr std::uint64_t kAuxInit = 5;
inline constexpr std::uint64_t kAuxTrain = 6;
inline constexpr std::uint64_t kMonteCarlo = 7;
inline constexpr std::uint64_t kProbes = 8;
}  // namespace stream

namespace detail {

inline void require_nonempty(const Dataset& data, const char* what) {
  require(!data.empty(), ErrorKind::EmptyDataset, std::string(what) + ": empty dataset");
}

// One minibatch step on sum_i loss_i / |batch|; returns the mean loss.
template <typename LossFn>
double minibatch_step(Mlp& net, const Dataset& data, std::span<const std::size_t> batch,
                      OptimizerState& opt, LossFn&& loss_fn) {
  auto grads = MlpGradients::zeros_like(net);
  double total = 0.0;
  for (std::size_t i : batch) {
    const auto fr = forward(net, data[i].features);
    const auto lg = loss_fn(i, fr.logits);
    total += lg.value;
    accumulate_backward(net, fr.trace, lg.grad, grads);
  }
  grads.scale(1.0 / static_cast<double>(batch.size()));
  const auto params = net.parameters();
  const auto views = grads.views();
  optimizer_step(params, views, opt);
  return total / static_cast<double>(batch.size());
}

inline Matrix layer_features(const Mlp& net, const Dataset& data, std::size_t depth) {
  Matrix feats(data.size(), net.width_at(depth));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto fr = forward(net, data[i].features);
    const auto& phi = early_features(fr.trace, depth);
    std::copy(phi.begin(), phi.end(), feats.row(i).begin());
  }
  return feats;
}

}  // namespace detail

/// Cross-entropy-only training of the (deeper) teacher network.
inline Mlp train_teacher(const Dataset& train, const TrainingConfig& cfg) {
  detail::require_nonempty(train, "train_teacher");
  const RngStream root(cfg.seed);
  auto init = root.split(stream::kTeacherInit);
  auto shuffle = root.split(stream::kTeacherShuffle);
  const int classes = infer_num_classes(train);
  Mlp teacher = Mlp::create(train.front().features.size(), cfg.teacher_hidden,
                            static_cast<std::size_t>(classes), cfg.activation, init);
  OptimizerState opt({cfg.teacher_learning_rate, cfg.weight_decay});
  for (std::size_t e = 0; e < cfg.teacher_epochs; ++e) {
    for (const auto& batch : shuffled_batches(train.size(), cfg.batch_size, shuffle)) {
      detail::minibatch_step(teacher, train, batch, opt, [&](std::size_t i, const Vector& z) {
        return ce_loss(z, train[i].label);
      });
    }
  }
  return teacher;
}

/// Per-example margin weights from an aux head over early features.
inline std::vector<double> margin_weights(const AuxHead& head, const Matrix& features,
                                          std::span<const int> labels, const TrainingConfig& cfg) {
  std::vector<double> w(features.rows(), 1.0);
  const bool gated = cfg.strategy.gating == Gating::GatedOnAuxError;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const Vector p = softmax(aux_forward(head, features.row(i)));
    const int y_aux = static_cast<int>(argmax(p));
    w[i] = margin_weight(p, y_aux, labels[i], cfg.beta_w, cfg.alpha_w, cfg.weight_cap, gated);
  }
  return w;
}

/*
 * Per-example entropy weights. Each example draws its Monte-Carlo noise from
 * a stream keyed by (round, index), so results do not depend on evaluation
 * order. The aux pathway uses temperature 1.
 */
inline std::vector<double> laplace_weights(const LaplacePosterior& post, const Matrix& features,
                                           std::span<const int> labels, const TrainingConfig& cfg,
                                           const RngStream& round_stream,
                                           std::span<const std::size_t> rows = {}) {
  const bool all = rows.empty();
  const std::size_t n = all ? features.rows() : rows.size();
  std::vector<double> w(n, 1.0);
  const bool gated = cfg.strategy.gating == Gating::GatedOnAuxError;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = all ? k : rows[k];
    const auto pred = laplace_predictive(post, features.row(i));
    auto rng = round_stream.split(i);
    const Vector p = mc_predictive_softmax(pred, cfg.mc_samples, 1.0, rng);
    if (gated && static_cast<int>(argmax(p)) == labels[i]) continue;
    w[k] = entropy_weight(entropy(p), cfg.beta_w, cfg.alpha_w, cfg.weight_cap);
  }
  return w;
}

namespace detail {

/*
 * Hooks into the shared student loop. `before_epoch` and `after_epoch` may
 * refresh every weight and return true when they did; `per_batch` refreshes
 * the weights of one minibatch just before it is used.
 */
struct WeightHooks {
  using EpochHook = std::function<bool(std::size_t epoch, const Mlp& student,
                                       std::vector<WeightedExample>& weighted)>;
  using BatchHook = std::function<void(std::size_t epoch, std::size_t batch_no,
                                       std::span<const std::size_t> batch, const Mlp& student,
                                       std::vector<WeightedExample>& weighted)>;
  EpochHook before_epoch;
  EpochHook after_epoch;
  BatchHook per_batch;
};

inline DistillResult distill_loop(const Mlp& teacher, const Dataset& train, const TrainingConfig& cfg,
                                  const WeightHooks& hooks, const Dataset* eval) {
  require_nonempty(train, "distill");
  cfg.validate();
  require(teacher.input_dim() == train.front().features.size(), ErrorKind::DimMismatch,
          "teacher expects " + std::to_string(teacher.input_dim()) + " features, data has " +
              std::to_string(train.front().features.size()));

  const RngStream root(cfg.seed);
  auto init = root.split(stream::kStudentInit);
  auto shuffle = root.split(stream::kStudentShuffle);
  DistillResult result;
  result.student = Mlp::create(teacher.input_dim(), cfg.student_hidden, teacher.num_classes(),
                               cfg.activation, init);
  Mlp& student = result.student;

  std::vector<Vector> teacher_logits;
  teacher_logits.reserve(train.size());
  for (const auto& ex : train) teacher_logits.push_back(predict_logits(teacher, ex.features));

  std::vector<WeightedExample> weighted(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) weighted[i] = {i, 1.0};

  const double ce_scale = cfg.blend_mode == BlendMode::Alg2Additive ? 1.0 : 1.0 - cfg.lambda;
  const double kd_base = cfg.blend_mode == BlendMode::Alg2Additive ? 1.0 : cfg.lambda;

  OptimizerState opt({cfg.learning_rate, cfg.weight_decay});
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e;
    if (hooks.before_epoch && hooks.before_epoch(e, student, weighted)) {
      m.aux_refreshed = true;
      m.weights_updated = weighted.size();
    }
    double loss_sum = 0.0;
    double weight_sum = 0.0;
    std::size_t batch_no = 0;
    for (const auto& batch : shuffled_batches(train.size(), cfg.batch_size, shuffle)) {
      if (hooks.per_batch) {
        hooks.per_batch(e, batch_no, batch, student, weighted);
        m.aux_refreshed = true;
        m.weights_updated += batch.size();
      }
      for (std::size_t i : batch) {
        weight_sum += weighted[i].wt;
        ++m.weight_histogram[weight_bin(weighted[i].wt)];
      }
      loss_sum += minibatch_step(student, train, batch, opt, [&](std::size_t i, const Vector& z) {
        const auto ce = ce_loss(z, train[i].label);
        const auto kd = kd_loss(z, teacher_logits[i], cfg.temp, cfg.kd_temp_squared);
        const double wt = weighted[i].wt;
        LossAndGradient total;
        total.value = student_loss(ce.value, kd.value, wt, cfg);
        total.grad.resize(z.size());
        for (std::size_t k = 0; k < z.size(); ++k)
          total.grad[k] = ce_scale * ce.grad[k] + kd_base * wt * kd.grad[k];
        return total;
      });
      ++batch_no;
    }
    m.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batch_no, 1));
    m.mean_weight = weight_sum / static_cast<double>(train.size());
    if (hooks.after_epoch && hooks.after_epoch(e, student, weighted)) {
      m.aux_refreshed = true;
      m.weights_updated = weighted.size();
    }
    if (eval != nullptr && !eval->empty()) {
      const auto report = evaluate_groups(student, *eval);
      m.average_accuracy = report.average_accuracy;
      m.worst_group_accuracy = report.worst_group_accuracy;
    }
    result.history.push_back(m);
  }
  result.final_weights.reserve(weighted.size());
  for (const auto& w : weighted) result.final_weights.push_back(w.wt);
  return result;
}

inline AuxTrainOptions aux_options(const TrainingConfig& cfg) {
  return {cfg.batch_size, {cfg.aux_learning_rate, 0.0}};
}

// Features the aux head reads: the student's depth-d layer, or the teacher's
// last hidden layer when configured.
inline Matrix aux_features(const Mlp& student, const Mlp& teacher, const Dataset& train,
                           const TrainingConfig& cfg) {
  if (cfg.aux_feature_source == FeatureSource::Teacher)
    return layer_features(teacher, train, teacher.hidden_depth());
  return layer_features(student, train, cfg.exit_depth);
}

}  // namespace detail

/*
 * Margin-reweighted distillation. Weights start at 1; after every
 * `aux_period`-th epoch the aux head is trained for `aux_epochs` on the
 * current features and every example's weight is recomputed from its aux
 * prediction. The aux head persists between rounds.
 */
inline DistillResult distill_dedier(const Mlp& teacher, const Dataset& train, const TrainingConfig& cfg,
                                    const Dataset* eval = nullptr) {
  require(cfg.strategy.kind != WeightingKind::LaplaceEntropy, ErrorKind::ConfigMismatch,
          "distill_dedier needs strategy margin or uniform");
  if (cfg.strategy.kind == WeightingKind::Uniform) return detail::distill_loop(teacher, train, cfg, {}, eval);

  const RngStream root(cfg.seed);
  auto aux_init = root.split(stream::kAuxInit);
  auto aux_rng = root.split(stream::kAuxTrain);
  const auto labels = labels_of(train);
  std::optional<AuxHead> head;

  detail::WeightHooks hooks;
  hooks.after_epoch = [&](std::size_t epoch, const Mlp& student, std::vector<WeightedExample>& weighted) {
    if (epoch % cfg.aux_period != 0) return false;
    const Matrix feats = detail::aux_features(student, teacher, train, cfg);
    if (!head) head = AuxHead::create(teacher.num_classes(), feats.cols(), aux_init);
    head = train_aux(std::move(*head), feats, labels, cfg.aux_epochs, aux_rng, detail::aux_options(cfg));
    const auto w = margin_weights(*head, feats, labels, cfg);
    for (auto& ex : weighted) ex.wt = w[ex.index];
    return true;
  };
  auto result = detail::distill_loop(teacher, train, cfg, hooks, eval);
  result.aux = std::move(head);
  return result;
}

/*
 * Entropy-reweighted distillation. By default the aux head is retrained and
 * the feature covariance recomputed once per aux period, before the epoch's
 * minibatches; `strict_minibatch` instead takes one aux step on every
 * minibatch and recomputes the covariance over the full training features
 * before weighting that minibatch.
 */
inline DistillResult distill_laplace(const Mlp& teacher, const Dataset& train, const TrainingConfig& cfg,
                                     const Dataset* eval = nullptr) {
  require(cfg.strategy.kind != WeightingKind::Margin, ErrorKind::ConfigMismatch,
          "distill_laplace needs strategy laplace or uniform");
  if (cfg.strategy.kind == WeightingKind::Uniform) return detail::distill_loop(teacher, train, cfg, {}, eval);

  const RngStream root(cfg.seed);
  auto aux_init = root.split(stream::kAuxInit);
  auto aux_rng = root.split(stream::kAuxTrain);
  const RngStream mc_root = root.split(stream::kMonteCarlo);
  const auto labels = labels_of(train);
  const std::optional<double> ridge =
      cfg.ridge > 0.0 ? std::optional<double>(cfg.ridge) : std::nullopt;
  std::optional<AuxHead> head;
  std::optional<OptimizerState> strict_opt;

  detail::WeightHooks hooks;
  if (!cfg.strict_minibatch) {
    hooks.before_epoch = [&](std::size_t epoch, const Mlp& student,
                             std::vector<WeightedExample>& weighted) {
      if ((epoch - 1) % cfg.aux_period != 0) return false;
      const Matrix feats = detail::aux_features(student, teacher, train, cfg);
      if (!head) head = AuxHead::create(teacher.num_classes(), feats.cols(), aux_init);
      head = train_aux(std::move(*head), feats, labels, cfg.aux_epochs, aux_rng,
                       detail::aux_options(cfg));
      const auto post = LaplacePosterior::fit(*head, feats, ridge);
      const auto w = laplace_weights(post, feats, labels, cfg, mc_root.split(epoch));
      for (auto& ex : weighted) ex.wt = w[ex.index];
      return true;
    };
  } else {
    hooks.per_batch = [&](std::size_t epoch, std::size_t batch_no, std::span<const std::size_t> batch,
                          const Mlp& student, std::vector<WeightedExample>& weighted) {
      const Matrix feats = detail::aux_features(student, teacher, train, cfg);
      if (!head) head = AuxHead::create(teacher.num_classes(), feats.cols(), aux_init);
      if (!strict_opt) strict_opt.emplace(detail::aux_options(cfg).optimizer);
      aux_gradient_step(*head, feats, labels, batch, *strict_opt);
      const auto post = LaplacePosterior::fit(*head, feats, ridge);
      const auto w = laplace_weights(post, feats, labels, cfg,
                                     mc_root.split(epoch).split(batch_no), batch);
      for (std::size_t k = 0; k < batch.size(); ++k) weighted[batch[k]].wt = w[k];
    };
  }
  auto result = detail::distill_loop(teacher, train, cfg, hooks, eval);
  result.aux = std::move(head);
  return result;
}

/// Dispatches on the configured weighting strategy.
inline DistillResult distill(const Mlp& teacher, const Dataset& train, const TrainingConfig& cfg,
                             const Dataset* eval = nullptr) {
  if (cfg.strategy.kind == WeightingKind::LaplaceEntropy) return distill_laplace(teacher, train, cfg, eval);
  return distill_dedier(teacher, train, cfg, eval);
}

}  // namespace uwkd
