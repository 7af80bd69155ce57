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

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uwkd/error.hpp"
#include "uwkd/numerics.hpp"

namespace uwkd {

enum class Activation { Relu, Tanh, Identity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
  }
  return "identity";
}

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::Relu;
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity") return Activation::Identity;
  fail(ErrorKind::ParseError, "unknown activation '" + std::string(name) + "'");
}

struct LayerSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::Relu;

  bool operator==(const LayerSpec&) const = default;
};

struct DenseLayer {
  LayerSpec spec;
  Matrix weight;  // out_dim x in_dim
  Vector bias;    // out_dim

  bool operator==(const DenseLayer&) const = default;
};

/*
 * Feed-forward classifier. The final layer always has identity activation and
 * produces the logits; every earlier layer is a "hidden" layer whose output
 * can be tapped as early-exit features.
 */
class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    require(!layers_.empty(), ErrorKind::ShapeMismatch, "Mlp needs at least one layer");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      require(l.spec.in_dim >= 1 && l.spec.out_dim >= 1, ErrorKind::ShapeMismatch,
              "layer " + std::to_string(i) + " has a zero dimension");
      require(l.weight.rows() == l.spec.out_dim && l.weight.cols() == l.spec.in_dim &&
                  l.bias.size() == l.spec.out_dim,
              ErrorKind::ShapeMismatch,
              "layer " + std::to_string(i) + " parameters do not match its spec");
      if (i > 0) {
        require(layers_[i - 1].spec.out_dim == l.spec.in_dim, ErrorKind::ShapeMismatch,
                "layer " + std::to_string(i) + " input does not chain");
      }
    }
    require(layers_.back().spec.activation == Activation::Identity, ErrorKind::ShapeMismatch,
            "final layer must emit logits (identity activation)");
  }

  /// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias.
  static Mlp create(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                    std::size_t num_classes, Activation activation, RngStream& rng) {
    std::vector<DenseLayer> layers;
    std::size_t in = input_dim;
    auto add = [&](std::size_t out, Activation act) {
      DenseLayer l{{in, out, act}, Matrix(out, in), Vector(out, 0.0)};
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      for (double& w : l.weight.data()) w = rng.uniform(-bound, bound);
      layers.push_back(std::move(l));
      in = out;
    };
    for (std::size_t h : hidden) add(h, activation);
    add(num_classes, Activation::Identity);
    return Mlp(std::move(layers));
  }

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  std::size_t layer_count() const noexcept { return layers_.size(); }
  std::size_t hidden_depth() const noexcept { return layers_.empty() ? 0 : layers_.size() - 1; }
  std::size_t input_dim() const { return layers_.front().spec.in_dim; }
  std::size_t num_classes() const { return layers_.back().spec.out_dim; }
  std::size_t width_at(std::size_t depth) const { return layers_.at(depth - 1).spec.out_dim; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.data().size() + l.bias.size();
    return n;
  }

  /// Views over every parameter tensor: W1, b1, W2, b2, ...
  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> out;
    for (auto& l : layers_) {
      out.emplace_back(l.weight.data());
      out.emplace_back(l.bias);
    }
    return out;
  }

  bool operator==(const Mlp&) const = default;

 private:
  std::vector<DenseLayer> layers_;
};

// Post-activation output of every layer for one input; the last entry is the
// logits.
struct ActivationTrace {
  Vector input;
  std::vector<Vector> outputs;
};

struct ForwardResult {
  Vector logits;
  ActivationTrace trace;
};

namespace detail {

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Tanh: return std::tanh(x);
    case Activation::Identity: return x;
  }
  return x;
}

// Derivative expressed through the post-activation value.
inline double activation_slope(Activation a, double post) {
  switch (a) {
    case Activation::Relu: return post > 0.0 ? 1.0 : 0.0;
    case Activation::Tanh: return 1.0 - post * post;
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

}  // namespace detail

inline ForwardResult forward(const Mlp& net, std::span<const double> x) {
  require(net.layer_count() > 0, ErrorKind::ShapeMismatch, "forward on empty network");
  require(x.size() == net.input_dim(), ErrorKind::DimMismatch,
          "forward: input has " + std::to_string(x.size()) + " features, network expects " +
              std::to_string(net.input_dim()));
  ForwardResult result;
  result.trace.input.assign(x.begin(), x.end());
  result.trace.outputs.reserve(net.layer_count());
  std::span<const double> current = result.trace.input;
  for (const auto& layer : net.layers()) {
    Vector out = matvec(layer.weight, current);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = detail::activate(layer.spec.activation, out[i] + layer.bias[i]);
    result.trace.outputs.push_back(std::move(out));
    current = result.trace.outputs.back();
  }
  result.logits = result.trace.outputs.back();
  return result;
}

inline Vector predict_logits(const Mlp& net, std::span<const double> x) {
  return forward(net, x).logits;
}

/// Output of hidden layer `depth` (1-based); depth ranges over hidden layers.
inline const Vector& early_features(const ActivationTrace& trace, std::size_t depth) {
  const std::size_t hidden = trace.outputs.empty() ? 0 : trace.outputs.size() - 1;
  if (depth < 1 || depth > hidden) {
    fail(ErrorKind::DepthOutOfRange, "exit depth " + std::to_string(depth) +
                                         " outside [1, " + std::to_string(hidden) + "]");
  }
  return trace.outputs[depth - 1];
}

struct MlpGradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  static MlpGradients zeros_like(const Mlp& net) {
    MlpGradients g;
    for (const auto& l : net.layers()) {
      g.weight.emplace_back(l.weight.rows(), l.weight.cols());
      g.bias.emplace_back(l.bias.size(), 0.0);
    }
    return g;
  }

  void scale(double s) {
    for (auto& w : weight)
      for (double& v : w.data()) v *= s;
    for (auto& b : bias)
      for (double& v : b) v *= s;
  }

  std::vector<std::span<const double>> views() const {
    std::vector<std::span<const double>> out;
    for (std::size_t i = 0; i < weight.size(); ++i) {
      out.emplace_back(weight[i].data());
      out.emplace_back(bias[i]);
    }
    return out;
  }
};

/*
 * Reverse-mode gradients for one example, accumulated into `grads` (so a
 * minibatch can be summed without extra allocations).
 */
inline void accumulate_backward(const Mlp& net, const ActivationTrace& trace,
                                std::span<const double> dloss_dlogits, MlpGradients& grads) {
  require(trace.outputs.size() == net.layer_count(), ErrorKind::DimMismatch,
          "backward: trace does not belong to this network");
  require(dloss_dlogits.size() == net.num_classes(), ErrorKind::DimMismatch,
          "backward: upstream gradient has " + std::to_string(dloss_dlogits.size()) +
              " entries, network has " + std::to_string(net.num_classes()) + " classes");
  Vector delta(dloss_dlogits.begin(), dloss_dlogits.end());
  for (std::size_t li = net.layer_count(); li-- > 0;) {
    const auto& layer = net.layers()[li];
    const Vector& post = trace.outputs[li];
    for (std::size_t o = 0; o < delta.size(); ++o)
      delta[o] *= detail::activation_slope(layer.spec.activation, post[o]);
    const Vector& in = li == 0 ? trace.input : trace.outputs[li - 1];
    Matrix& gw = grads.weight[li];
    for (std::size_t o = 0; o < delta.size(); ++o) {
      const double d = delta[o];
      grads.bias[li][o] += d;
      if (d == 0.0) continue;
      auto row = gw.row(o);
      for (std::size_t i = 0; i < in.size(); ++i) row[i] += d * in[i];
    }
    if (li == 0) break;
    Vector upstream(layer.spec.in_dim, 0.0);
    for (std::size_t o = 0; o < delta.size(); ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const auto row = layer.weight.row(o);
      for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] += d * row[i];
    }
    delta = std::move(upstream);
  }
}

inline MlpGradients backward(const Mlp& net, const ActivationTrace& trace,
                             std::span<const double> dloss_dlogits) {
  auto grads = MlpGradients::zeros_like(net);
  accumulate_backward(net, trace, dloss_dlogits, grads);
  return grads;
}

// One linear layer mapping early features to class logits.
struct AuxHead {
  Matrix weight;  // C x D
  Vector bias;    // C

  static AuxHead create(std::size_t num_classes, std::size_t feature_dim, RngStream& rng) {
    AuxHead h{Matrix(num_classes, feature_dim), Vector(num_classes, 0.0)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    for (double& w : h.weight.data()) w = rng.uniform(-bound, bound);
    return h;
  }

  std::size_t num_classes() const noexcept { return weight.rows(); }
  std::size_t feature_dim() const noexcept { return weight.cols(); }

  std::vector<std::span<double>> parameters() {
    return {std::span<double>(weight.data()), std::span<double>(bias)};
  }

  bool operator==(const AuxHead&) const = default;
};

inline Vector aux_forward(const AuxHead& head, std::span<const double> phi) {
  require(phi.size() == head.feature_dim(), ErrorKind::DimMismatch,
          "aux head expects " + std::to_string(head.feature_dim()) + " features, got " +
              std::to_string(phi.size()));
  Vector z = matvec(head.weight, phi);
  for (std::size_t c = 0; c < z.size(); ++c) z[c] += head.bias[c];
  return z;
}

struct AdamWConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/*
 * Adaptive moments with decoupled weight decay (Loshchilov & Hutter). Moment
 * buffers are created on the first step and must keep their shapes after.
 */
struct OptimizerState {
  AdamWConfig config;
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;
  std::size_t step = 0;

  explicit OptimizerState(AdamWConfig cfg = {}) : config(cfg) {}
};

inline void optimizer_step(std::span<const std::span<double>> params,
                           std::span<const std::span<const double>> grads,
                           OptimizerState& state) {
  require(params.size() == grads.size(), ErrorKind::ShapeMismatch,
          "optimizer_step: parameter and gradient lists differ in length");
  if (state.step == 0 && state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  require(state.first_moment.size() == params.size(), ErrorKind::ShapeMismatch,
          "optimizer_step: state tracks a different parameter list");
  for (std::size_t t = 0; t < params.size(); ++t) {
    require(params[t].size() == grads[t].size() &&
                params[t].size() == state.first_moment[t].size(),
            ErrorKind::ShapeMismatch,
            "optimizer_step: tensor " + std::to_string(t) + " shape mismatch");
  }

  const auto& c = state.config;
  ++state.step;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - c.learning_rate * c.weight_decay;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t];
    auto g = grads[t];
    auto& m = state.first_moment[t];
    auto& v = state.second_moment[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p[i] = p[i] * decay - c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

struct AuxTrainOptions {
  std::size_t batch_size = 16;
  AdamWConfig optimizer{1e-2, 0.0};
};

// Indices 0..n-1 partitioned into shuffled minibatches.
inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n,
                                                              std::size_t batch_size,
                                                              RngStream& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  const std::size_t bs = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < n; start += bs) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
  }
  return batches;
}

/// One AdamW step of mean softmax cross-entropy over the given rows.
inline void aux_gradient_step(AuxHead& head, const Matrix& features,
                              std::span<const int> labels, std::span<const std::size_t> rows,
                              OptimizerState& state) {
  if (rows.empty()) return;
  Matrix gw(head.weight.rows(), head.weight.cols());
  Vector gb(head.bias.size(), 0.0);
  for (std::size_t r : rows) {
    const auto phi = features.row(r);
    Vector p = softmax(aux_forward(head, phi));
    const auto label = static_cast<std::size_t>(labels[r]);
    require(label < p.size(), ErrorKind::LabelOutOfRange,
            "label " + std::to_string(labels[r]) + " out of range");
    p[label] -= 1.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
      gb[c] += p[c];
      auto row = gw.row(c);
      for (std::size_t d = 0; d < phi.size(); ++d) row[d] += p[c] * phi[d];
    }
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (double& v : gw.data()) v *= inv;
  for (double& v : gb) v *= inv;
  const std::vector<std::span<const double>> grads{gw.data(), gb};
  const auto params = head.parameters();
  optimizer_step(params, grads, state);
}

/*
 * Minibatch cross-entropy training of an auxiliary head for `epochs` passes.
 * A fresh optimizer state is used for every call.
 */
inline AuxHead train_aux(AuxHead head, const Matrix& features, std::span<const int> labels,
                         std::size_t epochs, RngStream& rng, const AuxTrainOptions& options = {}) {
  require(features.rows() == labels.size(), ErrorKind::ShapeMismatch,
          "train_aux: " + std::to_string(features.rows()) + " feature rows vs " +
              std::to_string(labels.size()) + " labels");
  require(features.rows() > 0, ErrorKind::EmptyDataset, "train_aux: no examples");
  require(features.cols() == head.feature_dim(), ErrorKind::DimMismatch,
          "train_aux: feature width " + std::to_string(features.cols()) + " vs head input " +
              std::to_string(head.feature_dim()));
  OptimizerState state(options.optimizer);
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& batch : shuffled_batches(features.rows(), options.batch_size, rng))
      aux_gradient_step(head, features, labels, batch, state);
  }
  return head;
}

}  // namespace uwkd
