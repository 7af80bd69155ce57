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

#include <cmath>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "uwkd/checkpoint.hpp"
#include "uwkd/distill.hpp"
#include "uwkd/network.hpp"

namespace uwkd {
namespace {

Mlp single_identity_layer() {
  DenseLayer l{{2, 2, Activation::Identity}, Matrix::identity(2), Vector{0.0, 0.0}};
  return Mlp({l});
}

TEST(Forward, ZeroNetworkGivesZeroLogits) {
  RngStream rng(1);
  Mlp net = Mlp::create(4, {8, 8}, 3, Activation::Relu, rng);
  for (auto p : net.parameters()) std::fill(p.begin(), p.end(), 0.0);
  const auto fr = forward(net, Vector{1, -2, 3, 0.5});
  EXPECT_EQ(fr.logits, (Vector{0, 0, 0}));
  EXPECT_EQ(fr.trace.outputs.size(), 3u);
}

TEST(Forward, IdentityLayerPassesInputThrough) {
  EXPECT_EQ(forward(single_identity_layer(), Vector{1, 2}).logits, (Vector{1, 2}));
}

TEST(Forward, RejectsWrongInputWidth) {
  try {
    forward(single_identity_layer(), Vector{1, 2, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimMismatch);
  }
}

TEST(Forward, GoldenSeededLogits) {
  RngStream rng(2026);
  const Mlp net = Mlp::create(3, {4, 4}, 2, Activation::Tanh, rng);
  const Vector logits = forward(net, Vector{0.5, -1.0, 2.0}).logits;
  // Frozen from the first verified run.
  EXPECT_NEAR(logits[0], 0.090936756931974172, 1e-12);
  EXPECT_NEAR(logits[1], -0.13412302941484999, 1e-12);
}

TEST(Forward, IsPure) {
  RngStream rng(3);
  const Mlp net = Mlp::create(5, {7, 3}, 4, Activation::Relu, rng);
  const Mlp copy = net;
  const Vector x{0.1, 0.2, -0.3, 0.4, 5.0};
  EXPECT_EQ(forward(net, x).logits, forward(net, x).logits);
  EXPECT_EQ(net, copy);
}

TEST(EarlyFeatures, ReturnsRequestedLayer) {
  RngStream rng(4);
  const Mlp net = Mlp::create(3, {5, 6, 7, 8, 9, 10}, 3, Activation::Relu, rng);
  const auto fr = forward(net, Vector{1, 2, 3});
  EXPECT_EQ(early_features(fr.trace, 3).size(), 7u);
  EXPECT_EQ(early_features(fr.trace, 3), fr.trace.outputs[2]);
  EXPECT_EQ(early_features(fr.trace, 6), fr.trace.outputs[5]);
}

TEST(EarlyFeatures, OutOfRangeDepth) {
  RngStream rng(5);
  const Mlp net = Mlp::create(3, {4, 4}, 2, Activation::Relu, rng);
  const auto fr = forward(net, Vector{1, 2, 3});
  for (std::size_t d : {std::size_t{0}, std::size_t{3}}) {
    try {
      early_features(fr.trace, d);
      FAIL() << "depth " << d;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::DepthOutOfRange);
    }
  }
}

// The depth-d tap must equal running only the first d layers.
TEST(EarlyFeatures, MatchesTruncatedNetwork) {
  RngStream rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Mlp net = Mlp::create(4, {6, 5, 4}, 3, Activation::Relu, rng);
    Vector x(4);
    for (double& v : x) v = rng.normal();
    const auto fr = forward(net, x);
    for (std::size_t d = 1; d <= 3; ++d) {
      Vector h = x;
      for (std::size_t l = 0; l < d; ++l) {
        const auto& layer = net.layers()[l];
        Vector next(layer.spec.out_dim);
        for (std::size_t o = 0; o < next.size(); ++o) {
          double s = layer.bias[o];
          for (std::size_t i = 0; i < h.size(); ++i) s += layer.weight(o, i) * h[i];
          next[o] = std::max(s, 0.0);
        }
        h = next;
      }
      EXPECT_EQ(early_features(fr.trace, d), h);
    }
  }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  RngStream rng(7);
  const Mlp net = Mlp::create(3, {4}, 2, Activation::Tanh, rng);
  const auto fr = forward(net, Vector{1, 2, 3});
  const auto g = backward(net, fr.trace, Vector{0, 0});
  for (auto v : g.views())
    for (double x : v) EXPECT_EQ(x, 0.0);
}

TEST(Backward, LinearLayerGradientIsOuterProduct) {
  // d(sum logits)/dW = 1 x^T, d/db = 1 for an identity layer.
  DenseLayer l{{3, 2, Activation::Identity}, Matrix(2, 3, {1, 2, 3, 4, 5, 6}), Vector{0.5, -0.5}};
  const Mlp net({l});
  const Vector x{1.0, -2.0, 0.5};
  const auto g = backward(net, forward(net, x).trace, Vector{1, 1});
  EXPECT_EQ(g.weight[0], Matrix(2, 3, {1.0, -2.0, 0.5, 1.0, -2.0, 0.5}));
  EXPECT_EQ(g.bias[0], (Vector{1, 1}));
}

TEST(Backward, MatchesFiniteDifferencesOnTanhNet) {
  RngStream rng(8);
  const Mlp net = Mlp::create(3, {5}, 3, Activation::Tanh, rng);
  const Vector x{0.3, -0.7, 1.1};
  const Vector upstream{0.2, -1.0, 0.4};
  // Loss = upstream . logits, so d loss / d logits = upstream.
  auto loss = [&](const Mlp& n) { return dot(upstream, forward(n, x).logits); };
  const auto fd = testing_support::finite_difference_gradients(net, loss);
  const auto grads = backward(net, forward(net, x).trace, upstream);
  const auto g = grads.views();
  for (std::size_t t = 0; t < fd.size(); ++t)
    for (std::size_t i = 0; i < fd[t].size(); ++i)
      EXPECT_LE(testing_support::relative_error(g[t][i], fd[t][i]), 1e-5);
}

TEST(Backward, RandomNetsAgreeWithFiniteDifferences) {
  RngStream rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Mlp net = testing_support::random_net(rng);
    Vector x(net.input_dim());
    for (double& v : x) v = rng.normal();
    const int label = static_cast<int>(rng.below(net.num_classes()));
    auto loss = [&](const Mlp& n) { return ce_loss(forward(n, x).logits, label).value; };
    const auto fd = testing_support::finite_difference_gradients(net, loss);
    const auto fr = forward(net, x);
    const auto grads = backward(net, fr.trace, ce_loss(fr.logits, label).grad);
    const auto g = grads.views();
    for (std::size_t t = 0; t < fd.size(); ++t)
      for (std::size_t i = 0; i < fd[t].size(); ++i)
        worst = std::max(worst, testing_support::relative_error(g[t][i], fd[t][i]));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(AuxHead, ForwardIsAffine) {
  AuxHead zero{Matrix(2, 2), Vector{0, 0}};
  EXPECT_EQ(aux_forward(zero, Vector{3, 4}), (Vector{0, 0}));
  AuxHead id{Matrix::identity(2), Vector{0, 0}};
  EXPECT_EQ(aux_forward(id, Vector{3, 4}), (Vector{3, 4}));
  EXPECT_THROW(aux_forward(id, Vector{1, 2, 3}), Error);
}

TEST(AuxHead, GoldenSeededLogits) {
  RngStream rng(31);
  const AuxHead head = AuxHead::create(3, 4, rng);
  const Vector z = aux_forward(head, Vector{1.0, 0.5, -0.25, 2.0});
  EXPECT_NEAR(z[0], 0.18660453903949561, 1e-12);
  EXPECT_NEAR(z[1], 0.36653160548434033, 1e-12);
  EXPECT_NEAR(z[2], 0.63319748384504226, 1e-12);
}

TEST(Optimizer, ZeroGradientWithoutDecayLeavesParamsUnchanged) {
  Vector p{1.0, -2.0, 3.0};
  const Vector g{0.0, 0.0, 0.0};
  OptimizerState st({1e-3, 0.0});
  const std::vector<std::span<double>> params{p};
  const std::vector<std::span<const double>> grads{g};
  for (int i = 0; i < 5; ++i) optimizer_step(params, grads, st);
  EXPECT_EQ(p, (Vector{1.0, -2.0, 3.0}));
  EXPECT_EQ(st.step, 5u);
}

TEST(Optimizer, FirstStepClosedForm) {
  // With bias correction the first step is lr * g / (|g| + eps) after decay.
  Vector p{1.0, -2.0, 0.5};
  const Vector g{0.3, -4.0, 1e-3};
  const AdamWConfig cfg{0.01, 0.1, 0.9, 0.999, 1e-8};
  OptimizerState st(cfg);
  const std::vector<std::span<double>> params{p};
  const std::vector<std::span<const double>> grads{g};
  optimizer_step(params, grads, st);
  const Vector start{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = start[i] * (1 - cfg.learning_rate * cfg.weight_decay) -
                            cfg.learning_rate * g[i] / (std::abs(g[i]) + cfg.epsilon);
    EXPECT_NEAR(p[i], expected, 1e-15);
  }
}

TEST(Optimizer, ShapeMismatchIsRejected) {
  Vector p{1.0, 2.0};
  const Vector g{1.0};
  OptimizerState st;
  const std::vector<std::span<double>> params{p};
  const std::vector<std::span<const double>> grads{g};
  try {
    optimizer_step(params, grads, st);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(Optimizer, DecreasesConvexQuadratic) {
  // f(p) = sum_i c_i (p_i - t_i)^2
  const Vector c{1.0, 4.0, 0.5}, t{2.0, -1.0, 3.0};
  Vector p{0.0, 0.0, 0.0};
  auto f = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += c[i] * (p[i] - t[i]) * (p[i] - t[i]);
    return s;
  };
  OptimizerState st({0.05, 0.0});
  const std::vector<std::span<double>> params{p};
  std::vector<double> history{f()};
  for (int step = 0; step < 100; ++step) {
    Vector g(3);
    for (std::size_t i = 0; i < 3; ++i) g[i] = 2 * c[i] * (p[i] - t[i]);
    const std::vector<std::span<const double>> grads{g};
    optimizer_step(params, grads, st);
    history.push_back(f());
  }
  // Monotone trend over windows of 10 steps, and a large overall decrease.
  for (std::size_t w = 10; w < history.size(); w += 10) EXPECT_LT(history[w], history[w - 10]);
  EXPECT_LT(history.back(), 0.01 * history.front());
}

// Two well separated Gaussian blobs.
Matrix blobs(std::size_t n, std::vector<int>& labels, RngStream& rng) {
  Matrix x(n, 2);
  labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % 2);
    const double centre = labels[i] == 0 ? -3.0 : 3.0;
    x(i, 0) = centre + 0.5 * rng.normal();
    x(i, 1) = 0.5 * rng.normal();
  }
  return x;
}

TEST(TrainAux, SeparableBlobs) {
  RngStream rng(10);
  std::vector<int> labels;
  const Matrix x = blobs(400, labels, rng);
  auto head = train_aux(AuxHead::create(2, 2, rng), x, labels, 20, rng);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    correct += static_cast<int>(argmax(aux_forward(head, x.row(i)))) == labels[i];
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(x.rows()), 0.99);
}

TEST(TrainAux, ZeroEpochsIsIdentity) {
  RngStream rng(11);
  std::vector<int> labels;
  const Matrix x = blobs(20, labels, rng);
  const AuxHead head = AuxHead::create(2, 2, rng);
  EXPECT_EQ(train_aux(head, x, labels, 0, rng), head);
}

TEST(TrainAux, DeterministicGivenSeed) {
  RngStream data_rng(12);
  std::vector<int> labels;
  const Matrix x = blobs(64, labels, data_rng);
  auto run = [&] {
    RngStream rng(99);
    return train_aux(AuxHead::create(2, 2, rng), x, labels, 3, rng);
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainAux, EmptyDatasetRejected) {
  RngStream rng(13);
  try {
    train_aux(AuxHead::create(2, 2, rng), Matrix(0, 2), std::vector<int>{}, 1, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyDataset);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  RngStream rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    const Mlp net = testing_support::random_net(rng, 4, 20, Activation::Relu);
    const auto loaded = checkpoint_from_json(nlohmann::json::parse(checkpoint_to_json(net, "abc").dump()));
    EXPECT_EQ(loaded.net, net);
    EXPECT_EQ(loaded.fingerprint, "abc");
  }
}

TEST(Checkpoint, RejectsForeignDocuments) {
  EXPECT_THROW(checkpoint_from_json(nlohmann::json{{"format", "other"}}), Error);
  EXPECT_THROW(checkpoint_from_json(nlohmann::json::object()), Error);
}

}  // namespace
}  // namespace uwkd
