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
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uwkd/error.hpp"
#include "uwkd/network.hpp"
#include "uwkd/numerics.hpp"

namespace uwkd {

/// Mean-centred sample covariance with the N-1 denominator.
inline Matrix empirical_covariance(const Matrix& features) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  require(n >= 2, ErrorKind::TooFewSamples,
          "covariance needs at least 2 feature rows, got " + std::to_string(n));
  Vector mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = features.row(r);
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  Matrix cov(d, d);
  Vector centred(d);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = features.row(r);
    for (std::size_t j = 0; j < d; ++j) centred[j] = row[j] - mean[j];
    for (std::size_t i = 0; i < d; ++i) {
      const double ci = centred[i];
      if (ci == 0.0) continue;
      for (std::size_t j = 0; j <= i; ++j) cov(i, j) += ci * centred[j];
    }
  }
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      cov(i, j) /= denom;
      cov(j, i) = cov(i, j);
    }
  }
  return cov;
}

/// 1e-3 times the mean feature variance, floored at 1e-8.
inline double default_ridge(const Matrix& covariance) {
  if (covariance.rows() == 0) return 1e-8;
  double trace = 0.0;
  for (std::size_t i = 0; i < covariance.rows(); ++i) trace += covariance(i, i);
  return std::max(1e-3 * trace / static_cast<double>(covariance.rows()), 1e-8);
}

struct RegularizedCovariance {
  Matrix sigma;        // raw empirical covariance
  double ridge = 0.0;  // added to the diagonal
  Matrix regularized;  // sigma + ridge * I
  Matrix chol;         // lower Cholesky factor of `regularized`
};

/*
 * Feature covariance plus diagonal ridge, factorized once so positive
 * definiteness is established at construction. Without an explicit ridge the
 * relative default is used.
 */
inline RegularizedCovariance feature_covariance(const Matrix& features,
                                                std::optional<double> ridge = std::nullopt) {
  RegularizedCovariance out;
  out.sigma = empirical_covariance(features);
  out.ridge = ridge.value_or(default_ridge(out.sigma));
  require(std::isfinite(out.ridge), ErrorKind::InvalidHyperparameter, "ridge must be finite");
  out.regularized = out.sigma;
  for (std::size_t i = 0; i < out.regularized.rows(); ++i) out.regularized(i, i) += out.ridge;
  out.chol = cholesky(out.regularized);
  return out;
}

// Gaussian over logits: N(mu, sigma2 * I_C).
struct LogitPredictive {
  Vector mu;
  double sigma2 = 0.0;
};

class LaplacePosterior {
 public:
  LaplacePosterior(AuxHead head, RegularizedCovariance covariance)
      : head_(std::move(head)), cov_(std::move(covariance)) {
    require(cov_.regularized.rows() == head_.feature_dim(), ErrorKind::DimMismatch,
            "covariance is " + std::to_string(cov_.regularized.rows()) +
                "-dimensional, head reads " + std::to_string(head_.feature_dim()) + " features");
  }

  static LaplacePosterior fit(AuxHead head, const Matrix& features,
                              std::optional<double> ridge = std::nullopt) {
    return LaplacePosterior(std::move(head), feature_covariance(features, ridge));
  }

  const AuxHead& head() const noexcept { return head_; }
  const Matrix& sigma_phi() const noexcept { return cov_.sigma; }
  const Matrix& regularized() const noexcept { return cov_.regularized; }
  const Matrix& chol() const noexcept { return cov_.chol; }
  double ridge() const noexcept { return cov_.ridge; }

 private:
  AuxHead head_;
  RegularizedCovariance cov_;
};

/// mu = W phi + b, sigma2 = phi^T (Sigma + eps I) phi.
inline LogitPredictive laplace_predictive(const LaplacePosterior& post, std::span<const double> phi) {
  LogitPredictive pred;
  pred.mu = aux_forward(post.head(), phi);
  pred.sigma2 = std::max(quadratic_form(post.regularized(), phi), 0.0);
  return pred;
}

/*
 * Monte-Carlo average of softmax(z / temp) with z ~ N(mu, sigma2 I). A
 * degenerate Gaussian short-circuits to the exact softmax.
 */
inline Vector mc_predictive_softmax(const LogitPredictive& pred, std::size_t samples, double temp,
                                    RngStream& rng) {
  require(samples >= 1, ErrorKind::InvalidHyperparameter, "need at least one MC sample");
  require(temp > 0.0, ErrorKind::InvalidHyperparameter, "temperature must be > 0");
  if (pred.sigma2 == 0.0) return softmax(pred.mu, temp);
  const double std_dev = std::sqrt(pred.sigma2);
  const std::size_t c = pred.mu.size();
  Vector mean(c, 0.0);
  Vector z(c);
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t k = 0; k < c; ++k) z[k] = pred.mu[k] + std_dev * rng.normal();
    const Vector p = softmax(z, temp);
    for (std::size_t k = 0; k < c; ++k) mean[k] += p[k];
  }
  double total = 0.0;
  for (double& v : mean) {
    v /= static_cast<double>(samples);
    total += v;
  }
  for (double& v : mean) v /= total;
  return mean;
}

inline double predictive_entropy(const LogitPredictive& pred, std::size_t samples, double temp,
                                 RngStream& rng) {
  return entropy(mc_predictive_softmax(pred, samples, temp, rng));
}

/// exp(beta * H^alpha) without clamping.
inline double entropy_weight_uncapped(double h, double beta, double alpha) {
  require(h >= 0.0 && std::isfinite(h), ErrorKind::InvalidHyperparameter,
          "entropy must be finite and >= 0");
  require(beta >= 0.0, ErrorKind::InvalidHyperparameter, "beta must be >= 0");
  require(alpha > 0.0, ErrorKind::InvalidHyperparameter, "alpha must be > 0");
  return std::exp(beta * std::pow(h, alpha));
}

inline double entropy_weight(double h, double beta, double alpha, double weight_cap = 100.0) {
  require(weight_cap >= 1.0, ErrorKind::InvalidHyperparameter, "weight cap must be >= 1");
  return std::clamp(entropy_weight_uncapped(h, beta, alpha), 1.0, weight_cap);
}

// Per-exit cost weights (e.g. FLOPs up to each exit).
struct ExitEnsembleWeights {
  Vector weights;
};

/// Cost-weighted average of per-exit predictive distributions.
inline Vector ensemble_predict(std::span<const Vector> probs, const ExitEnsembleWeights& w) {
  require(!probs.empty(), ErrorKind::EmptyEnsemble, "no exits to ensemble");
  require(w.weights.size() == probs.size(), ErrorKind::DimMismatch,
          std::to_string(probs.size()) + " exits but " + std::to_string(w.weights.size()) +
              " weights");
  const std::size_t c = probs.front().size();
  double total_w = 0.0;
  for (double wk : w.weights) {
    require(wk > 0.0 && std::isfinite(wk), ErrorKind::InvalidHyperparameter,
            "ensemble weights must be positive");
    total_w += wk;
  }
  if (probs.size() == 1) {
    check_distribution(probs.front());
    return probs.front();
  }
  Vector out(c, 0.0);
  for (std::size_t m = 0; m < probs.size(); ++m) {
    require(probs[m].size() == c, ErrorKind::DimMismatch, "exit distributions differ in length");
    check_distribution(probs[m]);
    for (std::size_t k = 0; k < c; ++k) out[k] += w.weights[m] * probs[m][k];
  }
  for (double& v : out) v /= total_w;
  return out;
}

}  // namespace uwkd
