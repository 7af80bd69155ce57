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

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "uwkd/error.hpp"
#include "uwkd/io.hpp"
#include "uwkd/network.hpp"

namespace uwkd {

enum class WeightingKind { Uniform, Margin, LaplaceEntropy };
enum class Gating { GatedOnAuxError, Unconditional };
enum class BlendMode { LambdaBlend, Alg2Additive };
enum class FeatureSource { Student, Teacher };

inline std::string_view to_string(WeightingKind k) {
  switch (k) {
    case WeightingKind::Uniform: return "uniform";
    case WeightingKind::Margin: return "margin";
    case WeightingKind::LaplaceEntropy: return "laplace";
  }
  return "uniform";
}
inline std::string_view to_string(Gating g) {
  return g == Gating::GatedOnAuxError ? "gated_on_aux_error" : "unconditional";
}
inline std::string_view to_string(BlendMode b) {
  return b == BlendMode::LambdaBlend ? "lambda_blend" : "alg2_additive";
}
inline std::string_view to_string(FeatureSource f) {
  return f == FeatureSource::Student ? "student" : "teacher";
}

inline WeightingKind parse_weighting(std::string_view s) {
  if (s == "uniform") return WeightingKind::Uniform;
  if (s == "margin") return WeightingKind::Margin;
  if (s == "laplace" || s == "laplace_entropy") return WeightingKind::LaplaceEntropy;
  fail(ErrorKind::ConfigMismatch, "unknown strategy '" + std::string(s) + "'");
}
inline Gating parse_gating(std::string_view s) {
  if (s == "gated_on_aux_error") return Gating::GatedOnAuxError;
  if (s == "unconditional") return Gating::Unconditional;
  fail(ErrorKind::ConfigMismatch, "unknown gating '" + std::string(s) + "'");
}
inline BlendMode parse_blend(std::string_view s) {
  if (s == "lambda_blend") return BlendMode::LambdaBlend;
  if (s == "alg2_additive") return BlendMode::Alg2Additive;
  fail(ErrorKind::ConfigMismatch, "unknown blend_mode '" + std::string(s) + "'");
}
inline FeatureSource parse_feature_source(std::string_view s) {
  if (s == "student") return FeatureSource::Student;
  if (s == "teacher") return FeatureSource::Teacher;
  fail(ErrorKind::ConfigMismatch, "unknown aux_feature_source '" + std::string(s) + "'");
}

struct WeightingStrategy {
  WeightingKind kind = WeightingKind::Uniform;
  Gating gating = Gating::Unconditional;

  // Margin weighting gates on aux errors; entropy weighting applies to all.
  static WeightingStrategy with_default_gating(WeightingKind kind) {
    return {kind, kind == WeightingKind::Margin ? Gating::GatedOnAuxError : Gating::Unconditional};
  }

  bool operator==(const WeightingStrategy&) const = default;
};

/*
 * Everything a teacher/student run needs. Paper-facing knobs first, then the
 * desk-scale architecture and schedule settings.
 */
struct TrainingConfig {
  double lambda = 0.5;     // distillation fraction in the blended loss
  double alpha_w = 2.0;    // exponent applied to the uncertainty score
  double beta_w = 4.0;     // scale applied inside the exponential weight
  double temp = 2.0;       // distillation temperature
  std::size_t exit_depth = 2;
  std::size_t epochs = 5;
  std::size_t aux_period = 1;
  std::size_t aux_epochs = 5;
  std::size_t mc_samples = 100;
  std::size_t eval_mc_samples = 100000;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double weight_cap = 100.0;
  BlendMode blend_mode = BlendMode::LambdaBlend;
  WeightingStrategy strategy;
  FeatureSource aux_feature_source = FeatureSource::Student;

  double ridge = 0.0;  // 0 selects the relative default
  bool kd_temp_squared = true;
  bool strict_minibatch = false;
  double aux_learning_rate = 1e-2;

  std::size_t teacher_epochs = 3;
  double teacher_learning_rate = 1e-3;
  std::vector<std::size_t> teacher_hidden{64, 64, 64, 64, 64, 64};
  std::vector<std::size_t> student_hidden{32, 32, 32};
  Activation activation = Activation::Relu;

  std::vector<double> split_fractions{0.8, 0.1, 0.1};

  void set_strategy(WeightingKind kind) { strategy = WeightingStrategy::with_default_gating(kind); }

  void validate() const {
    require(lambda >= 0.0 && lambda <= 1.0, ErrorKind::InvalidHyperparameter,
            "lambda must lie in [0, 1]");
    require(temp > 0.0, ErrorKind::InvalidHyperparameter, "temp must be > 0");
    require(alpha_w > 0.0, ErrorKind::InvalidHyperparameter, "alpha_w must be > 0");
    require(beta_w >= 0.0, ErrorKind::InvalidHyperparameter, "beta_w must be >= 0");
    require(epochs >= 1 && aux_period >= 1 && aux_epochs >= 1, ErrorKind::InvalidHyperparameter,
            "epochs, aux_period and aux_epochs must be >= 1");
    require(mc_samples >= 1 && eval_mc_samples >= 1, ErrorKind::InvalidHyperparameter,
            "MC sample counts must be >= 1");
    require(batch_size >= 1, ErrorKind::InvalidHyperparameter, "batch_size must be >= 1");
    require(weight_cap >= 1.0, ErrorKind::InvalidHyperparameter, "weight_cap must be >= 1");
    require(learning_rate > 0.0 && teacher_learning_rate > 0.0 && aux_learning_rate > 0.0,
            ErrorKind::InvalidHyperparameter, "learning rates must be > 0");
    require(ridge >= 0.0, ErrorKind::InvalidHyperparameter, "ridge must be >= 0");
    require(!student_hidden.empty() && !teacher_hidden.empty(), ErrorKind::InvalidHyperparameter,
            "teacher and student need at least one hidden layer");
    require(exit_depth >= 1 && exit_depth <= student_hidden.size(), ErrorKind::DepthOutOfRange,
            "exit_depth " + std::to_string(exit_depth) + " outside the student's " +
                std::to_string(student_hidden.size()) + " hidden layers");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto res = std::from_chars(value.data(), end, out);
  if (res.ec != std::errc{} || res.ptr != end)
    fail(ErrorKind::ParseError, "config key '" + key + "': bad number '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail(ErrorKind::ParseError, "config key '" + key + "': expected true/false");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += nlohmann::json(values[i]).dump();
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

}  // namespace detail

/// Applies one `key = value` assignment; unknown keys are rejected.
inline void apply_setting(TrainingConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_number;
  if (key == "lambda") cfg.lambda = parse_number<double>(key, value);
  else if (key == "alpha_w") cfg.alpha_w = parse_number<double>(key, value);
  else if (key == "beta_w") cfg.beta_w = parse_number<double>(key, value);
  else if (key == "temp") cfg.temp = parse_number<double>(key, value);
  else if (key == "exit_depth") cfg.exit_depth = parse_number<std::size_t>(key, value);
  else if (key == "epochs") cfg.epochs = parse_number<std::size_t>(key, value);
  else if (key == "aux_period") cfg.aux_period = parse_number<std::size_t>(key, value);
  else if (key == "aux_epochs") cfg.aux_epochs = parse_number<std::size_t>(key, value);
  else if (key == "mc_samples") cfg.mc_samples = parse_number<std::size_t>(key, value);
  else if (key == "eval_mc_samples") cfg.eval_mc_samples = parse_number<std::size_t>(key, value);
  else if (key == "learning_rate") cfg.learning_rate = parse_number<double>(key, value);
  else if (key == "weight_decay") cfg.weight_decay = parse_number<double>(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "weight_cap") cfg.weight_cap = parse_number<double>(key, value);
  else if (key == "blend_mode") cfg.blend_mode = parse_blend(value);
  else if (key == "strategy") cfg.set_strategy(parse_weighting(value));
  else if (key == "gating") cfg.strategy.gating = parse_gating(value);
  else if (key == "aux_feature_source") cfg.aux_feature_source = parse_feature_source(value);
  else if (key == "ridge") cfg.ridge = parse_number<double>(key, value);
  else if (key == "kd_temp_squared") cfg.kd_temp_squared = detail::parse_bool(key, value);
  else if (key == "strict_minibatch") cfg.strict_minibatch = detail::parse_bool(key, value);
  else if (key == "aux_learning_rate") cfg.aux_learning_rate = parse_number<double>(key, value);
  else if (key == "teacher_epochs") cfg.teacher_epochs = parse_number<std::size_t>(key, value);
  else if (key == "teacher_learning_rate") cfg.teacher_learning_rate = parse_number<double>(key, value);
  else if (key == "teacher_hidden") cfg.teacher_hidden = detail::parse_list<std::size_t>(key, value);
  else if (key == "student_hidden") cfg.student_hidden = detail::parse_list<std::size_t>(key, value);
  else if (key == "activation") cfg.activation = parse_activation(value);
  else if (key == "split_fractions") cfg.split_fractions = detail::parse_list<double>(key, value);
  else fail(ErrorKind::ConfigMismatch, "unknown config key '" + key + "'");
}

/*
 * Flat key-value format: one `key = value` per line, `#` starts a comment.
 * Later assignments override earlier ones.
 */
inline void apply_config_text(TrainingConfig& cfg, std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto text = detail::trim(line);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::ParseError, "config line " + std::to_string(line_no) + ": expected key = value");
    apply_setting(cfg, detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1)));
  }
}

inline TrainingConfig load_config(const std::filesystem::path& path) {
  TrainingConfig cfg;
  std::istringstream in(read_file(path));
  apply_config_text(cfg, in);
  return cfg;
}

inline nlohmann::json config_to_json(const TrainingConfig& c) {
  return nlohmann::json{
      {"lambda", c.lambda},
      {"alpha_w", c.alpha_w},
      {"beta_w", c.beta_w},
      {"temp", c.temp},
      {"exit_depth", c.exit_depth},
      {"epochs", c.epochs},
      {"aux_period", c.aux_period},
      {"aux_epochs", c.aux_epochs},
      {"mc_samples", c.mc_samples},
      {"eval_mc_samples", c.eval_mc_samples},
      {"learning_rate", c.learning_rate},
      {"weight_decay", c.weight_decay},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"weight_cap", c.weight_cap},
      {"blend_mode", to_string(c.blend_mode)},
      {"strategy", to_string(c.strategy.kind)},
      {"gating", to_string(c.strategy.gating)},
      {"aux_feature_source", to_string(c.aux_feature_source)},
      {"ridge", c.ridge},
      {"kd_temp_squared", c.kd_temp_squared},
      {"strict_minibatch", c.strict_minibatch},
      {"aux_learning_rate", c.aux_learning_rate},
      {"teacher_epochs", c.teacher_epochs},
      {"teacher_learning_rate", c.teacher_learning_rate},
      {"teacher_hidden", c.teacher_hidden},
      {"student_hidden", c.student_hidden},
      {"activation", to_string(c.activation)},
      {"split_fractions", c.split_fractions},
  };
}

/// Renders the config back into the flat key-value format.
inline std::string config_to_text(const TrainingConfig& c) {
  const nlohmann::json j = config_to_json(c);
  std::string out;
  for (const auto& [key, value] : j.items()) {
    std::string rendered;
    if (value.is_string()) rendered = value.get<std::string>();
    else if (value.is_array() && key == "split_fractions")
      rendered = detail::join(value.get<std::vector<double>>());
    else if (value.is_array()) rendered = detail::join(value.get<std::vector<std::size_t>>());
    else rendered = value.dump();
    out += key + " = " + rendered + "\n";
  }
  return out;
}

/*
 * Fingerprint of the settings every weighting strategy shares (architecture,
 * optimizer, loss blend, schedule, seed). Strategy-specific knobs are left
 * out so that equivalent runs produce byte-identical checkpoints.
 */
inline std::string model_fingerprint(const TrainingConfig& c) {
  const nlohmann::json j{{"lambda", c.lambda},
                         {"temp", c.temp},
                         {"epochs", c.epochs},
                         {"learning_rate", c.learning_rate},
                         {"weight_decay", c.weight_decay},
                         {"batch_size", c.batch_size},
                         {"seed", c.seed},
                         {"blend_mode", to_string(c.blend_mode)},
                         {"kd_temp_squared", c.kd_temp_squared},
                         {"student_hidden", c.student_hidden},
                         {"teacher_hidden", c.teacher_hidden},
                         {"activation", to_string(c.activation)}};
  return fnv1a_hex(j.dump());
}

}  // namespace uwkd
