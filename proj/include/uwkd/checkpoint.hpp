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

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "uwkd/error.hpp"
#include "uwkd/io.hpp"
#include "uwkd/laplace.hpp"
#include "uwkd/network.hpp"

namespace uwkd {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "uwkd-checkpoint";

/*
 * JSON checkpoint. Doubles are written in shortest round-trip form, so
 * load(save(net)) reproduces every parameter bit for bit.
 */
inline nlohmann::json checkpoint_to_json(const Mlp& net, const std::string& fingerprint) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    layers.push_back({{"in_dim", l.spec.in_dim},
                      {"out_dim", l.spec.out_dim},
                      {"activation", to_string(l.spec.activation)},
                      {"weight", std::vector<double>(l.weight.data().begin(), l.weight.data().end())},
                      {"bias", l.bias}});
  }
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"config_fingerprint", fingerprint},
          {"layers", layers}};
}

struct Checkpoint {
  Mlp net;
  std::string fingerprint;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    require(j.at("format").get<std::string>() == kCheckpointFormat, ErrorKind::ParseError,
            "not a uwkd checkpoint");
    require(j.at("version").get<int>() == kCheckpointVersion, ErrorKind::ParseError,
            "unsupported checkpoint version");
    std::vector<DenseLayer> layers;
    for (const auto& lj : j.at("layers")) {
      DenseLayer l;
      l.spec.in_dim = lj.at("in_dim").get<std::size_t>();
      l.spec.out_dim = lj.at("out_dim").get<std::size_t>();
      l.spec.activation = parse_activation(lj.at("activation").get<std::string>());
      l.weight = Matrix(l.spec.out_dim, l.spec.in_dim, lj.at("weight").get<std::vector<double>>());
      l.bias = lj.at("bias").get<Vector>();
      require(all_finite(l.weight.data()) && all_finite(l.bias), ErrorKind::ParseError,
              "non-finite parameter");
      layers.push_back(std::move(l));
    }
    return {Mlp(std::move(layers)), j.value("config_fingerprint", std::string())};
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorKind::ParseError, std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Mlp& net,
                            const std::string& fingerprint) {
  write_file_atomic(path, checkpoint_to_json(net, fingerprint).dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorKind::ParseError, "checkpoint '" + path.string() + "': " + e.what());
  }
  return checkpoint_from_json(j);
}

inline nlohmann::json aux_head_to_json(const AuxHead& head, std::size_t depth) {
  return {{"format", "uwkd-aux-head"},
          {"version", kCheckpointVersion},
          {"exit_depth", depth},
          {"num_classes", head.num_classes()},
          {"feature_dim", head.feature_dim()},
          {"weight", std::vector<double>(head.weight.data().begin(), head.weight.data().end())},
          {"bias", head.bias}};
}

inline AuxHead aux_head_from_json(const nlohmann::json& j) {
  try {
    const auto c = j.at("num_classes").get<std::size_t>();
    const auto d = j.at("feature_dim").get<std::size_t>();
    return AuxHead{Matrix(c, d, j.at("weight").get<std::vector<double>>()), j.at("bias").get<Vector>()};
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorKind::ParseError, std::string("aux head: ") + e.what());
  }
}

/// Diagnostic dump of a posterior: head, raw covariance, ridge, spectrum.
inline nlohmann::json posterior_to_json(const LaplacePosterior& post) {
  const auto& sigma = post.sigma_phi();
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < sigma.rows(); ++r) rows.emplace_back(sigma.row(r).begin(), sigma.row(r).end());
  const Vector ev = symmetric_eigenvalues(post.regularized());
  double trace = 0.0;
  for (double v : ev) trace += v;
  const double min_ev = ev.empty() ? 0.0 : ev.front();
  const double max_ev = ev.empty() ? 0.0 : ev.back();
  return {{"head", aux_head_to_json(post.head(), 0)},
          {"sigma_phi", rows},
          {"ridge", post.ridge()},
          {"eigenvalues",
           {{"min", min_ev},
            {"max", max_ev},
            {"mean", ev.empty() ? 0.0 : trace / static_cast<double>(ev.size())},
            {"condition_number", min_ev > 0.0 ? max_ev / min_ev : 0.0},
            {"values", ev}}}};
}

}  // namespace uwkd
