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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uwkd/error.hpp"
#include "uwkd/io.hpp"
#include "uwkd/numerics.hpp"

namespace uwkd {

/*
 * One synthetic example. `group` encodes the (label, spurious attribute) cell
 * as num_classes * spurious_attr + label.
 */
struct Example {
  Vector features;
  int label = 0;
  int group = 0;
  int spurious_attr = 0;

  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

inline int encode_group(int label, int spurious_attr, int num_classes) {
  return num_classes * spurious_attr + label;
}

inline std::pair<int, int> decode_group(int group, int num_classes) {
  return {group % num_classes, group / num_classes};
}

/*
 * Class-conditional core features plus attribute-conditional spurious
 * features. The attribute agrees with a label-derived value with probability
 * `rho`, so most of each class lands in one "majority" group and the spurious
 * block becomes a shortcut whenever spurious_separation > core_separation.
 */
struct GeneratorSpec {
  std::size_t n = 10000;
  int num_classes = 3;
  std::size_t core_dim = 10;
  std::size_t spurious_dim = 5;
  double rho = 0.95;
  double core_separation = 3.0;
  double spurious_separation = 6.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;
  // When > 0, ignore rho and emit exactly this many examples per group.
  std::size_t balanced_per_group = 0;

  bool operator==(const GeneratorSpec&) const = default;

  int group_count() const { return 2 * num_classes; }
  std::size_t feature_dim() const { return core_dim + spurious_dim; }

  void validate() const {
    require(num_classes >= 2, ErrorKind::InvalidSpec, "num_classes must be >= 2");
    require(core_dim >= static_cast<std::size_t>(num_classes), ErrorKind::InvalidSpec,
            "core_dim must be >= num_classes");
    require(spurious_dim >= 1, ErrorKind::InvalidSpec, "spurious_dim must be >= 1");
    require(rho >= 0.0 && rho <= 1.0, ErrorKind::InvalidSpec, "rho must lie in [0, 1]");
    require(core_separation > 0.0 && spurious_separation > 0.0, ErrorKind::InvalidSpec,
            "separations must be positive");
    require(noise_std >= 0.0 && std::isfinite(noise_std), ErrorKind::InvalidSpec,
            "noise_std must be >= 0");
    require(n > 0 || balanced_per_group > 0, ErrorKind::InvalidSpec, "n must be positive");
  }
};

inline void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = nlohmann::json{{"n", s.n},
                     {"num_classes", s.num_classes},
                     {"core_dim", s.core_dim},
                     {"spurious_dim", s.spurious_dim},
                     {"rho", s.rho},
                     {"core_separation", s.core_separation},
                     {"spurious_separation", s.spurious_separation},
                     {"noise_std", s.noise_std},
                     {"seed", s.seed},
                     {"balanced_per_group", s.balanced_per_group}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  const GeneratorSpec d;
  s.n = j.value("n", d.n);
  s.num_classes = j.value("num_classes", d.num_classes);
  s.core_dim = j.value("core_dim", d.core_dim);
  s.spurious_dim = j.value("spurious_dim", d.spurious_dim);
  s.rho = j.value("rho", d.rho);
  s.core_separation = j.value("core_separation", d.core_separation);
  s.spurious_separation = j.value("spurious_separation", d.spurious_separation);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.seed = j.value("seed", d.seed);
  s.balanced_per_group = j.value("balanced_per_group", d.balanced_per_group);
}

namespace detail {

// Attribute value shared by the majority of class `label`: class 0 carries
// the attribute, every other class does not.
inline int majority_attr(int label) { return label == 0 ? 1 : 0; }

inline Example draw_example(const GeneratorSpec& spec, int label, int attr, RngStream& rng) {
  Example ex;
  ex.label = label;
  ex.spurious_attr = attr;
  ex.group = encode_group(label, attr, spec.num_classes);
  ex.features.assign(spec.feature_dim(), 0.0);
  // Class means sit on scaled basis vectors: pairwise distance core_separation.
  const double core_offset = spec.core_separation / std::sqrt(2.0);
  for (std::size_t j = 0; j < spec.core_dim; ++j) {
    const double mean = j == static_cast<std::size_t>(label) ? core_offset : 0.0;
    ex.features[j] = mean + spec.noise_std * rng.normal();
  }
  // Attribute means at +/- separation/2 along the all-ones direction.
  const double spur_offset = (attr == 1 ? 0.5 : -0.5) * spec.spurious_separation /
                             std::sqrt(static_cast<double>(spec.spurious_dim));
  for (std::size_t j = 0; j < spec.spurious_dim; ++j)
    ex.features[spec.core_dim + j] = spur_offset + spec.noise_std * rng.normal();
  return ex;
}

}  // namespace detail

inline Dataset generate(const GeneratorSpec& spec) {
  spec.validate();
  RngStream rng(spec.seed);
  Dataset out;
  if (spec.balanced_per_group > 0) {
    out.reserve(spec.balanced_per_group * static_cast<std::size_t>(spec.group_count()));
    for (int g = 0; g < spec.group_count(); ++g) {
      const auto [label, attr] = decode_group(g, spec.num_classes);
      for (std::size_t i = 0; i < spec.balanced_per_group; ++i)
        out.push_back(detail::draw_example(spec, label, attr, rng));
    }
    rng.shuffle(out);
    return out;
  }
  out.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes)));
    const int majority = detail::majority_attr(label);
    const int attr = rng.bernoulli(spec.rho) ? majority : 1 - majority;
    out.push_back(detail::draw_example(spec, label, attr, rng));
  }
  return out;
}

inline bool is_majority_group(int group, int num_classes) {
  const auto [label, attr] = decode_group(group, num_classes);
  return attr == detail::majority_attr(label);
}

inline Matrix feature_matrix(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) return {};
  Matrix m(indices.size(), data[indices.front()].features.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& f = data[indices[r]].features;
    require(f.size() == m.cols(), ErrorKind::DimMismatch, "ragged feature vectors");
    std::copy(f.begin(), f.end(), m.row(r).begin());
  }
  return m;
}

inline std::vector<std::size_t> all_indices(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data.at(i));
  return out;
}

inline std::vector<int> labels_of(const Dataset& data) {
  std::vector<int> y;
  y.reserve(data.size());
  for (const auto& ex : data) y.push_back(ex.label);
  return y;
}

inline int infer_num_classes(const Dataset& data) {
  int c = 0;
  for (const auto& ex : data) c = std::max(c, ex.label + 1);
  return c;
}

// ---------------------------------------------------------------------------
// JSON-Lines persistence

inline nlohmann::json example_to_json(const Example& ex) {
  return nlohmann::json{{"features", ex.features},
                        {"label", ex.label},
                        {"group", ex.group},
                        {"spurious_attr", ex.spurious_attr}};
}

inline std::string dataset_to_jsonl(const Dataset& data, const GeneratorSpec* spec = nullptr) {
  std::ostringstream os;
  if (spec != nullptr) os << "# " << nlohmann::json(*spec).dump() << '\n';
  for (const auto& ex : data) os << example_to_json(ex).dump() << '\n';
  return os.str();
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& data,
                         const GeneratorSpec* spec = nullptr) {
  write_file_atomic(path, dataset_to_jsonl(data, spec));
}

/// Parses JSON-Lines; `#` lines and blank lines are skipped.
inline Dataset parse_dataset(std::istream& in) {
  Dataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.features = j.at("features").get<Vector>();
      ex.label = j.at("label").get<int>();
      ex.group = j.at("group").get<int>();
      ex.spurious_attr = j.at("spurious_attr").get<int>();
      require(all_finite(ex.features), ErrorKind::ParseError, "non-finite feature");
      require(ex.label >= 0 && ex.group >= 0 && (ex.spurious_attr == 0 || ex.spurious_attr == 1),
              ErrorKind::ParseError, "label/group/spurious_attr out of range");
      out.push_back(std::move(ex));
    } catch (const std::exception& e) {
      fail(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open dataset '" + path.string() + "'");
  return parse_dataset(in);
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/*
 * Seeded shuffle, then consecutive slices of sizes round(cumsum(f) * n).
 * Up to three fractions (train, val, test); when they sum to less than one
 * the remainder is left out.
 */
inline Split split(std::size_t n, std::span<const double> fractions, std::uint64_t seed) {
  require(!fractions.empty() && fractions.size() <= 3, ErrorKind::InvalidFractions,
          "expected 1 to 3 split fractions");
  double total = 0.0;
  for (double f : fractions) {
    require(f > 0.0 && std::isfinite(f), ErrorKind::InvalidFractions,
            "split fractions must be positive");
    total += f;
  }
  require(total <= 1.0 + 1e-12, ErrorKind::InvalidFractions,
          "split fractions sum to " + std::to_string(total));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream rng(seed);
  rng.shuffle(order);

  Split s;
  std::vector<std::size_t>* parts[3] = {&s.train, &s.val, &s.test};
  double cumulative = 0.0;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    cumulative += fractions[i];
    const auto end = std::min<std::size_t>(
        n, static_cast<std::size_t>(std::llround(cumulative * static_cast<double>(n))));
    parts[i]->assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
    begin = end;
  }
  return s;
}

}  // namespace uwkd
