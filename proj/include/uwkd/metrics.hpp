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
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "uwkd/data.hpp"
#include "uwkd/error.hpp"
#include "uwkd/network.hpp"
#include "uwkd/numerics.hpp"

namespace uwkd {

/*
 * Runs `body(begin, end, worker)` over [0, n) split into contiguous chunks.
 * Callers reduce per-worker partials in worker order, which keeps results
 * independent of scheduling.
 */
template <typename Body>
void parallel_chunks(std::size_t n, std::size_t threads, Body&& body) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    body(std::size_t{0}, n, std::size_t{0});
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    const std::size_t begin = std::min(n, w * chunk);
    const std::size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&body, begin, end, w] { body(begin, end, w); });
  }
  for (auto& t : pool) t.join();
}

struct GroupStat {
  int group = 0;
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct GroupReport {
  std::vector<GroupStat> groups;  // indexed by group id
  std::size_t total = 0;
  std::size_t correct = 0;
  double average_accuracy = 0.0;
  double worst_group_accuracy = 0.0;
  int worst_group_id = -1;
};

inline GroupReport summarize_groups(std::span<const int> groups, const std::vector<bool>& correct) {
  require(groups.size() == correct.size(), ErrorKind::DimMismatch, "group/correctness counts differ");
  require(!groups.empty(), ErrorKind::EmptyDataset, "no examples to evaluate");
  const int group_count = *std::max_element(groups.begin(), groups.end()) + 1;
  GroupReport r;
  r.groups.resize(static_cast<std::size_t>(group_count));
  for (int g = 0; g < group_count; ++g) r.groups[static_cast<std::size_t>(g)].group = g;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto& s = r.groups[static_cast<std::size_t>(groups[i])];
    ++s.count;
    if (correct[i]) ++s.correct;
  }
  r.total = groups.size();
  r.worst_group_accuracy = std::numeric_limits<double>::infinity();
  for (auto& s : r.groups) {
    r.correct += s.correct;
    if (s.count == 0) continue;
    s.accuracy = static_cast<double>(s.correct) / static_cast<double>(s.count);
    if (s.accuracy < r.worst_group_accuracy) {
      r.worst_group_accuracy = s.accuracy;
      r.worst_group_id = s.group;
    }
  }
  r.average_accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

/// Argmax predictions of `model`, tallied per group, overall and worst.
inline GroupReport evaluate_groups(const Mlp& model, const Dataset& data, std::size_t threads = 1) {
  require(!data.empty(), ErrorKind::EmptyDataset, "evaluate_groups: empty dataset");
  std::vector<int> groups(data.size());
  std::vector<char> correct(data.size());
  parallel_chunks(data.size(), threads, [&](std::size_t b, std::size_t e, std::size_t) {
    for (std::size_t i = b; i < e; ++i) {
      groups[i] = data[i].group;
      correct[i] = static_cast<int>(argmax(predict_logits(model, data[i].features))) == data[i].label;
    }
  });
  return summarize_groups(groups, std::vector<bool>(correct.begin(), correct.end()));
}

inline nlohmann::json to_json(const GroupReport& r) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& s : r.groups)
    groups.push_back({{"group", s.group}, {"count", s.count}, {"correct", s.correct},
                      {"accuracy", s.accuracy}});
  return {{"groups", groups},
          {"total", r.total},
          {"average_accuracy", r.average_accuracy},
          {"worst_group_accuracy", r.worst_group_accuracy},
          {"worst_group_id", r.worst_group_id}};
}

inline std::string to_csv(const GroupReport& r) {
  std::ostringstream os;
  os << "group,count,correct,accuracy\n";
  for (const auto& s : r.groups)
    os << s.group << ',' << s.count << ',' << s.correct << ',' << nlohmann::json(s.accuracy).dump()
       << '\n';
  return os.str();
}

/// Top probability minus runner-up.
inline double confidence_margin(std::span<const double> p) {
  require(p.size() >= 2, ErrorKind::InvalidDistribution, "margin needs at least two classes");
  check_distribution(p);
  double first = -1.0, second = -1.0;
  for (double v : p) {
    if (v > first) {
      second = first;
      first = v;
    } else if (v > second) {
      second = v;
    }
  }
  return std::clamp(first - second, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Margin profile across layers

enum class Cohort { All, WorstGroup, Wrong };

inline std::string_view to_string(Cohort c) {
  switch (c) {
    case Cohort::All: return "all";
    case Cohort::WorstGroup: return "worst_group";
    case Cohort::Wrong: return "wrong";
  }
  return "all";
}

struct MarginRow {
  std::size_t layer = 0;
  Cohort cohort = Cohort::All;
  std::size_t count = 0;
  double mean_margin = 0.0;
};

struct MarginProfile {
  std::vector<MarginRow> rows;
  int worst_group_id = -1;
  std::string protocol;
};

// Linear probe per hidden depth; probes[d - 1] reads layer d.
using LayerProbes = std::vector<std::optional<AuxHead>>;

/*
 * Fresh linear probes on frozen features of the requested depths, trained by
 * cross-entropy for `epochs` passes.
 */
inline LayerProbes train_layer_probes(const Mlp& model, const Dataset& data,
                                      std::span<const std::size_t> depths, std::size_t epochs,
                                      RngStream rng, const AuxTrainOptions& options = {}) {
  require(!data.empty(), ErrorKind::EmptyDataset, "train_layer_probes: empty dataset");
  LayerProbes probes(model.hidden_depth());
  const auto labels = labels_of(data);
  std::vector<ActivationTrace> traces;
  traces.reserve(data.size());
  for (const auto& ex : data) traces.push_back(forward(model, ex.features).trace);
  for (std::size_t d : depths) {
    Matrix feats(data.size(), model.width_at(d));
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& phi = early_features(traces[i], d);
      std::copy(phi.begin(), phi.end(), feats.row(i).begin());
    }
    auto stream = rng.split(d);
    auto head = AuxHead::create(model.num_classes(), feats.cols(), stream);
    probes[d - 1] = train_aux(std::move(head), feats, labels, epochs, stream, options);
  }
  return probes;
}

/*
 * Mean confidence margin per layer for three cohorts: every example, the
 * worst group under the model's own final predictions, and the examples the
 * model gets wrong. Hidden layers read their probe; the final row
 * (layer = layer_count) uses the model's own output distribution.
 */
inline MarginProfile margin_profile(const Mlp& model, const LayerProbes& probes, const Dataset& data,
                                    std::span<const std::size_t> depths) {
  require(!data.empty(), ErrorKind::EmptyDataset, "margin_profile: empty dataset");
  for (std::size_t d : depths) {
    require(d >= 1 && d <= model.hidden_depth(), ErrorKind::DepthOutOfRange,
            "probe depth " + std::to_string(d) + " out of range");
    require(d <= probes.size() && probes[d - 1].has_value(), ErrorKind::ProbeMissing,
            "no probe for layer " + std::to_string(d));
  }

  std::vector<ActivationTrace> traces;
  std::vector<int> groups;
  std::vector<bool> correct;
  for (const auto& ex : data) {
    auto fr = forward(model, ex.features);
    correct.push_back(static_cast<int>(argmax(fr.logits)) == ex.label);
    groups.push_back(ex.group);
    traces.push_back(std::move(fr.trace));
  }
  const auto report = summarize_groups(groups, correct);

  MarginProfile profile;
  profile.worst_group_id = report.worst_group_id;

  auto add_layer = [&](std::size_t layer, const std::function<Vector(std::size_t)>& probs_of) {
    double sums[3] = {0, 0, 0};
    std::size_t counts[3] = {0, 0, 0};
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double cm = confidence_margin(probs_of(i));
      sums[0] += cm;
      ++counts[0];
      if (groups[i] == report.worst_group_id) {
        sums[1] += cm;
        ++counts[1];
      }
      if (!correct[i]) {
        sums[2] += cm;
        ++counts[2];
      }
    }
    const Cohort cohorts[3] = {Cohort::All, Cohort::WorstGroup, Cohort::Wrong};
    for (int c = 0; c < 3; ++c) {
      profile.rows.push_back({layer, cohorts[c], counts[c],
                              counts[c] ? sums[c] / static_cast<double>(counts[c]) : 0.0});
    }
  };

  for (std::size_t d : depths) {
    const AuxHead& probe = *probes[d - 1];
    add_layer(d, [&](std::size_t i) { return softmax(aux_forward(probe, early_features(traces[i], d))); });
  }
  add_layer(model.layer_count(), [&](std::size_t i) { return softmax(traces[i].outputs.back()); });
  return profile;
}

inline std::string to_csv(const MarginProfile& p) {
  std::ostringstream os;
  os << "layer,cohort,count,mean_margin\n";
  for (const auto& r : p.rows)
    os << r.layer << ',' << to_string(r.cohort) << ',' << r.count << ','
       << nlohmann::json(r.mean_margin).dump() << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double confidence = 0.0;
  double accuracy = 0.0;
};

struct CalibrationReport {
  double ece = 0.0;
  double nlpd = 0.0;
  std::size_t bin_count = 10;
  std::vector<CalibrationBin> bins;
};

inline std::vector<CalibrationBin> calibration_bins(std::span<const double> max_probs,
                                                    const std::vector<bool>& correct,
                                                    std::size_t bins) {
  require(!max_probs.empty(), ErrorKind::EmptyDataset, "calibration: no predictions");
  require(max_probs.size() == correct.size(), ErrorKind::DimMismatch,
          "calibration: probability and correctness counts differ");
  require(bins >= 1, ErrorKind::InvalidHyperparameter, "calibration: need at least one bin");
  std::vector<CalibrationBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lower = static_cast<double>(b) / static_cast<double>(bins);
    out[b].upper = static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  for (std::size_t i = 0; i < max_probs.size(); ++i) {
    const double p = max_probs[i];
    require(p >= 0.0 && p <= 1.0, ErrorKind::InvalidDistribution,
            "confidence " + std::to_string(p) + " outside [0, 1]");
    const auto b = std::min(bins - 1, static_cast<std::size_t>(p * static_cast<double>(bins)));
    ++out[b].count;
    out[b].confidence += p;
    out[b].accuracy += correct[i] ? 1.0 : 0.0;
  }
  for (auto& b : out) {
    if (b.count == 0) continue;
    b.confidence /= static_cast<double>(b.count);
    b.accuracy /= static_cast<double>(b.count);
  }
  return out;
}

/// Equal-width-bin expected calibration error over top-class confidence.
inline double ece(std::span<const double> max_probs, const std::vector<bool>& correct,
                  std::size_t bins = 10) {
  const auto table = calibration_bins(max_probs, correct, bins);
  const auto n = static_cast<double>(max_probs.size());
  double total = 0.0;
  for (const auto& b : table)
    if (b.count > 0) total += static_cast<double>(b.count) / n * std::abs(b.accuracy - b.confidence);
  return total;
}

/// Mean negative log probability of the true label, floored at 1e-12.
inline double nlpd(std::span<const Vector> probs, std::span<const int> labels) {
  require(!probs.empty(), ErrorKind::EmptyDataset, "nlpd: no predictions");
  require(probs.size() == labels.size(), ErrorKind::DimMismatch, "nlpd: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    check_distribution(probs[i]);
    const auto y = static_cast<std::size_t>(labels[i]);
    require(y < probs[i].size(), ErrorKind::LabelOutOfRange, "nlpd: label out of range");
    total -= std::log(std::max(probs[i][y], 1e-12));
  }
  return total / static_cast<double>(probs.size());
}

inline CalibrationReport calibration_report(std::span<const Vector> probs, std::span<const int> labels,
                                            std::size_t bins = 10) {
  require(probs.size() == labels.size(), ErrorKind::DimMismatch, "calibration: size mismatch");
  Vector max_probs;
  std::vector<bool> flags;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto k = argmax(probs[i]);
    max_probs.push_back(probs[i][k]);
    flags.push_back(static_cast<int>(k) == labels[i]);
  }
  CalibrationReport r;
  r.bin_count = bins;
  r.bins = calibration_bins(max_probs, flags, bins);
  r.ece = ece(max_probs, flags, bins);
  r.nlpd = nlpd(probs, labels);
  return r;
}

inline nlohmann::json to_json(const CalibrationReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : r.bins)
    bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count},
                    {"confidence", b.confidence}, {"accuracy", b.accuracy}});
  return {{"ece", r.ece}, {"nlpd", r.nlpd}, {"bin_count", r.bin_count}, {"bins", bins}};
}

inline std::string to_csv(const CalibrationReport& r) {
  std::ostringstream os;
  os << "bin,lower,upper,count,confidence,accuracy\n";
  for (std::size_t i = 0; i < r.bins.size(); ++i) {
    const auto& b = r.bins[i];
    os << i << ',' << nlohmann::json(b.lower).dump() << ',' << nlohmann::json(b.upper).dump() << ','
       << b.count << ',' << nlohmann::json(b.confidence).dump() << ','
       << nlohmann::json(b.accuracy).dump() << '\n';
  }
  return os.str();
}

}  // namespace uwkd
