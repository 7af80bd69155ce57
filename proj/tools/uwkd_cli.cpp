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

// uwkd: command-line driver for data generation, training, distillation and
// evaluation. Every command writes a manifest next to its primary output.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "uwkd/uwkd.hpp"

namespace fs = std::filesystem;
using namespace uwkd;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kManifestSchema = 1;
constexpr const char* kOutputRootEnv = "UWKD_OUTPUT_ROOT";

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::IoError: return 3;
    case ErrorKind::NotPositiveDefinite:
    case ErrorKind::InvalidDistribution: return 4;
    default: return 2;
  }
}

// Relative output paths resolve against $UWKD_OUTPUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0')
    return fs::path(root) / path;
  return path;
}

fs::path sibling(const fs::path& primary, const std::string& suffix) {
  return fs::path(primary.string() + suffix);
}

struct RunRecord {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> inputs;
  std::vector<fs::path> outputs;
  std::uint64_t seed = 0;
};

void write_output(RunRecord& run, const fs::path& path, const std::string& contents) {
  write_file_atomic(path, contents);
  run.outputs.push_back(path);
}

void add_input(RunRecord& run, const fs::path& path) { run.inputs[path.string()] = file_hash(path); }

void write_manifest(const RunRecord& run, const fs::path& primary, double seconds) {
  nlohmann::json outputs = nlohmann::json::object();
  for (const auto& p : run.outputs) outputs[p.string()] = file_hash(p);
  const nlohmann::json m{{"schema_version", kManifestSchema},
                         {"version", kVersion},
                         {"command", run.command},
                         {"argv", run.argv},
                         {"resolved_config", run.config},
                         {"inputs", run.inputs},
                         {"outputs", outputs},
                         {"seed", run.seed},
                         {"wall_time_seconds", seconds}};
  write_file_atomic(sibling(primary, ".manifest.json"), m.dump(2) + "\n");
  write_file_atomic(sibling(primary, ".config.json"), run.config.dump(2) + "\n");
}

// Config file first, then --set overrides, then dedicated flags.
struct ConfigSources {
  std::string file;
  std::vector<std::string> sets;
  std::set<std::string> explicit_keys;

  TrainingConfig resolve() {
    TrainingConfig cfg;
    if (!file.empty()) {
      std::istringstream in(read_file(file));
      std::string line;
      while (std::getline(in, line)) {
        const auto eq = line.find('=');
        const auto hash = line.find('#');
        if (eq != std::string::npos && (hash == std::string::npos || eq < hash))
          explicit_keys.insert(detail::trim(line.substr(0, eq)));
      }
      std::istringstream again(read_file(file));
      apply_config_text(cfg, again);
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      require(eq != std::string::npos, ErrorKind::ConfigMismatch, "--set expects key=value, got '" + kv + "'");
      const auto key = detail::trim(kv.substr(0, eq));
      apply_setting(cfg, key, detail::trim(kv.substr(eq + 1)));
      explicit_keys.insert(key);
    }
    return cfg;
  }
};

void add_config_options(CLI::App* cmd, ConfigSources& src) {
  cmd->add_option("--config", src.file, "Config file (key = value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--set", src.sets, "Override one config key (key=value), repeatable");
}

// The first two split parts feed training and per-epoch validation.
struct TrainVal {
  Dataset train;
  Dataset val;
};

TrainVal split_for_training(const Dataset& data, const TrainingConfig& cfg) {
  require(!data.empty(), ErrorKind::EmptyDataset, "dataset is empty");
  const auto s = split(data.size(), cfg.split_fractions, cfg.seed);
  return {subset(data, s.train), subset(data, s.val)};
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string spec_file;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
  std::optional<std::size_t> balanced;
};

void gen_data(const GenDataArgs& a, RunRecord& run) {
  GeneratorSpec spec;
  if (!a.spec_file.empty()) {
    try {
      nlohmann::json::parse(read_file(a.spec_file)).get_to(spec);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::InvalidSpec, "spec '" + a.spec_file + "': " + e.what());
    }
    add_input(run, a.spec_file);
  }
  if (a.seed) spec.seed = *a.seed;
  if (a.n) spec.n = *a.n;
  if (a.balanced) spec.balanced_per_group = *a.balanced;
  spec.validate();
  run.config = nlohmann::json(spec);
  run.seed = spec.seed;
  const fs::path out = output_path(a.out);
  const Dataset data = generate(spec);
  write_output(run, out, dataset_to_jsonl(data, &spec));
  std::cerr << "wrote " << data.size() << " examples to " << out.string() << "\n";
}

struct TrainTeacherArgs {
  std::string data;
  std::string out;
  ConfigSources cfg;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

void train_teacher_cmd(TrainTeacherArgs& a, RunRecord& run) {
  TrainingConfig cfg = a.cfg.resolve();
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  add_input(run, a.data);
  const auto parts = split_for_training(load_dataset(a.data), cfg);
  const Mlp teacher = train_teacher(parts.train, cfg);
  const fs::path out = output_path(a.out);
  run.config = config_to_json(cfg);
  run.seed = cfg.seed;
  write_output(run, out, checkpoint_to_json(teacher, "teacher").dump() + "\n");
  if (!parts.val.empty()) {
    const auto report = evaluate_groups(teacher, parts.val, a.threads);
    write_output(run, sibling(out, ".report.json"), to_json(report).dump(2) + "\n");
    std::cerr << "teacher val: average " << report.average_accuracy << ", worst group "
              << report.worst_group_accuracy << "\n";
  }
}

struct DistillArgs {
  std::string teacher;
  std::string data;
  std::string strategy;
  std::string out;
  ConfigSources cfg;
  std::optional<std::uint64_t> seed;
  std::optional<double> beta;
};

void distill_cmd(DistillArgs& a, RunRecord& run) {
  TrainingConfig cfg = a.cfg.resolve();
  if (!a.strategy.empty()) {
    const auto gating = cfg.strategy.gating;
    cfg.set_strategy(parse_weighting(a.strategy));
    if (a.cfg.explicit_keys.count("gating")) cfg.strategy.gating = gating;
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.beta) {
    cfg.beta_w = *a.beta;
    a.cfg.explicit_keys.insert("beta_w");
  }
  cfg.validate();
  if (cfg.strategy.kind == WeightingKind::Uniform && cfg.beta_w > 0.0 && a.cfg.explicit_keys.count("beta_w"))
    std::cerr << "warning: strategy uniform ignores beta_w = " << cfg.beta_w << "\n";

  add_input(run, a.teacher);
  add_input(run, a.data);
  const auto teacher = load_checkpoint(a.teacher).net;
  const auto parts = split_for_training(load_dataset(a.data), cfg);
  require(teacher.input_dim() == parts.train.front().features.size(), ErrorKind::DimMismatch,
          "teacher reads " + std::to_string(teacher.input_dim()) + " features, data has " +
              std::to_string(parts.train.front().features.size()));
  const auto result = distill(teacher, parts.train, cfg, parts.val.empty() ? nullptr : &parts.val);

  const fs::path out = output_path(a.out);
  run.config = config_to_json(cfg);
  run.seed = cfg.seed;
  write_output(run, out, checkpoint_to_json(result.student, model_fingerprint(cfg)).dump() + "\n");
  write_output(run, sibling(out, ".metrics.csv"), history_to_csv(result.history));
  if (result.aux) {
    const std::size_t depth =
        cfg.aux_feature_source == FeatureSource::Teacher ? 0 : cfg.exit_depth;
    write_output(run, sibling(out, ".aux.json"), aux_head_to_json(*result.aux, depth).dump() + "\n");
  }
  if (!result.history.empty() && result.history.back().worst_group_accuracy)
    std::cerr << "student val: average " << *result.history.back().average_accuracy
              << ", worst group " << *result.history.back().worst_group_accuracy << "\n";
}

struct EvalArgs {
  std::string model;
  std::string data;
  std::string out;
  std::string aux;
  bool laplace_report = false;
  bool margins = false;
  std::size_t threads = 1;
  std::size_t probe_epochs = 5;
  std::size_t mc_samples = 1000;
  std::uint64_t seed = 0;
};

void eval_cmd(const EvalArgs& a, RunRecord& run) {
  add_input(run, a.model);
  add_input(run, a.data);
  const Mlp model = load_checkpoint(a.model).net;
  const Dataset data = load_dataset(a.data);
  require(!data.empty(), ErrorKind::EmptyDataset, "dataset is empty");
  require(model.input_dim() == data.front().features.size(), ErrorKind::DimMismatch,
          "model reads " + std::to_string(model.input_dim()) + " features, data has " +
              std::to_string(data.front().features.size()));
  run.seed = a.seed;
  run.config = {{"laplace_report", a.laplace_report}, {"margins", a.margins},
                {"threads", a.threads}, {"probe_epochs", a.probe_epochs},
                {"mc_samples", a.mc_samples}, {"aux", a.aux}};
  const fs::path prefix = output_path(a.out.empty() ? a.model + ".eval" : a.out);

  const auto report = evaluate_groups(model, data, a.threads);
  write_output(run, sibling(prefix, ".groups.json"), to_json(report).dump(2) + "\n");
  write_output(run, sibling(prefix, ".groups.csv"), to_csv(report));
  std::cout << "average " << report.average_accuracy << " worst_group " << report.worst_group_accuracy
            << " (group " << report.worst_group_id << ")\n";

  const RngStream root(a.seed);
  if (a.laplace_report) {
    std::vector<Vector> probs;
    for (const auto& ex : data) probs.push_back(softmax(predict_logits(model, ex.features)));
    const auto labels = labels_of(data);
    const auto cal = calibration_report(probs, labels);
    write_output(run, sibling(prefix, ".calibration.json"), to_json(cal).dump(2) + "\n");
    write_output(run, sibling(prefix, ".calibration.csv"), to_csv(cal));

    if (!a.aux.empty()) {
      add_input(run, a.aux);
      const auto j = nlohmann::json::parse(read_file(a.aux));
      const AuxHead head = aux_head_from_json(j);
      const auto depth = j.at("exit_depth").get<std::size_t>();
      require(depth >= 1, ErrorKind::ConfigMismatch, "aux head reads teacher features; need a student exit");
      const Matrix feats = detail::layer_features(model, data, depth);
      const auto post = LaplacePosterior::fit(head, feats);
      write_output(run, sibling(prefix, ".posterior.json"), posterior_to_json(post).dump(2) + "\n");
      const RngStream mc = root.split(stream::kMonteCarlo);
      std::vector<Vector> aux_probs(data.size());
      parallel_chunks(data.size(), a.threads, [&](std::size_t b, std::size_t e, std::size_t) {
        for (std::size_t i = b; i < e; ++i) {
          auto rng = mc.split(i);
          aux_probs[i] = mc_predictive_softmax(laplace_predictive(post, feats.row(i)), a.mc_samples, 1.0, rng);
        }
      });
      const auto aux_cal = calibration_report(aux_probs, labels);
      write_output(run, sibling(prefix, ".aux_calibration.json"), to_json(aux_cal).dump(2) + "\n");
    }
  }
  if (a.margins) {
    std::vector<std::size_t> depths(model.hidden_depth());
    std::iota(depths.begin(), depths.end(), std::size_t{1});
    const auto probes = train_layer_probes(model, data, depths, a.probe_epochs, root.split(stream::kProbes));
    const auto profile = margin_profile(model, probes, data, depths);
    write_output(run, sibling(prefix, ".margins.csv"), to_csv(profile));
  }
}

// Re-executes the argv recorded in a manifest.
int run_cli(std::vector<std::string> args);

int rerun_cmd(const std::string& manifest) {
  const auto j = nlohmann::json::parse(read_file(manifest));
  require(j.value("schema_version", 0) == kManifestSchema, ErrorKind::ParseError,
          "unsupported manifest schema");
  return run_cli(j.at("argv").get<std::vector<std::string>>());
}

int run_cli(std::vector<std::string> args) {
  CLI::App app{"Uncertainty-weighted knowledge distillation toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic spurious-correlation dataset");
  gen->add_option("--spec", gd.spec_file, "Generator spec (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--out", gd.out, "Output JSON-Lines file")->required();
  gen->add_option("--seed", gd.seed, "Override the spec seed");
  gen->add_option("--n", gd.n, "Override the example count");
  gen->add_option("--balanced-per-group", gd.balanced, "Emit exactly this many examples per group");

  TrainTeacherArgs tt;
  auto* teach = app.add_subcommand("train-teacher", "Train the teacher network by cross-entropy");
  teach->add_option("--data", tt.data, "Dataset (JSON-Lines)")->required()->check(CLI::ExistingFile);
  teach->add_option("--out", tt.out, "Teacher checkpoint path")->required();
  teach->add_option("--seed", tt.seed, "Root seed");
  teach->add_option("--threads", tt.threads, "Evaluation threads")->check(CLI::PositiveNumber);
  add_config_options(teach, tt.cfg);

  DistillArgs da;
  auto* dist = app.add_subcommand("distill", "Distill a student from a trained teacher");
  dist->add_option("--teacher", da.teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  dist->add_option("--data", da.data, "Dataset (JSON-Lines)")->required()->check(CLI::ExistingFile);
  dist->add_option("--strategy", da.strategy, "uniform | margin | laplace")
      ->check(CLI::IsMember({"uniform", "margin", "laplace", "laplace_entropy"}));
  dist->add_option("--out", da.out, "Student checkpoint path")->required();
  dist->add_option("--seed", da.seed, "Root seed");
  dist->add_option("--beta", da.beta, "Weight scale beta_w");
  add_config_options(dist, da.cfg);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint per group");
  eval->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", ev.data, "Dataset (JSON-Lines)")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", ev.out, "Output prefix (default: <model>.eval)");
  eval->add_flag("--laplace-report", ev.laplace_report, "Write calibration (and posterior with --aux)");
  eval->add_option("--aux", ev.aux, "Aux head written by distill")->check(CLI::ExistingFile);
  eval->add_flag("--margins", ev.margins, "Write per-layer confidence margins");
  eval->add_option("--threads", ev.threads, "Evaluation threads")->check(CLI::PositiveNumber);
  eval->add_option("--probe-epochs", ev.probe_epochs, "Epochs per margin probe");
  eval->add_option("--mc-samples", ev.mc_samples, "Monte-Carlo samples for the aux predictive");
  eval->add_option("--seed", ev.seed, "Seed for probes and sampling");

  std::string manifest;
  auto* rerun = app.add_subcommand("rerun", "Repeat the command recorded in a manifest");
  rerun->add_option("manifest", manifest, "Manifest JSON")->required()->check(CLI::ExistingFile);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const auto start = std::chrono::steady_clock::now();
  RunRecord run;
  run.argv = args;
  fs::path primary;
  try {
    if (*rerun) return rerun_cmd(manifest);
    if (*gen) {
      run.command = "gen-data";
      gen_data(gd, run);
      primary = output_path(gd.out);
    } else if (*teach) {
      run.command = "train-teacher";
      train_teacher_cmd(tt, run);
      primary = output_path(tt.out);
    } else if (*dist) {
      run.command = "distill";
      distill_cmd(da, run);
      primary = output_path(da.out);
    } else {
      run.command = "eval";
      eval_cmd(ev, run);
      primary = output_path(ev.out.empty() ? ev.model + ".eval" : ev.out);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(run, primary, secs);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
