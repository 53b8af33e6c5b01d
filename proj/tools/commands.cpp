#include "commands.hpp"

#include <filesystem>

#include <json.hpp>

#include "fln/checkpoint.hpp"
#include "fln/error.hpp"
#include "fln/eval.hpp"
#include "fln/fln.hpp"
#include "fln/io.hpp"
#include "fln/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace flnlab {

namespace {

void apply_overrides(fln::RunConfig& config, const CommonOptions& common) {
  for (const auto& kv : common.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (common.seed) config.seed = *common.seed;
  if (common.deterministic) config.deterministic = true;
}

std::string checkpoint_name(const std::string& phase) {
  if (phase.rfind("joint-", 0) == 0) return "checkpoint_" + phase.substr(6) + ".ckpt";
  return "checkpoint.ckpt";
}

// Test scenes of `raw`, normalized with statistics from training.
std::vector<fln::TrajectoryScene> test_split(const std::vector<fln::TrajectoryScene>& raw,
                                             const fln::NormalizationStats& stats) {
  std::vector<fln::TrajectoryScene> test;
  for (const auto& s : raw) {
    if (fln::split_bucket(s.id) == 2) test.push_back(s);
  }
  if (test.empty()) throw std::runtime_error("dataset has no test scenes");
  return fln::normalize(test, stats);
}

fln::Checkpoint open_checkpoint(const std::string& path, const CommonOptions& common) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  fln::Checkpoint ck = fln::load_checkpoint(path);
  apply_overrides(ck.config, common);
  ck.config.validate();
  return ck;
}

fln::EvalOptions eval_options(const fln::RunConfig& config, std::optional<std::size_t> samples) {
  fln::EvalOptions opts = config.eval;
  if (samples) opts.samples = *samples;
  opts.seed = config.seed;
  opts.threads = config.deterministic ? 1 : config.threads;
  if (opts.samples == 0) throw UsageError("--samples must be positive");
  return opts;
}

}  // namespace

fln::RunConfig resolve_config(const CommonOptions& common) {
  fln::RunConfig config;
  if (!common.config_path.empty()) config = fln::RunConfig::load(common.config_path);
  apply_overrides(config, common);
  config.validate();
  return config;
}

std::vector<fln::TrajectoryScene> load_scenes(const std::string& path, const fln::RunConfig& config) {
  if (path.empty()) throw UsageError("--data is required");
  if (!fs::exists(path)) throw std::runtime_error("data path not found: " + path);
  if (fs::is_directory(path)) return fln::load_dataset(path);
  fln::TrajnetOptions opts;
  opts.window = config.scene_steps();
  opts.window_step = config.trajnet_window_step;
  opts.dt = config.synthetic.dt;
  return fln::load_trajnet(path, opts);
}

int cmd_generate(const CommonOptions& common, std::ostream& log) {
  fln::RunConfig config = resolve_config(common);
  fln::SyntheticConfig synth = config.synthetic;
  synth.steps = config.scene_steps();
  synth.seed = config.seed;
  synth.validate();
  const auto scenes = fln::generate_synthetic(synth);

  fln::DatasetManifest manifest;
  manifest.seed = config.seed;
  manifest.dt = synth.dt;
  manifest.mix = synth.mix;
  manifest.steps = synth.steps;
  fln::save_dataset(common.out, scenes, manifest);
  std::size_t agents = 0;
  for (const auto& s : scenes) agents += s.agents();
  log << "wrote " << scenes.size() << " scenes, " << agents << " agents, seed " << config.seed
      << " to " << common.out << "\n";
  return 0;
}

int cmd_train(const CommonOptions& common, const TrainOptions& options, std::ostream& log) {
  fln::RunConfig config = resolve_config(common);
  if (options.strategy) config.train.strategy = fln::parse_strategy(*options.strategy);
  if (options.length) config.train.length = *options.length;
  if (config.train.strategy == fln::Strategy::isolated && !options.length && config.train.length == 0) {
    throw UsageError("strategy isolated requires --length");
  }
  config.validate();
  const auto raw = load_scenes(options.data, config);
  const fln::DatasetSplit split = fln::split_dataset(raw, config.branches.lengths[2] - 1);
  const fln::TrainSetup setup = config.setup();
  const fs::path out = common.out;
  fs::create_directories(out);

  auto on_epoch = [&](const fln::FlnModel& model, const fln::AdamState& state,
                      const fln::EpochRecord& rec) {
    fln::Checkpoint ck{config, model, state, rec.epoch, split.stats};
    fln::save_checkpoint(out / checkpoint_name(rec.phase), ck);
    log << "epoch " << rec.epoch << " [" << rec.phase << "] total " << rec.total;
    for (const auto& [h, ade] : rec.val_ade) log << " val_ade@" << h << " " << ade;
    log << "\n";
  };
  fln::TrainResult result = fln::train(split, setup, on_epoch);

  const std::size_t epochs = result.log.epochs.size();
  if (config.train.strategy == fln::Strategy::joint) {
    for (std::size_t i = 0; i < result.models.size(); ++i) {
      fln::Checkpoint ck{config, result.models[i], std::nullopt, epochs, split.stats};
      fln::save_checkpoint(out / ("checkpoint_" + std::string(fln::branch_name(fln::kAllBranches[i])) + ".ckpt"), ck);
    }
  } else {
    fln::Checkpoint ck{config, result.models.front(), result.optimizer, epochs, split.stats};
    fln::save_checkpoint(out / "checkpoint.ckpt", ck);
  }
  if (result.pre_finetune) {
    fln::Checkpoint ck{config, *result.pre_finetune, std::nullopt, config.train.epochs, split.stats};
    fln::save_checkpoint(out / "pre_finetune.ckpt", ck);
  }

  fln::io::write_file_atomic(out / "train_log.csv", result.log.csv());
  json summary = result.log.summary();
  summary["config"] = json::object();
  for (const auto& [k, v] : config.items()) summary["config"][k] = v;
  summary["train_scenes"] = split.train.size();
  summary["validation_scenes"] = split.validation.size();
  summary["model_lengths"] = result.model_lengths;
  summary["parameters"] = result.models.front().params().numel();
  fln::io::write_file_atomic(out / "train_summary.json", summary.dump(2) + "\n");
  log << "trained " << fln::strategy_name(config.train.strategy) << " for " << epochs
      << " epochs, seed " << config.seed << "; outputs in " << out.string() << "\n";
  return 0;
}

int cmd_eval(const CommonOptions& common, const EvalOptions& options, std::ostream& log) {
  if (options.length == 0) throw UsageError("--length must be positive");
  const fln::Checkpoint ck = open_checkpoint(options.checkpoint, common);
  const fln::EvalOptions opts = eval_options(ck.config, options.samples);
  const auto test = test_split(load_scenes(options.data, ck.config), ck.normalization);
  const fln::Metrics m = fln::evaluate(ck.model, test, options.length, ck.config.window(), opts);

  const fs::path out = common.out;
  fs::create_directories(out);
  fln::io::write_file_atomic(out / "eval_metrics.csv", fln::metrics_csv({m}));
  json j = fln::metrics_json(m);
  j["seed"] = ck.config.seed;
  j["checkpoint"] = options.checkpoint;
  fln::io::write_file_atomic(out / "eval_metrics.json", j.dump(2) + "\n");
  log << "length " << m.length;
  if (m.branch) log << " branch " << fln::branch_name(*m.branch);
  log << " ADE_" << m.samples << " " << m.ade << " FDE_" << m.samples << " " << m.fde << " over "
      << m.scenes << " scenes\n";
  return 0;
}

int cmd_probe(const CommonOptions& common, const ProbeOptions& options, std::ostream& log) {
  const fs::path out = common.out;
  if (options.kind == "pe") {
    fln::PeDeviationReport report;
    if (options.checkpoints.empty()) {
      const fln::RunConfig config = resolve_config(common);
      if (options.h1 == 0 || options.h2 == 0) throw UsageError("pe probe needs --h1 and --h2");
      report = fln::pe_deviation_report(config.backbone, options.h1, options.h2);
    } else if (options.checkpoints.size() == 2) {
      const auto a = open_checkpoint(options.checkpoints[0], common);
      const auto b = open_checkpoint(options.checkpoints[1], common);
      const fln::BranchId branch = fln::parse_branch(options.branch.value_or("L"));
      if (a.config.backbone.pe != fln::PeKind::learnable || b.config.backbone.pe != fln::PeKind::learnable) {
        throw UsageError("comparing checkpoints needs learnable positional tables");
      }
      report = fln::pe_deviation_report(a.model.pe_table(branch), b.model.pe_table(branch));
    } else {
      throw UsageError("pe probe takes no checkpoint or exactly two");
    }
    fs::create_directories(out);
    fln::io::write_file_atomic(out / "pe_deviation.csv", report.csv());
    log << "pe deviation over " << report.distance.size() << " timesteps written to "
        << (out / "pe_deviation.csv").string() << "\n";
    return 0;
  }
  if (options.kind != "ln") throw UsageError("unknown probe kind '" + options.kind + "' (use ln or pe)");
  if (options.checkpoints.empty()) throw UsageError("ln probe needs at least one --checkpoint");

  std::vector<fln::Checkpoint> cks;
  for (const auto& path : options.checkpoints) cks.push_back(open_checkpoint(path, common));
  const auto raw = load_scenes(options.data, cks.front().config);
  fs::create_directories(out);
  json summary = json::array();
  for (std::size_t i = 0; i < cks.size(); ++i) {
    const auto& ck = cks[i];
    fln::BranchId branch = fln::BranchId::L;
    if (options.branch) {
      branch = fln::parse_branch(*options.branch);
    } else if (options.length && !ck.model.layout().is_single()) {
      branch = fln::route(*options.length, ck.model.layout());
    }
    const std::size_t length = options.length.value_or(ck.model.layout().length(branch));
    const auto scenes = test_split(raw, ck.normalization);
    const auto report = fln::ln_statistics_probe(ck.model, scenes, branch, length, ck.config.window());
    const std::string name = "ln_probe_" + std::to_string(i) + ".csv";
    fln::io::write_file_atomic(out / name, report.csv());
    summary.push_back({{"checkpoint", options.checkpoints[i]}, {"file", name},
                       {"branch", std::string(fln::branch_name(branch))}, {"length", length},
                       {"scenes", report.scenes}, {"seed", ck.config.seed}});
    log << "ln statistics of " << options.checkpoints[i] << " written to " << (out / name).string()
        << "\n";
  }
  fln::io::write_file_atomic(out / "ln_probe.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_sweep(const CommonOptions& common, const SweepOptions& options, std::ostream& log) {
  std::vector<std::size_t> lengths;
  if (!options.lengths.empty()) {
    try {
      lengths = fln::parse_length_list(options.lengths);
    } catch (const fln::ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  const fln::Checkpoint ck = open_checkpoint(options.checkpoint, common);
  if (lengths.empty()) {
    const auto& layout = ck.model.layout();
    const std::size_t lo = layout.is_single() ? 1 : layout.length(layout.branches().front());
    for (std::size_t h = lo; h <= layout.max_length(); ++h) lengths.push_back(h);
  }
  const fln::EvalOptions opts = eval_options(ck.config, options.samples);
  const auto test = test_split(load_scenes(options.data, ck.config), ck.normalization);
  const auto rows = fln::generality_sweep(ck.model, test, lengths, ck.config.window(), opts);

  const fs::path out = common.out;
  fs::create_directories(out);
  fln::io::write_file_atomic(out / "sweep.csv", fln::sweep_csv(rows));
  json j;
  j["seed"] = ck.config.seed;
  j["checkpoint"] = options.checkpoint;
  j["rows"] = json::array();
  for (const auto& r : rows) j["rows"].push_back(fln::metrics_json(r.metrics));
  fln::io::write_file_atomic(out / "sweep.json", j.dump(2) + "\n");
  for (const auto& r : rows) {
    log << "length " << r.length;
    if (r.metrics.branch) log << " branch " << fln::branch_name(*r.metrics.branch);
    log << " ADE " << r.metrics.ade << " FDE " << r.metrics.fde << "\n";
  }
  return 0;
}

}  // namespace flnlab
