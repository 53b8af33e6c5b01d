#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "fln/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"flnlab: multi-length trajectory prediction laboratory"};
  app.require_subcommand(1);

  flnlab::CommonOptions common;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "key = value configuration file");
    cmd->add_option("--seed", common.seed, "override the configured seed");
    cmd->add_option("--out", common.out, "output directory");
    cmd->add_flag("--deterministic", common.deterministic, "serial, bit-reproducible execution");
    cmd->add_option("--set", common.overrides, "configuration override key=value (repeatable)");
  };

  auto* generate = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(generate);

  flnlab::TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "train a model with one strategy");
  add_common(train_cmd);
  train_cmd->add_option("--data", train.data, "dataset directory or trajectory text file")->required();
  train_cmd->add_option("--strategy", train.strategy, "fln, isolated, mixed, finetune or joint");
  train_cmd->add_option("--length", train.length, "training length for isolated");

  flnlab::EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "ADE/FDE of a checkpoint at one observed length");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval.data, "dataset directory or trajectory text file")->required();
  eval_cmd->add_option("--length", eval.length, "observed length H'")->required();
  eval_cmd->add_option("--samples", eval.samples, "K for best-of-K");

  flnlab::ProbeOptions probe;
  auto* probe_cmd = app.add_subcommand("probe", "layer-norm statistics or positional-encoding deviation");
  add_common(probe_cmd);
  probe_cmd->add_option("kind", probe.kind, "ln or pe")->required();
  probe_cmd->add_option("--checkpoint", probe.checkpoints, "checkpoint file (repeatable)");
  probe_cmd->add_option("--data", probe.data, "dataset directory or trajectory text file");
  probe_cmd->add_option("--branch", probe.branch, "S, M or L");
  probe_cmd->add_option("--length", probe.length, "observed length");
  probe_cmd->add_option("--h1", probe.h1, "first length (pe)");
  probe_cmd->add_option("--h2", probe.h2, "second length (pe)");

  flnlab::SweepOptions sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "evaluate a checkpoint over many observed lengths");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--checkpoint", sweep.checkpoint, "checkpoint file")->required();
  sweep_cmd->add_option("--data", sweep.data, "dataset directory or trajectory text file")->required();
  sweep_cmd->add_option("--lengths", sweep.lengths, "e.g. 4..30 or 3,5,7 (default: shortest to longest branch)");
  sweep_cmd->add_option("--samples", sweep.samples, "K for best-of-K");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) return flnlab::cmd_generate(common, std::cout);
    if (*train_cmd) return flnlab::cmd_train(common, train, std::cout);
    if (*eval_cmd) return flnlab::cmd_eval(common, eval, std::cout);
    if (*probe_cmd) return flnlab::cmd_probe(common, probe, std::cout);
    if (*sweep_cmd) return flnlab::cmd_sweep(common, sweep, std::cout);
  } catch (const flnlab::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const fln::RoutingError& e) {
    std::cerr << "routing error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
