#pragma once

// Subcommands of flnlab. Each validates its whole configuration before touching
// the filesystem and throws on failure; main() maps exceptions to exit codes.

#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fln/config.hpp"
#include "fln/data.hpp"

namespace flnlab {

// Bad command-line usage (exit code 2).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  bool deterministic = false;
  std::vector<std::string> overrides;  // "key=value"
};

fln::RunConfig resolve_config(const CommonOptions& common);

struct TrainOptions {
  std::string data;
  std::optional<std::string> strategy;
  std::optional<std::size_t> length;
};

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::size_t length = 0;
  std::optional<std::size_t> samples;
};

struct ProbeOptions {
  std::string kind;  // ln | pe
  std::vector<std::string> checkpoints;
  std::string data;
  std::optional<std::string> branch;
  std::optional<std::size_t> length;
  std::size_t h1 = 0, h2 = 0;
};

struct SweepOptions {
  std::string checkpoint;
  std::string data;
  std::string lengths;  // empty: H_S..H_L of the checkpoint
  std::optional<std::size_t> samples;
};

int cmd_generate(const CommonOptions& common, std::ostream& log);
int cmd_train(const CommonOptions& common, const TrainOptions& options, std::ostream& log);
int cmd_eval(const CommonOptions& common, const EvalOptions& options, std::ostream& log);
int cmd_probe(const CommonOptions& common, const ProbeOptions& options, std::ostream& log);
int cmd_sweep(const CommonOptions& common, const SweepOptions& options, std::ostream& log);

// Dataset directory (manifest.json + positions.bin) or a "frame agent x y" text file.
std::vector<fln::TrajectoryScene> load_scenes(const std::string& path, const fln::RunConfig& config);

}  // namespace flnlab
