#pragma once

// Seeded multi-length experiment: isolated models at every training length, the
// long-length prototype, and FLN, all on one synthetic dataset.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fln/data.hpp"
#include "fln/eval.hpp"
#include "fln/train.hpp"

namespace fln::acceptance {

struct ShiftExperiment {
  SyntheticConfig data;
  TrainSetup setup;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  EvalOptions eval;
  bool verbose = false;
};

ShiftExperiment default_shift_experiment();

struct SeedOutcome {
  std::uint64_t seed = 0;
  // "IT-2", "IT-6", "IT-8", "FLN" -> ADE at H_S, H_M, H_L on the test split.
  std::map<std::string, std::array<double, 3>> ade;
  double ln_gap_isolated = 0.0;  // IT at H_S vs IT at H_L
  double ln_gap_fln = 0.0;       // FLN branch S vs IT at H_S
  double seconds = 0.0;
};

struct ShiftOutcome {
  std::vector<SeedOutcome> seeds;
  double seconds = 0.0;

  double mean_ade(const std::string& model, std::size_t length_index) const;
  double mean_ln_gap_isolated() const;
  double mean_ln_gap_fln() const;
  std::string table(const LengthSet& lengths) const;
};

ShiftOutcome run_shift_experiment(const ShiftExperiment& experiment);

}  // namespace fln::acceptance
