#pragma once

// Best-of-K displacement metrics, per-length evaluation, length sweeps and the
// positional-encoding / layer-norm probes.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fln/backbone.hpp"
#include "fln/data.hpp"
#include "fln/distributions.hpp"

namespace fln {

// samples [K, agents, T, 2], gt [agents, T, 2]. Minimum over K per agent, then the
// mean over agents.
double ade(const Tensor& samples, const Tensor& gt);
double fde(const Tensor& samples, const Tensor& gt);

struct Metrics {
  double ade = 0.0;  // meters
  double fde = 0.0;
  std::size_t samples = 0;  // K
  std::size_t length = 0;   // observed length fed to the model
  std::size_t scenes = 0;
  std::size_t agents = 0;
  std::optional<BranchId> branch;  // routed branch for multi-branch models
};

struct EvalOptions {
  std::size_t samples = 3;
  SampleMode sampling = SampleMode::mode_means;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
  std::size_t threads = 1;  // >1 splits batches across threads; results do not depend on it
};

// Where predictions start: the observation occupies [start - H', start) and the
// future [start, start + horizon), with start = max(H_L, H').
struct EvalWindow {
  std::size_t long_length = 8;  // H_L of the dataset protocol
  std::size_t horizon = 12;
};

// Multi-branch models route H'; single models read the most recent steps, or feed a
// shorter input with their positional encoding at that length. Metrics are reported
// in world meters.
Metrics evaluate(const FlnModel& model, const std::vector<TrajectoryScene>& scenes,
                 std::size_t length, const EvalWindow& window, const EvalOptions& options = {});

struct SweepRow {
  std::size_t length = 0;
  Metrics metrics;
};

std::vector<SweepRow> generality_sweep(const FlnModel& model,
                                       const std::vector<TrajectoryScene>& scenes,
                                       const std::vector<std::size_t>& lengths,
                                       const EvalWindow& window, const EvalOptions& options = {});
std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string metrics_csv(const std::vector<Metrics>& rows);
nlohmann::json metrics_json(const Metrics& m);

struct LnSiteStats {
  std::string site;
  std::vector<double> mean;  // per token position: average of the per-token feature mean
  std::vector<double> std;   // per token position: average of the per-token population std
};

struct LnStatReport {
  BranchId branch = BranchId::L;
  std::size_t length = 0;
  std::size_t scenes = 0;
  std::vector<LnSiteStats> sites;

  const LnSiteStats& site(std::string_view name) const;
  std::string csv() const;
};

// Captures the input of every encoder layer norm for inputs of `length` steps fed
// to `branch`, and aggregates per time position over all scenes and agents.
LnStatReport ln_statistics_probe(const FlnModel& model, const std::vector<TrajectoryScene>& scenes,
                                 BranchId branch, std::size_t length, const EvalWindow& window);

// Largest per-position gap between the mean curves of two reports over all shared
// sites, with positions aligned on the most recent step.
double max_mean_gap(const LnStatReport& a, const LnStatReport& b);

struct PeDeviationReport {
  std::size_t h1 = 0, h2 = 0;
  std::vector<double> distance;  // per timestep shared by both lengths
  std::string csv() const;
};

// Sinusoidal tables evaluated at two window lengths.
PeDeviationReport pe_deviation_report(const BackboneConfig& config, std::size_t h1, std::size_t h2);
// Two learned tables [H1, d] and [H2, d], compared row by row.
PeDeviationReport pe_deviation_report(const Tensor& table1, const Tensor& table2);

}  // namespace fln
