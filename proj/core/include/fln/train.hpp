#pragma once

// Adam and the training protocols: FLN, isolated, mixed-length sampling,
// fine-tuning and joint training on an expanded dataset.

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fln/backbone.hpp"
#include "fln/data.hpp"
#include "fln/eval.hpp"
#include "fln/fln.hpp"

namespace fln {

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update of every parameter that holds a gradient.
void adam_step(ParameterStore& params, AdamState& state, double learning_rate,
               const AdamConfig& adam = {});

enum class Strategy { fln, isolated, mixed, finetune, joint };
std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

struct TrainConfig {
  Strategy strategy = Strategy::fln;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
  std::array<double, 3> rho{0.5, 0.5, 0.5};  // mixed: S, M, L sampling weights
  std::size_t length = 0;                    // isolated: training length, 0 = H_L
  std::size_t source_length = 0;             // finetune: first stage, 0 = H_L
  std::size_t target_length = 0;             // finetune: second stage, 0 = H_S
  std::size_t patience = 5;                  // finetune: epochs without validation gain
  std::size_t max_finetune_epochs = 30;
  bool validate_each_epoch = true;
  DerivationMode derivation = DerivationMode::truncation;
  EvalOptions validation;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, monotone over the whole run
  std::string phase;      // "train", "source", "target", or "joint-S" etc.
  double regression = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::size_t batches = 0;
  std::map<std::size_t, double> val_ade;  // by observed length
  std::map<std::size_t, double> val_fde;
  double seconds = 0.0;
};

struct TrainLog {
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;

  std::string csv() const;
  nlohmann::json summary() const;
};

// Everything a protocol needs besides the data.
struct TrainSetup {
  BackboneConfig backbone;
  BranchConfig branches;
  TrainConfig train;
};

// Called after every completed epoch with the model being trained.
using EpochCallback =
    std::function<void(const FlnModel& model, const AdamState& state, const EpochRecord& record)>;

struct TrainResult {
  // One model, except for joint training which keeps one per length (S, M, L order).
  std::vector<FlnModel> models;
  std::vector<std::size_t> model_lengths;
  std::optional<FlnModel> pre_finetune;
  AdamState optimizer;
  TrainLog log;
};

TrainResult train_fln(const DatasetSplit& data, const TrainSetup& setup,
                      const EpochCallback& on_epoch = {});
TrainResult train_isolated(const DatasetSplit& data, std::size_t length, const TrainSetup& setup,
                           const EpochCallback& on_epoch = {});
TrainResult train_mixed(const DatasetSplit& data, const std::array<double, 3>& rho,
                        const TrainSetup& setup, const EpochCallback& on_epoch = {});
TrainResult train_finetune(const DatasetSplit& data, const TrainSetup& setup,
                           const EpochCallback& on_epoch = {});
TrainResult train_joint(const DatasetSplit& data, const TrainSetup& setup,
                        const EpochCallback& on_epoch = {});

// Dispatches on setup.train.strategy.
TrainResult train(const DatasetSplit& data, const TrainSetup& setup,
                  const EpochCallback& on_epoch = {});

// Length drawn per iteration by mixed training; weights are renormalized.
class LengthSampler {
 public:
  LengthSampler(const std::array<double, 3>& rho, std::uint64_t seed);
  std::size_t draw();  // 0 = S, 1 = M, 2 = L
  const std::array<double, 3>& probabilities() const { return probabilities_; }

 private:
  std::array<double, 3> probabilities_;
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> dist_;
};

// Samples of the joint protocol: every scene at every training length.
struct JointSample {
  std::size_t scene = 0;
  std::size_t branch = 0;  // index into the length set
};
std::vector<JointSample> expand_joint(const std::vector<TrajectoryScene>& scenes);

// Seeds of the independent random streams used by a run.
std::uint64_t stream_seed(std::uint64_t seed, std::string_view stream);

}  // namespace fln
