#include "fln/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "fln/error.hpp"
#include "fln/io.hpp"

namespace fln {

void adam_step(ParameterStore& params, AdamState& state, double learning_rate,
               const AdamConfig& adam) {
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(adam.beta1, t);
  const double correction2 = 1.0 - std::pow(adam.beta2, t);
  for (auto& [name, p] : params.entries()) {
    if (!p.requires_grad() || p.grad().empty()) continue;
    const auto g = p.grad();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != g.size()) m.assign(g.size(), 0.0);
    if (v.size() != g.size()) v.assign(g.size(), 0.0);
    auto w = p.mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
      v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + adam.epsilon);
    }
  }
}

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::fln:
      return "fln";
    case Strategy::isolated:
      return "isolated";
    case Strategy::mixed:
      return "mixed";
    case Strategy::finetune:
      return "finetune";
    default:
      return "joint";
  }
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::fln, Strategy::isolated, Strategy::mixed, Strategy::finetune,
                     Strategy::joint}) {
    if (strategy_name(s) == name) return s;
  }
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  for (double r : rho) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("rho values must lie in [0, 1]");
  }
  if (rho[0] + rho[1] + rho[2] <= 0.0) {
    throw ConfigError("at least one rho value must be positive");
  }
  if (strategy == Strategy::finetune && patience == 0) throw ConfigError("patience must be positive");
  if (validation.samples == 0) throw ConfigError("validation sample count must be positive");
}

std::uint64_t stream_seed(std::uint64_t seed, std::string_view stream) {
  // FNV-1a of the stream name, mixed with the run seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return mix_seed(seed, h);
}

LengthSampler::LengthSampler(const std::array<double, 3>& rho, std::uint64_t seed) : rng_(seed) {
  const double total = rho[0] + rho[1] + rho[2];
  if (!(total > 0)) throw ConfigError("at least one rho value must be positive");
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(rho[i] >= 0.0 && rho[i] <= 1.0)) throw ConfigError("rho values must lie in [0, 1]");
    probabilities_[i] = rho[i] / total;
  }
  dist_ = std::discrete_distribution<std::size_t>(rho.begin(), rho.end());
}

std::size_t LengthSampler::draw() { return dist_(rng_); }

std::vector<JointSample> expand_joint(const std::vector<TrajectoryScene>& scenes) {
  std::vector<JointSample> out;
  out.reserve(scenes.size() * 3);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < scenes.size(); ++i) out.push_back({i, b});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logs

std::string TrainLog::csv() const {
  std::set<std::size_t> lengths;
  for (const auto& e : epochs) {
    for (const auto& [h, v] : e.val_ade) lengths.insert(h);
  }
  std::vector<std::string> header{"epoch", "phase", "l_reg", "l_kl", "total", "batches"};
  for (std::size_t h : lengths) {
    header.push_back("val_ade_" + std::to_string(h));
    header.push_back("val_fde_" + std::to_string(h));
  }
  header.emplace_back("seconds");
  io::CsvWriter out(header);
  for (const auto& e : epochs) {
    std::vector<std::string> row{std::to_string(e.epoch), e.phase, io::format_double(e.regression),
                                 io::format_double(e.kl), io::format_double(e.total),
                                 std::to_string(e.batches)};
    for (std::size_t h : lengths) {
      auto a = e.val_ade.find(h);
      auto f = e.val_fde.find(h);
      row.push_back(a == e.val_ade.end() ? "" : io::format_double(a->second));
      row.push_back(f == e.val_fde.end() ? "" : io::format_double(f->second));
    }
    row.push_back(io::format_double(e.seconds));
    out.row(row);
  }
  return out.str();
}

nlohmann::json TrainLog::summary() const {
  nlohmann::json j;
  j["strategy"] = strategy;
  j["seed"] = seed;
  j["epochs"] = epochs.size();
  double seconds = 0.0;
  for (const auto& e : epochs) seconds += e.seconds;
  j["seconds"] = seconds;
  if (!epochs.empty()) {
    const auto& last = epochs.back();
    j["final"] = {{"epoch", last.epoch}, {"phase", last.phase},     {"l_reg", last.regression},
                  {"l_kl", last.kl},     {"total", last.total}};
    nlohmann::json val = nlohmann::json::object();
    for (const auto& [h, v] : last.val_ade) {
      val[std::to_string(h)] = {{"ade", v}, {"fde", last.val_fde.at(h)}};
    }
    j["final"]["validation"] = val;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Shared loop pieces

namespace {

using Clock = std::chrono::steady_clock;

std::size_t long_length(const TrainSetup& setup) { return setup.branches.lengths[2]; }

EvalWindow eval_window(const TrainSetup& setup) {
  return {long_length(setup), setup.backbone.horizon};
}

// First observed step of a window of `h` steps under the derivation mode.
std::size_t window_start(std::size_t h, const TrainSetup& setup) {
  return setup.train.derivation == DerivationMode::truncation ? long_length(setup) - h : 0;
}

void check_setup(const DatasetSplit& data, const TrainSetup& setup) {
  setup.backbone.validate();
  setup.branches.validate();
  setup.train.validate();
  if (data.train.empty()) throw std::invalid_argument("training split is empty");
  const std::size_t need = long_length(setup) + setup.backbone.horizon;
  for (const auto* part : {&data.train, &data.validation}) {
    for (const auto& s : *part) {
      if (s.steps() < need) {
        throw ShapeError("scene " + std::to_string(s.id) + " has " + std::to_string(s.steps()) +
                         " steps, training needs " + std::to_string(need));
      }
    }
  }
}

void record_validation(const FlnModel& model, const DatasetSplit& data, const TrainSetup& setup,
                       EpochRecord& rec) {
  if (data.validation.empty()) return;
  for (std::size_t h : setup.branches.lengths) {
    if (rec.val_ade.contains(h)) continue;
    const Metrics m = evaluate(model, data.validation, h, eval_window(setup), setup.train.validation);
    rec.val_ade[h] = m.ade;
    rec.val_fde[h] = m.fde;
  }
}

struct Running {
  double regression = 0.0, kl = 0.0, total = 0.0;
  std::size_t batches = 0;

  void add(double r, double k, double t) {
    if (!std::isfinite(t)) throw NumericError("non-finite training loss");
    regression += r;
    kl += k;
    total += t;
    ++batches;
  }
  void finish(EpochRecord& rec) const {
    const double n = static_cast<double>(std::max<std::size_t>(batches, 1));
    rec.regression = regression / n;
    rec.kl = kl / n;
    rec.total = total / n;
    rec.batches = batches;
  }
};

// One optimizer step of a single-branch model on `h`-step windows.
double single_step(FlnModel& model, AdamState& state, const std::vector<TrajectoryScene>& scenes,
                   const std::vector<std::size_t>& idx, std::size_t h, const TrainSetup& setup) {
  const std::size_t start = window_start(h, setup);
  const Tensor obs = stack_window(scenes, idx, start, h);
  const Tensor future = stack_window(scenes, idx, start + h, setup.backbone.horizon);
  const MixturePrediction pred = model.forward_flexible(obs, BranchId::L);
  const Tensor loss = nll(pred, reshape(future, {future.dim(0) * future.dim(1), future.dim(2), 2}));
  backward(loss);
  adam_step(model.params(), state, setup.train.learning_rate);
  model.params().zero_grad();
  return loss.item();
}

class Trainer {
 public:
  Trainer(const DatasetSplit& data, const TrainSetup& setup, const EpochCallback& cb)
      : data_(data), setup_(setup), callback_(cb) {}

  // Runs one epoch over the given (batch, length) list of a single-branch model.
  EpochRecord single_epoch(FlnModel& model, AdamState& state,
                           const std::vector<std::pair<std::vector<std::size_t>, std::size_t>>& plan,
                           const std::string& phase) {
    const auto t0 = Clock::now();
    Running run;
    for (const auto& [idx, h] : plan) {
      const double loss = single_step(model, state, data_.train, idx, h, setup_);
      run.add(loss, 0.0, loss);
    }
    return close(model, state, run, phase, t0);
  }

  EpochRecord close(const FlnModel& model, const AdamState& state, const Running& run,
                    const std::string& phase, Clock::time_point t0) {
    EpochRecord rec;
    rec.epoch = ++epoch_;
    rec.phase = phase;
    run.finish(rec);
    if (setup_.train.validate_each_epoch) record_validation(model, data_, setup_, rec);
    rec.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (callback_) callback_(model, state, rec);
    return rec;
  }

  std::size_t epochs_done() const { return epoch_; }

 private:
  const DatasetSplit& data_;
  const TrainSetup& setup_;
  const EpochCallback& callback_;
  std::size_t epoch_ = 0;
};

using Plan = std::vector<std::pair<std::vector<std::size_t>, std::size_t>>;

Plan fixed_length_plan(const std::vector<TrajectoryScene>& scenes, std::size_t batch_size,
                       std::size_t h, std::mt19937_64& shuffle) {
  Plan plan;
  for (auto& idx : make_batches(scenes, batch_size, &shuffle)) plan.emplace_back(std::move(idx), h);
  return plan;
}

TrainResult single_length_run(const DatasetSplit& data, std::size_t h, const TrainSetup& setup,
                              const EpochCallback& on_epoch, const char* strategy) {
  check_setup(data, setup);
  if (h == 0 || h > long_length(setup)) {
    throw ConfigError("training length " + std::to_string(h) + " must lie in [1, " +
                      std::to_string(long_length(setup)) + "]");
  }
  FlnModel model(setup.backbone, BranchLayout::single(h), setup.train.seed);
  std::mt19937_64 shuffle(stream_seed(setup.train.seed, "shuffle"));
  TrainResult result;
  result.log.strategy = strategy;
  result.log.seed = setup.train.seed;
  Trainer trainer(data, setup, on_epoch);
  for (std::size_t e = 0; e < setup.train.epochs; ++e) {
    result.log.epochs.push_back(trainer.single_epoch(
        model, result.optimizer, fixed_length_plan(data.train, setup.train.batch_size, h, shuffle),
        "train"));
  }
  result.models.push_back(std::move(model));
  result.model_lengths.push_back(h);
  return result;
}

}  // namespace

TrainResult train_fln(const DatasetSplit& data, const TrainSetup& setup, const EpochCallback& on_epoch) {
  check_setup(data, setup);
  FlnModel model = make_fln_model(setup.backbone, setup.branches, setup.train.seed);
  std::mt19937_64 shuffle(stream_seed(setup.train.seed, "shuffle"));
  TrainResult result;
  result.log.strategy = "fln";
  result.log.seed = setup.train.seed;
  Trainer trainer(data, setup, on_epoch);
  for (std::size_t e = 0; e < setup.train.epochs; ++e) {
    const auto t0 = Clock::now();
    Running run;
    for (const auto& idx : make_batches(data.train, setup.train.batch_size, &shuffle)) {
      const ObservationBundle bundle = make_batch_bundle(
          data.train, idx, setup.branches.lengths, setup.backbone.horizon, setup.train.derivation);
      const FlnLoss loss = fln_loss(model, bundle, setup.branches);
      backward(loss.total);
      adam_step(model.params(), result.optimizer, setup.train.learning_rate);
      model.params().zero_grad();
      run.add(loss.regression.item(), loss.kl.item(), loss.total.item());
    }
    result.log.epochs.push_back(trainer.close(model, result.optimizer, run, "train", t0));
  }
  result.models.push_back(std::move(model));
  result.model_lengths.push_back(long_length(setup));
  return result;
}

TrainResult train_isolated(const DatasetSplit& data, std::size_t length, const TrainSetup& setup,
                           const EpochCallback& on_epoch) {
  return single_length_run(data, length, setup, on_epoch, "isolated");
}

TrainResult train_mixed(const DatasetSplit& data, const std::array<double, 3>& rho,
                        const TrainSetup& setup, const EpochCallback& on_epoch) {
  check_setup(data, setup);
  const std::size_t h_long = long_length(setup);
  FlnModel model(setup.backbone, BranchLayout::single(h_long), setup.train.seed);
  std::mt19937_64 shuffle(stream_seed(setup.train.seed, "shuffle"));
  LengthSampler sampler(rho, stream_seed(setup.train.seed, "length"));
  TrainResult result;
  result.log.strategy = "mixed";
  result.log.seed = setup.train.seed;
  Trainer trainer(data, setup, on_epoch);
  for (std::size_t e = 0; e < setup.train.epochs; ++e) {
    Plan plan;
    for (auto& idx : make_batches(data.train, setup.train.batch_size, &shuffle)) {
      plan.emplace_back(std::move(idx), setup.branches.lengths[sampler.draw()]);
    }
    result.log.epochs.push_back(trainer.single_epoch(model, result.optimizer, plan, "train"));
  }
  result.models.push_back(std::move(model));
  result.model_lengths.push_back(h_long);
  return result;
}

TrainResult train_finetune(const DatasetSplit& data, const TrainSetup& setup,
                           const EpochCallback& on_epoch) {
  check_setup(data, setup);
  if (data.validation.empty()) throw std::invalid_argument("fine-tuning needs a validation split");
  const std::size_t source = setup.train.source_length ? setup.train.source_length : long_length(setup);
  const std::size_t target = setup.train.target_length ? setup.train.target_length : setup.branches.lengths[0];
  if (source > long_length(setup) || target > long_length(setup)) {
    throw ConfigError("fine-tuning lengths must not exceed H_L");
  }
  FlnModel model(setup.backbone, BranchLayout::single(source), setup.train.seed);
  std::mt19937_64 shuffle(stream_seed(setup.train.seed, "shuffle"));
  TrainResult result;
  result.log.strategy = "finetune";
  result.log.seed = setup.train.seed;
  Trainer trainer(data, setup, on_epoch);
  for (std::size_t e = 0; e < setup.train.epochs; ++e) {
    result.log.epochs.push_back(trainer.single_epoch(
        model, result.optimizer,
        fixed_length_plan(data.train, setup.train.batch_size, source, shuffle), "source"));
  }
  result.pre_finetune = model;

  const EvalWindow window = eval_window(setup);
  double best = evaluate(model, data.validation, target, window, setup.train.validation).ade;
  FlnModel best_model = model;
  std::size_t stale = 0;
  for (std::size_t e = 0; e < setup.train.max_finetune_epochs && stale < setup.train.patience; ++e) {
    EpochRecord rec = trainer.single_epoch(
        model, result.optimizer,
        fixed_length_plan(data.train, setup.train.batch_size, target, shuffle), "target");
    const double score = rec.val_ade.contains(target)
                             ? rec.val_ade.at(target)
                             : evaluate(model, data.validation, target, window, setup.train.validation).ade;
    if (score < best) {
      best = score;
      best_model = model;
      stale = 0;
    } else {
      ++stale;
    }
    result.log.epochs.push_back(std::move(rec));
  }
  result.models.push_back(std::move(best_model));
  result.model_lengths.push_back(target);
  return result;
}

TrainResult train_joint(const DatasetSplit& data, const TrainSetup& setup, const EpochCallback& on_epoch) {
  check_setup(data, setup);
  if (data.validation.empty()) throw std::invalid_argument("joint training needs a validation split");
  const std::size_t h_long = long_length(setup);
  const EvalWindow window = eval_window(setup);
  TrainResult result;
  result.log.strategy = "joint";
  result.log.seed = setup.train.seed;
  Trainer trainer(data, setup, on_epoch);
  for (BranchId target : kAllBranches) {
    const std::string tag = "joint-" + std::string(branch_name(target));
    const std::size_t h_target = setup.branches.lengths[branch_index(target)];
    FlnModel model(setup.backbone, BranchLayout::single(h_long), stream_seed(setup.train.seed, tag));
    AdamState state;
    std::mt19937_64 shuffle(stream_seed(setup.train.seed, tag + "/shuffle"));
    std::optional<FlnModel> best_model;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < setup.train.epochs; ++e) {
      // Every scene appears once per training length.
      Plan plan;
      for (const auto& idx : make_batches(data.train, setup.train.batch_size, &shuffle)) {
        for (std::size_t h : setup.branches.lengths) plan.emplace_back(idx, h);
      }
      std::shuffle(plan.begin(), plan.end(), shuffle);
      EpochRecord rec = trainer.single_epoch(model, state, plan, tag);
      const double score = rec.val_ade.contains(h_target)
                               ? rec.val_ade.at(h_target)
                               : evaluate(model, data.validation, h_target, window, setup.train.validation).ade;
      if (score < best) {
        best = score;
        best_model = model;
      }
      result.log.epochs.push_back(std::move(rec));
    }
    result.models.push_back(std::move(*best_model));
    result.model_lengths.push_back(h_target);
    result.optimizer = std::move(state);
  }
  return result;
}

TrainResult train(const DatasetSplit& data, const TrainSetup& setup, const EpochCallback& on_epoch) {
  switch (setup.train.strategy) {
    case Strategy::fln:
      return train_fln(data, setup, on_epoch);
    case Strategy::isolated:
      return train_isolated(data, setup.train.length ? setup.train.length : long_length(setup), setup,
                            on_epoch);
    case Strategy::mixed:
      return train_mixed(data, setup.train.rho, setup, on_epoch);
    case Strategy::finetune:
      return train_finetune(data, setup, on_epoch);
    default:
      return train_joint(data, setup, on_epoch);
  }
}

}  // namespace fln
