#include "fln/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "fln/error.hpp"
#include "fln/fln.hpp"
#include "fln/io.hpp"

namespace fln {

namespace {

void check_sample_shapes(const Tensor& samples, const Tensor& gt) {
  if (samples.rank() != 4 || gt.rank() != 3 || samples.dim(3) != 2 || gt.dim(2) != 2) {
    throw ShapeError("samples must be [K, agents, T, 2] and gt [agents, T, 2]");
  }
  if (samples.dim(0) == 0) throw ShapeError("need at least one sample (K = 0)");
  if (samples.dim(1) != gt.dim(0) || samples.dim(2) != gt.dim(1)) {
    throw ShapeError("samples " + shape_str(samples.shape()) + " do not match gt " +
                     shape_str(gt.shape()));
  }
  if (gt.dim(0) == 0 || gt.dim(1) == 0) throw ShapeError("gt has no agents or steps");
}

// Per agent: min over samples of the displacement averaged over steps [from, T).
std::vector<double> min_displacement(const Tensor& samples, const Tensor& gt, bool final_only) {
  check_sample_shapes(samples, gt);
  const std::size_t k = samples.dim(0), agents = gt.dim(0), horizon = gt.dim(1);
  const std::size_t from = final_only ? horizon - 1 : 0;
  const auto s = samples.values();
  const auto g = gt.values();
  std::vector<double> best(agents, std::numeric_limits<double>::infinity());
  for (std::size_t a = 0; a < agents; ++a) {
    for (std::size_t i = 0; i < k; ++i) {
      double total = 0.0;
      for (std::size_t t = from; t < horizon; ++t) {
        const std::size_t si = ((i * agents + a) * horizon + t) * 2;
        const std::size_t gi = (a * horizon + t) * 2;
        total += std::hypot(s[si] - g[gi], s[si + 1] - g[gi + 1]);
      }
      best[a] = std::min(best[a], total / static_cast<double>(horizon - from));
    }
  }
  return best;
}

double mean_of(const std::vector<double>& v) {
  double total = 0.0;
  for (double x : v) total += x;
  return total / static_cast<double>(v.size());
}

struct Accumulator {
  double ade = 0.0, fde = 0.0;
  std::size_t agents = 0;
};

}  // namespace

double ade(const Tensor& samples, const Tensor& gt) {
  return mean_of(min_displacement(samples, gt, false));
}

double fde(const Tensor& samples, const Tensor& gt) {
  return mean_of(min_displacement(samples, gt, true));
}

Metrics evaluate(const FlnModel& model, const std::vector<TrajectoryScene>& scenes,
                 std::size_t length, const EvalWindow& window, const EvalOptions& options) {
  if (length == 0) throw RoutingError("observed length must be positive");
  if (scenes.empty()) throw std::invalid_argument("no scenes to evaluate");
  if (options.samples == 0) throw ShapeError("need at least one sample (K = 0)");
  const bool single = model.layout().is_single();
  const BranchId branch = single ? BranchId::L : route(length, model.layout());
  const std::size_t start = std::max(window.long_length, length);
  const std::size_t horizon = window.horizon;
  if (horizon != model.config().horizon) {
    throw ShapeError("evaluation horizon " + std::to_string(horizon) + " differs from model horizon " +
                     std::to_string(model.config().horizon));
  }

  const auto batches = make_batches(scenes, std::max<std::size_t>(options.batch_size, 1));
  std::vector<Accumulator> partial(batches.size());

  auto run_batch = [&](std::size_t bi) {
    NoGradGuard no_grad;
    const auto& idx = batches[bi];
    const Tensor obs = stack_window(scenes, idx, start - length, length);
    const MixturePrediction pred = model.forward_flexible(obs, branch);
    const std::uint64_t seed = mix_seed(options.seed, bi);
    const Tensor samples = draw_samples(pred, options.samples, options.sampling, seed);
    const std::size_t agents = scenes[idx[0]].agents();
    const std::size_t k = options.samples;
    const auto sv = samples.values();
    Accumulator acc;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const TrajectoryScene& scene = scenes[idx[j]];
      // This scene's slice of the flattened [K, batch * agents, T, 2] samples.
      std::vector<double> own(k * agents * horizon * 2);
      for (std::size_t i = 0; i < k; ++i) {
        const auto* src = sv.data() + ((i * idx.size() + j) * agents) * horizon * 2;
        std::copy(src, src + agents * horizon * 2, own.begin() + static_cast<std::ptrdiff_t>(i * agents * horizon * 2));
      }
      const Tensor world_samples = to_world(Tensor::from({k, agents, horizon, 2}, std::move(own)), scene);
      const Tensor world_gt = to_world(narrow(scene.positions, 1, start, horizon), scene);
      const auto a = min_displacement(world_samples, world_gt, false);
      const auto f = min_displacement(world_samples, world_gt, true);
      for (std::size_t n = 0; n < agents; ++n) {
        acc.ade += a[n];
        acc.fde += f[n];
      }
      acc.agents += agents;
    }
    partial[bi] = acc;
  };

  for (const auto& scene : scenes) {
    if (scene.steps() < start + horizon) {
      throw ShapeError("scene " + std::to_string(scene.id) + " has " + std::to_string(scene.steps()) +
                       " steps; evaluating length " + std::to_string(length) + " needs " +
                       std::to_string(start + horizon));
    }
  }

  const std::size_t threads = std::min(std::max<std::size_t>(options.threads, 1), batches.size());
  if (threads <= 1) {
    for (std::size_t bi = 0; bi < batches.size(); ++bi) run_batch(bi);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t bi = w; bi < batches.size(); bi += threads) run_batch(bi);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Fixed-order reduction so the result does not depend on the thread count.
  Accumulator total;
  for (const auto& p : partial) {
    total.ade += p.ade;
    total.fde += p.fde;
    total.agents += p.agents;
  }
  Metrics m;
  m.ade = total.ade / static_cast<double>(total.agents);
  m.fde = total.fde / static_cast<double>(total.agents);
  m.samples = options.samples;
  m.length = length;
  m.scenes = scenes.size();
  m.agents = total.agents;
  if (!single) m.branch = branch;
  return m;
}

std::vector<SweepRow> generality_sweep(const FlnModel& model,
                                       const std::vector<TrajectoryScene>& scenes,
                                       const std::vector<std::size_t>& lengths,
                                       const EvalWindow& window, const EvalOptions& options) {
  std::vector<SweepRow> rows;
  rows.reserve(lengths.size());
  for (std::size_t h : lengths) rows.push_back({h, evaluate(model, scenes, h, window, options)});
  return rows;
}

std::string metrics_csv(const std::vector<Metrics>& rows) {
  io::CsvWriter csv({"length", "branch", "samples", "ade", "fde", "scenes", "agents"});
  for (const auto& m : rows) {
    csv.row({std::to_string(m.length), m.branch ? std::string(branch_name(*m.branch)) : "",
             std::to_string(m.samples), io::format_double(m.ade), io::format_double(m.fde),
             std::to_string(m.scenes), std::to_string(m.agents)});
  }
  return csv.str();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::vector<Metrics> metrics;
  for (const auto& r : rows) metrics.push_back(r.metrics);
  return metrics_csv(metrics);
}

nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json j{{"length", m.length},   {"samples", m.samples}, {"ade", m.ade},
                   {"fde", m.fde},         {"scenes", m.scenes},   {"agents", m.agents}};
  j["branch"] = m.branch ? nlohmann::json(std::string(branch_name(*m.branch))) : nlohmann::json();
  return j;
}

// ---------------------------------------------------------------------------
// Layer-norm statistics

const LnSiteStats& LnStatReport::site(std::string_view name) const {
  for (const auto& s : sites) {
    if (s.site == name) return s;
  }
  throw std::out_of_range("report has no site '" + std::string(name) + "'");
}

std::string LnStatReport::csv() const {
  io::CsvWriter csv({"branch", "length", "site", "position", "mean", "std"});
  for (const auto& s : sites) {
    for (std::size_t t = 0; t < s.mean.size(); ++t) {
      csv.row({std::string(branch_name(branch)), std::to_string(length), s.site, std::to_string(t),
               io::format_double(s.mean[t]), io::format_double(s.std[t])});
    }
  }
  return csv.str();
}

LnStatReport ln_statistics_probe(const FlnModel& model, const std::vector<TrajectoryScene>& scenes,
                                 BranchId branch, std::size_t length, const EvalWindow& window) {
  if (scenes.empty()) throw std::invalid_argument("no probe scenes");
  if (length == 0) throw ShapeError("probe length must be positive");
  const std::size_t start = std::max(window.long_length, length);
  const std::size_t d = model.config().d_model;
  const auto site_names = model.encoder_ln_sites();

  LnStatReport report;
  report.branch = branch;
  report.length = length;
  report.scenes = scenes.size();
  std::vector<std::vector<double>> mean_sum(site_names.size(), std::vector<double>(length, 0.0));
  std::vector<std::vector<double>> std_sum(site_names.size(), std::vector<double>(length, 0.0));
  std::size_t rows = 0;  // tokens contributing to each position

  NoGradGuard no_grad;
  for (const auto& idx : make_batches(scenes, 64)) {
    const Tensor obs = stack_window(scenes, idx, start - length, length);
    ForwardTrace trace;
    model.forward_flexible(obs, branch, &trace);
    const std::size_t agents = obs.dim(1);
    const std::size_t steps = std::min(length, model.layout().length(branch));
    if (steps != length) throw ShapeError("probe length exceeds the branch length");
    for (std::size_t si = 0; si < site_names.size(); ++si) {
      const auto v = trace.ln_inputs.at(site_names[si]).values();
      // [batch, agents * steps, d], token index = agent * steps + t
      for (std::size_t b = 0; b < idx.size(); ++b) {
        for (std::size_t a = 0; a < agents; ++a) {
          for (std::size_t t = 0; t < steps; ++t) {
            const double* f = v.data() + ((b * agents + a) * steps + t) * d;
            double mu = 0.0;
            for (std::size_t c = 0; c < d; ++c) mu += f[c];
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t c = 0; c < d; ++c) var += (f[c] - mu) * (f[c] - mu);
            var /= static_cast<double>(d);
            mean_sum[si][t] += mu;
            std_sum[si][t] += std::sqrt(var);
          }
        }
      }
    }
    rows += idx.size() * agents;
  }
  for (std::size_t si = 0; si < site_names.size(); ++si) {
    LnSiteStats s;
    s.site = site_names[si];
    for (std::size_t t = 0; t < length; ++t) {
      s.mean.push_back(mean_sum[si][t] / static_cast<double>(rows));
      s.std.push_back(std_sum[si][t] / static_cast<double>(rows));
    }
    report.sites.push_back(std::move(s));
  }
  return report;
}

double max_mean_gap(const LnStatReport& a, const LnStatReport& b) {
  double gap = 0.0;
  for (const auto& sa : a.sites) {
    for (const auto& sb : b.sites) {
      if (sa.site != sb.site) continue;
      const std::size_t shared = std::min(sa.mean.size(), sb.mean.size());
      for (std::size_t i = 1; i <= shared; ++i) {
        gap = std::max(gap, std::abs(sa.mean[sa.mean.size() - i] - sb.mean[sb.mean.size() - i]));
      }
    }
  }
  return gap;
}

// ---------------------------------------------------------------------------
// Positional-encoding deviation

std::string PeDeviationReport::csv() const {
  io::CsvWriter csv({"timestep", "h1", "h2", "distance"});
  for (std::size_t t = 0; t < distance.size(); ++t) {
    csv.row({std::to_string(t), std::to_string(h1), std::to_string(h2), io::format_double(distance[t])});
  }
  return csv.str();
}

PeDeviationReport pe_deviation_report(const BackboneConfig& config, std::size_t h1, std::size_t h2) {
  if (h1 == 0 || h2 == 0) throw ShapeError("lengths must be positive");
  if (config.d_model == 0) throw ConfigError("d_model must be positive");
  PeDeviationReport report;
  report.h1 = h1;
  report.h2 = h2;
  for (std::size_t t = 0; t < std::min(h1, h2); ++t) {
    const auto a = sinusoidal_encoding(t, h1, config.d_model);
    const auto b = sinusoidal_encoding(t, h2, config.d_model);
    double sq = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) sq += (a[k] - b[k]) * (a[k] - b[k]);
    report.distance.push_back(std::sqrt(sq));
  }
  return report;
}

PeDeviationReport pe_deviation_report(const Tensor& table1, const Tensor& table2) {
  if (table1.rank() != 2 || table2.rank() != 2 || table1.dim(1) != table2.dim(1)) {
    throw ShapeError("positional tables must be [H, d] with equal d");
  }
  PeDeviationReport report;
  report.h1 = table1.dim(0);
  report.h2 = table2.dim(0);
  const std::size_t d = table1.dim(1);
  const auto a = table1.values();
  const auto b = table2.values();
  for (std::size_t t = 0; t < std::min(report.h1, report.h2); ++t) {
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += (a[t * d + k] - b[t * d + k]) * (a[t * d + k] - b[t * d + k]);
    report.distance.push_back(std::sqrt(sq));
  }
  return report;
}

}  // namespace fln
