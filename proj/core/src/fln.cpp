#include "fln/fln.hpp"

#include <cmath>
#include <cstdlib>
#include <set>

#include "fln/error.hpp"

namespace fln {

void BranchConfig::validate() const {
  if (!(lengths[0] >= 1 && lengths[0] < lengths[1] && lengths[1] <= lengths[2])) {
    throw ConfigError("branch lengths must satisfy 1 <= H_S < H_M <= H_L");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
}

BranchLayout BranchConfig::layout() const {
  validate();
  BranchLayout layout = BranchLayout::fln(lengths[0], lengths[1], lengths[2]);
  layout.weight_sharing = ablation.weight_sharing;
  layout.independent_pe = ablation.independent_pe;
  layout.specialized_ln = ablation.specialized_ln;
  return layout;
}

FlnModel make_fln_model(const BackboneConfig& backbone, const BranchConfig& branches,
                        std::uint64_t seed) {
  return FlnModel(backbone, branches.layout(), seed);
}

namespace {

// [batch, agents, T, 2] or [agents, T, 2] -> [batch * agents, T, 2].
Tensor flatten_future(const Tensor& future) {
  if (future.rank() == 3) return future;
  if (future.rank() != 4) throw ShapeError("future must be [agents, T, 2] or [batch, agents, T, 2]");
  return reshape(future, {future.dim(0) * future.dim(1), future.dim(2), future.dim(3)});
}

}  // namespace

FlnLoss fln_loss(const FlnModel& model, const ObservationBundle& bundle,
                 const BranchConfig& config) {
  config.validate();
  const BranchLayout& layout = model.layout();
  for (BranchId b : kAllBranches) {
    if (!layout.has(b)) throw ConfigError("fln_loss needs a three-branch model");
    if (layout.length(b) != config.lengths[branch_index(b)]) {
      throw ShapeError("model branch " + std::string(branch_name(b)) + " has length " +
                       std::to_string(layout.length(b)) + ", config says " +
                       std::to_string(config.lengths[branch_index(b)]));
    }
    const Tensor x = as_batch(bundle.observation(b));
    if (x.dim(2) != config.lengths[branch_index(b)]) {
      throw ShapeError("bundle observation " + std::string(branch_name(b)) + " has " +
                       std::to_string(x.dim(2)) + " steps, expected " +
                       std::to_string(config.lengths[branch_index(b)]));
    }
  }

  const MixturePrediction teacher = model.forward(bundle.observation(BranchId::L), BranchId::L);
  const MixturePrediction medium = model.forward(bundle.observation(BranchId::M), BranchId::M);
  const MixturePrediction small = model.forward(bundle.observation(BranchId::S), BranchId::S);

  FlnLoss out;
  out.regression = nll(teacher, flatten_future(bundle.future(BranchId::L)));
  const bool distill = config.ablation.temporal_distillation &&
                       bundle.mode == DerivationMode::truncation;
  if (distill) {
    out.kl = kl_distill(teacher, medium, config.detach_teacher) +
             kl_distill(teacher, small, config.detach_teacher);
  } else {
    out.kl = nll(medium, flatten_future(bundle.future(BranchId::M))) +
             nll(small, flatten_future(bundle.future(BranchId::S)));
  }
  out.total = out.regression + mul(out.kl, config.lambda);
  return out;
}

BranchId route(std::size_t observed, const BranchLayout& layout) {
  const auto branches = layout.branches();
  if (branches.empty()) throw RoutingError("model has no branches");
  const std::size_t shortest = layout.length(branches.front());
  if (observed == 0 || observed < shortest) {
    throw RoutingError("observed length " + std::to_string(observed) +
                       " is shorter than the shortest branch length " + std::to_string(shortest));
  }
  BranchId best = branches.front();
  std::size_t best_gap = static_cast<std::size_t>(-1);
  for (BranchId b : branches) {
    const std::size_t len = layout.length(b);
    const std::size_t gap = observed > len ? observed - len : len - observed;
    // Branches are visited from short to long, so <= hands ties to the longer one.
    if (gap <= best_gap) {
      best = b;
      best_gap = gap;
    }
  }
  return best;
}

BranchId route(std::size_t observed, const LengthSet& lengths) {
  return route(observed, BranchLayout::fln(lengths[0], lengths[1], lengths[2]));
}

ParameterCount count_parameters(const FlnModel& model) {
  const auto& params = model.params();
  const auto branches = model.layout().branches();
  std::vector<std::set<std::string>> used;
  for (BranchId b : branches) {
    const auto names = model.branch_parameter_names(b);
    used.emplace_back(names.begin(), names.end());
  }
  ParameterCount count;
  for (const auto& [name, t] : params.entries()) {
    count.total += t.numel();
    bool everywhere = true;
    for (const auto& u : used) everywhere = everywhere && u.contains(name);
    if (everywhere) {
      count.shared += t.numel();
    } else {
      count.branch_specific += t.numel();
    }
  }
  for (const auto& name : model.branch_parameter_names(BranchId::L)) {
    count.single_model += params.get(name).numel();
  }
  count.overhead = overhead_fraction(static_cast<double>(count.single_model),
                                     static_cast<double>(count.total));
  return count;
}

double overhead_fraction(double single_model, double total) {
  if (!(single_model > 0)) throw DomainError("single-model parameter count must be positive");
  return (total - single_model) / single_model;
}

}  // namespace fln
