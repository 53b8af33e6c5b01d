#pragma once

// Three-branch training objective, parameter accounting and length routing.

#include <cstdint>

#include "fln/backbone.hpp"
#include "fln/data.hpp"
#include "fln/distributions.hpp"

namespace fln {

struct Ablation {
  bool weight_sharing = true;
  bool temporal_distillation = true;
  bool independent_pe = true;
  bool specialized_ln = true;
};

struct BranchConfig {
  LengthSet lengths{2, 6, 8};
  double lambda = 1.0;
  bool detach_teacher = true;
  Ablation ablation;

  void validate() const;
  BranchLayout layout() const;
};

FlnModel make_fln_model(const BackboneConfig& backbone, const BranchConfig& branches,
                        std::uint64_t seed);

struct FlnLoss {
  Tensor total;
  Tensor regression;  // NLL of the long branch
  Tensor kl;          // distillation term, or student NLL when distillation is off
};

// Bundles may be a single scene [agents, steps, 2] or a batch [batch, agents, steps, 2].
// Sliding-window bundles have no shared future, so their short branches are trained
// on their own futures exactly as with distillation disabled.
FlnLoss fln_loss(const FlnModel& model, const ObservationBundle& bundle, const BranchConfig& config);

// Nearest branch length, ties to the longer branch. Throws RoutingError below the
// shortest branch.
BranchId route(std::size_t observed, const BranchLayout& layout);
BranchId route(std::size_t observed, const LengthSet& lengths);

struct ParameterCount {
  std::size_t total = 0;
  std::size_t shared = 0;         // read by every branch
  std::size_t branch_specific = 0;
  std::size_t single_model = 0;   // what a one-branch model of the same backbone holds
  double overhead = 0.0;          // (total - single_model) / single_model
};

ParameterCount count_parameters(const FlnModel& model);

// Relative growth from a single model to the multi-branch model.
double overhead_fraction(double single_model, double total);

}  // namespace fln
