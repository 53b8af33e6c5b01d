#pragma once

// Diagonal bivariate Gaussian mixture heads over future trajectories.

#include <cstdint>

#include "fln/tensor.hpp"

namespace fln {

// Per-agent, per-future-step mixture parameters.
//   means, scales: [agents, horizon, modes, 2]   (meters; scales are standard deviations)
//   mode_logits:   [agents, modes]               (weights constant over the horizon)
struct MixturePrediction {
  Tensor means;
  Tensor scales;
  Tensor mode_logits;

  std::size_t agents() const { return means.dim(0); }
  std::size_t horizon() const { return means.dim(1); }
  std::size_t modes() const { return means.dim(2); }

  // Throws ShapeError on inconsistent fields and DomainError on non-positive scales.
  void validate() const;
  MixturePrediction detach() const;
};

// Negative log-likelihood of `future` [agents, horizon, 2] averaged over agents and steps.
Tensor nll(const MixturePrediction& pred, const Tensor& future);

// Index-matched per-mode Gaussian KL (averaged over agents, steps and modes) plus the
// categorical KL between mode weights (averaged over agents). Teacher is the first argument.
Tensor kl_distill(const MixturePrediction& teacher, const MixturePrediction& student,
                  bool detach_teacher = true);

enum class SampleMode { mode_means, stochastic };

// Returns [count, agents, horizon, 2]. mode_means orders modes by descending weight
// (ties keep the lower index); stochastic draws a mode, then per-step Gaussian noise.
Tensor draw_samples(const MixturePrediction& pred, std::size_t count, SampleMode mode,
                    std::uint64_t seed = 0);

}  // namespace fln
