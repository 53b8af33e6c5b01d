#include "fln/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "fln/error.hpp"

namespace fln {

void MixturePrediction::validate() const {
  if (means.rank() != 4 || means.dim(3) != 2) {
    throw ShapeError("mixture means must be [agents, horizon, modes, 2], got " +
                     shape_str(means.shape()));
  }
  if (scales.shape() != means.shape()) {
    throw ShapeError("mixture scales " + shape_str(scales.shape()) + " do not match means " +
                     shape_str(means.shape()));
  }
  if (mode_logits.shape() != Shape{agents(), modes()}) {
    throw ShapeError("mode logits must be [agents, modes], got " +
                     shape_str(mode_logits.shape()));
  }
  for (double s : scales.values()) {
    if (!(s > 0.0)) throw DomainError("mixture scale must be positive, got " + std::to_string(s));
  }
}

MixturePrediction MixturePrediction::detach() const {
  return {means.detach(), scales.detach(), mode_logits.detach()};
}

Tensor nll(const MixturePrediction& pred, const Tensor& future) {
  pred.validate();
  const std::size_t agents = pred.agents(), horizon = pred.horizon(), modes = pred.modes();
  if (future.shape() != Shape{agents, horizon, 2}) {
    throw ShapeError("ground truth " + shape_str(future.shape()) + " does not match prediction [" +
                     std::to_string(agents) + "," + std::to_string(horizon) + ",2]");
  }
  const Tensor target = reshape(future, {agents, horizon, 1, 2});
  const Tensor z = (target - pred.means) / pred.scales;
  // log N(y; mu, diag sigma^2) summed over both coordinates.
  const Tensor per_dim = mul(square(z), -0.5) - log(pred.scales);
  const Tensor component = add(sum(per_dim, -1), -std::log(2.0 * std::numbers::pi));
  const Tensor log_weights = reshape(log_softmax(pred.mode_logits, -1), {agents, 1, modes});
  const Tensor log_density = logsumexp(component + log_weights, -1);
  return neg(mean(log_density));
}

Tensor kl_distill(const MixturePrediction& teacher_in, const MixturePrediction& student,
                  bool detach_teacher) {
  teacher_in.validate();
  student.validate();
  if (teacher_in.means.shape() != student.means.shape()) {
    throw ShapeError("teacher " + shape_str(teacher_in.means.shape()) + " and student " +
                     shape_str(student.means.shape()) + " mixtures differ in shape");
  }
  const MixturePrediction teacher = detach_teacher ? teacher_in.detach() : teacher_in;

  // KL(N(mt, st^2) || N(ms, ss^2)) = 0.5 (r - 1 - log r) + (mt - ms)^2 / (2 ss^2), r = st^2/ss^2.
  // r - 1 - log r is evaluated as expm1(u) - u with u = log r, which is nonnegative termwise.
  const Tensor log_ratio = mul(log(teacher.scales) - log(student.scales), 2.0);
  const Tensor spread = mul(expm1(log_ratio) - log_ratio, 0.5);
  const Tensor shift = square(teacher.means - student.means) / mul(square(student.scales), 2.0);
  const Tensor gaussian = mean(sum(spread + shift, -1));

  // Categorical KL in the same form: sum_k pt_k (expm1(u_k) - u_k), u = log ps - log pt.
  const Tensor log_pt = log_softmax(teacher.mode_logits, -1);
  const Tensor log_ps = log_softmax(student.mode_logits, -1);
  const Tensor u = log_ps - log_pt;
  const Tensor categorical = mean(sum(exp(log_pt) * (expm1(u) - u), -1));
  return gaussian + categorical;
}

Tensor draw_samples(const MixturePrediction& pred, std::size_t count, SampleMode mode,
                    std::uint64_t seed) {
  pred.validate();
  const std::size_t agents = pred.agents(), horizon = pred.horizon(), modes = pred.modes();
  if (count == 0) throw ShapeError("sample count must be positive");
  if (mode == SampleMode::mode_means && count > modes) {
    throw ShapeError("requested " + std::to_string(count) + " mode means from a " +
                     std::to_string(modes) + "-mode mixture");
  }
  const auto mu = pred.means.values();
  const auto sigma = pred.scales.values();
  const auto logits = pred.mode_logits.values();
  std::vector<double> out(count * agents * horizon * 2);
  auto param_index = [&](std::size_t a, std::size_t t, std::size_t k, std::size_t d) {
    return ((a * horizon + t) * modes + k) * 2 + d;
  };
  auto out_index = [&](std::size_t s, std::size_t a, std::size_t t, std::size_t d) {
    return ((s * agents + a) * horizon + t) * 2 + d;
  };

  if (mode == SampleMode::mode_means) {
    std::vector<std::size_t> order(modes);
    for (std::size_t a = 0; a < agents; ++a) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      const double* row = logits.data() + a * modes;
      std::stable_sort(order.begin(), order.end(),
                       [row](std::size_t i, std::size_t j) { return row[i] > row[j]; });
      for (std::size_t s = 0; s < count; ++s) {
        for (std::size_t t = 0; t < horizon; ++t) {
          for (std::size_t d = 0; d < 2; ++d) {
            out[out_index(s, a, t, d)] = mu[param_index(a, t, order[s], d)];
          }
        }
      }
    }
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> weights(modes);
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t a = 0; a < agents; ++a) {
        const double* row = logits.data() + a * modes;
        const double mx = *std::max_element(row, row + modes);
        for (std::size_t k = 0; k < modes; ++k) weights[k] = std::exp(row[k] - mx);
        std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
        const std::size_t k = pick(rng);
        for (std::size_t t = 0; t < horizon; ++t) {
          for (std::size_t d = 0; d < 2; ++d) {
            const std::size_t p = param_index(a, t, k, d);
            out[out_index(s, a, t, d)] = mu[p] + sigma[p] * noise(rng);
          }
        }
      }
    }
  }
  return Tensor::from({count, agents, horizon, 2}, std::move(out));
}

}  // namespace fln
