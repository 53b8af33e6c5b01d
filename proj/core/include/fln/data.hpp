#pragma once

// Multi-agent scenes: synthetic generation, ETH/UCY-style text ingestion,
// multi-length observation bundles, normalization, splits and batching.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fln/backbone.hpp"
#include "fln/tensor.hpp"

namespace fln {

// Observation lengths {H_S, H_M, H_L}.
using LengthSet = std::array<std::size_t, 3>;

struct TrajectoryScene {
  std::uint64_t id = 0;
  double dt = 0.4;
  Tensor positions;  // [agents, steps, 2]
  // Normalization applied to `positions`: world = positions * scale + origin.
  std::array<double, 2> origin{0.0, 0.0};
  double scale = 1.0;

  std::size_t agents() const { return positions.dim(0); }
  std::size_t steps() const { return positions.dim(1); }
};

enum class DerivationMode { truncation, sliding };

// Aligned multi-length observations. Tensors are [agents, steps, 2] for one scene
// or [batch, agents, steps, 2] once stacked. In truncation mode all futures are
// the same tensor.
struct ObservationBundle {
  std::array<Tensor, 3> observations;
  std::array<Tensor, 3> futures;
  DerivationMode mode = DerivationMode::truncation;

  const Tensor& observation(BranchId b) const { return observations[branch_index(b)]; }
  const Tensor& future(BranchId b) const { return futures[branch_index(b)]; }
};

struct MotionMix {
  double constant_velocity = 0.4;
  double constant_turn = 0.3;
  double stop_and_go = 0.3;
};

struct SyntheticConfig {
  std::size_t scenes = 2000;
  std::size_t min_agents = 1;
  std::size_t max_agents = 3;
  std::size_t steps = 20;  // H_L + T
  double dt = 0.4;
  MotionMix mix;
  double noise_sigma = 0.05;  // m/s per sqrt(s) random walk on a velocity offset
  double repulsion = 0.3;     // m/s at zero distance, decaying over 1 m
  double speed_min = 0.8;
  double speed_max = 1.6;
  double turn_rate_min = 0.15;  // rad/s
  double turn_rate_max = 0.6;
  double extent = 8.0;  // side of the square agents start in, meters
  std::uint64_t seed = 0;

  void validate() const;
};

std::vector<TrajectoryScene> generate_synthetic(const SyntheticConfig& config);

// Truncation: every branch ends at step H_L and shares the future [H_L, H_L + T).
// Sliding: branch windows end at H_L - (H_L - H_*) and each has its own future.
ObservationBundle derive_observations(const TrajectoryScene& scene, const LengthSet& lengths,
                                      std::size_t horizon,
                                      DerivationMode mode = DerivationMode::truncation);

// Reads "frame agent x y" rows and cuts windows of `window` consecutive frames,
// keeping the agents present in every frame of a window.
struct TrajnetOptions {
  std::size_t window = 20;
  std::size_t window_step = 1;  // in frames of the detected stride
  double dt = 0.4;
};
std::vector<TrajectoryScene> load_trajnet(const std::filesystem::path& path,
                                          const TrajnetOptions& options);
std::vector<TrajectoryScene> parse_trajnet(const std::string& text, const TrajnetOptions& options);

struct NormalizationStats {
  std::size_t anchor_step = 0;  // centroid of this step becomes the origin
  double scale = 1.0;
};

NormalizationStats compute_normalization(const std::vector<TrajectoryScene>& train,
                                         std::size_t anchor_step);
std::vector<TrajectoryScene> normalize(const std::vector<TrajectoryScene>& scenes,
                                       const NormalizationStats& stats);
std::vector<TrajectoryScene> denormalize(const std::vector<TrajectoryScene>& scenes);
// Maps normalized coordinates [..., 2] of `scene` back to world meters.
Tensor to_world(const Tensor& points, const TrajectoryScene& scene);

struct DatasetSplit {
  std::vector<TrajectoryScene> train, validation, test;
  NormalizationStats stats;
};

// 70/15/15 by a hash of the scene id; statistics from the training part only.
DatasetSplit split_dataset(const std::vector<TrajectoryScene>& scenes, std::size_t anchor_step);
int split_bucket(std::uint64_t scene_id);  // 0 train, 1 validation, 2 test

// Groups of scene indices with equal agent counts, at most `batch_size` each.
// Shuffles within groups and the batch order when `rng` is given.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<TrajectoryScene>& scenes,
                                                   std::size_t batch_size,
                                                   std::mt19937_64* rng = nullptr);

// Steps [start, start + length) of the selected scenes, [batch, agents, length, 2].
Tensor stack_window(const std::vector<TrajectoryScene>& scenes,
                    const std::vector<std::size_t>& indices, std::size_t start, std::size_t length);

ObservationBundle make_batch_bundle(const std::vector<TrajectoryScene>& scenes,
                                    const std::vector<std::size_t>& indices,
                                    const LengthSet& lengths, std::size_t horizon,
                                    DerivationMode mode = DerivationMode::truncation);

// Dataset files: manifest.json plus positions.bin (little-endian float64, scene-major).
struct DatasetManifest {
  std::string source = "synthetic";
  std::uint64_t seed = 0;
  double dt = 0.4;
  MotionMix mix;
  std::size_t steps = 0;
  std::vector<std::uint64_t> scene_ids;
  std::vector<std::size_t> scene_agents;
};

void save_dataset(const std::filesystem::path& dir, const std::vector<TrajectoryScene>& scenes,
                  const DatasetManifest& manifest);
std::vector<TrajectoryScene> load_dataset(const std::filesystem::path& dir,
                                          DatasetManifest* manifest = nullptr);

// Deterministic 64-bit mixer used for seeds and hashing.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace fln
