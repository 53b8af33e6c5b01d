#pragma once

// Single-file checkpoints: "FLNCKPT1", a little-endian u64 manifest size, a JSON
// manifest, then every tensor as little-endian float64 at its manifest offset.

#include <filesystem>
#include <optional>
#include <string>

#include "fln/backbone.hpp"
#include "fln/config.hpp"
#include "fln/data.hpp"
#include "fln/train.hpp"

namespace fln {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  FlnModel model{BackboneConfig{}, BranchLayout::single(1), 0};
  std::optional<AdamState> optimizer;
  std::size_t epoch = 0;
  NormalizationStats normalization;
};

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes);

// Atomic: writes a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fln
