#pragma once

// Transformer trajectory predictor split into spatial encoder, positional
// encoder, transformer encoder and trajectory decoder, with per-branch
// positional encodings and layer-norm affines.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fln/distributions.hpp"
#include "fln/tensor.hpp"

namespace fln {

// Branches ordered by observation length: S < M < L.
enum class BranchId : std::uint8_t { S = 0, M = 1, L = 2 };
inline constexpr std::array<BranchId, 3> kAllBranches{BranchId::S, BranchId::M, BranchId::L};

std::string_view branch_name(BranchId branch);
BranchId parse_branch(std::string_view name);
inline std::size_t branch_index(BranchId b) { return static_cast<std::size_t>(b); }

enum class PeKind { sinusoidal, learnable };
std::string_view pe_kind_name(PeKind kind);
PeKind parse_pe_kind(std::string_view name);
std::string_view activation_name(Activation kind);
Activation parse_activation(std::string_view name);

struct BackboneConfig {
  std::size_t d_model = 16;
  std::size_t heads = 2;
  std::size_t layers = 1;
  std::size_t ffn_hidden = 32;
  std::size_t decoder_hidden = 32;
  std::size_t modes = 3;
  std::size_t horizon = 12;
  PeKind pe = PeKind::learnable;
  Activation activation = Activation::gelu;
  // Adds a per-branch affine to the decoder's layer norm as well.
  bool decoder_sln = false;

  void validate() const;
};

// Which branches exist, their observation lengths, and what they share.
struct BranchLayout {
  std::array<std::size_t, 3> lengths{0, 0, 0};  // 0 marks an absent branch
  bool weight_sharing = true;
  bool independent_pe = true;
  bool specialized_ln = true;

  // A conventional model with one branch (stored in slot L).
  static BranchLayout single(std::size_t length);
  static BranchLayout fln(std::size_t short_len, std::size_t medium_len, std::size_t long_len);

  bool has(BranchId b) const { return lengths[branch_index(b)] != 0; }
  std::size_t length(BranchId b) const;
  std::vector<BranchId> branches() const;
  std::size_t max_length() const;
  bool is_single() const { return branches().size() == 1; }
  void validate() const;
};

// Sinusoidal encoding of observation step t within a window of length `window`:
// even k: sin((t + window) / 10000^(k/d)), odd k: cos((t + window) / 10000^((k-1)/d)).
std::vector<double> sinusoidal_encoding(std::size_t t, std::size_t window, std::size_t d_model);

// Named parameters in creation order.
class ParameterStore {
 public:
  Tensor& add(std::string name, Tensor value);
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  bool contains(std::string_view name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  std::size_t numel() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// Captured intermediate values of one forward pass.
struct ForwardTrace {
  // Pre-normalization inputs per encoder layer-norm site, [batch, tokens, d_model].
  std::map<std::string, Tensor> ln_inputs;
  // Attention weights per layer, [batch, heads, tokens, tokens].
  std::vector<Tensor> attention;
};

class FlnModel {
 public:
  FlnModel(BackboneConfig config, BranchLayout layout, std::uint64_t seed);

  // Copies are deep: the copy owns fresh parameter storage.
  FlnModel(const FlnModel& other);
  FlnModel& operator=(const FlnModel& other);
  FlnModel(FlnModel&&) noexcept = default;
  FlnModel& operator=(FlnModel&&) noexcept = default;

  const BackboneConfig& config() const { return config_; }
  const BranchLayout& layout() const { return layout_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Store names of the tensors a branch's forward pass reads.
  std::vector<std::string> branch_parameter_names(BranchId branch) const;
  // Backbone weight `role` (e.g. "enc0.wq") as seen by `branch`.
  const Tensor& theta(BranchId branch, std::string_view role) const;
  const Tensor& pe_table(BranchId branch) const;
  std::pair<const Tensor&, const Tensor&> ln_affine(BranchId branch, std::string_view site) const;
  std::vector<std::string> ln_sites() const;
  std::vector<std::string> encoder_ln_sites() const;

  // [batch, agents, steps, 2] -> [batch, agents, steps, d_model].
  Tensor spatial_encode(const Tensor& observations, BranchId branch) const;
  // Encoding of observation step t for the branch at its own length.
  std::vector<double> positional_encode(std::size_t t, BranchId branch) const;
  // [steps, d_model] table for an input of `steps` observations fed to `branch`.
  Tensor positional_table(BranchId branch, std::size_t steps) const;
  Tensor specialized_layer_norm(const Tensor& features, BranchId branch,
                                std::string_view site) const;
  // [batch, agents, steps, d_model] -> same shape.
  Tensor transformer_encode(const Tensor& features, BranchId branch,
                            ForwardTrace* trace = nullptr) const;
  // Pools each agent's final token. Means are relative to the agent's last position.
  MixturePrediction decode(const Tensor& encoded, BranchId branch) const;

  // Strict: the observation length must equal the branch length.
  MixturePrediction forward(const Tensor& observations, BranchId branch,
                            ForwardTrace* trace = nullptr) const;
  // Longer inputs keep their most recent steps; shorter inputs use the branch's
  // positional encoding evaluated at the shorter length.
  MixturePrediction forward_flexible(const Tensor& observations, BranchId branch,
                                     ForwardTrace* trace = nullptr) const;

 private:
  MixturePrediction run(const Tensor& observations, BranchId branch, ForwardTrace* trace) const;
  std::string theta_name(BranchId branch, std::string_view role) const;
  std::string pe_name(BranchId branch) const;
  std::string ln_name(BranchId branch, std::string_view site, std::string_view field) const;
  bool site_is_specialized(std::string_view site) const;

  BackboneConfig config_;
  BranchLayout layout_;
  ParameterStore params_;
};

// Adds a leading batch axis to a single-scene [agents, steps, 2] array.
Tensor as_batch(const Tensor& observations);

}  // namespace fln
