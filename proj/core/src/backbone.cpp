#include "fln/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "fln/error.hpp"

namespace fln {

namespace {

constexpr double kLnEpsilon = 1e-5;
constexpr double kScaleFloor = 1e-3;

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return matmul(x, weight) + bias;
}

}  // namespace

std::string_view branch_name(BranchId branch) {
  switch (branch) {
    case BranchId::S:
      return "S";
    case BranchId::M:
      return "M";
    default:
      return "L";
  }
}

BranchId parse_branch(std::string_view name) {
  if (name == "S") return BranchId::S;
  if (name == "M") return BranchId::M;
  if (name == "L") return BranchId::L;
  throw ConfigError("unknown branch '" + std::string(name) + "'");
}

std::string_view pe_kind_name(PeKind kind) {
  return kind == PeKind::sinusoidal ? "sinusoidal" : "learnable";
}

PeKind parse_pe_kind(std::string_view name) {
  if (name == "sinusoidal") return PeKind::sinusoidal;
  if (name == "learnable") return PeKind::learnable;
  throw ConfigError("unknown positional encoding kind '" + std::string(name) + "'");
}

std::string_view activation_name(Activation kind) { return kind == Activation::relu ? "relu" : "gelu"; }

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

void BackboneConfig::validate() const {
  if (d_model == 0 || heads == 0 || layers == 0 || ffn_hidden == 0 || decoder_hidden == 0 ||
      modes == 0 || horizon == 0) {
    throw ConfigError("backbone sizes must all be at least 1");
  }
  if (d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

// ---------------------------------------------------------------------------
// BranchLayout

BranchLayout BranchLayout::single(std::size_t length) {
  BranchLayout layout;
  layout.lengths = {0, 0, length};
  layout.validate();
  return layout;
}

BranchLayout BranchLayout::fln(std::size_t short_len, std::size_t medium_len, std::size_t long_len) {
  BranchLayout layout;
  layout.lengths = {short_len, medium_len, long_len};
  layout.validate();
  return layout;
}

std::size_t BranchLayout::length(BranchId b) const {
  if (!has(b)) throw std::out_of_range("branch " + std::string(branch_name(b)) + " is not present");
  return lengths[branch_index(b)];
}

std::vector<BranchId> BranchLayout::branches() const {
  std::vector<BranchId> out;
  for (BranchId b : kAllBranches) {
    if (has(b)) out.push_back(b);
  }
  return out;
}

std::size_t BranchLayout::max_length() const {
  return *std::max_element(lengths.begin(), lengths.end());
}

void BranchLayout::validate() const {
  if (!has(BranchId::L)) throw ConfigError("branch layout needs an L branch");
  const auto present = branches();
  for (std::size_t i = 1; i < present.size(); ++i) {
    const std::size_t prev = length(present[i - 1]);
    const std::size_t cur = length(present[i]);
    if (present[i] == BranchId::M ? !(prev < cur) : !(prev <= cur)) {
      throw ConfigError("branch lengths must satisfy 1 <= H_S < H_M <= H_L");
    }
  }
}

std::vector<double> sinusoidal_encoding(std::size_t t, std::size_t window, std::size_t d_model) {
  std::vector<double> out(d_model);
  const double position = static_cast<double>(t + window);
  const double d = static_cast<double>(d_model);
  for (std::size_t k = 0; k < d_model; ++k) {
    if (k % 2 == 0) {
      out[k] = std::sin(position / std::pow(10000.0, static_cast<double>(k) / d));
    } else {
      out[k] = std::cos(position / std::pow(10000.0, static_cast<double>(k - 1) / d));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// ParameterStore

Tensor& ParameterStore::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

const Tensor& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return entries_[it->second].second;
}

Tensor& ParameterStore::get(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).get(name));
}

bool ParameterStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ParameterStore::numel() const {
  std::size_t total = 0;
  for (const auto& [name, t] : entries_) total += t.numel();
  return total;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

// ---------------------------------------------------------------------------
// FlnModel

FlnModel::FlnModel(BackboneConfig config, BranchLayout layout, std::uint64_t seed)
    : config_(config), layout_(layout) {
  config_.validate();
  layout_.validate();
  const std::size_t d = config_.d_model;
  std::mt19937_64 rng(seed);

  auto add_linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (double& v : w) v = dist(rng);
    for (double& v : b) v = dist(rng);
    params_.add(prefix + ".w", Tensor::from({in, out}, std::move(w), true));
    params_.add(prefix + ".b", Tensor::from({out}, std::move(b), true));
  };

  std::vector<std::string> prefixes;
  if (layout_.weight_sharing) {
    prefixes.push_back("theta.");
  } else {
    for (BranchId b : layout_.branches()) {
      prefixes.push_back("branch." + std::string(branch_name(b)) + ".theta.");
    }
  }
  for (const auto& p : prefixes) {
    add_linear(p + "spatial.fc1", 4, d);
    add_linear(p + "spatial.fc2", d, d);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string enc = p + "enc" + std::to_string(l);
      add_linear(enc + ".q", d, d);
      add_linear(enc + ".k", d, d);
      add_linear(enc + ".v", d, d);
      add_linear(enc + ".o", d, d);
      add_linear(enc + ".ff1", d, config_.ffn_hidden);
      add_linear(enc + ".ff2", config_.ffn_hidden, d);
    }
    add_linear(p + "dec.fc1", d, config_.decoder_hidden);
    add_linear(p + "dec.traj", config_.decoder_hidden, config_.horizon * config_.modes * 4);
    add_linear(p + "dec.mode", config_.decoder_hidden, config_.modes);
  }

  if (config_.pe == PeKind::learnable) {
    if (layout_.independent_pe) {
      for (BranchId b : layout_.branches()) {
        params_.add(pe_name(b), Tensor::zeros({layout_.length(b), d}, true));
      }
    } else {
      params_.add(pe_name(BranchId::L), Tensor::zeros({layout_.max_length(), d}, true));
    }
  }

  for (const auto& site : ln_sites()) {
    std::vector<BranchId> owners = site_is_specialized(site) ? layout_.branches()
                                                             : std::vector<BranchId>{BranchId::L};
    for (BranchId b : owners) {
      params_.add(ln_name(b, site, "gamma"), Tensor::full({d}, 1.0, true));
      params_.add(ln_name(b, site, "beta"), Tensor::zeros({d}, true));
    }
  }
}

FlnModel::FlnModel(const FlnModel& other) : config_(other.config_), layout_(other.layout_) {
  for (const auto& [name, t] : other.params_.entries()) {
    params_.add(name, t.clone(t.requires_grad()));
  }
}

FlnModel& FlnModel::operator=(const FlnModel& other) {
  if (this != &other) *this = FlnModel(other);
  return *this;
}

std::string FlnModel::theta_name(BranchId branch, std::string_view role) const {
  if (!layout_.has(branch)) {
    throw std::out_of_range("branch " + std::string(branch_name(branch)) + " is not present");
  }
  if (layout_.weight_sharing) return "theta." + std::string(role);
  return "branch." + std::string(branch_name(branch)) + ".theta." + std::string(role);
}

std::string FlnModel::pe_name(BranchId branch) const {
  if (layout_.independent_pe) return "branch." + std::string(branch_name(branch)) + ".pe";
  return "pe";
}

bool FlnModel::site_is_specialized(std::string_view site) const {
  return site == "dec" ? config_.decoder_sln : layout_.specialized_ln;
}

std::string FlnModel::ln_name(BranchId branch, std::string_view site, std::string_view field) const {
  std::string base = "ln." + std::string(site) + "." + std::string(field);
  if (site_is_specialized(site)) return "branch." + std::string(branch_name(branch)) + "." + base;
  return base;
}

std::vector<std::string> FlnModel::encoder_ln_sites() const {
  std::vector<std::string> sites;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    sites.push_back("enc" + std::to_string(l) + ".attn");
    sites.push_back("enc" + std::to_string(l) + ".ffn");
  }
  return sites;
}

std::vector<std::string> FlnModel::ln_sites() const {
  auto sites = encoder_ln_sites();
  sites.emplace_back("dec");
  return sites;
}

const Tensor& FlnModel::theta(BranchId branch, std::string_view role) const {
  return params_.get(theta_name(branch, role));
}

const Tensor& FlnModel::pe_table(BranchId branch) const {
  if (config_.pe != PeKind::learnable) throw std::logic_error("sinusoidal encodings have no table");
  if (!layout_.has(branch)) {
    throw std::out_of_range("branch " + std::string(branch_name(branch)) + " is not present");
  }
  return params_.get(pe_name(branch));
}

std::pair<const Tensor&, const Tensor&> FlnModel::ln_affine(BranchId branch,
                                                            std::string_view site) const {
  const auto sites = ln_sites();
  if (std::find(sites.begin(), sites.end(), site) == sites.end()) {
    throw std::out_of_range("unknown layer-norm site '" + std::string(site) + "'");
  }
  if (!layout_.has(branch)) {
    throw std::out_of_range("branch " + std::string(branch_name(branch)) + " is not present");
  }
  const BranchId owner = site_is_specialized(site) ? branch : BranchId::L;
  return {params_.get(ln_name(owner, site, "gamma")), params_.get(ln_name(owner, site, "beta"))};
}

std::vector<std::string> FlnModel::branch_parameter_names(BranchId branch) const {
  std::vector<std::string> names;
  for (const auto& [name, t] : params_.entries()) {
    if (name.starts_with("branch.")) {
      if (name.starts_with("branch." + std::string(branch_name(branch)) + ".")) names.push_back(name);
    } else {
      names.push_back(name);
    }
  }
  return names;
}

Tensor FlnModel::spatial_encode(const Tensor& observations, BranchId branch) const {
  const Tensor x = as_batch(observations);
  const std::size_t steps = x.dim(2);
  if (steps == 0) throw ShapeError("spatial_encode needs at least one observed step");
  Tensor velocity;
  if (steps == 1) {
    velocity = Tensor::zeros(x.shape());
  } else {
    const Tensor diff = narrow(x, 2, 1, steps - 1) - narrow(x, 2, 0, steps - 1);
    velocity = concat({narrow(diff, 2, 0, 1), diff}, 2);
  }
  const Tensor feats = concat({x, velocity}, -1);
  const Tensor hidden = activate(
      linear(feats, theta(branch, "spatial.fc1.w"), theta(branch, "spatial.fc1.b")),
      config_.activation);
  return linear(hidden, theta(branch, "spatial.fc2.w"), theta(branch, "spatial.fc2.b"));
}

Tensor FlnModel::positional_table(BranchId branch, std::size_t steps) const {
  const std::size_t d = config_.d_model;
  if (steps == 0) throw ShapeError("positional table needs at least one step");
  if (config_.pe == PeKind::learnable) {
    const Tensor& table = pe_table(branch);
    if (steps > table.dim(0)) {
      throw ShapeError("input of " + std::to_string(steps) + " steps exceeds the " +
                       std::to_string(table.dim(0)) + "-row positional table of branch " +
                       std::string(branch_name(branch)));
    }
    return steps == table.dim(0) ? table : narrow(table, 0, 0, steps);
  }
  // A shared sinusoidal table is the long-branch encoding read from the top.
  const std::size_t window = layout_.independent_pe ? steps : layout_.max_length();
  std::vector<double> values;
  values.reserve(steps * d);
  for (std::size_t t = 0; t < steps; ++t) {
    const auto row = sinusoidal_encoding(t, window, d);
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor::from({steps, d}, std::move(values));
}

std::vector<double> FlnModel::positional_encode(std::size_t t, BranchId branch) const {
  const std::size_t len = layout_.length(branch);
  if (t >= len) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside branch " +
                            std::string(branch_name(branch)) + " of length " + std::to_string(len));
  }
  const Tensor table = positional_table(branch, len);
  const auto v = table.values();
  const std::size_t d = config_.d_model;
  return {v.begin() + static_cast<std::ptrdiff_t>(t * d),
          v.begin() + static_cast<std::ptrdiff_t>((t + 1) * d)};
}

Tensor FlnModel::specialized_layer_norm(const Tensor& features, BranchId branch,
                                        std::string_view site) const {
  const auto [gamma, beta] = ln_affine(branch, site);
  const Tensor mu = mean(features, -1, true);
  const Tensor centered = features - mu;
  const Tensor var = mean(square(centered), -1, true);
  const Tensor normalized = centered / sqrt(add(var, kLnEpsilon));
  return normalized * gamma + beta;
}

Tensor FlnModel::transformer_encode(const Tensor& features, BranchId branch,
                                    ForwardTrace* trace) const {
  if (features.rank() != 4) throw ShapeError("transformer_encode expects [batch, agents, steps, d]");
  const std::size_t batch = features.dim(0), agents = features.dim(1), steps = features.dim(2);
  const std::size_t d = config_.d_model, heads = config_.heads;
  if (features.dim(3) != d) throw ShapeError("feature width does not match d_model");
  if (steps == 0) throw ShapeError("transformer_encode needs at least one step");
  if (d % heads != 0) throw ConfigError("d_model is not divisible by heads");
  const std::size_t head_dim = d / heads;
  const std::size_t tokens = agents * steps;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor x = reshape(features, {batch, tokens, d});
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string enc = "enc" + std::to_string(l);
    const std::string attn_site = enc + ".attn";
    const std::string ffn_site = enc + ".ffn";

    if (trace) trace->ln_inputs[attn_site] = x.detach();
    const Tensor h = specialized_layer_norm(x, branch, attn_site);
    auto project = [&](std::string_view which) {
      const Tensor p = linear(h, theta(branch, enc + "." + std::string(which) + ".w"),
                              theta(branch, enc + "." + std::string(which) + ".b"));
      return permute(reshape(p, {batch, tokens, heads, head_dim}), {0, 2, 1, 3});
    };
    const Tensor q = project("q");
    const Tensor k = project("k");
    const Tensor v = project("v");
    const Tensor scores = mul(matmul(q, transpose(k, -1, -2)), inv_sqrt_dk);
    const Tensor weights = softmax(scores, -1);
    if (trace) trace->attention.push_back(weights.detach());
    const Tensor context = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), {batch, tokens, d});
    x = x + linear(context, theta(branch, enc + ".o.w"), theta(branch, enc + ".o.b"));

    if (trace) trace->ln_inputs[ffn_site] = x.detach();
    const Tensor h2 = specialized_layer_norm(x, branch, ffn_site);
    const Tensor ff = activate(
        linear(h2, theta(branch, enc + ".ff1.w"), theta(branch, enc + ".ff1.b")),
        config_.activation);
    x = x + linear(ff, theta(branch, enc + ".ff2.w"), theta(branch, enc + ".ff2.b"));
  }
  return reshape(x, {batch, agents, steps, d});
}

MixturePrediction FlnModel::decode(const Tensor& encoded, BranchId branch) const {
  if (encoded.rank() != 4) throw ShapeError("decode expects [batch, agents, steps, d]");
  const std::size_t batch = encoded.dim(0), agents = encoded.dim(1), steps = encoded.dim(2);
  const std::size_t d = config_.d_model, horizon = config_.horizon, modes = config_.modes;
  const std::size_t total = batch * agents;

  const Tensor last = reshape(narrow(encoded, 2, steps - 1, 1), {total, d});
  const Tensor pooled = specialized_layer_norm(last, branch, "dec");
  const Tensor hidden = activate(
      linear(pooled, theta(branch, "dec.fc1.w"), theta(branch, "dec.fc1.b")), config_.activation);
  const Tensor traj = reshape(
      linear(hidden, theta(branch, "dec.traj.w"), theta(branch, "dec.traj.b")),
      {total, horizon, modes, 4});
  MixturePrediction out;
  out.means = narrow(traj, 3, 0, 2);
  out.scales = add(softplus(narrow(traj, 3, 2, 2)), kScaleFloor);
  out.mode_logits = linear(hidden, theta(branch, "dec.mode.w"), theta(branch, "dec.mode.b"));
  return out;
}

MixturePrediction FlnModel::run(const Tensor& observations, BranchId branch,
                                ForwardTrace* trace) const {
  const std::size_t steps = observations.dim(2);
  const Tensor spatial = spatial_encode(observations, branch);
  const Tensor encoded =
      transformer_encode(spatial + positional_table(branch, steps), branch, trace);
  MixturePrediction pred = decode(encoded, branch);
  // Predictions are offsets from each agent's last observed position.
  const std::size_t total = observations.dim(0) * observations.dim(1);
  const Tensor anchor = reshape(narrow(observations, 2, steps - 1, 1), {total, 1, 1, 2});
  pred.means = pred.means + anchor;
  return pred;
}

MixturePrediction FlnModel::forward(const Tensor& observations, BranchId branch,
                                    ForwardTrace* trace) const {
  const Tensor x = as_batch(observations);
  const std::size_t expected = layout_.length(branch);
  if (x.dim(2) != expected) {
    throw ShapeError("branch " + std::string(branch_name(branch)) + " expects " +
                     std::to_string(expected) + " observed steps, got " +
                     std::to_string(x.dim(2)));
  }
  return run(x, branch, trace);
}

MixturePrediction FlnModel::forward_flexible(const Tensor& observations, BranchId branch,
                                             ForwardTrace* trace) const {
  const Tensor x = as_batch(observations);
  const std::size_t len = layout_.length(branch);
  const std::size_t steps = x.dim(2);
  if (steps == 0) throw ShapeError("no observed steps");
  if (steps > len) return run(narrow(x, 2, steps - len, len), branch, trace);
  return run(x, branch, trace);
}

Tensor as_batch(const Tensor& observations) {
  if (observations.rank() == 4 && observations.dim(3) == 2) return observations;
  if (observations.rank() == 3 && observations.dim(2) == 2) {
    Shape s = observations.shape();
    s.insert(s.begin(), 1);
    return reshape(observations, s);
  }
  throw ShapeError("observations must be [agents, steps, 2] or [batch, agents, steps, 2], got " +
                   shape_str(observations.shape()));
}

}  // namespace fln
