#include "fln/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "fln/error.hpp"
#include "fln/io.hpp"

namespace fln {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> parts;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(trim(item));
  return parts;
}

template <typename T, typename F>
std::array<T, 3> to_triple(const std::string& key, const std::string& v, F convert) {
  const auto parts = split_commas(v);
  if (parts.size() != 3) throw ConfigError(key + ": expected three comma-separated values");
  return {convert(key, parts[0]), convert(key, parts[1]), convert(key, parts[2])};
}

template <typename T>
std::string join3(const std::array<T, 3>& a, std::function<std::string(T)> f) {
  return f(a[0]) + "," + f(a[1]) + "," + f(a[2]);
}

std::string fmt(double v) { return io::format_double(v); }
std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Entry {
  std::string key;
  std::string description;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SIZE_ENTRY(KEY, FIELD, DOC)                                                   \
  Entry {                                                                             \
    KEY, DOC, [](const RunConfig& c) { return std::to_string(c.FIELD); },             \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_size(KEY, v); }         \
  }
#define DOUBLE_ENTRY(KEY, FIELD, DOC)                                                 \
  Entry {                                                                             \
    KEY, DOC, [](const RunConfig& c) { return fmt(c.FIELD); },                        \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_double(KEY, v); }       \
  }
#define BOOL_ENTRY(KEY, FIELD, DOC)                                                   \
  Entry {                                                                             \
    KEY, DOC, [](const RunConfig& c) { return fmt_bool(c.FIELD); },                   \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(KEY, v); }         \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      Entry{"seed", "seed of every random stream of a run",
            [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) { c.seed = to_u64("seed", v); }},
      BOOL_ENTRY("deterministic", deterministic, "force serial execution everywhere"),
      SIZE_ENTRY("threads", threads, "evaluation threads when not deterministic"),

      Entry{"data.source", "synthetic or trajnet",
            [](const RunConfig& c) { return c.data_source; },
            [](RunConfig& c, const std::string& v) {
              if (v != "synthetic" && v != "trajnet") {
                throw ConfigError("data.source: expected synthetic or trajnet, got '" + v + "'");
              }
              c.data_source = v;
            }},
      SIZE_ENTRY("data.scenes", synthetic.scenes, "number of synthetic scenes"),
      SIZE_ENTRY("data.min_agents", synthetic.min_agents, "fewest agents per synthetic scene"),
      SIZE_ENTRY("data.max_agents", synthetic.max_agents, "most agents per synthetic scene"),
      DOUBLE_ENTRY("data.dt", synthetic.dt, "seconds between steps"),
      DOUBLE_ENTRY("data.noise_sigma", synthetic.noise_sigma, "process noise, m/s per sqrt(s)"),
      DOUBLE_ENTRY("data.repulsion", synthetic.repulsion, "pairwise repulsion speed at contact, m/s"),
      DOUBLE_ENTRY("data.speed_min", synthetic.speed_min, "slowest agent speed, m/s"),
      DOUBLE_ENTRY("data.speed_max", synthetic.speed_max, "fastest agent speed, m/s"),
      DOUBLE_ENTRY("data.turn_rate_min", synthetic.turn_rate_min, "smallest turn rate, rad/s"),
      DOUBLE_ENTRY("data.turn_rate_max", synthetic.turn_rate_max, "largest turn rate, rad/s"),
      DOUBLE_ENTRY("data.extent", synthetic.extent, "side of the start square, m"),
      Entry{"data.mix", "constant-velocity, constant-turn, stop-and-go weights",
            [](const RunConfig& c) {
              return fmt(c.synthetic.mix.constant_velocity) + "," + fmt(c.synthetic.mix.constant_turn) +
                     "," + fmt(c.synthetic.mix.stop_and_go);
            },
            [](RunConfig& c, const std::string& v) {
              const auto t = to_triple<double>("data.mix", v, to_double);
              c.synthetic.mix = {t[0], t[1], t[2]};
            }},
      Entry{"data.derivation", "truncation or sliding",
            [](const RunConfig& c) {
              return std::string(c.train.derivation == DerivationMode::truncation ? "truncation"
                                                                                   : "sliding");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "truncation") {
                c.train.derivation = DerivationMode::truncation;
              } else if (v == "sliding") {
                c.train.derivation = DerivationMode::sliding;
              } else {
                throw ConfigError("data.derivation: expected truncation or sliding, got '" + v + "'");
              }
            }},
      SIZE_ENTRY("data.window_step", trajnet_window_step, "frames between trajnet scene windows"),

      SIZE_ENTRY("model.d_model", backbone.d_model, "token width"),
      SIZE_ENTRY("model.heads", backbone.heads, "attention heads"),
      SIZE_ENTRY("model.layers", backbone.layers, "encoder layers"),
      SIZE_ENTRY("model.ffn_hidden", backbone.ffn_hidden, "encoder feed-forward width"),
      SIZE_ENTRY("model.decoder_hidden", backbone.decoder_hidden, "decoder hidden width"),
      SIZE_ENTRY("model.modes", backbone.modes, "mixture components"),
      SIZE_ENTRY("model.horizon", backbone.horizon, "predicted steps T"),
      Entry{"model.pe", "learnable or sinusoidal",
            [](const RunConfig& c) { return std::string(pe_kind_name(c.backbone.pe)); },
            [](RunConfig& c, const std::string& v) { c.backbone.pe = parse_pe_kind(v); }},
      Entry{"model.activation", "gelu or relu",
            [](const RunConfig& c) { return std::string(activation_name(c.backbone.activation)); },
            [](RunConfig& c, const std::string& v) { c.backbone.activation = parse_activation(v); }},
      BOOL_ENTRY("model.decoder_sln", backbone.decoder_sln, "per-branch affine on the decoder norm"),

      Entry{"fln.lengths", "observation lengths S,M,L",
            [](const RunConfig& c) {
              return join3<std::size_t>(c.branches.lengths,
                                        [](std::size_t x) { return std::to_string(x); });
            },
            [](RunConfig& c, const std::string& v) {
              c.branches.lengths = to_triple<std::size_t>("fln.lengths", v, to_size);
            }},
      DOUBLE_ENTRY("fln.lambda", branches.lambda, "weight of the distillation term"),
      BOOL_ENTRY("fln.detach_teacher", branches.detach_teacher, "stop gradients through the teacher"),
      BOOL_ENTRY("fln.weight_sharing", branches.ablation.weight_sharing, "branches share backbone weights"),
      BOOL_ENTRY("fln.temporal_distillation", branches.ablation.temporal_distillation,
                 "distill short branches from the long one"),
      BOOL_ENTRY("fln.independent_pe", branches.ablation.independent_pe, "per-branch positional encoding"),
      BOOL_ENTRY("fln.specialized_ln", branches.ablation.specialized_ln, "per-branch encoder norm affines"),

      Entry{"train.strategy", "fln, isolated, mixed, finetune or joint",
            [](const RunConfig& c) { return std::string(strategy_name(c.train.strategy)); },
            [](RunConfig& c, const std::string& v) { c.train.strategy = parse_strategy(v); }},
      SIZE_ENTRY("train.epochs", train.epochs, "training epochs (first stage for finetune)"),
      SIZE_ENTRY("train.batch_size", train.batch_size, "scenes per batch"),
      DOUBLE_ENTRY("train.learning_rate", train.learning_rate, "Adam step size"),
      Entry{"train.rho", "mixed: sampling weights of S,M,L",
            [](const RunConfig& c) { return join3<double>(c.train.rho, fmt); },
            [](RunConfig& c, const std::string& v) {
              c.train.rho = to_triple<double>("train.rho", v, to_double);
            }},
      SIZE_ENTRY("train.length", train.length, "isolated: training length, 0 for H_L"),
      SIZE_ENTRY("train.source_length", train.source_length, "finetune: first-stage length, 0 for H_L"),
      SIZE_ENTRY("train.target_length", train.target_length, "finetune: second-stage length, 0 for H_S"),
      SIZE_ENTRY("train.patience", train.patience, "finetune: epochs without validation gain"),
      SIZE_ENTRY("train.max_finetune_epochs", train.max_finetune_epochs, "finetune: second-stage cap"),
      BOOL_ENTRY("train.validate_each_epoch", train.validate_each_epoch, "log validation metrics"),

      SIZE_ENTRY("eval.samples", eval.samples, "K for best-of-K metrics"),
      Entry{"eval.sampling", "mode_means or stochastic",
            [](const RunConfig& c) {
              return std::string(c.eval.sampling == SampleMode::mode_means ? "mode_means" : "stochastic");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "mode_means") {
                c.eval.sampling = SampleMode::mode_means;
              } else if (v == "stochastic") {
                c.eval.sampling = SampleMode::stochastic;
              } else {
                throw ConfigError("eval.sampling: expected mode_means or stochastic, got '" + v + "'");
              }
            }},
      SIZE_ENTRY("eval.batch_size", eval.batch_size, "scenes per evaluation batch"),
  };
  return table;
}

#undef SIZE_ENTRY
#undef DOUBLE_ENTRY
#undef BOOL_ENTRY

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key == key) return e;
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back({e.key, e.description});
    return out;
  }();
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const Entry& e = find_entry(trim(key));
  try {
    e.set(*this, trim(value));
  } catch (const ConfigError& err) {
    const std::string what = err.what();
    if (what.rfind(e.key, 0) == 0) throw;
    throw ConfigError(e.key + ": " + what);
  }
}

std::string RunConfig::get(const std::string& key) const { return find_entry(key).get(*this); }

std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : entries()) out.emplace_back(e.key, e.get(*this));
  return out;
}

std::string RunConfig::to_text() const {
  std::string text;
  for (const auto& [k, v] : items()) text += k + " = " + v + "\n";
  return text;
}

void RunConfig::validate() const {
  if (threads == 0) throw ConfigError("threads must be positive");
  backbone.validate();
  branches.validate();
  train.validate();
  if (eval.samples == 0) throw ConfigError("eval.samples must be positive");
  if (eval.sampling == SampleMode::mode_means && eval.samples > backbone.modes) {
    throw ConfigError("eval.samples " + std::to_string(eval.samples) + " exceeds model.modes " +
                      std::to_string(backbone.modes) + " under mode_means sampling");
  }
  if (eval.batch_size == 0) throw ConfigError("eval.batch_size must be positive");
  if (trajnet_window_step == 0) throw ConfigError("data.window_step must be positive");
  SyntheticConfig s = synthetic;
  s.steps = scene_steps();
  s.validate();
}

TrainSetup RunConfig::setup() const {
  TrainSetup out{backbone, branches, train};
  out.train.seed = seed;
  out.train.validation = eval;
  out.train.validation.seed = seed;
  out.train.validation.threads = deterministic ? 1 : threads;
  return out;
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig config;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
    try {
      config.set(t.substr(0, eq), t.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return config;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(io::read_file(path));
}

std::vector<std::size_t> parse_length_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& part : split_commas(text)) {
    if (part.empty()) throw ConfigError("empty entry in length list '" + text + "'");
    const auto dots = part.find("..");
    if (dots == std::string::npos) {
      out.push_back(to_size("lengths", part));
      continue;
    }
    const std::size_t lo = to_size("lengths", trim(part.substr(0, dots)));
    const std::size_t hi = to_size("lengths", trim(part.substr(dots + 2)));
    if (lo > hi) throw ConfigError("empty length range '" + part + "'");
    for (std::size_t h = lo; h <= hi; ++h) out.push_back(h);
  }
  if (out.empty()) throw ConfigError("no lengths given");
  for (std::size_t h : out) {
    if (h == 0) throw ConfigError("lengths must be positive");
  }
  return out;
}

}  // namespace fln
