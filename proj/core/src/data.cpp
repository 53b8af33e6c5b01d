#include "fln/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fln/error.hpp"
#include "fln/io.hpp"

namespace fln {

namespace {

enum class Motion { constant_velocity, constant_turn, stop_and_go };

struct AgentState {
  Motion motion = Motion::constant_velocity;
  double x = 0, y = 0;
  double heading = 0;
  double speed = 0;
  double turn_rate = 0;
  double period = 4.0;
  double phase = 0;
  double drift_x = 0, drift_y = 0;  // process-noise velocity offset
};

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void SyntheticConfig::validate() const {
  if (scenes == 0) throw ConfigError("scene count must be positive");
  if (min_agents == 0 || max_agents < min_agents) throw ConfigError("invalid agent count range");
  if (steps < 2) throw ConfigError("scenes need at least two steps");
  if (!(dt > 0)) throw ConfigError("dt must be positive");
  if (mix.constant_velocity < 0 || mix.constant_turn < 0 || mix.stop_and_go < 0 ||
      mix.constant_velocity + mix.constant_turn + mix.stop_and_go <= 0) {
    throw ConfigError("motion mix weights must be nonnegative with a positive sum");
  }
  if (noise_sigma < 0 || repulsion < 0) throw ConfigError("noise and repulsion must be nonnegative");
  if (!(speed_min >= 0 && speed_max >= speed_min)) throw ConfigError("invalid speed range");
  if (!(turn_rate_min > 0 && turn_rate_max >= turn_rate_min)) {
    throw ConfigError("turn rates must be positive");
  }
}

std::vector<TrajectoryScene> generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  std::vector<TrajectoryScene> scenes;
  scenes.reserve(config.scenes);
  const double dt = config.dt;
  for (std::size_t s = 0; s < config.scenes; ++s) {
    // Each scene draws from its own stream so scenes are independent of generation order.
    std::mt19937_64 rng(mix_seed(config.seed, s));
    std::uniform_int_distribution<std::size_t> agent_count(config.min_agents, config.max_agents);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::discrete_distribution<int> motion_pick(
        {config.mix.constant_velocity, config.mix.constant_turn, config.mix.stop_and_go});

    const std::size_t n = agent_count(rng);
    std::vector<AgentState> agents(n);
    for (auto& a : agents) {
      a.motion = static_cast<Motion>(motion_pick(rng));
      a.x = (unit(rng) - 0.5) * config.extent;
      a.y = (unit(rng) - 0.5) * config.extent;
      a.heading = unit(rng) * 2.0 * std::numbers::pi;
      a.speed = config.speed_min + unit(rng) * (config.speed_max - config.speed_min);
      const double rate =
          config.turn_rate_min + unit(rng) * (config.turn_rate_max - config.turn_rate_min);
      a.turn_rate = unit(rng) < 0.5 ? -rate : rate;
      a.period = 3.0 + 3.0 * unit(rng);
      a.phase = unit(rng) * 2.0 * std::numbers::pi;
    }

    std::vector<double> pos(n * config.steps * 2);
    auto store = [&](std::size_t step) {
      for (std::size_t i = 0; i < n; ++i) {
        pos[(i * config.steps + step) * 2] = agents[i].x;
        pos[(i * config.steps + step) * 2 + 1] = agents[i].y;
      }
    };
    store(0);
    std::vector<std::array<double, 2>> moves(n);
    for (std::size_t k = 0; k + 1 < config.steps; ++k) {
      const double t = static_cast<double>(k) * dt;
      for (std::size_t i = 0; i < n; ++i) {
        AgentState& a = agents[i];
        double dx = 0, dy = 0;
        switch (a.motion) {
          case Motion::constant_velocity:
            dx = a.speed * dt * std::cos(a.heading);
            dy = a.speed * dt * std::sin(a.heading);
            break;
          case Motion::constant_turn: {
            // Exact arc of radius speed / turn_rate.
            const double r = a.speed / a.turn_rate;
            const double next = a.heading + a.turn_rate * dt;
            dx = r * (std::sin(next) - std::sin(a.heading));
            dy = r * (std::cos(a.heading) - std::cos(next));
            a.heading = next;
            break;
          }
          case Motion::stop_and_go: {
            const double gate = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * t / a.period + a.phase));
            dx = a.speed * gate * dt * std::cos(a.heading);
            dy = a.speed * gate * dt * std::sin(a.heading);
            break;
          }
        }
        if (config.noise_sigma > 0) {
          a.drift_x += config.noise_sigma * std::sqrt(dt) * gauss(rng);
          a.drift_y += config.noise_sigma * std::sqrt(dt) * gauss(rng);
          dx += a.drift_x * dt;
          dy += a.drift_y * dt;
        }
        if (config.repulsion > 0) {
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double rx = a.x - agents[j].x, ry = a.y - agents[j].y;
            const double dist = std::hypot(rx, ry);
            if (dist < 1e-9) continue;
            const double push = config.repulsion * dt * std::exp(-dist);
            dx += push * rx / dist;
            dy += push * ry / dist;
          }
        }
        moves[i] = {dx, dy};
      }
      for (std::size_t i = 0; i < n; ++i) {
        agents[i].x += moves[i][0];
        agents[i].y += moves[i][1];
      }
      store(k + 1);
    }
    TrajectoryScene scene;
    scene.id = s;
    scene.dt = dt;
    scene.positions = Tensor::from({n, config.steps, 2}, std::move(pos));
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

// ---------------------------------------------------------------------------
// Observation bundles

namespace {

Tensor scene_window(const TrajectoryScene& scene, std::size_t start, std::size_t length) {
  return narrow(scene.positions, 1, start, length);
}

void check_lengths(const LengthSet& lengths) {
  if (!(lengths[0] >= 1 && lengths[0] < lengths[1] && lengths[1] <= lengths[2])) {
    throw ConfigError("observation lengths must satisfy 1 <= H_S < H_M <= H_L");
  }
}

}  // namespace

ObservationBundle derive_observations(const TrajectoryScene& scene, const LengthSet& lengths,
                                      std::size_t horizon, DerivationMode mode) {
  check_lengths(lengths);
  const std::size_t long_len = lengths[2];
  if (scene.steps() < long_len + horizon) {
    throw ShapeError("scene " + std::to_string(scene.id) + " has " +
                     std::to_string(scene.steps()) + " steps, needs " +
                     std::to_string(long_len + horizon));
  }
  NoGradGuard no_grad;
  ObservationBundle bundle;
  bundle.mode = mode;
  if (mode == DerivationMode::truncation) {
    const Tensor future = scene_window(scene, long_len, horizon);
    for (std::size_t b = 0; b < 3; ++b) {
      bundle.observations[b] = scene_window(scene, long_len - lengths[b], lengths[b]);
      bundle.futures[b] = future;
    }
  } else {
    for (std::size_t b = 0; b < 3; ++b) {
      const std::size_t end = long_len - (long_len - lengths[b]);
      bundle.observations[b] = scene_window(scene, end - lengths[b], lengths[b]);
      bundle.futures[b] = scene_window(scene, end, horizon);
    }
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Text ingestion

std::vector<TrajectoryScene> parse_trajnet(const std::string& text, const TrajnetOptions& options) {
  if (options.window == 0 || options.window_step == 0) {
    throw ConfigError("trajnet window and step must be positive");
  }
  struct Row {
    long long frame;
    long long agent;
    double x, y;
  };
  std::vector<Row> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto parse_number = [&](const std::string& field, const char* what) {
    try {
      std::size_t used = 0;
      const double v = std::stod(field, &used);
      if (used != field.size() || !std::isfinite(v)) throw std::invalid_argument(field);
      return v;
    } catch (const std::exception&) {
      throw ParseError(std::string("invalid ") + what + " field '" + field + "'", line_no);
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::vector<std::string> parts;
    std::string f;
    while (fields >> f) parts.push_back(f);
    if (parts.size() != 4) {
      throw ParseError("expected 4 fields (frame agent x y), got " + std::to_string(parts.size()),
                       line_no);
    }
    const double frame = parse_number(parts[0], "frame");
    const double agent = parse_number(parts[1], "agent");
    if (frame != std::floor(frame) || agent != std::floor(agent)) {
      throw ParseError("frame and agent ids must be integral", line_no);
    }
    rows.push_back({static_cast<long long>(frame), static_cast<long long>(agent),
                    parse_number(parts[2], "x"), parse_number(parts[3], "y")});
  }
  if (rows.empty()) throw ParseError("no trajectory rows in input");

  std::set<long long> frame_set;
  for (const auto& r : rows) frame_set.insert(r.frame);
  const std::vector<long long> frames(frame_set.begin(), frame_set.end());
  long long stride = 0;
  for (std::size_t i = 1; i < frames.size(); ++i) {
    const long long gap = frames[i] - frames[i - 1];
    stride = stride == 0 ? gap : std::min(stride, gap);
  }
  if (stride == 0) stride = 1;

  // (frame, agent) -> position
  std::map<std::pair<long long, long long>, std::array<double, 2>> table;
  for (const auto& r : rows) table[{r.frame, r.agent}] = {r.x, r.y};
  std::map<long long, std::vector<long long>> agents_at;
  for (const auto& [key, p] : table) agents_at[key.first].push_back(key.second);

  std::vector<TrajectoryScene> scenes;
  const long long first = frames.front(), last = frames.back();
  const long long span = static_cast<long long>(options.window - 1) * stride;
  for (long long start = first; start + span <= last;
       start += static_cast<long long>(options.window_step) * stride) {
    auto it = agents_at.find(start);
    if (it == agents_at.end()) continue;
    std::vector<long long> present;
    for (long long agent : it->second) {
      bool full = true;
      for (std::size_t k = 0; k < options.window && full; ++k) {
        full = table.contains({start + static_cast<long long>(k) * stride, agent});
      }
      if (full) present.push_back(agent);
    }
    if (present.empty()) continue;
    std::vector<double> pos;
    pos.reserve(present.size() * options.window * 2);
    for (long long agent : present) {
      for (std::size_t k = 0; k < options.window; ++k) {
        const auto& p = table.at({start + static_cast<long long>(k) * stride, agent});
        pos.push_back(p[0]);
        pos.push_back(p[1]);
      }
    }
    TrajectoryScene scene;
    scene.id = scenes.size();
    scene.dt = options.dt;
    scene.positions = Tensor::from({present.size(), options.window, 2}, std::move(pos));
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

std::vector<TrajectoryScene> load_trajnet(const std::filesystem::path& path,
                                          const TrajnetOptions& options) {
  const std::string text = io::read_file(path);
  if (text.empty()) throw ParseError("empty file " + path.string());
  return parse_trajnet(text, options);
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

std::array<double, 2> centroid_at(const TrajectoryScene& scene, std::size_t step) {
  const auto v = scene.positions.values();
  const std::size_t n = scene.agents(), steps = scene.steps();
  std::array<double, 2> c{0.0, 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    c[0] += v[(i * steps + step) * 2];
    c[1] += v[(i * steps + step) * 2 + 1];
  }
  c[0] /= static_cast<double>(n);
  c[1] /= static_cast<double>(n);
  return c;
}

}  // namespace

NormalizationStats compute_normalization(const std::vector<TrajectoryScene>& train,
                                         std::size_t anchor_step) {
  NormalizationStats stats;
  stats.anchor_step = anchor_step;
  double sq = 0.0;
  std::size_t count = 0;
  for (const auto& scene : train) {
    if (anchor_step >= scene.steps()) throw ShapeError("anchor step beyond scene length");
    const auto c = centroid_at(scene, anchor_step);
    const auto v = scene.positions.values();
    for (std::size_t i = 0; i < v.size(); i += 2) {
      sq += (v[i] - c[0]) * (v[i] - c[0]) + (v[i + 1] - c[1]) * (v[i + 1] - c[1]);
      count += 2;
    }
  }
  const double rms = count ? std::sqrt(sq / static_cast<double>(count)) : 0.0;
  stats.scale = rms > 1e-12 ? rms : 1.0;
  return stats;
}

std::vector<TrajectoryScene> normalize(const std::vector<TrajectoryScene>& scenes,
                                       const NormalizationStats& stats) {
  std::vector<TrajectoryScene> out;
  out.reserve(scenes.size());
  for (const auto& scene : scenes) {
    if (scene.scale != 1.0 || scene.origin != std::array<double, 2>{0.0, 0.0}) {
      throw std::logic_error("scene " + std::to_string(scene.id) + " is already normalized");
    }
    TrajectoryScene n = scene;
    n.origin = centroid_at(scene, stats.anchor_step);
    n.scale = stats.scale;
    std::vector<double> v(scene.positions.values().begin(), scene.positions.values().end());
    for (std::size_t i = 0; i < v.size(); i += 2) {
      v[i] = (v[i] - n.origin[0]) / n.scale;
      v[i + 1] = (v[i + 1] - n.origin[1]) / n.scale;
    }
    n.positions = Tensor::from(scene.positions.shape(), std::move(v));
    out.push_back(std::move(n));
  }
  return out;
}

Tensor to_world(const Tensor& points, const TrajectoryScene& scene) {
  if (points.rank() == 0 || points.shape().back() != 2) throw ShapeError("points must be [..., 2]");
  std::vector<double> v(points.values().begin(), points.values().end());
  for (std::size_t i = 0; i < v.size(); i += 2) {
    v[i] = v[i] * scene.scale + scene.origin[0];
    v[i + 1] = v[i + 1] * scene.scale + scene.origin[1];
  }
  return Tensor::from(points.shape(), std::move(v));
}

std::vector<TrajectoryScene> denormalize(const std::vector<TrajectoryScene>& scenes) {
  std::vector<TrajectoryScene> out;
  out.reserve(scenes.size());
  for (const auto& scene : scenes) {
    TrajectoryScene w = scene;
    w.positions = to_world(scene.positions, scene);
    w.origin = {0.0, 0.0};
    w.scale = 1.0;
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits and batching

int split_bucket(std::uint64_t scene_id) {
  const std::uint64_t h = mix_seed(0x5CE11E5ULL, scene_id) % 100;
  if (h < 70) return 0;
  if (h < 85) return 1;
  return 2;
}

DatasetSplit split_dataset(const std::vector<TrajectoryScene>& scenes, std::size_t anchor_step) {
  std::vector<TrajectoryScene> parts[3];
  std::set<std::uint64_t> seen;
  for (const auto& scene : scenes) {
    if (!seen.insert(scene.id).second) {
      throw std::invalid_argument("duplicate scene id " + std::to_string(scene.id));
    }
    parts[split_bucket(scene.id)].push_back(scene);
  }
  DatasetSplit split;
  split.stats = compute_normalization(parts[0], anchor_step);
  split.train = normalize(parts[0], split.stats);
  split.validation = normalize(parts[1], split.stats);
  split.test = normalize(parts[2], split.stats);
  return split;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<TrajectoryScene>& scenes,
                                                   std::size_t batch_size, std::mt19937_64* rng) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::map<std::size_t, std::vector<std::size_t>> by_agents;
  for (std::size_t i = 0; i < scenes.size(); ++i) by_agents[scenes[i].agents()].push_back(i);
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [agents, idx] : by_agents) {
    if (rng) std::shuffle(idx.begin(), idx.end(), *rng);
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
      const std::size_t end = std::min(idx.size(), start + batch_size);
      batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                           idx.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  if (rng) std::shuffle(batches.begin(), batches.end(), *rng);
  return batches;
}

Tensor stack_window(const std::vector<TrajectoryScene>& scenes,
                    const std::vector<std::size_t>& indices, std::size_t start, std::size_t length) {
  if (indices.empty()) throw ShapeError("empty batch");
  const std::size_t agents = scenes[indices[0]].agents();
  std::vector<double> out;
  out.reserve(indices.size() * agents * length * 2);
  for (std::size_t idx : indices) {
    const auto& scene = scenes[idx];
    if (scene.agents() != agents) throw ShapeError("batched scenes differ in agent count");
    if (start + length > scene.steps()) throw ShapeError("window exceeds scene length");
    const auto v = scene.positions.values();
    for (std::size_t a = 0; a < agents; ++a) {
      const auto* row = v.data() + (a * scene.steps() + start) * 2;
      out.insert(out.end(), row, row + length * 2);
    }
  }
  return Tensor::from({indices.size(), agents, length, 2}, std::move(out));
}

ObservationBundle make_batch_bundle(const std::vector<TrajectoryScene>& scenes,
                                    const std::vector<std::size_t>& indices,
                                    const LengthSet& lengths, std::size_t horizon,
                                    DerivationMode mode) {
  check_lengths(lengths);
  const std::size_t long_len = lengths[2];
  ObservationBundle bundle;
  bundle.mode = mode;
  if (mode == DerivationMode::truncation) {
    const Tensor future = stack_window(scenes, indices, long_len, horizon);
    for (std::size_t b = 0; b < 3; ++b) {
      bundle.observations[b] = stack_window(scenes, indices, long_len - lengths[b], lengths[b]);
      bundle.futures[b] = future;
    }
  } else {
    for (std::size_t b = 0; b < 3; ++b) {
      bundle.observations[b] = stack_window(scenes, indices, 0, lengths[b]);
      bundle.futures[b] = stack_window(scenes, indices, lengths[b], horizon);
    }
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Dataset files

void save_dataset(const std::filesystem::path& dir, const std::vector<TrajectoryScene>& scenes,
                  const DatasetManifest& manifest) {
  nlohmann::json j;
  j["format"] = "fln-dataset";
  j["version"] = 1;
  j["source"] = manifest.source;
  j["seed"] = manifest.seed;
  j["dt"] = manifest.dt;
  j["motion_mix"] = {manifest.mix.constant_velocity, manifest.mix.constant_turn,
                     manifest.mix.stop_and_go};
  j["steps"] = scenes.empty() ? manifest.steps : scenes.front().steps();
  j["scene_count"] = scenes.size();
  std::size_t agents_total = 0;
  nlohmann::json list = nlohmann::json::array();
  std::string payload;
  for (const auto& scene : scenes) {
    if (scene.steps() != j["steps"].get<std::size_t>()) {
      throw ShapeError("all scenes in a dataset must have the same length");
    }
    list.push_back({{"id", scene.id}, {"agents", scene.agents()}});
    agents_total += scene.agents();
    io::append_le_doubles(payload, scene.positions.values());
  }
  j["agent_count"] = agents_total;
  j["scenes"] = std::move(list);
  j["payload"] = "positions.bin";
  std::filesystem::create_directories(dir);
  io::write_file_atomic(dir / "positions.bin", payload);
  io::write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

std::vector<TrajectoryScene> load_dataset(const std::filesystem::path& dir,
                                          DatasetManifest* manifest_out) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad dataset manifest: " + std::string(e.what()));
  }
  if (j.value("format", "") != "fln-dataset" || j.value("version", 0) != 1) {
    throw ParseError("unsupported dataset manifest in " + dir.string());
  }
  const auto payload = io::decode_le_doubles(io::read_file(dir / j.at("payload").get<std::string>()));
  const std::size_t steps = j.at("steps").get<std::size_t>();
  const double dt = j.at("dt").get<double>();
  std::vector<TrajectoryScene> scenes;
  std::size_t offset = 0;
  DatasetManifest m;
  for (const auto& entry : j.at("scenes")) {
    const std::size_t agents = entry.at("agents").get<std::size_t>();
    const std::size_t count = agents * steps * 2;
    if (offset + count > payload.size()) throw ParseError("dataset payload is truncated");
    TrajectoryScene scene;
    scene.id = entry.at("id").get<std::uint64_t>();
    scene.dt = dt;
    scene.positions = Tensor::from({agents, steps, 2},
                                   std::vector<double>(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                                                       payload.begin() + static_cast<std::ptrdiff_t>(offset + count)));
    offset += count;
    m.scene_ids.push_back(scene.id);
    m.scene_agents.push_back(agents);
    scenes.push_back(std::move(scene));
  }
  if (offset != payload.size()) throw ParseError("dataset payload has trailing values");
  if (manifest_out) {
    m.source = j.value("source", "synthetic");
    m.seed = j.value("seed", std::uint64_t{0});
    m.dt = dt;
    const auto mix = j.at("motion_mix");
    m.mix = {mix.at(0).get<double>(), mix.at(1).get<double>(), mix.at(2).get<double>()};
    m.steps = steps;
    *manifest_out = std::move(m);
  }
  return scenes;
}

}  // namespace fln
