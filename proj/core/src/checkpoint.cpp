#include "fln/checkpoint.hpp"

#include <cstring>

#include <json.hpp>

#include "fln/error.hpp"
#include "fln/io.hpp"

namespace fln {

namespace {

constexpr std::string_view kMagic = "FLNCKPT1";

void append_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
}

std::uint64_t read_u64(std::string_view bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(b)]))
         << (8 * b);
  }
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  nlohmann::json config = nlohmann::json::object();
  for (const auto& [k, v] : ck.config.items()) config[k] = v;
  manifest["config"] = config;
  const BranchLayout& layout = ck.model.layout();
  manifest["layout"] = {{"lengths", layout.lengths},
                        {"weight_sharing", layout.weight_sharing},
                        {"independent_pe", layout.independent_pe},
                        {"specialized_ln", layout.specialized_ln}};
  manifest["epoch"] = ck.epoch;
  manifest["normalization"] = {{"anchor_step", ck.normalization.anchor_step},
                               {"scale", ck.normalization.scale}};

  std::string payload;
  std::size_t offset = 0;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : ck.model.params().entries()) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
    io::append_le_doubles(payload, t.values());
    offset += t.numel();
  }
  manifest["parameters"] = params;
  if (ck.optimizer) {
    nlohmann::json moments = nlohmann::json::array();
    for (const auto* which : {&ck.optimizer->m, &ck.optimizer->v}) {
      const char* kind = which == &ck.optimizer->m ? "m" : "v";
      for (const auto& [name, values] : *which) {
        moments.push_back({{"name", name}, {"moment", kind}, {"offset", offset}, {"count", values.size()}});
        io::append_le_doubles(payload, values);
        offset += values.size();
      }
    }
    manifest["optimizer"] = {{"step", ck.optimizer->step}, {"moments", moments}};
  }
  manifest["payload_values"] = offset;

  const std::string text = manifest.dump();
  std::string out(kMagic);
  append_u64(out, text.size());
  out += text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic) {
    throw ParseError("not a checkpoint file (bad magic)");
  }
  const std::uint64_t manifest_size = read_u64(bytes.substr(kMagic.size(), 8));
  const std::size_t header = kMagic.size() + 8;
  if (manifest_size > bytes.size() - header) throw ParseError("checkpoint manifest is truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(header, manifest_size));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad checkpoint manifest: ") + e.what());
  }
  const int version = manifest.value("version", 0);
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  const auto payload = io::decode_le_doubles(bytes.substr(header + manifest_size));
  if (payload.size() != manifest.at("payload_values").get<std::size_t>()) {
    throw ParseError("checkpoint payload size does not match its manifest");
  }

  Checkpoint ck;
  try {
    for (const auto& [k, v] : manifest.at("config").items()) ck.config.set(k, v.get<std::string>());
    BranchLayout layout;
    const auto& l = manifest.at("layout");
    layout.lengths = l.at("lengths").get<std::array<std::size_t, 3>>();
    layout.weight_sharing = l.at("weight_sharing").get<bool>();
    layout.independent_pe = l.at("independent_pe").get<bool>();
    layout.specialized_ln = l.at("specialized_ln").get<bool>();
    ck.model = FlnModel(ck.config.backbone, layout, 0);
    ck.epoch = manifest.at("epoch").get<std::size_t>();
    ck.normalization.anchor_step = manifest.at("normalization").at("anchor_step").get<std::size_t>();
    ck.normalization.scale = manifest.at("normalization").at("scale").get<double>();

    // Offsets must tile the payload exactly, in order.
    std::size_t expected = 0;
    auto take = [&](const nlohmann::json& entry) {
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t count = entry.at("count").get<std::size_t>();
      if (offset != expected || offset + count > payload.size()) {
        throw ParseError("checkpoint offsets do not tile the payload");
      }
      expected += count;
      return std::span<const double>(payload.data() + offset, count);
    };
    const auto& entries = manifest.at("parameters");
    if (entries.size() != ck.model.params().entries().size()) {
      throw ParseError("checkpoint holds " + std::to_string(entries.size()) +
                       " tensors, the configured model has " +
                       std::to_string(ck.model.params().entries().size()));
    }
    for (const auto& entry : entries) {
      const std::string name = entry.at("name").get<std::string>();
      if (!ck.model.params().contains(name)) throw ParseError("unexpected parameter " + name);
      Tensor& t = ck.model.params().get(name);
      if (entry.at("shape").get<Shape>() != t.shape()) {
        throw ParseError("parameter " + name + " has shape " +
                         shape_str(entry.at("shape").get<Shape>()) + ", model expects " +
                         shape_str(t.shape()));
      }
      const auto values = take(entry);
      auto dst = t.mutable_values();
      std::copy(values.begin(), values.end(), dst.begin());
    }
    if (manifest.contains("optimizer")) {
      AdamState state;
      state.step = manifest["optimizer"].at("step").get<std::size_t>();
      for (const auto& entry : manifest["optimizer"].at("moments")) {
        const auto values = take(entry);
        auto& dst = entry.at("moment").get<std::string>() == "m" ? state.m : state.v;
        dst[entry.at("name").get<std::string>()] = std::vector<double>(values.begin(), values.end());
      }
      ck.optimizer = std::move(state);
    }
    if (expected != payload.size()) throw ParseError("checkpoint payload has unreferenced values");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("bad checkpoint configuration: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  io::write_file_atomic(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  return decode_checkpoint(io::read_file(path));
}

}  // namespace fln
