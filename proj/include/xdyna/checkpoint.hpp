#pragma once

// Checkpoint container:
//   "XDYNACK1" | u64 little-endian header length | JSON header | raw float32 tensors
// The header records the architecture, schedule, adapter mode, stage, seed,
// learning rate, frozen groups and an index of (group, name, shape, offset).

#include "xdyna/config.hpp"
#include "xdyna/image_io.hpp"

#include <bit>

namespace xdyna {

inline constexpr char kCheckpointMagic[8] = {'X', 'D', 'Y', 'N', 'A', 'C', 'K', '1'};

inline json checkpoint_header(const Model<float>& m) {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& [g, grp] : m.params.groups())
    for (const auto& [name, t] : grp) {
      index.push_back({{"group", group_name(g)}, {"name", name}, {"shape", t.shape()}, {"offset", offset}});
      offset += t.size();
    }
  json frozen = json::array();
  for (Group g : m.frozen) frozen.push_back(group_name(g));
  json hashes = json::object();
  for (const auto& [g, grp] : m.params.groups()) hashes[std::string(group_name(g))] = hash_group(m.params, g);
  return {{"format", "xdyna-checkpoint"},
          {"version", 1},
          {"arch", arch_json(m.config.arch)},
          {"schedule", schedule_json(m.config.schedule)},
          {"mode", adapter_mode_name(m.config.mode)},
          {"stage", m.stage},
          {"seed", m.seed},
          {"lr", m.lr},
          {"frozen", frozen},
          {"group_sha256", hashes},
          {"tensors", index}};
}

inline std::string serialize_checkpoint(const Model<float>& m) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
  const std::string header = checkpoint_header(m).dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = header.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += header;
  for (const auto& [g, grp] : m.params.groups())
    for (const auto& [name, t] : grp) out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  return out;
}

inline Model<float> deserialize_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  const std::size_t head = sizeof kCheckpointMagic + sizeof(std::uint64_t);
  if (bytes.size() < head || bytes.compare(0, sizeof kCheckpointMagic, kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw IoError(source + " is not an xdyna checkpoint");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof kCheckpointMagic, sizeof len);
  if (bytes.size() < head + len) throw IoError(source + " is truncated");
  json h;
  try {
    h = json::parse(bytes.substr(head, len));
  } catch (const json::exception& e) {
    throw IoError(source + " has a malformed header: " + e.what());
  }
  Model<float> m;
  m.config.arch = arch_from_json(h.at("arch"));
  m.config.schedule = schedule_from_json(h.at("schedule"));
  m.config.mode = adapter_mode_from_name(h.at("mode").get<std::string>());
  m.stage = h.at("stage").get<int>();
  m.seed = h.at("seed").get<std::uint64_t>();
  m.lr = h.at("lr").get<double>();
  for (const auto& g : h.at("frozen")) m.frozen.insert(group_from_name(g.get<std::string>()));
  const char* data = bytes.data() + head + len;
  const std::size_t avail = (bytes.size() - head - len) / sizeof(float);
  for (const auto& e : h.at("tensors")) {
    Tensor<float> t(e.at("shape").get<Shape>());
    const std::uint64_t off = e.at("offset").get<std::uint64_t>();
    if (off + t.size() > avail) throw IoError(source + " is truncated");
    std::memcpy(t.data(), data + off * sizeof(float), t.size() * sizeof(float));
    m.params.group(group_from_name(e.at("group").get<std::string>()))[e.at("name").get<std::string>()] = std::move(t);
  }
  return m;
}

inline void save_checkpoint(const fs::path& path, const Model<float>& m) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  write_text(path, serialize_checkpoint(m));
}

inline Model<float> load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint '" + path.string() + "' not found");
  return deserialize_checkpoint(read_text(path), "'" + path.string() + "'");
}

}  // namespace xdyna
