#pragma once

// Run configuration: one nested JSON document with fixed defaults. Config
// files (JSON or a flat TOML subset) and `key=value` overrides are merged onto
// it; unknown keys and type mismatches are rejected.

#include "xdyna/pipeline.hpp"

#include "json.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace xdyna {

using json = nlohmann::json;

inline json default_config() {
  return json::parse(R"({
    "model": {
      "mode": "dynamics_adapter",
      "in_channels": 3, "base_width": 32, "inner_width": 64,
      "time_freq_dim": 32, "time_dim": 128, "text_dim": 64, "norm_groups": 8,
      "control_channels": 3, "ip_tokens": 4, "ip_patch": 8, "max_frames": 16
    },
    "schedule": {"steps": 100, "beta_start": 0.001, "beta_end": 0.1},
    "train": {
      "stage": 1, "lr": -1.0, "weight_decay": 0.01, "batch_size": 1,
      "epochs": -1, "steps": 0, "seed": 0, "trainable": "", "log_every": 0
    },
    "data": {"human": 64, "scene": 32, "seed": 0},
    "inference": {"steps": 20, "seed": 0, "frames": 8, "ip_scale": 1.0},
    "eval": {"face_threshold": 0.8, "expression_grid_step": 0.1}
  })");
}

namespace detail {

inline bool same_kind(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_object()) return v.is_object();
  return false;
}

inline void merge_into(json& dst, const json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError("config section '" + path + "' must be a table");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& d = dst[it.key()];
    if (d.is_object()) {
      merge_into(d, it.value(), key);
    } else {
      if (!same_kind(d, it.value())) throw ConfigError("config key '" + key + "' has the wrong type");
      d = d.is_number_float() ? json(it.value().get<double>()) : it.value();
    }
  }
}

inline std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

inline std::vector<std::string> split_key(const std::string& key) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    parts.push_back(trim(key.substr(start, dot - start)));
    if (parts.back().empty()) throw ConfigError("empty component in key '" + key + "'");
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return parts;
}

inline json parse_scalar(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v.empty()) throw ConfigError(where + ": missing value");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw ConfigError(where + ": unterminated string");
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  long long i = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), i);
  if (ec == std::errc() && p == v.data() + v.size()) return i;
  double d = 0;
  auto [p2, ec2] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec2 == std::errc() && p2 == v.data() + v.size()) return d;
  throw ConfigError(where + ": cannot parse value '" + v + "'");
}

}  // namespace detail

/// Parse the TOML subset used for run configs: `[table]` headers, dotted keys,
/// `key = value` with strings, booleans, integers and floats, `#` comments.
inline json parse_toml_subset(const std::string& text) {
  json root = json::object();
  std::vector<std::string> table;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string where = "line " + std::to_string(line_no);
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') in_str = !in_str;
      if (line[i] == '#' && !in_str) {
        line.resize(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed table header");
      table = detail::split_key(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    std::vector<std::string> path = table;
    for (auto& k : detail::split_key(line.substr(0, eq))) path.push_back(k);
    json* node = &root;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      json& next = (*node)[path[i]];
      if (next.is_null()) next = json::object();
      if (!next.is_object()) throw ConfigError(where + ": '" + path[i] + "' is not a table");
      node = &next;
    }
    if (node->contains(path.back())) throw ConfigError(where + ": duplicate key '" + path.back() + "'");
    (*node)[path.back()] = detail::parse_scalar(line.substr(eq + 1), where);
  }
  return root;
}

/// Merge a partial config onto `cfg`, rejecting unknown keys.
inline void merge_config(json& cfg, const json& partial) { detail::merge_into(cfg, partial, ""); }

/// Load a `.json` or `.toml` config file and merge it onto the defaults.
inline json load_config(const std::filesystem::path& path) {
  json cfg = default_config();
  if (!std::filesystem::exists(path)) throw IoError("config file '" + path.string() + "' not found");
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  json partial;
  if (path.extension() == ".json") {
    try {
      partial = json::parse(ss.str());
    } catch (const json::exception& e) {
      throw ConfigError("malformed JSON config: " + std::string(e.what()));
    }
  } else {
    partial = parse_toml_subset(ss.str());
  }
  merge_config(cfg, partial);
  return cfg;
}

/// Apply one `dotted.key=value` override; the value is parsed by the type of
/// the existing entry.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = detail::trim(assignment.substr(0, eq));
  const std::string raw = detail::trim(assignment.substr(eq + 1));
  json* node = &cfg;
  for (const auto& part : detail::split_key(key)) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' is a table");
  json v = node->is_string() ? json(raw.size() >= 2 && raw.front() == '"' ? raw.substr(1, raw.size() - 2) : raw)
                             : detail::parse_scalar(raw, "override '" + key + "'");
  if (node->is_number_float() && v.is_number()) v = v.get<double>();
  if (!detail::same_kind(*node, v)) throw ConfigError("override '" + key + "' has the wrong type");
  *node = v;
}

inline json arch_json(const UNetConfig& a) {
  return {{"in_channels", a.in_channels},     {"base_width", a.base_width}, {"inner_width", a.inner_width},
          {"time_freq_dim", a.time_freq_dim}, {"time_dim", a.time_dim},     {"text_dim", a.text_dim},
          {"norm_groups", a.norm_groups},     {"control_channels", a.control_channels},
          {"ip_tokens", a.ip_tokens},         {"ip_patch", a.ip_patch},     {"max_frames", a.max_frames}};
}

inline UNetConfig arch_from_json(const json& j) {
  UNetConfig a;
  a.in_channels = j.at("in_channels").get<int>();
  a.base_width = j.at("base_width").get<int>();
  a.inner_width = j.at("inner_width").get<int>();
  a.time_freq_dim = j.at("time_freq_dim").get<int>();
  a.time_dim = j.at("time_dim").get<int>();
  a.text_dim = j.at("text_dim").get<int>();
  a.norm_groups = j.at("norm_groups").get<int>();
  a.control_channels = j.at("control_channels").get<int>();
  a.ip_tokens = j.at("ip_tokens").get<int>();
  a.ip_patch = j.at("ip_patch").get<int>();
  a.max_frames = j.at("max_frames").get<int>();
  if (a.base_width % (2 * a.norm_groups) || a.inner_width % (2 * a.norm_groups) || a.time_freq_dim % 2)
    throw ConfigError("model widths must be divisible by 2 * norm_groups and time_freq_dim must be even");
  if (a.max_frames < 1 || a.ip_tokens < 1 || a.ip_patch < 1) throw ConfigError("invalid model sizes");
  return a;
}

inline json schedule_json(const ScheduleConfig& s) {
  return {{"steps", s.steps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline ScheduleConfig schedule_from_json(const json& j) {
  return {j.at("steps").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>()};
}

/// Model section of a run config.
inline ModelConfig model_config(const json& cfg) {
  ModelConfig m;
  json arch = cfg.at("model");
  m.mode = adapter_mode_from_name(arch.at("mode").get<std::string>());
  m.arch = arch_from_json(arch);
  m.schedule = schedule_from_json(cfg.at("schedule"));
  make_noise_schedule(m.schedule);  // validates
  return m;
}

inline std::string group_list(const std::set<Group>& groups) {
  std::string s;
  for (Group g : groups) s += (s.empty() ? "" : ",") + std::string(group_name(g));
  return s;
}

inline std::set<Group> parse_group_list(const std::string& s) {
  std::set<Group> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string part = detail::trim(s.substr(start, comma - start));
    if (!part.empty()) out.insert(group_from_name(part));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace xdyna
