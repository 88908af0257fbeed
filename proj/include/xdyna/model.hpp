#pragma once

#include "xdyna/autograd.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>

namespace xdyna {

/// Architecture hyperparameters shared by the backbone and every attachment.
struct UNetConfig {
  int in_channels = 3;
  int base_width = 32;   // channels at full resolution
  int inner_width = 64;  // channels at half resolution and in attention layers
  int time_freq_dim = 32;
  int time_dim = 128;
  int text_dim = 64;
  int norm_groups = 8;
  int control_channels = 3;
  int ip_tokens = 4;
  int ip_patch = 8;
  int max_frames = 16;

  /// Spatial self-attention layers: one at the half-resolution encoder level
  /// and one in the bottleneck.
  static constexpr int attention_layers = 2;
  /// Control residual injection points: full-res encoder, half-res encoder, middle.
  static constexpr int control_points = 3;

  int control_width(int level) const { return (level == 0 ? base_width : inner_width) / 2; }
  int attention_dim() const { return inner_width; }

  bool operator==(const UNetConfig&) const = default;
};

/// Parameter groups. Each group is trained or frozen as a unit.
enum class Group { backbone, text, adapter, refnet, ip_adapter, pose_control, face_control, temporal };

inline constexpr std::array<Group, 8> kAllGroups = {Group::backbone,  Group::text,         Group::adapter,
                                                   Group::refnet,    Group::ip_adapter,   Group::pose_control,
                                                   Group::face_control, Group::temporal};

inline std::string_view group_name(Group g) {
  switch (g) {
    case Group::backbone: return "backbone";
    case Group::text: return "text";
    case Group::adapter: return "adapter";
    case Group::refnet: return "refnet";
    case Group::ip_adapter: return "ip_adapter";
    case Group::pose_control: return "pose_control";
    case Group::face_control: return "face_control";
    case Group::temporal: return "temporal";
  }
  return "?";
}

inline Group group_from_name(std::string_view s) {
  for (Group g : kAllGroups)
    if (group_name(g) == s) return g;
  throw ConfigError("unknown parameter group '" + std::string(s) + "'");
}

/// How the reference image reaches the denoiser.
enum class AdapterMode { none, dynamics_adapter, refnet_concat, ip_adapter };

inline std::string_view adapter_mode_name(AdapterMode m) {
  switch (m) {
    case AdapterMode::none: return "none";
    case AdapterMode::dynamics_adapter: return "dynamics_adapter";
    case AdapterMode::refnet_concat: return "refnet_concat";
    case AdapterMode::ip_adapter: return "ip_adapter";
  }
  return "?";
}

inline AdapterMode adapter_mode_from_name(std::string_view s) {
  for (AdapterMode m : {AdapterMode::none, AdapterMode::dynamics_adapter, AdapterMode::refnet_concat,
                        AdapterMode::ip_adapter})
    if (adapter_mode_name(m) == s) return m;
  throw ConfigError("unknown adapter mode '" + std::string(s) + "'");
}

/// Parameter group that carries the appearance-reference weights for a mode.
inline std::optional<Group> adapter_group(AdapterMode m) {
  switch (m) {
    case AdapterMode::dynamics_adapter: return Group::adapter;
    case AdapterMode::refnet_concat: return Group::refnet;
    case AdapterMode::ip_adapter: return Group::ip_adapter;
    case AdapterMode::none: return std::nullopt;
  }
  return std::nullopt;
}

template <typename T>
using ParamGroup = std::map<std::string, Tensor<T>>;

/// All named parameter tensors, keyed by group.
template <typename T>
class ParamStore {
 public:
  ParamGroup<T>& group(Group g) { return groups_[g]; }
  const ParamGroup<T>& group(Group g) const {
    static const ParamGroup<T> empty;
    auto it = groups_.find(g);
    return it == groups_.end() ? empty : it->second;
  }
  bool has(Group g) const { return groups_.count(g) && !groups_.at(g).empty(); }
  void erase(Group g) { groups_.erase(g); }

  const Tensor<T>& at(Group g, const std::string& name) const {
    const auto& grp = group(g);
    auto it = grp.find(name);
    if (it == grp.end())
      throw ConfigError("missing parameter '" + name + "' in group " + std::string(group_name(g)));
    return it->second;
  }
  Tensor<T>& at(Group g, const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamStore&>(*this).at(g, name));
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [g, grp] : groups_)
      for (const auto& [name, t] : grp) out.group(g)[name] = t.template cast<U>();
    return out;
  }

  const std::map<Group, ParamGroup<T>>& groups() const { return groups_; }

  std::size_t count(Group g) const {
    std::size_t n = 0;
    for (const auto& [_, t] : group(g)) n += t.size();
    return n;
  }

  bool operator==(const ParamStore&) const = default;

 private:
  std::map<Group, ParamGroup<T>> groups_;
};

/// SHA-256 over a group's names, shapes and raw bytes, as lowercase hex.
template <typename T>
std::string hash_group(const ParamStore<T>& store, Group g) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& [name, t] : store.group(g)) {
    EVP_DigestUpdate(ctx, name.data(), name.size());
    for (int d : t.shape()) {
      std::int32_t v = d;
      EVP_DigestUpdate(ctx, &v, sizeof v);
    }
    EVP_DigestUpdate(ctx, t.data(), t.size() * sizeof(T));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

namespace init {

template <typename T>
Tensor<T> normal(Shape s, T stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(s));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : t.values()) v = static_cast<T>(nd(rng) * static_cast<double>(stddev));
  return t;
}

template <typename T>
void conv(ParamGroup<T>& grp, const std::string& name, int co, int ci, int k, std::mt19937_64& rng,
          bool zero = false) {
  const T std = T(1) / std::sqrt(static_cast<T>(ci * k * k));
  grp[name + ".w"] = zero ? Tensor<T>({co, ci, k, k}) : normal<T>({co, ci, k, k}, std, rng);
  grp[name + ".b"] = Tensor<T>({co});
}

/// Weight {din, dout} without bias.
template <typename T>
void matrix(ParamGroup<T>& grp, const std::string& name, int din, int dout, std::mt19937_64& rng, bool zero = false) {
  grp[name] = zero ? Tensor<T>({din, dout}) : normal<T>({din, dout}, T(1) / std::sqrt(static_cast<T>(din)), rng);
}

template <typename T>
void dense(ParamGroup<T>& grp, const std::string& name, int din, int dout, std::mt19937_64& rng) {
  matrix(grp, name + ".w", din, dout, rng);
  grp[name + ".b"] = Tensor<T>({dout});
}

template <typename T>
void norm(ParamGroup<T>& grp, const std::string& name, int c) {
  grp[name + ".g"] = Tensor<T>({c}, T(1));
  grp[name + ".b"] = Tensor<T>({c});
}

template <typename T>
void res_block(ParamGroup<T>& grp, const std::string& name, int ci, int co, int temb, std::mt19937_64& rng) {
  norm(grp, name + ".gn1", ci);
  conv(grp, name + ".conv1", co, ci, 3, rng);
  dense(grp, name + ".temb", temb, co, rng);
  norm(grp, name + ".gn2", co);
  conv(grp, name + ".conv2", co, co, 3, rng);
  if (ci != co) conv(grp, name + ".skip", co, ci, 1, rng);
}

template <typename T>
void attention_block(ParamGroup<T>& grp, const std::string& name, int d, int text, std::mt19937_64& rng) {
  norm(grp, name + ".gn", d);
  matrix(grp, name + ".q", d, d, rng);
  matrix(grp, name + ".k", d, d, rng);
  matrix(grp, name + ".v", d, d, rng);
  matrix(grp, name + ".o", d, d, rng);
  norm(grp, name + ".gn2", d);
  matrix(grp, name + ".xq", d, d, rng);
  matrix(grp, name + ".xk", text, d, rng);
  matrix(grp, name + ".xv", text, d, rng);
  matrix(grp, name + ".xo", d, d, rng);
}

}  // namespace init

inline std::string attn_prefix(int layer) { return layer == 0 ? "enc1.attn" : "mid.attn"; }

/// Randomly initialized denoising backbone.
template <typename T>
ParamGroup<T> init_backbone(const UNetConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamGroup<T> g;
  const int w0 = c.base_width, w1 = c.inner_width;
  init::dense(g, "time.lin1", c.time_freq_dim, c.time_dim, rng);
  init::dense(g, "time.lin2", c.time_dim, c.time_dim, rng);
  init::conv(g, "conv_in", w0, c.in_channels, 3, rng);
  init::res_block(g, "enc0", w0, w0, c.time_dim, rng);
  init::conv(g, "down", w1, w0, 3, rng);
  init::res_block(g, "enc1", w1, w1, c.time_dim, rng);
  init::attention_block(g, attn_prefix(0), w1, c.text_dim, rng);
  init::res_block(g, "mid", w1, w1, c.time_dim, rng);
  init::attention_block(g, attn_prefix(1), w1, c.text_dim, rng);
  init::res_block(g, "dec1", 2 * w1, w1, c.time_dim, rng);
  init::conv(g, "up", w0, w1, 3, rng);
  init::res_block(g, "dec0", 2 * w0, w0, c.time_dim, rng);
  init::norm(g, "out.gn", w0);
  init::conv(g, "out.conv", c.in_channels, w0, 3, rng);
  return g;
}

/// Learned null text token [1, text_dim, 1].
template <typename T>
ParamGroup<T> init_text(const UNetConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x7e7ull);
  ParamGroup<T> g;
  g["null_token"] = init::normal<T>({1, c.text_dim, 1}, T(1), rng);
  return g;
}

/// Half-width encoder copy whose residual outputs pass through zero-initialized
/// 1x1 convolutions, so a fresh instance contributes nothing.
template <typename T>
ParamGroup<T> init_controlnet(const UNetConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamGroup<T> g;
  const int h0 = c.control_width(0), h1 = c.control_width(1);
  init::conv(g, "hint.conv1", h0, c.control_channels, 3, rng);
  init::conv(g, "hint.conv2", h0, h0, 3, rng);
  init::conv(g, "hint.zero", h0, h0, 1, rng, true);
  init::conv(g, "conv_in", h0, c.in_channels, 3, rng);
  init::res_block(g, "enc0", h0, h0, c.time_dim, rng);
  init::conv(g, "zero0", c.base_width, h0, 1, rng, true);
  init::conv(g, "down", h1, h0, 3, rng);
  init::res_block(g, "enc1", h1, h1, c.time_dim, rng);
  init::conv(g, "zero1", c.inner_width, h1, 1, rng, true);
  init::res_block(g, "mid", h1, h1, c.time_dim, rng);
  init::conv(g, "zero_mid", c.inner_width, h1, 1, rng, true);
  return g;
}

/// Motion module: one frame-axis attention per spatial attention layer with a
/// zero-initialized output projection.
template <typename T>
ParamGroup<T> init_temporal(const UNetConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamGroup<T> g;
  const int d = c.attention_dim();
  for (int i = 0; i < UNetConfig::attention_layers; ++i) {
    const std::string p = "temporal" + std::to_string(i);
    init::matrix(g, p + ".q", d, d, rng);
    init::matrix(g, p + ".k", d, d, rng);
    init::matrix(g, p + ".v", d, d, rng);
    init::matrix(g, p + ".o", d, d, rng, true);
  }
  return g;
}

/// Dynamics-Adapter: per self-attention layer, a query projection copied from
/// the backbone and a zero output projection.
template <typename T>
ParamGroup<T> init_dynamics_adapter(const ParamGroup<T>& backbone) {
  ParamGroup<T> g;
  for (int i = 0; i < UNetConfig::attention_layers; ++i) {
    auto it = backbone.find(attn_prefix(i) + ".q");
    if (it == backbone.end()) throw ConfigError("backbone has no attention layer " + std::to_string(i));
    const std::string p = "adapter" + std::to_string(i);
    g[p + ".q"] = it->second;
    g[p + ".o"] = Tensor<T>(it->second.shape());
  }
  return g;
}

/// ReferenceNet baseline: a trainable copy of the backbone.
template <typename T>
ParamGroup<T> init_refnet(const ParamGroup<T>& backbone) {
  return backbone;
}

/// IP-Adapter baseline: pooled-patch projector to `ip_tokens` tokens plus new
/// key/value projections per cross-attention layer, initialized from the text ones.
template <typename T>
ParamGroup<T> init_ip_adapter(const UNetConfig& c, const ParamGroup<T>& backbone, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamGroup<T> g;
  const int patch_dim = c.in_channels * c.ip_patch * c.ip_patch;
  init::dense(g, "proj", patch_dim, c.ip_tokens * c.text_dim, rng);
  for (int i = 0; i < UNetConfig::attention_layers; ++i) {
    const std::string p = "ip" + std::to_string(i);
    g[p + ".k"] = backbone.at(attn_prefix(i) + ".xk");
    g[p + ".v"] = backbone.at(attn_prefix(i) + ".xv");
  }
  return g;
}

/// Resolves parameter names to graph leaves for one forward/backward pass and
/// collects their gradients afterwards. Only groups listed as trainable get
/// gradient-carrying leaves.
template <typename T>
class Binder {
 public:
  Binder(Graph<T>& g, const ParamStore<T>& store, std::set<Group> trainable = {})
      : graph_(g), store_(store), trainable_(std::move(trainable)) {}

  Graph<T>& graph() { return graph_; }
  const ParamStore<T>& store() const { return store_; }
  bool trainable(Group g) const { return trainable_.count(g) > 0; }

  Var<T> operator()(Group grp, const std::string& name) {
    auto key = std::make_pair(grp, name);
    auto it = leaves_.find(key);
    if (it != leaves_.end()) return it->second;
    Var<T> v = graph_.leaf(store_.at(grp, name), trainable(grp));
    leaves_.emplace(key, v);
    return v;
  }

  /// Gradients for every bound parameter of `grp` (zero where none reached it).
  ParamGroup<T> grads(Group grp) const {
    ParamGroup<T> out;
    for (const auto& [name, t] : store_.group(grp)) {
      auto it = leaves_.find(std::make_pair(grp, name));
      if (it != leaves_.end() && it->second->has_grad())
        out[name] = it->second->grad;
      else
        out[name] = Tensor<T>(t.shape());
    }
    return out;
  }

  /// True if any leaf of `grp` received a gradient buffer.
  bool touched(Group grp) const {
    for (const auto& [key, v] : leaves_)
      if (key.first == grp && v->has_grad()) return true;
    return false;
  }

 private:
  Graph<T>& graph_;
  const ParamStore<T>& store_;
  std::set<Group> trainable_;
  std::map<std::pair<Group, std::string>, Var<T>> leaves_;
};

}  // namespace xdyna
