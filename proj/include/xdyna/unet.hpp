#pragma once

#include "xdyna/attention.hpp"
#include "xdyna/model.hpp"

namespace xdyna {

/// Reference features for one self-attention layer. The Dynamics-Adapter reads
/// `k_ref`/`v_ref`; the ReferenceNet baseline reads `z_ref`.
template <typename T>
struct ReferenceLayerVars {
  Var<T> z_ref = nullptr;
  Var<T> k_ref = nullptr;
  Var<T> v_ref = nullptr;
};

/// Everything that can be attached to a backbone evaluation.
template <typename T>
struct Conditioning {
  AdapterMode mode = AdapterMode::none;
  std::vector<ReferenceLayerVars<T>> reference;  // one per attention layer
  Var<T> ip_tokens = nullptr;                    // [1, text_dim, ip_tokens]
  T ip_scale = T(1);
  std::vector<Var<T>> control;                   // empty or one residual per control point
  bool temporal = false;
};

/// Optional hooks into a backbone pass: records the normalized hidden states
/// entering each spatial self-attention layer, and can stop the pass once the
/// last attention layer has been visited.
template <typename T>
struct Capture {
  std::vector<Var<T>> hidden;
  bool stop_after_attention = false;
};

/// Sinusoidal timestep features [1, dim, 1].
template <typename T>
Tensor<T> timestep_features(int t, int dim) {
  Tensor<T> out({1, dim, 1});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[i] = static_cast<T>(std::sin(t * freq));
    out[half + i] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

namespace detail {

template <typename T>
class Scope {
 public:
  Scope(Binder<T>& b, Group grp, const UNetConfig& cfg) : b_(b), grp_(grp), cfg_(cfg) {}
  Var<T> operator()(const std::string& name) const { return b_(grp_, name); }
  Graph<T>& g() const { return b_.graph(); }
  const UNetConfig& cfg() const { return cfg_; }

  Var<T> conv(const std::string& name, Var<T> x, int stride = 1) const {
    return ops::conv2d(g(), x, (*this)(name + ".w"), (*this)(name + ".b"), stride);
  }
  Var<T> norm(const std::string& name, Var<T> x) const {
    return ops::group_norm(g(), x, (*this)(name + ".g"), (*this)(name + ".b"), cfg_.norm_groups);
  }
  AttnVars<T> attn(const std::string& p, bool cross) const {
    const char* pre = cross ? "x" : "";
    return {(*this)(p + "." + pre + "q"), (*this)(p + "." + pre + "k"), (*this)(p + "." + pre + "v"),
            (*this)(p + "." + pre + "o")};
  }

 private:
  Binder<T>& b_;
  Group grp_;
  const UNetConfig& cfg_;
};

template <typename T>
Var<T> res_block(const Scope<T>& s, const std::string& name, Var<T> x, Var<T> temb_act) {
  Graph<T>& g = s.g();
  Var<T> h = s.conv(name + ".conv1", ops::silu(g, s.norm(name + ".gn1", x)));
  h = ops::add_bias(g, h, ops::linear(g, temb_act, s(name + ".temb.w"), s(name + ".temb.b")));
  h = s.conv(name + ".conv2", ops::silu(g, s.norm(name + ".gn2", h)));
  Var<T> skip = x->value.channels() == h->value.channels() ? x : s.conv(name + ".skip", x);
  return ops::add(g, skip, h);
}

}  // namespace detail

/// Timestep embedding MLP output [1, time_dim, 1] (before the SiLU each block applies).
template <typename T>
Var<T> time_embedding(Binder<T>& b, Group grp, const UNetConfig& cfg, int t) {
  detail::Scope<T> s(b, grp, cfg);
  Graph<T>& g = b.graph();
  Var<T> f = g.constant(timestep_features<T>(t, cfg.time_freq_dim));
  Var<T> h = ops::silu(g, ops::linear(g, f, s("time.lin1.w"), s("time.lin1.b")));
  return ops::linear(g, h, s("time.lin2.w"), s("time.lin2.b"));
}

namespace detail {

template <typename T>
Var<T> attention_layer(const Scope<T>& s, Binder<T>& b, int layer, Var<T> h, const Conditioning<T>& cond,
                       Capture<T>* cap) {
  Graph<T>& g = s.g();
  const std::string p = attn_prefix(layer);
  const Shape spatial = h->value.shape();
  const int n = spatial[0], d = spatial[1];
  const int l = h->value.length();
  Var<T> z = ops::reshape(g, s.norm(p + ".gn", h), {n, d, l});
  if (cap) cap->hidden.push_back(z);

  const AttnVars<T> self = s.attn(p, false);
  Var<T> sa;
  switch (cond.mode) {
    case AdapterMode::dynamics_adapter: {
      const auto& r = cond.reference.at(layer);
      const std::string ap = "adapter" + std::to_string(layer);
      sa = dynamics_adapter_attention(g, z, self, b(Group::adapter, ap + ".q"), b(Group::adapter, ap + ".o"),
                                      r.k_ref, r.v_ref);
      break;
    }
    case AdapterMode::refnet_concat:
      sa = refnet_concat_attention(g, z, self, cond.reference.at(layer).z_ref);
      break;
    default:
      sa = self_attention(g, z, self);
  }
  h = ops::add(g, h, ops::reshape(g, sa, spatial));

  Var<T> z2 = ops::reshape(g, s.norm(p + ".gn2", h), {n, d, l});
  Var<T> text = b(Group::text, "null_token");
  const AttnVars<T> cross = s.attn(p, true);
  Var<T> ca;
  if (cond.mode == AdapterMode::ip_adapter) {
    const std::string ip = "ip" + std::to_string(layer);
    ca = ip_adapter_attention(g, z2, cross, b(Group::ip_adapter, ip + ".k"), b(Group::ip_adapter, ip + ".v"), text,
                              cond.ip_tokens, cond.ip_scale);
  } else {
    ca = cross_attention(g, z2, cross, text);
  }
  h = ops::add(g, h, ops::reshape(g, ca, spatial));

  if (cond.temporal) {
    const std::string tp = "temporal" + std::to_string(layer);
    AttnVars<T> tw{b(Group::temporal, tp + ".q"), b(Group::temporal, tp + ".k"), b(Group::temporal, tp + ".v"),
                   b(Group::temporal, tp + ".o")};
    Var<T> pe = g.constant(frame_position_table<T>(s.cfg().max_frames, d));
    Var<T> tz = temporal_attention(g, ops::reshape(g, h, {n, d, l}), tw, pe);
    h = ops::reshape(g, tz, spatial);
  }
  return h;
}

}  // namespace detail

/// Epsilon-prediction UNet over x [F, C, H, W] at integer timestep t.
/// Returns nullptr when the capture asks to stop after the attention layers.
template <typename T>
Var<T> unet_forward(Binder<T>& b, Group grp, const UNetConfig& cfg, Var<T> x, int t, const Conditioning<T>& cond,
                    Capture<T>* cap = nullptr) {
  const Tensor<T>& xv = x->value;
  if (xv.rank() != 4 || xv.dim(1) != cfg.in_channels || xv.dim(2) % 2 || xv.dim(3) % 2)
    throw ShapeError("unet_forward: bad input shape " + shape_str(xv.shape()));
  if ((cond.mode == AdapterMode::dynamics_adapter || cond.mode == AdapterMode::refnet_concat) &&
      static_cast<int>(cond.reference.size()) != UNetConfig::attention_layers)
    throw ConfigError("unet_forward: reference has " + std::to_string(cond.reference.size()) +
                      " layers, backbone has " + std::to_string(UNetConfig::attention_layers));
  if (cond.mode == AdapterMode::ip_adapter && !cond.ip_tokens)
    throw ConfigError("unet_forward: ip_adapter mode without reference tokens");
  if (!cond.control.empty() && static_cast<int>(cond.control.size()) != UNetConfig::control_points)
    throw ConfigError("unet_forward: expected " + std::to_string(UNetConfig::control_points) +
                      " control residuals, got " + std::to_string(cond.control.size()));

  detail::Scope<T> s(b, grp, cfg);
  Graph<T>& g = b.graph();
  Var<T> temb = ops::silu(g, time_embedding(b, grp, cfg, t));

  Var<T> h = s.conv("conv_in", x);
  h = detail::res_block(s, "enc0", h, temb);
  Var<T> skip0 = h;
  h = s.conv("down", h, 2);
  h = detail::res_block(s, "enc1", h, temb);
  h = detail::attention_layer(s, b, 0, h, cond, cap);
  Var<T> skip1 = h;
  h = detail::res_block(s, "mid", h, temb);
  h = detail::attention_layer(s, b, 1, h, cond, cap);
  if (cap && cap->stop_after_attention) return nullptr;

  if (!cond.control.empty()) {
    skip0 = ops::add(g, skip0, cond.control[0]);
    skip1 = ops::add(g, skip1, cond.control[1]);
    h = ops::add(g, h, cond.control[2]);
  }
  h = detail::res_block(s, "dec1", ops::concat_channels(g, h, skip1), temb);
  h = s.conv("up", ops::upsample2x(g, h));
  h = detail::res_block(s, "dec0", ops::concat_channels(g, h, skip0), temb);
  return s.conv("out.conv", ops::silu(g, s.norm("out.gn", h)));
}

/// ControlNet residuals for the three injection points. `hint` is [F, C_ctrl, H, W];
/// `temb_act` is the backbone's activated timestep embedding.
template <typename T>
std::vector<Var<T>> controlnet_forward(Binder<T>& b, Group grp, const UNetConfig& cfg, Var<T> x, Var<T> hint,
                                       Var<T> temb_act) {
  if (hint->value.rank() != 4 || hint->value.dim(0) != x->value.dim(0) || hint->value.dim(2) != x->value.dim(2) ||
      hint->value.dim(3) != x->value.dim(3))
    throw ShapeError("controlnet_forward: control map " + shape_str(hint->value.shape()) +
                     " does not match input " + shape_str(x->value.shape()));
  if (hint->value.dim(1) != cfg.control_channels) throw ShapeError("controlnet_forward: control channel mismatch");
  detail::Scope<T> s(b, grp, cfg);
  Graph<T>& g = b.graph();
  Var<T> e = ops::silu(g, s.conv("hint.conv1", hint));
  e = ops::silu(g, s.conv("hint.conv2", e));
  e = s.conv("hint.zero", e);
  Var<T> h = ops::add(g, s.conv("conv_in", x), e);
  h = detail::res_block(s, "enc0", h, temb_act);
  Var<T> r0 = s.conv("zero0", h);
  h = s.conv("down", h, 2);
  h = detail::res_block(s, "enc1", h, temb_act);
  Var<T> r1 = s.conv("zero1", h);
  h = detail::res_block(s, "mid", h, temb_act);
  Var<T> r2 = s.conv("zero_mid", h);
  return {r0, r1, r2};
}

}  // namespace xdyna
