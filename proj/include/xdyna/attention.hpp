#pragma once

// Graph-level attention variants: the backbone's self/cross attention, the
// three appearance-reference mechanisms and the frame-axis motion attention.
// Token tensors are [N, d, L] (channel-major per frame).

#include "xdyna/autograd.hpp"

namespace xdyna {

template <typename T>
struct AttnVars {
  Var<T> q, k, v, o;
};

/// A_i W_O with A_i = softmax(Q_i K_i^T / sqrt(d)) V_i.
template <typename T>
Var<T> self_attention(Graph<T>& g, Var<T> z, const AttnVars<T>& w) {
  Var<T> q = ops::linear(g, z, w.q), k = ops::linear(g, z, w.k), v = ops::linear(g, z, w.v);
  return ops::linear(g, ops::attention(g, q, k, v), w.o);
}

/// Self-attention plus the cross-frame residual
///   A'_i = softmax(Q'_i K_R^T / sqrt(d)) V_R,  Out_i = A_i W_O + A'_i W'_O
/// where Q'_i = z_i W'_Q. `k_ref`/`v_ref` hold a single reference frame shared
/// by all generation frames.
template <typename T>
Var<T> dynamics_adapter_attention(Graph<T>& g, Var<T> z, const AttnVars<T>& layer, Var<T> q_prime,
                                  Var<T> o_prime, Var<T> k_ref, Var<T> v_ref) {
  if (k_ref->value.channels() != layer.k->value.dim(1) || v_ref->value.channels() != layer.v->value.dim(1))
    throw ShapeError("dynamics_adapter_attention: reference cache does not match layer dimensions");
  if (z->value.channels() != q_prime->value.dim(0))
    throw ShapeError("dynamics_adapter_attention: hidden state width does not match adapter");
  Var<T> base = self_attention(g, z, layer);
  Var<T> a_ref = ops::attention(g, ops::linear(g, z, q_prime), k_ref, v_ref);
  return ops::add(g, base, ops::linear(g, a_ref, o_prime));
}

/// ReferenceNet-style attention: keys and values from [z_i, z_r], queries from z_i.
template <typename T>
Var<T> refnet_concat_attention(Graph<T>& g, Var<T> z, const AttnVars<T>& layer, Var<T> z_ref) {
  if (z_ref->value.channels() != z->value.channels())
    throw ShapeError("refnet_concat_attention: feature dimension mismatch between z_i and z_r");
  Var<T> q = ops::linear(g, z, layer.q);
  Var<T> k = ops::concat_tokens(g, ops::linear(g, z, layer.k), ops::linear(g, z_ref, layer.k));
  Var<T> v = ops::concat_tokens(g, ops::linear(g, z, layer.v), ops::linear(g, z_ref, layer.v));
  return ops::linear(g, ops::attention(g, q, k, v), layer.o);
}

/// Text cross-attention; `text` is [1, d_text, Lt].
template <typename T>
Var<T> cross_attention(Graph<T>& g, Var<T> z, const AttnVars<T>& layer, Var<T> text) {
  Var<T> q = ops::linear(g, z, layer.q);
  Var<T> a = ops::attention(g, q, ops::linear(g, text, layer.k), ops::linear(g, text, layer.v));
  return ops::linear(g, a, layer.o);
}

/// IP-Adapter decoupled cross-attention with a shared query:
///   (softmax(Q K_t^T/sqrt(d)) V_t + lambda * softmax(Q K'_R^T/sqrt(d)) V'_R) W_O
template <typename T>
Var<T> ip_adapter_attention(Graph<T>& g, Var<T> z, const AttnVars<T>& layer, Var<T> k_prime, Var<T> v_prime,
                            Var<T> text, Var<T> ref_tokens, T lambda) {
  if (text->value.length() == 0) throw ShapeError("ip_adapter_attention: text tokens must be nonempty");
  if (ref_tokens->value.channels() != k_prime->value.dim(0))
    throw ShapeError("ip_adapter_attention: reference token width does not match projections");
  if (text->value.channels() != layer.k->value.dim(0))
    throw ShapeError("ip_adapter_attention: text token width does not match projections");
  Var<T> q = ops::linear(g, z, layer.q);
  Var<T> a_text = ops::attention(g, q, ops::linear(g, text, layer.k), ops::linear(g, text, layer.v));
  Var<T> a_ref = ops::attention(g, q, ops::linear(g, ref_tokens, k_prime), ops::linear(g, ref_tokens, v_prime));
  return ops::linear(g, ops::add(g, a_text, ops::scale(g, a_ref, lambda)), layer.o);
}

/// Sinusoidal frame-position table {frames, d} stored as [frames, d, 1].
template <typename T>
Tensor<T> frame_position_table(int frames, int d) {
  Tensor<T> pe({frames, d, 1});
  for (int f = 0; f < frames; ++f)
    for (int i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
      pe[static_cast<std::size_t>(f) * d + i] =
          static_cast<T>(i % 2 == 0 ? std::sin(f * rate) : std::cos(f * rate));
    }
  return pe;
}

/// Motion module over [F, d, L]: every token position attends across frames,
///   out = z + Attn((z + P) W_Q, (z + P) W_K, (z + P) W_V) W_O
/// where P holds one position code per frame (rows of `positions`).
template <typename T>
Var<T> temporal_attention(Graph<T>& g, Var<T> z, const AttnVars<T>& w, Var<T> positions) {
  const int f = z->value.frames();
  if (positions->value.frames() < f)
    throw ConfigError("temporal_attention: " + std::to_string(f) + " frames exceed position table of " +
                      std::to_string(positions->value.frames()));
  Var<T> pe = positions;
  if (positions->value.frames() != f) {
    Tensor<T> rows({f, positions->value.channels(), 1});
    std::copy_n(positions->value.data(), rows.size(), rows.data());
    pe = g.constant(std::move(rows));
  }
  Var<T> zp = ops::add_bias(g, z, pe);
  Var<T> a = ops::frame_attention(g, ops::linear(g, zp, w.q), ops::linear(g, zp, w.k), ops::linear(g, zp, w.v));
  return ops::add(g, z, ops::linear(g, a, w.o));
}

}  // namespace xdyna
