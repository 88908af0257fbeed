#pragma once

// Appearance-reference mechanisms behind one interface: the Dynamics-Adapter,
// the ReferenceNet concatenated self-attention and the IP-Adapter decoupled
// cross-attention. Matrix overloads operate on token matrices [tokens x d_model]
// and share their arithmetic with the graph versions used inside the UNet.

#include "xdyna/unet.hpp"

namespace xdyna {

/// Projections of one attention layer; Q = Z W_Q etc. for tokens Z [L x d_model].
template <typename T>
struct AttentionLayerParams {
  Mat<T> W_Q, W_K, W_V, W_O;
  int d() const { return static_cast<int>(W_Q.cols()); }
};

template <typename T>
struct DynamicsAdapterLayer {
  Mat<T> W_Q_prime, W_O_prime;
};

template <typename T>
struct DynamicsAdapterParams {
  std::vector<DynamicsAdapterLayer<T>> layers;
};

template <typename T>
struct IPAdapterLayer {
  Mat<T> W_K_prime, W_V_prime;
};

/// Reference-image features per self-attention layer. `z_ref` is the hidden
/// state entering the layer; K_R/V_R are the backbone's own key/value
/// projections of it (empty for modes that do not use them).
template <typename T>
struct ReferenceCacheLayer {
  Mat<T> z_ref, K_R, V_R;
};

template <typename T>
struct ReferenceCache {
  AdapterMode mode = AdapterMode::none;
  std::vector<ReferenceCacheLayer<T>> layers;
  Tensor<T> ip_tokens;  // [1, text_dim, ip_tokens] in ip_adapter mode
};

template <typename T>
AttentionLayerParams<T> attention_layer_params(const ParamStore<T>& p, int layer, bool cross = false,
                                               Group grp = Group::backbone) {
  const std::string pre = attn_prefix(layer) + (cross ? ".x" : ".");
  return {to_matrix(p.at(grp, pre + "q")), to_matrix(p.at(grp, pre + "k")), to_matrix(p.at(grp, pre + "v")),
          to_matrix(p.at(grp, pre + "o"))};
}

template <typename T>
DynamicsAdapterParams<T> dynamics_adapter_params(const ParamStore<T>& p) {
  DynamicsAdapterParams<T> out;
  for (int i = 0; i < UNetConfig::attention_layers; ++i) {
    const std::string pre = "adapter" + std::to_string(i);
    out.layers.push_back({to_matrix(p.at(Group::adapter, pre + ".q")), to_matrix(p.at(Group::adapter, pre + ".o"))});
  }
  return out;
}

template <typename T>
IPAdapterLayer<T> ip_adapter_layer(const ParamStore<T>& p, int layer) {
  const std::string pre = "ip" + std::to_string(layer);
  return {to_matrix(p.at(Group::ip_adapter, pre + ".k")), to_matrix(p.at(Group::ip_adapter, pre + ".v"))};
}

namespace detail {

template <typename T>
AttnVars<T> const_layer(Graph<T>& g, const AttentionLayerParams<T>& l) {
  return {g.constant(from_matrix(l.W_Q)), g.constant(from_matrix(l.W_K)), g.constant(from_matrix(l.W_V)),
          g.constant(from_matrix(l.W_O))};
}

template <typename T>
Var<T> tokens(Graph<T>& g, const Mat<T>& z) {
  return g.constant(tokens_to_tensor(z));
}

}  // namespace detail

/// Out = A W_O + A' W'_O with A' = softmax(Q' K_R^T / sqrt(d)) V_R.
template <typename T>
Mat<T> dynamics_adapter_attention(const AttentionLayerParams<T>& layer, const DynamicsAdapterLayer<T>& adapter,
                                  const Mat<T>& z, const ReferenceCacheLayer<T>& cache) {
  if (cache.K_R.cols() != layer.W_K.cols() || cache.V_R.cols() != layer.W_V.cols() || z.cols() != layer.W_Q.rows())
    throw ShapeError("dynamics_adapter_attention: dimension mismatch between hidden states and cache");
  Graph<T> g(false);
  Var<T> out = dynamics_adapter_attention(g, detail::tokens(g, z), detail::const_layer(g, layer),
                                          g.constant(from_matrix(adapter.W_Q_prime)),
                                          g.constant(from_matrix(adapter.W_O_prime)), detail::tokens(g, cache.K_R),
                                          detail::tokens(g, cache.V_R));
  return tensor_to_tokens(out->value);
}

/// Attention over [z_i, z_r] keys/values with queries from z_i.
template <typename T>
Mat<T> refnet_concat_attention(const AttentionLayerParams<T>& layer, const Mat<T>& z_i, const Mat<T>& z_r) {
  if (z_r.cols() != z_i.cols()) throw ShapeError("refnet_concat_attention: feature dimension mismatch");
  Graph<T> g(false);
  Var<T> out = refnet_concat_attention(g, detail::tokens(g, z_i), detail::const_layer(g, layer), detail::tokens(g, z_r));
  return tensor_to_tokens(out->value);
}

/// Plain self-attention output A W_O.
template <typename T>
Mat<T> self_attention(const AttentionLayerParams<T>& layer, const Mat<T>& z) {
  Graph<T> g(false);
  return tensor_to_tokens(self_attention(g, detail::tokens(g, z), detail::const_layer(g, layer))->value);
}

/// Text-only cross-attention output.
template <typename T>
Mat<T> cross_attention(const AttentionLayerParams<T>& layer, const Mat<T>& z, const Mat<T>& text) {
  Graph<T> g(false);
  return tensor_to_tokens(
      cross_attention(g, detail::tokens(g, z), detail::const_layer(g, layer), detail::tokens(g, text))->value);
}

/// (A' + lambda A'') W_O with a shared query and separate key/value projections
/// for the reference tokens.
template <typename T>
Mat<T> ip_adapter_attention(const AttentionLayerParams<T>& layer, const IPAdapterLayer<T>& ip, const Mat<T>& z,
                            const Mat<T>& text, const Mat<T>& ref_tokens, T lambda) {
  if (lambda < T(0)) throw ParameterError("ip_adapter_attention: lambda must be nonnegative");
  Graph<T> g(false);
  Var<T> out = ip_adapter_attention(g, detail::tokens(g, z), detail::const_layer(g, layer),
                                    g.constant(from_matrix(ip.W_K_prime)), g.constant(from_matrix(ip.W_V_prime)),
                                    detail::tokens(g, text), detail::tokens(g, ref_tokens), lambda);
  return tensor_to_tokens(out->value);
}

/// Mean-pooled patch encoding of one image [1, C, H, W] -> [1, C*P*P, 1].
template <typename T>
Tensor<T> pooled_patch_encoding(const Tensor<T>& image, int patch) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(2) % patch || image.dim(3) % patch)
    throw ShapeError("pooled_patch_encoding: image " + shape_str(image.shape()) + " not tileable by " +
                     std::to_string(patch));
  const int c = image.dim(1), h = image.dim(2), w = image.dim(3);
  const int np = (h / patch) * (w / patch);
  Tensor<T> out({1, c * patch * patch, 1});
  for (int ch = 0; ch < c; ++ch)
    for (int py = 0; py < patch; ++py)
      for (int px = 0; px < patch; ++px) {
        T s = 0;
        for (int by = 0; by < h / patch; ++by)
          for (int bx = 0; bx < w / patch; ++bx)
            s += image[(static_cast<std::size_t>(ch) * h + by * patch + py) * w + bx * patch + px];
        out[(ch * patch + py) * patch + px] = s / static_cast<T>(np);
      }
  return out;
}

/// Reference conditioning for one graph. The reference image [1, C, H, W] is
/// evaluated clean (t = 0). The Dynamics-Adapter reads the frozen backbone,
/// the ReferenceNet baseline its own trainable copy, and the IP-Adapter a
/// projected pooled patch embedding.
template <typename T>
Conditioning<T> reference_conditioning(Binder<T>& b, const UNetConfig& cfg, AdapterMode mode, Var<T> ref_image) {
  Conditioning<T> c;
  c.mode = mode;
  Graph<T>& g = b.graph();
  if (mode == AdapterMode::none) return c;
  if (ref_image->value.rank() != 4 || ref_image->value.dim(0) != 1 || ref_image->value.dim(1) != cfg.in_channels)
    throw ShapeError("reference image must be [1, C, H, W], got " + shape_str(ref_image->value.shape()));
  if (mode == AdapterMode::ip_adapter) {
    Var<T> pooled = g.constant(pooled_patch_encoding(ref_image->value, cfg.ip_patch));
    Var<T> proj = ops::linear(g, pooled, b(Group::ip_adapter, "proj.w"), b(Group::ip_adapter, "proj.b"));
    c.ip_tokens = ops::reshape(g, proj, {1, cfg.text_dim, cfg.ip_tokens});
    return c;
  }
  const Group src = mode == AdapterMode::refnet_concat ? Group::refnet : Group::backbone;
  Capture<T> cap;
  cap.stop_after_attention = true;
  unet_forward(b, src, cfg, ref_image, 0, Conditioning<T>{}, &cap);
  for (int i = 0; i < UNetConfig::attention_layers; ++i) {
    ReferenceLayerVars<T> r;
    r.z_ref = cap.hidden.at(i);
    if (mode == AdapterMode::dynamics_adapter) {
      r.k_ref = ops::linear(g, r.z_ref, b(Group::backbone, attn_prefix(i) + ".k"));
      r.v_ref = ops::linear(g, r.z_ref, b(Group::backbone, attn_prefix(i) + ".v"));
    }
    c.reference.push_back(r);
  }
  return c;
}

/// Evaluate the reference branch once and keep its outputs as plain matrices.
template <typename T>
ReferenceCache<T> encode_reference(const ParamStore<T>& params, const UNetConfig& cfg, AdapterMode mode,
                                   const Tensor<T>& ref_image) {
  Tensor<T> img = ref_image.rank() == 3 ? ref_image.reshaped({1, ref_image.dim(0), ref_image.dim(1), ref_image.dim(2)})
                                        : ref_image;
  if (img.rank() != 4 || img.dim(0) != 1 || img.dim(1) != cfg.in_channels)
    throw ShapeError("encode_reference: expected a single [C, H, W] frame, got " + shape_str(ref_image.shape()));
  Graph<T> g(false);
  Binder<T> b(g, params);
  Conditioning<T> c = reference_conditioning(b, cfg, mode, g.constant(img));
  ReferenceCache<T> cache;
  cache.mode = mode;
  if (c.ip_tokens) cache.ip_tokens = c.ip_tokens->value;
  for (const auto& r : c.reference) {
    ReferenceCacheLayer<T> layer;
    layer.z_ref = tensor_to_tokens(r.z_ref->value);
    if (r.k_ref) layer.K_R = tensor_to_tokens(r.k_ref->value);
    if (r.v_ref) layer.V_R = tensor_to_tokens(r.v_ref->value);
    cache.layers.push_back(std::move(layer));
  }
  return cache;
}

/// Graph constants for a cached reference.
template <typename T>
Conditioning<T> conditioning_from_cache(Graph<T>& g, const ReferenceCache<T>& cache) {
  Conditioning<T> c;
  c.mode = cache.mode;
  if (cache.mode == AdapterMode::ip_adapter) c.ip_tokens = g.constant(cache.ip_tokens);
  for (const auto& l : cache.layers) {
    ReferenceLayerVars<T> r;
    r.z_ref = g.constant(tokens_to_tensor(l.z_ref));
    if (l.K_R.size()) r.k_ref = g.constant(tokens_to_tensor(l.K_R));
    if (l.V_R.size()) r.v_ref = g.constant(tokens_to_tensor(l.V_R));
    c.reference.push_back(r);
  }
  return c;
}

}  // namespace xdyna
