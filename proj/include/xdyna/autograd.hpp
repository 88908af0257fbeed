#pragma once

#include "xdyna/tensor.hpp"

#include <cassert>
#include <limits>
#include <memory>
#include <utility>

namespace xdyna {

/// One value in a reverse-mode computation graph.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::function<void()> backward;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

template <typename T>
using Var = Node<T>*;

/// Tape of nodes in creation order. Nodes are owned by the graph; a `Var` is a
/// non-owning handle that stays valid for the lifetime of the graph. With
/// gradients disabled no backward closures are recorded.
template <typename T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false); }
  Var<T> leaf(Tensor<T> v, bool requires_grad) { return push(std::move(v), requires_grad && grad_enabled_); }

  /// Record an op node. `back` is only invoked when the node needs a gradient.
  template <typename F>
  Var<T> op(Tensor<T> v, std::initializer_list<Var<T>> inputs, F&& make_back) {
    bool rg = false;
    if (grad_enabled_)
      for (Var<T> in : inputs) rg = rg || (in && in->requires_grad);
    Var<T> out = push(std::move(v), rg);
    if (rg) out->backward = make_back(out);
    return out;
  }

  /// Reverse sweep from a scalar root.
  void backward(Var<T> root) {
    if (root->value.size() != 1) throw ShapeError("backward expects a scalar root");
    if (!root->requires_grad) return;
    root->grad_buffer().fill(T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && n.has_grad()) n.backward();
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  Var<T> push(Tensor<T> v, bool rg) {
    auto node = std::make_unique<Node<T>>();
    node->value = std::move(v);
    node->requires_grad = rg;
    nodes_.push_back(std::move(node));
    return nodes_.back().get();
  }

  bool grad_enabled_;
  std::vector<std::unique_ptr<Node<T>>> nodes_;
};

namespace ops {

template <typename T>
Var<T> add(Graph<T>& g, Var<T> a, Var<T> b) {
  a->value.check_same(b->value, "add");
  return g.op(a->value + b->value, {a, b}, [a, b](Var<T> out) {
    return [a, b, out] {
      if (a->requires_grad) a->grad_buffer() += out->grad;
      if (b->requires_grad) b->grad_buffer() += out->grad;
    };
  });
}

template <typename T>
Var<T> sub(Graph<T>& g, Var<T> a, Var<T> b) {
  a->value.check_same(b->value, "sub");
  return g.op(a->value - b->value, {a, b}, [a, b](Var<T> out) {
    return [a, b, out] {
      if (a->requires_grad) a->grad_buffer() += out->grad;
      if (b->requires_grad) b->grad_buffer() -= out->grad;
    };
  });
}

template <typename T>
Var<T> scale(Graph<T>& g, Var<T> a, T s) {
  return g.op(a->value * s, {a}, [a, s](Var<T> out) {
    return [a, s, out] {
      Tensor<T>& ga = a->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * out->grad[i];
    };
  });
}

template <typename T>
Var<T> silu(Graph<T>& g, Var<T> x) {
  Tensor<T> y(x->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    T v = x->value[i];
    y[i] = v / (T(1) + std::exp(-v));
  }
  return g.op(std::move(y), {x}, [x](Var<T> out) {
    return [x, out] {
      Tensor<T>& gx = x->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        T v = x->value[i];
        T s = T(1) / (T(1) + std::exp(-v));
        gx[i] += out->grad[i] * s * (T(1) + v * (T(1) - s));
      }
    };
  });
}

template <typename T>
Var<T> reshape(Graph<T>& g, Var<T> x, Shape s) {
  return g.op(x->value.reshaped(std::move(s)), {x}, [x](Var<T> out) {
    return [x, out] {
      Tensor<T>& gx = x->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += out->grad[i];
    };
  });
}

/// x[N, C, L...] + b[Nb, C, 1] with Nb in {1, N}: per-(frame, channel) bias.
template <typename T>
Var<T> add_bias(Graph<T>& g, Var<T> x, Var<T> b) {
  const int n = x->value.frames(), c = x->value.channels(), l = x->value.length();
  const int nb = b->value.frames();
  if (b->value.channels() != c || b->value.length() != 1 || (nb != 1 && nb != n))
    throw ShapeError("add_bias: bias " + shape_str(b->value.shape()) + " incompatible with " +
                     shape_str(x->value.shape()));
  Tensor<T> y = x->value;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      T bv = b->value[(nb == 1 ? 0 : i) * c + ch];
      T* p = y.data() + (static_cast<std::size_t>(i) * c + ch) * l;
      for (int k = 0; k < l; ++k) p[k] += bv;
    }
  return g.op(std::move(y), {x, b}, [x, b, n, c, l, nb](Var<T> out) {
    return [x, b, out, n, c, l, nb] {
      if (x->requires_grad) x->grad_buffer() += out->grad;
      if (b->requires_grad) {
        Tensor<T>& gb = b->grad_buffer();
        for (int i = 0; i < n; ++i)
          for (int ch = 0; ch < c; ++ch) {
            const T* p = out->grad.data() + (static_cast<std::size_t>(i) * c + ch) * l;
            T s = 0;
            for (int k = 0; k < l; ++k) s += p[k];
            gb[(nb == 1 ? 0 : i) * c + ch] += s;
          }
      }
    };
  });
}

/// Per-frame projection of channel-major activations: y_n = x_n W (+ b), where
/// x_n is the [L x Din] token matrix. W is {Din, Dout} column-major, which is
/// the same memory as a [Dout, Din, 1, 1] convolution kernel.
template <typename T>
Var<T> linear(Graph<T>& g, Var<T> x, Var<T> w, Var<T> b = nullptr) {
  const int n = x->value.frames(), din = x->value.channels(), l = x->value.length();
  const int dout = static_cast<int>(w->value.size() / std::max(din, 1));
  if (static_cast<std::size_t>(din) * dout != w->value.size() || dout == 0)
    throw ShapeError("linear: weight " + shape_str(w->value.shape()) + " incompatible with input " +
                     shape_str(x->value.shape()));
  if (b && static_cast<int>(b->value.size()) != dout) throw ShapeError("linear: bias size mismatch");
  Shape os = x->value.shape();
  if (os.size() < 2) throw ShapeError("linear: input needs [N, C, ...]");
  os[1] = dout;
  Tensor<T> y(os);
  ConstMatMap<T> wm(w->value.data(), din, dout);
  for (int i = 0; i < n; ++i) {
    ConstMatMap<T> xi(x->value.data() + static_cast<std::size_t>(i) * din * l, l, din);
    MatMap<T> yi(y.data() + static_cast<std::size_t>(i) * dout * l, l, dout);
    yi.noalias() = xi * wm;
    if (b)
      for (int o = 0; o < dout; ++o) yi.col(o).array() += b->value[o];
  }
  return g.op(std::move(y), {x, w, b}, [x, w, b, n, din, dout, l](Var<T> out) {
    return [x, w, b, out, n, din, dout, l] {
      ConstMatMap<T> wm(w->value.data(), din, dout);
      for (int i = 0; i < n; ++i) {
        ConstMatMap<T> gy(out->grad.data() + static_cast<std::size_t>(i) * dout * l, l, dout);
        if (w->requires_grad) {
          ConstMatMap<T> xi(x->value.data() + static_cast<std::size_t>(i) * din * l, l, din);
          MatMap<T>(w->grad_buffer().data(), din, dout).noalias() += xi.transpose() * gy;
        }
        if (b && b->requires_grad) {
          Tensor<T>& gb = b->grad_buffer();
          for (int o = 0; o < dout; ++o) gb[o] += gy.col(o).sum();
        }
        if (x->requires_grad)
          MatMap<T>(x->grad_buffer().data() + static_cast<std::size_t>(i) * din * l, l, din).noalias() +=
              gy * wm.transpose();
      }
    };
  });
}

namespace detail {

struct ConvGeom {
  int ci, h, w, k, stride, pad, ho, wo;
  int kk() const { return ci * k * k; }
  int hw_out() const { return ho * wo; }
};

template <typename T>
void im2col(const T* src, const ConvGeom& c, T* col) {
  const int hw = c.hw_out();
  for (int ch = 0; ch < c.ci; ++ch)
    for (int ky = 0; ky < c.k; ++ky)
      for (int kx = 0; kx < c.k; ++kx) {
        T* dst = col + static_cast<std::size_t>((ch * c.k + ky) * c.k + kx) * hw;
        const T* plane = src + static_cast<std::size_t>(ch) * c.h * c.w;
        for (int oy = 0; oy < c.ho; ++oy) {
          const int iy = oy * c.stride - c.pad + ky;
          T* row = dst + oy * c.wo;
          if (iy < 0 || iy >= c.h) {
            std::fill(row, row + c.wo, T(0));
            continue;
          }
          const T* srow = plane + iy * c.w;
          for (int ox = 0; ox < c.wo; ++ox) {
            const int ix = ox * c.stride - c.pad + kx;
            row[ox] = (ix >= 0 && ix < c.w) ? srow[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& c, T* dst_img) {
  const int hw = c.hw_out();
  for (int ch = 0; ch < c.ci; ++ch)
    for (int ky = 0; ky < c.k; ++ky)
      for (int kx = 0; kx < c.k; ++kx) {
        const T* src = col + static_cast<std::size_t>((ch * c.k + ky) * c.k + kx) * hw;
        T* plane = dst_img + static_cast<std::size_t>(ch) * c.h * c.w;
        for (int oy = 0; oy < c.ho; ++oy) {
          const int iy = oy * c.stride - c.pad + ky;
          if (iy < 0 || iy >= c.h) continue;
          T* drow = plane + iy * c.w;
          const T* row = src + oy * c.wo;
          for (int ox = 0; ox < c.wo; ++ox) {
            const int ix = ox * c.stride - c.pad + kx;
            if (ix >= 0 && ix < c.w) drow[ix] += row[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. x: [N, Ci, H, W]; w: [Co, Ci, k, k]; b: [Co] or null.
template <typename T>
Var<T> conv2d(Graph<T>& g, Var<T> x, Var<T> w, Var<T> b, int stride = 1, int pad = -1) {
  const Tensor<T>& xv = x->value;
  const Tensor<T>& wv = w->value;
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3))
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " incompatible with kernel " + shape_str(wv.shape()));
  const int k = wv.dim(2);
  if (pad < 0) pad = k / 2;
  if (k == 1 && stride == 1 && pad == 0) return linear(g, x, w, b);
  detail::ConvGeom geo{xv.dim(1), xv.dim(2), xv.dim(3), k, stride, pad, 0, 0};
  geo.ho = (geo.h + 2 * pad - k) / stride + 1;
  geo.wo = (geo.w + 2 * pad - k) / stride + 1;
  const int n = xv.dim(0), co = wv.dim(0), kk = geo.kk(), hw = geo.hw_out();
  if (b && static_cast<int>(b->value.size()) != co) throw ShapeError("conv2d: bias size mismatch");

  Tensor<T> y({n, co, geo.ho, geo.wo});
  const bool keep_cols = g.grad_enabled() && w->requires_grad;
  auto cols = std::make_shared<std::vector<Mat<T>>>();
  Mat<T> col(hw, kk);
  ConstMatMap<T> wm(wv.data(), kk, co);
  const std::size_t in_stride = static_cast<std::size_t>(geo.ci) * geo.h * geo.w;
  for (int i = 0; i < n; ++i) {
    detail::im2col(xv.data() + i * in_stride, geo, col.data());
    MatMap<T> yi(y.data() + static_cast<std::size_t>(i) * co * hw, hw, co);
    yi.noalias() = col * wm;
    if (b)
      for (int o = 0; o < co; ++o) yi.col(o).array() += b->value[o];
    if (keep_cols) cols->push_back(col);
  }
  return g.op(std::move(y), {x, w, b}, [=](Var<T> out) {
    return [=] {
      ConstMatMap<T> wm(w->value.data(), kk, co);
      Mat<T> dcol;
      for (int i = 0; i < n; ++i) {
        ConstMatMap<T> gy(out->grad.data() + static_cast<std::size_t>(i) * co * hw, hw, co);
        if (w->requires_grad)
          MatMap<T>(w->grad_buffer().data(), kk, co).noalias() += (*cols)[i].transpose() * gy;
        if (b && b->requires_grad) {
          Tensor<T>& gb = b->grad_buffer();
          for (int o = 0; o < co; ++o) gb[o] += gy.col(o).sum();
        }
        if (x->requires_grad) {
          dcol.noalias() = gy * wm.transpose();
          detail::col2im_add(dcol.data(), geo, x->grad_buffer().data() + i * in_stride);
        }
      }
    };
  });
}

/// Group normalization over [N, C, L...] with per-channel affine parameters.
template <typename T>
Var<T> group_norm(Graph<T>& g, Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5)) {
  const int n = x->value.frames(), c = x->value.channels(), l = x->value.length();
  if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const int cg = c / groups;
  const std::size_t gsize = static_cast<std::size_t>(cg) * l;
  auto xhat = std::make_shared<Tensor<T>>(x->value.shape());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * groups);
  Tensor<T> y(x->value.shape());
  for (int i = 0; i < n; ++i)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + gi * cg) * l;
      const T* px = x->value.data() + off;
      T mean = 0;
      for (std::size_t k = 0; k < gsize; ++k) mean += px[k];
      mean /= static_cast<T>(gsize);
      T var = 0;
      for (std::size_t k = 0; k < gsize; ++k) var += (px[k] - mean) * (px[k] - mean);
      var /= static_cast<T>(gsize);
      const T r = T(1) / std::sqrt(var + eps);
      (*rstd)[i * groups + gi] = r;
      for (int ch = 0; ch < cg; ++ch) {
        const int cc = gi * cg + ch;
        for (int k = 0; k < l; ++k) {
          const std::size_t idx = off + static_cast<std::size_t>(ch) * l + k;
          T xh = (x->value[idx] - mean) * r;
          (*xhat)[idx] = xh;
          y[idx] = xh * gamma->value[cc] + beta->value[cc];
        }
      }
    }
  return g.op(std::move(y), {x, gamma, beta}, [=](Var<T> out) {
    return [=] {
      for (int i = 0; i < n; ++i)
        for (int gi = 0; gi < groups; ++gi) {
          const std::size_t off = (static_cast<std::size_t>(i) * c + gi * cg) * l;
          T sum_dxh = 0, sum_dxh_xh = 0;
          for (int ch = 0; ch < cg; ++ch) {
            const int cc = gi * cg + ch;
            T dgam = 0, dbet = 0;
            for (int k = 0; k < l; ++k) {
              const std::size_t idx = off + static_cast<std::size_t>(ch) * l + k;
              const T gy = out->grad[idx];
              dgam += gy * (*xhat)[idx];
              dbet += gy;
              const T dxh = gy * gamma->value[cc];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * (*xhat)[idx];
            }
            if (gamma->requires_grad) gamma->grad_buffer()[cc] += dgam;
            if (beta->requires_grad) beta->grad_buffer()[cc] += dbet;
          }
          if (!x->requires_grad) continue;
          const T mdx = sum_dxh / static_cast<T>(gsize), mdxx = sum_dxh_xh / static_cast<T>(gsize);
          const T r = (*rstd)[i * groups + gi];
          Tensor<T>& gx = x->grad_buffer();
          for (int ch = 0; ch < cg; ++ch) {
            const int cc = gi * cg + ch;
            for (int k = 0; k < l; ++k) {
              const std::size_t idx = off + static_cast<std::size_t>(ch) * l + k;
              const T dxh = out->grad[idx] * gamma->value[cc];
              gx[idx] += r * (dxh - mdx - (*xhat)[idx] * mdxx);
            }
          }
        }
    };
  });
}

/// Concatenate along the channel axis: [N, Ca, L...] ++ [N, Cb, L...].
template <typename T>
Var<T> concat_channels(Graph<T>& g, Var<T> a, Var<T> b) {
  const int n = a->value.frames(), ca = a->value.channels(), cb = b->value.channels(), l = a->value.length();
  if (b->value.frames() != n || b->value.length() != l) throw ShapeError("concat_channels: shape mismatch");
  Shape s = a->value.shape();
  s[1] = ca + cb;
  Tensor<T> y(s);
  const std::size_t sa = static_cast<std::size_t>(ca) * l, sb = static_cast<std::size_t>(cb) * l;
  for (int i = 0; i < n; ++i) {
    std::copy_n(a->value.data() + i * sa, sa, y.data() + i * (sa + sb));
    std::copy_n(b->value.data() + i * sb, sb, y.data() + i * (sa + sb) + sa);
  }
  return g.op(std::move(y), {a, b}, [=](Var<T> out) {
    return [=] {
      for (int i = 0; i < n; ++i) {
        const T* go = out->grad.data() + i * (sa + sb);
        if (a->requires_grad) {
          T* ga = a->grad_buffer().data() + i * sa;
          for (std::size_t k = 0; k < sa; ++k) ga[k] += go[k];
        }
        if (b->requires_grad) {
          T* gb = b->grad_buffer().data() + i * sb;
          for (std::size_t k = 0; k < sb; ++k) gb[k] += go[sa + k];
        }
      }
    };
  });
}

/// Concatenate along the token axis: a[N, d, La] ++ b[Nb, d, Lb] -> [N, d, La+Lb]
/// where Nb in {1, N} (a single-frame b is shared by all frames).
template <typename T>
Var<T> concat_tokens(Graph<T>& g, Var<T> a, Var<T> b) {
  const int n = a->value.frames(), d = a->value.channels(), la = a->value.length();
  const int nb = b->value.frames(), lb = b->value.length();
  if (b->value.channels() != d) throw ShapeError("concat_tokens: feature dimension mismatch");
  if (nb != 1 && nb != n) throw ShapeError("concat_tokens: frame count mismatch");
  const int lt = la + lb;
  Tensor<T> y({n, d, lt});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) {
      T* dst = y.data() + (static_cast<std::size_t>(i) * d + c) * lt;
      std::copy_n(a->value.data() + (static_cast<std::size_t>(i) * d + c) * la, la, dst);
      std::copy_n(b->value.data() + (static_cast<std::size_t>(nb == 1 ? 0 : i) * d + c) * lb, lb, dst + la);
    }
  return g.op(std::move(y), {a, b}, [=](Var<T> out) {
    return [=] {
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) {
          const T* go = out->grad.data() + (static_cast<std::size_t>(i) * d + c) * lt;
          if (a->requires_grad) {
            T* ga = a->grad_buffer().data() + (static_cast<std::size_t>(i) * d + c) * la;
            for (int k = 0; k < la; ++k) ga[k] += go[k];
          }
          if (b->requires_grad) {
            T* gb = b->grad_buffer().data() + (static_cast<std::size_t>(nb == 1 ? 0 : i) * d + c) * lb;
            for (int k = 0; k < lb; ++k) gb[k] += go[la + k];
          }
        }
    };
  });
}

/// Nearest-neighbour 2x upsampling of [N, C, H, W].
template <typename T>
Var<T> upsample2x(Graph<T>& g, Var<T> x) {
  const Tensor<T>& xv = x->value;
  if (xv.rank() != 4) throw ShapeError("upsample2x expects [N, C, H, W]");
  const int planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> y({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (int p = 0; p < planes; ++p)
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx)
        y[(static_cast<std::size_t>(p) * 2 * h + yy) * 2 * w + xx] =
            xv[(static_cast<std::size_t>(p) * h + yy / 2) * w + xx / 2];
  return g.op(std::move(y), {x}, [=](Var<T> out) {
    return [=] {
      Tensor<T>& gx = x->grad_buffer();
      for (int p = 0; p < planes; ++p)
        for (int yy = 0; yy < 2 * h; ++yy)
          for (int xx = 0; xx < 2 * w; ++xx)
            gx[(static_cast<std::size_t>(p) * h + yy / 2) * w + xx / 2] +=
                out->grad[(static_cast<std::size_t>(p) * 2 * h + yy) * 2 * w + xx];
    };
  });
}

namespace detail {

/// Column-wise softmax in place (each column is one query's distribution).
template <typename T>
void softmax_columns(Mat<T>& s) {
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    auto col = s.col(j);
    const T m = col.maxCoeff();
    col = (col.array() - m).exp();
    col /= col.sum();
  }
}

}  // namespace detail

/// Scaled dot-product attention, one head, per frame:
///   A_n = softmax(Q_n K_n^T / sqrt(d)) V_n
/// q: [N, d, Lq]; k: [Nk, d, Lk]; v: [Nk, dv, Lk] with Nk in {1, N}. A single
/// key/value frame is shared by every query frame.
template <typename T>
Var<T> attention(Graph<T>& g, Var<T> q, Var<T> k, Var<T> v) {
  const int n = q->value.frames(), d = q->value.channels(), lq = q->value.length();
  const int nk = k->value.frames(), lk = k->value.length(), dv = v->value.channels();
  if (k->value.channels() != d) throw ShapeError("attention: query/key dimension mismatch");
  if (v->value.frames() != nk || v->value.length() != lk) throw ShapeError("attention: key/value token mismatch");
  if (nk != 1 && nk != n) throw ShapeError("attention: key frame count mismatch");
  if (lk == 0) throw ShapeError("attention: empty key set");
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  auto probs = std::make_shared<std::vector<Mat<T>>>(n);
  Tensor<T> y({n, dv, lq});
  for (int i = 0; i < n; ++i) {
    const int ik = nk == 1 ? 0 : i;
    ConstMatMap<T> qi(q->value.data() + static_cast<std::size_t>(i) * d * lq, lq, d);
    ConstMatMap<T> ki(k->value.data() + static_cast<std::size_t>(ik) * d * lk, lk, d);
    ConstMatMap<T> vi(v->value.data() + static_cast<std::size_t>(ik) * dv * lk, lk, dv);
    Mat<T>& pt = (*probs)[i];
    pt.noalias() = (ki * qi.transpose()) * sc;  // [Lk x Lq]
    detail::softmax_columns(pt);
    MatMap<T>(y.data() + static_cast<std::size_t>(i) * dv * lq, lq, dv).noalias() = pt.transpose() * vi;
  }
  if (!g.grad_enabled()) probs.reset();
  return g.op(std::move(y), {q, k, v}, [=](Var<T> out) {
    return [=] {
      Mat<T> dpt, ds;
      for (int i = 0; i < n; ++i) {
        const int ik = nk == 1 ? 0 : i;
        const Mat<T>& pt = (*probs)[i];
        ConstMatMap<T> qi(q->value.data() + static_cast<std::size_t>(i) * d * lq, lq, d);
        ConstMatMap<T> ki(k->value.data() + static_cast<std::size_t>(ik) * d * lk, lk, d);
        ConstMatMap<T> vi(v->value.data() + static_cast<std::size_t>(ik) * dv * lk, lk, dv);
        ConstMatMap<T> ga(out->grad.data() + static_cast<std::size_t>(i) * dv * lq, lq, dv);
        if (v->requires_grad)
          MatMap<T>(v->grad_buffer().data() + static_cast<std::size_t>(ik) * dv * lk, lk, dv).noalias() += pt * ga;
        if (!q->requires_grad && !k->requires_grad) continue;
        dpt.noalias() = vi * ga.transpose();  // [Lk x Lq]
        ds = pt.cwiseProduct(dpt);
        const Eigen::Matrix<T, 1, Eigen::Dynamic> colsum = ds.colwise().sum();
        ds -= pt * colsum.asDiagonal();
        ds *= sc;
        if (q->requires_grad)
          MatMap<T>(q->grad_buffer().data() + static_cast<std::size_t>(i) * d * lq, lq, d).noalias() +=
              ds.transpose() * ki;
        if (k->requires_grad)
          MatMap<T>(k->grad_buffer().data() + static_cast<std::size_t>(ik) * d * lk, lk, d).noalias() += ds * qi;
      }
    };
  });
}

/// Attention along the frame axis, independently for every token position:
/// q, k: [F, d, L]; v: [F, dv, L] -> [F, dv, L].
template <typename T>
Var<T> frame_attention(Graph<T>& g, Var<T> q, Var<T> k, Var<T> v) {
  const int f = q->value.frames(), d = q->value.channels(), l = q->value.length();
  const int dv = v->value.channels();
  if (k->value.shape() != q->value.shape() || v->value.frames() != f || v->value.length() != l)
    throw ShapeError("frame_attention: q/k/v shapes disagree");
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  // probs[(a * f + b) * l + p]: weight of frame b for query frame a at position p.
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(f) * f * l, T(0));
  auto& pr = *probs;
  auto at = [l](int fr, int c, int ch, int p) { return (static_cast<std::size_t>(fr) * c + ch) * l + p; };
  for (int a = 0; a < f; ++a)
    for (int b = 0; b < f; ++b) {
      T* s = pr.data() + (static_cast<std::size_t>(a) * f + b) * l;
      for (int c = 0; c < d; ++c) {
        const T* qa = q->value.data() + at(a, d, c, 0);
        const T* kb = k->value.data() + at(b, d, c, 0);
        for (int p = 0; p < l; ++p) s[p] += qa[p] * kb[p];
      }
      for (int p = 0; p < l; ++p) s[p] *= sc;
    }
  for (int a = 0; a < f; ++a)
    for (int p = 0; p < l; ++p) {
      T m = -std::numeric_limits<T>::infinity();
      for (int b = 0; b < f; ++b) m = std::max(m, pr[(static_cast<std::size_t>(a) * f + b) * l + p]);
      T z = 0;
      for (int b = 0; b < f; ++b) {
        T& e = pr[(static_cast<std::size_t>(a) * f + b) * l + p];
        e = std::exp(e - m);
        z += e;
      }
      for (int b = 0; b < f; ++b) pr[(static_cast<std::size_t>(a) * f + b) * l + p] /= z;
    }
  Tensor<T> y({f, dv, l});
  for (int a = 0; a < f; ++a)
    for (int b = 0; b < f; ++b) {
      const T* w = pr.data() + (static_cast<std::size_t>(a) * f + b) * l;
      for (int c = 0; c < dv; ++c) {
        T* ya = y.data() + at(a, dv, c, 0);
        const T* vb = v->value.data() + at(b, dv, c, 0);
        for (int p = 0; p < l; ++p) ya[p] += w[p] * vb[p];
      }
    }
  return g.op(std::move(y), {q, k, v}, [=](Var<T> out) {
    return [=] {
      const auto& pr = *probs;
      std::vector<T> dp(static_cast<std::size_t>(f) * f * l, T(0));
      for (int a = 0; a < f; ++a)
        for (int b = 0; b < f; ++b) {
          const T* w = pr.data() + (static_cast<std::size_t>(a) * f + b) * l;
          T* dpab = dp.data() + (static_cast<std::size_t>(a) * f + b) * l;
          for (int c = 0; c < dv; ++c) {
            const T* ga = out->grad.data() + at(a, dv, c, 0);
            const T* vb = v->value.data() + at(b, dv, c, 0);
            for (int p = 0; p < l; ++p) dpab[p] += ga[p] * vb[p];
            if (v->requires_grad) {
              T* gv = v->grad_buffer().data() + at(b, dv, c, 0);
              for (int p = 0; p < l; ++p) gv[p] += w[p] * ga[p];
            }
          }
        }
      if (!q->requires_grad && !k->requires_grad) return;
      // dS = P * (dP - sum_b P dP)
      for (int a = 0; a < f; ++a)
        for (int p = 0; p < l; ++p) {
          T s = 0;
          for (int b = 0; b < f; ++b) {
            const std::size_t idx = (static_cast<std::size_t>(a) * f + b) * l + p;
            s += pr[idx] * dp[idx];
          }
          for (int b = 0; b < f; ++b) {
            const std::size_t idx = (static_cast<std::size_t>(a) * f + b) * l + p;
            dp[idx] = pr[idx] * (dp[idx] - s) * sc;
          }
        }
      for (int a = 0; a < f; ++a)
        for (int b = 0; b < f; ++b) {
          const T* ds = dp.data() + (static_cast<std::size_t>(a) * f + b) * l;
          for (int c = 0; c < d; ++c) {
            if (q->requires_grad) {
              T* gq = q->grad_buffer().data() + at(a, d, c, 0);
              const T* kb = k->value.data() + at(b, d, c, 0);
              for (int p = 0; p < l; ++p) gq[p] += ds[p] * kb[p];
            }
            if (k->requires_grad) {
              T* gk = k->grad_buffer().data() + at(b, d, c, 0);
              const T* qa = q->value.data() + at(a, d, c, 0);
              for (int p = 0; p < l; ++p) gk[p] += ds[p] * qa[p];
            }
          }
        }
    };
  });
}

/// Weighted mean squared error against a constant target:
///   sum(w * (pred - target)^2) / sum(w), or the plain mean when `weight` is null.
template <typename T>
Var<T> mse(Graph<T>& g, Var<T> pred, const Tensor<T>& target, const Tensor<T>* weight = nullptr) {
  pred->value.check_same(target, "mse");
  if (weight) pred->value.check_same(*weight, "mse weight");
  const std::size_t n = target.size();
  if (n == 0) throw ParameterError("mse: empty input");
  T wsum = 0, acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T w = weight ? (*weight)[i] : T(1);
    const T e = pred->value[i] - target[i];
    acc += w * e * e;
    wsum += w;
  }
  if (!(wsum > T(0))) throw ParameterError("mse: weights sum to zero");
  Tensor<T> y({1}, acc / wsum);
  auto tgt = std::make_shared<Tensor<T>>(target);
  auto wt = weight ? std::make_shared<Tensor<T>>(*weight) : nullptr;
  return g.op(std::move(y), {pred}, [=](Var<T> out) {
    return [=] {
      Tensor<T>& gp = pred->grad_buffer();
      const T s = out->grad[0] * T(2) / wsum;
      for (std::size_t i = 0; i < n; ++i) gp[i] += s * (wt ? (*wt)[i] : T(1)) * (pred->value[i] - (*tgt)[i]);
    };
  });
}

}  // namespace ops
}  // namespace xdyna
