#pragma once

// Evaluation metrics: masked pixel metrics, Gaussian feature statistics and the
// Fréchet distance, handcrafted video features, face identity/detection/
// expression measures and the run-level report.

#include "xdyna/synthetic.hpp"

#include <Eigen/Eigenvalues>

#include <complex>
#include <iostream>

namespace xdyna {

// ---------------------------------------------------------------------------
// Pixel metrics over clips [F, C, H, W] with values in [-1, 1]

constexpr double kPixelRange = 2.0;
constexpr double kPsnrCap = 100.0;
constexpr int kSsimWindow = 7;

struct PixelMetrics {
  double l1 = 0, mse = 0, psnr = 0, ssim = 0;
};

enum class Region { whole, foreground, background };

namespace detail {

inline bool in_region(const Tensor<float>* mask, Region r, std::size_t mask_index) {
  if (r == Region::whole || !mask) return r == Region::whole || r == Region::background;
  const bool fg = (*mask)[mask_index] != 0.0f;
  return r == Region::foreground ? fg : !fg;
}

inline void check_clip_pair(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>* mask) {
  pred.check_same(gt, "pixel_metrics");
  if (pred.rank() != 4) throw ShapeError("pixel metrics expect [F, C, H, W] clips");
  if (mask && (mask->rank() != 4 || mask->dim(0) != pred.dim(0) || mask->dim(1) != 1 || mask->dim(2) != pred.dim(2) ||
               mask->dim(3) != pred.dim(3)))
    throw ShapeError("mask must be [F, 1, H, W] matching the clip");
}

}  // namespace detail

/// PSNR in dB for a mean squared error on range-2 data, capped at 100 dB.
inline double psnr_from_mse(double mse) {
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(kPixelRange * kPixelRange / mse));
}

/// L1, MSE and PSNR over the pixels of `region` (all channels).
inline PixelMetrics region_errors(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>* mask,
                                  Region region) {
  detail::check_clip_pair(pred, gt, mask);
  const int f = pred.dim(0), c = pred.dim(1);
  const std::size_t plane = static_cast<std::size_t>(pred.dim(2)) * pred.dim(3);
  double l1 = 0, se = 0;
  std::size_t n = 0;
  for (int t = 0; t < f; ++t)
    for (std::size_t i = 0; i < plane; ++i) {
      if (!detail::in_region(mask, region, t * plane + i)) continue;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t k = (static_cast<std::size_t>(t) * c + ch) * plane + i;
        const double d = static_cast<double>(pred[k]) - static_cast<double>(gt[k]);
        l1 += std::abs(d);
        se += d * d;
        ++n;
      }
    }
  if (n == 0) throw MetricError("empty region");
  PixelMetrics m;
  m.l1 = l1 / n;
  m.mse = se / n;
  m.psnr = psnr_from_mse(m.mse);
  return m;
}

/// Mean SSIM over 7x7 uniform windows (no padding) whose centre pixel lies in
/// `region`, per frame and channel, with K1 = 0.01, K2 = 0.03 on range 2.
inline double ssim(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>* mask, Region region) {
  detail::check_clip_pair(pred, gt, mask);
  const int f = pred.dim(0), c = pred.dim(1), h = pred.dim(2), w = pred.dim(3);
  if (h < kSsimWindow || w < kSsimWindow) throw MetricError("frames smaller than the SSIM window");
  const double c1 = std::pow(0.01 * kPixelRange, 2), c2 = std::pow(0.03 * kPixelRange, 2);
  const int r = kSsimWindow / 2;
  const double np = kSsimWindow * kSsimWindow;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double acc = 0;
  std::size_t n = 0;
  for (int t = 0; t < f; ++t)
    for (int cy = r; cy < h - r; ++cy)
      for (int cx = r; cx < w - r; ++cx) {
        if (!detail::in_region(mask, region, t * plane + cy * w + cx)) continue;
        for (int ch = 0; ch < c; ++ch) {
          const float* a = pred.data() + (static_cast<std::size_t>(t) * c + ch) * plane;
          const float* b = gt.data() + (static_cast<std::size_t>(t) * c + ch) * plane;
          double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
          for (int y = cy - r; y <= cy + r; ++y)
            for (int x = cx - r; x <= cx + r; ++x) {
              const double va = a[y * w + x], vb = b[y * w + x];
              sa += va;
              sb += vb;
              saa += va * va;
              sbb += vb * vb;
              sab += va * vb;
            }
          const double ma = sa / np, mb = sb / np;
          const double va = saa / np - ma * ma, vb = sbb / np - mb * mb, cov = sab / np - ma * mb;
          acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
          ++n;
        }
      }
  if (n == 0) throw MetricError("empty region");
  return acc / n;
}

/// L1, PSNR and SSIM over a region. Without a mask, foreground/background
/// requests resolve to empty/whole.
inline PixelMetrics pixel_metrics(const Tensor<float>& pred, const Tensor<float>& gt,
                                  const Tensor<float>* mask = nullptr, Region region = Region::whole) {
  if (!mask && region == Region::foreground) throw MetricError("empty region");
  if (mask && region != Region::whole) {
    bool any = false;
    for (std::size_t i = 0; i < mask->size() && !any; ++i) any = ((*mask)[i] != 0.0f) == (region == Region::foreground);
    if (!any) throw MetricError("empty region");
  }
  PixelMetrics m = region_errors(pred, gt, mask, region);
  m.ssim = ssim(pred, gt, mask, region);
  return m;
}

/// Mean squared difference between consecutive frames over pixels outside the
/// foreground mask (whole frame without a mask).
inline double frame_difference_energy(const Tensor<float>& clip, const Tensor<float>* mask = nullptr) {
  const int f = clip.dim(0), c = clip.dim(1);
  const std::size_t plane = static_cast<std::size_t>(clip.dim(2)) * clip.dim(3);
  if (f < 2) return 0.0;
  double acc = 0;
  std::size_t n = 0;
  for (int t = 0; t + 1 < f; ++t)
    for (std::size_t i = 0; i < plane; ++i) {
      if (mask && ((*mask)[t * plane + i] != 0.0f || (*mask)[(t + 1) * plane + i] != 0.0f)) continue;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t k = (static_cast<std::size_t>(t) * c + ch) * plane + i;
        const double d = static_cast<double>(clip[k + c * plane]) - clip[k];
        acc += d * d;
        ++n;
      }
    }
  return n ? acc / n : 0.0;
}

// ---------------------------------------------------------------------------
// Gaussian statistics and Fréchet distance

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  long count = 0;
};

/// Exact sufficient statistics (sum, outer-product sum, count); merging two
/// accumulators equals accumulating their union.
class GaussianAccumulator {
 public:
  explicit GaussianAccumulator(int dim) : sum_(Eigen::VectorXd::Zero(dim)), outer_(Eigen::MatrixXd::Zero(dim, dim)) {}

  void add(const Eigen::VectorXd& x) {
    if (x.size() != sum_.size()) throw ShapeError("feature dimension mismatch");
    sum_ += x;
    outer_ += x * x.transpose();
    ++count_;
  }
  void merge(const GaussianAccumulator& o) {
    if (o.sum_.size() != sum_.size()) throw ShapeError("feature dimension mismatch");
    sum_ += o.sum_;
    outer_ += o.outer_;
    count_ += o.count_;
  }
  /// Mean and unbiased covariance; needs at least two samples.
  GaussianStats stats() const {
    if (count_ < 2) throw MetricError("Fréchet statistics need at least 2 samples");
    GaussianStats s;
    s.count = count_;
    s.mean = sum_ / static_cast<double>(count_);
    s.cov = (outer_ - static_cast<double>(count_) * s.mean * s.mean.transpose()) / static_cast<double>(count_ - 1);
    s.cov = 0.5 * (s.cov + s.cov.transpose());
    return s;
  }
  long count() const { return count_; }

 private:
  Eigen::VectorXd sum_;
  Eigen::MatrixXd outer_;
  long count_ = 0;
};

inline GaussianStats gaussian_stats(const std::vector<Eigen::VectorXd>& xs) {
  if (xs.empty()) throw MetricError("Fréchet statistics need at least 2 samples");
  GaussianAccumulator acc(static_cast<int>(xs.front().size()));
  for (const auto& x : xs) acc.add(x);
  return acc.stats();
}

constexpr double kPsdTolerance = 1e-8;

/// Symmetric PSD square root via eigendecomposition; eigenvalues in
/// [-kPsdTolerance, 0) are clipped to zero, anything lower is an error.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  const Eigen::MatrixXd s = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  if (es.info() != Eigen::Success) throw NumericalError(std::string("eigendecomposition failed for ") + what);
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -kPsdTolerance) throw NumericalError(std::string(what) + " is not positive semidefinite");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the trace of the
/// square root taken from the symmetric form S_a^{1/2} S_b S_a^{1/2}.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows())
    throw ShapeError("Fréchet distance between statistics of different dimension");
  const Eigen::MatrixXd ra = psd_sqrt(a.cov, "covariance a");
  psd_sqrt(b.cov, "covariance b");
  const Eigen::MatrixXd inner = ra * (0.5 * (b.cov + b.cov.transpose())) * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed in Fréchet distance");
  double tr_sqrt = 0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()[i];
    if (ev < -kPsdTolerance) throw NumericalError("covariance product is not positive semidefinite");
    tr_sqrt += std::sqrt(std::max(ev, 0.0));
  }
  // Squared distance; rounding can push identical sets a hair below zero.
  return std::max(0.0, (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt);
}

// ---------------------------------------------------------------------------
// Video features

/// Named deterministic clip -> vector map.
struct FeatureExtractor {
  std::string name;
  int dim = 0;
  std::function<Eigen::VectorXd(const Tensor<float>&)> fn;
};

constexpr int kGradientBins = 8;
constexpr int kTemporalBands = 4;
constexpr int kHandcraftedDim = 3 + 3 + kGradientBins + kTemporalBands;

/// Layout (18 values): per-channel means (3), per-channel variances (3),
/// gradient-orientation histogram of luminance weighted by magnitude and
/// averaged over interior pixels (8), mean power of the temporal DFT of
/// frame differences in 4 bands of the one-sided spectrum (4).
inline Eigen::VectorXd video_features_handcrafted(const Tensor<float>& clip) {
  if (clip.rank() != 4 || clip.dim(1) != 3) throw ShapeError("handcrafted features expect [F, 3, H, W] clips");
  const int f = clip.dim(0), h = clip.dim(2), w = clip.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(kHandcraftedDim);
  const double npx = static_cast<double>(f) * plane;
  for (int ch = 0; ch < 3; ++ch) {
    double s = 0, ss = 0;
    for (int t = 0; t < f; ++t)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = clip[(static_cast<std::size_t>(t) * 3 + ch) * plane + i];
        s += v;
        ss += v * v;
      }
    out[ch] = s / npx;
    out[3 + ch] = ss / npx - out[ch] * out[ch];
  }
  if (h >= 3 && w >= 3) {
    const double pi = std::numbers::pi;
    std::vector<double> lum(plane);
    double count = 0;
    for (int t = 0; t < f; ++t) {
      for (std::size_t i = 0; i < plane; ++i) {
        double s = 0;
        for (int ch = 0; ch < 3; ++ch) s += clip[(static_cast<std::size_t>(t) * 3 + ch) * plane + i];
        lum[i] = s / 3.0;
      }
      for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
          const double gx = 0.5 * (lum[y * w + x + 1] - lum[y * w + x - 1]);
          const double gy = 0.5 * (lum[(y + 1) * w + x] - lum[(y - 1) * w + x]);
          const double mag = std::sqrt(gx * gx + gy * gy);
          count += 1;
          if (mag == 0.0) continue;
          int bin = static_cast<int>(std::floor((std::atan2(gy, gx) + pi) / (2 * pi) * kGradientBins));
          bin = std::clamp(bin, 0, kGradientBins - 1);
          out[6 + bin] += mag;
        }
    }
    for (int b = 0; b < kGradientBins; ++b) out[6 + b] /= count;
  }
  const int n = f - 1;
  if (n >= 1) {
    const int k_max = n / 2 + 1;  // one-sided spectrum bins 0..n/2
    std::vector<double> band(kTemporalBands, 0.0);
    std::vector<double> d(n);
    const double pi = std::numbers::pi;
    for (int ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        for (int t = 0; t < n; ++t)
          d[t] = static_cast<double>(clip[(static_cast<std::size_t>(t + 1) * 3 + ch) * plane + i]) -
                 clip[(static_cast<std::size_t>(t) * 3 + ch) * plane + i];
        for (int k = 0; k < k_max; ++k) {
          std::complex<double> acc = 0;
          for (int t = 0; t < n; ++t) acc += d[t] * std::polar(1.0, -2.0 * pi * k * t / n);
          const int b = std::min(kTemporalBands - 1, k * kTemporalBands / k_max);
          band[b] += std::norm(acc) / n;
        }
      }
    for (int b = 0; b < kTemporalBands; ++b) out[6 + kGradientBins + b] = band[b] / (3.0 * plane);
  }
  return out;
}

inline FeatureExtractor handcrafted_extractor() {
  return {"handcrafted", kHandcraftedDim, [](const Tensor<float>& c) { return video_features_handcrafted(c); }};
}

/// Fréchet distance between the feature Gaussians of two clip sets.
inline double clip_set_fd(const std::vector<Tensor<float>>& a, const std::vector<Tensor<float>>& b,
                          const FeatureExtractor& fx = handcrafted_extractor()) {
  if (a.size() < 2 || b.size() < 2) throw MetricError("Fréchet distance needs at least 2 clips per set");
  std::vector<Eigen::VectorXd> fa, fb;
  for (const auto& c : a) fa.push_back(fx.fn(c));
  for (const auto& c : b) fb.push_back(fx.fn(c));
  return frechet_distance(gaussian_stats(fa), gaussian_stats(fb));
}

// ---------------------------------------------------------------------------
// Face measures

constexpr int kFaceEmbedSize = 8;

/// Area-weighted resampling of a [C, H, W] image to [C, s, s].
inline Tensor<double> area_resize(const Tensor<float>& img, int s) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<double> out({c, s, s});
  const double sy = static_cast<double>(h) / s, sx = static_cast<double>(w) / s;
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < s; ++oy)
      for (int ox = 0; ox < s; ++ox) {
        const double y0 = oy * sy, y1 = (oy + 1) * sy, x0 = ox * sx, x1 = (ox + 1) * sx;
        double acc = 0;
        for (int y = static_cast<int>(std::floor(y0)); y < std::min(h, static_cast<int>(std::ceil(y1))); ++y) {
          const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
          for (int x = static_cast<int>(std::floor(x0)); x < std::min(w, static_cast<int>(std::ceil(x1))); ++x) {
            const double wx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
            acc += wy * wx * img[(static_cast<std::size_t>(ch) * h + y) * w + x];
          }
        }
        out[(static_cast<std::size_t>(ch) * s + oy) * s + ox] = acc / (sy * sx);
      }
  return out;
}

/// Unit-norm, mean-centred 8x8 embedding of a face crop; empty when degenerate.
inline std::vector<double> face_embedding(const Tensor<float>& crop) {
  const Tensor<double> small = area_resize(crop, kFaceEmbedSize);
  std::vector<double> v(small.values().begin(), small.values().end());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double nrm = 0;
  for (auto& x : v) {
    x -= mean;
    nrm += x * x;
  }
  nrm = std::sqrt(nrm);
  if (nrm < 1e-12) return {};
  for (auto& x : v) x /= nrm;
  return v;
}

struct FaceCosResult {
  double value = 0;
  int used = 0;
  int excluded = 0;
};

/// Mean cosine similarity between each frame's face crop and the reference
/// face patch [C, h, w]. Degenerate crops are skipped with a warning.
inline FaceCosResult face_cos_detail(const Tensor<float>& clip, const Tensor<float>& ref_patch,
                                     const std::vector<BBox>& bboxes) {
  if (static_cast<int>(bboxes.size()) != clip.dim(0)) throw ShapeError("face_cos: need one bbox per frame");
  const std::vector<double> ref = face_embedding(ref_patch);
  if (ref.empty()) throw MetricError("face_cos: reference face patch is degenerate");
  FaceCosResult r;
  double acc = 0;
  for (int t = 0; t < clip.dim(0); ++t) {
    const auto e = face_embedding(crop(clip, t, bboxes[t]));
    if (e.empty()) {
      ++r.excluded;
      std::cerr << "warning: face_cos: degenerate face crop in frame " << t << " excluded\n";
      continue;
    }
    acc += std::inner_product(e.begin(), e.end(), ref.begin(), 0.0);
    ++r.used;
  }
  if (r.used == 0) throw MetricError("face_cos: every face crop is degenerate");
  r.value = acc / r.used;
  return r;
}

inline double face_cos(const Tensor<float>& clip, const Tensor<float>& ref_patch, const std::vector<BBox>& bboxes) {
  return face_cos_detail(clip, ref_patch, bboxes).value;
}

/// Maximum normalized cross-correlation of a [C, ph, pw] template over frame t.
inline double max_ncc(const Tensor<float>& clip, int t, const Tensor<float>& patch) {
  const int c = clip.dim(1), h = clip.dim(2), w = clip.dim(3), ph = patch.dim(1), pw = patch.dim(2);
  if (patch.dim(0) != c || ph > h || pw > w) throw ShapeError("face template does not fit the frame");
  const double n = static_cast<double>(c) * ph * pw;
  double pm = 0;
  for (float v : patch.values()) pm += v;
  pm /= n;
  double pv = 0;
  for (float v : patch.values()) pv += (v - pm) * (v - pm);
  double best = -1.0;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const float* frame = clip.data() + static_cast<std::size_t>(t) * c * plane;
  for (int oy = 0; oy + ph <= h; ++oy)
    for (int ox = 0; ox + pw <= w; ++ox) {
      double wm = 0;
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x) wm += frame[ch * plane + (oy + y) * w + ox + x];
      wm /= n;
      double cross = 0, wv = 0;
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x) {
            const double a = frame[ch * plane + (oy + y) * w + ox + x] - wm;
            const double b = patch[(static_cast<std::size_t>(ch) * ph + y) * pw + x] - pm;
            cross += a * b;
            wv += a * a;
          }
      const double ncc = (wv > 0 && pv > 0) ? cross / std::sqrt(wv * pv) : 0.0;
      best = std::max(best, ncc);
    }
  return best;
}

/// Percentage of frames whose best template match reaches `threshold`.
inline double face_detect_rate(const Tensor<float>& clip, const Tensor<float>& ref_patch, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("face detection threshold must lie in (0, 1)");
  int hits = 0;
  for (int t = 0; t < clip.dim(0); ++t)
    if (max_ncc(clip, t, ref_patch) >= threshold) ++hits;
  return 100.0 * hits / clip.dim(0);
}

/// Grid over [lo, hi] with the given step; the step must divide the range.
inline std::vector<float> param_grid(float lo, float hi, double step) {
  if (!(step > 0)) throw ParameterError("grid step must be positive");
  const double cells = (hi - lo) / step;
  const long n = std::lround(cells);
  if (n < 1 || std::abs(cells - n) > 1e-9 * std::max(1.0, cells)) throw ParameterError("grid step must divide the parameter range");
  std::vector<float> g(n + 1);
  for (long i = 0; i <= n; ++i) g[i] = static_cast<float>(lo + (hi - lo) * static_cast<double>(i) / n);
  return g;
}

/// Squared L2 distance between a face crop [3, S, S] (frame values in [-1, 1])
/// and a candidate render composited over a constant background. The
/// background colour is the least-squares fit, i.e. the per-channel mean of the
/// crop outside the candidate's head.
inline double face_render_distance(const Tensor<float>& crop, const FaceIdentity& id, const FaceExpression& ex) {
  const int s = crop.dim(1);
  const FacePatch p = render_face_patch(id, ex, s);
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  double d = 0;
  for (int ch = 0; ch < 3; ++ch) {
    double bs = 0, bss = 0, bn = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = crop[ch * plane + i];
      if (p.alpha[i]) {
        const double e = v - (p.rgb[ch * plane + i] * 2.0 - 1.0);
        d += e * e;
      } else {
        bs += v;
        bss += v * v;
        bn += 1;
      }
    }
    if (bn > 0) d += std::max(0.0, bss - bs * bs / bn);
  }
  return d;
}

struct ExpressionEstimate {
  FaceIdentity identity;
  FaceExpression expression;
};

constexpr int kExpressionRounds = 2;

/// Inverse rendering by alternating grid searches: starting from mid-range
/// parameters, identity is fitted with the expression fixed, then the
/// expression with the identity fixed, for kExpressionRounds rounds. Ties keep
/// the first grid point in (skin, shape, spacing) / (mouth, brow, eye) order.
inline ExpressionEstimate estimate_face_params(const Tensor<float>& crop, double grid_step) {
  if (crop.rank() != 3 || crop.dim(0) != 3 || crop.dim(1) != crop.dim(2))
    throw ShapeError("expression estimation expects a square [3, S, S] face crop");
  const auto g01 = param_grid(0.0f, 1.0f, grid_step), gpm = param_grid(-1.0f, 1.0f, grid_step);
  ExpressionEstimate est{{0.5f, 0.5f, 0.5f}, {0.5f, 0.0f, 0.5f}};
  for (int round = 0; round < kExpressionRounds; ++round) {
    double best = std::numeric_limits<double>::infinity();
    FaceIdentity best_id = est.identity;
    for (float a : g01)
      for (float b : g01)
        for (float c : g01) {
          const double d = face_render_distance(crop, {a, b, c}, est.expression);
          if (d < best) {
            best = d;
            best_id = {a, b, c};
          }
        }
    est.identity = best_id;
    best = std::numeric_limits<double>::infinity();
    FaceExpression best_ex = est.expression;
    for (float m : g01)
      for (float br : gpm)
        for (float e : g01) {
          const double d = face_render_distance(crop, est.identity, {m, br, e});
          if (d < best) {
            best = d;
            best_ex = {m, br, e};
          }
        }
    est.expression = best_ex;
  }
  return est;
}

/// Mean absolute error between the estimated and true expression parameters.
inline double expression_error(const Tensor<float>& crop, const FaceExpression& truth, double grid_step) {
  const FaceExpression e = estimate_face_params(crop, grid_step).expression;
  return (std::abs(e.mouth_open - truth.mouth_open) + std::abs(e.brow_angle - truth.brow_angle) +
          std::abs(e.eye_open - truth.eye_open)) /
         3.0;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricEntry {
  std::string metric;
  std::string scope;
  double value = 0;
  bool operator==(const MetricEntry&) const = default;
};

struct MetricReport {
  std::vector<MetricEntry> entries;

  void add(std::string metric, std::string scope, double v) { entries.push_back({std::move(metric), std::move(scope), v}); }
  std::optional<double> get(const std::string& metric, const std::string& scope) const {
    for (const auto& e : entries)
      if (e.metric == metric && e.scope == scope) return e.value;
    return std::nullopt;
  }

  std::string to_csv() const {
    std::string out = "metric,scope,value\n";
    char buf[64];
    for (const auto& e : entries) {
      std::snprintf(buf, sizeof buf, "%.17g", e.value);
      out += e.metric + "," + e.scope + "," + buf + "\n";
    }
    return out;
  }

  static MetricReport from_csv(const std::string& text) {
    MetricReport r;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "metric,scope,value") throw IoError("report CSV has no header");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto a = line.find(','), b = line.find(',', a + 1);
      if (a == std::string::npos || b == std::string::npos) throw IoError("malformed report CSV line '" + line + "'");
      r.add(line.substr(0, a), line.substr(a + 1, b - a - 1), std::strtod(line.c_str() + b + 1, nullptr));
    }
    return r;
  }

  /// Table with one row per metric and one column per scope.
  std::string to_markdown() const {
    std::vector<std::string> metrics, scopes;
    for (const auto& e : entries) {
      if (std::find(metrics.begin(), metrics.end(), e.metric) == metrics.end()) metrics.push_back(e.metric);
      if (std::find(scopes.begin(), scopes.end(), e.scope) == scopes.end()) scopes.push_back(e.scope);
    }
    std::string out = "| Metric |";
    for (const auto& s : scopes) out += " " + s + " |";
    out += "\n|---|";
    for (std::size_t i = 0; i < scopes.size(); ++i) out += "---|";
    out += "\n";
    char buf[64];
    for (const auto& m : metrics) {
      out += "| " + m + " |";
      for (const auto& s : scopes) {
        auto v = get(m, s);
        if (v) {
          std::snprintf(buf, sizeof buf, "%.6g", *v);
          out += std::string(" ") + buf + " |";
        } else {
          out += " - |";
        }
      }
      out += "\n";
    }
    return out;
  }
};

struct EvalConfig {
  double face_threshold = 0.8;
  double expression_grid_step = 0.1;
};

/// Frames [F, 3, H, W] in [-1, 1] from a directory of frame_%03d.png files.
inline Tensor<float> load_frames(const fs::path& dir, int frames) {
  std::vector<Tensor<float>> parts;
  for (int t = 0; t < frames; ++t) {
    Tensor<float> img = read_png(dir / frame_name("frame", t));
    for (auto& v : img.values()) v = v * 2.0f - 1.0f;
    parts.push_back(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}));
  }
  return stack_frames(parts);
}

/// Compare generated clips against ground-truth clips with the dataset layout.
/// Pixel metrics are averaged over clips per scope (clips without pixels in a
/// scope are skipped); FD compares the two clip sets; face metrics use the
/// ground-truth bboxes and the first ground-truth frame's face as reference.
inline MetricReport evaluate_clips(const std::vector<Tensor<float>>& pred, const std::vector<ClipRecord>& gt,
                                   const EvalConfig& cfg) {
  if (pred.size() != gt.size()) throw ShapeError("prediction and ground-truth sets differ in size");
  MetricReport r;
  const std::array<std::pair<Region, const char*>, 3> scopes{
      {{Region::whole, "whole"}, {Region::foreground, "fg"}, {Region::background, "bg"}}};
  for (const auto& [region, name] : scopes) {
    double l1 = 0, psnr = 0, ss = 0;
    int n = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      try {
        const PixelMetrics m = pixel_metrics(pred[i], gt[i].frames, &gt[i].fg_mask, region);
        l1 += m.l1;
        psnr += m.psnr;
        ss += m.ssim;
        ++n;
      } catch (const MetricError&) {
        if (region == Region::whole) throw;
      }
    }
    if (n == 0) continue;
    r.add("L1", name, l1 / n);
    r.add("PSNR", name, psnr / n);
    r.add("SSIM", name, ss / n);
  }
  std::vector<Tensor<float>> gt_frames;
  for (const auto& c : gt) gt_frames.push_back(c.frames);
  r.add("FD", "whole", clip_set_fd(pred, gt_frames));
  double fc = 0, fdet = 0, fexp = 0;
  int nh = 0, ne = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i].kind != ClipKind::human) continue;
    const Tensor<float> ref = crop(gt[i].frames, 0, gt[i].face_bbox[0]);
    fc += face_cos(pred[i], ref, gt[i].face_bbox);
    fdet += face_detect_rate(pred[i], ref, cfg.face_threshold);
    for (int t = 0; t < gt[i].num_frames(); ++t) {
      fexp += expression_error(crop(pred[i], t, gt[i].face_bbox[t]), gt[i].expression[t], cfg.expression_grid_step);
      ++ne;
    }
    ++nh;
  }
  if (nh > 0) {
    r.add("Face-Cos", "face", fc / nh);
    r.add("Face-Det", "face", fdet / nh);
    r.add("Face-Exp", "face", fexp / ne);
  }
  return r;
}

/// Load both directories and evaluate. Clip ids come from the ground-truth
/// manifest.json when present, otherwise from its subdirectories.
inline MetricReport evaluate_run(const fs::path& pred_dir, const fs::path& gt_dir, const EvalConfig& cfg) {
  if (!fs::is_directory(pred_dir)) throw IoError("prediction directory '" + pred_dir.string() + "' not found");
  if (!fs::is_directory(gt_dir)) throw IoError("ground-truth directory '" + gt_dir.string() + "' not found");
  std::vector<std::string> ids;
  if (fs::exists(gt_dir / "manifest.json")) {
    for (const auto& e : load_manifest(gt_dir / "manifest.json").clips) ids.push_back(e.id);
  } else {
    for (const auto& e : fs::directory_iterator(gt_dir))
      if (e.is_directory() && fs::exists(e.path() / "meta.json")) ids.push_back(e.path().filename().string());
    std::sort(ids.begin(), ids.end());
  }
  std::vector<ClipRecord> gt;
  std::vector<Tensor<float>> pred;
  for (const auto& id : ids) {
    gt.push_back(load_clip(gt_dir / id));
    if (!fs::is_directory(pred_dir / id)) throw IoError("prediction for clip '" + id + "' is missing");
    pred.push_back(load_frames(pred_dir / id, gt.back().num_frames()));
  }
  return evaluate_clips(pred, gt, cfg);
}

}  // namespace xdyna
