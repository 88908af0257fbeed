#pragma once

// Control inputs: pose skeleton rasters, the parametric cartoon face and the
// face-patch control map, including the cross-identity swap used for training
// the face ControlNet.

#include "xdyna/tensor.hpp"

#include <array>
#include <cstdint>
#include <random>

namespace xdyna {

enum class ControlKind { pose, face };

/// Per-frame conditioning raster [F, C, H, W] with values in [0, 1].
struct ControlMap {
  Tensor<float> raster;
  ControlKind kind = ControlKind::pose;
  bool blank = true;

  static ControlMap zeros(ControlKind kind, int frames, int channels, int h, int w) {
    return {Tensor<float>({frames, channels, h, w}), kind, true};
  }
  /// Recompute the blank flag from the raster contents.
  void refresh_blank() {
    blank = std::all_of(raster.values().begin(), raster.values().end(), [](float v) { return v == 0.0f; });
  }
};

/// Integer pixel rectangle.
struct BBox {
  int x = 0, y = 0, w = 0, h = 0;
  bool inside(int width, int height) const { return w > 0 && h > 0 && x >= 0 && y >= 0 && x + w <= width && y + h <= height; }
  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  bool operator==(const BBox&) const = default;
};

struct FaceIdentity {
  float skin_tone = 0.5f;    // [0, 1]
  float face_shape = 0.5f;   // [0, 1], head width
  float eye_spacing = 0.5f;  // [0, 1]
  bool operator==(const FaceIdentity&) const = default;
  std::array<float, 3> as_array() const { return {skin_tone, face_shape, eye_spacing}; }
};

struct FaceExpression {
  float mouth_open = 0.5f;  // [0, 1]
  float brow_angle = 0.0f;  // [-1, 1]
  float eye_open = 0.5f;    // [0, 1]
  bool operator==(const FaceExpression&) const = default;
  std::array<float, 3> as_array() const { return {mouth_open, brow_angle, eye_open}; }
};

struct FaceRenderParams {
  FaceIdentity identity;
  FaceExpression expression;
  BBox bbox{0, 0, 12, 12};
  bool operator==(const FaceRenderParams&) const = default;

  void validate(int width, int height) const {
    auto in01 = [](float v) { return v >= 0.0f && v <= 1.0f; };
    if (!in01(identity.skin_tone) || !in01(identity.face_shape) || !in01(identity.eye_spacing))
      throw ParameterError("face identity parameters must lie in [0, 1]");
    if (!in01(expression.mouth_open) || !in01(expression.eye_open) || expression.brow_angle < -1.0f ||
        expression.brow_angle > 1.0f)
      throw ParameterError("face expression parameters out of range");
    if (!bbox.inside(width, height)) throw ParameterError("face bbox outside the frame");
  }
};

/// Rendered face: RGB [3, S, S] in [0, 1] (zero outside the head) plus a
/// binary head mask [S*S].
struct FacePatch {
  Tensor<float> rgb;
  std::vector<std::uint8_t> alpha;
  int size = 0;
};

constexpr int kFacePatchSize = 12;

namespace detail {

inline float seg_dist(float px, float py, float ax, float ay, float bx, float by) {
  const float dx = bx - ax, dy = by - ay;
  const float len2 = dx * dx + dy * dy;
  float t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0f;
  t = std::clamp(t, 0.0f, 1.0f);
  const float ex = ax + t * dx - px, ey = ay + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

inline bool in_ellipse(float px, float py, float cx, float cy, float rx, float ry) {
  const float u = (px - cx) / rx, v = (py - cy) / ry;
  return u * u + v * v <= 1.0f;
}

// Radial approximation of the signed distance to an ellipse boundary.
inline float ellipse_dist(float px, float py, float cx, float cy, float rx, float ry) {
  const float u = (px - cx) / rx, v = (py - cy) / ry;
  const float q = std::sqrt(u * u + v * v);
  const float r = std::hypot(px - cx, py - cy);
  if (q == 0.0f) return -std::min(rx, ry);
  return r * (1.0f - 1.0f / q);
}

// Linear edge ramp of width `edge` centred on the boundary.
inline float coverage(float signed_dist, float edge) { return std::clamp(0.5f - signed_dist / edge, 0.0f, 1.0f); }

inline void blend(std::array<float, 3>& col, const std::array<float, 3>& feat, float a) {
  for (int c = 0; c < 3; ++c) col[c] += (feat[c] - col[c]) * a;
}

}  // namespace detail

/// Parametric cartoon face: elliptic head tinted by skin tone, two eyes, two
/// tilted brows and an elliptic mouth. Features have soft edges (half a pixel
/// wide) and are supersampled `ss` x `ss` per pixel, so the render varies
/// continuously with every parameter; the head mask is evaluated at pixel
/// centres.
inline FacePatch render_face_patch(const FaceIdentity& id, const FaceExpression& ex, int size = kFacePatchSize,
                                   int ss = 4) {
  FacePatch p;
  p.size = size;
  p.rgb = Tensor<float>({3, size, size});
  p.alpha.assign(static_cast<std::size_t>(size) * size, 0);
  const float s = size / 12.0f;  // geometry is authored for a 12x12 patch
  const float cx = 6.0f * s, cy = 6.0f * s;
  const float head_rx = (4.2f + 1.6f * id.face_shape) * s, head_ry = 5.8f * s;
  const std::array<float, 3> light{0.98f, 0.85f, 0.72f}, dark{0.45f, 0.30f, 0.20f};
  std::array<float, 3> skin;
  for (int c = 0; c < 3; ++c) skin[c] = light[c] + (dark[c] - light[c]) * id.skin_tone;
  const std::array<float, 3> eye_col{0.08f, 0.08f, 0.12f}, brow_col{0.25f, 0.14f, 0.08f}, mouth_col{0.62f, 0.08f, 0.14f};
  const float eye_dx = (1.6f + 1.2f * id.eye_spacing) * s, eye_y = 5.0f * s;
  const float eye_rx = 0.9f * s, eye_ry = (0.15f + 0.75f * ex.eye_open) * s;
  const float brow_y = 3.1f * s, brow_half = 1.1f * s, brow_tilt = 0.8f * ex.brow_angle * s, brow_w = 0.45f * s;
  const float mouth_y = 8.6f * s, mouth_rx = 1.8f * s, mouth_ry = (0.2f + 1.1f * ex.mouth_open) * s;
  const float edge = 0.5f * s;

  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (!detail::in_ellipse(x + 0.5f, y + 0.5f, cx, cy, head_rx, head_ry)) continue;
      p.alpha[y * size + x] = 1;
      std::array<float, 3> acc{0, 0, 0};
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const float px = x + (sx + 0.5f) / ss, py = y + (sy + 0.5f) / ss;
          std::array<float, 3> col = skin;
          for (int side : {-1, 1}) {
            const float ecx = cx + side * eye_dx;
            if (std::abs(px - ecx) < eye_rx + edge && std::abs(py - eye_y) < eye_ry + edge)
              detail::blend(col, eye_col, detail::coverage(detail::ellipse_dist(px, py, ecx, eye_y, eye_rx, eye_ry), edge));
            // Inner brow end moves by +tilt, outer end by -tilt.
            if (std::abs(px - ecx) < brow_half + brow_w + edge &&
                std::abs(py - brow_y) < std::abs(brow_tilt) + brow_w + edge) {
              const float inner_x = ecx - side * brow_half, outer_x = ecx + side * brow_half;
              const float bd = detail::seg_dist(px, py, inner_x, brow_y + brow_tilt, outer_x, brow_y - brow_tilt);
              detail::blend(col, brow_col, detail::coverage(bd - brow_w, edge));
            }
          }
          if (std::abs(px - cx) < mouth_rx + edge && std::abs(py - mouth_y) < mouth_ry + edge)
            detail::blend(col, mouth_col,
                          detail::coverage(detail::ellipse_dist(px, py, cx, mouth_y, mouth_rx, mouth_ry), edge));
          for (int c = 0; c < 3; ++c) acc[c] += col[c];
        }
      for (int c = 0; c < 3; ++c) p.rgb[(static_cast<std::size_t>(c) * size + y) * size + x] = acc[c] / (ss * ss);
    }
  return p;
}

/// Keeps the expression and draws a fresh identity from `swap_seed`.
inline FaceRenderParams synthesize_cross_identity_face(const FaceRenderParams& src, std::uint64_t swap_seed) {
  std::mt19937_64 rng(swap_seed * 0x9E3779B97F4A7C15ull + 0x5A5Aull);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  FaceRenderParams out = src;
  out.identity.skin_tone = u(rng);
  out.identity.face_shape = u(rng);
  out.identity.eye_spacing = u(rng);
  return out;
}

/// Copy a [C, bh, bw] patch into an otherwise zero [1, C, H, W] face map.
inline ControlMap compose_face_map(const Tensor<float>& patch, const BBox& bbox, int h, int w) {
  if (!bbox.inside(w, h)) throw ParameterError("compose_face_map: bbox outside the frame");
  if (patch.rank() != 3 || patch.dim(1) != bbox.h || patch.dim(2) != bbox.w)
    throw ShapeError("compose_face_map: patch " + shape_str(patch.shape()) + " does not match bbox");
  const int c = patch.dim(0);
  ControlMap m = ControlMap::zeros(ControlKind::face, 1, c, h, w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < bbox.h; ++y)
      for (int x = 0; x < bbox.w; ++x)
        m.raster[(static_cast<std::size_t>(ch) * h + bbox.y + y) * w + bbox.x + x] =
            patch[(static_cast<std::size_t>(ch) * bbox.h + y) * bbox.w + x];
  m.refresh_blank();
  return m;
}

/// Crop frame n of a [F, C, H, W] tensor to [C, bh, bw].
inline Tensor<float> crop(const Tensor<float>& t, int frame, const BBox& bbox) {
  const int c = t.dim(1), h = t.dim(2), w = t.dim(3);
  if (!bbox.inside(w, h)) throw ParameterError("crop: bbox outside the frame");
  Tensor<float> out({c, bbox.h, bbox.w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < bbox.h; ++y)
      for (int x = 0; x < bbox.w; ++x)
        out[(static_cast<std::size_t>(ch) * bbox.h + y) * bbox.w + x] =
            t[((static_cast<std::size_t>(frame) * c + ch) * h + bbox.y + y) * w + bbox.x + x];
  return out;
}

struct Point {
  float x = 0, y = 0;
};

/// One rasterized bone; `index` selects its colour.
struct Limb {
  Point a, b;
  int index = 0;
};

struct PoseSkeleton {
  std::vector<Limb> limbs;
};

/// Stick figure joints; limbs are torso, left/right arm, left/right leg.
struct StickFigure {
  Point hip, neck, left_hand, right_hand, left_foot, right_foot;

  PoseSkeleton skeleton() const {
    return {{{hip, neck, 0}, {neck, left_hand, 1}, {neck, right_hand, 2}, {hip, left_foot, 3}, {hip, right_foot, 4}}};
  }
};

inline std::array<float, 3> limb_color(int index) {
  static constexpr std::array<std::array<float, 3>, 6> table{
      {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {0, 1, 1}, {1, 0, 1}}};
  return table[static_cast<std::size_t>(index) % table.size()];
}

constexpr float kPoseLineRadius = 0.9f;

/// Rasterize a skeleton into a [1, 3, H, W] pose map: a pixel takes a limb's
/// colour when its centre lies within kPoseLineRadius of the bone (per-channel
/// max across limbs). Off-frame parts are clipped.
inline ControlMap render_pose_map(const PoseSkeleton& pose, int h, int w) {
  ControlMap m = ControlMap::zeros(ControlKind::pose, 1, 3, h, w);
  for (const Limb& limb : pose.limbs) {
    const auto col = limb_color(limb.index);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (detail::seg_dist(x + 0.5f, y + 0.5f, limb.a.x, limb.a.y, limb.b.x, limb.b.y) > kPoseLineRadius) continue;
        for (int c = 0; c < 3; ++c) {
          float& v = m.raster[(static_cast<std::size_t>(c) * h + y) * w + x];
          v = std::max(v, col[c]);
        }
      }
  }
  m.refresh_blank();
  return m;
}

}  // namespace xdyna
