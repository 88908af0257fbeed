#pragma once

// Procedural training data: "human" clips (a stick figure with a cartoon face
// over a static or moving background) and "scene" clips (moving textures with
// blank controls), plus the on-disk dataset layout.

#include "xdyna/control.hpp"
#include "xdyna/image_io.hpp"

#include "json.hpp"

#include <numbers>
#include <optional>

namespace xdyna {

using json = nlohmann::json;

constexpr int kClipFrames = 8;
constexpr int kFrameSize = 32;

enum class TextureKind { drifting_noise, traveling_wave, scrolling_gradient, flicker_field };

inline constexpr std::array<TextureKind, 4> kTextureKinds = {TextureKind::drifting_noise, TextureKind::traveling_wave,
                                                             TextureKind::scrolling_gradient, TextureKind::flicker_field};

inline std::string_view texture_name(TextureKind k) {
  switch (k) {
    case TextureKind::drifting_noise: return "drifting_noise";
    case TextureKind::traveling_wave: return "traveling_wave";
    case TextureKind::scrolling_gradient: return "scrolling_gradient";
    case TextureKind::flicker_field: return "flicker_field";
  }
  return "?";
}

inline TextureKind texture_from_name(std::string_view s) {
  for (TextureKind k : kTextureKinds)
    if (texture_name(k) == s) return k;
  throw ConfigError("unknown texture kind '" + std::string(s) + "'");
}

/// Moving texture. `speed` is pixels per frame (radians per frame for
/// flicker_field); `direction` is an angle in radians; `frequency` in [0, 1]
/// selects the spatial scale.
struct SceneSpec {
  TextureKind kind = TextureKind::drifting_noise;
  float speed = 1.0f;
  float direction = 0.0f;
  float frequency = 0.5f;
  std::uint64_t palette_seed = 0;
  std::uint64_t texture_seed = 0;

  void validate() const {
    if (!(speed > 0.0f)) throw ParameterError("scene speed must be positive");
    if (frequency < 0.0f || frequency > 1.0f) throw ParameterError("scene frequency must lie in [0, 1]");
  }
  bool operator==(const SceneSpec&) const = default;
};

using Color = std::array<float, 3>;

/// Two colours in [-0.9, 0.9]^3 at least 0.9 apart.
inline std::array<Color, 2> scene_palette(std::uint64_t palette_seed) {
  std::mt19937_64 rng(mix_seed(palette_seed, 11));
  std::uniform_real_distribution<float> u(-0.9f, 0.9f);
  for (;;) {
    std::array<Color, 2> p;
    for (auto& c : p)
      for (auto& v : c) v = u(rng);
    float d2 = 0;
    for (int i = 0; i < 3; ++i) d2 += (p[0][i] - p[1][i]) * (p[0][i] - p[1][i]);
    if (d2 >= 0.81f) return p;
  }
}

namespace detail {

inline float wrap(float v, float period) {
  float r = std::fmod(v, period);
  return r < 0 ? r + period : r;
}

inline float smooth(float t) { return t * t * (3.0f - 2.0f * t); }

/// Periodic value noise with an n x n lattice over [0, w) x [0, h).
class ValueNoise {
 public:
  ValueNoise(int n, std::uint64_t seed) : n_(n), v_(static_cast<std::size_t>(n) * n) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& x : v_) x = u(rng);
  }
  float operator()(float x, float y, int w, int h) const {
    const float gx = wrap(x, static_cast<float>(w)) / w * n_, gy = wrap(y, static_cast<float>(h)) / h * n_;
    const int x0 = static_cast<int>(std::floor(gx)) % n_, y0 = static_cast<int>(std::floor(gy)) % n_;
    const int x1 = (x0 + 1) % n_, y1 = (y0 + 1) % n_;
    const float fx = smooth(gx - std::floor(gx)), fy = smooth(gy - std::floor(gy));
    const float a = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
    const float b = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
    return a + (b - a) * fy;
  }

 private:
  float at(int x, int y) const { return v_[static_cast<std::size_t>(y) * n_ + x]; }
  int n_;
  std::vector<float> v_;
};

inline float triangle(float u) { return std::abs(2.0f * (u - std::floor(u)) - 1.0f); }

}  // namespace detail

/// Integer cycles of the traveling wave across the frame.
inline int wave_cycles(const SceneSpec& s) { return 1 + static_cast<int>(std::lround(s.frequency * 2.0f)); }

/// Signed per-frame shift axis of the traveling wave: {axis (0 = x, 1 = y), sign}.
inline std::pair<int, int> wave_axis(const SceneSpec& s) {
  const float c = std::cos(s.direction), si = std::sin(s.direction);
  if (std::abs(c) >= std::abs(si)) return {0, c >= 0 ? 1 : -1};
  return {1, si >= 0 ? 1 : -1};
}

/// Pixel offset of the traveling wave at frame t.
inline int wave_shift(const SceneSpec& s, int t) { return static_cast<int>(std::lround(s.speed * t)); }

/// Texture intensity field in [0, 1] for one frame, [H * W] row-major.
inline std::vector<float> texture_field(const SceneSpec& s, int t, int h, int w) {
  std::vector<float> f(static_cast<std::size_t>(h) * w);
  const float pi2 = 2.0f * std::numbers::pi_v<float>;
  switch (s.kind) {
    case TextureKind::drifting_noise: {
      const int n = 4 + static_cast<int>(std::lround(s.frequency * 3.0f));
      detail::ValueNoise lo(n, mix_seed(s.texture_seed, 1)), hi(2 * n, mix_seed(s.texture_seed, 2));
      const float dx = s.speed * std::cos(s.direction) * t, dy = s.speed * std::sin(s.direction) * t;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          f[y * w + x] = 0.65f * lo(x - dx, y - dy, w, h) + 0.35f * hi(x - dx, y - dy, w, h);
      break;
    }
    case TextureKind::traveling_wave: {
      const auto [axis, sign] = wave_axis(s);
      const int k = wave_cycles(s), shift = sign * wave_shift(s, t);
      const float phase = static_cast<float>(mix_seed(s.texture_seed) % 1000) / 1000.0f * pi2;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          // Base pattern is periodic along the travel axis, so a shift is cyclic.
          const int u = axis == 0 ? ((x - shift) % w + w) % w : x;
          const int v = axis == 1 ? ((y - shift) % h + h) % h : y;
          const float along = axis == 0 ? static_cast<float>(u) / w : static_cast<float>(v) / h;
          const float across = axis == 0 ? static_cast<float>(v) / h : static_cast<float>(u) / w;
          f[y * w + x] = 0.5f + 0.5f * std::sin(pi2 * k * along + phase + 1.2f * std::sin(pi2 * across));
        }
      break;
    }
    case TextureKind::scrolling_gradient: {
      const float period = static_cast<float>(w) / (1 + std::lround(s.frequency * 2.0f));
      const float c = std::cos(s.direction), si = std::sin(s.direction);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) f[y * w + x] = detail::triangle((x * c + y * si - s.speed * t) / period);
      break;
    }
    case TextureKind::flicker_field: {
      const int cell = s.frequency < 0.5f ? 8 : 4;
      const int cw = (w + cell - 1) / cell, ch = (h + cell - 1) / cell;
      std::mt19937_64 rng(mix_seed(s.texture_seed, 3));
      std::uniform_real_distribution<float> u(0.0f, pi2);
      std::vector<float> phase(static_cast<std::size_t>(cw) * ch);
      for (auto& p : phase) p = u(rng);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          f[y * w + x] = 0.5f + 0.5f * std::sin(s.speed * t + phase[(y / cell) * cw + x / cell]);
      break;
    }
  }
  return f;
}

/// Colour frame [3, H, W] in [-1, 1] (not quantized).
inline Tensor<float> render_texture(const SceneSpec& s, int t, int h, int w) {
  const auto field = texture_field(s, t, h, w);
  const auto pal = scene_palette(s.palette_seed);
  Tensor<float> img({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < field.size(); ++i)
      img[c * field.size() + i] = pal[0][c] + (pal[1][c] - pal[0][c]) * field[i];
  return img;
}

struct HumanClipSpec {
  std::vector<StickFigure> skeleton;         // per frame
  FaceIdentity identity;                     // fixed for the clip
  std::vector<FaceExpression> expression;    // per frame
  SceneSpec background;
  bool dynamic_background = false;           // static backgrounds freeze frame 0 of the texture
  Color body_color{0.9f, 0.9f, 0.9f};

  int frames() const { return static_cast<int>(skeleton.size()); }
  void validate() const {
    if (skeleton.empty() || skeleton.size() != expression.size())
      throw ParameterError("human clip trajectories must be nonempty and of equal length");
    background.validate();
  }
};

enum class ClipKind { human, scene };

inline std::string_view clip_kind_name(ClipKind k) { return k == ClipKind::human ? "human" : "scene"; }

inline ClipKind clip_kind_from_name(std::string_view s) {
  if (s == "human") return ClipKind::human;
  if (s == "scene") return ClipKind::scene;
  throw ConfigError("unknown clip type '" + std::string(s) + "'");
}

/// One synthetic clip. Frames are [F, 3, H, W] in [-1, 1]; control rasters and
/// masks are in [0, 1]. All pixel data sits on the 8-bit grid so the PNG round
/// trip is exact.
struct ClipRecord {
  std::string id;
  ClipKind kind = ClipKind::scene;
  std::uint64_t seed = 0;
  Tensor<float> frames;
  ControlMap pose;
  ControlMap face;
  Tensor<float> fg_mask;  // [F, 1, H, W], binary
  // Human clips only.
  FaceIdentity identity;
  FaceIdentity swapped_identity;
  std::uint64_t swap_seed = 0;
  std::vector<BBox> face_bbox;
  std::vector<FaceExpression> expression;
  json spec;

  int num_frames() const { return frames.dim(0); }
  int height() const { return frames.dim(2); }
  int width() const { return frames.dim(3); }
};

inline json scene_spec_json(const SceneSpec& s) {
  return {{"kind", texture_name(s.kind)}, {"speed", s.speed},         {"direction", s.direction},
          {"frequency", s.frequency},     {"palette_seed", s.palette_seed}, {"texture_seed", s.texture_seed}};
}

inline SceneSpec scene_spec_from_json(const json& j) {
  SceneSpec s;
  s.kind = texture_from_name(j.at("kind").get<std::string>());
  s.speed = j.at("speed").get<float>();
  s.direction = j.at("direction").get<float>();
  s.frequency = j.at("frequency").get<float>();
  s.palette_seed = j.at("palette_seed").get<std::uint64_t>();
  s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
  return s;
}

/// Random scene parameters within the generator's documented ranges.
inline SceneSpec random_scene_spec(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 21));
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  SceneSpec s;
  s.kind = kTextureKinds[rng() % kTextureKinds.size()];
  const float r = u(rng);
  switch (s.kind) {
    case TextureKind::drifting_noise: s.speed = 1.25f + r; break;
    case TextureKind::traveling_wave: s.speed = 1.0f + r; break;
    case TextureKind::scrolling_gradient: s.speed = 0.75f + 0.75f * r; break;
    case TextureKind::flicker_field: s.speed = 0.5f + 0.7f * r; break;
  }
  s.direction = u(rng) * 2.0f * std::numbers::pi_v<float>;
  s.frequency = u(rng);
  s.palette_seed = rng();
  s.texture_seed = rng();
  return s;
}

inline Tensor<float> blank_mask(int f, int h, int w) { return Tensor<float>({f, 1, h, w}); }

/// Scene clip: moving texture, blank controls, empty foreground.
inline ClipRecord gen_scene_clip(const SceneSpec& spec, std::uint64_t seed, int f = kClipFrames, int h = kFrameSize,
                                 int w = kFrameSize) {
  spec.validate();
  if (f < 1 || h < 1 || w < 1) throw ParameterError("clip dimensions must be positive");
  ClipRecord c;
  c.kind = ClipKind::scene;
  c.seed = seed;
  c.frames = Tensor<float>({f, 3, h, w});
  for (int t = 0; t < f; ++t) {
    const Tensor<float> img = render_texture(spec, t, h, w);
    for (std::size_t i = 0; i < img.size(); ++i) c.frames[t * img.size() + i] = quantize_signed(img[i]);
  }
  c.pose = ControlMap::zeros(ControlKind::pose, f, 3, h, w);
  c.face = ControlMap::zeros(ControlKind::face, f, 3, h, w);
  c.fg_mask = blank_mask(f, h, w);
  c.spec = {{"background", scene_spec_json(spec)}};
  return c;
}

constexpr float kLimbRadius = 1.0f;
constexpr float kArmLength = 7.0f;
constexpr float kLegLength = 8.5f;
constexpr float kTorsoLength = 8.0f;

/// Face box above the neck, clamped into the frame.
inline BBox face_bbox_for(const StickFigure& fig, int h, int w) {
  const int s = kFacePatchSize;
  return {std::clamp(static_cast<int>(std::lround(fig.neck.x - s / 2.0f)), 0, w - s),
          std::clamp(static_cast<int>(std::lround(fig.neck.y - s)), 0, h - s), s, s};
}

/// Random walking/waving figure with a varying expression.
inline HumanClipSpec random_human_spec(std::uint64_t seed, int f = kClipFrames, int h = kFrameSize,
                                       int w = kFrameSize) {
  std::mt19937_64 rng(mix_seed(seed, 31));
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  auto range = [&](float a, float b) { return a + (b - a) * u(rng); };
  const float pi = std::numbers::pi_v<float>;
  HumanClipSpec s;
  s.identity = {u(rng), u(rng), u(rng)};
  s.background = random_scene_spec(rng());
  s.dynamic_background = u(rng) < 0.5f;
  s.body_color = {range(0.2f, 1.0f), range(-1.0f, 0.4f), range(-0.6f, 1.0f)};
  const float scale_x = w / 32.0f, scale_y = h / 32.0f;
  const float x0 = range(12.0f, 20.0f) * scale_x, vx = range(-0.5f, 0.5f) * scale_x;
  const float y0 = 13.0f * scale_y;
  const float w_arm = range(0.5f, 1.1f), p_arm = range(0.0f, 2 * pi);
  const float w_leg = range(0.4f, 0.9f), p_leg = range(0.0f, 2 * pi);
  const float w_m = range(0.4f, 1.0f), p_m = range(0.0f, 2 * pi);
  const float w_b = range(0.3f, 0.8f), p_b = range(0.0f, 2 * pi);
  const float w_e = range(0.3f, 0.9f), p_e = range(0.0f, 2 * pi);
  for (int t = 0; t < f; ++t) {
    StickFigure fig;
    const float nx = std::clamp(x0 + vx * t, 8.0f * scale_x, 24.0f * scale_x);
    fig.neck = {nx, y0 + 0.5f * std::sin(0.9f * t)};
    fig.hip = {nx + 0.6f * std::sin(0.5f * t + p_leg), fig.neck.y + kTorsoLength * scale_y};
    const float al = 0.6f + 0.5f * std::sin(w_arm * t + p_arm), ar = 0.6f + 0.5f * std::sin(w_arm * t + p_arm + pi);
    fig.left_hand = {fig.neck.x - kArmLength * std::sin(al), fig.neck.y + kArmLength * std::cos(al)};
    fig.right_hand = {fig.neck.x + kArmLength * std::sin(ar), fig.neck.y + kArmLength * std::cos(ar)};
    const float bl = 0.3f + 0.2f * std::sin(w_leg * t + p_leg), br = 0.3f + 0.2f * std::sin(w_leg * t + p_leg + pi);
    fig.left_foot = {fig.hip.x - kLegLength * std::sin(bl), fig.hip.y + kLegLength * std::cos(bl)};
    fig.right_foot = {fig.hip.x + kLegLength * std::sin(br), fig.hip.y + kLegLength * std::cos(br)};
    s.skeleton.push_back(fig);
    FaceExpression e;
    e.mouth_open = std::clamp(0.5f + 0.45f * std::sin(w_m * t + p_m), 0.0f, 1.0f);
    e.brow_angle = std::clamp(0.9f * std::sin(w_b * t + p_b), -1.0f, 1.0f);
    e.eye_open = std::clamp(0.55f + 0.4f * std::sin(w_e * t + p_e), 0.0f, 1.0f);
    s.expression.push_back(e);
  }
  return s;
}

inline json human_spec_json(const HumanClipSpec& s) {
  json sk = json::array(), ex = json::array();
  auto pt = [](Point p) { return json::array({p.x, p.y}); };
  for (const auto& fig : s.skeleton)
    sk.push_back({{"hip", pt(fig.hip)},
                  {"neck", pt(fig.neck)},
                  {"left_hand", pt(fig.left_hand)},
                  {"right_hand", pt(fig.right_hand)},
                  {"left_foot", pt(fig.left_foot)},
                  {"right_foot", pt(fig.right_foot)}});
  for (const auto& e : s.expression) ex.push_back(e.as_array());
  return {{"skeleton", sk},
          {"identity", s.identity.as_array()},
          {"expression", ex},
          {"background", scene_spec_json(s.background)},
          {"dynamic_background", s.dynamic_background},
          {"body_color", s.body_color}};
}

/// Sprite alpha for one frame: limbs within kLimbRadius plus the head of the face patch.
inline std::vector<std::uint8_t> sprite_alpha(const StickFigure& fig, const FacePatch& face, const BBox& bbox, int h,
                                              int w) {
  std::vector<std::uint8_t> a(static_cast<std::size_t>(h) * w, 0);
  for (const Limb& limb : fig.skeleton().limbs)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (detail::seg_dist(x + 0.5f, y + 0.5f, limb.a.x, limb.a.y, limb.b.x, limb.b.y) <= kLimbRadius)
          a[y * w + x] = 1;
  for (int y = 0; y < bbox.h; ++y)
    for (int x = 0; x < bbox.w; ++x)
      if (face.alpha[y * face.size + x]) a[(bbox.y + y) * w + bbox.x + x] = 1;
  return a;
}

/// Face crop [3, bh, bw] of frame t mapped from [-1, 1] to [0, 1].
inline Tensor<float> face_crop_unit(const Tensor<float>& frames, int t, const BBox& bbox) {
  Tensor<float> c = crop(frames, t, bbox);
  for (auto& v : c.values()) v = (v + 1.0f) * 0.5f;
  return c;
}

/// Face map fed at inference: the raw face crop of every frame at its bbox.
inline ControlMap raw_face_map(const Tensor<float>& frames, const std::vector<BBox>& bboxes) {
  const int f = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
  if (static_cast<int>(bboxes.size()) != f) throw ShapeError("raw_face_map: need one bbox per frame");
  ControlMap m = ControlMap::zeros(ControlKind::face, f, 3, h, w);
  const std::size_t per = static_cast<std::size_t>(3) * h * w;
  for (int t = 0; t < f; ++t) {
    ControlMap one = compose_face_map(face_crop_unit(frames, t, bboxes[t]), bboxes[t], h, w);
    std::copy_n(one.raster.data(), per, m.raster.data() + t * per);
  }
  m.refresh_blank();
  return m;
}

/// Human clip. The training face map is the frame's face crop with the head
/// replaced by the same expression rendered on a swapped identity.
inline ClipRecord gen_human_clip(const HumanClipSpec& spec, std::uint64_t seed, int h = kFrameSize,
                                 int w = kFrameSize) {
  spec.validate();
  const int f = spec.frames();
  ClipRecord c;
  c.kind = ClipKind::human;
  c.seed = seed;
  c.identity = spec.identity;
  c.expression = spec.expression;
  c.swap_seed = mix_seed(seed, 41);
  c.frames = Tensor<float>({f, 3, h, w});
  c.fg_mask = blank_mask(f, h, w);
  c.pose = ControlMap::zeros(ControlKind::pose, f, 3, h, w);
  c.face = ControlMap::zeros(ControlKind::face, f, 3, h, w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int t = 0; t < f; ++t) {
    const StickFigure& fig = spec.skeleton[t];
    const BBox bbox = face_bbox_for(fig, h, w);
    FaceRenderParams params{spec.identity, spec.expression[t], bbox};
    params.validate(w, h);
    c.face_bbox.push_back(bbox);
    const Tensor<float> bg = render_texture(spec.background, spec.dynamic_background ? t : 0, h, w);
    const FacePatch face = render_face_patch(spec.identity, spec.expression[t]);
    const auto alpha = sprite_alpha(fig, face, bbox, h, w);
    float* frame = c.frames.data() + t * 3 * plane;
    for (int ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < plane; ++i) frame[ch * plane + i] = alpha[i] ? spec.body_color[ch] : bg[ch * plane + i];
    for (int y = 0; y < bbox.h; ++y)
      for (int x = 0; x < bbox.w; ++x) {
        if (!face.alpha[y * face.size + x]) continue;
        for (int ch = 0; ch < 3; ++ch)
          frame[ch * plane + (bbox.y + y) * w + bbox.x + x] =
              face.rgb[(static_cast<std::size_t>(ch) * face.size + y) * face.size + x] * 2.0f - 1.0f;
      }
    for (std::size_t i = 0; i < 3 * plane; ++i) frame[i] = quantize_signed(frame[i]);
    for (std::size_t i = 0; i < plane; ++i) c.fg_mask[t * plane + i] = alpha[i];

    const ControlMap pose = render_pose_map(fig.skeleton(), h, w);
    std::copy_n(pose.raster.data(), 3 * plane, c.pose.raster.data() + t * 3 * plane);

    const FaceRenderParams swapped = synthesize_cross_identity_face(params, c.swap_seed);
    c.swapped_identity = swapped.identity;
    const FacePatch sw = render_face_patch(swapped.identity, swapped.expression);
    Tensor<float> patch = face_crop_unit(c.frames, t, bbox);
    for (auto& v : patch.values()) v = quantize_unit(v);
    for (int y = 0; y < bbox.h; ++y)
      for (int x = 0; x < bbox.w; ++x) {
        if (!sw.alpha[y * sw.size + x]) continue;
        for (int ch = 0; ch < 3; ++ch) {
          const std::size_t k = (static_cast<std::size_t>(ch) * sw.size + y) * sw.size + x;
          patch[k] = quantize_unit(sw.rgb[k]);
        }
      }
    const ControlMap fm = compose_face_map(patch, bbox, h, w);
    std::copy_n(fm.raster.data(), 3 * plane, c.face.raster.data() + t * 3 * plane);
  }
  c.pose.refresh_blank();
  c.face.refresh_blank();
  c.spec = human_spec_json(spec);
  return c;
}

struct ManifestEntry {
  std::string id;
  ClipKind kind = ClipKind::scene;
  std::uint64_t seed = 0;
  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> clips;

  std::size_t count(ClipKind k) const {
    return static_cast<std::size_t>(std::count_if(clips.begin(), clips.end(), [k](const auto& e) { return e.kind == k; }));
  }
  double scene_fraction() const { return clips.empty() ? 0.0 : static_cast<double>(count(ClipKind::scene)) / clips.size(); }
  bool operator==(const Manifest&) const = default;
};

/// Clip list for a fused human + scene dataset. Clip seeds derive from `seed`.
inline Manifest build_fused_dataset(int n_human, int n_scene, std::uint64_t seed) {
  if (n_human < 0 || n_scene < 0 || n_human + n_scene < 1)
    throw ParameterError("dataset needs at least one clip");
  Manifest m;
  m.seed = seed;
  char id[32];
  for (int i = 0; i < n_human; ++i) {
    std::snprintf(id, sizeof id, "human_%03d", i);
    m.clips.push_back({id, ClipKind::human, mix_seed(seed, 1000 + i)});
  }
  for (int i = 0; i < n_scene; ++i) {
    std::snprintf(id, sizeof id, "scene_%03d", i);
    m.clips.push_back({id, ClipKind::scene, mix_seed(seed, 500000 + i)});
  }
  return m;
}

inline ClipRecord generate_clip(const ManifestEntry& e) {
  ClipRecord c = e.kind == ClipKind::human ? gen_human_clip(random_human_spec(e.seed), e.seed)
                                           : gen_scene_clip(random_scene_spec(e.seed), e.seed);
  c.id = e.id;
  return c;
}

inline json manifest_json(const Manifest& m) {
  json clips = json::array();
  for (const auto& e : m.clips)
    clips.push_back({{"id", e.id}, {"type", clip_kind_name(e.kind)}, {"seed", e.seed}, {"path", e.id}});
  return {{"seed", m.seed},
          {"human", m.count(ClipKind::human)},
          {"scene", m.count(ClipKind::scene)},
          {"scene_fraction", m.scene_fraction()},
          {"clips", clips}};
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("clips"))
    m.clips.push_back({e.at("id").get<std::string>(), clip_kind_from_name(e.at("type").get<std::string>()),
                       e.at("seed").get<std::uint64_t>()});
  return m;
}

inline Manifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("manifest '" + path.string() + "' not found");
  try {
    return manifest_from_json(json::parse(read_text(path)));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest '" + path.string() + "': " + e.what());
  }
}

namespace detail {

inline Tensor<float> frame_slice(const Tensor<float>& t, int i) {
  const std::size_t per = t.size() / t.dim(0);
  Tensor<float> out({t.dim(1), t.dim(2), t.dim(3)});
  std::copy_n(t.data() + i * per, per, out.data());
  return out;
}

inline void set_frame_slice(Tensor<float>& t, int i, const Tensor<float>& src) {
  std::copy_n(src.data(), src.size(), t.data() + i * src.size());
}

}  // namespace detail

inline json clip_meta_json(const ClipRecord& c) {
  json j = {{"id", c.id},
            {"type", clip_kind_name(c.kind)},
            {"seed", c.seed},
            {"frames", c.num_frames()},
            {"height", c.height()},
            {"width", c.width()},
            {"spec", c.spec}};
  if (c.kind == ClipKind::human) {
    json boxes = json::array(), ex = json::array();
    for (const auto& b : c.face_bbox) boxes.push_back({b.x, b.y, b.w, b.h});
    for (const auto& e : c.expression) ex.push_back(e.as_array());
    j["identity"] = c.identity.as_array();
    j["swap_seed"] = c.swap_seed;
    j["swapped_identity"] = c.swapped_identity.as_array();
    j["face_bbox"] = boxes;
    j["expression"] = ex;
  }
  return j;
}

/// Write frames, control maps, mask and meta.json into `dir`.
inline void write_clip(const fs::path& dir, const ClipRecord& c) {
  ensure_dir(dir);
  for (int t = 0; t < c.num_frames(); ++t) {
    Tensor<float> frame = detail::frame_slice(c.frames, t);
    for (auto& v : frame.values()) v = (v + 1.0f) * 0.5f;
    write_png(dir / frame_name("frame", t), frame);
    write_png(dir / frame_name("pose", t), detail::frame_slice(c.pose.raster, t));
    write_png(dir / frame_name("face", t), detail::frame_slice(c.face.raster, t));
    write_png(dir / frame_name("mask", t), detail::frame_slice(c.fg_mask, t));
  }
  write_text(dir / "meta.json", clip_meta_json(c).dump(2) + "\n");
}

/// Read a clip written by write_clip.
inline ClipRecord load_clip(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw IoError("clip directory '" + dir.string() + "' has no meta.json");
  json j;
  try {
    j = json::parse(read_text(meta_path));
  } catch (const json::exception& e) {
    throw IoError("malformed '" + meta_path.string() + "': " + e.what());
  }
  ClipRecord c;
  c.id = j.at("id").get<std::string>();
  c.kind = clip_kind_from_name(j.at("type").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.spec = j.at("spec");
  const int f = j.at("frames").get<int>(), h = j.at("height").get<int>(), w = j.at("width").get<int>();
  c.frames = Tensor<float>({f, 3, h, w});
  c.pose = ControlMap::zeros(ControlKind::pose, f, 3, h, w);
  c.face = ControlMap::zeros(ControlKind::face, f, 3, h, w);
  c.fg_mask = blank_mask(f, h, w);
  for (int t = 0; t < f; ++t) {
    Tensor<float> frame = read_png(dir / frame_name("frame", t));
    if (frame.shape() != Shape{3, h, w}) throw IoError("frame size mismatch in '" + dir.string() + "'");
    for (auto& v : frame.values()) v = v * 2.0f - 1.0f;
    detail::set_frame_slice(c.frames, t, frame);
    detail::set_frame_slice(c.pose.raster, t, read_png(dir / frame_name("pose", t)));
    detail::set_frame_slice(c.face.raster, t, read_png(dir / frame_name("face", t)));
    detail::set_frame_slice(c.fg_mask, t, read_png(dir / frame_name("mask", t)));
  }
  c.pose.refresh_blank();
  c.face.refresh_blank();
  if (c.kind == ClipKind::human) {
    auto id = j.at("identity").get<std::array<float, 3>>();
    c.identity = {id[0], id[1], id[2]};
    auto sw = j.at("swapped_identity").get<std::array<float, 3>>();
    c.swapped_identity = {sw[0], sw[1], sw[2]};
    c.swap_seed = j.at("swap_seed").get<std::uint64_t>();
    for (const auto& b : j.at("face_bbox")) c.face_bbox.push_back({b[0], b[1], b[2], b[3]});
    for (const auto& e : j.at("expression")) c.expression.push_back({e[0], e[1], e[2]});
  }
  return c;
}

/// Generate every clip of a manifest under `root` and write manifest.json.
inline void write_dataset(const fs::path& root, const Manifest& m) {
  ensure_dir(root);
  for (const auto& e : m.clips) write_clip(root / e.id, generate_clip(e));
  write_text(root / "manifest.json", manifest_json(m).dump(2) + "\n");
}

/// Mean absolute difference between consecutive frames, optionally restricted
/// to pixels where `mask` [F, 1, H, W] is zero in both frames.
inline double mean_frame_difference(const Tensor<float>& frames, const Tensor<float>* mask = nullptr) {
  const int f = frames.dim(0), c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
  if (f < 2) return 0.0;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double acc = 0;
  std::size_t n = 0;
  for (int t = 0; t + 1 < f; ++t)
    for (std::size_t i = 0; i < plane; ++i) {
      if (mask && ((*mask)[t * plane + i] != 0.0f || (*mask)[(t + 1) * plane + i] != 0.0f)) continue;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t a = (static_cast<std::size_t>(t) * c + ch) * plane + i;
        acc += std::abs(static_cast<double>(frames[a + c * plane]) - frames[a]);
        ++n;
      }
    }
  return n ? acc / n : 0.0;
}

}  // namespace xdyna
