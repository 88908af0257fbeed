#pragma once

// Cross-driven animation and blank-control live photos.

#include "xdyna/training.hpp"

namespace xdyna {

/// Driving controls for F frames. The face sequence holds raw face crops of
/// the driving video (no identity swap) and is optional.
struct DrivingBundle {
  ControlMap pose;
  std::optional<ControlMap> face;
  std::vector<BBox> face_bbox;  // optional ground truth for evaluation
  std::vector<FaceExpression> expression;

  int frames() const { return pose.raster.dim(0); }
};

/// Driving bundle taken from a synthetic clip.
inline DrivingBundle driving_from_clip(const ClipRecord& c, bool with_face) {
  DrivingBundle d;
  d.pose = c.pose;
  if (with_face && c.kind == ClipKind::human) d.face = raw_face_map(c.frames, c.face_bbox);
  d.face_bbox = c.face_bbox;
  d.expression = c.expression;
  return d;
}

/// Blank controls for a live photo.
inline DrivingBundle blank_driving(int frames, int channels, int h, int w, bool with_face) {
  DrivingBundle d;
  d.pose = ControlMap::zeros(ControlKind::pose, frames, channels, h, w);
  if (with_face) d.face = ControlMap::zeros(ControlKind::face, frames, channels, h, w);
  return d;
}

struct InferenceOptions {
  int steps = 20;
  std::uint64_t seed = 0;
  float ip_scale = 1.0f;
};

/// Observation points for tests and tooling.
struct InferenceHooks {
  std::function<void()> on_encode_reference;
  std::function<void(int t)> on_step;
};

/// Generate F frames [F, C, H, W] in [-1, 1] from a reference frame [C, H, W]
/// and driving controls. The reference is encoded once and reused for every
/// frame and denoising step.
inline Tensor<float> animate(const Model<float>& m, const Tensor<float>& ref_image, const DrivingBundle& d,
                             const InferenceOptions& opt, const InferenceHooks* hooks = nullptr) {
  if (m.stage < 1) throw ConfigError("animation needs a stage-1 or later checkpoint");
  if (d.face && m.stage < 2) throw ConfigError("face control requires a stage-2 checkpoint");
  const UNetConfig& cfg = m.config.arch;
  if (ref_image.rank() != 3 || ref_image.dim(0) != cfg.in_channels)
    throw ShapeError("reference image must be [C, H, W], got " + shape_str(ref_image.shape()));
  const int f = d.frames(), h = ref_image.dim(1), w = ref_image.dim(2);
  if (d.pose.raster.dim(2) != h || d.pose.raster.dim(3) != w || (d.face && d.face->raster.shape() != d.pose.raster.shape()))
    throw ShapeError("driving controls do not match the reference resolution");
  const NoiseSchedule sched = make_noise_schedule(m.config.schedule);
  if (opt.steps < 1 || opt.steps > sched.steps()) throw ParameterError("sampler steps must lie in [1, T]");

  ReferenceCache<float> cache = encode_reference(m.params, cfg, m.config.mode, ref_image);
  if (hooks && hooks->on_encode_reference) hooks->on_encode_reference();
  const Branches br{true, d.face.has_value(), true};
  auto eps_model = [&](const Tensor<float>& x, int t) {
    if (hooks && hooks->on_step) hooks->on_step(t);
    Graph<float> g(false);
    Binder<float> b(g, m.params);
    Conditioning<float> cond = conditioning_from_cache(g, cache);
    cond.ip_scale = opt.ip_scale;
    Var<float> pose = g.constant(d.pose.raster);
    Var<float> face = d.face ? g.constant(d.face->raster) : nullptr;
    return predict_eps(b, m.config, g.constant(x), t, cond, pose, face, br)->value;
  };
  return ddim_sample<float>(sched, opt.steps, opt.seed, {f, cfg.in_channels, h, w}, eps_model);
}

/// Blank-control generation: pure dynamics from a still reference.
inline Tensor<float> live_photo(const Model<float>& m, const Tensor<float>& ref_image, int frames,
                                const InferenceOptions& opt, const InferenceHooks* hooks = nullptr) {
  if (ref_image.rank() != 3) throw ShapeError("reference image must be [C, H, W]");
  const DrivingBundle d =
      blank_driving(frames, m.config.arch.control_channels, ref_image.dim(1), ref_image.dim(2), m.stage >= 2);
  return animate(m, ref_image, d, opt, hooks);
}

}  // namespace xdyna
