#pragma once

// A complete denoiser: backbone, null text token, one appearance-reference
// mechanism, pose/face ControlNets and the motion module, plus the function
// that composes them into an epsilon prediction.

#include "xdyna/diffusion.hpp"
#include "xdyna/reference.hpp"

namespace xdyna {

struct ModelConfig {
  UNetConfig arch;
  ScheduleConfig schedule;
  AdapterMode mode = AdapterMode::dynamics_adapter;
  bool operator==(const ModelConfig&) const = default;
};

/// Parameters plus the metadata a checkpoint carries. `stage` is the last
/// completed training stage (0 = backbone only).
template <typename T>
struct Model {
  ModelConfig config;
  int stage = 0;
  std::uint64_t seed = 0;
  double lr = 0.0;
  std::set<Group> frozen;
  ParamStore<T> params;

  template <typename U>
  Model<U> cast() const {
    return {config, stage, seed, lr, frozen, params.template cast<U>()};
  }
  bool operator==(const Model&) const = default;
};

/// Groups a stage trains; everything else present is frozen.
inline std::set<Group> stage_trainable(int stage, AdapterMode mode) {
  switch (stage) {
    case 0: return {Group::backbone, Group::text};
    case 1: {
      std::set<Group> g{Group::pose_control, Group::temporal, Group::text};
      if (auto a = adapter_group(mode)) g.insert(*a);
      return g;
    }
    case 2: return {Group::face_control};
  }
  throw ConfigError("training stage must be 0, 1 or 2");
}

/// Attach fresh reference, control and motion parameters to a backbone.
template <typename T>
void attach_modules(ParamStore<T>& p, const ModelConfig& c, std::uint64_t seed) {
  const ParamGroup<T>& bb = p.group(Group::backbone);
  switch (c.mode) {
    case AdapterMode::dynamics_adapter: p.group(Group::adapter) = init_dynamics_adapter(bb); break;
    case AdapterMode::refnet_concat: p.group(Group::refnet) = init_refnet(bb); break;
    case AdapterMode::ip_adapter: p.group(Group::ip_adapter) = init_ip_adapter(c.arch, bb, mix_seed(seed, 3)); break;
    case AdapterMode::none: break;
  }
  p.group(Group::pose_control) = init_controlnet<T>(c.arch, mix_seed(seed, 4));
  p.group(Group::face_control) = init_controlnet<T>(c.arch, mix_seed(seed, 5));
  p.group(Group::temporal) = init_temporal<T>(c.arch, mix_seed(seed, 6));
}

/// Freshly initialized model with every module attached.
template <typename T>
Model<T> init_model(const ModelConfig& c, std::uint64_t seed) {
  Model<T> m;
  m.config = c;
  m.seed = seed;
  m.params.group(Group::backbone) = init_backbone<T>(c.arch, mix_seed(seed, 1));
  m.params.group(Group::text) = init_text<T>(c.arch, mix_seed(seed, 2));
  attach_modules(m.params, c, seed);
  return m;
}

/// Which optional branches take part in a denoiser evaluation.
struct Branches {
  bool pose = false;
  bool face = false;
  bool temporal = false;
};

/// Epsilon prediction for x_t [F, C, H, W]. `cond` carries the reference
/// conditioning; pose/face hints are [F, C_ctrl, H, W] (blank maps are valid
/// inputs). ControlNet residuals of both branches are summed.
template <typename T>
Var<T> predict_eps(Binder<T>& b, const ModelConfig& mc, Var<T> x_t, int t, Conditioning<T> cond, Var<T> pose_hint,
                   Var<T> face_hint, const Branches& br) {
  Graph<T>& g = b.graph();
  const UNetConfig& cfg = mc.arch;
  if (cond.mode != mc.mode && cond.mode != AdapterMode::none)
    throw ConfigError("conditioning mode does not match the model's adapter mode");
  std::vector<Var<T>> residuals;
  auto add_control = [&](Group grp, Var<T> hint) {
    if (!hint) throw ConfigError(std::string("missing control map for ") + std::string(group_name(grp)));
    Var<T> temb = ops::silu(g, time_embedding(b, Group::backbone, cfg, t));
    auto r = controlnet_forward(b, grp, cfg, x_t, hint, temb);
    if (residuals.empty()) {
      residuals = r;
    } else {
      for (std::size_t i = 0; i < r.size(); ++i) residuals[i] = ops::add(g, residuals[i], r[i]);
    }
  };
  if (br.pose) add_control(Group::pose_control, pose_hint);
  if (br.face) add_control(Group::face_control, face_hint);
  cond.control = residuals;
  cond.temporal = br.temporal;
  return unet_forward(b, Group::backbone, cfg, x_t, t, cond);
}

}  // namespace xdyna
