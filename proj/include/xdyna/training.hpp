#pragma once

// Staged training with mixed human/scene batches, AdamW, and finite-difference
// gradient verification.
//
//   stage 0  backbone + null token on individual frames (stands in for the
//            pretrained image model the later stages freeze)
//   stage 1  appearance reference module, pose ControlNet, motion module and
//            null token on human and scene clips
//   stage 2  face ControlNet on human clips only

#include "xdyna/checkpoint.hpp"
#include "xdyna/synthetic.hpp"

#include <functional>
#include <optional>

namespace xdyna {

struct TrainConfig {
  int stage = 1;
  ModelConfig model;
  double lr = 1e-5;
  double weight_decay = 0.01;
  int batch_size = 1;
  int epochs = 5;
  long steps = 0;  // > 0 overrides epochs
  std::uint64_t seed = 0;
  std::set<Group> trainable;  // empty selects the stage default
  int log_every = 0;

  long total_steps(std::size_t clips) const {
    if (steps > 0) return steps;
    const long per_epoch = (static_cast<long>(clips) + batch_size - 1) / batch_size;
    return static_cast<long>(epochs) * per_epoch;
  }
  std::set<Group> trainable_groups() const {
    return trainable.empty() ? stage_trainable(stage, model.mode) : trainable;
  }
};

inline double default_lr(int stage) { return stage == 0 ? 1e-3 : 1e-5; }
inline int default_epochs(int stage) { return stage == 0 ? 20 : stage == 1 ? 5 : 2; }

/// Typed view of the `train` section; negative lr/epochs select stage defaults.
inline TrainConfig train_config(const json& cfg) {
  const json& t = cfg.at("train");
  TrainConfig c;
  c.model = model_config(cfg);
  c.stage = t.at("stage").get<int>();
  if (c.stage < 0 || c.stage > 2) throw ConfigError("train.stage must be 0, 1 or 2");
  c.lr = t.at("lr").get<double>();
  if (c.lr < 0) c.lr = default_lr(c.stage);
  if (c.lr == 0) throw ConfigError("learning rate must be positive");
  c.weight_decay = t.at("weight_decay").get<double>();
  c.batch_size = t.at("batch_size").get<int>();
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  c.epochs = t.at("epochs").get<int>();
  if (c.epochs < 0) c.epochs = default_epochs(c.stage);
  c.steps = t.at("steps").get<long>();
  c.seed = t.at("seed").get<std::uint64_t>();
  c.trainable = parse_group_list(t.at("trainable").get<std::string>());
  c.log_every = t.at("log_every").get<int>();
  return c;
}

/// Adam with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore<T>& params, const std::map<Group, ParamGroup<T>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& [g, grp] : grads)
      for (const auto& [name, grad] : grp) {
        Tensor<T>& p = params.at(g, name);
        auto& st = state_[{g, name}];
        if (st.m.empty()) st.m = st.v = Tensor<T>(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double gi = grad[i];
          st.m[i] = static_cast<T>(b1_ * st.m[i] + (1.0 - b1_) * gi);
          st.v[i] = static_cast<T>(b2_ * st.v[i] + (1.0 - b2_) * gi * gi);
          const double mh = st.m[i] / c1, vh = st.v[i] / c2;
          p[i] = static_cast<T>(p[i] - lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * p[i]));
        }
      }
  }

 private:
  struct Moments {
    Tensor<T> m, v;
  };
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::pair<Group, std::string>, Moments> state_;
};

/// One noised training example.
template <typename T>
struct TrainingSample {
  Tensor<T> x0;     // [F, C, H, W]
  Tensor<T> ref;    // [1, C, H, W]
  Tensor<T> pose;   // [F, C_ctrl, H, W]
  Tensor<T> face;   // [F, C_ctrl, H, W]
  Tensor<T> eps;
  int t = 0;
};

/// Branches active while training or sampling a model at `stage`.
inline Branches stage_branches(int stage) {
  if (stage == 0) return {};
  return {true, stage >= 2, true};
}

/// Draw a sample from a clip: random reference frame, timestep and noise.
template <typename T>
TrainingSample<T> make_sample(const ClipRecord& c, const NoiseSchedule& s, std::mt19937_64& rng) {
  TrainingSample<T> out;
  const int f = c.num_frames();
  const int r = static_cast<int>(rng() % static_cast<std::uint64_t>(f));
  out.t = static_cast<int>(rng() % static_cast<std::uint64_t>(s.steps()));
  out.x0 = c.frames.cast<T>();
  Tensor<T> ref = c.frames.frame(r).template cast<T>();
  out.ref = ref.reshaped({1, c.frames.dim(1), c.height(), c.width()});
  out.pose = c.pose.raster.cast<T>();
  out.face = c.face.raster.cast<T>();
  out.eps = gaussian<T>(out.x0.shape(), rng);
  return out;
}

/// Epsilon-MSE of the model on one sample. Stage 0 runs the bare backbone on
/// the frames as independent images.
template <typename T>
Var<T> sample_loss(Binder<T>& b, const ModelConfig& mc, const TrainingSample<T>& s, const Branches& br,
                   bool use_reference, const NoiseSchedule& sched) {
  Graph<T>& g = b.graph();
  Var<T> x_t = g.constant(add_noise(s.x0, s.eps, s.t, sched));
  Conditioning<T> cond;
  if (use_reference) cond = reference_conditioning(b, mc.arch, mc.mode, g.constant(s.ref));
  Var<T> pose = br.pose ? g.constant(s.pose) : nullptr;
  Var<T> face = br.face ? g.constant(s.face) : nullptr;
  Var<T> eps = predict_eps(b, mc, x_t, s.t, cond, pose, face, br);
  return ops::mse(g, eps, s.eps);
}

struct TrainResult {
  Model<float> model;
  std::vector<double> loss;
};

struct TrainHooks {
  std::function<void(long step, double loss)> on_step;
};

/// Validate stage preconditions and attach any modules the stage needs.
inline Model<float> prepare_stage(const TrainConfig& cfg, Model<float> m, const std::vector<ClipRecord>& clips) {
  if (clips.empty()) throw ParameterError("training needs at least one clip");
  if (!(cfg.lr > 0)) throw ConfigError("learning rate must be positive");
  if (!m.params.has(Group::backbone)) throw ConfigError("model has no backbone weights");
  if (m.config.arch != cfg.model.arch || m.config.schedule != cfg.model.schedule)
    throw ConfigError("checkpoint architecture or schedule differs from the run config");
  const std::set<Group> train = cfg.trainable_groups();
  if (cfg.stage >= 1) {
    if (train.count(Group::backbone)) throw ConfigError("backbone must stay frozen in stages 1 and 2");
    if (cfg.stage == 2 && m.stage < 1) throw ConfigError("stage-1 checkpoint required");
    if (cfg.stage == 2 && m.config.mode != cfg.model.mode)
      throw ConfigError("stage-1 checkpoint was trained with a different adapter mode");
    if (cfg.stage == 2)
      for (const auto& c : clips)
        if (c.kind != ClipKind::human) throw ConfigError("stage 2 trains on human clips only; found scene clip " + c.id);
    if (cfg.stage == 1 && (m.stage == 0 || m.config.mode != cfg.model.mode)) {
      for (Group g : {Group::adapter, Group::refnet, Group::ip_adapter, Group::pose_control, Group::face_control,
                      Group::temporal})
        m.params.erase(g);
      m.config.mode = cfg.model.mode;
      attach_modules(m.params, m.config, cfg.seed);
    }
  }
  for (Group g : train)
    if (!m.params.has(g)) throw ConfigError("trainable group " + std::string(group_name(g)) + " is not in the model");
  return m;
}

/// Run one training stage on in-memory clips. Each step draws `batch_size`
/// clips uniformly from the list, so human and scene clips are mixed in
/// manifest proportion.
inline TrainResult train_stage(const TrainConfig& cfg, Model<float> init, const std::vector<ClipRecord>& clips,
                               const TrainHooks* hooks = nullptr) {
  TrainResult res;
  res.model = prepare_stage(cfg, std::move(init), clips);
  Model<float>& m = res.model;
  const std::set<Group> train = cfg.trainable_groups();
  const NoiseSchedule sched = make_noise_schedule(cfg.model.schedule);
  const Branches br = stage_branches(cfg.stage);
  const bool use_ref = cfg.stage >= 1;
  AdamW<float> opt(cfg.lr, cfg.weight_decay);
  std::mt19937_64 rng(mix_seed(cfg.seed, 100 + cfg.stage));
  const long steps = cfg.total_steps(clips.size());
  for (long step = 0; step < steps; ++step) {
    std::map<Group, ParamGroup<float>> grads;
    double loss = 0;
    for (int k = 0; k < cfg.batch_size; ++k) {
      const ClipRecord& clip = clips[rng() % clips.size()];
      const TrainingSample<float> s = make_sample<float>(clip, sched, rng);
      Graph<float> g;
      Binder<float> b(g, m.params, train);
      Var<float> l = sample_loss(b, m.config, s, br, use_ref, sched);
      if (!std::isfinite(l->value[0])) throw NumericalError("non-finite loss at step " + std::to_string(step));
      g.backward(l);
      loss += l->value[0] / cfg.batch_size;
      for (Group grp : train) {
        ParamGroup<float> gg = b.grads(grp);
        auto& acc = grads[grp];
        for (auto& [name, t] : gg) {
          if (!t.all_finite())
            throw NumericalError("non-finite gradient in group " + std::string(group_name(grp)) + " (" + name + ")");
          t *= 1.0f / static_cast<float>(cfg.batch_size);
          auto it = acc.find(name);
          if (it == acc.end())
            acc.emplace(name, std::move(t));
          else
            it->second += t;
        }
      }
    }
    opt.step(m.params, grads);
    res.loss.push_back(loss);
    if (hooks && hooks->on_step) hooks->on_step(step, loss);
  }
  m.stage = std::max(m.stage, cfg.stage);
  m.lr = cfg.lr;
  m.seed = cfg.seed;
  m.frozen.clear();
  for (const auto& [g, grp] : m.params.groups())
    if (!train.count(g)) m.frozen.insert(g);
  return res;
}

inline std::string loss_csv(const std::vector<double>& loss) {
  std::string out = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, loss[i]);
    out += buf;
  }
  return out;
}

/// Stage-2 training set: the human clips of a list.
inline std::vector<ClipRecord> human_only(const std::vector<ClipRecord>& clips) {
  std::vector<ClipRecord> out;
  for (const auto& c : clips)
    if (c.kind == ClipKind::human) out.push_back(c);
  return out;
}

inline std::vector<ClipRecord> load_dataset(const fs::path& manifest_path) {
  const Manifest m = load_manifest(manifest_path);
  std::vector<ClipRecord> clips;
  for (const auto& e : m.clips) clips.push_back(load_clip(manifest_path.parent_path() / e.id));
  return clips;
}

// ---------------------------------------------------------------------------
// Gradient verification

/// Gradient magnitude below which relative errors are measured against this
/// floor instead. Central differences with step 1e-5 in double precision
/// resolve gradients to roughly 1e-11 absolute, so entries under 1e-6 would
/// otherwise report round-off as error.
constexpr double kGradCheckFloor = 1e-6;

struct GradCheckEntry {
  std::string group;
  double max_rel_error = 0;
  int checked = 0;
};

/// Central-difference check of `analytic` against `loss(params)` on up to
/// `samples` randomly chosen entries of `params`. The relative error of one
/// entry is |a - n| / max(|a|, |n|, floor).
template <typename F>
GradCheckEntry check_gradients(const std::string& label, ParamGroup<double>& params,
                               const ParamGroup<double>& analytic, F&& loss, int samples, double step,
                               std::uint64_t seed, double floor = kGradCheckFloor) {
  std::vector<std::pair<std::string, std::size_t>> slots;
  for (const auto& [name, t] : params) {
    auto it = analytic.find(name);
    if (it == analytic.end()) throw NumericalError("no analytic gradient for " + label + "/" + name);
    if (!it->second.all_finite()) throw NumericalError("non-finite gradient in group " + label + " (" + name + ")");
    for (std::size_t i = 0; i < t.size(); ++i) slots.emplace_back(name, i);
  }
  std::mt19937_64 rng(seed);
  const std::size_t n = std::min<std::size_t>(slots.size(), static_cast<std::size_t>(samples));
  for (std::size_t i = 0; i < n; ++i) std::swap(slots[i], slots[i + rng() % (slots.size() - i)]);
  GradCheckEntry e{label, 0.0, static_cast<int>(n)};
  for (std::size_t k = 0; k < n; ++k) {
    const auto& [name, i] = slots[k];
    double& p = params.at(name)[i];
    const double orig = p;
    p = orig + step;
    const double lp = loss();
    p = orig - step;
    const double lm = loss();
    p = orig;
    const double num = (lp - lm) / (2 * step);
    const double a = analytic.at(name)[i];
    if (!std::isfinite(num)) throw NumericalError("non-finite loss while checking group " + label);
    const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
    e.max_rel_error = std::max(e.max_rel_error, rel);
  }
  return e;
}

/// Replace every all-zero tensor of a group by small noise so gradients that
/// pass through zero-initialized projections become informative.
inline void perturb_zero_tensors(ParamStore<double>& p, Group g, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& [name, t] : p.group(g))
    if (t.max_abs() == 0.0)
      for (auto& v : t.values()) v = nd(rng);
}

/// Small double-precision instance for gradient checks: 2 frames of 8x8.
inline TrainingSample<double> grad_check_sample(const UNetConfig& arch, const NoiseSchedule& s, std::uint64_t seed,
                                                int frames = 2, int size = 8) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), u01(0.0, 1.0);
  TrainingSample<double> out;
  out.x0 = Tensor<double>({frames, arch.in_channels, size, size});
  for (auto& v : out.x0.values()) v = u(rng);
  out.ref = Tensor<double>({1, arch.in_channels, size, size});
  for (auto& v : out.ref.values()) v = u(rng);
  out.pose = Tensor<double>({frames, arch.control_channels, size, size});
  out.face = Tensor<double>({frames, arch.control_channels, size, size});
  for (auto& v : out.pose.values()) v = u01(rng);
  for (auto& v : out.face.values()) v = u01(rng);
  out.eps = gaussian<double>(out.x0.shape(), rng);
  out.t = s.steps() / 2;
  return out;
}

/// Check every group in `groups` of a double-precision model on one sample
/// with pose, face and temporal branches active.
inline std::vector<GradCheckEntry> grad_check(Model<double> m, const std::set<Group>& groups,
                                              const TrainingSample<double>& sample, double step = 1e-5,
                                              int samples = 200, std::uint64_t seed = 0) {
  const NoiseSchedule sched = make_noise_schedule(m.config.schedule);
  const Branches br{true, true, true};
  const bool use_ref = m.config.mode != AdapterMode::none;
  for (Group g : groups) {
    if (!m.params.has(g)) throw ConfigError("grad_check: group " + std::string(group_name(g)) + " not in model");
    perturb_zero_tensors(m.params, g, 0.05, mix_seed(seed, static_cast<std::uint64_t>(g)));
  }
  std::map<Group, ParamGroup<double>> analytic;
  {
    Graph<double> g;
    Binder<double> b(g, m.params, groups);
    Var<double> l = sample_loss(b, m.config, sample, br, use_ref, sched);
    g.backward(l);
    for (Group grp : groups) analytic[grp] = b.grads(grp);
  }
  auto loss = [&] {
    Graph<double> g(false);
    Binder<double> b(g, m.params);
    return sample_loss(b, m.config, sample, br, use_ref, sched)->value[0];
  };
  std::vector<GradCheckEntry> out;
  for (Group grp : groups)
    out.push_back(check_gradients(std::string(group_name(grp)), m.params.group(grp), analytic.at(grp), loss, samples,
                                  step, mix_seed(seed, 50 + static_cast<std::uint64_t>(grp))));
  return out;
}

}  // namespace xdyna
