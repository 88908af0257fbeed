// xdyna command-line entry point.
//
//   xdyna gen-data   --out D [--human N] [--scene M] [--seed S]
//   xdyna train      --data D --out O [--stage K] [--init CKPT] [--steps N] [--lr X] [--seed S]
//   xdyna animate    --ckpt C --data D --out O [--clip ID]... [--ref-clip ID] [--face]
//   xdyna live-photo --ckpt C --out O (--ref PNG | --data D --clip ID) [--frames F]
//   xdyna evaluate   --pred P --gt G [--out O]
//   xdyna grad-check --out O [--samples N] [--groups a,b]
//
// Every subcommand also takes --config FILE and repeated --set key=value;
// flags override both. Failures print one line
//   error: code=<kind> msg="<message>"
// and exit 2 (usage/config), 3 (I/O), 4 (other runtime errors) or 1 (a
// gradient check above tolerance).

#include "xdyna/inference.hpp"
#include "xdyna/metrics.hpp"
#include "xdyna/provenance.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace xdyna;

namespace {

constexpr double kGradCheckTolerance = 1e-4;

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* sc, Common& c, bool needs_out = true) {
  sc->add_option("--config", c.config, "TOML or JSON config file");
  sc->add_option("--set", c.sets, "override a config entry, key=value")->allow_extra_args(false);
  sc->add_option("--out", c.out, needs_out ? "output directory" : "output directory (default: --pred)");
}

json build_config(const Common& c) {
  json cfg = c.config.empty() ? default_config() : load_config(c.config);
  for (const auto& s : c.sets) apply_override(cfg, s);
  return cfg;
}

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw ConfigError("--out is required");
  ensure_dir(c.out);
  return c.out;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch == '\n' ? ' ' : ch;
  }
  return out;
}

void write_frames(const fs::path& dir, const Tensor<float>& clip) {
  ensure_dir(dir);
  for (int t = 0; t < clip.dim(0); ++t) {
    Tensor<float> img({clip.dim(1), clip.dim(2), clip.dim(3)});
    const std::size_t n = img.size();
    for (std::size_t i = 0; i < n; ++i) img[i] = (clip[t * n + i] + 1.0f) * 0.5f;
    write_png(dir / frame_name("frame", t), img);
  }
}

Tensor<float> first_frame(const ClipRecord& c) { return c.frames.frame(0).reshaped({3, c.height(), c.width()}); }

void record_outputs(RunRecord& rec, const fs::path& out) {
  for (const auto& rel : list_files(out, {"run.json"})) rec.outputs[rel] = git_blob_hash(read_text(out / rel));
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  Common c;
  std::optional<int> human, scene;
  std::optional<std::uint64_t> seed;
};

int run_gen_data(const GenDataArgs& a) {
  json cfg = build_config(a.c);
  if (a.human) cfg["data"]["human"] = *a.human;
  if (a.scene) cfg["data"]["scene"] = *a.scene;
  if (a.seed) cfg["data"]["seed"] = *a.seed;
  const fs::path out = require_out(a.c);
  const Manifest m = build_fused_dataset(cfg["data"]["human"].get<int>(), cfg["data"]["scene"].get<int>(),
                                         cfg["data"]["seed"].get<std::uint64_t>());
  write_dataset(out, m);
  RunRecord rec;
  rec.subcommand = "gen-data";
  rec.config = cfg;
  rec.outputs["dataset"] = tree_hash(out, {"run.json"});
  rec.write(out);
  std::cout << "wrote " << m.clips.size() << " clips to " << out.string() << "\n";
  return 0;
}

struct TrainArgs {
  Common c;
  std::string data, init;
  std::optional<int> stage;
  std::optional<long> steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  json cfg = build_config(a.c);
  if (a.stage) cfg["train"]["stage"] = *a.stage;
  if (a.steps) cfg["train"]["steps"] = *a.steps;
  if (a.lr) cfg["train"]["lr"] = *a.lr;
  if (a.seed) cfg["train"]["seed"] = *a.seed;
  const TrainConfig tc = train_config(cfg);
  if (tc.stage >= 1 && a.init.empty())
    throw ConfigError(tc.stage == 2 ? "stage-1 checkpoint required" : "stage-0 checkpoint required");
  Model<float> model;
  RunRecord rec;
  if (!a.init.empty()) {
    model = load_checkpoint(a.init);
    if (tc.stage == 2 && model.stage < 1) throw ConfigError("stage-1 checkpoint required");
    if (tc.stage == 1 && model.stage > 1) throw ConfigError("stage 1 cannot continue from a stage-2 checkpoint");
    rec.inputs["checkpoint"] = content_hash(a.init);
  } else {
    model = init_model<float>(tc.model, tc.seed);
  }
  if (a.data.empty()) throw ConfigError("--data is required");
  const fs::path out = require_out(a.c);
  std::vector<ClipRecord> clips = load_dataset(fs::path(a.data) / "manifest.json");
  rec.inputs["data"] = content_hash(a.data);
  if (tc.stage == 2) {
    clips = human_only(clips);
    if (clips.empty()) throw ConfigError("stage 2 needs human clips; the dataset has none");
  }
  TrainHooks hooks;
  if (tc.log_every > 0)
    hooks.on_step = [&](long step, double loss) {
      if (step % tc.log_every == 0) std::cout << "step " << step << " loss " << loss << std::endl;
    };
  const TrainResult r = train_stage(tc, std::move(model), clips, &hooks);
  save_checkpoint(out / "model.ckpt", r.model);
  write_text(out / "loss.csv", loss_csv(r.loss));
  rec.subcommand = "train";
  rec.config = cfg;
  record_outputs(rec, out);
  rec.write(out);
  std::cout << "stage " << tc.stage << ": " << r.loss.size() << " steps, final loss " << r.loss.back() << "\n";
  return 0;
}

InferenceOptions inference_options(const json& cfg) {
  InferenceOptions o;
  o.steps = cfg["inference"]["steps"].get<int>();
  o.seed = cfg["inference"]["seed"].get<std::uint64_t>();
  o.ip_scale = cfg["inference"]["ip_scale"].get<float>();
  return o;
}

struct AnimateArgs {
  Common c;
  std::string ckpt, data, ref_clip;
  std::vector<std::string> clips;
  bool face = false;
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
};

int run_animate(const AnimateArgs& a) {
  json cfg = build_config(a.c);
  if (a.steps) cfg["inference"]["steps"] = *a.steps;
  if (a.seed) cfg["inference"]["seed"] = *a.seed;
  if (a.ckpt.empty()) throw ConfigError("--ckpt is required");
  if (a.data.empty()) throw ConfigError("--data is required");
  const Model<float> m = load_checkpoint(a.ckpt);
  const fs::path out = require_out(a.c);
  const Manifest man = load_manifest(fs::path(a.data) / "manifest.json");
  std::vector<std::string> ids = a.clips;
  if (ids.empty())
    for (const auto& e : man.clips) ids.push_back(e.id);
  std::optional<Tensor<float>> shared_ref;
  if (!a.ref_clip.empty()) shared_ref = first_frame(load_clip(fs::path(a.data) / a.ref_clip));
  const InferenceOptions opt = inference_options(cfg);
  for (const auto& id : ids) {
    const ClipRecord clip = load_clip(fs::path(a.data) / id);
    const Tensor<float> ref = shared_ref ? *shared_ref : first_frame(clip);
    write_frames(out / id, animate(m, ref, driving_from_clip(clip, a.face), opt));
  }
  RunRecord rec;
  rec.subcommand = "animate";
  rec.config = cfg;
  rec.flags = {{"clips", ids}, {"ref_clip", a.ref_clip}, {"face", a.face}};
  rec.inputs["checkpoint"] = content_hash(a.ckpt);
  rec.inputs["data"] = content_hash(a.data);
  record_outputs(rec, out);
  rec.write(out);
  std::cout << "animated " << ids.size() << " clips\n";
  return 0;
}

struct LivePhotoArgs {
  Common c;
  std::string ckpt, ref, data, clip;
  std::optional<int> frames, steps;
  std::optional<std::uint64_t> seed;
};

int run_live_photo(const LivePhotoArgs& a) {
  json cfg = build_config(a.c);
  if (a.frames) cfg["inference"]["frames"] = *a.frames;
  if (a.steps) cfg["inference"]["steps"] = *a.steps;
  if (a.seed) cfg["inference"]["seed"] = *a.seed;
  if (a.ckpt.empty()) throw ConfigError("--ckpt is required");
  if (a.ref.empty() == (a.data.empty() || a.clip.empty()))
    throw ConfigError("give either --ref PNG or --data with --clip");
  const Model<float> m = load_checkpoint(a.ckpt);
  const fs::path out = require_out(a.c);
  RunRecord rec;
  Tensor<float> ref;
  if (!a.ref.empty()) {
    ref = read_png(a.ref);
    for (auto& v : ref.values()) v = v * 2.0f - 1.0f;
    rec.inputs["reference"] = content_hash(a.ref);
  } else {
    ref = first_frame(load_clip(fs::path(a.data) / a.clip));
    rec.inputs["reference_clip"] = content_hash(fs::path(a.data) / a.clip);
  }
  const int frames = cfg["inference"]["frames"].get<int>();
  write_frames(out, live_photo(m, ref, frames, inference_options(cfg)));
  rec.subcommand = "live-photo";
  rec.config = cfg;
  rec.inputs["checkpoint"] = content_hash(a.ckpt);
  record_outputs(rec, out);
  rec.write(out);
  std::cout << "wrote " << frames << " frames\n";
  return 0;
}

struct EvaluateArgs {
  Common c;
  std::string pred, gt;
};

int run_evaluate(const EvaluateArgs& a) {
  json cfg = build_config(a.c);
  if (a.pred.empty() || a.gt.empty()) throw ConfigError("--pred and --gt are required");
  EvalConfig ec;
  ec.face_threshold = cfg["eval"]["face_threshold"].get<double>();
  ec.expression_grid_step = cfg["eval"]["expression_grid_step"].get<double>();
  const MetricReport r = evaluate_run(a.pred, a.gt, ec);
  const fs::path out = a.c.out.empty() ? fs::path(a.pred) : fs::path(a.c.out);
  ensure_dir(out);
  write_text(out / "report.csv", r.to_csv());
  write_text(out / "report.md", r.to_markdown());
  RunRecord rec;
  rec.subcommand = "evaluate";
  rec.config = cfg;
  rec.inputs["pred"] = tree_hash(a.pred, {"run.json", "report.csv", "report.md"});
  rec.inputs["gt"] = content_hash(a.gt);
  rec.outputs["report.csv"] = git_blob_hash(read_text(out / "report.csv"));
  rec.outputs["report.md"] = git_blob_hash(read_text(out / "report.md"));
  rec.write(out);
  std::cout << r.to_markdown();
  return 0;
}

struct GradCheckArgs {
  Common c;
  int samples = 200;
  std::string groups;
  std::uint64_t seed = 0;
};

int run_grad_check(const GradCheckArgs& a) {
  json cfg = build_config(a.c);
  const fs::path out = require_out(a.c);
  const ModelConfig mc = model_config(cfg);
  std::set<Group> groups = parse_group_list(a.groups);
  if (groups.empty()) {
    groups = stage_trainable(1, mc.mode);
    groups.insert(Group::face_control);
  }
  const Model<double> m = init_model<double>(mc, a.seed);
  const NoiseSchedule sched = make_noise_schedule(mc.schedule);
  const auto sample = grad_check_sample(mc.arch, sched, mix_seed(a.seed, 9));
  const auto entries = grad_check(m, groups, sample, 1e-5, a.samples, a.seed);
  std::string csv = "group,checked,max_rel_error,pass\n";
  bool ok = true;
  char buf[64];
  for (const auto& e : entries) {
    const bool pass = e.max_rel_error < kGradCheckTolerance;
    ok = ok && pass;
    std::snprintf(buf, sizeof buf, "%.6e", e.max_rel_error);
    csv += e.group + "," + std::to_string(e.checked) + "," + buf + "," + (pass ? "1" : "0") + "\n";
  }
  write_text(out / "gradcheck.csv", csv);
  RunRecord rec;
  rec.subcommand = "grad-check";
  rec.config = cfg;
  rec.flags = {{"samples", a.samples}, {"groups", group_list(groups)}, {"seed", a.seed}};
  record_outputs(rec, out);
  rec.write(out);
  std::cout << csv;
  if (!ok) throw CheckFailed("gradient check above tolerance");
  return 0;
}

int dispatch(int argc, char** argv) {
  CLI::App app{"xdyna: synthetic human image animation toolkit"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* s_gd = app.add_subcommand("gen-data", "generate the synthetic human/scene dataset");
  add_common(s_gd, gd.c);
  s_gd->add_option("--human", gd.human, "number of human clips");
  s_gd->add_option("--scene", gd.scene, "number of scene clips");
  s_gd->add_option("--seed", gd.seed, "dataset seed");

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train", "run one training stage");
  add_common(s_tr, tr.c);
  s_tr->add_option("--data", tr.data, "dataset directory");
  s_tr->add_option("--init", tr.init, "checkpoint to start from");
  s_tr->add_option("--stage", tr.stage, "training stage (0, 1 or 2)");
  s_tr->add_option("--steps", tr.steps, "optimizer steps (overrides epochs)");
  s_tr->add_option("--lr", tr.lr, "learning rate");
  s_tr->add_option("--seed", tr.seed, "training seed");

  AnimateArgs an;
  auto* s_an = app.add_subcommand("animate", "animate reference frames with driving clips");
  add_common(s_an, an.c);
  s_an->add_option("--ckpt", an.ckpt, "stage-1 or stage-2 checkpoint");
  s_an->add_option("--data", an.data, "dataset with driving clips");
  s_an->add_option("--clip", an.clips, "driving clip id (repeatable; default all)");
  s_an->add_option("--ref-clip", an.ref_clip, "take the reference from this clip's first frame");
  s_an->add_flag("--face", an.face, "use face control (stage-2 checkpoints)");
  s_an->add_option("--steps", an.steps, "sampler steps");
  s_an->add_option("--seed", an.seed, "sampling seed");

  LivePhotoArgs lp;
  auto* s_lp = app.add_subcommand("live-photo", "animate a still image with blank controls");
  add_common(s_lp, lp.c);
  s_lp->add_option("--ckpt", lp.ckpt, "stage-1 or stage-2 checkpoint");
  s_lp->add_option("--ref", lp.ref, "reference PNG");
  s_lp->add_option("--data", lp.data, "dataset directory (with --clip)");
  s_lp->add_option("--clip", lp.clip, "clip whose first frame is the reference");
  s_lp->add_option("--frames", lp.frames, "number of frames");
  s_lp->add_option("--steps", lp.steps, "sampler steps");
  s_lp->add_option("--seed", lp.seed, "sampling seed");

  EvaluateArgs ev;
  auto* s_ev = app.add_subcommand("evaluate", "compare generated clips with ground truth");
  add_common(s_ev, ev.c, false);
  s_ev->add_option("--pred", ev.pred, "generated clips");
  s_ev->add_option("--gt", ev.gt, "ground-truth dataset");

  GradCheckArgs gc;
  auto* s_gc = app.add_subcommand("grad-check", "finite-difference check of every trainable group");
  add_common(s_gc, gc.c);
  s_gc->add_option("--samples", gc.samples, "entries checked per group");
  s_gc->add_option("--groups", gc.groups, "comma-separated groups (default: all trainable)");
  s_gc->add_option("--seed", gc.seed, "model and sample seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: code=usage msg=\"" << escape(e.what()) << "\"\n";
    return 2;
  }

  if (s_gd->parsed()) return run_gen_data(gd);
  if (s_tr->parsed()) return run_train(tr);
  if (s_an->parsed()) return run_animate(an);
  if (s_lp->parsed()) return run_live_photo(lp);
  if (s_ev->parsed()) return run_evaluate(ev);
  return run_grad_check(gc);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const CheckFailed& e) {
    std::cerr << "error: code=gradcheck msg=\"" << escape(e.what()) << "\"\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: code=" << xdyna::to_string(e.kind()) << " msg=\"" << escape(e.what()) << "\"\n";
    switch (e.kind()) {
      case ErrorKind::config: return 2;
      case ErrorKind::io: return 3;
      default: return 4;
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: code=io msg=\"" << escape(e.what()) << "\"\n";
    return 3;
  } catch (const json::exception& e) {
    std::cerr << "error: code=config msg=\"" << escape(e.what()) << "\"\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: code=internal msg=\"" << escape(e.what()) << "\"\n";
    return 4;
  }
}
