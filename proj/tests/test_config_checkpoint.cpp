#include "test_util.hpp"
#include "xdyna/checkpoint.hpp"
#include "xdyna/provenance.hpp"
#include "xdyna/training.hpp"

using namespace xdyna;
using namespace xdyna::test;

namespace {

fs::path temp_path(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("xdyna_cfg_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, DefaultsDescribeTheDefaultModel) {
  const json cfg = default_config();
  const ModelConfig mc = model_config(cfg);
  EXPECT_EQ(mc.arch, UNetConfig{});
  EXPECT_EQ(mc.schedule, ScheduleConfig{});
  EXPECT_EQ(mc.mode, AdapterMode::dynamics_adapter);
  EXPECT_EQ(arch_from_json(arch_json(mc.arch)), mc.arch);
  EXPECT_EQ(schedule_from_json(schedule_json(mc.schedule)), mc.schedule);
}

TEST(Config, TomlSubset) {
  const json j = parse_toml_subset(R"(# run config
[model]
mode = "ip_adapter"   # inline comment
base_width = 16
[train]
lr = 1e-4
seed = 7
trainable = "pose_control,temporal"
schedule.steps = 50
flag = true
)");
  EXPECT_EQ(j["model"]["mode"], "ip_adapter");
  EXPECT_EQ(j["model"]["base_width"], 16);
  EXPECT_DOUBLE_EQ(j["train"]["lr"].get<double>(), 1e-4);
  EXPECT_EQ(j["train"]["schedule"]["steps"], 50);
  EXPECT_EQ(j["train"]["flag"], true);
  EXPECT_THROW(parse_toml_subset("[model\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_toml_subset("x = 1\nx = 2\n"), ConfigError);
  EXPECT_THROW(parse_toml_subset("x\n"), ConfigError);
  EXPECT_THROW(parse_toml_subset("x = \"open\n"), ConfigError);
  EXPECT_THROW(parse_toml_subset("x = 1.2.3\n"), ConfigError);
}

TEST(Config, FilesMergeOntoDefaults) {
  const fs::path dir = temp_path("files");
  fs::create_directories(dir);
  write_text(dir / "a.toml", "[train]\nstage = 2\nlr = 0.5\n[data]\nhuman = 3\n");
  const json a = load_config(dir / "a.toml");
  EXPECT_EQ(a["train"]["stage"], 2);
  EXPECT_DOUBLE_EQ(a["train"]["lr"].get<double>(), 0.5);
  EXPECT_EQ(a["data"]["human"], 3);
  EXPECT_EQ(a["data"]["scene"], default_config()["data"]["scene"]);

  write_text(dir / "b.json", R"({"schedule": {"steps": 40}, "train": {"lr": 1}})");
  const json b = load_config(dir / "b.json");
  EXPECT_EQ(b["schedule"]["steps"], 40);
  EXPECT_TRUE(b["train"]["lr"].is_number_float());

  write_text(dir / "c.toml", "[train]\nlearning_rate = 1.0\n");
  EXPECT_THROW(load_config(dir / "c.toml"), ConfigError);
  write_text(dir / "d.toml", "[train]\nstage = \"two\"\n");
  EXPECT_THROW(load_config(dir / "d.toml"), ConfigError);
  write_text(dir / "e.json", "{not json");
  EXPECT_THROW(load_config(dir / "e.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.toml"), IoError);
  fs::remove_all(dir);
}

TEST(Config, Overrides) {
  json cfg = default_config();
  apply_override(cfg, "train.lr=0.003");
  apply_override(cfg, "model.mode=refnet_concat");
  apply_override(cfg, "inference.steps = 7");
  EXPECT_DOUBLE_EQ(cfg["train"]["lr"].get<double>(), 0.003);
  EXPECT_EQ(model_config(cfg).mode, AdapterMode::refnet_concat);
  EXPECT_EQ(cfg["inference"]["steps"], 7);
  apply_override(cfg, "schedule.beta_start=0");
  EXPECT_TRUE(cfg["schedule"]["beta_start"].is_number_float());
  EXPECT_THROW(model_config(cfg), ParameterError);
  EXPECT_THROW(apply_override(cfg, "train.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "train=1"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "train.stage=1.5"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "train.stage"), ConfigError);
  cfg = default_config();
  apply_override(cfg, "model.mode=warp");
  EXPECT_THROW(model_config(cfg), ConfigError);
  cfg = default_config();
  apply_override(cfg, "model.base_width=20");
  EXPECT_THROW(model_config(cfg), ConfigError);
  cfg = default_config();
  apply_override(cfg, "schedule.beta_end=1.5");
  EXPECT_THROW(model_config(cfg), ParameterError);
}

TEST(Config, GroupLists) {
  const std::set<Group> g{Group::pose_control, Group::temporal, Group::adapter};
  EXPECT_EQ(parse_group_list(group_list(g)), g);
  EXPECT_EQ(parse_group_list(" pose_control , temporal "), (std::set<Group>{Group::pose_control, Group::temporal}));
  EXPECT_TRUE(parse_group_list("").empty());
  EXPECT_THROW(parse_group_list("pose_control,wings"), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (AdapterMode mode : {AdapterMode::dynamics_adapter, AdapterMode::refnet_concat, AdapterMode::ip_adapter}) {
    ModelConfig mc;
    mc.mode = mode;
    Model<float> m = init_model<float>(mc, 5);
    m.stage = 2;
    m.lr = 1.25e-5;
    m.seed = 99;
    m.frozen = {Group::backbone, Group::text};
    const std::string bytes = serialize_checkpoint(m);
    const Model<float> back = deserialize_checkpoint(bytes);
    EXPECT_EQ(back.params, m.params);
    EXPECT_EQ(back.config.arch, m.config.arch);
    EXPECT_EQ(back.config.schedule, m.config.schedule);
    EXPECT_EQ(back.config.mode, mode);
    EXPECT_EQ(back.stage, 2);
    EXPECT_EQ(back.lr, 1.25e-5);
    EXPECT_EQ(back.seed, 99u);
    EXPECT_EQ(back.frozen, m.frozen);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, HeaderRecordsGroupHashes) {
  const Model<float> m = init_model<float>(ModelConfig{}, 6);
  const json h = checkpoint_header(m);
  for (const auto& [g, grp] : m.params.groups()) {
    const std::string hash = h.at("group_sha256").at(std::string(group_name(g)));
    EXPECT_EQ(hash, hash_group(m.params, g));
    EXPECT_EQ(hash.size(), 64u);
  }
  Model<float> other = m;
  other.params.at(Group::backbone, other.params.group(Group::backbone).begin()->first)[0] += 1e-3f;
  EXPECT_NE(hash_group(other.params, Group::backbone), hash_group(m.params, Group::backbone));
  EXPECT_EQ(hash_group(other.params, Group::text), hash_group(m.params, Group::text));
}

TEST(Checkpoint, FileRoundTripAndCorruption) {
  const fs::path dir = temp_path("ckpt");
  const Model<float> m = init_model<float>(ModelConfig{}, 7);
  save_checkpoint(dir / "sub" / "m.ckpt", m);
  EXPECT_EQ(load_checkpoint(dir / "sub" / "m.ckpt").params, m.params);
  const std::string bytes = serialize_checkpoint(m);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 4)), IoError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 12)), IoError);
  std::string bad = bytes;
  bad[0] = 'Y';
  EXPECT_THROW(deserialize_checkpoint(bad), IoError);
  std::string header = bytes;
  header[16] = '!';
  EXPECT_THROW(deserialize_checkpoint(header), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  fs::remove_all(dir);
}

TEST(Provenance, HashesMatchKnownDigests) {
  EXPECT_EQ(sha1_hex("abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
  // `printf 'hello\n' | git hash-object --stdin`
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(Provenance, TreeHashTracksContentOnly) {
  const fs::path a = temp_path("tree_a"), b = temp_path("tree_b");
  for (const auto& d : {a, b}) {
    fs::create_directories(d / "x");
    write_text(d / "x" / "f.txt", "one");
    write_text(d / "g.txt", "two");
  }
  write_text(b / "run.json", "ignored");
  EXPECT_EQ(tree_hash(a), tree_hash(b, {"run.json"}));
  EXPECT_NE(tree_hash(a), tree_hash(b));
  write_text(b / "g.txt", "three");
  EXPECT_NE(tree_hash(a), tree_hash(b, {"run.json"}));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(ImageIo, PngRoundTripOnTheByteGrid) {
  std::mt19937_64 rng(8);
  Tensor<float> img({3, 5, 7});
  for (auto& v : img.values()) v = from_u8(static_cast<std::uint8_t>(rng() % 256));
  const fs::path dir = temp_path("png");
  fs::create_directories(dir);
  write_png(dir / "a.png", img);
  EXPECT_EQ(read_png(dir / "a.png"), img);
  Tensor<float> gray({1, 4, 4}, 0.5f);
  write_png(dir / "g.png", gray);
  EXPECT_EQ(read_png(dir / "g.png").dim(0), 1);
  EXPECT_THROW(read_png(dir / "missing.png"), IoError);
  fs::remove_all(dir);
  for (int q = 0; q < 256; ++q) {
    const float v = from_u8(static_cast<std::uint8_t>(q));
    EXPECT_EQ(to_u8(v), q);
    EXPECT_EQ(quantize_unit(v), v);
  }
}
