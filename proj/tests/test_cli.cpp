#include "test_util.hpp"
#include "xdyna/checkpoint.hpp"
#include "xdyna/metrics.hpp"
#include "xdyna/provenance.hpp"

#include <cstdlib>
#include <sys/wait.h>

using namespace xdyna;
using namespace xdyna::test;

namespace {

// Small network so CLI runs finish in seconds.
const std::string kSmall =
    " --set model.base_width=8 --set model.inner_width=16 --set model.norm_groups=4 --set model.time_dim=32"
    " --set model.text_dim=16 --set model.time_freq_dim=16";

struct CliResult {
  int code = -1;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("xdyna_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    ::setenv("XDYNA_DETERMINISTIC", "1", 1);
  }
  void TearDown() override { fs::remove_all(root_); }

  CliResult run(const std::string& args) {
    const fs::path err = root_ / "stderr.txt";
    const std::string cmd = std::string("\"") + XDYNA_CLI_PATH + "\" " + args + " > /dev/null 2> \"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = read_text(err);
    return r;
  }

  std::string p(const std::string& rel) const { return (root_ / rel).string(); }

  fs::path root_;
};

double report_value(const std::string& csv, const std::string& metric, const std::string& scope) {
  for (const auto& e : MetricReport::from_csv(csv).entries)
    if (e.metric == metric && e.scope == scope) return e.value;
  ADD_FAILURE() << "no " << metric << "/" << scope << " in report";
  return std::nan("");
}

}  // namespace

TEST_F(Cli, GenDataIsByteIdentical) {
  for (const char* d : {"a", "b"}) ASSERT_EQ(run("gen-data --out " + p(d) + " --human 2 --scene 1 --seed 7").code, 0);
  EXPECT_EQ(tree_hash(p("a")), tree_hash(p("b")));
  const json rec = json::parse(read_text(p("a/run.json")));
  EXPECT_EQ(rec["subcommand"], "gen-data");
  EXPECT_EQ(rec["deterministic"], true);
  EXPECT_EQ(rec["outputs"]["dataset"], tree_hash(p("a"), {"run.json"}));
  EXPECT_EQ(load_manifest(p("a/manifest.json")).clips.size(), 3u);
  ASSERT_EQ(run("gen-data --out " + p("c") + " --human 2 --scene 1 --seed 8").code, 0);
  EXPECT_NE(tree_hash(p("a"), {"run.json"}), tree_hash(p("c"), {"run.json"}));
}

TEST_F(Cli, Stage2WithoutCheckpointIsUsageError) {
  write_text(p("c.toml"), "[train]\nstage = 2\n");
  ASSERT_EQ(run("gen-data --out " + p("d") + " --human 1 --scene 0").code, 0);
  const CliResult r = run("train --config " + p("c.toml") + " --data " + p("d") + " --out " + p("o"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error: code=config"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("stage-1 checkpoint required"), std::string::npos) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  EXPECT_EQ(run("train --stage 1 --data " + p("d") + " --out " + p("o")).code, 2);
}

TEST_F(Cli, UsageAndIoErrors) {
  CliResult r = run("gen-data --out " + p("d") + " --bogus 1");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: code=usage", 0), 0u) << r.err;
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("dance").code, 2);
  EXPECT_EQ(run("gen-data --out " + p("d") + " --set data.nope=1").code, 2);
  EXPECT_EQ(run("gen-data").code, 2);
  r = run("gen-data --out " + p("d") + " --config " + p("missing.toml"));
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err.rfind("error: code=io", 0), 0u) << r.err;
  EXPECT_EQ(run("train --stage 0 --data " + p("nowhere") + " --out " + p("o")).code, 3);
  EXPECT_EQ(run("evaluate --pred " + p("nowhere") + " --gt " + p("nowhere")).code, 3);
  EXPECT_EQ(run("animate --ckpt " + p("none.ckpt") + " --data " + p("d") + " --out " + p("o")).code, 3);
}

TEST_F(Cli, EvaluateIdenticalDirsReportsZeroL1) {
  ASSERT_EQ(run("gen-data --out " + p("g") + " --human 2 --scene 1 --seed 3").code, 0);
  for (const char* o : {"r1", "r2"})
    ASSERT_EQ(run("evaluate --pred " + p("g") + " --gt " + p("g") + " --out " + p(o)).code, 0);
  const std::string csv = read_text(p("r1/report.csv"));
  for (const char* scope : {"whole", "fg", "bg"}) EXPECT_EQ(report_value(csv, "L1", scope), 0.0);
  EXPECT_EQ(report_value(csv, "SSIM", "whole"), 1.0);
  EXPECT_NEAR(report_value(csv, "FD", "whole"), 0.0, 1e-8);
  EXPECT_GE(report_value(csv, "FD", "whole"), 0.0);
  EXPECT_EQ(tree_hash(p("r1")), tree_hash(p("r2")));
}

TEST_F(Cli, PipelineRerunsAreByteIdentical) {
  ASSERT_EQ(run("gen-data --out " + p("d") + " --human 2 --scene 1 --seed 5").code, 0);
  for (const char* o : {"s0a", "s0b"})
    ASSERT_EQ(run("train --stage 0 --steps 3 --data " + p("d") + " --out " + p(o) + kSmall).code, 0);
  EXPECT_EQ(tree_hash(p("s0a")), tree_hash(p("s0b")));
  EXPECT_EQ(read_text(p("s0a/loss.csv")).rfind("step,loss\n", 0), 0u);

  for (const char* o : {"s1a", "s1b"})
    ASSERT_EQ(run("train --stage 1 --steps 2 --lr 1e-4 --init " + p("s0a/model.ckpt") + " --data " + p("d") +
                  " --out " + p(o) + kSmall)
                  .code,
              0);
  EXPECT_EQ(tree_hash(p("s1a")), tree_hash(p("s1b")));
  for (const char* o : {"s2a", "s2b"})
    ASSERT_EQ(run("train --stage 2 --steps 2 --init " + p("s1a/model.ckpt") + " --data " + p("d") + " --out " + p(o) +
                  kSmall)
                  .code,
              0);
  EXPECT_EQ(tree_hash(p("s2a")), tree_hash(p("s2b")));
  EXPECT_EQ(load_checkpoint(p("s2a/model.ckpt")).stage, 2);

  const std::string ckpt = p("s2a/model.ckpt");
  for (const char* o : {"an_a", "an_b"})
    ASSERT_EQ(run("animate --ckpt " + ckpt + " --data " + p("d") + " --face --steps 2 --out " + p(o)).code, 0);
  EXPECT_EQ(tree_hash(p("an_a")), tree_hash(p("an_b")));
  for (const char* o : {"lp_a", "lp_b"})
    ASSERT_EQ(run("live-photo --ckpt " + ckpt + " --data " + p("d") + " --clip human_000 --frames 3 --steps 2 --out " +
                  p(o))
                  .code,
              0);
  EXPECT_EQ(tree_hash(p("lp_a")), tree_hash(p("lp_b")));
  for (const char* o : {"ev_a", "ev_b"})
    ASSERT_EQ(run("evaluate --pred " + p("an_a") + " --gt " + p("d") + " --out " + p(o)).code, 0);
  EXPECT_EQ(tree_hash(p("ev_a")), tree_hash(p("ev_b")));
  for (const char* o : {"gc_a", "gc_b"})
    ASSERT_EQ(run("grad-check --samples 3 --groups adapter,temporal --out " + p(o) + kSmall).code, 0);
  EXPECT_EQ(tree_hash(p("gc_a")), tree_hash(p("gc_b")));
  EXPECT_EQ(read_text(p("gc_a/gradcheck.csv")).rfind("group,checked,max_rel_error,pass\n", 0), 0u);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  write_text(p("c.toml"), "[data]\nhuman = 3\nscene = 1\nseed = 2\n");
  ASSERT_EQ(run("gen-data --config " + p("c.toml") + " --human 1 --out " + p("d")).code, 0);
  const Manifest m = load_manifest(p("d/manifest.json"));
  EXPECT_EQ(m.count(ClipKind::human), 1u);
  EXPECT_EQ(m.count(ClipKind::scene), 1u);
  const json rec = json::parse(read_text(p("d/run.json")));
  EXPECT_EQ(rec["config"]["data"]["human"], 1);
  EXPECT_EQ(rec["config"]["data"]["seed"], 2);
}
