#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "kgedit/container.hpp"
#include "kgedit/error.hpp"
#include "kgedit/harness.hpp"
#include "test_support.hpp"

using namespace kgedit;
using namespace kgedit::harness;
using kgedit::testing::TempDir;

namespace {

// A pipeline that finishes in about a second.
std::vector<std::string> small_overrides() {
  return {"data.synthetic.entities=40", "data.synthetic.relations=4", "data.synthetic.triples=300",
          "model.d_model=16",           "model.n_heads=2",            "model.d_ff=32",
          "pretrain.epochs=20",         "bundle.n_corrupt=10",        "bundle.ltest_size=20",
          "bundle.retrain_epochs=3",    "editor.epochs=2",            "editor.patch_width=16",
          "eval.locality_pool_size=32"};
}

ExperimentConfig small_config(std::vector<std::string> extra = {}) {
  auto o = small_overrides();
  o.insert(o.end(), extra.begin(), extra.end());
  return load_config({}, o);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(KGEDIT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(config_from_json(j)), j);
  EXPECT_EQ(config_hash(config_from_json(j)), config_hash(c));
  EXPECT_EQ(c.model.d_model, 64u);
  EXPECT_EQ(c.model.n_layers, 2u);
  EXPECT_EQ(c.data.synthetic.entities, 200u);
  EXPECT_EQ(c.data.synthetic.relations, 12u);
  EXPECT_EQ(c.bundle.n_corrupt, 100u);
  EXPECT_EQ(c.eval.ks, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(c.sweep.n, (std::vector<std::size_t>{1, 2, 4, 8, 16, 32}));
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(load_config({}, {"model.d_modle=32"}), ConfigError);
  EXPECT_THROW(load_config({}, {"nonsense=1"}), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"editor": {"lamda": 1}})")), ConfigError);
}

TEST(Config, WrongTypesAreRejected) {
  EXPECT_THROW(load_config({}, {"model.d_model=\"big\""}), ConfigError);
  EXPECT_THROW(load_config({}, {"model.d_model=-3"}), ConfigError);
  EXPECT_THROW(load_config({}, {"eval.variants=[\"MEND\"]"}), ConfigError);
  EXPECT_THROW(load_config({}, {"model.head=XX"}), ConfigError);
  EXPECT_THROW(load_config({}, {"no_equals_sign"}), ConfigError);
  EXPECT_THROW(load_config({}, {"model..d_model=3"}), ConfigError);
}

TEST(Config, OverridesApplyInOrder) {
  const auto c = load_config({}, {"editor.locality_weight=2.5", "eval.variants=[\"KE\",\"ZSL\"]",
                                  "editor.locality_weight=0.5", "bundle.task=ADD", "data.triples=x.tsv"});
  EXPECT_EQ(c.editor.locality_weight, 0.5);
  EXPECT_EQ(c.eval.variants, (std::vector<edit::Variant>{edit::Variant::ke, edit::Variant::zsl}));
  EXPECT_EQ(c.bundle.task, kg::Task::add);
  EXPECT_EQ(c.data.triples, "x.tsv");
}

TEST(Config, FileThenOverrides) {
  TempDir dir("harness_cfg");
  const auto path = dir.path() / "c.json";
  std::ofstream(path) << R"({"model": {"d_model": 32, "n_heads": 2}, "editor": {"patch_width": 8}})";
  const auto c = load_config(path, {"editor.patch_width=12"});
  EXPECT_EQ(c.model.d_model, 32u);
  EXPECT_EQ(c.model.n_heads, 2u);
  EXPECT_EQ(c.editor.patch_width, 12u);
  std::ofstream(dir.path() / "bad.json") << "{ not json";
  EXPECT_THROW(load_config(dir.path() / "bad.json", {}), ConfigError);
  EXPECT_THROW(load_config(dir.path() / "missing.json", {}), ConfigError);
}

TEST(Config, HashTracksContent) {
  EXPECT_NE(config_hash(small_config()), config_hash(small_config({"editor.seed=24"})));
  EXPECT_EQ(config_hash(small_config()), config_hash(small_config()));
}

TEST(Validate, RejectsBadValuesBeforeWork) {
  auto expect_bad = [](std::vector<std::string> o, Command cmd) {
    EXPECT_THROW(validate(load_config({}, o), cmd), ConfigError) << o.front();
  };
  expect_bad({"model.d_model=30", "model.n_heads=4"}, Command::pretrain);
  expect_bad({"model.max_seq_len=4"}, Command::pretrain);
  expect_bad({"pretrain.momentum=1.0"}, Command::pretrain);
  expect_bad({"pretrain.lr=0"}, Command::pretrain);
  expect_bad({"data.triples=/nonexistent/triples.tsv"}, Command::pretrain);
  expect_bad({"bundle.rank_threshold_fraction=1.0"}, Command::build);
  expect_bad({"bundle.dir=/tmp"}, Command::build);
  expect_bad({"editor.locality_weight=-1"}, Command::edit_eval);
  expect_bad({"editor.attach_layer=5"}, Command::edit_eval);
  expect_bad({"eval.ks=[0]"}, Command::edit_eval);
  expect_bad({"eval.n=0"}, Command::edit_eval);
  expect_bad({"sweep.n=[]"}, Command::sweep);
  // Later-stage settings do not matter for earlier commands.
  EXPECT_NO_THROW(validate(load_config({}, {"eval.n=0"}), Command::build));
  EXPECT_NO_THROW(validate(ExperimentConfig{}, Command::sweep));
}

TEST(Pipeline, EditEvalWritesVerifiableManifest) {
  TempDir dir("harness_e2e");
  const auto cfg = small_config({"eval.variants=[\"KGEditor\",\"ZSL\",\"CALINET\",\"KE\",\"FT\"]"});
  const auto out = cmd_edit_eval(cfg, dir.path());
  ASSERT_EQ(out.reports.size(), 5u);
  const auto& zsl = out.reports[1];
  EXPECT_EQ(zsl.meta.variant, "ZSL");
  EXPECT_EQ(zsl.succ_at.at(1), 0.0);
  EXPECT_EQ(zsl.rk_at.at(3), 1.0);
  EXPECT_EQ(zsl.params_tuned, 0u);
  for (const auto& r : out.reports) {
    EXPECT_LT(r.wall_time_s, 0.0);
    EXPECT_EQ(r.meta.task, "EDIT");
  }

  // Every recorded artifact exists with the recorded size and checksum.
  const auto manifest = json::parse(slurp(dir.path() / "run.manifest"));
  EXPECT_EQ(manifest.at("command"), "edit-eval");
  EXPECT_EQ(manifest.at("config_hash"), io::hex64(config_hash(cfg)));
  EXPECT_FALSE(manifest.contains("started"));
  std::set<std::string> paths;
  for (const auto& a : manifest.at("artifacts")) {
    const auto bytes = slurp(dir.path() / a.at("path").get<std::string>());
    EXPECT_EQ(bytes.size(), a.at("bytes").get<std::size_t>());
    EXPECT_EQ(io::hex64(io::fnv1a64(bytes)), a.at("fnv1a64").get<std::string>());
    paths.insert(a.at("path").get<std::string>());
  }
  for (const char* p : {"config.json", "model.ckpt", "report.ndjson", "report.tsv", "bundle/manifest.json",
                        "editor.kgeditor.ckpt"}) {
    EXPECT_TRUE(paths.count(p)) << p;
  }

  // report.ndjson holds one parseable record per variant.
  std::istringstream lines(slurp(dir.path() / "report.ndjson"));
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    EXPECT_EQ(metrics::parse_ndjson(line), out.reports[count]);
    ++count;
  }
  EXPECT_EQ(count, 5u);
}

TEST(Pipeline, RepeatedRunsAreByteIdentical) {
  TempDir a("harness_det_a"), b("harness_det_b");
  const auto cfg = small_config({"eval.variants=[\"KGEditor\",\"CALINET\"]"});
  cmd_edit_eval(cfg, a.path());
  cmd_edit_eval(cfg, b.path());
  for (const char* p : {"run.manifest", "report.ndjson", "report.tsv", "model.ckpt", "editor.kgeditor.ckpt"}) {
    EXPECT_EQ(slurp(a.path() / p), slurp(b.path() / p)) << p;
  }
}

TEST(Pipeline, BuildThenReuseBundleAndCheckpoint) {
  TempDir dir("harness_reuse");
  const auto cfg = small_config();
  const auto built = cmd_build(cfg, dir.path() / "build");
  ASSERT_FALSE(built.bundle.test.empty());
  const auto reuse = small_config({"bundle.dir=\"" + (dir.path() / "build" / "bundle").string() + "\"",
                                   "checkpoint=\"" + (dir.path() / "build" / "model.ckpt").string() + "\""});
  validate(reuse, Command::edit_eval);
  const auto fresh = cmd_edit_eval(cfg, dir.path() / "fresh");
  const auto reused = cmd_edit_eval(reuse, dir.path() / "reused");
  ASSERT_EQ(fresh.reports.size(), reused.reports.size());
  EXPECT_EQ(fresh.reports[0].succ_at, reused.reports[0].succ_at);
  EXPECT_EQ(fresh.reports[0].rk_at, reused.reports[0].rk_at);
}

TEST(Pipeline, SweepAndCaseProbe) {
  TempDir dir("harness_sweep");
  const auto cfg = small_config({"sweep.n=[1,2,4]", "sweep.variants=[\"KGEditor\",\"ZSL\"]"});
  const auto sweep = cmd_sweep(cfg, dir.path() / "sweep");
  ASSERT_EQ(sweep.reports.size(), 6u);
  EXPECT_EQ(sweep.reports[0].meta.n, 1u);
  EXPECT_EQ(sweep.reports[2].meta.n, 4u);
  EXPECT_EQ(sweep.reports[3].meta.variant, "ZSL");
  for (const auto& r : sweep.reports) EXPECT_EQ(r.edits % r.meta.n, 0u);

  const auto probe = cmd_case_probe(small_config({"probe.k=3"}), dir.path() / "probe");
  ASSERT_EQ(probe.rows.size(), 6u);
  EXPECT_EQ(probe.rows[0].stage, "before");
  EXPECT_EQ(probe.rows[3].stage, "after");
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(probe.rows[i].rank, i + 1);
  EXPECT_GE(probe.rows[0].probability, probe.rows[1].probability);
  EXPECT_TRUE(fs::exists(dir.path() / "probe" / "run.manifest"));
}

TEST(Cli, ExitCodes) {
  TempDir dir("harness_cli");
  std::string small;
  for (const auto& o : small_overrides()) small += " --set " + o;
  EXPECT_EQ(run_cli("edit-eval --print-effective-config"), 0);
  EXPECT_EQ(run_cli("edit-eval --set model.d_modle=3"), 2);
  EXPECT_EQ(run_cli("edit-eval --no-such-flag"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("pretrain --set data.triples=/nonexistent.tsv"), 2);
  EXPECT_EQ(run_cli("edit-eval" + small + " --set eval.n=1000 --out " + (dir.path() / "m").string()), 4);
  EXPECT_EQ(run_cli("edit-eval" + small + " --out " + (dir.path() / "ok").string()), 0);
  EXPECT_TRUE(fs::exists(dir.path() / "ok" / "run.manifest"));
  EXPECT_EQ(run_cli("synth --entities 10 --relations 2 --triples 30 --out " + (dir.path() / "g.tsv").string()), 0);
  EXPECT_EQ(kg::load_triples(dir.path() / "g.tsv").size(), 30u);
}
