#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Small enough that every subcommand finishes in about a second.
const std::string kTiny =
    " --override dataset.classes=4 --override dataset.per_class=24 --override dataset.val_count=16"
    " --override dataset.height=8 --override dataset.width=8 --override model.arch=cnn:4";

std::string config(const std::string& name) { return std::string(CONFIG_DIR) + "/" + name; }

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("batchaug_cli_" + name);
  fs::remove_all(d);
  return d;
}

int run(const std::string& args) {
  const std::string cmd = std::string(BATCHAUG_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int run(const std::string& command, const std::string& cfg, const fs::path& out, const std::string& extra = {}) {
  return run(command + " --config " + config(cfg) + " --out " + out.string() + extra);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::size_t line_count(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST(Cli, UsageErrorsAreConfigErrors) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("train"), 2);
  EXPECT_EQ(run("fly --config x --out y"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, BadConfigInputsExitTwo) {
  const auto out = fresh_dir("bad");
  EXPECT_EQ(run("train", "does_not_exist.ini", out), 2);
  EXPECT_EQ(run("train", "train_ba.ini", out, " --override train.nope=1"), 2);
  EXPECT_EQ(run("train", "train_ba.ini", out, " --override train.replicas"), 2);
  EXPECT_EQ(run("train", "train_ba.ini", out, " --override train.base_lr=-3"), 2);
  EXPECT_EQ(run("distsim", "distsim_invalid_m3.ini", out), 2);
  EXPECT_EQ(read_json(out / "manifest.json")["exit_code"], 2);
}

TEST(Cli, IdxSourceWithMissingFilesExitsTwo) {
  const auto out = fresh_dir("idx");
  EXPECT_EQ(run("train", "train_ba.ini", out,
                " --override dataset.source=idx --override dataset.train_images=/nonexistent/a.idx3"
                " --override dataset.train_labels=/nonexistent/b.idx1"),
            2);
}

TEST(Cli, TrainWritesOneRowPerEpochAndManifest) {
  const auto out = fresh_dir("train");
  ASSERT_EQ(run("train", "train_ba.ini", out, kTiny + " --override train.epochs=2 --override train.milestones=1"), 0);
  const auto csv = slurp(out / "train.csv");
  EXPECT_EQ(csv.rfind("epoch,step,lr,train_loss,train_err,val_err,grad_norm\n", 0), 0u);
  EXPECT_EQ(line_count(csv), 1u + 3u);  // header, initial evaluation, two epochs
  const auto m = read_json(out / "manifest.json");
  std::vector<std::string> keys;
  for (const auto& [k, v] : m.items()) keys.push_back(k);
  ASSERT_GE(keys.size(), 6u);
  EXPECT_EQ(std::vector<std::string>(keys.begin(), keys.begin() + 6),
            (std::vector<std::string>{"tool", "version", "revision", "command", "seed", "config"}));
  EXPECT_EQ(m["exit_code"], 0);
  EXPECT_EQ(m["effective"]["replicas"], 4);
  EXPECT_TRUE(m.contains("seeds"));
  EXPECT_EQ(m["outputs"], json::array({"train.csv"}));
}

TEST(Cli, IdenticalConfigGivesIdenticalBytes) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  const std::string extra = kTiny + " --override train.epochs=1 --override train.milestones= --seed 5";
  ASSERT_EQ(run("train", "train_ba.ini", a, extra), 0);
  ASSERT_EQ(run("train", "train_ba.ini", b, extra), 0);
  EXPECT_EQ(slurp(a / "train.csv"), slurp(b / "train.csv"));
  EXPECT_EQ(read_json(a / "manifest.json")["params_checksum"], read_json(b / "manifest.json")["params_checksum"]);
  const auto c = fresh_dir("det_c");
  ASSERT_EQ(run("train", "train_ba.ini", c, kTiny + " --override train.epochs=1 --override train.milestones= --seed 6"), 0);
  EXPECT_NE(slurp(a / "train.csv"), slurp(c / "train.csv"));
}

TEST(Cli, ThreadCapDoesNotChangeResults) {
  const auto a = fresh_dir("thr_a"), b = fresh_dir("thr_b");
  const std::string args = "train --config " + config("train_ba.ini") + kTiny +
                           " --override train.epochs=1 --override train.milestones= --out ";
  ASSERT_EQ(run(args + a.string()), 0);
  ASSERT_EQ(std::system(("BATCHAUG_THREADS=1 " + std::string(BATCHAUG_CLI) + " " + args + b.string() +
                         " >/dev/null 2>&1").c_str()),
            0);
  EXPECT_EQ(slurp(a / "train.csv"), slurp(b / "train.csv"));
}

TEST(Cli, RegimeAdaptationManifestScalesBatchAndEpochs) {
  const auto out = fresh_dir("ra");
  ASSERT_EQ(run("train", "train_ra.ini", out, kTiny + " --override B=8 --override train.ghost_size=8"), 0);
  const auto m = read_json(out / "manifest.json");
  EXPECT_EQ(m["effective"]["mode"], "ra");
  EXPECT_EQ(m["effective"]["batch_size"], 32);
  EXPECT_EQ(m["effective"]["replicas"], 1);
  EXPECT_EQ(m["effective"]["epochs"], 8.0);
}

TEST(Cli, DivergenceExitsThree) {
  const auto out = fresh_dir("diverge");
  EXPECT_EQ(run("train", "train_baseline.ini", out,
                kTiny + " --override model.batchnorm=false --override train.base_lr=1e6 --override train.momentum=0"),
            3);
}

TEST(Cli, DynamicsSweepHasNoSufficiencyViolations) {
  const auto out = fresh_dir("dyn");
  ASSERT_EQ(run("dynamics", "dynamics.ini", out,
                " --override dynamics.problems=4 --override dynamics.tight_problems=2 --override dynamics.max_steps=20000"),
            0);
  const auto v = read_json(out / "verdicts.json");
  EXPECT_EQ(v["summary"]["sufficiency_violations"], 0);
  EXPECT_EQ(v["points"].size(), 4u * 7);
  for (const auto& p : v["points"]) {
    for (const char* k : {"eta", "lambda_max", "predicted", "observed"}) EXPECT_TRUE(p.contains(k));
    if (p["predicted"] == "stable") {
      EXPECT_LT(p["eta"].get<double>() * p["lambda_max"].get<double>(), 2.0);
      EXPECT_EQ(p["observed"], "converged");
    }
  }
  EXPECT_LE(v["summary"]["max_boundary_relative_error"].get<double>(), 5e-3);
  EXPECT_EQ(slurp(out / "trajectories.csv").rfind("trial,", 0), 0u);
}

TEST(Cli, CorrelateIdentityReportsPerfectAugmentedCorrelation) {
  const auto out = fresh_dir("corr");
  ASSERT_EQ(run("correlate", "correlate.ini", out,
                kTiny + " --override augment.transform=identity --override diagnostics.states=init"
                        " --override diagnostics.pairs=6 --override diagnostics.grad_norm_repeats=1"
                        " --override diagnostics.grad_norm_batch=4 --override diagnostics.assumption_samples=4"),
            0);
  const auto s = read_json(out / "summary.json");
  EXPECT_EQ(s["init"]["augmented"]["median"], 1.0);
  for (const char* k : {"augmented", "same_class", "cross_class"}) EXPECT_TRUE(s["init"].contains(k));
  EXPECT_TRUE(fs::exists(out / "correlation_init.csv"));
  EXPECT_TRUE(fs::exists(out / "grad_norm_init.csv"));
}

TEST(Cli, CorrelateCheckpointStateNeedsCheckpoint) {
  const auto out = fresh_dir("corr_ckpt");
  EXPECT_EQ(run("correlate", "correlate.ini", out, kTiny + " --override diagnostics.states=checkpoint"), 2);
}

TEST(Cli, CorrelateLoadsSavedCheckpoint) {
  const auto tr = fresh_dir("ckpt_train"), out = fresh_dir("ckpt_corr");
  ASSERT_EQ(run("train", "train_ba.ini", tr,
                kTiny + " --override train.epochs=1 --override train.milestones= --override model.save=true"),
            0);
  ASSERT_TRUE(fs::exists(tr / "checkpoint.bin"));
  EXPECT_EQ(run("correlate", "correlate.ini", out,
                kTiny + " --override diagnostics.states=checkpoint --override model.checkpoint=" +
                    (tr / "checkpoint.bin").string() +
                    " --override diagnostics.pairs=4 --override diagnostics.grad_norm_repeats=1"
                    " --override diagnostics.grad_norm_batch=4 --override diagnostics.assumption_samples=4"),
            0);
}

TEST(Cli, ThroughputSingleRepeatIsWellFormed) {
  const auto out = fresh_dir("tp");
  ASSERT_EQ(run("throughput", "throughput.ini", out,
                kTiny + " --override throughput.repeats=1 --override throughput.max_batch=8"),
            0);
  std::istringstream csv(slurp(out / "throughput.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "batch,med_imgs_per_sec,std");
  std::vector<std::size_t> batches;
  while (std::getline(csv, line)) {
    std::size_t b;
    double med, sd;
    ASSERT_EQ(std::sscanf(line.c_str(), "%zu,%lf,%lf", &b, &med, &sd), 3) << line;
    EXPECT_GT(med, 0.0);
    EXPECT_GE(sd, 0.0);
    batches.push_back(b);
  }
  EXPECT_EQ(batches, (std::vector<std::size_t>{1, 2, 4, 8}));
}

TEST(Cli, DistsimDefaultIsBitExactAndReproducible) {
  const auto a = fresh_dir("ds_a"), b = fresh_dir("ds_b");
  const std::string extra = kTiny + " --override distsim.steps=6 --override distsim.local_batch=4";
  ASSERT_EQ(run("distsim", "distsim.ini", a, extra), 0);
  ASSERT_EQ(run("distsim", "distsim.ini", b, extra), 0);
  const auto s = read_json(a / "summary.json");
  EXPECT_EQ(s["verdict"], "bit-exact");
  EXPECT_EQ(s["effective_batch"], 2 * 4 * 4);
  EXPECT_EQ(s["io"]["unique_loads"].get<std::size_t>() * 4, s["io"]["total_loads"].get<std::size_t>());
  EXPECT_EQ(slurp(a / "summary.json"), slurp(b / "summary.json"));
  EXPECT_EQ(slurp(a / "distsim.csv"), slurp(b / "distsim.csv"));
  EXPECT_TRUE(read_json(a / "manifest.json").contains("timing"));
}
