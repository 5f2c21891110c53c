// Drives the lsr1 executable end to end.
#include "lsr1/checkpoint.hpp"
#include "lsr1/config.hpp"
#include "lsr1/model.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;  // stdout and stderr
};

Result run_cli(const std::string& args, const fs::path& root) {
  const std::string cmd = "LSR1_OUTPUT_ROOT='" + root.string() + "' '" + LSR1_CLI_PATH + "' " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) { return lsr1::read_file(p); }

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("lsr1_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
  }
  void TearDown() override { fs::remove_all(root_); }
  Result run(const std::string& args) const { return run_cli(args, root_); }
  fs::path root_;
};

// A small profile setup with fixed baseline rates so runs take well under a second.
const char* kSmallProfile = R"({
  "eval": {"families": ["quadratic-cond100", "rosenbrock"], "dims": [3, 4], "solvers": ["lbfgs", "adam", "sr1"],
           "tasks": {"quadratic": {"steps": 12}, "rosenbrock": {"steps": 12}}},
  "baselines": {"adam": {"lr": 0.05}}
})";

}  // namespace

TEST_F(Cli, HelpOnEverySubcommand) {
  for (const char* sub : {"", "train ", "trace ", "profile ", "inspect "}) {
    SCOPED_TRACE(sub);
    const Result r = run(std::string(sub) + "--help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("Usage"), std::string::npos);
  }
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("train --no-such-flag").code, 1);
  EXPECT_EQ(run("inspect").code, 1);
  const Result bad = run("train --preset quadratic-full --set metatrain.unrol=3");
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("metatrain.unrol"), std::string::npos);
}

TEST_F(Cli, MissingConfigFileWritesNothing) {
  const Result r = run("train --config /nonexistent/run.json");
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(root_));
}

TEST_F(Cli, TrainEchoesQuadraticFullRecipe) {
  const Result r = run(
      "train --preset quadratic-full --run-name echo --quiet --set metatrain.iterations=0 "
      "--set objectives.validation.size=1 --set objectives.test.size=1 --set objectives.test.steps=1");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("K=16 L=8 lambda_sec=100 lr=0.0001"), std::string::npos) << r.out;
  for (const char* f : {"run_meta.json", "config.json", "metatrain.csv", "test_curve.csv", "best.ckpt"}) {
    EXPECT_TRUE(fs::exists(root_ / "echo" / f)) << f;
  }
  const auto meta = lsr1::json::parse(slurp(root_ / "echo" / "run_meta.json"));
  EXPECT_EQ(meta.at("command"), "train");
  EXPECT_TRUE(meta.contains("artifact_version"));
  EXPECT_EQ(meta.at("seeds").at("train"), 1);
}

TEST_F(Cli, TrainEchoesRosenbrockProfileRecipe) {
  const Result r = run(
      "train --preset profiles-rosenbrock --run-name ros --quiet --set metatrain.iterations=0 "
      "--set objectives.validation.size=1 --set objectives.test.size=1 --set objectives.test.steps=1 "
      "--set model.hidden=4");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("K=64 L=32 lambda_sec=1 "), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("gamma1=0.1 "), std::string::npos) << r.out;
}

TEST_F(Cli, TraceOneStepHasOneDataRow) {
  const Result r = run("trace --solver adam --dim 3 --steps 1 --run-name one");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = lines(slurp(root_ / "one" / "trace.csv"));
  ASSERT_EQ(rows.size(), 3u);  // header, initial point, one step
  EXPECT_EQ(rows[0], "k,f,grad_norm,secant_residual,cosine,x0,x1,x2");
  EXPECT_EQ(rows[1].substr(0, 2), "0,");
  EXPECT_EQ(rows[2].substr(0, 2), "1,");
  EXPECT_TRUE(fs::exists(root_ / "one" / "run_meta.json"));
}

TEST_F(Cli, RosenbrockTraceFromMinusOneOne) {
  for (const char* solver : {"lbfgs", "adam", "sr1", "adahessian"}) {
    SCOPED_TRACE(solver);
    const fs::path out = root_ / (std::string(solver) + ".csv");
    const Result r =
        run("trace --solver " + std::string(solver) + " --objective rosenbrock --dim 2 --x0=-1,1 --steps 10 --output " +
            out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto rows = lines(slurp(out));
    EXPECT_EQ(rows[0], "k,f,grad_norm,secant_residual,cosine,x0,x1");
    EXPECT_EQ(rows[1], "0,4,4,,,-1,1");
  }
}

TEST_F(Cli, TraceIsDeterministic) {
  ASSERT_EQ(run("trace --solver lbfgs --dim 5 --seed 9 --steps 8 --run-name a").code, 0);
  ASSERT_EQ(run("trace --solver lbfgs --dim 5 --seed 9 --steps 8 --run-name b").code, 0);
  EXPECT_EQ(slurp(root_ / "a" / "trace.csv"), slurp(root_ / "b" / "trace.csv"));
  EXPECT_EQ(slurp(root_ / "a" / "run_meta.json"), slurp(root_ / "b" / "run_meta.json"));
}

TEST_F(Cli, TraceErrors) {
  const Result unknown = run("trace --solver newton");
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.out.find("lbfgs"), std::string::npos);
  EXPECT_NE(unknown.out.find("adahessian"), std::string::npos);
  EXPECT_EQ(run("trace --solver adam --dim 3 --x0=1,2").code, 1);
  EXPECT_EQ(run("trace").code, 1);
}

TEST_F(Cli, TraceLearnedSolverFromCheckpoint) {
  lsr1::ModelConfig mc;
  mc.hidden = 8;
  mc.normalize = false;
  fs::create_directories(root_);
  lsr1::save_checkpoint(root_ / "m.ckpt", lsr1::init_model(mc));
  const Result r = run("trace --checkpoint " + (root_ / "m.ckpt").string() + " --dim 4 --steps 3 --run-name l");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rows = lines(slurp(root_ / "l" / "trace.csv"));
  ASSERT_EQ(rows.size(), 5u);
  // Learned rows carry the secant residual and cosine columns.
  EXPECT_NE(rows[2].find(",,"), 1u);
  const auto meta = lsr1::json::parse(slurp(root_ / "l" / "run_meta.json"));
  EXPECT_FALSE(meta.at("checkpoint_fingerprint").get<std::string>().empty());
}

TEST_F(Cli, InspectDefaultModel) {
  fs::create_directories(root_);
  lsr1::save_checkpoint(root_ / "d.ckpt", lsr1::init_model(lsr1::ModelConfig{}));
  const Result r = run("inspect " + (root_ / "d.ckpt").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("format version: 1"), std::string::npos);
  EXPECT_NE(r.out.find("parameters: 252555"), std::string::npos);
  EXPECT_NE(r.out.find("fingerprint: "), std::string::npos);
  EXPECT_NE(r.out.find("vector_gen.fc2.weight"), std::string::npos);
}

TEST_F(Cli, InspectReportsCorruptSection) {
  fs::create_directories(root_);
  const std::string bytes = lsr1::serialize_checkpoint(lsr1::init_model(lsr1::ModelConfig{}));
  {
    std::ofstream out(root_ / "t.ckpt", std::ios::binary);
    out << bytes.substr(0, bytes.size() / 2);
  }
  const Result truncated = run("inspect " + (root_ / "t.ckpt").string());
  EXPECT_EQ(truncated.code, 2);
  EXPECT_NE(truncated.out.find("checkpoint data"), std::string::npos) << truncated.out;

  std::string bumped = bytes;
  bumped[lsr1::kCheckpointMagic.size()] = 9;
  {
    std::ofstream out(root_ / "v.ckpt", std::ios::binary);
    out << bumped;
  }
  const Result version = run("inspect " + (root_ / "v.ckpt").string());
  EXPECT_EQ(version.code, 2);
  EXPECT_NE(version.out.find("checkpoint header: format version 9"), std::string::npos) << version.out;
}

TEST_F(Cli, ProfileWritesArtifactsAndHonoursTauMax) {
  fs::create_directories(root_);
  {
    std::ofstream out(root_ / "p.json");
    out << kSmallProfile;
  }
  const Result r = run("profile --config " + (root_ / "p.json").string() + " --tau-max 10 --run-name p --quiet");
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path dir = root_ / "p";
  for (const char* f : {"profiles.csv", "measures.csv", "cosine_trace.csv", "summary.csv", "run_meta.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto rows = lines(slurp(dir / "profiles.csv"));
  EXPECT_EQ(rows.front(), "tau,lbfgs,adam,sr1");
  EXPECT_EQ(rows[1].substr(0, 2), "1,");
  EXPECT_EQ(rows.back().substr(0, 3), "10,");
  const auto meta = lsr1::json::parse(slurp(dir / "run_meta.json"));
  EXPECT_EQ(meta.at("config").at("eval").at("tau_max"), 10.0);
  EXPECT_EQ(meta.at("baseline_rates").at("rosenbrock").at("adam").at("tuned"), false);
  EXPECT_EQ(meta.at("baseline_rates").at("rosenbrock").at("lbfgs").at("tuned"), true);
}

TEST_F(Cli, ProfileIsReproducible) {
  fs::create_directories(root_);
  {
    std::ofstream out(root_ / "p.json");
    out << kSmallProfile;
  }
  const std::string args = "profile --quiet --config " + (root_ / "p.json").string();
  ASSERT_EQ(run(args + " --run-name a").code, 0);
  ASSERT_EQ(run(args + " --run-name b --jobs 3").code, 0);
  EXPECT_EQ(slurp(root_ / "a" / "run_meta.json"), slurp(root_ / "b" / "run_meta.json"));
  for (const char* f : {"profiles.csv", "measures.csv", "cosine_trace.csv", "summary.csv"}) {
    EXPECT_EQ(slurp(root_ / "a" / f), slurp(root_ / "b" / f)) << f;
  }
}

TEST_F(Cli, ProfileUnknownSolverListsNames) {
  const Result r = run("profile --set eval.solvers='[\"lbfgs\",\"bfgs\"]'");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("bfgs"), std::string::npos);
  EXPECT_NE(r.out.find("lsr1-noproj"), std::string::npos);
  EXPECT_FALSE(fs::exists(root_));
}

TEST_F(Cli, ProfileKeepsBestModelWhenTrainingAborts) {
  fs::create_directories(root_);
  {
    // Unnormalized features with a large step scale overflow on the first meta-step.
    std::ofstream out(root_ / "p.json");
    out << R"({
  "eval": {"families": ["rosenbrock"], "dims": [4], "solvers": ["lsr1", "adam"],
           "tasks": {"rosenbrock": {"test_buffer": 4, "steps": 8,
                     "train": {"model": {"hidden": 4, "normalize": false}, "lsr1": {"gamma1": 1.0, "buffer": 4},
                               "metatrain": {"iterations": 5, "batch": 2, "unroll": 8, "secant_weight": 1},
                               "objectives": {"train": {"kind": "rosenbrock", "dim": 4},
                                              "validation": {"kind": "rosenbrock", "dim": 4, "size": 2, "max_cond": null},
                                              "test": {"kind": "rosenbrock", "dim": 4, "size": 2, "max_cond": null}}}}}},
  "baselines": {"adam": {"lr": 0.01}}
})";
  }
  const Result r = run("profile --config " + (root_ / "p.json").string() + " --run-name p");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("training aborted"), std::string::npos) << r.out;
  const auto meta = lsr1::json::parse(slurp(root_ / "p" / "run_meta.json"));
  const auto& info = meta.at("models").at("rosenbrock").at("lsr1");
  EXPECT_NE(info.at("training_aborted").get<std::string>().find("meta-iteration 1"), std::string::npos);
  EXPECT_TRUE(fs::exists(root_ / "p" / "models" / "rosenbrock-lsr1" / "best.ckpt"));
}
