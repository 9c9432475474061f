#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "fluxfit/spectrum.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

/// Runs the CLI through the shell with stderr folded into the captured output.
Run run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + FLUXFIT_CLI_PATH + std::string(" ") + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "fluxfit_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "tiny.json") << R"({
      "model": {"conv_channels": [4, 8], "head_widths": [16], "input_pool": 2, "seed": 5},
      "train": {"max_epochs": 2, "batch_size": 4}
    })";
    return d;
  }();
  return dir;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), {}};
}

/// Tiny dataset and model shared by the model-driven commands.
const fs::path& tiny_model() {
  static const fs::path model = [] {
    const auto d = work();
    auto r = run_cli("--config " + q(d / "tiny.json") + " gen-data --count 8 --flux-bins 32 --freq-bins 32 --seed 2 --out " +
                     q(d / "data/manifest.json"));
    EXPECT_EQ(r.code, 0) << r.out;
    r = run_cli("--config " + q(d / "tiny.json") + " train --data " + q(d / "data/manifest.json") + " --out " +
                q(d / "tiny.fxnn"));
    EXPECT_EQ(r.code, 0) << r.out;
    return d / "tiny.fxnn";
  }();
  return model;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("simulate --ec 1 --el 1").code, 2);
  EXPECT_EQ(run_cli("simulate --ec one --el 1 --ej 4 --out x.csv").code, 2);
  EXPECT_EQ(run_cli("--help").code, 0);
  const auto v = run_cli("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find("0.3.0"), std::string::npos);
}

TEST(Cli, SimulateWritesPointSet) {
  const auto out = work() / "sim.csv";
  const auto r = run_cli("simulate --ec 1 --el 1 --ej 4 --out " + q(out));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto pts = fluxfit::read_points(out.string());
  EXPECT_EQ(pts.points, fluxfit::pure_spectrum({1.0, 1.0, 4.0}).points);
  EXPECT_NE(r.out.find(std::to_string(pts.size()) + " points"), std::string::npos);

  const auto noisy = work() / "noisy.csv";
  ASSERT_EQ(run_cli("simulate --ec 1 --el 1 --ej 4 --jitter 0.01 --noise-seed 4 --out " + q(noisy)).code, 0);
  EXPECT_FALSE(fluxfit::read_points(noisy.string()).all_labeled());
}

TEST(Cli, InvalidParameterExitSeven) {
  const auto r = run_cli("simulate --ec -1 --el 1 --ej 4 --out " + q(work() / "bad.csv"));
  EXPECT_EQ(r.code, 7);
  EXPECT_NE(r.out.find("E_C"), std::string::npos);
}

TEST(Cli, LabelThenFit) {
  const auto d = work();
  ASSERT_EQ(run_cli("simulate --ec 1.5 --el 0.7 --ej 6.5 --jitter 0.002 --spurious 0 --out " + q(d / "m.csv")).code, 0);

  const auto unlabeled = run_cli("fit --points " + q(d / "m.csv") + " --ec 1.4 --el 0.75 --ej 6.2");
  EXPECT_EQ(unlabeled.code, 9);
  EXPECT_NE(unlabeled.out.find("fluxfit label"), std::string::npos);

  const auto lab = run_cli("label --points " + q(d / "m.csv") + " --ec 1.4 --el 0.75 --ej 6.2 --out " +
                           q(d / "lab.csv") + " --outliers " + q(d / "out.csv"));
  ASSERT_EQ(lab.code, 0) << lab.out;
  EXPECT_NE(lab.out.find("labeled"), std::string::npos);

  const auto fit = run_cli("fit --points " + q(d / "lab.csv") + " --ec 1.4 --el 0.75 --ej 6.2 --out " + q(d / "fit.json"));
  ASSERT_EQ(fit.code, 0) << fit.out;
  const auto j = nlohmann::json::parse(slurp(d / "fit.json"));
  EXPECT_NEAR(j.at("fit").at("params").at("e_c").get<double>(), 1.5, 0.1);

  // A fit report works as the guess of a second labeling pass.
  ASSERT_EQ(run_cli("label --points " + q(d / "m.csv") + " --guess " + q(d / "fit.json") + " --out " + q(d / "lab2.csv"))
                .code,
            0);
  const auto refit = run_cli("fit --points " + q(d / "lab2.csv") + " --guess " + q(d / "fit.json"));
  ASSERT_EQ(refit.code, 0) << refit.out;
  const auto j2 = nlohmann::json::parse(refit.out);
  EXPECT_NEAR(j2.at("fit").at("params").at("e_c").get<double>(), 1.5, 0.01);
  EXPECT_NEAR(j2.at("fit").at("params").at("e_l").get<double>(), 0.7, 0.01);
  EXPECT_NEAR(j2.at("fit").at("params").at("e_j").get<double>(), 6.5, 0.05);
  EXPECT_EQ(run_cli("label --points " + q(d / "m.csv") + " --ec 1.4 --out " + q(d / "lab3.csv")).code, 3);
}

TEST(Cli, ConfigPrecedence) {
  const auto d = work();
  ASSERT_EQ(run_cli("simulate --ec 1.5 --el 0.7 --ej 6.5 --out " + q(d / "ref.csv")).code, 0);
  fs::create_directories(d / "cfgdir");
  std::ofstream(d / "cfgdir/fluxfit.json") << R"({"fit": {"max_iterations": 1}})";
  std::ofstream(d / "three.json") << R"({"fit": {"max_iterations": 3}})";
  const std::string env = "FLUXFIT_CONFIG_DIR=" + q(d / "cfgdir");
  const std::string base = "fit --points " + q(d / "ref.csv") + " --ec 0.8 --el 1.6 --ej 3.0";
  auto iterations = [&](const std::string& args) {
    const auto r = run_cli(args, env);
    EXPECT_EQ(r.code, 0) << r.out;
    return nlohmann::json::parse(r.out).at("fit").at("n_iterations").get<int>();
  };
  EXPECT_EQ(iterations(base), 1);
  EXPECT_EQ(iterations("--config " + q(d / "three.json") + " " + base), 3);
  EXPECT_EQ(iterations("--config " + q(d / "three.json") + " " + base + " --iters 2"), 2);

  std::ofstream(d / "broken.json") << "{";
  EXPECT_EQ(run_cli("--config " + q(d / "broken.json") + " " + base).code, 3);
  EXPECT_EQ(run_cli("--config " + q(d / "nothere.json") + " " + base).code, 4);
}

TEST(Cli, IoAndSchemaErrors) {
  const auto d = work();
  EXPECT_EQ(run_cli("label --points " + q(d / "none.csv") + " --ec 1 --el 1 --ej 4 --out " + q(d / "x.csv")).code, 4);
  std::ofstream(d / "junk.fxnn") << "junk";
  EXPECT_EQ(run_cli("predict --model " + q(d / "junk.fxnn") + " --points " + q(d / "sim.csv")).code, 5);
  EXPECT_EQ(run_cli("report --map " + q(d / "none.csv") + " --model " + q(d / "junk.fxnn") +
                    " --bias-zero 0 --bias-pi 1 --out-dir " + q(d / "rep"))
                .code,
            4);
}

TEST(Cli, TrainPredictAndFinetune) {
  const auto& model = tiny_model();
  const auto d = work();
  const auto p = run_cli("predict --model " + q(model) + " --data " + q(d / "data/manifest.json"));
  ASSERT_EQ(p.code, 0) << p.out;
  const auto j = nlohmann::json::parse(p.out);
  EXPECT_EQ(j.at("accuracy").at("n_test"), 8);
  EXPECT_EQ(j.at("predictions").size(), 8u);

  ASSERT_EQ(run_cli("simulate --ec 1 --el 1 --ej 4 --out " + q(d / "s.csv")).code, 0);
  const auto one = run_cli("predict --model " + q(model) + " --points " + q(d / "s.csv"));
  ASSERT_EQ(one.code, 0) << one.out;
  EXPECT_TRUE(nlohmann::json::parse(one.out).contains("params"));
  EXPECT_EQ(run_cli("predict --model " + q(model)).code, 3);

  const auto ft = run_cli("--config " + q(d / "tiny.json") + " finetune --model " + q(model) + " --data " +
                          q(d / "data/manifest.json") + " --out " + q(d / "ft.fxnn"));
  ASSERT_EQ(ft.code, 0) << ft.out;
  EXPECT_NE(ft.out.find("fine_tuned"), std::string::npos);
}

TEST(Cli, CompareIsDeterministic) {
  const auto& model = tiny_model();
  const std::string args = "compare --model " + q(model) + " --cases 2 --random-inits 2 --iters 1 --seed 5";
  const auto a = run_cli(args), b = run_cli(args);
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("arm\terror_avg"), std::string::npos);
  EXPECT_NE(run_cli("compare --model " + q(model) + " --cases 2 --random-inits 2 --iters 1 --seed 6").out, a.out);
}

TEST(Cli, ScanWritesTableAndImages) {
  const auto d = work();
  const auto r = run_cli("scan --ec 1.5 --el 0.7 --ej 6.5 --x-grid 0.6:0.8:2 --y-grid 6:7:2 --fixed 1.5 --iters 1 --out " +
                         q(d / "scan.tsv") + " --png-error " + q(d / "err.png") + " --png-cost " + q(d / "cost.png"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(d / "err.png"));
  EXPECT_TRUE(fs::exists(d / "cost.png"));
  const auto text = slurp(d / "scan.tsv");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3 + 4);
  EXPECT_EQ(run_cli("scan --ec 1.5 --el 0.7 --ej 6.5 --x-grid 0.6:0.8").code, 3);
}
