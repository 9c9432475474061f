// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Trained models, datasets and tables are left in --work-dir for inspection.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fluxfit/pipeline.hpp"
#include "oracles/coupled_oracle.hpp"
#include "oracles/grid_oracle.hpp"
#include "support/gradcheck.hpp"

using namespace fluxfit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

/// Byte content of every regular file below `dir`, keyed by relative path.
std::vector<std::pair<std::string, std::string>> tree_bytes(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.emplace_back(fs::relative(e.path(), dir).string(), slurp(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> flux_values(int n, double offset) {
  std::vector<double> v;
  for (int k = 0; k < n; ++k) v.push_back(offset + two_pi * k / n);
  return v;
}

// ---------------------------------------------------------------------------
// Desk-scale models shared by the learning criteria

struct Models {
  Dataset pure_train, pure_test, disp_train, disp_test;
  TrainedModel pretrained, fine_tuned;
  double pretrain_seconds = 0.0, finetune_seconds = 0.0;
};

Dataset make_dataset(const fs::path& manifest, std::size_t n, std::uint64_t seed, SpectrumKind kind) {
  GenerateConfig g;
  g.count = n;
  g.seed = seed;
  g.kind = kind;
  persist_dataset(generate_dataset(g), manifest, g.ranges, seed, g.grid);
  return load_dataset(manifest);
}

TrainConfig pretrain_config() {
  TrainConfig t;
  t.max_epochs = 100;
  t.patience = 20;
  return t;
}

TrainConfig finetune_config() {
  TrainConfig t;
  t.max_epochs = 200;
  t.patience = 20;
  return t;
}

class Context {
 public:
  explicit Context(fs::path work) : work_(std::move(work)) {}

  const fs::path& work() const { return work_; }

  const Models& models() {
    if (!models_) {
      Models m;
      const auto t0 = Clock::now();
      m.pure_train = make_dataset(work_ / "data/pure_train.json", 2048, 101, SpectrumKind::pure);
      m.pure_test = make_dataset(work_ / "data/pure_test.json", 128, 202, SpectrumKind::pure);
      m.disp_train = make_dataset(work_ / "data/disp_train.json", 128, 303, SpectrumKind::dispersive);
      m.disp_test = make_dataset(work_ / "data/disp_test.json", 128, 404, SpectrumKind::dispersive);
      std::cout << fmt("  datasets generated in %.1f s\n", seconds_since(t0)) << std::flush;

      auto t1 = Clock::now();
      m.pretrained = pretrain(ModelConfig{}, m.pure_train, pretrain_config());
      m.pretrain_seconds = seconds_since(t1);
      t1 = Clock::now();
      m.fine_tuned = fine_tune(m.pretrained, m.disp_train, finetune_config());
      m.finetune_seconds = seconds_since(t1);
      persist_model(m.pretrained, work_ / "pretrained.fxnn");
      persist_model(m.fine_tuned, work_ / "fine_tuned.fxnn");
      std::cout << fmt("  pretrain %d epochs in %.1f s, fine-tune %d epochs in %.1f s\n", m.pretrained.provenance.epochs,
                       m.pretrain_seconds, m.fine_tuned.provenance.epochs, m.finetune_seconds)
                << std::flush;
      models_ = std::move(m);
    }
    return *models_;
  }

 private:
  fs::path work_;
  std::optional<Models> models_;
};

AccReport held_out_accuracy(const TrainedModel& model, const Dataset& ds) {
  const auto preds = predict(model, ds.entries);
  std::vector<QubitParams> p, t;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    p.push_back(preds[i].params);
    t.push_back(ds.entries[i].params);
  }
  return accuracy(p, t, model.target_normalization);
}

// ---------------------------------------------------------------------------
// Criteria

Outcome harmonic_limit(Context&) {
  const auto t0 = Clock::now();
  auto params = sample_params(50, ParamRanges{}, 1001);
  double worst = 0.0;
  for (auto& p : params) {
    p.e_j = 0.0;
    const double omega = std::sqrt(8.0 * p.e_c * p.e_l);
    for (double phi : flux_values(16, 0.05)) {
      const auto lv = eigenenergies(p, ExternalFlux(phi), 8);
      for (std::size_t k = 0; k + 1 < lv.energies.size(); ++k)
        worst = std::max(worst, std::abs(lv.energies[k + 1] - lv.energies[k] - omega));
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-8 && t < 10.0, fmt("max |dE - sqrt(8 E_C E_L)| = %.2e GHz over 50 x 16, %.2f s", worst, t)};
}

Outcome grid_oracle(Context&) {
  const auto t0 = Clock::now();
  const auto params = sample_params(20, ParamRanges{}, 1002);
  std::mt19937_64 rng(1002);
  double worst = 0.0;
  for (const auto& p : params) {
    const double phi = two_pi * uniform01(rng);
    const auto lv = eigenenergies(p, ExternalFlux(phi), 8);
    const auto ref = oracle::solve_on_grid(p.e_c, p.e_l, p.e_j, phi, 8);
    for (int k = 0; k < 8; ++k) worst = std::max(worst, std::abs(lv.energies[k] - ref.energies[k]));
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-6 && t < 120.0, fmt("max level deviation %.2e GHz over 20 triples, %.1f s", worst, t)};
}

Outcome symmetry(Context&) {
  const auto params = sample_params(20, ParamRanges{}, 1003);
  double inversion = 0.0, period = 0.0;
  for (const auto& p : params) {
    for (double phi : flux_values(32, 0.01)) {
      const double d = phi - std::numbers::pi;
      const auto a = eigenenergies(p, ExternalFlux(std::numbers::pi + d)).energies;
      const auto b = eigenenergies(p, ExternalFlux(std::numbers::pi - d)).energies;
      const auto c = eigenenergies(p, ExternalFlux(phi + two_pi)).energies;
      const auto e = eigenenergies(p, ExternalFlux(phi)).energies;
      for (std::size_t k = 0; k < a.size(); ++k) {
        inversion = std::max(inversion, std::abs(a[k] - b[k]));
        period = std::max(period, std::abs(c[k] - e[k]));
      }
    }
  }
  return {inversion <= 1e-9 && period <= 1e-9,
          fmt("max inversion deviation %.2e GHz, max 2pi-shift deviation %.2e GHz", inversion, period)};
}

/// Largest g/|detuning| over the transitions out of states 0 and 1 that carry charge matrix weight.
double coupling_ratio(const QubitParams& p, double phi, const ReadoutConfig& r) {
  const int m = r.n_perturb_states;
  const auto lv = eigenenergies(p, ExternalFlux(phi), m, auto_basis_dim(p, m));
  const auto n = charge_matrix_elements(p, ExternalFlux(phi), m);
  double worst = 0.0;
  for (int s = 0; s < 2; ++s)
    for (int sp = 0; sp < m; ++sp) {
      if (sp == s || std::abs(n(sp, s)) < 1e-3) continue;
      const double detuning = std::abs(std::abs(lv.energies[sp] - lv.energies[s]) - r.f_resonator);
      worst = std::max(worst, r.coupling_g / detuning);
    }
  return worst;
}

Outcome dispersive_oracle(Context&) {
  const ReadoutConfig r;
  const auto candidates = sample_params(200, ParamRanges{}, 1004);
  std::mt19937_64 rng(1004);
  int used = 0;
  double worst = 0.0, worst_ratio = 0.0;
  bool zero_exact = true;
  for (const auto& p : candidates) {
    if (used == 5) break;
    const double phi = two_pi * uniform01(rng);
    const double ratio = coupling_ratio(p, phi, r);
    if (ratio >= 0.1) continue;
    ++used;
    worst_ratio = std::max(worst_ratio, ratio);
    ReadoutConfig off = r;
    off.coupling_g = 0.0;
    for (int s = 0; s < 2; ++s) {
      const double chi = dispersive_pull(p, ExternalFlux(phi), s, r);
      const double ref = oracle::coupled_pull(p, phi, s, r.f_resonator, r.coupling_g);
      worst = std::max(worst, std::abs(chi - ref) / std::abs(ref));
      zero_exact = zero_exact && dispersive_pull(p, ExternalFlux(phi), s, off) == 0.0;
    }
  }
  return {used == 5 && worst <= 0.05 && zero_exact,
          fmt("%d triples (max g/|detuning| %.3f), max relative chi deviation %.2f%%, g = 0 exact: %s", used,
              worst_ratio, 100.0 * worst, zero_exact ? "yes" : "no")};
}

Outcome regressor_accuracy(Context& ctx) {
  const auto& m = ctx.models();
  const auto pure = held_out_accuracy(m.pretrained, m.pure_test);
  const auto disp_pre = held_out_accuracy(m.pretrained, m.disp_test);
  const auto disp = held_out_accuracy(m.fine_tuned, m.disp_test);
  const double loss_pre = evaluate_loss(m.pretrained, m.disp_test.entries);
  const double loss_ft = evaluate_loss(m.fine_tuned, m.disp_test.entries);
  const bool pass = pure.mean_acc >= 0.85 && disp.mean_acc >= 0.85 && loss_ft < loss_pre;
  return {pass, fmt("held-out mean accuracy: pure %.4f (E_C %.3f, E_L %.3f, E_J %.3f), dispersive after fine-tune "
                    "%.4f (before %.4f); dispersive loss %.5f -> %.5f",
                    pure.mean_acc, pure.acc_e_c, pure.acc_e_l, pure.acc_e_j, disp.mean_acc, disp_pre.mean_acc,
                    loss_pre, loss_ft)};
}

Outcome gradient_check(Context&) {
  const auto r = fluxfit::testing::gradient_check(ModelConfig{}, 3, 1006);
  const bool conv = std::find(r.kinds.begin(), r.kinds.end(), nn::LayerKind::conv) != r.kinds.end();
  const bool dense = std::find(r.kinds.begin(), r.kinds.end(), nn::LayerKind::dense) != r.kinds.end();
  return {r.max_rel_error <= 1e-3 && conv && dense,
          fmt("max relative error %.2e over %zu parameters (conv %s, dense %s)", r.max_rel_error, r.n_checked,
              conv ? "yes" : "no", dense ? "yes" : "no")};
}

Outcome freeze(Context& ctx) {
  const auto& m = ctx.models();
  const bool backbone = backbone_bytes(m.pretrained) == backbone_bytes(m.fine_tuned);
  const bool head_moved = encode_model(m.pretrained) != encode_model(m.fine_tuned);
  TrainConfig zero = finetune_config();
  zero.max_epochs = 0;
  const bool identity = encode_model(fine_tune(m.pretrained, m.disp_train, zero)) == encode_model(m.pretrained);
  return {backbone && head_moved && identity,
          fmt("backbone bytes identical: %s, head updated: %s, zero-epoch identity: %s", backbone ? "yes" : "no",
              head_moved ? "yes" : "no", identity ? "yes" : "no")};
}

Outcome comparison(Context& ctx) {
  const auto& m = ctx.models();
  const auto t0 = Clock::now();
  ComparisonConfig cfg;
  cfg.n_random = 64;
  cfg.seed = 7;
  const auto table = compare_random_vs_ml(comparison_cases(10, ParamRanges{}, cfg.seed), cfg, m.fine_tuned);
  const double t = seconds_since(t0);
  std::ofstream(ctx.work() / "comparison.tsv") << [&] {
    std::ostringstream os;
    write_comparison(os, table);
    return os.str();
  }();
  const bool pass =
      table.ml.error_avg <= 0.5 * table.random.error_avg && table.ml.cost_avg <= 0.5 * table.random.cost_avg && t < 900.0;
  return {pass, fmt("AVG Error ML %.4f vs random %.4f, AVG Cost ML %.4f vs random %.4f GHz^2, %.0f s",
                    table.ml.error_avg, table.random.error_avg, table.ml.cost_avg, table.random.cost_avg, t)};
}

Outcome cost_rms(Context&) {
  const QubitParams p{1.0, 1.0, 4.0};
  auto shifted = pure_spectrum(p);
  const double offset = std::sqrt(0.001);
  for (auto& pt : shifted.points) pt.frequency += offset;
  const double cost = cost_metric(p, shifted);
  const double rms_mhz = 1000.0 * std::sqrt(cost);
  const bool pass = std::abs(cost - 0.001) <= 1e-12 && std::abs(rms_mhz - 31.62) < 0.01 && std::lround(rms_mhz) == 32;
  return {pass, fmt("Cost %.9f GHz^2 from a %.2f MHz offset, RMS %.2f MHz (rounds to %ld)", cost, 1000.0 * offset,
                    rms_mhz, std::lround(rms_mhz))};
}

Outcome round_trip(Context& ctx) {
  const auto& m = ctx.models();
  const auto t0 = Clock::now();
  const auto cases = sample_params(20, ParamRanges{}, 1010);
  PipelineConfig cfg;
  int ok = 0;
  std::ostringstream log;
  log << "case\te_c\te_l\te_j\tfit_e_c\tfit_e_l\tfit_e_j\tworst_rel\tstarts\n";
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& truth = cases[i];
    NoiseConfig noise;
    noise.jitter = 0.010;
    noise.spurious_fraction = 0.05;
    noise.seed = 2000 + i;
    const auto points = add_measurement_noise(dispersive_spectrum(truth), noise);
    double worst = 1.0;
    int starts = 0;
    QubitParams got{};
    try {
      const auto rep = characterize_points(points, m.fine_tuned, cfg).report;
      got = rep.fit.params;
      starts = rep.n_starts;
      worst = 0.0;
      for (int a = 0; a < 3; ++a)
        worst = std::max(worst, std::abs(component(got, a) - component(truth, a)) / component(truth, a));
    } catch (const PipelineError& e) {
      std::cout << "  case " << i << ": " << e.what() << "\n";
    }
    ok += worst < 0.05 ? 1 : 0;
    log << i << '\t' << truth.e_c << '\t' << truth.e_l << '\t' << truth.e_j << '\t' << got.e_c << '\t' << got.e_l
        << '\t' << got.e_j << '\t' << worst << '\t' << starts << '\n';
  }
  std::ofstream(ctx.work() / "round_trip.tsv") << log.str();
  return {ok >= 18, fmt("%d of 20 cases within 5%% on every parameter, %.0f s", ok, seconds_since(t0))};
}

/// Smallest distance from a spectrum point to any other transition of its
/// triple at the same flux, over every transition the labeler considers.
double min_transition_gap(const QubitParams& p, const SpectrumPointSet& s, const std::vector<Transition>& transitions) {
  LevelCache levels(p, levels_needed(transitions));
  double gap = std::numeric_limits<double>::infinity();
  for (const auto& pt : s.points) {
    const auto& e = levels.at(pt.phi_ext);
    for (const auto& t : transitions)
      if (t != *pt.label) gap = std::min(gap, std::abs(pt.frequency - (e[t.upper] - e[t.lower])));
  }
  return gap;
}

struct LabelTally {
  int triples = 0;
  std::size_t points = 0, wrong = 0, outliers = 0;
};

/// Labels truth-initialized noiseless spectra of qualifying triples and
/// counts disagreements with the simulated labels.
LabelTally label_qualifying(const std::vector<QubitParams>& candidates, const std::vector<Transition>& transitions,
                            int max_triples) {
  SimConfig sim;
  sim.transitions = transitions;
  LabelConfig lc;
  lc.transitions = transitions;
  LabelTally tally;
  for (const auto& p : candidates) {
    if (tally.triples == max_triples) break;
    const auto s = pure_spectrum(p, sim);
    if (s.empty() || min_transition_gap(p, s, transitions) <= 0.6) continue;
    ++tally.triples;
    const auto r = label_points(s, p, lc);
    tally.outliers += r.outliers.size();
    tally.points += s.size();
    std::multiset<std::tuple<double, double, int, int>> expected, got;
    for (const auto& pt : s.points) expected.emplace(pt.phi_ext, pt.frequency, pt.label->lower, pt.label->upper);
    for (const auto& pt : r.labeled.points) got.emplace(pt.phi_ext, pt.frequency, pt.label->lower, pt.label->upper);
    std::vector<std::tuple<double, double, int, int>> diff;
    std::set_symmetric_difference(expected.begin(), expected.end(), got.begin(), got.end(), std::back_inserter(diff));
    tally.wrong += diff.size();
  }
  return tally;
}

Outcome labeler_exactness(Context&) {
  const auto candidates = sample_params(1000, ParamRanges{}, 1011);
  const auto full = label_qualifying(candidates, default_transitions(), 1000);
  const auto three = label_qualifying(candidates, {{0, 1}, {0, 2}, {1, 2}}, 10);
  const bool pass = full.triples >= 1 && three.triples == 10 && full.wrong + three.wrong == 0 &&
                    full.outliers + three.outliers == 0;
  return {pass, fmt("default transitions: %d triples, %zu points, %zu mislabeled, %zu outliers; "
                    "{0-1, 0-2, 1-2}: %d triples, %zu points, %zu mislabeled, %zu outliers",
                    full.triples, full.points, full.wrong, full.outliers, three.triples, three.points, three.wrong,
                    three.outliers)};
}

Outcome determinism(Context& ctx) {
  const auto root = ctx.work() / "determinism";
  fs::remove_all(root);
  bool sampling = true, training = true, comparing = true, pipeline = true;

  for (const char* run : {"a", "b"}) {
    GenerateConfig g;
    g.count = 24;
    g.seed = 12;
    g.kind = SpectrumKind::dispersive;
    persist_dataset(generate_dataset(g), root / run / "data.json", g.ranges, g.seed, g.grid);
  }
  sampling = tree_bytes(root / "a") == tree_bytes(root / "b");

  const auto ds = load_dataset(root / "a/data.json");
  TrainConfig t;
  t.max_epochs = 3;
  t.batch_size = 8;
  t.seed = 12;
  std::string model_bytes[2];
  for (int k = 0; k < 2; ++k) {
    auto pre = pretrain(ModelConfig{}, ds, t);
    model_bytes[k] = encode_model(fine_tune(pre, ds, t));
  }
  training = model_bytes[0] == model_bytes[1];

  const auto model = decode_model(model_bytes[0]);
  std::string tables[2];
  for (auto& out : tables) {
    ComparisonConfig cfg;
    cfg.n_random = 4;
    cfg.seed = 12;
    std::ostringstream os;
    write_comparison(os, compare_random_vs_ml(comparison_cases(2, ParamRanges{}, cfg.seed), cfg, model));
    out = os.str();
  }
  comparing = tables[0] == tables[1];

  std::string reports[2];
  PipelineConfig cfg;
  cfg.restarts.grid_step = 0.5;
  cfg.restarts.accept_fraction = 1.0;
  for (auto& out : reports) {
    NoiseConfig noise;
    noise.seed = 12;
    const auto points = add_measurement_noise(dispersive_spectrum({1.2, 0.8, 5.0}), noise);
    out = to_json(characterize_points(points, model, cfg).report).dump();
  }
  pipeline = reports[0] == reports[1];

  return {sampling && training && comparing && pipeline,
          fmt("identical bytes: sampling %s, training %s, comparison %s, noise + pipeline %s", sampling ? "yes" : "no",
              training ? "yes" : "no", comparing ? "yes" : "no", pipeline ? "yes" : "no")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fluxfit acceptance run"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work-dir", work, "Directory for datasets, models and tables")->capture_default_str();
  app.add_option("--only", only, "Run only these criterion numbers");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "harmonic limit", harmonic_limit},
      {2, "grid oracle", grid_oracle},
      {3, "flux symmetry and periodicity", symmetry},
      {4, "dispersive oracle", dispersive_oracle},
      {5, "regressor accuracy", regressor_accuracy},
      {6, "gradient check", gradient_check},
      {7, "fine-tune freeze", freeze},
      {8, "random vs learned initialization", comparison},
      {9, "cost and RMS", cost_rms},
      {10, "round-trip recovery", round_trip},
      {11, "labeler exactness", labeler_exactness},
      {12, "determinism", determinism},
  };

  fs::create_directories(work);
  Context ctx(work);
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    ++ran;
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << fmt(" %2d %-34s ", c.id, c.name) << o.detail
              << fmt(" [%.1f s]", seconds_since(t0)) << std::endl;
  }
  std::cout << (ran - failed) << " of " << ran << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
