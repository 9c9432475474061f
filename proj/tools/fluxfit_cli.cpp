// fluxfit: command-line front end. Each subcommand parses flags, calls one
// library operation and writes its artifact.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fluxfit/pipeline.hpp"
#include "fluxfit/plot.hpp"

namespace fs = std::filesystem;
using namespace fluxfit;

namespace {

template <typename T>
void set_if(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path, std::ios::binary);
  if (!file) throw IoError("cannot open " + path + " for writing");
  return file;
}

QubitParams params_of(const std::vector<double>& v, const std::string& what) {
  if (v.size() != 3) throw ConfigError(what + " needs three values: e_c e_l e_j");
  QubitParams p{v[0], v[1], v[2]};
  validate(p);
  return p;
}

/// Triple from --ec/--el/--ej, or from the "params", "initial_guess" or
/// top-level keys of a JSON file.
QubitParams resolve_params(const std::optional<double>& ec, const std::optional<double>& el,
                           const std::optional<double>& ej, const std::string& json_path, const std::string& what) {
  if (!json_path.empty()) {
    const auto j = read_json_file(json_path);
    try {
      if (j.contains("fit")) return params_from_json(j.at("fit").at("params"));
      if (j.contains("params")) return params_from_json(j.at("params"));
      if (j.contains("initial_guess")) return params_from_json(j.at("initial_guess"));
      return params_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(json_path + ": no parameter triple (" + e.what() + ")");
    }
  }
  if (!ec || !el || !ej) throw ConfigError(what + " needs --ec, --el and --ej (or a JSON file)");
  QubitParams p{*ec, *el, *ej};
  validate(p);
  return p;
}

SpectrumKind parse_kind(const std::string& s) {
  if (s == "pure") return SpectrumKind::pure;
  if (s == "dispersive") return SpectrumKind::dispersive;
  throw ConfigError("unknown spectrum kind '" + s + "' (expected pure or dispersive)");
}

IndexRect parse_rect(const std::string& s) {
  const auto f = split_fields(s, ':');
  if (f.size() != 4) throw ConfigError("background region '" + s + "' must look like row0:row1:col0:col1");
  IndexRect r;
  r.row_begin = static_cast<int>(parse_double(f[0], "background region"));
  r.row_end = static_cast<int>(parse_double(f[1], "background region"));
  r.col_begin = static_cast<int>(parse_double(f[2], "background region"));
  r.col_end = static_cast<int>(parse_double(f[3], "background region"));
  return r;
}

struct SimFlags {
  std::optional<int> flux_points;
  std::optional<double> f_min, f_max;
  std::optional<double> coupling_g, resonator, linewidth, cutoff;

  void add(CLI::App* app) {
    app->add_option("--flux-points", flux_points, "Flux samples per period");
    app->add_option("--f-min", f_min, "Lower edge of the frequency window (GHz)");
    app->add_option("--f-max", f_max, "Upper edge of the frequency window (GHz)");
    app->add_option("--coupling-g", coupling_g, "Qubit-resonator coupling g (GHz)");
    app->add_option("--resonator", resonator, "Readout resonator frequency (GHz)");
    app->add_option("--linewidth", linewidth, "Resonator linewidth kappa (GHz)");
    app->add_option("--cutoff", cutoff, "Visibility cutoff (fraction)");
  }

  void apply(ToolConfig& c) const {
    set_if(flux_points, c.pipeline.sim.flux_points);
    set_if(f_min, c.pipeline.sim.f_min);
    set_if(f_max, c.pipeline.sim.f_max);
    set_if(f_min, c.pipeline.grid.f_min);
    set_if(f_max, c.pipeline.grid.f_max);
    set_if(coupling_g, c.readout.coupling_g);
    set_if(resonator, c.readout.f_resonator);
    set_if(linewidth, c.readout.linewidth);
    set_if(cutoff, c.readout.visibility_cutoff);
  }
};

struct TrainFlags {
  std::optional<int> epochs, patience, batch_size;
  std::optional<double> lr, val_fraction;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> lr_policy, loss_scale;
  bool no_early_stopping = false;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Maximum training epochs");
    app->add_option("--patience", patience, "Early-stopping patience (epochs)");
    app->add_option("--batch-size", batch_size, "Minibatch size");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--val-fraction", val_fraction, "Held-out validation fraction");
    app->add_option("--seed", seed, "Shuffle and split seed");
    app->add_option("--lr-policy", lr_policy, "adaptive or fixed");
    app->add_option("--loss-scale", loss_scale, "normalized or raw_ghz");
    app->add_flag("--no-early-stopping", no_early_stopping, "Keep the last epoch instead of the best one");
  }

  void apply(TrainConfig& t) const {
    set_if(epochs, t.max_epochs);
    set_if(patience, t.patience);
    set_if(batch_size, t.batch_size);
    set_if(lr, t.learning_rate);
    set_if(val_fraction, t.validation_fraction);
    set_if(seed, t.seed);
    if (lr_policy) t.lr_policy = parse_lr_policy(*lr_policy);
    if (loss_scale) t.loss_scale = parse_loss_scale(*loss_scale);
    if (no_early_stopping) t.early_stopping = false;
  }
};

void print_history(const TrainedModel& m) {
  std::cout << "stage " << to_string(m.provenance.stage) << ", epochs " << m.provenance.epochs << ", final loss "
            << format_double(m.provenance.final_loss) << "\n";
  std::cout << "epoch\ttrain_loss\tval_loss\n";
  for (std::size_t e = 0; e < m.train_loss.size(); ++e)
    std::cout << e << '\t' << format_double(m.train_loss[e]) << '\t'
              << (e < m.val_loss.size() ? format_double(m.val_loss[e]) : std::string("-")) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fluxonium parameter characterization toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tool_version));

  std::string config_file;
  app.add_option("--config", config_file, "JSON config overlay (applied after $FLUXFIT_CONFIG_DIR/fluxfit.json)");

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Simulate a transition spectrum and write its point set");
  std::optional<double> ec, el, ej;
  std::string kind = "pure", out;
  SimFlags sim_flags;
  std::optional<double> jitter, spurious;
  std::optional<std::uint64_t> noise_seed;
  sim_cmd->add_option("--ec", ec, "E_C (GHz)")->required();
  sim_cmd->add_option("--el", el, "E_L (GHz)")->required();
  sim_cmd->add_option("--ej", ej, "E_J (GHz)")->required();
  sim_cmd->add_option("--kind", kind, "pure or dispersive")->capture_default_str();
  sim_cmd->add_option("--jitter", jitter, "Gaussian frequency jitter (GHz); strips labels");
  sim_cmd->add_option("--spurious", spurious, "Spurious point fraction; strips labels");
  sim_cmd->add_option("--noise-seed", noise_seed, "Seed of the noise model");
  sim_cmd->add_option("--out", out, "Point-set file")->required();
  sim_flags.add(sim_cmd);

  // gen-data
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a rasterized training dataset");
  std::optional<std::size_t> count;
  std::optional<std::uint64_t> data_seed;
  std::optional<int> flux_bins, freq_bins;
  gen_cmd->add_option("--count", count, "Number of parameter samples");
  gen_cmd->add_option("--kind", kind, "pure or dispersive")->capture_default_str();
  gen_cmd->add_option("--seed", data_seed, "Sampling seed");
  gen_cmd->add_option("--flux-bins", flux_bins, "Raster flux bins");
  gen_cmd->add_option("--freq-bins", freq_bins, "Raster frequency bins");
  gen_cmd->add_option("--out", out, "Manifest path (.json)")->required();
  SimFlags gen_sim_flags;
  gen_sim_flags.add(gen_cmd);

  // train / finetune
  auto* train_cmd = app.add_subcommand("train", "Pretrain the regressor on a dataset");
  std::string data_path, model_path;
  std::optional<int> pool;
  TrainFlags train_flags;
  train_cmd->add_option("--data", data_path, "Dataset manifest")->required();
  train_cmd->add_option("--out", out, "Model file")->required();
  train_cmd->add_option("--pool", pool, "Input max-pool factor");
  train_flags.add(train_cmd);

  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune the last layer of a pretrained model");
  TrainFlags ft_flags;
  ft_cmd->add_option("--model", model_path, "Pretrained model file")->required();
  ft_cmd->add_option("--data", data_path, "Dataset manifest")->required();
  ft_cmd->add_option("--out", out, "Model file")->required();
  ft_flags.add(ft_cmd);

  // predict
  auto* pred_cmd = app.add_subcommand("predict", "Initial-guess parameters from a point set or a dataset");
  std::string points_path;
  pred_cmd->add_option("--model", model_path, "Model file")->required();
  auto* pred_points = pred_cmd->add_option("--points", points_path, "Point-set file");
  auto* pred_data = pred_cmd->add_option("--data", data_path, "Dataset manifest (prints accuracy)");
  pred_points->excludes(pred_data);
  pred_cmd->add_option("--out", out, "JSON output (default stdout)");

  // preprocess
  auto* pre_cmd = app.add_subcommand("preprocess", "Extract spectrum points from a measured magnitude map");
  std::string map_path;
  double bias_zero = 0.0, bias_pi = 1.0;
  std::optional<double> sigma, max_fraction;
  std::optional<std::string> background;
  bool mirror = false;
  std::optional<int> thin_stride, min_ridge;
  pre_cmd->add_option("--map", map_path, "Magnitude map (dense or triplet text)")->required();
  pre_cmd->add_option("--bias-zero", bias_zero, "Bias at phi_ext = 0")->required();
  pre_cmd->add_option("--bias-pi", bias_pi, "Bias at phi_ext = pi")->required();
  pre_cmd->add_option("--sigma", sigma, "Background sigma multiplier");
  pre_cmd->add_option("--max-fraction", max_fraction, "Upper cut as a fraction of the maximum magnitude");
  pre_cmd->add_option("--background", background, "Background region row0:row1:col0:col1");
  pre_cmd->add_flag("--mirror-about-pi", mirror, "Symmetrize half-period data about phi_ext = pi");
  pre_cmd->add_option("--thin-stride", thin_stride, "Keep every n-th flux column");
  pre_cmd->add_option("--min-ridge", min_ridge, "Minimum wavelet ridge length");
  pre_cmd->add_option("--out", out, "Point-set file")->required();

  // label
  auto* label_cmd = app.add_subcommand("label", "Assign transitions to points from an initial guess");
  std::string guess_path, outliers_path;
  std::optional<double> window;
  label_cmd->add_option("--points", points_path, "Point-set file")->required();
  label_cmd->add_option("--ec", ec, "E_C of the guess (GHz)");
  label_cmd->add_option("--el", el, "E_L of the guess (GHz)");
  label_cmd->add_option("--ej", ej, "E_J of the guess (GHz)");
  label_cmd->add_option("--guess", guess_path, "JSON file holding the guess (predict or fit output)");
  label_cmd->add_option("--window", window, "Label window (GHz)");
  label_cmd->add_option("--out", out, "Labeled point-set file")->required();
  label_cmd->add_option("--outliers", outliers_path, "Outlier point-set file");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Least-squares fit of a labeled point set");
  std::optional<int> iters;
  std::optional<std::string> jacobian;
  fit_cmd->add_option("--points", points_path, "Labeled point-set file")->required();
  fit_cmd->add_option("--ec", ec, "Initial E_C (GHz)");
  fit_cmd->add_option("--el", el, "Initial E_L (GHz)");
  fit_cmd->add_option("--ej", ej, "Initial E_J (GHz)");
  fit_cmd->add_option("--guess", guess_path, "JSON file holding the initial guess");
  fit_cmd->add_option("--iters", iters, "Maximum iterations");
  fit_cmd->add_option("--jacobian", jacobian, "analytic or numeric");
  fit_cmd->add_option("--out", out, "JSON output (default stdout)");

  // compare
  auto* cmp_cmd = app.add_subcommand("compare", "Random versus learned initialization over synthetic cases");
  std::size_t n_cases = 10, n_random = 64;
  int cmp_iters = 5;
  std::uint64_t cmp_seed = 7;
  std::string guess_input = "dispersive";
  cmp_cmd->add_option("--model", model_path, "Model file")->required();
  cmp_cmd->add_option("--cases", n_cases, "Synthetic cases")->capture_default_str();
  cmp_cmd->add_option("--random-inits", n_random, "Random starts per case")->capture_default_str();
  cmp_cmd->add_option("--iters", cmp_iters, "Fit iterations")->capture_default_str();
  cmp_cmd->add_option("--seed", cmp_seed, "Seed for cases and random starts")->capture_default_str();
  cmp_cmd->add_option("--guess-input", guess_input, "Spectrum shown to the model: pure or dispersive")
      ->capture_default_str();
  cmp_cmd->add_option("--out", out, "Table output (default stdout)");

  // scan
  auto* scan_cmd = app.add_subcommand("scan", "Fit from every node of a 2D grid of initial values");
  std::string x_axis = "e_l", y_axis = "e_j", x_grid = "0.1:2.0:11", y_grid = "2.0:10.0:11";
  double fixed_value = 1.28;
  std::string png_error, png_cost;
  scan_cmd->add_option("--ec", ec, "True E_C (GHz)")->required();
  scan_cmd->add_option("--el", el, "True E_L (GHz)")->required();
  scan_cmd->add_option("--ej", ej, "True E_J (GHz)")->required();
  scan_cmd->add_option("--x-axis", x_axis, "First scanned parameter")->capture_default_str();
  scan_cmd->add_option("--x-grid", x_grid, "lo:hi:n")->capture_default_str();
  scan_cmd->add_option("--y-axis", y_axis, "Second scanned parameter")->capture_default_str();
  scan_cmd->add_option("--y-grid", y_grid, "lo:hi:n")->capture_default_str();
  scan_cmd->add_option("--fixed", fixed_value, "Value of the remaining parameter")->capture_default_str();
  scan_cmd->add_option("--iters", cmp_iters, "Fit iterations")->capture_default_str();
  scan_cmd->add_option("--out", out, "Table output (default stdout)");
  scan_cmd->add_option("--png-error", png_error, "Error heat map (PNG)");
  scan_cmd->add_option("--png-cost", png_cost, "log10 Cost heat map (PNG)");

  // report
  auto* rep_cmd = app.add_subcommand("report", "Full pipeline: map -> points -> guess -> labels -> fit -> report");
  rep_cmd->alias("characterize");
  std::string out_dir;
  std::vector<double> truth;
  std::vector<double> label_windows;
  std::optional<double> grid_step;
  bool no_restarts = false, no_plots = false;
  rep_cmd->add_option("--map", map_path, "Magnitude map")->required();
  rep_cmd->add_option("--model", model_path, "Model file")->required();
  rep_cmd->add_option("--bias-zero", bias_zero, "Bias at phi_ext = 0")->required();
  rep_cmd->add_option("--bias-pi", bias_pi, "Bias at phi_ext = pi")->required();
  rep_cmd->add_option("--out-dir", out_dir, "Directory for the report and intermediates")->required();
  rep_cmd->add_option("--truth", truth, "Known e_c e_l e_j for Error/Cost")->expected(3);
  rep_cmd->add_option("--label-windows", label_windows, "Label windows of the successive passes (GHz, comma separated)")
      ->delimiter(',');
  rep_cmd->add_flag("--no-restarts", no_restarts, "Keep the learned guess even when it fits poorly");
  rep_cmd->add_option("--restart-grid-step", grid_step, "Log spacing of the restart grid");
  rep_cmd->add_option("--iters", iters, "Fit iterations");
  rep_cmd->add_option("--sigma", sigma, "Background sigma multiplier");
  rep_cmd->add_option("--max-fraction", max_fraction, "Upper cut as a fraction of the maximum magnitude");
  rep_cmd->add_option("--background", background, "Background region row0:row1:col0:col1");
  rep_cmd->add_flag("--mirror-about-pi", mirror, "Symmetrize half-period data about phi_ext = pi");
  rep_cmd->add_option("--thin-stride", thin_stride, "Keep every n-th flux column");
  rep_cmd->add_flag("--no-plots", no_plots, "Skip the overlay PNG");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    std::optional<fs::path> config_dir;
    if (const char* dir = std::getenv("FLUXFIT_CONFIG_DIR"); dir && *dir) config_dir = fs::path(dir);
    ToolConfig cfg =
        load_tool_config(config_dir, config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file));
    std::ofstream file;

    if (*sim_cmd) {
      sim_flags.apply(cfg);
      auto points = simulate(params_of({*ec, *el, *ej}, "simulate"), parse_kind(kind), cfg.pipeline.sim, cfg.readout);
      if (jitter || spurious || noise_seed) {
        NoiseConfig noise = cfg.noise;
        set_if(jitter, noise.jitter);
        set_if(spurious, noise.spurious_fraction);
        set_if(noise_seed, noise.seed);
        points = add_measurement_noise(points, noise, cfg.pipeline.sim);
      }
      write_points(out, points);
      std::cout << points.size() << " points written to " << out << "\n";
    } else if (*gen_cmd) {
      gen_sim_flags.apply(cfg);
      GenerateConfig g;
      g.kind = parse_kind(kind);
      g.ranges = cfg.ranges;
      g.sim = cfg.pipeline.sim;
      g.readout = cfg.readout;
      g.grid = cfg.pipeline.grid;
      set_if(count, g.count);
      set_if(data_seed, g.seed);
      set_if(flux_bins, g.grid.n_flux_bins);
      set_if(freq_bins, g.grid.n_freq_bins);
      const auto entries = generate_dataset(g);
      persist_dataset(entries, out, g.ranges, g.seed, g.grid);
      std::cout << entries.size() << " samples written to " << out << "\n";
    } else if (*train_cmd) {
      const auto ds = load_dataset(data_path);
      ModelConfig mc = cfg.model;
      mc.input_rows = ds.manifest.grid.n_freq_bins;
      mc.input_cols = ds.manifest.grid.n_flux_bins;
      set_if(pool, mc.input_pool);
      TrainConfig t = cfg.train;
      train_flags.apply(t);
      const auto model = pretrain(mc, ds, t);
      persist_model(model, out);
      print_history(model);
    } else if (*ft_cmd) {
      const auto base = load_model(model_path);
      TrainConfig t = cfg.train;
      ft_flags.apply(t);
      const auto model = fine_tune(base, load_dataset(data_path), t);
      persist_model(model, out);
      print_history(model);
    } else if (*pred_cmd) {
      const auto model = load_model(model_path);
      nlohmann::json result;
      if (!points_path.empty()) {
        GridConfig grid = cfg.pipeline.grid;
        grid.n_freq_bins = model.config.input_rows;
        grid.n_flux_bins = model.config.input_cols;
        const auto pred = predict(model, rasterize(read_points(points_path), grid));
        result = {{"params", to_json(pred.params)}, {"clamped", pred.clamped}};
      } else if (!data_path.empty()) {
        const auto ds = load_dataset(data_path);
        const auto preds = predict(model, ds.entries);
        std::vector<QubitParams> est, tru;
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < preds.size(); ++i) {
          est.push_back(preds[i].params);
          tru.push_back(ds.entries[i].params);
          rows.push_back({{"truth", to_json(tru.back())}, {"params", to_json(est.back())}, {"clamped", preds[i].clamped}});
        }
        const auto acc = accuracy(est, tru, model.target_normalization);
        result = {{"predictions", rows},
                  {"accuracy",
                   {{"e_c", acc.acc_e_c}, {"e_l", acc.acc_e_l}, {"e_j", acc.acc_e_j}, {"mean", acc.mean_acc},
                    {"n_test", acc.n_test}}}};
      } else {
        throw ConfigError("predict needs --points or --data");
      }
      open_out(out, file) << result.dump(2) << "\n";
    } else if (*pre_cmd) {
      set_if(sigma, cfg.pipeline.filter.sigma_multiplier);
      set_if(max_fraction, cfg.pipeline.filter.max_fraction);
      if (background) cfg.pipeline.background_region = parse_rect(*background);
      if (mirror) cfg.pipeline.mirror_about_pi = true;
      set_if(thin_stride, cfg.pipeline.thin_stride);
      set_if(min_ridge, cfg.pipeline.peaks.min_ridge_length);
      const auto points = preprocess_map(read_magnitude_map(map_path), FluxMap{bias_zero, bias_pi}, cfg.pipeline);
      write_points(out, points);
      std::cout << points.size() << " points written to " << out << "\n";
    } else if (*label_cmd) {
      set_if(window, cfg.pipeline.label.window);
      const auto guess = resolve_params(ec, el, ej, guess_path, "label");
      const auto labeled = label_points(read_points(points_path), guess, cfg.pipeline.label);
      write_points(out, labeled.labeled);
      if (!outliers_path.empty()) write_points(outliers_path, labeled.outliers);
      std::cout << "labeled " << labeled.labeled.size() << ", outliers " << labeled.outliers.size()
                << ", ambiguous " << labeled.ambiguous_count << "\n";
    } else if (*fit_cmd) {
      set_if(iters, cfg.pipeline.fit.max_iterations);
      if (jacobian) apply_json(nlohmann::json{{"jacobian", *jacobian}}, cfg.pipeline.fit);
      const auto init = resolve_params(ec, el, ej, guess_path, "fit");
      const auto result = fit_labeled_points(read_points(points_path), init, cfg.pipeline.fit);
      open_out(out, file) << nlohmann::json{{"fit", to_json(result)}}.dump(2) << "\n";
    } else if (*cmp_cmd) {
      const auto model = load_model(model_path);
      ComparisonConfig cc;
      cc.n_random = n_random;
      cc.fit = cfg.pipeline.fit;
      cc.fit.max_iterations = cmp_iters;
      cc.init_ranges = cfg.ranges;
      cc.metric_ranges = cfg.ranges;
      cc.seed = cmp_seed;
      cc.sim = cfg.pipeline.sim;
      cc.readout = cfg.readout;
      cc.grid = cfg.pipeline.grid;
      cc.guess_input = parse_kind(guess_input);
      const auto table = compare_random_vs_ml(comparison_cases(n_cases, cfg.ranges, cmp_seed), cc, model);
      write_comparison(open_out(out, file), table);
    } else if (*scan_cmd) {
      ScanAxes axes;
      axes.x_axis = parse_axis(x_axis);
      axes.y_axis = parse_axis(y_axis);
      axes.x_grid = parse_grid_spec(x_grid);
      axes.y_grid = parse_grid_spec(y_grid);
      FitConfig fc = cfg.pipeline.fit;
      fc.max_iterations = cmp_iters;
      const auto contour = scan_initial_grid(params_of({*ec, *el, *ej}, "scan"), axes, fixed_value, fc,
                                             cfg.pipeline.sim, cfg.ranges);
      write_contour(open_out(out, file), contour);
      if (!png_error.empty()) plot::contour_map(png_error, contour, false);
      if (!png_cost.empty()) plot::contour_map(png_cost, contour, true);
    } else if (*rep_cmd) {
      if (!label_windows.empty()) cfg.pipeline.label_windows = label_windows;
      if (no_restarts) cfg.pipeline.restarts.enabled = false;
      set_if(grid_step, cfg.pipeline.restarts.grid_step);
      set_if(iters, cfg.pipeline.fit.max_iterations);
      set_if(sigma, cfg.pipeline.filter.sigma_multiplier);
      set_if(max_fraction, cfg.pipeline.filter.max_fraction);
      if (background) cfg.pipeline.background_region = parse_rect(*background);
      if (mirror) cfg.pipeline.mirror_about_pi = true;
      set_if(thin_stride, cfg.pipeline.thin_stride);
      if (no_plots) cfg.pipeline.plots = false;
      std::optional<QubitParams> known;
      if (!truth.empty()) known = params_of(truth, "--truth");
      const auto report = run_characterize(map_path, model_path, FluxMap{bias_zero, bias_pi}, cfg.pipeline, out_dir, known);
      std::cout << "guess " << to_string(report.initial_guess) << "\nfit   " << to_string(report.fit.params)
                << "\nstarts " << report.n_starts << ", on-curve fraction " << report.inlier_fraction << "\nlabeled "
                << report.n_labeled << ", outliers " << report.n_outliers << "\nreport "
                << (fs::path(out_dir) / "report.json").string() << "\n";
    }
  } catch (const PipelineError& e) {
    std::cerr << "fluxfit: error: " << e.what() << "\n";
    return exit_code(e.cause());
  } catch (const Error& e) {
    std::cerr << "fluxfit: error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "fluxfit: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
