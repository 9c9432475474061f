#pragma once

// End-to-end characterization: magnitude map -> points -> raster -> learned
// guess -> labels -> least-squares fit -> report.

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fluxfit/dataset.hpp"
#include "fluxfit/errors.hpp"
#include "fluxfit/fitter.hpp"
#include "fluxfit/labeler.hpp"
#include "fluxfit/plot.hpp"
#include "fluxfit/preprocess.hpp"
#include "fluxfit/regressor.hpp"
#include "fluxfit/spectrum.hpp"

namespace fluxfit {

inline constexpr std::string_view tool_version = "0.3.0";

/// Global search taken when the learned guess fits too few points. Every node
/// of a log-spaced grid over the model's training ranges gets a few fit
/// iterations against nearest-transition labels on thinned points; the nodes
/// with the lowest truncated cost are refined in full.
struct RestartConfig {
  bool enabled = true;
  double grid_step = 0.25;                        ///< natural-log spacing of the grid nodes
  int screen_stride = 8;                          ///< flux columns kept while screening
  std::vector<double> screen_windows{0.5, 0.2};   ///< GHz, one short fit per window
  int screen_iterations = 3;                      ///< fit iterations per screening window
  double score_cap = 0.1;                         ///< GHz, truncation of the screening cost
  int refine_top = 4;
  double min_separation = 0.05;                   ///< natural-log distance between refined starts
  double accept_fraction = 0.8;                   ///< learned guess kept if this share of points sits on its fit
  double inlier_window = 0.04;                    ///< GHz, also the cap of the selection cost

  void validate() const {
    if (!(grid_step > 0.0)) throw ConfigError("restarts.grid_step must be positive");
    if (screen_stride < 1) throw ConfigError("restarts.screen_stride must be at least 1");
    if (screen_windows.empty()) throw ConfigError("restarts.screen_windows must not be empty");
    for (double w : screen_windows)
      if (!(w > 0.0)) throw ConfigError("restarts.screen_windows must be positive");
    if (screen_iterations < 1) throw ConfigError("restarts.screen_iterations must be at least 1");
    if (refine_top < 1) throw ConfigError("restarts.refine_top must be at least 1");
    if (!(min_separation >= 0.0)) throw ConfigError("restarts.min_separation must be non-negative");
    if (!(accept_fraction > 0.0 && accept_fraction <= 1.0))
      throw ConfigError("restarts.accept_fraction must lie in (0, 1]");
    if (!(score_cap > 0.0) || !(inlier_window > 0.0))
      throw ConfigError("restarts.score_cap and restarts.inlier_window must be positive");
  }
};

struct PipelineConfig {
  FilterConfig filter;
  std::optional<IndexRect> background_region;
  PeakConfig peaks;
  LabelConfig label;
  FitConfig fit;
  GridConfig grid;  ///< bin counts follow the model input
  SimConfig sim;    ///< truth reference and overlay curves
  /// GHz, one label+fit pass per window, each relabeling with the previous fit.
  /// The last window repeats until its labeled set stops changing.
  std::vector<double> label_windows{0.6, 0.4, 0.25, 0.15, 0.08, 0.04};
  int settle_passes = 5;  ///< cap on passes at the last window
  RestartConfig restarts;
  bool mirror_about_pi = false;
  int thin_stride = 1;
  bool plots = true;

  void validate() const {
    filter.validate();
    peaks.validate();
    label.validate();
    fit.validate();
    grid.validate();
    sim.validate();
    restarts.validate();
    if (label_windows.empty()) throw ConfigError("label_windows must not be empty");
    for (double w : label_windows)
      if (!(w > 0.0)) throw ConfigError("label_windows must be positive");
    if (settle_passes < 1) throw ConfigError("settle_passes must be at least 1");
    if (thin_stride < 1) throw ConfigError("thin_stride must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Config echo

inline nlohmann::json to_json(const std::vector<Transition>& ts) {
  auto a = nlohmann::json::array();
  for (const auto& t : ts) a.push_back(to_string(t));
  return a;
}

inline std::vector<Transition> transitions_from_json(const nlohmann::json& j) {
  std::vector<Transition> ts;
  for (const auto& s : j) ts.push_back(parse_transition(s.get<std::string>()));
  return ts;
}

inline nlohmann::json to_json(const SimConfig& c) {
  return {{"flux_points", c.flux_points}, {"f_min", c.f_min}, {"f_max", c.f_max},
          {"transitions", to_json(c.transitions)}, {"basis_dim", c.basis_dim}};
}

inline nlohmann::json to_json(const ReadoutConfig& r) {
  return {{"f_resonator", r.f_resonator}, {"linewidth", r.linewidth}, {"coupling_g", r.coupling_g},
          {"visibility_cutoff", r.visibility_cutoff}, {"n_perturb_states", r.n_perturb_states},
          {"exclude_near_resonator", r.exclude_near_resonator}, {"exclusion_band", r.exclusion_band}};
}

inline nlohmann::json to_json(const FilterConfig& f) {
  return {{"sigma_multiplier", f.sigma_multiplier}, {"max_fraction", f.max_fraction}};
}

inline nlohmann::json to_json(const PeakConfig& p) {
  nlohmann::json j = {{"wavelet_widths", p.wavelet_widths}, {"min_ridge_length", p.min_ridge_length},
                      {"min_peak_width", p.min_peak_width}, {"refine", p.refine}};
  j["smoothing"] = p.smoothing ? nlohmann::json(*p.smoothing) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const LabelConfig& l) {
  return {{"window", l.window}, {"transitions", to_json(l.transitions)}, {"basis_dim", l.basis_dim}};
}

inline nlohmann::json to_json(const FitConfig& f) {
  return {{"max_iterations", f.max_iterations},
          {"bounds", to_json(f.bounds)},
          {"damping_init", f.damping_init},
          {"convergence_tol", f.convergence_tol},
          {"jacobian_step", f.jacobian_step},
          {"jacobian", f.jacobian == JacobianMode::analytic ? "analytic" : "numeric"},
          {"basis_dim", f.basis_dim}};
}

inline nlohmann::json to_json(const IndexRect& r) {
  return {{"row_begin", r.row_begin}, {"row_end", r.row_end}, {"col_begin", r.col_begin}, {"col_end", r.col_end}};
}

inline nlohmann::json to_json(const RestartConfig& r) {
  return {{"enabled", r.enabled},
          {"grid_step", r.grid_step},
          {"screen_stride", r.screen_stride},
          {"screen_windows", r.screen_windows},
          {"screen_iterations", r.screen_iterations},
          {"score_cap", r.score_cap},
          {"refine_top", r.refine_top},
          {"min_separation", r.min_separation},
          {"accept_fraction", r.accept_fraction},
          {"inlier_window", r.inlier_window}};
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j = {{"filter", to_json(c.filter)}, {"peaks", to_json(c.peaks)}, {"label", to_json(c.label)},
                      {"fit", to_json(c.fit)},       {"grid", to_json(c.grid)},   {"sim", to_json(c.sim)},
                      {"label_windows", c.label_windows}, {"settle_passes", c.settle_passes},
                      {"restarts", to_json(c.restarts)},
                      {"mirror_about_pi", c.mirror_about_pi},
                      {"thin_stride", c.thin_stride}, {"plots", c.plots}};
  j["background_region"] = c.background_region ? to_json(*c.background_region) : nlohmann::json(nullptr);
  return j;
}

namespace detail {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

}  // namespace detail

/// Overlays the keys present in `j` onto `c`; absent keys keep their values.
inline void apply_json(const nlohmann::json& j, SimConfig& c) {
  detail::maybe(j, "flux_points", c.flux_points);
  detail::maybe(j, "f_min", c.f_min);
  detail::maybe(j, "f_max", c.f_max);
  detail::maybe(j, "basis_dim", c.basis_dim);
  if (j.contains("transitions")) c.transitions = transitions_from_json(j.at("transitions"));
}

inline void apply_json(const nlohmann::json& j, ReadoutConfig& r) {
  detail::maybe(j, "f_resonator", r.f_resonator);
  detail::maybe(j, "linewidth", r.linewidth);
  detail::maybe(j, "coupling_g", r.coupling_g);
  detail::maybe(j, "visibility_cutoff", r.visibility_cutoff);
  detail::maybe(j, "n_perturb_states", r.n_perturb_states);
  detail::maybe(j, "exclude_near_resonator", r.exclude_near_resonator);
  detail::maybe(j, "exclusion_band", r.exclusion_band);
}

inline void apply_json(const nlohmann::json& j, FilterConfig& f) {
  detail::maybe(j, "sigma_multiplier", f.sigma_multiplier);
  detail::maybe(j, "max_fraction", f.max_fraction);
}

inline void apply_json(const nlohmann::json& j, PeakConfig& p) {
  detail::maybe(j, "wavelet_widths", p.wavelet_widths);
  detail::maybe(j, "min_ridge_length", p.min_ridge_length);
  detail::maybe(j, "min_peak_width", p.min_peak_width);
  detail::maybe(j, "refine", p.refine);
  if (j.contains("smoothing")) p.smoothing = j.at("smoothing").is_null() ? std::nullopt : std::optional<int>(j.at("smoothing").get<int>());
}

inline void apply_json(const nlohmann::json& j, LabelConfig& l) {
  detail::maybe(j, "window", l.window);
  detail::maybe(j, "basis_dim", l.basis_dim);
  if (j.contains("transitions")) l.transitions = transitions_from_json(j.at("transitions"));
}

inline void apply_json(const nlohmann::json& j, FitConfig& f) {
  detail::maybe(j, "max_iterations", f.max_iterations);
  detail::maybe(j, "damping_init", f.damping_init);
  detail::maybe(j, "convergence_tol", f.convergence_tol);
  detail::maybe(j, "jacobian_step", f.jacobian_step);
  detail::maybe(j, "basis_dim", f.basis_dim);
  if (j.contains("bounds")) f.bounds = ranges_from_json(j.at("bounds"));
  if (j.contains("jacobian")) {
    const auto m = j.at("jacobian").get<std::string>();
    if (m != "analytic" && m != "numeric") throw ConfigError("jacobian must be 'analytic' or 'numeric', got '" + m + "'");
    f.jacobian = m == "analytic" ? JacobianMode::analytic : JacobianMode::numeric;
  }
}

inline void apply_json(const nlohmann::json& j, RestartConfig& r) {
  detail::maybe(j, "enabled", r.enabled);
  detail::maybe(j, "grid_step", r.grid_step);
  detail::maybe(j, "screen_stride", r.screen_stride);
  detail::maybe(j, "screen_windows", r.screen_windows);
  detail::maybe(j, "screen_iterations", r.screen_iterations);
  detail::maybe(j, "score_cap", r.score_cap);
  detail::maybe(j, "refine_top", r.refine_top);
  detail::maybe(j, "min_separation", r.min_separation);
  detail::maybe(j, "accept_fraction", r.accept_fraction);
  detail::maybe(j, "inlier_window", r.inlier_window);
}

inline void apply_json(const nlohmann::json& j, PipelineConfig& c) {
  try {
    if (j.contains("filter")) apply_json(j.at("filter"), c.filter);
    if (j.contains("peaks")) apply_json(j.at("peaks"), c.peaks);
    if (j.contains("label")) apply_json(j.at("label"), c.label);
    if (j.contains("fit")) apply_json(j.at("fit"), c.fit);
    if (j.contains("grid")) c.grid = grid_config_from_json(j.at("grid"));
    if (j.contains("sim")) apply_json(j.at("sim"), c.sim);
    detail::maybe(j, "label_windows", c.label_windows);
    detail::maybe(j, "settle_passes", c.settle_passes);
    if (j.contains("restarts")) apply_json(j.at("restarts"), c.restarts);
    detail::maybe(j, "mirror_about_pi", c.mirror_about_pi);
    detail::maybe(j, "thin_stride", c.thin_stride);
    detail::maybe(j, "plots", c.plots);
    if (j.contains("background_region") && !j.at("background_region").is_null()) {
      const auto& b = j.at("background_region");
      c.background_region = IndexRect{b.at("row_begin").get<int>(), b.at("row_end").get<int>(),
                                      b.at("col_begin").get<int>(), b.at("col_end").get<int>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad pipeline config: ") + e.what());
  }
}

inline void apply_json(const nlohmann::json& j, TrainConfig& t) {
  detail::maybe(j, "batch_size", t.batch_size);
  detail::maybe(j, "max_epochs", t.max_epochs);
  detail::maybe(j, "patience", t.patience);
  detail::maybe(j, "learning_rate", t.learning_rate);
  detail::maybe(j, "validation_fraction", t.validation_fraction);
  detail::maybe(j, "seed", t.seed);
  detail::maybe(j, "early_stopping", t.early_stopping);
  if (j.contains("lr_policy")) t.lr_policy = parse_lr_policy(j.at("lr_policy").get<std::string>());
  if (j.contains("loss_scale")) t.loss_scale = parse_loss_scale(j.at("loss_scale").get<std::string>());
}

inline void apply_json(const nlohmann::json& j, ModelConfig& m) {
  detail::maybe(j, "input_pool", m.input_pool);
  detail::maybe(j, "head_widths", m.head_widths);
  detail::maybe(j, "seed", m.seed);
  if (j.contains("conv_channels")) {
    m.conv_blocks.clear();
    for (int c : j.at("conv_channels").get<std::vector<int>>()) m.conv_blocks.push_back({c, 3, 2});
  }
}

/// Every tunable of the command-line tool, as one overlayable document.
struct ToolConfig {
  PipelineConfig pipeline;
  ReadoutConfig readout;
  TrainConfig train;
  ModelConfig model;
  ParamRanges ranges;
  NoiseConfig noise;
};

inline void apply_json(const nlohmann::json& j, ToolConfig& c) {
  try {
    apply_json(j, c.pipeline);
    if (j.contains("readout")) apply_json(j.at("readout"), c.readout);
    if (j.contains("train")) apply_json(j.at("train"), c.train);
    if (j.contains("model")) apply_json(j.at("model"), c.model);
    if (j.contains("ranges")) c.ranges = ranges_from_json(j.at("ranges"));
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      detail::maybe(n, "jitter", c.noise.jitter);
      detail::maybe(n, "spurious_fraction", c.noise.spurious_fraction);
      detail::maybe(n, "seed", c.noise.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const auto text = detail::read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Defaults, then <config_dir>/fluxfit.json if present, then `explicit_file`.
inline ToolConfig load_tool_config(const std::optional<std::filesystem::path>& config_dir,
                                   const std::optional<std::filesystem::path>& explicit_file) {
  ToolConfig c;
  if (config_dir) {
    const auto p = *config_dir / "fluxfit.json";
    if (std::filesystem::exists(p)) apply_json(read_json_file(p), c);
  }
  if (explicit_file) apply_json(read_json_file(*explicit_file), c);
  return c;
}

// ---------------------------------------------------------------------------
// Report

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw NumericError("SHA-256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct PipelineReport {
  QubitParams initial_guess;
  bool guess_clamped = false;
  std::size_t n_points = 0;
  std::size_t n_labeled = 0, n_outliers = 0, n_ambiguous = 0;
  FitResult fit;
  std::vector<QubitParams> pass_params;  ///< fitted triple after each pass of the kept start
  int n_starts = 0;                      ///< starts refined, the learned guess included
  int n_screened = 0;
  QubitParams start;                     ///< start whose passes were kept
  double inlier_fraction = 0.0;                ///< share of points labeled within the inlier window
  double selection_cost = 0.0;                 ///< GHz^2, truncated cost that ranked the starts
  std::optional<QubitParams> truth;
  std::optional<MetricReport> truth_metrics;
  nlohmann::json config;
  std::string version{tool_version};
  std::vector<std::pair<std::string, std::string>> input_digests;  ///< (role, sha256)
  std::string timestamp;
};

inline nlohmann::json to_json(const FitResult& f) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [t, s] : f.per_transition)
    per[to_string(t)] = {{"count", s.count}, {"mean", s.mean}, {"rms", s.rms}, {"max_abs", s.max_abs}};
  return {{"params", to_json(f.params)},   {"initial", to_json(f.initial)}, {"n_iterations", f.n_iterations},
          {"converged", f.converged},       {"clamped", f.clamped},         {"underdetermined", f.underdetermined},
          {"rss", f.rss},                   {"n_points", f.n_points},       {"per_transition", per}};
}

inline nlohmann::json to_json(const PipelineReport& r) {
  nlohmann::json passes = nlohmann::json::array();
  for (const auto& p : r.pass_params) passes.push_back(to_json(p));
  nlohmann::json digests = nlohmann::json::object();
  for (const auto& [role, hex] : r.input_digests) digests[role] = hex;
  nlohmann::json j = {{"version", r.version},
                      {"timestamp", r.timestamp},
                      {"initial_guess", to_json(r.initial_guess)},
                      {"guess_clamped", r.guess_clamped},
                      {"counts",
                       {{"points", r.n_points},
                        {"labeled", r.n_labeled},
                        {"outliers", r.n_outliers},
                        {"ambiguous", r.n_ambiguous}}},
                      {"fit", to_json(r.fit)},
                      {"passes", passes},
                      {"restarts", {{"n_starts", r.n_starts}, {"n_screened", r.n_screened}, {"start", to_json(r.start)},
                                    {"inlier_fraction", r.inlier_fraction}, {"selection_cost", r.selection_cost}}},
                      {"config", r.config},
                      {"input_digests", digests}};
  if (r.truth) {
    j["truth"] = to_json(*r.truth);
    j["metrics"] = {{"error", r.truth_metrics->error}, {"cost", r.truth_metrics->cost},
                    {"n_points", r.truth_metrics->n_points}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Stages

namespace detail {

/// Runs one stage, re-raising library errors tagged with the stage name.
template <typename F>
auto stage(const std::string& name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const PipelineError&) {
    throw;
  } catch (const Error& e) {
    throw PipelineError(name, e.what(), e.kind());
  }
}

/// Cell centers of a grid with about `step` spacing in the logarithm of each
/// parameter, at least two cells per axis.
inline std::vector<QubitParams> log_grid(const ParamRanges& ranges, double step) {
  std::vector<double> axes[3];
  for (int a = 0; a < 3; ++a) {
    const auto& r = ranges.axis(a);
    if (!(r.lo > 0.0 && r.lo < r.hi)) throw ConfigError("restart grid needs positive increasing parameter ranges");
    const double lo = std::log(r.lo), hi = std::log(r.hi);
    const int n = std::max(2, static_cast<int>(std::ceil((hi - lo) / step)));
    for (int k = 0; k < n; ++k) axes[a].push_back(std::exp(lo + (k + 0.5) * (hi - lo) / n));
  }
  std::vector<QubitParams> out;
  for (double ec : axes[0])
    for (double el : axes[1])
      for (double ej : axes[2]) out.push_back({ec, el, ej});
  return out;
}

/// Largest per-axis |ln(p / q)|.
inline double log_distance(const QubitParams& p, const QubitParams& q) {
  double d = 0.0;
  for (int a = 0; a < 3; ++a) d = std::max(d, std::abs(std::log(component(p, a) / component(q, a))));
  return d;
}

}  // namespace detail

/// Calibration, magnitude filter, peak extraction and the optional
/// reduced-data transforms.
inline SpectrumPointSet preprocess_map(const MagnitudeMap& raw, const FluxMap& calibration, const PipelineConfig& cfg) {
  auto map = flux_calibrate(raw, calibration);
  if (cfg.background_region) map.background_region = cfg.background_region;
  const auto mask = magnitude_filter(map, cfg.filter);
  auto pts = extract_peaks(map, mask, cfg.peaks);
  if (cfg.mirror_about_pi) pts = mirror_about_pi(pts);
  if (cfg.thin_stride > 1) pts = thin_flux(pts, cfg.thin_stride);
  return pts;
}

/// Fit of a point set that must already carry labels on every point.
inline FitResult fit_labeled_points(const SpectrumPointSet& points, const QubitParams& init, const FitConfig& cfg) {
  std::size_t unlabeled = 0;
  for (const auto& p : points.points) unlabeled += p.label ? 0 : 1;
  if (points.empty() || unlabeled > 0)
    throw PipelineError("fit", std::to_string(unlabeled) + " of " + std::to_string(points.size()) +
                                   " points carry no transition label; run `fluxfit label` first");
  return detail::stage("fit", [&] { return fit(points, init, cfg); });
}

struct Characterization {
  PipelineReport report;
  RasterGrid raster;
  LabeledSet labeled;  ///< labels from the last pass
};

/// Raster -> guess -> label -> fit on an already extracted point set.
inline Characterization characterize_points(const SpectrumPointSet& points, const TrainedModel& model,
                                            const PipelineConfig& cfg,
                                            const std::optional<QubitParams>& truth = std::nullopt) {
  detail::stage("config", [&] { cfg.validate(); });
  if (points.empty())
    throw PipelineError("preprocess", "no spectrum points survived peak extraction; relax the magnitude filter or "
                                      "check the flux calibration");
  Characterization out;
  auto& rep = out.report;
  rep.config = to_json(cfg);
  rep.n_points = points.size();

  GridConfig grid = cfg.grid;
  grid.n_freq_bins = model.config.input_rows;
  grid.n_flux_bins = model.config.input_cols;
  out.raster = detail::stage("rasterize", [&] { return rasterize(points, grid); });
  const auto guess = detail::stage("predict", [&] { return predict(model, out.raster); });
  rep.initial_guess = guess.params;
  rep.guess_clamped = guess.clamped;

  struct Attempt {
    QubitParams start;
    LabeledSet labeled;
    FitResult fit;
    std::vector<QubitParams> pass_params;
    double on_curve = 0.0;  ///< share of points labeled within the inlier window
    double cost = std::numeric_limits<double>::infinity();
  };
  const auto& rc = cfg.restarts;
  // A start whose labeling comes back empty keeps no passes and is never chosen.
  auto refine = [&](const QubitParams& start) {
    Attempt a{start, {}, {}, {}};
    QubitParams current = start;
    LabelConfig lc = cfg.label;
    auto pass = [&](double window, bool settling) {
      lc.window = window;
      auto labeled = detail::stage("label", [&] { return label_points(points, current, lc); });
      if (labeled.labeled.empty()) return false;
      const bool unchanged = settling && labeled.labeled.points == a.labeled.labeled.points;
      a.labeled = std::move(labeled);
      if (unchanged) return false;
      a.fit = detail::stage("fit", [&] { return fit(a.labeled, current, cfg.fit); });
      current = a.fit.params;
      a.pass_params.push_back(current);
      return true;
    };
    for (std::size_t k = 0; k + 1 < cfg.label_windows.size(); ++k)
      if (!pass(cfg.label_windows[k], false)) return a;
    for (int k = 0; k < cfg.settle_passes; ++k)
      if (!pass(cfg.label_windows.back(), k > 0)) break;
    if (a.pass_params.empty()) return a;
    lc.window = rc.inlier_window;
    const auto on_curve = detail::stage("label", [&] { return label_points(points, current, lc); });
    a.on_curve = static_cast<double>(on_curve.labeled.size()) / static_cast<double>(points.size());
    a.cost = detail::stage("label", [&] { return truncated_cost(points, current, rc.inlier_window, cfg.label); });
    return a;
  };

  Attempt best = refine(guess.params);
  rep.n_starts = 1;
  if (rc.enabled && (best.pass_params.empty() || best.on_curve < rc.accept_fraction)) {
    const auto nodes = detail::log_grid(model.target_normalization, rc.grid_step);
    const auto thin = rc.screen_stride > 1 ? thin_flux(points, rc.screen_stride) : points;
    FitConfig quick = cfg.fit;
    quick.max_iterations = rc.screen_iterations;
    std::vector<std::pair<double, QubitParams>> ranked;
    detail::stage("restart", [&] {
      for (auto p : nodes) {
        try {
          LabelConfig lc = cfg.label;
          for (double w : rc.screen_windows) {
            lc.window = w;
            const auto l = label_nearest(thin, p, lc);
            if (l.labeled.size() < 3) break;
            p = fit(l.labeled, p, quick).params;
          }
        } catch (const Error&) {
          // keep the last good triple of this node
        }
        ranked.emplace_back(truncated_cost(thin, p, rc.score_cap, cfg.label), p);
      }
    });
    rep.n_screened = static_cast<int>(ranked.size());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    std::vector<QubitParams> starts;
    for (const auto& [cost, p] : ranked) {
      if (static_cast<int>(starts.size()) >= rc.refine_top) break;
      const bool distinct = std::all_of(starts.begin(), starts.end(), [&](const QubitParams& q) {
        return detail::log_distance(p, q) >= rc.min_separation;
      });
      if (distinct) starts.push_back(p);
    }
    for (const auto& start : starts) {
      Attempt a;
      try {
        a = refine(start);
      } catch (const PipelineError&) {
        continue;
      }
      ++rep.n_starts;
      if (!a.pass_params.empty() && a.cost < best.cost) best = std::move(a);
    }
  }
  if (best.pass_params.empty())
    throw PipelineError("label", "none of the " + std::to_string(points.size()) + " points lies within " +
                                     format_double(cfg.label_windows.front()) +
                                     " GHz of exactly one simulated transition for " + to_string(guess.params) +
                                     "; widen the label windows or adjust the magnitude filter");

  const QubitParams current = best.pass_params.back();
  out.labeled = std::move(best.labeled);
  rep.fit = best.fit;
  rep.fit.initial = best.start;
  rep.pass_params = best.pass_params;
  rep.start = best.start;
  rep.inlier_fraction = best.on_curve;
  rep.selection_cost = best.cost;
  rep.n_labeled = out.labeled.labeled.size();
  rep.n_outliers = out.labeled.outliers.size();
  rep.n_ambiguous = out.labeled.ambiguous_count;

  if (truth) {
    rep.truth = truth;
    rep.truth_metrics = detail::stage("metrics", [&] {
      return metrics(current, *truth, pure_spectrum(*truth, cfg.sim));
    });
  }
  return out;
}

/// Reads a measured map, extracts its points, and characterizes them. Every
/// intermediate artifact lands in out_dir next to report.json.
inline PipelineReport run_characterize(const std::filesystem::path& map_path, const std::filesystem::path& model_path,
                                       const FluxMap& calibration, const PipelineConfig& cfg,
                                       const std::filesystem::path& out_dir,
                                       const std::optional<QubitParams>& truth = std::nullopt) {
  namespace fs = std::filesystem;
  detail::stage("config", [&] {
    cfg.validate();
    calibration.validate();
  });
  const auto map_bytes = detail::stage("read-map", [&] { return detail::read_file(map_path); });
  const auto model_bytes = detail::stage("load-model", [&] { return detail::read_file(model_path); });
  const auto model = detail::stage("load-model", [&] { return decode_model(model_bytes, model_path.string()); });

  const auto points = detail::stage("preprocess", [&] {
    std::istringstream is(map_bytes);
    return preprocess_map(read_magnitude_map(is, map_path.string()), calibration, cfg);
  });

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw PipelineError("write", "cannot create " + out_dir.string() + ": " + ec.message(), ErrorKind::io);
  detail::stage("write", [&] { write_points((out_dir / "points.csv").string(), points); });

  auto result = characterize_points(points, model, cfg, truth);
  auto& rep = result.report;
  rep.input_digests = {{"map", sha256_hex(map_bytes)}, {"model", sha256_hex(model_bytes)}};
  rep.config["calibration"] = {{"bias_at_zero", calibration.bias_at_zero}, {"bias_at_pi", calibration.bias_at_pi}};
  rep.timestamp = utc_timestamp();

  detail::stage("write", [&] {
    write_grid(out_dir / "raster.fxgd", result.raster);
    write_points((out_dir / "labeled.csv").string(), result.labeled.labeled);
    write_points((out_dir / "outliers.csv").string(), result.labeled.outliers);
    if (cfg.plots) plot::spectrum_overlay((out_dir / "overlay.png").string(), result.labeled, rep.fit.params, cfg.sim);
    detail::write_file_atomic(out_dir / "report.json", to_json(rep).dump(2) + "\n");
  });
  return rep;
}

}  // namespace fluxfit
