#pragma once

// Damped least-squares refinement of (E_C, E_L, E_J) against labeled
// transition points, the Error/Cost metrics, and the random-vs-learned
// initialization comparison and initial-value scans built on them.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <random>
#include <vector>

#include "fluxfit/dataset.hpp"
#include "fluxfit/errors.hpp"
#include "fluxfit/fluxonium.hpp"
#include "fluxfit/labeler.hpp"
#include "fluxfit/regressor.hpp"
#include "fluxfit/spectrum.hpp"

namespace fluxfit {

enum class JacobianMode { analytic, numeric };

struct FitConfig {
  int max_iterations = 50;
  ParamRanges bounds = ParamRanges{}.widened(1.25);
  double damping_init = 1e-3;
  double convergence_tol = 1e-9;  ///< relative step size
  double jacobian_step = 1e-6;    ///< relative, numeric mode only
  JacobianMode jacobian = JacobianMode::analytic;
  int basis_dim = auto_basis;

  void validate() const {
    if (max_iterations < 1) throw ConfigError("max_iterations must be at least 1");
    bounds.validate();
    if (!(damping_init > 0.0)) throw ConfigError("damping_init must be positive");
    if (!(convergence_tol >= 0.0)) throw ConfigError("convergence_tol must be non-negative");
    if (!(jacobian_step > 0.0)) throw ConfigError("jacobian_step must be positive");
  }
};

struct ResidualStats {
  std::size_t count = 0;
  double mean = 0.0;
  double rms = 0.0;
  double max_abs = 0.0;
};

struct FitResult {
  QubitParams params;
  QubitParams initial;
  int n_iterations = 0;
  bool converged = false;
  bool clamped = false;          ///< a bound was hit by the start point or an accepted step
  bool underdetermined = false;  ///< fewer labeled points than free parameters
  double rss = 0.0;              ///< GHz^2
  std::size_t n_points = 0;
  std::map<Transition, ResidualStats> per_transition;
};

struct MetricReport {
  double error = 0.0;  ///< unitless
  double cost = 0.0;   ///< GHz^2
  std::size_t n_points = 0;
};

namespace detail {

/// Labeled points in a solver-friendly layout. Flux values are folded onto
/// [0, pi], which the model's flux-inversion symmetry leaves invariant.
struct FitData {
  std::vector<double> freq;
  std::vector<Transition> labels;
  std::vector<int> flux_index;
  std::vector<double> fluxes;
  int n_levels = 2;
};

inline FitData prepare_fit_data(const SpectrumPointSet& labeled) {
  if (labeled.empty()) throw ConfigError("labeled point set is empty");
  FitData d;
  std::map<double, int> index;
  for (const auto& p : labeled.points) {
    if (!p.label) throw ConfigError("point set contains unlabeled points; run the labeler first");
    double phi = ExternalFlux(p.phi_ext).value();
    if (phi > std::numbers::pi) phi = two_pi - phi;
    auto [it, inserted] = index.emplace(phi, static_cast<int>(d.fluxes.size()));
    if (inserted) d.fluxes.push_back(phi);
    d.flux_index.push_back(it->second);
    d.freq.push_back(p.frequency);
    d.labels.push_back(*p.label);
    d.n_levels = std::max(d.n_levels, p.label->upper + 1);
  }
  return d;
}

struct Evaluation {
  Eigen::VectorXd residuals;
  Eigen::MatrixXd jacobian;  ///< empty unless requested
};

inline int fit_basis(const QubitParams& p, int n_levels, int basis_dim) {
  return basis_dim == auto_basis ? auto_basis_dim(p, n_levels) : resolve_basis(p, n_levels, basis_dim);
}

/// Residuals f_model - f_measured and, optionally, their exact derivatives.
inline Evaluation evaluate(const FitData& d, const QubitParams& p, int basis_dim, bool want_jacobian) {
  FluxoniumHamiltonian ham(p, basis_dim);
  const auto n = static_cast<Eigen::Index>(d.freq.size());
  Evaluation ev;
  ev.residuals.resize(n);
  if (want_jacobian) ev.jacobian.resize(n, 3);
  std::vector<Eigen::VectorXd> levels(d.fluxes.size());
  std::vector<Eigen::MatrixXd> grads(d.fluxes.size());
  for (std::size_t k = 0; k < d.fluxes.size(); ++k) {
    if (want_jacobian) {
      auto lg = ham.levels_with_gradients(ExternalFlux(d.fluxes[k]), d.n_levels);
      levels[k] = std::move(lg.energies);
      grads[k] = std::move(lg.gradients);
    } else {
      levels[k] = ham.eigensystem(ExternalFlux(d.fluxes[k]), d.n_levels, false).values;
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(d.flux_index[static_cast<std::size_t>(i)]);
    const auto& t = d.labels[static_cast<std::size_t>(i)];
    ev.residuals[i] = levels[k][t.upper] - levels[k][t.lower] - d.freq[static_cast<std::size_t>(i)];
    if (want_jacobian) ev.jacobian.row(i) = grads[k].row(t.upper) - grads[k].row(t.lower);
  }
  return ev;
}

/// Central differences with relative step h on each axis, basis held fixed.
inline Eigen::MatrixXd numeric_jacobian(const FitData& d, const QubitParams& p, int basis_dim, double h) {
  Eigen::MatrixXd j(static_cast<Eigen::Index>(d.freq.size()), 3);
  for (int a = 0; a < 3; ++a) {
    const double step = h * std::max(std::abs(component(p, a)), 1e-3);
    QubitParams up = p, down = p;
    component(up, a) += step;
    component(down, a) -= step;
    j.col(a) = (evaluate(d, up, basis_dim, false).residuals - evaluate(d, down, basis_dim, false).residuals) /
               (2.0 * step);
  }
  return j;
}

inline Evaluation evaluate_for_fit(const FitData& d, const QubitParams& p, const FitConfig& cfg) {
  const int dim = fit_basis(p, d.n_levels, cfg.basis_dim);
  if (cfg.jacobian == JacobianMode::analytic) return evaluate(d, p, dim, true);
  auto ev = evaluate(d, p, dim, false);
  ev.jacobian = numeric_jacobian(d, p, dim, cfg.jacobian_step);
  return ev;
}

}  // namespace detail

/// f_model(label, phi; params) - f_measured for every labeled point, in input order.
inline std::vector<double> residuals(const SpectrumPointSet& labeled, const QubitParams& params,
                                     int basis_dim = auto_basis) {
  validate(params);
  const auto d = detail::prepare_fit_data(labeled);
  const auto r = detail::evaluate(d, params, detail::fit_basis(params, d.n_levels, basis_dim), false).residuals;
  return {r.data(), r.data() + r.size()};
}

inline std::vector<double> residuals(const LabeledSet& labeled, const QubitParams& params, int basis_dim = auto_basis) {
  return residuals(labeled.labeled, params, basis_dim);
}

/// d residual / d(E_C, E_L, E_J), one row per labeled point.
inline Eigen::MatrixXd residual_jacobian(const SpectrumPointSet& labeled, const QubitParams& params,
                                         JacobianMode mode = JacobianMode::analytic, double relative_step = 1e-6,
                                         int basis_dim = auto_basis) {
  validate(params);
  const auto d = detail::prepare_fit_data(labeled);
  const int dim = detail::fit_basis(params, d.n_levels, basis_dim);
  if (mode == JacobianMode::analytic) return detail::evaluate(d, params, dim, true).jacobian;
  return detail::numeric_jacobian(d, params, dim, relative_step);
}

namespace detail {

inline std::map<Transition, ResidualStats> residual_stats(const FitData& d, const Eigen::VectorXd& r) {
  std::map<Transition, ResidualStats> out;
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    auto& s = out[d.labels[i]];
    const double v = r[static_cast<Eigen::Index>(i)];
    ++s.count;
    s.mean += v;
    s.rms += v * v;
    s.max_abs = std::max(s.max_abs, std::abs(v));
  }
  for (auto& [t, s] : out) {
    s.mean /= static_cast<double>(s.count);
    s.rms = std::sqrt(s.rms / static_cast<double>(s.count));
  }
  return out;
}

}  // namespace detail

/// Levenberg-Marquardt minimization of the residual sum of squares. One
/// iteration is one damped step, accepted if it lowers the RSS and rejected
/// (with heavier damping) otherwise.
inline FitResult fit(const SpectrumPointSet& labeled, const QubitParams& init, const FitConfig& cfg = {}) {
  cfg.validate();
  validate(init);
  const auto wide = cfg.bounds.widened(2.0);
  if (!wide.contains(init))
    throw InvalidParameterError("initial guess " + to_string(init) + " lies outside twice the fit bounds");
  const auto d = detail::prepare_fit_data(labeled);

  FitResult res;
  res.initial = init;
  res.n_points = d.freq.size();
  res.underdetermined = d.freq.size() < 3;
  QubitParams x = init;
  res.clamped = clamp_into(x, cfg.bounds);
  auto ev = detail::evaluate_for_fit(d, x, cfg);
  double rss = ev.residuals.squaredNorm();
  double lambda = cfg.damping_init;
  constexpr double max_damping = 1e16;

  while (res.n_iterations < cfg.max_iterations) {
    ++res.n_iterations;
    const Eigen::Matrix3d a = ev.jacobian.transpose() * ev.jacobian;
    const Eigen::Vector3d g = ev.jacobian.transpose() * ev.residuals;
    const double floor = 1e-12 * std::max(1.0, a.diagonal().maxCoeff());
    const Eigen::Vector3d scale = a.diagonal().cwiseMax(floor);
    const Eigen::Matrix3d m = a + lambda * Eigen::Matrix3d(scale.asDiagonal());
    const Eigen::LDLT<Eigen::Matrix3d> ldlt(m);
    const Eigen::Vector3d delta = ldlt.solve(-g);
    if (ldlt.info() != Eigen::Success || !delta.allFinite()) {
      lambda *= 10.0;
      if (lambda > max_damping) break;
      continue;
    }
    QubitParams trial = x;
    for (int k = 0; k < 3; ++k) component(trial, k) += delta[k];
    const bool hit_bound = clamp_into(trial, cfg.bounds);
    const Eigen::Vector3d xv(x.e_c, x.e_l, x.e_j);
    const Eigen::Vector3d tv(trial.e_c, trial.e_l, trial.e_j);
    if ((tv - xv).norm() <= cfg.convergence_tol * xv.norm()) {
      res.converged = true;
      break;
    }
    auto trial_ev = detail::evaluate_for_fit(d, trial, cfg);
    const double trial_rss = trial_ev.residuals.squaredNorm();
    if (std::isfinite(trial_rss) && trial_rss < rss) {
      x = trial;
      ev = std::move(trial_ev);
      rss = trial_rss;
      res.clamped |= hit_bound;
      lambda = std::max(lambda * 0.1, 1e-12);
    } else {
      lambda *= 10.0;
      if (lambda > max_damping) break;
    }
  }
  res.params = x;
  res.rss = rss;
  res.per_transition = detail::residual_stats(d, ev.residuals);
  return res;
}

inline FitResult fit(const LabeledSet& labeled, const QubitParams& init, const FitConfig& cfg = {}) {
  return fit(labeled.labeled, init, cfg);
}

// ---------------------------------------------------------------------------
// Metrics

/// 1 - mean of the single-sample accuracies of est against truth.
inline double error_metric(const QubitParams& est, const QubitParams& truth, const ParamRanges& ranges = {}) {
  return 1.0 - accuracy({est}, {truth}, ranges).mean_acc;
}

/// Mean squared discrepancy (GHz^2) between the model spectrum at params and
/// labeled reference points.
inline double cost_metric(const QubitParams& params, const SpectrumPointSet& reference, int basis_dim = auto_basis) {
  if (reference.empty()) throw ConfigError("cost reference point set is empty");
  const auto r = residuals(reference, params, basis_dim);
  double s = 0.0;
  for (double v : r) s += v * v;
  return s / static_cast<double>(r.size());
}

inline MetricReport metrics(const QubitParams& est, const QubitParams& truth, const SpectrumPointSet& reference,
                            const ParamRanges& ranges = {}) {
  return {error_metric(est, truth, ranges), cost_metric(est, reference), reference.size()};
}

// ---------------------------------------------------------------------------
// Random versus learned initialization

/// Initial guess from the spectrum a case would show in measurement.
using InitialGuess = std::function<QubitParams(const SpectrumPointSet&)>;

struct ComparisonConfig {
  std::size_t n_random = 64;
  FitConfig fit = [] {
    FitConfig f;
    f.max_iterations = 5;
    return f;
  }();
  ParamRanges init_ranges;  ///< random inits are uniform over these
  ParamRanges metric_ranges;
  std::uint64_t seed = 7;
  SimConfig sim;
  ReadoutConfig readout;
  GridConfig grid;
  SpectrumKind guess_input = SpectrumKind::dispersive;
};

struct ArmStats {
  double error_avg = 0.0, error_std = 0.0;
  double cost_avg = 0.0, cost_std = 0.0;
  std::size_t n_fits = 0;
};

struct ComparisonRow {
  std::size_t case_index = 0;
  QubitParams truth;
  QubitParams guess;
  double guess_error = 0.0, guess_cost = 0.0;
  double random_error_avg = 0.0, random_cost_avg = 0.0;
  std::size_t n_reference = 0;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
  ArmStats random, ml;
  std::size_t n_random = 0;
  int iterations = 0;
  std::uint64_t seed = 0;
};

namespace detail {

/// Population mean and standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

inline ArmStats arm_stats(const std::vector<double>& err, const std::vector<double>& cost) {
  ArmStats a;
  std::tie(a.error_avg, a.error_std) = mean_std(err);
  std::tie(a.cost_avg, a.cost_std) = mean_std(cost);
  a.n_fits = err.size();
  return a;
}

}  // namespace detail

/// For every case: fit its pure reference spectrum (generator labels) from
/// n_random uniform starts and from `guess`, and collect Error and Cost of the
/// fitted parameters.
inline ComparisonTable compare_random_vs_ml(const std::vector<QubitParams>& cases, const ComparisonConfig& cfg,
                                            const InitialGuess& guess) {
  cfg.fit.validate();
  cfg.init_ranges.validate();
  std::mt19937_64 rng(cfg.seed);
  ComparisonTable table;
  table.n_random = cfg.n_random;
  table.iterations = cfg.fit.max_iterations;
  table.seed = cfg.seed;
  std::vector<double> r_err, r_cost, m_err, m_cost;

  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& truth = cases[c];
    const auto reference = pure_spectrum(truth, cfg.sim);
    if (reference.empty())
      throw ConfigError("case " + std::to_string(c) + " " + to_string(truth) + " has no transitions in the window");
    const double n = static_cast<double>(reference.size());

    ComparisonRow row;
    row.case_index = c;
    row.truth = truth;
    row.n_reference = reference.size();

    const auto shown = cfg.guess_input == SpectrumKind::pure ? reference : simulate(truth, SpectrumKind::dispersive, cfg.sim, cfg.readout);
    row.guess = guess(shown);
    const auto ml_fit = fit(reference, row.guess, cfg.fit);
    row.guess_error = error_metric(ml_fit.params, truth, cfg.metric_ranges);
    row.guess_cost = ml_fit.rss / n;
    m_err.push_back(row.guess_error);
    m_cost.push_back(row.guess_cost);

    std::vector<double> ce, cc;
    for (std::size_t k = 0; k < cfg.n_random; ++k) {
      QubitParams init;
      for (int a = 0; a < 3; ++a) component(init, a) = uniform_in(rng, cfg.init_ranges.axis(a));
      const auto f = fit(reference, init, cfg.fit);
      ce.push_back(error_metric(f.params, truth, cfg.metric_ranges));
      cc.push_back(f.rss / n);
    }
    row.random_error_avg = detail::mean_std(ce).first;
    row.random_cost_avg = detail::mean_std(cc).first;
    r_err.insert(r_err.end(), ce.begin(), ce.end());
    r_cost.insert(r_cost.end(), cc.begin(), cc.end());
    table.rows.push_back(row);
  }
  table.random = detail::arm_stats(r_err, r_cost);
  table.ml = detail::arm_stats(m_err, m_cost);
  return table;
}

/// Learned-initialization arm driven by a trained regressor.
inline ComparisonTable compare_random_vs_ml(const std::vector<QubitParams>& cases, const ComparisonConfig& cfg,
                                            const TrainedModel& model) {
  GridConfig grid = cfg.grid;
  grid.n_freq_bins = model.config.input_rows;
  grid.n_flux_bins = model.config.input_cols;
  return compare_random_vs_ml(cases, cfg, [&](const SpectrumPointSet& s) {
    return predict(model, rasterize(s, grid)).params;
  });
}

/// Comparison cases drawn uniformly from `ranges`, on a stream separate from
/// the random-init stream that shares `seed`.
inline std::vector<QubitParams> comparison_cases(std::size_t n, const ParamRanges& ranges, std::uint64_t seed) {
  return sample_params(n, ranges, seed ^ 0x9e3779b97f4a7c15ULL);
}

inline void write_comparison(std::ostream& os, const ComparisonTable& t) {
  os << "# random_inits\t" << t.n_random << "\n# iterations\t" << t.iterations << "\n# seed\t" << t.seed << "\n";
  os << "case\te_c\te_l\te_j\tguess_e_c\tguess_e_l\tguess_e_j\tml_error\tml_cost\trandom_error_avg\trandom_cost_avg"
        "\tn_reference\n";
  for (const auto& r : t.rows) {
    os << r.case_index << '\t' << format_double(r.truth.e_c) << '\t' << format_double(r.truth.e_l) << '\t'
       << format_double(r.truth.e_j) << '\t' << format_double(r.guess.e_c) << '\t' << format_double(r.guess.e_l)
       << '\t' << format_double(r.guess.e_j) << '\t' << format_double(r.guess_error) << '\t'
       << format_double(r.guess_cost) << '\t' << format_double(r.random_error_avg) << '\t'
       << format_double(r.random_cost_avg) << '\t' << r.n_reference << '\n';
  }
  os << "\narm\terror_avg\terror_std\tcost_avg\tcost_std\tn_fits\n";
  for (const auto& [name, a] : {std::pair{"random", t.random}, std::pair{"ml", t.ml}})
    os << name << '\t' << format_double(a.error_avg) << '\t' << format_double(a.error_std) << '\t'
       << format_double(a.cost_avg) << '\t' << format_double(a.cost_std) << '\t' << a.n_fits << '\n';
}

// ---------------------------------------------------------------------------
// Initial-value scans

inline constexpr double log_cost_floor = -18.0;

inline int parse_axis(const std::string& name) {
  if (name == "e_c" || name == "ec") return 0;
  if (name == "e_l" || name == "el") return 1;
  if (name == "e_j" || name == "ej") return 2;
  throw ConfigError("unknown parameter axis '" + name + "' (expected e_c, e_l or e_j)");
}

inline std::string axis_name(int axis) { return axis == 0 ? "e_c" : (axis == 1 ? "e_l" : "e_j"); }

/// n evenly spaced values from lo to hi inclusive.
inline std::vector<double> linspace(double lo, double hi, int n) {
  if (n < 2) throw ConfigError("a grid needs at least 2 nodes");
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (n - 1);
  return v;
}

/// "lo:hi:n" -> linspace(lo, hi, n).
inline std::vector<double> parse_grid_spec(const std::string& spec) {
  const auto f = split_fields(spec, ':');
  if (f.size() != 3) throw ConfigError("grid spec '" + spec + "' must look like lo:hi:n");
  const double lo = parse_double(f[0], "grid spec"), hi = parse_double(f[1], "grid spec");
  const double n = parse_double(f[2], "grid spec");
  if (n != std::floor(n) || n < 2 || n > 10000) throw ConfigError("grid spec '" + spec + "' needs an integer count >= 2");
  return linspace(lo, hi, static_cast<int>(n));
}

struct ScanAxes {
  int x_axis = 1;
  std::vector<double> x_grid;
  int y_axis = 2;
  std::vector<double> y_grid;
};

struct ContourData {
  QubitParams truth;
  ScanAxes axes;
  int fixed_axis = 0;
  double fixed_value = 0.0;
  Eigen::MatrixXd error;       ///< (x index, y index)
  Eigen::MatrixXd log10_cost;  ///< floored at log_cost_floor
};

inline double floored_log10(double cost) {
  return cost > 0.0 ? std::max(std::log10(cost), log_cost_floor) : log_cost_floor;
}

/// Fits the case's reference spectrum from every node of a 2D grid of starts,
/// holding the third parameter at fixed_value.
inline ContourData scan_initial_grid(const QubitParams& truth, const ScanAxes& axes, double fixed_value,
                                     const FitConfig& cfg, const SimConfig& sim = {},
                                     const ParamRanges& metric_ranges = {}) {
  if (axes.x_grid.size() < 2 || axes.y_grid.size() < 2) throw ConfigError("scan grids need at least 2 nodes each");
  if (axes.x_axis == axes.y_axis || axes.x_axis < 0 || axes.x_axis > 2 || axes.y_axis < 0 || axes.y_axis > 2)
    throw ConfigError("scan axes must be two distinct parameters");
  const auto reference = pure_spectrum(truth, sim);
  if (reference.empty()) throw ConfigError("scan case has no transitions in the window");
  const double n = static_cast<double>(reference.size());

  ContourData out;
  out.truth = truth;
  out.axes = axes;
  out.fixed_axis = 3 - axes.x_axis - axes.y_axis;
  out.fixed_value = fixed_value;
  const auto nx = static_cast<Eigen::Index>(axes.x_grid.size()), ny = static_cast<Eigen::Index>(axes.y_grid.size());
  out.error.resize(nx, ny);
  out.log10_cost.resize(nx, ny);
  for (Eigen::Index i = 0; i < nx; ++i) {
    for (Eigen::Index j = 0; j < ny; ++j) {
      QubitParams init;
      component(init, axes.x_axis) = axes.x_grid[static_cast<std::size_t>(i)];
      component(init, axes.y_axis) = axes.y_grid[static_cast<std::size_t>(j)];
      component(init, out.fixed_axis) = fixed_value;
      const auto f = fit(reference, init, cfg);
      out.error(i, j) = error_metric(f.params, truth, metric_ranges);
      out.log10_cost(i, j) = floored_log10(f.rss / n);
    }
  }
  return out;
}

inline void write_contour(std::ostream& os, const ContourData& c) {
  os << "# truth\t" << format_double(c.truth.e_c) << '\t' << format_double(c.truth.e_l) << '\t'
     << format_double(c.truth.e_j) << "\n# fixed\t" << axis_name(c.fixed_axis) << '\t' << format_double(c.fixed_value)
     << '\n';
  os << axis_name(c.axes.x_axis) << '\t' << axis_name(c.axes.y_axis) << "\terror\tlog10_cost\n";
  for (Eigen::Index i = 0; i < c.error.rows(); ++i)
    for (Eigen::Index j = 0; j < c.error.cols(); ++j)
      os << format_double(c.axes.x_grid[static_cast<std::size_t>(i)]) << '\t'
         << format_double(c.axes.y_grid[static_cast<std::size_t>(j)]) << '\t' << format_double(c.error(i, j)) << '\t'
         << format_double(c.log10_cost(i, j)) << '\n';
}

}  // namespace fluxfit
