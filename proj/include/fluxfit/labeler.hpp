#pragma once

// Assigns measured points to transitions by proximity to the spectrum
// simulated from an initial parameter guess.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <utility>
#include <vector>

#include "fluxfit/errors.hpp"
#include "fluxfit/fluxonium.hpp"
#include "fluxfit/spectrum.hpp"

namespace fluxfit {

struct LabelConfig {
  double window = 0.3;  ///< GHz, strict: |f - f_sim| < window
  std::vector<Transition> transitions = default_transitions();
  int basis_dim = auto_basis;

  void validate() const {
    if (!(window > 0.0)) throw ConfigError("label window must be positive");
    if (transitions.empty()) throw ConfigError("at least one transition is required for labeling");
    for (const auto& t : transitions)
      if (t.lower < 0 || t.lower >= t.upper) throw ConfigError("transition " + to_string(t) + " needs i < j");
  }
};

struct LabeledSet {
  SpectrumPointSet labeled;   ///< every point carries a label
  SpectrumPointSet outliers;  ///< no labels
  std::size_t ambiguous_count = 0;

  std::size_t size() const noexcept { return labeled.size() + outliers.size(); }
};

/// Lowest levels of one parameter triple, memoized per canonical flux.
class LevelCache {
 public:
  LevelCache(const QubitParams& params, int n_levels, int basis_dim = auto_basis)
      : n_levels_(n_levels), ham_(params, resolve_basis(params, std::max(2, n_levels), basis_dim)) {}

  const Eigen::VectorXd& at(double phi) {
    const double key = ExternalFlux(phi).value();
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, ham_.eigensystem(ExternalFlux(key), n_levels_, false).values).first;
    return it->second;
  }

 private:
  int n_levels_;
  FluxoniumHamiltonian ham_;
  std::map<double, Eigen::VectorXd> cache_;
};

inline LabeledSet label_points(const SpectrumPointSet& points, const QubitParams& params0, const LabelConfig& cfg = {}) {
  cfg.validate();
  validate(params0);
  LevelCache levels(params0, levels_needed(cfg.transitions), cfg.basis_dim);

  LabeledSet out;
  out.labeled.provenance = out.outliers.provenance = points.provenance;
  out.labeled.sim_config = out.outliers.sim_config = points.sim_config;
  for (const auto& p : points.points) {
    const auto& e = levels.at(p.phi_ext);
    int matches = 0;
    Transition hit{};
    for (const auto& t : cfg.transitions) {
      if (std::abs(p.frequency - (e[t.upper] - e[t.lower])) < cfg.window) {
        ++matches;
        hit = t;
      }
    }
    auto q = p;
    if (matches == 1) {
      q.label = hit;
      out.labeled.points.push_back(q);
    } else {
      q.label.reset();
      out.outliers.points.push_back(q);
      if (matches > 1) ++out.ambiguous_count;
    }
  }
  return out;
}

/// Distance from a point to the closest configured transition and that transition.
inline std::pair<double, Transition> nearest_transition(LevelCache& levels, const SpectrumPoint& p,
                                                        const std::vector<Transition>& transitions) {
  const auto& e = levels.at(p.phi_ext);
  std::pair<double, Transition> best{std::numeric_limits<double>::infinity(), {}};
  for (const auto& t : transitions) {
    const double d = std::abs(p.frequency - (e[t.upper] - e[t.lower]));
    if (d < best.first) best = {d, t};
  }
  return best;
}

/// Labels every point with its closest transition when that one lies within
/// the window; points with several candidates are not rejected.
inline LabeledSet label_nearest(const SpectrumPointSet& points, const QubitParams& params0, const LabelConfig& cfg = {}) {
  cfg.validate();
  validate(params0);
  LevelCache levels(params0, levels_needed(cfg.transitions), cfg.basis_dim);
  LabeledSet out;
  out.labeled.provenance = out.outliers.provenance = points.provenance;
  out.labeled.sim_config = out.outliers.sim_config = points.sim_config;
  for (const auto& p : points.points) {
    const auto [d, t] = nearest_transition(levels, p, cfg.transitions);
    auto q = p;
    if (d < cfg.window) {
      q.label = t;
      out.labeled.points.push_back(q);
    } else {
      q.label.reset();
      out.outliers.points.push_back(q);
    }
  }
  return out;
}

/// Mean over points of min(d, cap)^2, d the distance to the closest
/// transition (GHz^2). Points far from every curve cost cap^2 each.
inline double truncated_cost(const SpectrumPointSet& points, const QubitParams& params, double cap,
                             const LabelConfig& cfg = {}) {
  if (points.empty()) throw ConfigError("truncated cost of an empty point set");
  if (!(cap > 0.0)) throw ConfigError("truncation cap must be positive");
  validate(params);
  LevelCache levels(params, levels_needed(cfg.transitions), cfg.basis_dim);
  double s = 0.0;
  for (const auto& p : points.points) {
    const double d = std::min(cap, nearest_transition(levels, p, cfg.transitions).first);
    s += d * d;
  }
  return s / static_cast<double>(points.size());
}

}  // namespace fluxfit
