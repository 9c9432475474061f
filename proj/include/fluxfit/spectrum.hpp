#pragma once

// Simulated transition spectra: the bare ("pure") spectrum and the
// readout-visibility-weighted ("dispersive") spectrum.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <compare>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "fluxfit/errors.hpp"
#include "fluxfit/fluxonium.hpp"

namespace fluxfit {

struct Transition {
  int lower = 0;
  int upper = 1;

  friend auto operator<=>(const Transition&, const Transition&) = default;
};

inline std::string to_string(Transition t) { return std::to_string(t.lower) + "-" + std::to_string(t.upper); }

inline Transition parse_transition(std::string_view text) {
  const auto dash = text.find('-');
  Transition t{-1, -1};
  if (dash != std::string_view::npos) {
    auto r1 = std::from_chars(text.data(), text.data() + dash, t.lower);
    auto r2 = std::from_chars(text.data() + dash + 1, text.data() + text.size(), t.upper);
    if (r1.ec == std::errc{} && r2.ec == std::errc{} && r1.ptr == text.data() + dash &&
        r2.ptr == text.data() + text.size() && t.lower >= 0 && t.lower < t.upper)
      return t;
  }
  throw ConfigError("malformed transition label '" + std::string(text) + "' (expected i-j with i < j)");
}

inline std::vector<Transition> default_transitions() {
  return {{0, 1}, {0, 2}, {0, 3}, {0, 4}, {0, 5}, {1, 2}, {1, 3}};
}

/// Number of levels needed to evaluate every transition in the list.
inline int levels_needed(const std::vector<Transition>& transitions) {
  int top = 1;
  for (const auto& t : transitions) top = std::max(top, t.upper);
  return top + 1;
}

struct SimConfig {
  int flux_points = 256;  ///< samples per flux period
  double f_min = 4.0;     ///< GHz
  double f_max = 8.0;     ///< GHz
  std::vector<Transition> transitions = default_transitions();
  int basis_dim = auto_basis;

  void validate() const {
    if (flux_points < 2) throw ConfigError("flux_points must be at least 2");
    if (!(f_min < f_max)) throw ConfigError("f_min must be below f_max");
    if (transitions.empty()) throw ConfigError("at least one transition is required");
    for (const auto& t : transitions)
      if (t.lower < 0 || t.lower >= t.upper) throw ConfigError("transition " + to_string(t) + " needs i < j");
  }

  double flux_at(int k) const { return two_pi * k / flux_points; }
};

struct ReadoutConfig {
  double f_resonator = 6.0;          ///< GHz
  double linewidth = 0.007;          ///< kappa, GHz
  double coupling_g = 0.1;           ///< GHz
  double visibility_cutoff = 0.10;   ///< fraction of the on-resonance response
  int n_perturb_states = 20;
  bool exclude_near_resonator = false;
  double exclusion_band = 0.1;       ///< GHz, used only when exclude_near_resonator

  void validate() const {
    if (!(linewidth > 0.0)) throw ConfigError("linewidth must be positive");
    if (!(coupling_g >= 0.0)) throw ConfigError("coupling_g must be non-negative");
    if (!(visibility_cutoff >= 0.0 && visibility_cutoff < 1.0))
      throw ConfigError("visibility_cutoff must lie in [0, 1)");
    if (n_perturb_states < 2) throw ConfigError("n_perturb_states must be at least 2");
  }
};

struct SpectrumPoint {
  double phi_ext = 0.0;    ///< radians
  double frequency = 0.0;  ///< GHz
  std::optional<double> magnitude;
  std::optional<Transition> label;

  friend bool operator==(const SpectrumPoint&, const SpectrumPoint&) = default;
};

enum class Provenance { simulated_pure, simulated_dispersive, measured };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::simulated_pure: return "simulated-pure";
    case Provenance::simulated_dispersive: return "simulated-dispersive";
    case Provenance::measured: return "measured";
  }
  return "measured";
}

inline Provenance parse_provenance(std::string_view s) {
  if (s == "simulated-pure") return Provenance::simulated_pure;
  if (s == "simulated-dispersive") return Provenance::simulated_dispersive;
  if (s == "measured") return Provenance::measured;
  throw SchemaError("unknown provenance '" + std::string(s) + "'");
}

struct SpectrumPointSet {
  std::vector<SpectrumPoint> points;
  Provenance provenance = Provenance::measured;
  std::optional<SimConfig> sim_config;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool all_labeled() const {
    return std::all_of(points.begin(), points.end(), [](const auto& p) { return p.label.has_value(); });
  }
};

/// Drops repeated (phi_ext, frequency, label) triples, keeping first occurrences.
inline void remove_duplicates(SpectrumPointSet& set) {
  using Key = std::tuple<double, double, int, int>;
  std::set<Key> seen;
  std::vector<SpectrumPoint> kept;
  kept.reserve(set.points.size());
  for (const auto& p : set.points) {
    Key key{p.phi_ext, p.frequency, p.label ? p.label->lower : -1, p.label ? p.label->upper : -1};
    if (seen.insert(key).second) kept.push_back(p);
  }
  set.points = std::move(kept);
}

namespace detail {

/// Evaluates f(k) for k in [0, n) on the periodic flux grid, computing only
/// the half period and mirroring (the spectrum is symmetric about pi).
template <typename F>
auto mirrored_sweep(int n, F&& f) {
  using T = decltype(f(0));
  std::vector<T> values(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const int mirror = (n - k) % n;
    values[k] = (mirror < k) ? values[mirror] : f(k);
  }
  return values;
}

}  // namespace detail

/// Bare transition spectrum: one labeled point per in-window transition and
/// flux sample. Magnitudes are absent.
inline SpectrumPointSet pure_spectrum(const QubitParams& params, const SimConfig& cfg = {}) {
  validate(params);
  cfg.validate();
  const int n_levels = levels_needed(cfg.transitions);
  const int dim = cfg.basis_dim == auto_basis ? auto_basis_dim(params, n_levels) : cfg.basis_dim;
  FluxoniumHamiltonian ham(params, resolve_basis(params, std::max(2, n_levels), dim));

  const auto levels = detail::mirrored_sweep(cfg.flux_points, [&](int k) {
    return ham.eigensystem(ExternalFlux(cfg.flux_at(k)), n_levels, false).values;
  });

  SpectrumPointSet out;
  out.provenance = Provenance::simulated_pure;
  out.sim_config = cfg;
  for (int k = 0; k < cfg.flux_points; ++k) {
    for (const auto& t : cfg.transitions) {
      const double f = levels[k][t.upper] - levels[k][t.lower];
      if (f >= cfg.f_min && f <= cfg.f_max) out.points.push_back({cfg.flux_at(k), f, std::nullopt, t});
    }
  }
  return out;
}

/// Second-order dispersive pull of one qubit state; `near_resonance` marks a
/// vanishing denominator, in which case `chi` is meaningless.
struct DispersivePull {
  double chi = 0.0;
  bool near_resonance = false;
};

namespace detail {

inline constexpr double resonance_guard = 1e-6;  // GHz^2

/// Pulls of states [0, n_states) from one eigensolve with n_perturb_states vectors.
/// chi_s = g^2 sum_{s'} |n_{s's}|^2 2 w / (w_r^2 - w^2), w = E_s' - E_s: the shift of
/// the resonator frequency when the qubit sits in s.
inline std::vector<DispersivePull> dispersive_pulls(const FluxoniumHamiltonian& ham, ExternalFlux flux,
                                                    int n_states, const ReadoutConfig& r) {
  const int m = r.n_perturb_states;
  std::vector<DispersivePull> out(static_cast<std::size_t>(n_states));
  if (r.coupling_g == 0.0) return out;
  const auto sys = ham.eigensystem(flux, m, true);
  const Eigen::MatrixXd a = ham.charge_generator();
  const Eigen::MatrixXd n_abs2 =
      (ham.charge_scale() * (sys.vectors.transpose() * (a * sys.vectors))).array().square().matrix();
  const double g2 = r.coupling_g * r.coupling_g;
  const double wr2 = r.f_resonator * r.f_resonator;
  for (int s = 0; s < n_states; ++s) {
    double chi = 0.0;
    for (int sp = 0; sp < m; ++sp) {
      if (sp == s || n_abs2(sp, s) < 1e-24) continue;
      const double w = sys.values[sp] - sys.values[s];
      const double denom = wr2 - w * w;
      if (std::abs(denom) < resonance_guard) {
        out[s].near_resonance = true;
        break;
      }
      chi += n_abs2(sp, s) * 2.0 * w / denom;
    }
    out[s].chi = g2 * chi;
  }
  return out;
}

inline int dispersive_basis(const QubitParams& params, const ReadoutConfig& r, int basis_dim) {
  if (basis_dim != auto_basis) return resolve_basis(params, r.n_perturb_states, basis_dim);
  return auto_basis_dim(params, r.n_perturb_states);
}

}  // namespace detail

/// Dispersive pull chi_s (GHz) of qubit state `state` on the readout resonator.
inline double dispersive_pull(const QubitParams& params, ExternalFlux flux, int state, const ReadoutConfig& r = {},
                              int basis_dim = auto_basis) {
  validate(params);
  r.validate();
  if (state < 0 || state >= r.n_perturb_states)
    throw IndexError("state " + std::to_string(state) + " outside the perturbative sum (" +
                     std::to_string(r.n_perturb_states) + " states)");
  FluxoniumHamiltonian ham(params, detail::dispersive_basis(params, r, basis_dim));
  const auto pulls = detail::dispersive_pulls(ham, flux, state + 1, r);
  if (pulls[state].near_resonance)
    throw NearResonanceError("state " + std::to_string(state) + " has a transition resonant with the readout at flux " +
                             std::to_string(flux.value()));
  return pulls[state].chi;
}

/// Normalized Lorentzian response (kappa/2)^2 / (delta^2 + (kappa/2)^2).
inline double lorentzian_response(double detuning, double linewidth) {
  const double half = 0.5 * linewidth;
  return half * half / (detuning * detuning + half * half);
}

/// Readout contrast when a saturation drive equalizes populations of i and j
/// while probing at the state-i-pulled resonator.
inline double readout_visibility(double chi_i, double chi_j, double linewidth) {
  return std::abs(lorentzian_response(0.0, linewidth) - lorentzian_response(0.5 * (chi_i - chi_j), linewidth));
}

/// Pure spectrum filtered by readout visibility; each kept point carries its
/// visibility as magnitude.
inline SpectrumPointSet dispersive_spectrum(const QubitParams& params, const SimConfig& cfg = {},
                                            const ReadoutConfig& r = {}) {
  validate(params);
  cfg.validate();
  r.validate();
  const int n_states = levels_needed(cfg.transitions);
  if (n_states > r.n_perturb_states) throw ConfigError("n_perturb_states is below the highest configured level");
  FluxoniumHamiltonian ham(params, detail::dispersive_basis(params, r, cfg.basis_dim));

  struct FluxSample {
    Eigen::VectorXd levels;
    std::vector<DispersivePull> pulls;
  };
  const auto samples = detail::mirrored_sweep(cfg.flux_points, [&](int k) {
    const ExternalFlux flux(cfg.flux_at(k));
    FluxSample s;
    s.levels = ham.eigensystem(flux, n_states, false).values;
    s.pulls = detail::dispersive_pulls(ham, flux, n_states, r);
    return s;
  });

  SpectrumPointSet out;
  out.provenance = Provenance::simulated_dispersive;
  out.sim_config = cfg;
  for (int k = 0; k < cfg.flux_points; ++k) {
    const auto& s = samples[k];
    for (const auto& t : cfg.transitions) {
      const double f = s.levels[t.upper] - s.levels[t.lower];
      if (!(f >= cfg.f_min && f <= cfg.f_max)) continue;
      const auto& pi = s.pulls[t.lower];
      const auto& pj = s.pulls[t.upper];
      if (pi.near_resonance || pj.near_resonance) continue;
      if (r.exclude_near_resonator && std::abs(f - r.f_resonator) < r.exclusion_band) continue;
      const double v = readout_visibility(pi.chi, pj.chi, r.linewidth);
      if (v > 0.0 && v >= r.visibility_cutoff) out.points.push_back({cfg.flux_at(k), f, v, t});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Point-set text format
//
//   # provenance: simulated-pure
//   phi_ext_rad,freq_ghz,magnitude,label
//   0,5.656854249492381,,0-2
//
// Numbers use the shortest round-trip representation; empty fields are absent.

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw IoError(context + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline constexpr std::string_view point_header = "phi_ext_rad,freq_ghz,magnitude,label";

inline void write_points(std::ostream& os, const SpectrumPointSet& set) {
  os << "# provenance: " << to_string(set.provenance) << "\n" << point_header << "\n";
  for (const auto& p : set.points) {
    os << format_double(p.phi_ext) << ',' << format_double(p.frequency) << ',';
    if (p.magnitude) os << format_double(*p.magnitude);
    os << ',';
    if (p.label) os << to_string(*p.label);
    os << '\n';
  }
}

inline SpectrumPointSet read_points(std::istream& is, const std::string& source = "point set") {
  SpectrumPointSet set;
  std::string line;
  bool header_seen = false;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      constexpr std::string_view key = "# provenance:";
      if (line.starts_with(key)) {
        std::string_view v(line);
        v.remove_prefix(key.size());
        while (!v.empty() && v.front() == ' ') v.remove_prefix(1);
        set.provenance = parse_provenance(v);
      }
      continue;
    }
    if (!header_seen) {
      if (line != point_header) throw SchemaError(source + ": expected header '" + std::string(point_header) + "'");
      header_seen = true;
      continue;
    }
    const auto fields = split_fields(line, ',');
    const std::string ctx = source + ":" + std::to_string(line_no);
    if (fields.size() != 4) throw IoError(ctx + ": expected 4 fields");
    SpectrumPoint p;
    p.phi_ext = parse_double(fields[0], ctx);
    p.frequency = parse_double(fields[1], ctx);
    if (!fields[2].empty()) p.magnitude = parse_double(fields[2], ctx);
    if (!fields[3].empty()) p.label = parse_transition(fields[3]);
    set.points.push_back(p);
  }
  if (!header_seen) throw SchemaError(source + ": missing header");
  return set;
}

inline void write_points(const std::string& path, const SpectrumPointSet& set) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_points(os, set);
  if (!os) throw IoError("failed writing " + path);
}

inline SpectrumPointSet read_points(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  return read_points(is, path);
}

}  // namespace fluxfit
