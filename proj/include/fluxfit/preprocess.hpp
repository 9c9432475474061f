#pragma once

// Measured two-tone magnitude maps: flux calibration, magnitude filtering and
// continuous-wavelet peak extraction into a SpectrumPointSet.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fluxfit/errors.hpp"
#include "fluxfit/spectrum.hpp"

namespace fluxfit {

/// Half-open index rectangle [row_begin, row_end) x [col_begin, col_end);
/// rows index frequency, columns index bias.
struct IndexRect {
  int row_begin = 0, row_end = 0;
  int col_begin = 0, col_end = 0;
};

struct MagnitudeMap {
  std::vector<double> bias_axis;  ///< device units, or phi_ext once calibrated
  std::vector<double> freq_axis;  ///< GHz
  Eigen::MatrixXd magnitudes;     ///< freq x bias
  std::optional<IndexRect> background_region;
  bool flux_calibrated = false;

  int rows() const { return static_cast<int>(freq_axis.size()); }
  int cols() const { return static_cast<int>(bias_axis.size()); }

  void validate() const {
    auto monotone = [](const std::vector<double>& a) {
      if (a.size() < 2) return false;
      const bool up = a[1] > a[0];
      for (std::size_t i = 1; i < a.size(); ++i)
        if (up ? !(a[i] > a[i - 1]) : !(a[i] < a[i - 1])) return false;
      return true;
    };
    if (!monotone(bias_axis)) throw ShapeError("bias axis must be strictly monotone with at least 2 entries");
    if (!monotone(freq_axis)) throw ShapeError("frequency axis must be strictly monotone with at least 2 entries");
    if (magnitudes.rows() != rows() || magnitudes.cols() != cols())
      throw ShapeError("magnitude array is " + std::to_string(magnitudes.rows()) + "x" +
                       std::to_string(magnitudes.cols()) + " but the axes are " + std::to_string(rows()) + "x" +
                       std::to_string(cols()));
    if (!magnitudes.allFinite()) throw ShapeError("magnitude array contains non-finite values");
    if (background_region) {
      const auto& b = *background_region;
      if (b.row_begin < 0 || b.col_begin < 0 || b.row_end > rows() || b.col_end > cols() ||
          b.row_begin >= b.row_end || b.col_begin >= b.col_end)
        throw ConfigError("background region lies outside the map or is empty");
    }
  }
};

struct FilterConfig {
  double sigma_multiplier = 2.5;
  double max_fraction = 0.20;

  void validate() const {
    if (!(sigma_multiplier > 0.0)) throw ConfigError("sigma_multiplier must be positive");
    if (!(max_fraction > 0.0 && max_fraction <= 1.0)) throw ConfigError("max_fraction must lie in (0, 1]");
  }
};

struct FluxMap {
  double bias_at_zero = 0.0;
  double bias_at_pi = 1.0;

  void validate() const {
    if (!std::isfinite(bias_at_zero) || !std::isfinite(bias_at_pi))
      throw ConfigError("calibration biases must be finite");
    if (bias_at_zero == bias_at_pi) throw ConfigError("calibration biases for phi = 0 and phi = pi coincide");
  }

  double phi(double bias) const { return std::numbers::pi * (bias - bias_at_zero) / (bias_at_pi - bias_at_zero); }
  double bias(double phi) const { return bias_at_zero + phi / std::numbers::pi * (bias_at_pi - bias_at_zero); }
};

struct PeakConfig {
  std::vector<int> wavelet_widths{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
  int min_ridge_length = 3;
  int min_peak_width = 2;        ///< contiguous masked bins under an accepted peak
  std::optional<int> smoothing;  ///< moving-average window in bins
  bool refine = true;            ///< parabolic sub-bin refinement

  void validate() const {
    if (wavelet_widths.empty()) throw ConfigError("wavelet_widths must be non-empty");
    for (int w : wavelet_widths)
      if (w < 1) throw ConfigError("wavelet widths must be positive");
    if (min_ridge_length < 1) throw ConfigError("min_ridge_length must be at least 1");
    if (min_peak_width < 1) throw ConfigError("min_peak_width must be at least 1");
    if (smoothing && *smoothing < 1) throw ConfigError("smoothing window must be positive");
  }
};

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Replaces the bias axis by phi_ext through the affine map fixed by the two
/// calibration biases.
inline MagnitudeMap flux_calibrate(const MagnitudeMap& map, const FluxMap& cal) {
  cal.validate();
  map.validate();
  MagnitudeMap out = map;
  for (auto& b : out.bias_axis) b = cal.phi(b);
  out.flux_calibrated = true;
  return out;
}

namespace detail {

inline double median(std::vector<double> v) {
  const std::size_t n = v.size();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  const double hi = *mid;
  if (n % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), mid));
}

/// (median, 1.4826 * MAD) of a sample.
inline std::pair<double, double> robust_stats(const std::vector<double>& v) {
  const double med = median(v);
  std::vector<double> dev(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) dev[i] = std::abs(v[i] - med);
  return {med, 1.4826 * median(std::move(dev))};
}

}  // namespace detail

/// True where magnitude > background mean + k sigma and below max_fraction of
/// the global maximum. The background is the explicit region (mean, standard
/// deviation) when present, otherwise each frequency row's median and
/// 1.4826 * MAD, falling back to the whole-map MAD for rows with zero spread.
inline Mask magnitude_filter(const MagnitudeMap& map, const FilterConfig& cfg = {}) {
  cfg.validate();
  map.validate();
  const auto& m = map.magnitudes;
  const double upper = cfg.max_fraction * m.maxCoeff();
  Eigen::VectorXd mean(m.rows()), sigma(m.rows());

  if (map.background_region) {
    const auto& b = *map.background_region;
    const Eigen::MatrixXd block = m.block(b.row_begin, b.col_begin, b.row_end - b.row_begin, b.col_end - b.col_begin);
    const double mu = block.mean();
    const double var = (block.array() - mu).square().sum() / static_cast<double>(block.size());
    if (!(var > 0.0)) throw DegenerateBackgroundError("background region has zero variance");
    mean.setConstant(mu);
    sigma.setConstant(std::sqrt(var));
  } else {
    std::vector<double> all(m.data(), m.data() + m.size());
    const double global_sigma = detail::robust_stats(all).second;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
      auto [med, s] = detail::robust_stats(row);
      if (!(s > 0.0)) s = global_sigma;
      if (!(s > 0.0)) throw DegenerateBackgroundError("map background has zero spread (constant map?)");
      mean[r] = med;
      sigma[r] = s;
    }
  }

  Mask mask(m.rows(), m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      mask(r, c) = m(r, c) > mean[r] + cfg.sigma_multiplier * sigma[r] && m(r, c) < upper;
  return mask;
}

namespace detail {

/// Mexican-hat wavelet of width a sampled on min(10 a, n) points.
inline std::vector<double> ricker(int points, double a) {
  const double amp = 2.0 / (std::sqrt(3.0 * a) * std::pow(std::numbers::pi, 0.25));
  std::vector<double> w(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) {
    const double t = i - (points - 1.0) / 2.0;
    const double q = t * t / (a * a);
    w[static_cast<std::size_t>(i)] = amp * (1.0 - q) * std::exp(-0.5 * q);
  }
  return w;
}

/// "Same"-mode convolution with zero padding.
inline std::vector<double> convolve_same(const std::vector<double>& x, const std::vector<double>& k) {
  const int n = static_cast<int>(x.size()), m = static_cast<int>(k.size());
  const int offset = (m - 1) / 2;
  std::vector<double> out(x.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < m; ++j) {
      const int xi = i + offset - j;
      if (xi >= 0 && xi < n) s += x[static_cast<std::size_t>(xi)] * k[static_cast<std::size_t>(j)];
    }
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

/// Bin positions of ridges in the CWT of one trace, each located at its
/// smallest-width end. Ridges are grown from the widest scale down, joining
/// the nearest local maximum within ceil(width / 4) bins.
inline std::vector<int> cwt_ridge_peaks(const std::vector<double>& trace, std::vector<int> widths,
                                        int min_ridge_length) {
  const int n = static_cast<int>(trace.size());
  std::sort(widths.begin(), widths.end());
  widths.erase(std::unique(widths.begin(), widths.end()), widths.end());
  const int nw = static_cast<int>(widths.size());

  std::vector<std::vector<int>> maxima(static_cast<std::size_t>(nw));
  for (int s = 0; s < nw; ++s) {
    const double a = widths[static_cast<std::size_t>(s)];
    const auto coef = convolve_same(trace, ricker(std::min(10 * widths[static_cast<std::size_t>(s)], n), a));
    for (int i = 0; i < n; ++i) {
      const double v = coef[static_cast<std::size_t>(i)];
      const double left = i > 0 ? coef[static_cast<std::size_t>(i - 1)] : -INFINITY;
      const double right = i + 1 < n ? coef[static_cast<std::size_t>(i + 1)] : -INFINITY;
      if (v > 0.0 && v > left && v >= right) maxima[static_cast<std::size_t>(s)].push_back(i);
    }
  }

  struct Ridge {
    int position;
    int length;
    int gap;
  };
  std::vector<Ridge> active, finished;
  const int gap_thresh = widths.front();
  for (int s = nw - 1; s >= 0; --s) {
    const int max_dist = std::max(1, (widths[static_cast<std::size_t>(s)] + 3) / 4);
    std::vector<bool> used(maxima[static_cast<std::size_t>(s)].size(), false);
    for (auto& r : active) {
      int best = -1, best_d = max_dist + 1;
      for (std::size_t k = 0; k < used.size(); ++k) {
        if (used[k]) continue;
        const int d = std::abs(maxima[static_cast<std::size_t>(s)][k] - r.position);
        if (d <= max_dist && d < best_d) {
          best = static_cast<int>(k);
          best_d = d;
        }
      }
      if (best >= 0) {
        used[static_cast<std::size_t>(best)] = true;
        r.position = maxima[static_cast<std::size_t>(s)][static_cast<std::size_t>(best)];
        ++r.length;
        r.gap = 0;
      } else {
        ++r.gap;
      }
    }
    std::vector<Ridge> still;
    for (auto& r : active) (r.gap > gap_thresh ? finished : still).push_back(r);
    active = std::move(still);
    for (std::size_t k = 0; k < used.size(); ++k)
      if (!used[k]) active.push_back({maxima[static_cast<std::size_t>(s)][k], 1, 0});
  }
  finished.insert(finished.end(), active.begin(), active.end());

  std::vector<int> peaks;
  for (const auto& r : finished)
    if (r.length >= min_ridge_length) peaks.push_back(r.position);
  std::sort(peaks.begin(), peaks.end());
  peaks.erase(std::unique(peaks.begin(), peaks.end()), peaks.end());
  return peaks;
}

/// Axis value at a fractional bin index.
inline double axis_at(const std::vector<double>& axis, double pos) {
  const int last = static_cast<int>(axis.size()) - 1;
  pos = std::clamp(pos, 0.0, static_cast<double>(last));
  const int i = std::min(static_cast<int>(std::floor(pos)), last - 1);
  const double t = pos - i;
  return axis[static_cast<std::size_t>(i)] * (1.0 - t) + axis[static_cast<std::size_t>(i + 1)] * t;
}

}  // namespace detail

/// One point per accepted CWT ridge in each flux column of the masked map,
/// ordered by ascending flux and then frequency.
inline SpectrumPointSet extract_peaks(const MagnitudeMap& map, const Mask& mask, const PeakConfig& pcfg = {}) {
  pcfg.validate();
  map.validate();
  if (!map.flux_calibrated) throw ConfigError("extract_peaks needs a flux-calibrated map (run flux_calibrate first)");
  if (mask.rows() != map.rows() || mask.cols() != map.cols()) throw ShapeError("mask does not match the map");

  const auto& m = map.magnitudes;
  double norm = 0.0;
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      if (mask(r, c)) norm = std::max(norm, std::abs(m(r, c)));

  SpectrumPointSet out;
  out.provenance = Provenance::measured;
  if (norm == 0.0) return out;

  struct Found {
    double phi, freq, mag;
  };
  std::vector<Found> found;
  const int n = map.rows();
  for (int c = 0; c < map.cols(); ++c) {
    std::vector<double> trace(static_cast<std::size_t>(n), 0.0);
    bool any = false;
    for (int r = 0; r < n; ++r)
      if (mask(r, c)) {
        trace[static_cast<std::size_t>(r)] = m(r, c);
        any = true;
      }
    if (!any) continue;
    if (pcfg.smoothing && *pcfg.smoothing > 1)
      trace = detail::convolve_same(trace, std::vector<double>(static_cast<std::size_t>(*pcfg.smoothing),
                                                               1.0 / *pcfg.smoothing));
    for (int pos : detail::cwt_ridge_peaks(trace, pcfg.wavelet_widths, pcfg.min_ridge_length)) {
      // Settle on the local maximum of the trace next to the ridge end.
      int best = pos;
      for (int d = -2; d <= 2; ++d) {
        const int i = pos + d;
        if (i >= 0 && i < n && trace[static_cast<std::size_t>(i)] > trace[static_cast<std::size_t>(best)]) best = i;
      }
      const double peak = trace[static_cast<std::size_t>(best)];
      if (!(peak > 0.0)) continue;
      int lo = best, hi = best;
      while (lo > 0 && mask(lo - 1, c)) --lo;
      while (hi + 1 < n && mask(hi + 1, c)) ++hi;
      if (hi - lo + 1 < pcfg.min_peak_width) continue;
      double offset = 0.0;
      if (pcfg.refine && best > 0 && best + 1 < n) {
        const double y0 = trace[static_cast<std::size_t>(best - 1)], y2 = trace[static_cast<std::size_t>(best + 1)];
        const double curv = y0 - 2.0 * peak + y2;
        if (curv < 0.0) offset = std::clamp(0.5 * (y0 - y2) / curv, -0.5, 0.5);
      }
      found.push_back({map.bias_axis[static_cast<std::size_t>(c)], detail::axis_at(map.freq_axis, best + offset),
                       std::clamp(peak / norm, 0.0, 1.0)});
    }
  }
  std::sort(found.begin(), found.end(), [](const Found& a, const Found& b) {
    return a.phi != b.phi ? a.phi < b.phi : a.freq < b.freq;
  });
  for (const auto& f : found) out.points.push_back({f.phi, f.freq, f.mag, std::nullopt});
  remove_duplicates(out);
  return out;
}

// ---------------------------------------------------------------------------
// Point-set transforms for reduced data.

/// Keeps points with canonical flux in [0, pi] and adds their mirror images
/// 2 pi - phi (points at 0 and pi are not duplicated).
inline SpectrumPointSet mirror_about_pi(const SpectrumPointSet& in) {
  SpectrumPointSet out = in;
  out.points.clear();
  for (const auto& p : in.points) {
    const double phi = ExternalFlux(p.phi_ext).value();
    if (phi > std::numbers::pi + 1e-12) continue;
    auto q = p;
    q.phi_ext = phi;
    out.points.push_back(q);
    if (phi > 1e-12 && phi < std::numbers::pi - 1e-12) {
      q.phi_ext = two_pi - phi;
      out.points.push_back(q);
    }
  }
  remove_duplicates(out);
  return out;
}

/// Keeps every `stride`-th distinct flux value (in ascending canonical order).
inline SpectrumPointSet thin_flux(const SpectrumPointSet& in, int stride) {
  if (stride < 1) throw ConfigError("thinning stride must be at least 1");
  std::vector<double> fluxes;
  for (const auto& p : in.points) fluxes.push_back(ExternalFlux(p.phi_ext).value());
  std::sort(fluxes.begin(), fluxes.end());
  fluxes.erase(std::unique(fluxes.begin(), fluxes.end()), fluxes.end());
  std::map<double, bool> keep;
  for (std::size_t i = 0; i < fluxes.size(); ++i) keep[fluxes[i]] = (i % static_cast<std::size_t>(stride)) == 0;
  SpectrumPointSet out = in;
  out.points.clear();
  for (const auto& p : in.points)
    if (keep[ExternalFlux(p.phi_ext).value()]) out.points.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Map text formats.
//
// Dense:   first row "freq_ghz\bias,b0,b1,...", then "f,m0,m1,..." per frequency.
// Triplet: header "bias,freq_ghz,magnitude", then one line per cell.
// Lines starting with '#' are comments.

inline constexpr std::string_view triplet_header = "bias,freq_ghz,magnitude";
inline constexpr std::string_view dense_corner = "freq_ghz\\bias";

inline MagnitudeMap read_magnitude_map(std::istream& is, const std::string& source = "map") {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    lines.push_back(line);
  }
  if (lines.size() < 2) throw IoError(source + ": map needs a header and at least one data row");

  MagnitudeMap map;
  if (lines.front() == triplet_header) {
    std::map<double, std::map<double, double>> cells;  // freq -> bias -> magnitude
    std::vector<double> biases;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto f = split_fields(lines[i], ',');
      const std::string ctx = source + ": data row " + std::to_string(i);
      if (f.size() != 3) throw IoError(ctx + ": expected 3 fields");
      const double b = parse_double(f[0], ctx), fr = parse_double(f[1], ctx), mg = parse_double(f[2], ctx);
      if (!cells[fr].emplace(b, mg).second) throw IoError(ctx + ": duplicate cell");
      biases.push_back(b);
    }
    std::sort(biases.begin(), biases.end());
    biases.erase(std::unique(biases.begin(), biases.end()), biases.end());
    map.bias_axis = biases;
    for (const auto& [fr, row] : cells) map.freq_axis.push_back(fr);
    map.magnitudes.resize(map.rows(), map.cols());
    int r = 0;
    for (const auto& [fr, row] : cells) {
      if (row.size() != biases.size()) throw IoError(source + ": triplet list does not cover a full grid");
      int c = 0;
      for (const auto& [b, mg] : row) map.magnitudes(r, c++) = mg;
      ++r;
    }
  } else {
    const auto head = split_fields(lines.front(), ',');
    if (head.size() < 3) throw IoError(source + ": dense map header needs at least two bias values");
    for (std::size_t j = 1; j < head.size(); ++j) map.bias_axis.push_back(parse_double(head[j], source + ": header"));
    map.magnitudes.resize(static_cast<Eigen::Index>(lines.size() - 1), map.cols());
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto f = split_fields(lines[i], ',');
      const std::string ctx = source + ": data row " + std::to_string(i);
      if (f.size() != head.size()) throw IoError(ctx + ": expected " + std::to_string(head.size()) + " fields");
      map.freq_axis.push_back(parse_double(f[0], ctx));
      for (std::size_t j = 1; j < f.size(); ++j)
        map.magnitudes(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(j - 1)) = parse_double(f[j], ctx);
    }
  }
  map.validate();
  return map;
}

inline MagnitudeMap read_magnitude_map(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  return read_magnitude_map(is, path);
}

inline void write_magnitude_map(std::ostream& os, const MagnitudeMap& map) {
  os << dense_corner;
  for (double b : map.bias_axis) os << ',' << format_double(b);
  os << '\n';
  for (int r = 0; r < map.rows(); ++r) {
    os << format_double(map.freq_axis[static_cast<std::size_t>(r)]);
    for (int c = 0; c < map.cols(); ++c) os << ',' << format_double(map.magnitudes(r, c));
    os << '\n';
  }
}

inline void write_magnitude_map(const std::string& path, const MagnitudeMap& map) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_magnitude_map(os, map);
  if (!os) throw IoError("failed writing " + path);
}

}  // namespace fluxfit
