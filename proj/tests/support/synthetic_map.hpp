#pragma once

// Synthetic two-tone magnitude maps for preprocess and pipeline tests.

#include <cmath>
#include <random>
#include <vector>

#include "fluxfit/preprocess.hpp"
#include "fluxfit/spectrum.hpp"

namespace fluxfit::testing {

struct MapSpec {
  int flux_columns = 256;   ///< one column per flux grid value over a full period
  int freq_rows = 401;      ///< 4..8 GHz at 10 MHz
  double f_min = 4.0, f_max = 8.0;
  double bias_at_zero = 0.1, bias_at_pi = 0.6;
  double line_amplitude = 10.0;
  double line_hwhm = 0.015;  ///< GHz
  double noise_sigma = 1.0;
  double bright_row_ghz = 6.0;  ///< a resonator-like band that sets the global maximum
  double bright_amplitude = 100.0;
  unsigned seed = 3;
};

/// Lorentzian lines at every point's frequency in the column nearest its flux,
/// over Gaussian background noise.
inline MagnitudeMap render_map(const SpectrumPointSet& points, const MapSpec& s = {}) {
  MagnitudeMap map;
  const FluxMap cal{s.bias_at_zero, s.bias_at_pi};
  for (int c = 0; c < s.flux_columns; ++c) map.bias_axis.push_back(cal.bias(two_pi * c / s.flux_columns));
  for (int r = 0; r < s.freq_rows; ++r) map.freq_axis.push_back(s.f_min + (s.f_max - s.f_min) * r / (s.freq_rows - 1));
  map.magnitudes = Eigen::MatrixXd::Zero(s.freq_rows, s.flux_columns);
  std::mt19937 rng(s.seed);
  std::normal_distribution<double> noise(0.0, s.noise_sigma);
  for (int c = 0; c < s.flux_columns; ++c)
    for (int r = 0; r < s.freq_rows; ++r) map.magnitudes(r, c) = noise(rng);
  const double g2 = s.line_hwhm * s.line_hwhm;
  for (const auto& p : points.points) {
    const int c = static_cast<int>(std::lround(ExternalFlux(p.phi_ext).value() / two_pi * s.flux_columns)) % s.flux_columns;
    for (int r = 0; r < s.freq_rows; ++r) {
      const double d = map.freq_axis[static_cast<std::size_t>(r)] - p.frequency;
      map.magnitudes(r, c) += s.line_amplitude * g2 / (d * d + g2);
    }
  }
  for (int c = 0; c < s.flux_columns; ++c)
    for (int r = 0; r < s.freq_rows; ++r) {
      const double d = map.freq_axis[static_cast<std::size_t>(r)] - s.bright_row_ghz;
      map.magnitudes(r, c) += s.bright_amplitude * g2 / (d * d + g2);
    }
  return map;
}

}  // namespace fluxfit::testing
