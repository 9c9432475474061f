#pragma once

// Static PNG figures: spectrum overlays and initial-value contour maps.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "fluxfit/errors.hpp"
#include "fluxfit/fitter.hpp"
#include "fluxfit/labeler.hpp"
#include "fluxfit/spectrum.hpp"

namespace fluxfit::plot {

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  ///< RGB, row-major, top row first

  Image(int w, int h, Rgb fill = {255, 255, 255}) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3) {
    for (std::size_t i = 0; i < pixels.size(); i += 3) std::copy(fill.begin(), fill.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i));
  }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const auto i = (static_cast<std::size_t>(y) * width + x) * 3;
    pixels[i] = c[0];
    pixels[i + 1] = c[1];
    pixels[i + 2] = c[2];
  }

  void dot(int x, int y, int r, Rgb c) {
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy <= r * r) set(x + dx, y + dy, c);
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
    for (int s = 0; s <= steps; ++s) {
      const double t = steps == 0 ? 0.0 : static_cast<double>(s) / steps;
      set(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
  }

  void rect(int x0, int y0, int x1, int y1, Rgb c) {
    line(x0, y0, x1, y0, c);
    line(x1, y0, x1, y1, c);
    line(x1, y1, x0, y1, c);
    line(x0, y1, x0, y0, c);
  }
};

inline void write_png(const std::string& path, const Image& img) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

/// Dark blue through teal to yellow, t in [0, 1].
inline Rgb colormap(double t) {
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  static constexpr std::array<std::array<double, 3>, 5> stops{{
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  const double s = t * (stops.size() - 1);
  const auto i = std::min(static_cast<std::size_t>(s), stops.size() - 2);
  const double f = s - static_cast<double>(i);
  Rgb c;
  for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(stops[i][k] * (1 - f) + stops[i + 1][k] * f));
  return c;
}

inline Rgb label_color(const std::optional<Transition>& t) {
  static constexpr std::array<Rgb, 8> palette{{{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
                                               {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {188, 189, 34}}};
  if (!t) return {150, 150, 150};
  return palette[static_cast<std::size_t>(t->lower * 5 + t->upper) % palette.size()];
}

/// Measured points (colored by label, outliers grey) over the model spectrum at params.
inline void spectrum_overlay(const std::string& path, const LabeledSet& points, const QubitParams& params,
                             const SimConfig& sim = {}, int width = 900, int height = 600) {
  Image img(width, height);
  const int margin = 30;
  const int pw = width - 2 * margin, ph = height - 2 * margin;
  auto px = [&](double phi) { return margin + static_cast<int>(std::lround(ExternalFlux(phi).value() / two_pi * pw)); };
  auto py = [&](double f) { return margin + static_cast<int>(std::lround((sim.f_max - f) / (sim.f_max - sim.f_min) * ph)); };
  img.rect(margin, margin, margin + pw, margin + ph, {0, 0, 0});

  const int n_levels = levels_needed(sim.transitions);
  FluxoniumHamiltonian ham(params, auto_basis_dim(params, n_levels));
  const int samples = 400;
  std::vector<Eigen::VectorXd> levels;
  for (int k = 0; k <= samples; ++k) levels.push_back(ham.eigensystem(ExternalFlux(two_pi * k / samples), n_levels, false).values);
  for (const auto& t : sim.transitions) {
    for (int k = 0; k < samples; ++k) {
      const double f0 = levels[k][t.upper] - levels[k][t.lower];
      const double f1 = levels[k + 1][t.upper] - levels[k + 1][t.lower];
      if (f0 < sim.f_min || f0 > sim.f_max || f1 < sim.f_min || f1 > sim.f_max) continue;
      img.line(margin + pw * k / samples, py(f0), margin + pw * (k + 1) / samples, py(f1), {60, 60, 60});
    }
  }
  for (const auto& p : points.outliers.points)
    if (p.frequency >= sim.f_min && p.frequency <= sim.f_max) img.dot(px(p.phi_ext), py(p.frequency), 2, label_color({}));
  for (const auto& p : points.labeled.points)
    if (p.frequency >= sim.f_min && p.frequency <= sim.f_max) img.dot(px(p.phi_ext), py(p.frequency), 2, label_color(p.label));
  write_png(path, img);
}

/// Heat map of one contour field; the node nearest the truth is outlined.
inline void contour_map(const std::string& path, const ContourData& c, bool log_cost, int cell = 16) {
  const Eigen::MatrixXd& field = log_cost ? c.log10_cost : c.error;
  const auto nx = static_cast<int>(field.rows()), ny = static_cast<int>(field.cols());
  Image img(nx * cell, ny * cell);
  const double lo = field.minCoeff(), hi = field.maxCoeff();
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      const Rgb col = colormap(hi > lo ? (field(i, j) - lo) / (hi - lo) : 0.0);
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) img.set(i * cell + x, (ny - 1 - j) * cell + y, col);
    }
  auto nearest = [](const std::vector<double>& g, double v) {
    return static_cast<int>(std::min_element(g.begin(), g.end(), [v](double a, double b) {
                              return std::abs(a - v) < std::abs(b - v);
                            }) - g.begin());
  };
  const int ti = nearest(c.axes.x_grid, component(c.truth, c.axes.x_axis));
  const int tj = nearest(c.axes.y_grid, component(c.truth, c.axes.y_axis));
  img.rect(ti * cell, (ny - 1 - tj) * cell, ti * cell + cell - 1, (ny - 1 - tj) * cell + cell - 1, {255, 0, 0});
  write_png(path, img);
}

}  // namespace fluxfit::plot
