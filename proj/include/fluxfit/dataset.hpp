#pragma once

// Parameter sampling, rasterization of point sets, and on-disk datasets
// (binary grid blobs plus a JSON manifest).

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "fluxfit/errors.hpp"
#include "fluxfit/fluxonium.hpp"
#include "fluxfit/spectrum.hpp"

namespace fluxfit {

struct Range {
  double lo = 0.0;
  double hi = 1.0;

  double width() const noexcept { return hi - lo; }
  bool contains(double v) const noexcept { return v >= lo && v <= hi; }
  friend bool operator==(const Range&, const Range&) = default;
};

/// Per-axis parameter ranges; their widths are the normalization R(E) of the
/// accuracy metric.
struct ParamRanges {
  Range e_c{0.5, 3.0};
  Range e_l{0.1, 2.0};
  Range e_j{2.0, 10.0};

  const Range& axis(int i) const { return i == 0 ? e_c : (i == 1 ? e_l : e_j); }
  Range& axis(int i) { return i == 0 ? e_c : (i == 1 ? e_l : e_j); }

  void validate() const {
    for (int i = 0; i < 3; ++i)
      if (!(axis(i).lo < axis(i).hi)) throw ConfigError("parameter range lower bound must be below upper bound");
  }

  bool contains(const QubitParams& p) const { return e_c.contains(p.e_c) && e_l.contains(p.e_l) && e_j.contains(p.e_j); }

  /// [lo / factor, hi * factor] on every axis.
  ParamRanges widened(double factor) const {
    ParamRanges out = *this;
    for (int i = 0; i < 3; ++i) out.axis(i) = {axis(i).lo / factor, axis(i).hi * factor};
    return out;
  }

  friend bool operator==(const ParamRanges&, const ParamRanges&) = default;
};

inline double component(const QubitParams& p, int i) { return i == 0 ? p.e_c : (i == 1 ? p.e_l : p.e_j); }
inline double& component(QubitParams& p, int i) { return i == 0 ? p.e_c : (i == 1 ? p.e_l : p.e_j); }

/// Clamps into the box; reports whether any axis moved.
inline bool clamp_into(QubitParams& p, const ParamRanges& box) {
  bool moved = false;
  for (int i = 0; i < 3; ++i) {
    double& v = component(p, i);
    const double c = std::clamp(v, box.axis(i).lo, box.axis(i).hi);
    moved |= (c != v);
    v = c;
  }
  return moved;
}

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform_in(std::mt19937_64& rng, const Range& r) { return r.lo + r.width() * uniform01(rng); }

/// n distinct triples, independent and uniform per axis. Triples that collide
/// on a 1e-6 GHz lattice are redrawn.
inline std::vector<QubitParams> sample_params(std::size_t n, const ParamRanges& ranges, std::uint64_t seed) {
  ranges.validate();
  std::mt19937_64 rng(seed);
  std::set<std::tuple<long long, long long, long long>> seen;
  std::vector<QubitParams> out;
  out.reserve(n);
  while (out.size() < n) {
    QubitParams p{uniform_in(rng, ranges.e_c), uniform_in(rng, ranges.e_l), uniform_in(rng, ranges.e_j)};
    auto key = std::make_tuple(std::llround(p.e_c * 1e6), std::llround(p.e_l * 1e6), std::llround(p.e_j * 1e6));
    if (seen.insert(key).second) out.push_back(p);
  }
  return out;
}

/// Seeded permutation split into (train, validation) index lists.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double val_fraction,
                                                                                   std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  else n_val = 0;
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  return {train, val};
}

enum class IntensityMode { occupancy, magnitude };

struct GridConfig {
  int n_flux_bins = 256;
  int n_freq_bins = 256;
  double f_min = 4.0;
  double f_max = 8.0;
  IntensityMode intensity_mode = IntensityMode::occupancy;

  void validate() const {
    if (n_flux_bins < 8 || n_freq_bins < 8) throw ConfigError("grid needs at least 8 bins per axis");
    if (!(f_min < f_max)) throw ConfigError("grid f_min must be below f_max");
  }
  friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

/// n_freq_bins x n_flux_bins intensities in [0, 1], row-major (row = frequency bin).
struct RasterGrid {
  int rows = 0;
  int cols = 0;
  std::vector<float> values;
  GridConfig config;

  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  float& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }

  static RasterGrid zeros(const GridConfig& cfg) {
    RasterGrid g;
    g.rows = cfg.n_freq_bins;
    g.cols = cfg.n_flux_bins;
    g.values.assign(static_cast<std::size_t>(g.rows) * g.cols, 0.0f);
    g.config = cfg;
    return g;
  }
};

inline RasterGrid rasterize(const SpectrumPointSet& points, const GridConfig& cfg = {}) {
  cfg.validate();
  RasterGrid grid = RasterGrid::zeros(cfg);
  const double span = cfg.f_max - cfg.f_min;
  for (const auto& p : points.points) {
    if (!(p.frequency >= cfg.f_min && p.frequency <= cfg.f_max)) continue;
    const int r = std::min(cfg.n_freq_bins - 1, static_cast<int>(std::floor((p.frequency - cfg.f_min) / span * cfg.n_freq_bins)));
    const double phi = ExternalFlux(p.phi_ext).value();
    const int c = std::min(cfg.n_flux_bins - 1, static_cast<int>(std::floor(phi / two_pi * cfg.n_flux_bins)));
    float& cell = grid.at(r, c);
    if (cfg.intensity_mode == IntensityMode::occupancy) {
      cell = 1.0f;
    } else {
      const double m = std::clamp(p.magnitude.value_or(1.0), 0.0, 1.0);
      cell = std::max(cell, static_cast<float>(m));
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Grid blob: 8-byte magic "FXGD\0\0\0\0", u32 rows, u32 cols, rows*cols f32,
// all little-endian.

inline constexpr std::array<char, 8> grid_magic{'F', 'X', 'G', 'D', 0, 0, 0, 0};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

/// Writes to a sibling temporary and renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline std::string encode_grid(const RasterGrid& grid) {
  std::string buf(grid_magic.begin(), grid_magic.end());
  detail::put_u32(buf, static_cast<std::uint32_t>(grid.rows));
  detail::put_u32(buf, static_cast<std::uint32_t>(grid.cols));
  buf.reserve(buf.size() + grid.values.size() * 4);
  for (float v : grid.values) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
  return buf;
}

/// Parses a grid blob; the GridConfig bins follow the stored dimensions.
inline RasterGrid decode_grid(const std::string& bytes, const GridConfig& cfg, const std::string& source) {
  if (bytes.size() < 16 || !std::equal(grid_magic.begin(), grid_magic.end(), bytes.begin()))
    throw IoError(source + ": not a grid file (bad magic)");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  RasterGrid g;
  g.rows = static_cast<int>(detail::get_u32(p + 8));
  g.cols = static_cast<int>(detail::get_u32(p + 12));
  const std::size_t n = static_cast<std::size_t>(g.rows) * static_cast<std::size_t>(g.cols);
  if (bytes.size() != 16 + 4 * n) throw IoError(source + ": truncated or oversized grid payload");
  g.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.values[i] = std::bit_cast<float>(detail::get_u32(p + 16 + 4 * i));
  g.config = cfg;
  g.config.n_freq_bins = g.rows;
  g.config.n_flux_bins = g.cols;
  return g;
}

inline void write_grid(const std::filesystem::path& path, const RasterGrid& grid) {
  detail::write_file(path, encode_grid(grid));
}

inline RasterGrid read_grid(const std::filesystem::path& path, const GridConfig& cfg = {}) {
  return decode_grid(detail::read_file(path), cfg, path.string());
}

// ---------------------------------------------------------------------------
// Datasets

inline constexpr int dataset_schema_version = 1;

struct DatasetEntry {
  QubitParams params;
  RasterGrid grid;
  Provenance provenance = Provenance::simulated_pure;
  std::size_t n_points = 0;  ///< points in the source spectrum (diagnostic)
};

struct ManifestEntry {
  QubitParams params;
  std::string path;  ///< relative to the manifest directory
  Provenance provenance = Provenance::simulated_pure;
  std::size_t n_points = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  ParamRanges ranges;
  std::uint64_t seed = 0;
  int schema_version = dataset_schema_version;
  GridConfig grid;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<DatasetEntry> entries;
};

inline std::string to_string(IntensityMode m) { return m == IntensityMode::occupancy ? "occupancy" : "magnitude"; }

inline IntensityMode parse_intensity_mode(const std::string& s) {
  if (s == "occupancy") return IntensityMode::occupancy;
  if (s == "magnitude") return IntensityMode::magnitude;
  throw ConfigError("unknown intensity mode '" + s + "'");
}

inline nlohmann::json to_json(const ParamRanges& r) {
  return {{"e_c", {r.e_c.lo, r.e_c.hi}}, {"e_l", {r.e_l.lo, r.e_l.hi}}, {"e_j", {r.e_j.lo, r.e_j.hi}}};
}

inline ParamRanges ranges_from_json(const nlohmann::json& j) {
  ParamRanges r;
  r.e_c = {j.at("e_c").at(0).get<double>(), j.at("e_c").at(1).get<double>()};
  r.e_l = {j.at("e_l").at(0).get<double>(), j.at("e_l").at(1).get<double>()};
  r.e_j = {j.at("e_j").at(0).get<double>(), j.at("e_j").at(1).get<double>()};
  return r;
}

inline nlohmann::json to_json(const GridConfig& g) {
  return {{"n_flux_bins", g.n_flux_bins}, {"n_freq_bins", g.n_freq_bins}, {"f_min", g.f_min},
          {"f_max", g.f_max},             {"intensity_mode", to_string(g.intensity_mode)}};
}

inline GridConfig grid_config_from_json(const nlohmann::json& j) {
  GridConfig g;
  g.n_flux_bins = j.at("n_flux_bins").get<int>();
  g.n_freq_bins = j.at("n_freq_bins").get<int>();
  g.f_min = j.at("f_min").get<double>();
  g.f_max = j.at("f_max").get<double>();
  g.intensity_mode = parse_intensity_mode(j.at("intensity_mode").get<std::string>());
  return g;
}

inline nlohmann::json to_json(const QubitParams& p) { return {{"e_c", p.e_c}, {"e_l", p.e_l}, {"e_j", p.e_j}}; }

inline QubitParams params_from_json(const nlohmann::json& j) {
  return {j.at("e_c").get<double>(), j.at("e_l").get<double>(), j.at("e_j").get<double>()};
}

/// Writes one grid blob per entry into "<manifest stem>_grids/" and then the
/// manifest itself (atomically, last).
inline DatasetManifest persist_dataset(const std::vector<DatasetEntry>& entries,
                                       const std::filesystem::path& manifest_path, const ParamRanges& ranges,
                                       std::uint64_t seed, const GridConfig& grid_cfg) {
  namespace fs = std::filesystem;
  const fs::path dir = manifest_path.parent_path().empty() ? fs::path(".") : manifest_path.parent_path();
  const std::string grid_dir = manifest_path.stem().string() + "_grids";
  std::error_code ec;
  fs::create_directories(dir / grid_dir, ec);
  if (ec) throw IoError("cannot create " + (dir / grid_dir).string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.ranges = ranges;
  manifest.seed = seed;
  manifest.grid = grid_cfg;
  nlohmann::json jentries = nlohmann::json::array();
  char name[32];
  for (std::size_t i = 0; i < entries.size(); ++i) {
    std::snprintf(name, sizeof(name), "%06zu.fxgd", i);
    const std::string rel = grid_dir + "/" + name;
    write_grid(dir / rel, entries[i].grid);
    manifest.entries.push_back({entries[i].params, rel, entries[i].provenance, entries[i].n_points});
    jentries.push_back({{"e_c", entries[i].params.e_c},
                        {"e_j", entries[i].params.e_j},
                        {"e_l", entries[i].params.e_l},
                        {"provenance", to_string(entries[i].provenance)},
                        {"path", rel},
                        {"n_points", entries[i].n_points}});
  }
  nlohmann::json doc = {{"schema_version", dataset_schema_version},
                        {"seed", seed},
                        {"ranges", to_json(ranges)},
                        {"grid", to_json(grid_cfg)},
                        {"entries", jentries}};
  detail::write_file_atomic(manifest_path, doc.dump(1) + "\n");
  return manifest;
}

inline DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(detail::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  DatasetManifest m;
  try {
    m.schema_version = doc.at("schema_version").get<int>();
    if (m.schema_version != dataset_schema_version)
      throw SchemaError(manifest_path.string() + ": unsupported schema_version " + std::to_string(m.schema_version) +
                        " (expected " + std::to_string(dataset_schema_version) + ")");
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.ranges = ranges_from_json(doc.at("ranges"));
    m.grid = grid_config_from_json(doc.at("grid"));
    for (const auto& e : doc.at("entries")) {
      m.entries.push_back({params_from_json(e), e.at("path").get<std::string>(),
                           parse_provenance(e.at("provenance").get<std::string>()),
                           e.value("n_points", std::size_t{0})});
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(manifest_path.string() + ": " + e.what());
  }
  return m;
}

/// Loads every grid listed in the manifest. Fails as a whole on the first bad entry.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset ds;
  ds.manifest = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path().empty() ? std::filesystem::path(".") : manifest_path.parent_path();
  ds.entries.reserve(ds.manifest.entries.size());
  for (std::size_t i = 0; i < ds.manifest.entries.size(); ++i) {
    const auto& me = ds.manifest.entries[i];
    RasterGrid grid;
    try {
      grid = read_grid(dir / me.path, ds.manifest.grid);
    } catch (const IoError& e) {
      throw IoError("dataset entry " + std::to_string(i) + ": " + e.what());
    }
    if (grid.rows != ds.manifest.grid.n_freq_bins || grid.cols != ds.manifest.grid.n_flux_bins)
      throw IoError("dataset entry " + std::to_string(i) + ": grid dimensions disagree with the manifest");
    ds.entries.push_back({me.params, std::move(grid), me.provenance, me.n_points});
  }
  return ds;
}

enum class SpectrumKind { pure, dispersive };

struct GenerateConfig {
  std::size_t count = 2048;
  SpectrumKind kind = SpectrumKind::pure;
  ParamRanges ranges;
  std::uint64_t seed = 1;
  SimConfig sim;
  ReadoutConfig readout;
  GridConfig grid;
};

inline SpectrumPointSet simulate(const QubitParams& p, SpectrumKind kind, const SimConfig& sim,
                                 const ReadoutConfig& readout) {
  return kind == SpectrumKind::pure ? pure_spectrum(p, sim) : dispersive_spectrum(p, sim, readout);
}

struct NoiseConfig {
  double jitter = 0.010;             ///< GHz, standard deviation of the frequency jitter
  double spurious_fraction = 0.05;   ///< extra random points, relative to the input count
  std::uint64_t seed = 1;
  bool keep_labels = false;
};

/// Measurement-like copy of a simulated spectrum: Gaussian jitter on every
/// frequency plus spurious points placed uniformly on the flux grid and in
/// the frequency window.
inline SpectrumPointSet add_measurement_noise(const SpectrumPointSet& in, const NoiseConfig& cfg,
                                              const SimConfig& sim = {}) {
  if (!(cfg.jitter >= 0.0)) throw ConfigError("jitter must be non-negative");
  if (!(cfg.spurious_fraction >= 0.0)) throw ConfigError("spurious_fraction must be non-negative");
  sim.validate();
  std::mt19937_64 rng(cfg.seed);
  auto gauss = [&] {
    const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  };
  SpectrumPointSet out = in;
  out.provenance = Provenance::measured;
  for (auto& p : out.points) {
    p.frequency += cfg.jitter * gauss();
    if (!cfg.keep_labels) p.label.reset();
  }
  const auto n_spurious = static_cast<std::size_t>(std::llround(cfg.spurious_fraction * static_cast<double>(in.size())));
  for (std::size_t k = 0; k < n_spurious; ++k) {
    SpectrumPoint p;
    p.phi_ext = sim.flux_at(static_cast<int>(rng() % static_cast<std::uint64_t>(sim.flux_points)));
    p.frequency = sim.f_min + (sim.f_max - sim.f_min) * uniform01(rng);
    out.points.push_back(p);
  }
  remove_duplicates(out);
  return out;
}

/// Samples parameters and renders one spectrum grid per triple, in sample order.
inline std::vector<DatasetEntry> generate_dataset(const GenerateConfig& cfg) {
  const auto params = sample_params(cfg.count, cfg.ranges, cfg.seed);
  std::vector<DatasetEntry> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    auto spectrum = simulate(p, cfg.kind, cfg.sim, cfg.readout);
    out.push_back({p, rasterize(spectrum, cfg.grid), spectrum.provenance, spectrum.size()});
  }
  return out;
}

}  // namespace fluxfit
