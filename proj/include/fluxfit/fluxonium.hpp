#pragma once

// Single-fluxonium Hamiltonian
//
//   H = 4 E_C n^2 - E_J cos(phi + phi_ext) + E_L phi^2 / 2
//
// represented in the harmonic-oscillator eigenbasis of the LC part. The LC part
// is diagonal there; the cosine is evaluated through the eigen-decomposition of
// the truncated position operator (a + a^dag), i.e. a Gauss-Hermite DVR, which
// is exact for the truncated operator function exp(i phi) and converges
// spectrally with the basis size. All energies are in GHz (h = 1).

#include <lapacke.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "fluxfit/errors.hpp"

namespace fluxfit {

inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// Pass as basis_dim to size the oscillator basis from the parameters.
inline constexpr int auto_basis = 0;
inline constexpr int default_n_levels = 12;

struct QubitParams {
  double e_c = 0.0;  ///< charging energy, GHz
  double e_l = 0.0;  ///< inductive energy, GHz
  double e_j = 0.0;  ///< Josephson energy, GHz

  friend bool operator==(const QubitParams&, const QubitParams&) = default;
};

inline std::string to_string(const QubitParams& p) {
  std::ostringstream os;
  os.precision(6);
  os << "(E_C=" << p.e_c << ", E_L=" << p.e_l << ", E_J=" << p.e_j << ")";
  return os.str();
}

/// Throws InvalidParameterError unless e_c > 0, e_l > 0, e_j >= 0 (all finite).
inline void validate(const QubitParams& p) {
  if (!(std::isfinite(p.e_c) && std::isfinite(p.e_l) && std::isfinite(p.e_j)))
    throw InvalidParameterError("non-finite qubit parameter " + to_string(p));
  if (!(p.e_c > 0.0)) throw InvalidParameterError("E_C must be positive, got " + to_string(p));
  if (!(p.e_l > 0.0)) throw InvalidParameterError("E_L must be positive, got " + to_string(p));
  if (!(p.e_j >= 0.0)) throw InvalidParameterError("E_J must be non-negative, got " + to_string(p));
}

/// True when the triple lies inside the ranges the regressor is trained on.
inline bool in_training_range(const QubitParams& p) {
  return p.e_c >= 0.5 && p.e_c <= 3.0 && p.e_l >= 0.1 && p.e_l <= 2.0 && p.e_j >= 2.0 && p.e_j <= 10.0;
}

/// Reduced external flux in radians, stored as its representative in [0, 2pi).
class ExternalFlux {
 public:
  ExternalFlux() = default;
  explicit ExternalFlux(double phi) {
    if (!std::isfinite(phi)) throw InvalidParameterError("external flux must be finite");
    double r = std::fmod(phi, two_pi);
    if (r < 0.0) r += two_pi;
    if (r >= two_pi) r = 0.0;
    phi_ = r;
  }
  double value() const noexcept { return phi_; }

  friend bool operator==(const ExternalFlux&, const ExternalFlux&) = default;

 private:
  double phi_ = 0.0;
};

struct EnergyLevels {
  std::vector<double> energies;  ///< ascending, GHz
  int basis_dim = 0;
  QubitParams params;
  ExternalFlux flux;
};

/// <i|n|j> in the Hamiltonian eigenbasis. Hermitian; purely imaginary for the
/// real eigenvectors produced here.
struct ChargeMatrix {
  Eigen::MatrixXcd elements;
  int n_states = 0;

  std::complex<double> operator()(int i, int j) const { return elements(i, j); }
};

/// Oscillator basis size that keeps the lowest dozen levels converged to well
/// below 1e-6 GHz. The required size grows with the number of Josephson wells
/// inside the inductive envelope, roughly sqrt(E_J / E_L).
inline int auto_basis_dim(const QubitParams& p, int n_levels = default_n_levels) {
  const double wells = std::sqrt(std::max(p.e_j, 0.0) / p.e_l);
  int dim = 10 * static_cast<int>(std::ceil((60.0 + 13.0 * wells) / 10.0));
  dim = std::clamp(dim, 60, 300);
  return std::max(dim, 4 * n_levels);
}

namespace detail {

/// Eigen-decomposition of the truncated operator (a + a^dag) of dimension dim.
/// Independent of the qubit parameters, so it is computed once per dimension.
struct OscillatorGrid {
  int dim = 0;
  Eigen::VectorXd nodes;
  Eigen::MatrixXd vectors;  ///< columns are eigenvectors
};

inline std::shared_ptr<const OscillatorGrid> oscillator_grid(int dim) {
  static std::mutex mutex;
  static std::map<int, std::shared_ptr<const OscillatorGrid>> cache;
  std::lock_guard lock(mutex);
  if (auto it = cache.find(dim); it != cache.end()) return it->second;

  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(dim, dim);
  for (int m = 0; m + 1 < dim; ++m) {
    x(m, m + 1) = std::sqrt(static_cast<double>(m + 1));
    x(m + 1, m) = x(m, m + 1);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(x);
  if (solver.info() != Eigen::Success) throw NumericError("position-operator eigensolve failed");
  auto grid = std::make_shared<OscillatorGrid>();
  grid->dim = dim;
  grid->nodes = solver.eigenvalues();
  grid->vectors = solver.eigenvectors();
  cache.emplace(dim, grid);
  return grid;
}

struct Eigensystem {
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;  ///< empty unless requested
};

/// Lowest `count` eigenpairs of the symmetric matrix h (upper triangle used).
/// h is overwritten.
inline Eigensystem lowest_eigenpairs(Eigen::MatrixXd& h, int count, bool want_vectors) {
  const int n = static_cast<int>(h.rows());
  Eigensystem out;
  out.values.resize(n);
  if (want_vectors) out.vectors.resize(n, count);
  std::vector<lapack_int> support(2 * static_cast<size_t>(count));
  lapack_int found = 0;
  double dummy = 0.0;
  const lapack_int info = LAPACKE_dsyevr(
      LAPACK_COL_MAJOR, want_vectors ? 'V' : 'N', 'I', 'U', n, h.data(), n, 0.0, 0.0, 1, count, 0.0,
      &found, out.values.data(), want_vectors ? out.vectors.data() : &dummy, want_vectors ? n : 1,
      support.data());
  if (info != 0 || found != count) {
    std::ostringstream os;
    os << "dsyevr failed (info=" << info << ", found " << found << " of " << count << ", dim " << n << ")";
    throw NumericError(os.str());
  }
  out.values.conservativeResize(count);
  return out;
}

}  // namespace detail

/// Energy derivatives dE_k/d(E_C, E_L, E_J) of each retained level.
struct LevelGradients {
  Eigen::VectorXd energies;
  Eigen::MatrixXd gradients;  ///< rows: levels, cols: (e_c, e_l, e_j)
};

/// Hamiltonian of one parameter triple, with the flux-independent parts
/// precomputed so that sweeping the flux costs one matrix assembly per point.
class FluxoniumHamiltonian {
 public:
  explicit FluxoniumHamiltonian(const QubitParams& params, int basis_dim = auto_basis)
      : params_(params), dim_(basis_dim) {
    validate(params);
    if (dim_ == auto_basis) dim_ = auto_basis_dim(params);
    if (dim_ < 8) throw InvalidParameterError("basis_dim must be at least 8");
    grid_ = detail::oscillator_grid(dim_);
    omega_ = std::sqrt(8.0 * params.e_c * params.e_l);
    phi_zpf_ = std::pow(8.0 * params.e_c / params.e_l, 0.25);
    scale_ = phi_zpf_ / std::numbers::sqrt2;

    const Eigen::ArrayXd arg = scale_ * grid_->nodes.array();
    cos_nodes_ = arg.cos();
    sin_nodes_ = arg.sin();
    const auto& v = grid_->vectors;
    cos_op_ = v * cos_nodes_.matrix().asDiagonal() * v.transpose();
    sin_op_ = v * sin_nodes_.matrix().asDiagonal() * v.transpose();
  }

  const QubitParams& params() const noexcept { return params_; }
  int basis_dim() const noexcept { return dim_; }
  /// Plasma frequency sqrt(8 E_C E_L) of the LC part.
  double oscillator_frequency() const noexcept { return omega_; }
  /// phi = phi_zpf (a + a^dag) / sqrt(2).
  double phase_zpf() const noexcept { return phi_zpf_; }

  Eigen::MatrixXd matrix(ExternalFlux flux) const {
    const double c = std::cos(flux.value());
    const double s = std::sin(flux.value());
    Eigen::MatrixXd h = (-params_.e_j * c) * cos_op_ + (params_.e_j * s) * sin_op_;
    for (int k = 0; k < dim_; ++k) h(k, k) += omega_ * (k + 0.5);
    return h;
  }

  /// Real antisymmetric A with n = i A / (sqrt(2) phi_zpf), A = a^dag - a.
  Eigen::MatrixXd charge_generator() const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(dim_, dim_);
    for (int m = 0; m + 1 < dim_; ++m) {
      const double r = std::sqrt(static_cast<double>(m + 1));
      a(m + 1, m) = r;
      a(m, m + 1) = -r;
    }
    return a;
  }

  double charge_scale() const noexcept { return 1.0 / (std::numbers::sqrt2 * phi_zpf_); }

  detail::Eigensystem eigensystem(ExternalFlux flux, int count, bool want_vectors) const {
    check_count(count);
    Eigen::MatrixXd h = matrix(flux);
    return detail::lowest_eigenpairs(h, count, want_vectors);
  }

  /// Lowest `count` levels and their exact parameter derivatives
  /// (Hellmann-Feynman on the truncated matrix).
  LevelGradients levels_with_gradients(ExternalFlux flux, int count) const {
    auto sys = eigensystem(flux, count, true);
    const Eigen::ArrayXd arg = scale_ * grid_->nodes.array() + flux.value();
    const Eigen::ArrayXd cos_shift = arg.cos();
    const Eigen::ArrayXd x_sin_shift = grid_->nodes.array() * arg.sin();
    const Eigen::ArrayXd ladder = Eigen::ArrayXd::LinSpaced(dim_, 0.5, dim_ - 0.5);

    LevelGradients out;
    out.energies = sys.values;
    out.gradients.resize(count, 3);
    const Eigen::MatrixXd nodal = grid_->vectors.transpose() * sys.vectors;
    for (int k = 0; k < count; ++k) {
      const Eigen::ArrayXd u2 = sys.vectors.col(k).array().square();
      const Eigen::ArrayXd w2 = nodal.col(k).array().square();
      const double d_omega = (ladder * u2).sum();
      const double d_scale = params_.e_j * (x_sin_shift * w2).sum();
      out.gradients(k, 0) = omega_ / (2.0 * params_.e_c) * d_omega + scale_ / (4.0 * params_.e_c) * d_scale;
      out.gradients(k, 1) = omega_ / (2.0 * params_.e_l) * d_omega - scale_ / (4.0 * params_.e_l) * d_scale;
      out.gradients(k, 2) = -(cos_shift * w2).sum();
    }
    return out;
  }

 private:
  void check_count(int count) const {
    if (count < 1 || count > dim_)
      throw InvalidParameterError("requested " + std::to_string(count) + " levels from a basis of " +
                                  std::to_string(dim_));
  }

  QubitParams params_;
  int dim_;
  std::shared_ptr<const detail::OscillatorGrid> grid_;
  double omega_ = 0.0;
  double phi_zpf_ = 0.0;
  double scale_ = 0.0;
  Eigen::ArrayXd cos_nodes_, sin_nodes_;
  Eigen::MatrixXd cos_op_, sin_op_;
};

/// Resolves auto_basis and enforces basis_dim >= 4 n_levels.
inline int resolve_basis(const QubitParams& params, int n_levels, int basis_dim) {
  if (n_levels < 2) throw InvalidParameterError("n_levels must be at least 2");
  if (basis_dim == auto_basis) return auto_basis_dim(params, n_levels);
  if (basis_dim < 4 * n_levels)
    throw InvalidParameterError("basis_dim " + std::to_string(basis_dim) + " is below 4 x n_levels (" +
                                std::to_string(n_levels) + ")");
  return basis_dim;
}

/// Lowest n_levels eigenvalues of the fluxonium Hamiltonian.
inline EnergyLevels eigenenergies(const QubitParams& params, ExternalFlux flux, int n_levels = default_n_levels,
                                  int basis_dim = auto_basis) {
  validate(params);
  basis_dim = resolve_basis(params, n_levels, basis_dim);
  FluxoniumHamiltonian ham(params, basis_dim);
  auto sys = ham.eigensystem(flux, n_levels, false);
  EnergyLevels out;
  out.energies.assign(sys.values.data(), sys.values.data() + n_levels);
  out.basis_dim = basis_dim;
  out.params = params;
  out.flux = flux;
  return out;
}

/// E_j - E_i at the given flux.
inline double transition_frequency(const QubitParams& params, ExternalFlux flux, int i, int j,
                                   int basis_dim = auto_basis) {
  if (i < 0 || i >= j)
    throw IndexError("transition requires 0 <= i < j, got i=" + std::to_string(i) + ", j=" + std::to_string(j));
  const int n_levels = std::max(2, j + 1);
  if (basis_dim != auto_basis && basis_dim < 4 * n_levels)
    throw IndexError("level " + std::to_string(j) + " is beyond the converged range");
  auto levels = eigenenergies(params, flux, n_levels, basis_dim);
  return levels.energies[j] - levels.energies[i];
}

/// <i|n|j> for the lowest n_states eigenstates, given one eigensolve.
inline ChargeMatrix charge_matrix(const FluxoniumHamiltonian& ham, const Eigen::MatrixXd& eigenvectors) {
  const int n_states = static_cast<int>(eigenvectors.cols());
  const Eigen::MatrixXd a = ham.charge_generator();
  const Eigen::MatrixXd real = ham.charge_scale() * (eigenvectors.transpose() * a * eigenvectors);
  ChargeMatrix out;
  out.n_states = n_states;
  out.elements = std::complex<double>(0.0, 1.0) * real.cast<std::complex<double>>();
  return out;
}

inline ChargeMatrix charge_matrix_elements(const QubitParams& params, ExternalFlux flux, int n_states,
                                           int basis_dim = auto_basis) {
  if (n_states < 1) throw InvalidParameterError("n_states must be positive");
  validate(params);
  if (basis_dim == auto_basis) basis_dim = auto_basis_dim(params, n_states);
  if (basis_dim < 4 * n_states)
    throw NumericError("basis_dim " + std::to_string(basis_dim) + " too small for " + std::to_string(n_states) +
                       " converged states");
  FluxoniumHamiltonian ham(params, basis_dim);
  auto sys = ham.eigensystem(flux, n_states, true);
  return charge_matrix(ham, sys.vectors);
}

}  // namespace fluxfit
