#pragma once

// Brute-force qubit (x) resonator diagonalization used to check the
// second-order dispersive pulls. The coupling g n (a + a^dag) is made real by
// the resonator phase rotation a -> i a, which leaves the spectrum unchanged.

#include <Eigen/Dense>
#include <cmath>

#include "fluxfit/fluxonium.hpp"

namespace fluxfit::oracle {

/// Dressed resonator frequency shift E(s,1) - E(s,0) - w_r for qubit state s.
inline double coupled_pull(const QubitParams& params, double phi_ext, int state, double f_resonator, double g,
                           int photons = 4, int basis_dim = 0) {
  FluxoniumHamiltonian ham(params, basis_dim == 0 ? auto_basis_dim(params, 20) : basis_dim);
  const int nq = ham.basis_dim();
  const int dim = nq * photons;
  const Eigen::MatrixXd hq = ham.matrix(ExternalFlux(phi_ext));
  const Eigen::MatrixXd coupling_q = g * ham.charge_scale() * ham.charge_generator();

  Eigen::MatrixXd res_quad = Eigen::MatrixXd::Zero(photons, photons);  // a^dag - a
  for (int m = 0; m + 1 < photons; ++m) {
    res_quad(m + 1, m) = std::sqrt(m + 1.0);
    res_quad(m, m + 1) = -std::sqrt(m + 1.0);
  }

  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
  for (int p = 0; p < photons; ++p) {
    h.block(p * nq, p * nq, nq, nq) = hq;
    for (int k = 0; k < nq; ++k) h(p * nq + k, p * nq + k) += f_resonator * p;
    for (int q = 0; q < photons; ++q)
      if (res_quad(p, q) != 0.0) h.block(p * nq, q * nq, nq, nq) += res_quad(p, q) * coupling_q;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> full(h);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> bare(hq);
  const Eigen::VectorXd qubit_state = bare.eigenvectors().col(state);

  auto dressed_energy = [&](int photon) {
    Eigen::VectorXd probe = Eigen::VectorXd::Zero(dim);
    probe.segment(photon * nq, nq) = qubit_state;
    Eigen::Index best = 0;
    (full.eigenvectors().transpose() * probe).cwiseAbs().maxCoeff(&best);
    return full.eigenvalues()[best];
  };
  return dressed_energy(1) - dressed_energy(0) - f_resonator;
}

}  // namespace fluxfit::oracle
