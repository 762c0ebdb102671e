// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file metrology.hpp
 * @brief Quantum Fisher information of the two-source state for rotations in
 *        the x-y plane, and the Cramer-Rao bound.
 *
 * Jx only couples neighbours k, k+1 inside a block, with |<k+1|Jx|k>|^2 =
 * (k+1)(N-k)/4. For a state diagonal in that basis the general eigenvalue
 * formula F = 2 sum_ij (l_i - l_j)^2 / (l_i + l_j) |J_ij|^2 therefore reduces
 * to one term per neighbouring pair:
 *
 *   F = sum_N sum_k (l_k - l_{k+1})^2 / (l_k + l_{k+1}) * (k+1)(N-k).
 *
 * Pairs with l_k + l_{k+1} = 0 contribute nothing.
 */

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "twin_metrology/error.hpp"
#include "twin_metrology/spin_algebra.hpp"
#include "twin_metrology/state_model.hpp"

namespace twin_metrology {

enum class QfiMethod { exact, oracle, continuum, perturbative, plateau };

inline std::string_view to_string(QfiMethod m) noexcept {
  switch (m) {
    case QfiMethod::exact: return "exact";
    case QfiMethod::oracle: return "oracle";
    case QfiMethod::continuum: return "continuum";
    case QfiMethod::perturbative: return "perturbative";
    case QfiMethod::plateau: return "plateau";
  }
  return "unknown";
}

struct QfiReport {
  double value = 0.0;
  std::vector<int> blocks;             // total atom number of each contribution
  std::vector<double> contributions;   // per block, same order; empty for closed forms
  double mean_atoms = 0.0;
  QfiMethod method = QfiMethod::exact;
  double skipped_mass = 0.0;           // eigenvalue pairs below the denormal guard
  std::optional<double> analytic;      // closed form, when one applies

  /// F / N_bar; the shot-noise limit is 1.
  [[nodiscard]] double over_snl() const noexcept { return mean_atoms > 0 ? value / mean_atoms : 0.0; }
};

inline constexpr double kPairGuard = 1e-300;

[[nodiscard]] inline double block_qfi(const SpectrumBlock& blk, double* skipped = nullptr) noexcept {
  const int n = blk.total_atoms;
  const int first = std::max(0, blk.offset - 1);
  const int last = std::min(n - 1, blk.offset + static_cast<int>(blk.weights.size()) - 1);
  double f = 0.0;
  for (int k = first; k <= last; ++k) {
    const double x = blk(k), y = blk(k + 1);
    const double s = x + y;
    if (s == 0.0) continue;
    if (s < kPairGuard) {
      if (skipped) *skipped += s;
      continue;
    }
    const double d = x - y;
    f += d * d / s * (static_cast<double>(k + 1) * static_cast<double>(n - k));
  }
  return f;
}

/// Closed-form QFI of a block spectrum. Identical for gen = x and gen = y.
[[nodiscard]] inline QfiReport qfi_exact(const BlockSpectrum& spec, Generator /*gen*/ = Generator::x) {
  QfiReport r;
  r.method = QfiMethod::exact;
  r.mean_atoms = spec.mean_atoms;
  r.blocks.reserve(spec.blocks.size());
  r.contributions.reserve(spec.blocks.size());
  for (const auto& blk : spec.blocks) {
    r.blocks.push_back(blk.total_atoms);
    r.contributions.push_back(block_qfi(blk, &r.skipped_mass));
  }
  for (double c : r.contributions) r.value += c;
  return r;
}

/// Eigenvalue formula for an arbitrary density matrix and Hermitian generator.
[[nodiscard]] inline double qfi_oracle_general(const Eigen::MatrixXcd& rho, const Eigen::MatrixXcd& generator) {
  if (rho.rows() != rho.cols() || generator.rows() != rho.rows() || generator.cols() != rho.cols())
    throw Error("dimension mismatch");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(rho);
  if (solver.info() != Eigen::Success) throw Error("eigensolver failed");
  const Eigen::VectorXd& lambda = solver.eigenvalues();
  const Eigen::MatrixXcd j = solver.eigenvectors().adjoint() * generator * solver.eigenvectors();
  double f = 0.0;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    for (Eigen::Index k = i + 1; k < lambda.size(); ++k) {
      const double s = lambda(i) + lambda(k);
      if (s < kPairGuard) continue;
      const double d = lambda(i) - lambda(k);
      f += 4.0 * d * d / s * std::norm(j(i, k));
    }
  }
  return f;
}

inline constexpr std::size_t kOracleDimensionLimit = 5000;

/// Oracle route for a block spectrum: dense eigen-decomposition per block.
[[nodiscard]] inline QfiReport qfi_oracle_general(const BlockSpectrum& spec, Generator gen) {
  if (spec.dense_dimension() > kOracleDimensionLimit) throw Error("oracle scale exceeded");
  QfiReport r;
  r.method = QfiMethod::oracle;
  r.mean_atoms = spec.mean_atoms;
  for (const auto& blk : spec.blocks) {
    const int d = blk.total_atoms + 1;
    Eigen::MatrixXcd rho = Eigen::MatrixXcd::Zero(d, d);
    for (int k = 0; k < d; ++k) rho(k, k) = blk(k);
    const auto ops = angular_momentum_matrices(blk.total_atoms);
    r.blocks.push_back(blk.total_atoms);
    r.contributions.push_back(qfi_oracle_general(rho, ops.generator(gen)));
  }
  for (double c : r.contributions) r.value += c;
  return r;
}

/**
 * Continuum limit: differences become derivatives, a_n -> N^2/4, and the sums
 * become integrals,
 *
 *   F = 1/8 int dN N^2 int dn (d lambda/dn)^2 / lambda.
 *
 * Integrated in (N_a, N_b) (unit Jacobian) with nested adaptive Gauss-Kronrod.
 * For equal widths the closed form N_bar^2 / (4 sigma^2) is attached.
 */
[[nodiscard]] inline QfiReport qfi_continuum(const NumberDistribution& pa, const NumberDistribution& pb,
                                             double rel_tol = 1e-6) {
  if (pa.kind != EnvelopeKind::gaussian || pb.kind != EnvelopeKind::gaussian)
    throw Error("continuum limit requires smooth envelope");
  struct Density {
    double mu, sigma, lo, hi, norm;
    [[nodiscard]] double operator()(double x) const {
      const double z = (x - mu) / sigma;
      return std::exp(-0.5 * z * z) / norm;
    }
    [[nodiscard]] double log_slope(double x) const { return -(x - mu) / (sigma * sigma); }
  };
  auto make = [](const NumberDistribution& p) {
    const double half = 8.0 * p.width;
    const double lo = std::max(0.0, p.mean - half), hi = p.mean + half;
    const double s2 = std::sqrt(2.0) * p.width;
    const double norm = p.width * std::sqrt(std::acos(-1.0) / 2.0) *
                        (std::erf((hi - p.mean) / s2) - std::erf((lo - p.mean) / s2));
    return Density{p.mean, p.width, lo, hi, norm};
  };
  const Density da = make(pa), db = make(pb);
  using Quadrature = boost::math::quadrature::gauss_kronrod<double, 31>;
  constexpr unsigned kDepth = 15;
  auto inner = [&](double x) {
    const double px = da(x);
    if (px < 1e-30) return 0.0;
    auto g = [&](double y) {
      const double lam = px * db(y);
      if (lam < 1e-30) return 0.0;
      const double slope = da.log_slope(x) - db.log_slope(y);
      return (x + y) * (x + y) * lam * slope * slope;
    };
    return Quadrature::integrate(g, db.lo, db.hi, kDepth, rel_tol);
  };
  QfiReport r;
  r.method = QfiMethod::continuum;
  r.value = Quadrature::integrate(inner, da.lo, da.hi, kDepth, rel_tol) / 8.0;
  r.mean_atoms = pa.mean + pb.mean;
  if (pa.width == pb.width) r.analytic = r.mean_atoms * r.mean_atoms / (4.0 * pa.width * pa.width);
  return r;
}

/**
 * Second-order expansion in the disorder amplitude of the exact QFI.
 *
 * With u = (1 + eps xi_a(N_a))(1 + eps xi_b(N_b)) = 1 + eps s + eps^2 t on each
 * cell, every neighbour pair (A, B) = (l_k, l_{k+1}) becomes
 * (D0 + eps D1 + eps^2 D2)^2 / (S0 + eps S1 + eps^2 S2) with
 * D1 = A s - B s', S1 = A s + B s', etc., which is expanded to eps^2.
 * For a smooth envelope D1 ~ l (Delta xi) and the leading correction is
 * eps^2 N^2 l (Delta xi)^2 / 8 per pair. The renormalization of each source is
 * a global scale of the spectrum and is divided out exactly.
 */
[[nodiscard]] inline QfiReport qfi_perturbative(const NumberDistribution& pa, const NumberDistribution& pb,
                                                const DisorderRealization& real, double eps) {
  if (real.start_a != pa.start || real.xi_a.size() != pa.values.size() || real.start_b != pb.start ||
      real.xi_b.size() != pb.values.size())
    throw Error("window mismatch");
  const BlockSpectrum clean = block_spectra(pa, pb);
  QfiReport r = qfi_exact(clean);
  r.method = QfiMethod::perturbative;
  if (eps == 0.0) return r;

  auto source_scale = [&](const NumberDistribution& p, Source s) {
    double z = 0.0, t = 0.0;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      z += p.values[i] * (1.0 + eps * real.xi(s, p.start + static_cast<int>(i)));
      t += p.values[i];
    }
    return z / t;
  };
  const double scale = source_scale(pa, Source::a) * source_scale(pb, Source::b);

  for (std::size_t bi = 0; bi < clean.blocks.size(); ++bi) {
    const auto& blk = clean.blocks[bi];
    const int n = blk.total_atoms;
    const int first = std::max(0, blk.offset - 1);
    const int last = std::min(n - 1, blk.offset + static_cast<int>(blk.weights.size()) - 1);
    double first_order = 0.0, second_order = 0.0;
    for (int k = first; k <= last; ++k) {
      const double a = blk(k), b = blk(k + 1);
      const double s0 = a + b;
      if (s0 < kPairGuard) continue;
      const double xa0 = real.xi(Source::a, k), xb0 = real.xi(Source::b, n - k);
      const double xa1 = real.xi(Source::a, k + 1), xb1 = real.xi(Source::b, n - k - 1);
      const double s_lo = xa0 + xb0, t_lo = xa0 * xb0;
      const double s_hi = xa1 + xb1, t_hi = xa1 * xb1;
      const double d0 = a - b, d1 = a * s_lo - b * s_hi, d2 = a * t_lo - b * t_hi;
      const double s1 = a * s_lo + b * s_hi, s2 = a * t_lo + b * t_hi;
      const double f1 = 2.0 * d0 * d1 / s0 - d0 * d0 * s1 / (s0 * s0);
      const double f2 = (d1 * d1 + 2.0 * d0 * d2) / s0 - 2.0 * d0 * d1 * s1 / (s0 * s0) +
                        d0 * d0 * (s1 * s1 / (s0 * s0 * s0) - s2 / (s0 * s0));
      const double weight = static_cast<double>(k + 1) * static_cast<double>(n - k);
      first_order += weight * f1;
      second_order += weight * f2;
    }
    r.contributions[bi] = (r.contributions[bi] + eps * first_order + eps * eps * second_order) / scale;
  }
  r.value = 0.0;
  for (double c : r.contributions) r.value += c;
  return r;
}

/// Large-width limit for a Gaussian envelope with disorder of correlation kappa:
/// (N_bar / 2 sigma)^2 + N_bar^2 eps^2 (kappa0 - kappa1) / 2.
[[nodiscard]] inline QfiReport plateau_prediction(double n_bar, double sigma, double eps, double kappa0,
                                                  double kappa1) {
  if (!(n_bar > 0.0) || !(sigma > 0.0) || !(eps >= 0.0)) throw Error("invalid plateau parameters");
  QfiReport r;
  r.method = QfiMethod::plateau;
  r.mean_atoms = n_bar;
  const double envelope = n_bar / (2.0 * sigma);
  r.value = envelope * envelope + 0.5 * n_bar * n_bar * eps * eps * (kappa0 - kappa1);
  r.analytic = r.value;
  return r;
}

/// Delta theta >= 1 / sqrt(m F).
[[nodiscard]] inline double crlb_bound(double fisher, double measurements = 1.0) {
  if (!(fisher > 0.0)) throw Error("uninformative state");
  if (!(measurements >= 1.0)) throw Error("invalid measurement count");
  return 1.0 / std::sqrt(measurements * fisher);
}

}  // namespace twin_metrology
