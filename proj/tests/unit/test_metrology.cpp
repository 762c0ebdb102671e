// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include "twin_metrology/metrology.hpp"

using namespace twin_metrology;

namespace {

NumberDistribution gaussian(double mean, double width) { return build_distribution(GaussianEnvelope{mean, width}); }

BlockSpectrum single_block(int n, int k) {
  BlockSpectrum s;
  s.blocks.push_back(SpectrumBlock{n, k, {1.0}});
  s.trace = 1.0;
  s.mean_atoms = n;
  return s;
}

BlockSpectrum gaussian_spectrum(double mean, double width) {
  const auto d = gaussian(mean, width);
  return block_spectra(d, d);
}

// Arbitrary diagonal spectrum: blocks need not come from a product of sources.
BlockSpectrum random_spectrum(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> first(0, 12), count(1, 9), zero(0, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n0 = first(rng);
  const int nblocks = std::min(count(rng), 21 - n0);
  BlockSpectrum s;
  double total = 0.0;
  for (int n = n0; n < n0 + nblocks; ++n) {
    SpectrumBlock b{n, 0, std::vector<double>(static_cast<std::size_t>(n) + 1)};
    for (double& w : b.weights) {
      w = zero(rng) == 0 ? 0.0 : u(rng);
      total += w;
    }
    s.blocks.push_back(std::move(b));
  }
  if (total == 0.0) {
    s.blocks.front().weights.front() = 1.0;
    total = 1.0;
  }
  for (auto& b : s.blocks) {
    for (double& w : b.weights) w /= total;
    s.mean_atoms += b.total_atoms * b.mass();
  }
  s.trace = 1.0;
  return s;
}

Eigen::MatrixXcd random_unitary(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::MatrixXcd z(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) z(i, j) = {g(rng), g(rng)};
  Eigen::HouseholderQR<Eigen::MatrixXcd> qr(z);
  return qr.householderQ();
}

}  // namespace

TEST(QfiExact, TwinFockBlock) {
  const auto s = single_block(100, 50);
  EXPECT_NEAR(qfi_exact(s).value, 5100.0, 5100.0 * 1e-12);
  // Pure-state reduction: 4 Var(Jx) with <Jx> = 0.
  const auto ops = angular_momentum_matrices(100);
  Eigen::VectorXd psi = Eigen::VectorXd::Zero(101);
  psi(50) = 1.0;
  const double var = psi.dot(ops.jx * ops.jx * psi) - std::pow(psi.dot(ops.jx * psi), 2);
  EXPECT_NEAR(4.0 * var, 5100.0, 1e-9);
}

TEST(QfiExact, NoParticles) {
  const auto s = single_block(0, 0);
  EXPECT_EQ(qfi_exact(s).value, 0.0);
}

TEST(QfiExact, GaussianSourcesNearClosedForm) {
  const auto r = qfi_exact(gaussian_spectrum(100, 10));
  EXPECT_NEAR(r.mean_atoms, 200.0, 1e-9);
  EXPECT_NEAR(r.value / 100.0 - 1.0, 0.0, 0.1);
  // Direct summation of the pair formula in extended precision (numpy).
  EXPECT_NEAR(r.value, 99.5090316806382, 99.5 * 1e-10);
}

TEST(QfiExact, ContributionsArePositiveAndAdditive) {
  const auto r = qfi_exact(gaussian_spectrum(60, 7));
  double sum = 0.0;
  for (double c : r.contributions) {
    EXPECT_GE(c, 0.0);
    sum += c;
  }
  EXPECT_NEAR(sum, r.value, 1e-10 * r.value);
  EXPECT_EQ(r.blocks.size(), r.contributions.size());
}

TEST(QfiExact, TinyPairsAreSkippedAndRecorded) {
  BlockSpectrum s;
  s.blocks.push_back(SpectrumBlock{4, 0, {1e-301, 0.0, 1.0, 0.0, 0.0}});
  s.mean_atoms = 4;
  const auto r = qfi_exact(s);
  EXPECT_GT(r.skipped_mass, 0.0);
  EXPECT_NEAR(r.value, 2.0 * 3.0 + 3.0 * 2.0, 1e-12);  // pairs (1,2) and (2,3)
}

TEST(QfiOracle, MatchesClosedFormOnRandomSpectra) {
  std::mt19937_64 rng(20261015);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_spectrum(rng);
    for (Generator g : {Generator::x, Generator::y}) {
      const double exact = qfi_exact(s, g).value;
      const double oracle = qfi_oracle_general(s, g).value;
      EXPECT_NEAR(exact, oracle, 1e-10 * std::max(1.0, exact)) << "trial " << trial;
    }
  }
}

TEST(QfiOracle, InvariantUnderCommonUnitary) {
  std::mt19937_64 rng(5);
  for (int n : {3, 8, 15}) {
    const int d = n + 1;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::VectorXd lam(d);
    for (int k = 0; k < d; ++k) lam(k) = u(rng);
    lam /= lam.sum();
    SpectrumBlock b{n, 0, std::vector<double>(lam.data(), lam.data() + d)};
    BlockSpectrum s;
    s.blocks.push_back(b);
    s.mean_atoms = n;
    const Eigen::MatrixXcd rho = lam.cast<std::complex<double>>().asDiagonal();
    const Eigen::MatrixXcd v = random_unitary(d, rng);
    const auto ops = angular_momentum_matrices(n);
    const double rotated = qfi_oracle_general(v * rho * v.adjoint(), v * ops.generator(Generator::x) * v.adjoint());
    EXPECT_NEAR(rotated, qfi_exact(s).value, 1e-9 * rotated);
  }
}

TEST(QfiOracle, PureStateIsFourVariance) {
  std::mt19937_64 rng(17);
  const int n = 12, d = n + 1;
  const Eigen::MatrixXcd v = random_unitary(d, rng);
  const Eigen::VectorXcd psi = v.col(0);
  const Eigen::MatrixXcd rho = psi * psi.adjoint();
  const auto ops = angular_momentum_matrices(n);
  for (Generator g : {Generator::x, Generator::y}) {
    const Eigen::MatrixXcd j = ops.generator(g);
    const std::complex<double> m1 = psi.dot(j * psi);
    const std::complex<double> m2 = psi.dot(j * j * psi);
    const double var = m2.real() - m1.real() * m1.real();
    EXPECT_NEAR(qfi_oracle_general(rho, j), 4.0 * var, 1e-9 * var);
  }
}

TEST(QfiOracle, GeneratorInvariance) {
  const auto pa = build_distribution(TableEnvelope{2, {0.1, 0.5, 0.4}});
  const auto pb = build_distribution(TableEnvelope{3, {0.7, 0.3}});
  const auto s = block_spectra(pa, pb);
  const double x = qfi_oracle_general(s, Generator::x).value;
  const double y = qfi_oracle_general(s, Generator::y).value;
  EXPECT_NEAR(x, y, 1e-10 * x);
  EXPECT_EQ(qfi_exact(s, Generator::x).value, qfi_exact(s, Generator::y).value);
}

TEST(QfiOracle, ScaleGuard) {
  try {
    (void)qfi_oracle_general(gaussian_spectrum(375, 50), Generator::x);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "oracle scale exceeded");
  }
}

TEST(QfiContinuum, AnalyticValueAtLargeWidth) {
  const auto d = gaussian(375, 50);
  const auto r = qfi_continuum(d, d);
  ASSERT_TRUE(r.analytic.has_value());
  EXPECT_DOUBLE_EQ(*r.analytic, 56.25);
  EXPECT_NEAR(*r.analytic / 750.0, 0.075, 1e-15);
}

TEST(QfiContinuum, QuadratureAgreesWithAnalytic) {
  // For equal Gaussians the integrand is Gaussian and integrates to
  // (N_bar^2 + 2 sigma^2) / (4 sigma^2): the closed form plus 1/2.
  for (auto [mean, width] : {std::pair{100.0, 10.0}, std::pair{375.0, 50.0}, std::pair{375.0, 20.0}}) {
    const auto d = gaussian(mean, width);
    const auto r = qfi_continuum(d, d);
    const double n_bar = 2 * mean;
    const double expected = (n_bar * n_bar + 2 * width * width) / (4 * width * width);
    EXPECT_NEAR(r.value, expected, 1e-5 * expected);
    EXPECT_NEAR(r.value / *r.analytic, 1.0, 0.01);
  }
}

TEST(QfiContinuum, DecaysWithWidth) {
  double prev = INFINITY;
  for (double width : {5.0, 10.0, 20.0, 40.0, 80.0}) {
    const auto d = gaussian(375, width);
    const double v = *qfi_continuum(d, d).analytic;
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(QfiContinuum, RejectsTables) {
  const auto t = build_distribution(TableEnvelope{0, {0.5, 0.5}});
  try {
    (void)qfi_continuum(t, t);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "continuum limit requires smooth envelope");
  }
}

TEST(QfiExact, NonIncreasingInWidth) {
  double prev = INFINITY;
  for (int width = 1; width <= 50; ++width) {
    const double v = qfi_exact(gaussian_spectrum(100, width)).value;
    EXPECT_LE(v, prev * (1 + 1e-12)) << width;
    prev = v;
  }
}

TEST(QfiPerturbative, ZeroAmplitudeIsExact) {
  const auto d = gaussian(100, 10);
  const auto real = draw_disorder(d, d, 0.0, DisorderSharing::shared, 1, 0);
  EXPECT_EQ(qfi_perturbative(d, d, real, 0.0).value, qfi_exact(block_spectra(d, d)).value);
}

TEST(QfiPerturbative, AgreesWithDisorderedSpectrum) {
  const auto d = gaussian(375, 50);
  const auto real = draw_disorder(d, d, 0.3, DisorderSharing::shared, 42, 0);
  const double exact =
      qfi_exact(block_spectra(apply_disorder(d, real, Source::a), apply_disorder(d, real, Source::b))).value;
  EXPECT_NEAR(qfi_perturbative(d, d, real, 0.3).value / exact, 1.0, 0.05);
}

TEST(QfiPerturbative, ErrorIsThirdOrder) {
  auto error = [](double width, double eps, bool relative) {
    const auto d = gaussian(375, width);
    const auto real = draw_disorder(d, d, eps, DisorderSharing::shared, 42, 0);
    const double exact =
        qfi_exact(block_spectra(apply_disorder(d, real, Source::a), apply_disorder(d, real, Source::b))).value;
    const double diff = std::abs(qfi_perturbative(d, d, real, eps).value - exact);
    return relative ? diff / exact : diff;
  };
  // Narrow envelope: the clean QFI dominates, so the relative error is O(eps^3).
  EXPECT_GE(error(5, 0.2, true) / error(5, 0.1, true), 4.0);
  // Wide envelope: the QFI itself grows like eps^2; the absolute error is O(eps^3).
  EXPECT_GE(error(50, 0.2, false) / error(50, 0.1, false), 4.0);
}

TEST(QfiPerturbative, WindowMismatch) {
  const auto d = gaussian(100, 10);
  const auto e = gaussian(100, 12);
  const auto real = draw_disorder(d, d, 0.5, DisorderSharing::shared, 1, 0);
  EXPECT_THROW((void)qfi_perturbative(e, e, real, 0.5), Error);
}

TEST(Plateau, PublishedParameters) {
  const auto r = plateau_prediction(750, 50, 1.0, 1.0 / 3.0, 0.0);
  EXPECT_NEAR(r.value, 56.25 + 93750.0, 1e-9);
  EXPECT_NEAR(r.over_snl(), 125.075, 1e-9);
  EXPECT_DOUBLE_EQ(plateau_prediction(750, 50, 0.0, 1.0 / 3.0, 0.0).value, 56.25);
  EXPECT_DOUBLE_EQ(plateau_prediction(750, 50, 1.0, 0.25, 0.25).value, 56.25);
  EXPECT_NEAR(plateau_prediction(750, 50, 0.3, 1.0 / 3.0, 0.0).over_snl(), 0.075 + 0.09 * 125, 1e-12);
}

TEST(Crlb, Bounds) {
  EXPECT_DOUBLE_EQ(crlb_bound(100.0 * 100.0), 0.01);
  EXPECT_DOUBLE_EQ(crlb_bound(750.0), 1.0 / std::sqrt(750.0));
  EXPECT_DOUBLE_EQ(crlb_bound(4.0, 100.0), 0.05);
  try {
    (void)crlb_bound(0.0);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "uninformative state");
  }
  EXPECT_THROW((void)crlb_bound(4.0, 0.5), Error);
}
