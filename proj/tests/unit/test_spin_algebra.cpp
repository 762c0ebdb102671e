// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

#include "twin_metrology/spin_algebra.hpp"

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <complex>
#include <numbers>
#include <thread>
#include <vector>

namespace twin_metrology {
namespace {

using cd = std::complex<double>;
constexpr double kPi = std::numbers::pi;

// Direct exponentiation of -i theta J; independent of both kernel routes.
Eigen::MatrixXd exponential_kernel(int n, double theta, Generator gen) {
  const auto ops = angular_momentum_matrices(n);
  const Eigen::MatrixXcd u = (cd(0.0, -theta) * ops.generator(gen)).exp();
  return u.cwiseAbs2();
}

double max_abs(const Eigen::MatrixXd& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

TEST(AngularMomentum, EmptyBlockIsZero) {
  const auto m = angular_momentum_matrices(0);
  EXPECT_EQ(m.jx.rows(), 1);
  EXPECT_EQ(m.jx(0, 0), 0.0);
  EXPECT_EQ(m.jy(0, 0), cd(0.0));
  EXPECT_EQ(m.jz(0, 0), 0.0);
}

TEST(AngularMomentum, TwoAtomBlock) {
  const auto m = angular_momentum_matrices(2);
  EXPECT_NEAR(m.jx(0, 1), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(m.jx(1, 2), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_EQ(m.jx(0, 2), 0.0);
  EXPECT_EQ(m.jz(0, 0), -1.0);
  EXPECT_EQ(m.jz(1, 1), 0.0);
  EXPECT_EQ(m.jz(2, 2), 1.0);
}

TEST(AngularMomentum, TwinFockJxSecondMoment) {
  const int n = 100;
  const auto m = angular_momentum_matrices(n);
  const Eigen::MatrixXd jx2 = m.jx * m.jx;
  EXPECT_NEAR(jx2(50, 50), 1275.0, 1e-9);
  EXPECT_NEAR(jx2(50, 50), n * (n + 2) / 8.0, 1e-9);
}

TEST(AngularMomentum, OffDiagonalMatchesImbalanceForm) {
  const int n = 7;
  const auto m = angular_momentum_matrices(n);
  for (int k = 0; k < n; ++k) {
    const double imb = m.block.imbalance(k + 1);
    const double a = (n / 2.0 + imb) * (n / 2.0 - imb + 1.0);
    EXPECT_NEAR(m.jx(k + 1, k), 0.5 * std::sqrt(a), 1e-14);
  }
  EXPECT_EQ(m.block.index(-3.5), 0);
  EXPECT_EQ(m.block.index(3.5), 7);
  EXPECT_THROW((void)m.block.index(0.0), Error);
}

TEST(AngularMomentum, CommutatorsClose) {
  for (int n : {0, 1, 2, 3, 10, 51, 128, 200}) {
    const auto m = angular_momentum_matrices(n);
    const Eigen::MatrixXcd jx = m.jx.cast<cd>();
    const Eigen::MatrixXcd jz = m.jz.cast<cd>();
    const Eigen::MatrixXcd& jy = m.jy;
    const cd i(0.0, 1.0);
    const double scale = std::max(1.0, n * n / 4.0);
    EXPECT_LE(((jx * jy - jy * jx) - i * jz).cwiseAbs().maxCoeff(), 1e-12 * scale) << n;
    EXPECT_LE(((jy * jz - jz * jy) - i * jx).cwiseAbs().maxCoeff(), 1e-12 * scale) << n;
    EXPECT_LE(((jz * jx - jx * jz) - i * jy).cwiseAbs().maxCoeff(), 1e-12 * scale) << n;
    EXPECT_LE((jy - jy.adjoint()).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(RotationKernel, MatchesDirectExponentiation) {
  for (int n : {1, 2, 5, 20, 50}) {
    for (double theta : {0.0, 0.3, 1.1, kPi / 2, 2.5, 4.0}) {
      for (Generator gen : {Generator::x, Generator::y}) {
        const auto k = rotation_kernel(n, theta, gen);
        EXPECT_LE(max_abs(k.probabilities - exponential_kernel(n, theta, gen)), 1e-10) << n << " " << theta;
      }
    }
  }
}

TEST(RotationKernel, HongOuMandel) {
  const auto k = rotation_kernel(2, kPi / 2, Generator::x);
  EXPECT_NEAR(k.probabilities(0, 1), 0.5, 1e-12);
  EXPECT_NEAR(k.probabilities(1, 1), 0.0, 1e-12);
  EXPECT_NEAR(k.probabilities(2, 1), 0.5, 1e-12);
}

TEST(RotationKernel, IdentityAtZeroAngle) {
  for (int n : {0, 1, 4, 33}) {
    const auto k = rotation_kernel(n, 0.0, Generator::x);
    EXPECT_LE(max_abs(k.probabilities - Eigen::MatrixXd::Identity(n + 1, n + 1)), 1e-12);
    EXPECT_LE(max_abs(k.derivative), 1e-12);
  }
}

TEST(RotationKernel, DerivativeMatchesFiniteDifference) {
  const int n = 20;
  const double theta = 0.3, h = 1e-5;
  const auto k = rotation_kernel(n, theta, Generator::x);
  const Eigen::MatrixXd fd = (rotation_kernel(n, theta + h, Generator::x).probabilities -
                              rotation_kernel(n, theta - h, Generator::x).probabilities) /
                             (2 * h);
  EXPECT_LE(max_abs(k.derivative - fd), 1e-6);
}

TEST(RotationKernel, FiniteDifferenceErrorIsSecondOrder) {
  const int n = 12;
  const double theta = 0.9;
  const auto k = rotation_kernel(n, theta, Generator::y);
  auto fd_error = [&](double h) {
    const Eigen::MatrixXd fd = (exponential_kernel(n, theta + h, Generator::y) -
                                exponential_kernel(n, theta - h, Generator::y)) /
                               (2 * h);
    return max_abs(k.derivative - fd);
  };
  const double e1 = fd_error(2e-2), e2 = fd_error(1e-2);
  EXPECT_GT(e1 / e2, 3.5);
  EXPECT_LT(e1 / e2, 4.5);
}

TEST(RotationKernel, DoublyStochasticAndSymmetric) {
  for (int n : {0, 1, 2, 3, 17, 64, 128, 200}) {
    for (int i = 0; i < 20; ++i) {
      const double theta = 2 * kPi * i / 20.0;
      const auto k = rotation_kernel(n, theta, Generator::x);
      const Eigen::MatrixXd& p = k.probabilities;
      EXPECT_LE((p.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-10);
      EXPECT_LE((p.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-10);
      EXPECT_GE(p.minCoeff(), -1e-14);
      EXPECT_LE(p.maxCoeff(), 1.0 + 1e-12);
      EXPECT_LE(k.derivative.rowwise().sum().cwiseAbs().maxCoeff(), 1e-8);
      EXPECT_LE(k.derivative.colwise().sum().cwiseAbs().maxCoeff(), 1e-8);
      // K[n, n'] = K[-n', -n]
      double asym = 0.0;
      for (int r = 0; r <= n; ++r)
        for (int c = 0; c <= n; ++c) asym = std::max(asym, std::abs(p(r, c) - p(n - c, n - r)));
      EXPECT_LE(asym, 1e-10);
    }
  }
}

TEST(RotationLadder, AgreesWithSpectralRoute) {
  for (int n : {0, 1, 2, 7, 30, 50}) {
    for (double theta : {0.0, 0.4, kPi / 2, 2.2, 5.9}) {
      const auto a = rotation_kernel(n, theta, Generator::x);
      const auto b = recursive_rotation_kernel(n, theta, Generator::x);
      EXPECT_LE(max_abs(a.probabilities - b.probabilities), 1e-10) << n << " " << theta;
      EXPECT_LE(max_abs(a.derivative - b.derivative), 1e-9) << n << " " << theta;
    }
  }
}

TEST(RotationLadder, UnitarityForEveryBlockUpTo200) {
  const int top = 200;
  std::vector<ColumnBand> bands;
  for (int n = 0; n <= top; ++n) bands.push_back({0, n});
  const RotationLadder ladder(bands);
  for (int i = 0; i < 20; ++i) {
    const double theta = 2 * kPi * i / 20.0;
    double worst = 0.0;
    ladder.run(theta, [&](const LadderBlock& blk) {
      const int n = blk.total_atoms();
      std::vector<double> col(static_cast<std::size_t>(n) + 1, 0.0);
      for (int a = 0; a <= n; ++a) {
        double row = 0.0;
        for (int c = 0; c <= n; ++c) {
          const double v = blk(a, c) * blk(a, c);
          row += v;
          col[static_cast<std::size_t>(c)] += v;
        }
        worst = std::max(worst, std::abs(row - 1.0));
      }
      for (double v : col) worst = std::max(worst, std::abs(v - 1.0));
    });
    EXPECT_LE(worst, 1e-10) << theta;
  }
}

TEST(RotationLadder, BandedColumnsMatchFullMatrix) {
  // Request a drifting band, as a Gaussian spectrum would.
  const int top = 160;
  std::vector<ColumnBand> narrow(top + 1), full(top + 1);
  for (int n = 60; n <= top; ++n) {
    narrow[static_cast<std::size_t>(n)] = {std::max(0, n / 2 - 9), std::min(n, n / 2 + 11)};
    full[static_cast<std::size_t>(n)] = {0, n};
  }
  const RotationLadder banded(narrow), reference(full);
  for (int n = 0; n <= top; ++n) {
    const ColumnBand b = banded.band(n);
    if (!narrow[static_cast<std::size_t>(n)].empty()) {
      EXPECT_LE(b.lo, narrow[static_cast<std::size_t>(n)].lo);
      EXPECT_GE(b.hi, narrow[static_cast<std::size_t>(n)].hi);
    }
    EXPECT_LE(b.width(), 40) << n;
  }
  const double theta = 1.3;
  std::vector<std::vector<double>> expected(top + 1);
  reference.run(theta, [&](const LadderBlock& blk) {
    const int n = blk.total_atoms();
    const ColumnBand want = narrow[static_cast<std::size_t>(n)];
    if (want.empty()) return;
    for (int a = 0; a <= n; ++a)
      for (int c = want.lo; c <= want.hi; ++c) expected[static_cast<std::size_t>(n)].push_back(blk(a, c));
  });
  int visited = 0;
  banded.run(theta, [&](const LadderBlock& blk) {
    const int n = blk.total_atoms();
    const ColumnBand want = narrow[static_cast<std::size_t>(n)];
    std::size_t i = 0;
    for (int a = 0; a <= n; ++a)
      for (int c = want.lo; c <= want.hi; ++c)
        ASSERT_NEAR(blk(a, c), expected[static_cast<std::size_t>(n)][i++], 1e-12);
    ++visited;
  });
  EXPECT_EQ(visited, top - 60 + 1);
}

TEST(RotationLadder, OffCenterBandAtLargeBlock) {
  const int top = 600;
  std::vector<ColumnBand> bands(top + 1);
  for (int n = 400; n <= top; ++n)
    bands[static_cast<std::size_t>(n)] = {static_cast<int>(0.3 * n) - 12, static_cast<int>(0.3 * n) + 12};
  const RotationLadder ladder(bands);
  for (double theta : {0.7, kPi / 2, 2.9}) {
    const auto ref = rotation_kernel(top, theta, Generator::x);
    double worst = 0.0;
    ladder.run(theta, [&](const LadderBlock& blk) {
      if (blk.total_atoms() != top) return;
      const ColumnBand want = bands.back();
      for (int a = 0; a <= top; ++a)
        for (int c = want.lo; c <= want.hi; ++c)
          worst = std::max(worst, std::abs(blk(a, c) * blk(a, c) - ref.probabilities(a, c)));
    });
    EXPECT_LE(worst, 1e-11) << theta;
  }
}

TEST(KernelCache, ReturnsSharedEntriesAcrossThreads) {
  KernelCache cache;
  const auto first = cache.get(10, 0.25, Generator::x);
  EXPECT_EQ(first.get(), cache.get(10, 0.25, Generator::x).get());
  EXPECT_NE(first.get(), cache.get(10, std::nextafter(0.25, 1.0), Generator::x).get());
  std::vector<std::jthread> workers;
  std::vector<const RotationKernel*> seen(8);
  for (int t = 0; t < 8; ++t)
    workers.emplace_back([&, t] { seen[static_cast<std::size_t>(t)] = cache.get(10, 0.25, Generator::x).get(); });
  workers.clear();
  for (const auto* p : seen) EXPECT_EQ(p, first.get());
  EXPECT_EQ(cache.size(), 2u);
}

TEST(KernelCache, StopsInsertingPastBudget) {
  KernelCache cache(1000);
  (void)cache.get(20, 0.1, Generator::x);  // 2 * 441 doubles > 1000 bytes
  EXPECT_EQ(cache.size(), 0u);
}

}  // namespace
}  // namespace twin_metrology
