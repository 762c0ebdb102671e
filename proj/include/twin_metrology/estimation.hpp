// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file estimation.hpp
 * @brief Phase estimation from the population-imbalance measurement.
 *
 * After the rotation, the probability of finding N atoms with imbalance n is
 * p_N(n|theta) = sum_k' K^(N)[n, k'](theta) lambda^(N)_k'. The classical Fisher
 * information of that distribution is F = sum (dp/dtheta)^2 / p.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "twin_metrology/error.hpp"
#include "twin_metrology/metrology.hpp"
#include "twin_metrology/parallel.hpp"
#include "twin_metrology/spin_algebra.hpp"
#include "twin_metrology/state_model.hpp"

namespace twin_metrology {

/// Blocks with mass <= block_mass and eigenvalues <= column_weight are not
/// propagated. Zero cutoffs keep everything with non-zero weight.
struct EvaluationCutoffs {
  double block_mass = 0.0;
  double column_weight = 0.0;
};

/// Used for Fisher information: the dropped mass is below 1e-12 for any
/// realistic window, and dropping outcomes can only lower F.
inline constexpr EvaluationCutoffs kFisherCutoffs{1e-16, 1e-18};

inline constexpr double kProbabilityFloor = 1e-300;

/// Propagates every retained block of a spectrum through the rotation ladder.
class OutcomeEngine {
 public:
  OutcomeEngine(const BlockSpectrum& spec, EvaluationCutoffs cut) : spec_(&spec) {
    std::vector<ColumnBand> required(static_cast<std::size_t>(std::max(spec.max_total_atoms(), 0)) + 1);
    columns_.resize(spec.blocks.size());
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
      const auto& blk = spec.blocks[i];
      if (!(blk.mass() > cut.block_mass)) continue;
      int lo = -1, hi = -2;
      for (std::size_t j = 0; j < blk.weights.size(); ++j) {
        if (blk.weights[j] > cut.column_weight) {
          const int k = blk.offset + static_cast<int>(j);
          if (lo < 0) lo = k;
          hi = k;
        }
      }
      if (lo < 0) continue;
      columns_[i] = {lo, hi};
      required[static_cast<std::size_t>(blk.total_atoms)] = {lo, hi};
      retained_mass_ += blk.mass();
    }
    ladder_.emplace(std::move(required));
  }

  [[nodiscard]] double retained_mass() const noexcept { return retained_mass_; }

  /// fn(block_position, p, dp) for each retained block in ascending N.
  /// dp is empty unless derivatives are requested.
  template <class Fn>
  void run(double theta, bool derivatives, Fn&& fn) const {
    const int first_n = spec_->blocks.empty() ? 0 : spec_->blocks.front().total_atoms;
    std::vector<double> p, dp, cross;
    ladder_->run(theta, [&](const LadderBlock& view) {
      const int n = view.total_atoms();
      const std::size_t pos = static_cast<std::size_t>(n - first_n);
      const auto& blk = spec_->blocks[pos];
      const ColumnBand cols = columns_[pos];
      const int shift = cols.lo - view.band().lo;
      const int width = cols.width();
      const double* w = blk.weights.data() + (cols.lo - blk.offset);
      p.assign(static_cast<std::size_t>(n) + 1, 0.0);
      for (int a = 0; a <= n; ++a) {
        const double* row = view.row(a) + shift;
        double acc = 0.0;
        for (int j = 0; j < width; ++j) acc += row[j] * row[j] * w[j];
        p[static_cast<std::size_t>(a)] = acc;
      }
      if (!derivatives) {
        fn(pos, std::span<const double>(p), std::span<const double>());
        return;
      }
      // cross[a] = sum_k D[a][k] D[a+1][k] w_k
      cross.assign(static_cast<std::size_t>(n), 0.0);
      for (int a = 0; a < n; ++a) {
        const double* r0 = view.row(a) + shift;
        const double* r1 = view.row(a + 1) + shift;
        double acc = 0.0;
        for (int j = 0; j < width; ++j) acc += r0[j] * r1[j] * w[j];
        cross[static_cast<std::size_t>(a)] = acc;
      }
      dp.assign(static_cast<std::size_t>(n) + 1, 0.0);
      for (int a = 0; a <= n; ++a) {
        const auto [lower, upper] = ladder_generator_row(n, a);
        double q = 0.0;
        if (a >= 1) q += lower * cross[static_cast<std::size_t>(a - 1)];
        if (a < n) q += upper * cross[static_cast<std::size_t>(a)];
        dp[static_cast<std::size_t>(a)] = 2.0 * q;
      }
      fn(pos, std::span<const double>(p), std::span<const double>(dp));
    });
  }

 private:
  const BlockSpectrum* spec_;
  std::vector<ColumnBand> columns_;
  std::optional<RotationLadder> ladder_;
  double retained_mass_ = 0.0;
};

struct OutcomeDistribution {
  double theta = 0.0;
  Generator generator = Generator::x;
  std::vector<int> blocks;
  std::vector<std::vector<double>> probabilities;  // [block][k], k = n + N/2
  std::vector<std::vector<double>> derivatives;    // same shape

  [[nodiscard]] double total() const noexcept {
    double t = 0.0;
    for (const auto& b : probabilities)
      for (double v : b) t += v;
    return t;
  }
};

[[nodiscard]] inline OutcomeDistribution outcome_probabilities(const BlockSpectrum& spec, double theta,
                                                               Generator gen = Generator::x,
                                                               EvaluationCutoffs cut = {}) {
  OutcomeDistribution out;
  out.theta = theta;
  out.generator = gen;
  for (const auto& blk : spec.blocks) {
    out.blocks.push_back(blk.total_atoms);
    out.probabilities.emplace_back(static_cast<std::size_t>(blk.total_atoms) + 1, 0.0);
    out.derivatives.emplace_back(static_cast<std::size_t>(blk.total_atoms) + 1, 0.0);
  }
  OutcomeEngine engine(spec, cut);
  engine.run(theta, true, [&](std::size_t pos, std::span<const double> p, std::span<const double> dp) {
    std::copy(p.begin(), p.end(), out.probabilities[pos].begin());
    std::copy(dp.begin(), dp.end(), out.derivatives[pos].begin());
  });
  return out;
}

struct FisherReport {
  double theta = 0.0;
  double value = 0.0;
  std::vector<int> blocks;
  std::vector<double> contributions;
  double mean_atoms = 0.0;
  double qfi = 0.0;
  std::size_t flagged_outcomes = 0;  // p below the floor with a non-zero slope
  std::size_t evaluations = 1;

  [[nodiscard]] double over_snl() const noexcept { return mean_atoms > 0 ? value / mean_atoms : 0.0; }
  [[nodiscard]] double over_qfi() const noexcept { return qfi > 0 ? value / qfi : 0.0; }
};

namespace detail {

struct FisherSample {
  double value = 0.0;
  std::vector<int> blocks;
  std::vector<double> contributions;
  std::size_t flagged = 0;
};

inline FisherSample fisher_at(const BlockSpectrum& spec, const OutcomeEngine& engine, double theta) {
  FisherSample s;
  engine.run(theta, true, [&](std::size_t pos, std::span<const double> p, std::span<const double> dp) {
    double f = 0.0;
    for (std::size_t a = 0; a < p.size(); ++a) {
      const double slope = dp[a];
      if (slope == 0.0) continue;
      if (p[a] < kProbabilityFloor) {
        ++s.flagged;
        f += slope * slope / kProbabilityFloor;
        continue;
      }
      f += slope * slope / p[a];
    }
    s.blocks.push_back(spec.blocks[pos].total_atoms);
    s.contributions.push_back(f);
  });
  for (double c : s.contributions) s.value += c;
  return s;
}

inline FisherReport make_report(const BlockSpectrum& spec, double theta, FisherSample sample, double qfi) {
  FisherReport r;
  r.theta = theta;
  r.value = sample.value;
  r.blocks = std::move(sample.blocks);
  r.contributions = std::move(sample.contributions);
  r.flagged_outcomes = sample.flagged;
  r.mean_atoms = spec.mean_atoms;
  r.qfi = qfi;
  return r;
}

}  // namespace detail

[[nodiscard]] inline FisherReport fisher_information(const BlockSpectrum& spec, double theta,
                                                     Generator gen = Generator::x,
                                                     EvaluationCutoffs cut = kFisherCutoffs) {
  if (!std::isfinite(theta)) throw Error("non-finite angle");
  (void)gen;  // x and y rotations give identical outcome statistics
  const OutcomeEngine engine(spec, cut);
  return detail::make_report(spec, theta, detail::fisher_at(spec, engine, theta), qfi_exact(spec).value);
}

struct OptimizerOptions {
  int grid_points = 16;
  double refine_tol = 1e-4;
  unsigned threads = 1;
};

/**
 * Maximizes F(theta) over (0, pi/2]. For a state diagonal in the Fock basis a
 * rotation by pi maps n -> -n, so F(pi - theta) = F(theta) and the half range
 * suffices. Disorder produces a narrow maximum at theta ~ 1/N_bar, so the
 * uniform grid is extended by points h 2^-j towards zero, down to ~1/(4 N_max).
 * Golden-section refinement then runs between the neighbours of the best grid point.
 */
[[nodiscard]] inline FisherReport optimize_fisher(const BlockSpectrum& spec, Generator gen = Generator::x,
                                                  OptimizerOptions opt = {},
                                                  EvaluationCutoffs cut = kFisherCutoffs) {
  if (opt.grid_points < 8) throw Error("grid_points must be at least 8");
  if (!(opt.refine_tol > 0.0)) throw Error("refine_tol must be positive");
  (void)gen;
  const OutcomeEngine engine(spec, cut);
  const double half_pi = std::acos(0.0);
  const int g = opt.grid_points;
  const double h = half_pi / g;

  std::vector<double> thetas;
  const int n_max = std::max(1, spec.max_total_atoms());
  const int fine = std::max(0, static_cast<int>(std::ceil(std::log2(4.0 * h * n_max))));
  for (int j = fine; j >= 1; --j) thetas.push_back(std::ldexp(h, -j));
  for (int i = 1; i <= g; ++i) thetas.push_back(i == g ? half_pi : h * i);

  std::vector<detail::FisherSample> grid(thetas.size());
  parallel_for(grid.size(), opt.threads, [&](std::size_t i) { grid[i] = detail::fisher_at(spec, engine, thetas[i]); });
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i].value > grid[best].value) best = i;

  double best_theta = thetas[best];
  detail::FisherSample best_sample = std::move(grid[best]);
  std::size_t evaluations = grid.size();

  double lo = best == 0 ? 0.0 : thetas[best - 1];
  double hi = best + 1 == thetas.size() ? half_pi : thetas[best + 1];
  const double tol = std::min(opt.refine_tol, 1e-3 * (hi - lo));
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
  auto f1 = detail::fisher_at(spec, engine, x1);
  auto f2 = detail::fisher_at(spec, engine, x2);
  evaluations += 2;
  auto consider = [&](double theta, detail::FisherSample& s) {
    if (s.value > best_sample.value) {
      best_sample = s;
      best_theta = theta;
    }
  };
  consider(x1, f1);
  consider(x2, f2);
  while (hi - lo > tol) {
    if (f1.value >= f2.value) {
      hi = x2;
      x2 = x1;
      f2 = std::move(f1);
      x1 = hi - inv_phi * (hi - lo);
      f1 = detail::fisher_at(spec, engine, x1);
      consider(x1, f1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = std::move(f2);
      x2 = lo + inv_phi * (hi - lo);
      f2 = detail::fisher_at(spec, engine, x2);
      consider(x2, f2);
    }
    ++evaluations;
  }
  auto report = detail::make_report(spec, best_theta, std::move(best_sample), qfi_exact(spec).value);
  report.evaluations = evaluations;
  return report;
}

struct HellingerEstimate {
  double theta = 0.0;
  double delta_theta = 0.0;
  double distance_sq = 0.0;  // 1 - sum sqrt(p(theta) p(theta + dtheta))
  double fisher = 0.0;       // 8 d^2 / dtheta^2
};

/// Fisher information estimated from the Hellinger distance between outcome
/// distributions at neighbouring angles.
[[nodiscard]] inline HellingerEstimate hellinger_fisher(const BlockSpectrum& spec, double theta, double delta_theta,
                                                        Generator gen = Generator::x,
                                                        EvaluationCutoffs cut = kFisherCutoffs) {
  if (delta_theta == 0.0) throw Error("degenerate step");
  if (!(delta_theta > 0.0 && delta_theta <= 0.1)) throw Error("invalid step");
  (void)gen;
  const OutcomeEngine engine(spec, cut);
  std::vector<std::vector<double>> here(spec.blocks.size());
  engine.run(theta, false, [&](std::size_t pos, std::span<const double> p, std::span<const double>) {
    here[pos].assign(p.begin(), p.end());
  });
  // For distributions of equal total mass, 1 - sum sqrt(pq) = sum (sqrt p - sqrt q)^2 / 2;
  // the right-hand side avoids cancellation at small steps.
  double d2 = 0.0;
  engine.run(theta + delta_theta, false, [&](std::size_t pos, std::span<const double> q, std::span<const double>) {
    const auto& p = here[pos];
    double acc = 0.0;
    for (std::size_t a = 0; a < q.size(); ++a) {
      const double diff = std::sqrt(p[a]) - std::sqrt(q[a]);
      acc += diff * diff;
    }
    d2 += 0.5 * acc;
  });
  return {theta, delta_theta, d2, 8.0 * d2 / (delta_theta * delta_theta)};
}

}  // namespace twin_metrology
