// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file ensemble.hpp
 * @brief Monte Carlo over disorder realizations, width sweeps and
 *        probability maps of a single block.
 *
 * Realization r of every cell draws xi from stream (seed, r). Because xi(N_i)
 * is a pure function of (seed, r, source, N_i), cells of a sweep share their
 * noise (common random numbers) and results do not depend on scheduling.
 */

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "twin_metrology/error.hpp"
#include "twin_metrology/estimation.hpp"
#include "twin_metrology/metrology.hpp"
#include "twin_metrology/parallel.hpp"
#include "twin_metrology/spin_algebra.hpp"
#include "twin_metrology/state_model.hpp"

namespace twin_metrology {

/// Explicit xi table used instead of the iid-uniform process.
struct DisorderTable {
  int start = 0;
  std::vector<double> values;
  double kappa0 = 1.0 / 3.0;
  double kappa1 = 0.0;
};

struct SweepConfig {
  double n_bar = 750.0;
  std::vector<double> sigmas{50.0};
  std::vector<double> epsilons{0.0};
  std::size_t realizations = 100;
  std::uint64_t seed = 42;
  Generator generator = Generator::x;
  OptimizerOptions optimizer{};
  DisorderSharing sharing = DisorderSharing::shared;
  std::optional<DisorderTable> table;  // iid-uniform when empty
  double mass_tol = 1e-12;
  bool compute_fisher = true;
  unsigned threads = 1;

  [[nodiscard]] double kappa0() const noexcept { return table ? table->kappa0 : 1.0 / 3.0; }
  [[nodiscard]] double kappa1() const noexcept { return table ? table->kappa1 : 0.0; }
};

inline void validate(const SweepConfig& cfg) {
  if (!(cfg.n_bar > 0.0) || !std::isfinite(cfg.n_bar)) throw Error("invalid mean atom number");
  if (cfg.realizations < 1) throw Error("invalid ensemble size");
  if (cfg.sigmas.empty() || cfg.epsilons.empty()) throw Error("empty sweep");
  for (double s : cfg.sigmas)
    if (!(s > 0.0) || !std::isfinite(s)) throw Error("invalid width");
  for (double e : cfg.epsilons)
    if (!(e >= 0.0 && e <= 1.0)) throw Error("invalid disorder amplitude");
  if (cfg.compute_fisher && cfg.optimizer.grid_points < 8) throw Error("grid_points must be at least 8");
}

/// Sample mean and sample standard deviation.
struct Summary {
  double mean = 0.0;
  double std = 0.0;

  [[nodiscard]] double standard_error(std::size_t count) const noexcept {
    return count > 0 ? std / std::sqrt(static_cast<double>(count)) : 0.0;
  }
};

/// Accumulated relative to the first value, so identical inputs give an
/// exact mean and a zero spread.
[[nodiscard]] inline Summary summarize(std::span<const double> xs) {
  Summary s;
  if (xs.empty()) return s;
  const double x0 = xs.front();
  double shift = 0.0;
  for (double x : xs) shift += x - x0;
  const double n = static_cast<double>(xs.size());
  s.mean = x0 + shift / n;
  if (xs.size() > 1) {
    double sq = 0.0;
    for (double x : xs) sq += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(sq / (n - 1.0));
  }
  return s;
}

struct SweepCell {
  double sigma = 0.0;
  double epsilon = 0.0;
  std::vector<double> qfi;        // per realization
  std::vector<double> cfi;        // optimized; empty when Fisher is off
  std::vector<double> theta_opt;  // same shape as cfi
  std::vector<double> n_bar;      // realized mean atom number
  std::size_t clamped_entries = 0;
  Summary qfi_stats, cfi_stats;          // raw values
  Summary qfi_snl_stats, cfi_snl_stats;  // per-realization F / N_bar
  double plateau = 0.0;                  // raw

  [[nodiscard]] std::size_t realizations() const noexcept { return qfi.size(); }
};

struct SweepResult {
  SweepConfig config;
  std::vector<SweepCell> cells;  // sigma-major, epsilon-minor

  [[nodiscard]] const SweepCell* find(double sigma, double epsilon) const noexcept {
    for (const auto& c : cells)
      if (c.sigma == sigma && c.epsilon == epsilon) return &c;
    return nullptr;
  }
};

/// Source distributions of one realization.
struct RealizedSources {
  NumberDistribution a, b;
  DisorderRealization disorder;
};

[[nodiscard]] inline RealizedSources realize_sources(const SweepConfig& cfg, double sigma, double epsilon,
                                                     std::uint64_t realization) {
  const auto clean = build_distribution(GaussianEnvelope{0.5 * cfg.n_bar, sigma, cfg.mass_tol});
  RealizedSources out{clean, clean, {}};
  if (cfg.table) {
    out.disorder = disorder_from_table(clean, clean, epsilon, cfg.table->start, cfg.table->values, cfg.table->kappa0,
                                       cfg.table->kappa1);
    out.disorder.sharing = DisorderSharing::shared;
  } else {
    out.disorder = draw_disorder(clean, clean, epsilon, cfg.sharing, cfg.seed, realization);
  }
  out.a = apply_disorder(clean, out.disorder, Source::a);
  out.b = apply_disorder(clean, out.disorder, Source::b);
  return out;
}

namespace detail {

struct RealizationOutcome {
  double qfi = 0.0, cfi = 0.0, theta = 0.0, n_bar = 0.0;
  std::size_t clamped = 0;
};

inline RealizationOutcome run_realization(const SweepConfig& cfg, double sigma, double epsilon,
                                          std::uint64_t realization) {
  const auto src = realize_sources(cfg, sigma, epsilon, realization);
  const auto spec = block_spectra(src.a, src.b);
  RealizationOutcome out;
  out.qfi = qfi_exact(spec, cfg.generator).value;
  out.n_bar = spec.mean_atoms;
  out.clamped = src.a.clamped_entries + src.b.clamped_entries;
  if (cfg.compute_fisher) {
    OptimizerOptions opt = cfg.optimizer;
    opt.threads = 1;
    const auto f = optimize_fisher(spec, cfg.generator, opt);
    out.cfi = f.value;
    out.theta = f.theta;
  }
  return out;
}

inline void finish_cell(SweepCell& cell, const SweepConfig& cfg) {
  std::vector<double> snl(cell.qfi.size());
  for (std::size_t i = 0; i < snl.size(); ++i) snl[i] = cell.qfi[i] / cell.n_bar[i];
  cell.qfi_stats = summarize(cell.qfi);
  cell.qfi_snl_stats = summarize(snl);
  if (!cell.cfi.empty()) {
    for (std::size_t i = 0; i < snl.size(); ++i) snl[i] = cell.cfi[i] / cell.n_bar[i];
    cell.cfi_stats = summarize(cell.cfi);
    cell.cfi_snl_stats = summarize(snl);
  }
  cell.plateau = plateau_prediction(cfg.n_bar, cell.sigma, cell.epsilon, cfg.kappa0(), cfg.kappa1()).value;
}

}  // namespace detail

/**
 * All cells of the (sigma, epsilon) grid. Cells without randomness (epsilon
 * = 0, or a fixed xi table) are evaluated once and replicated R times.
 */
[[nodiscard]] inline SweepResult sweep_sigma(const SweepConfig& cfg) {
  validate(cfg);
  SweepResult result{cfg, {}};
  struct Task {
    std::size_t cell;
    std::uint64_t realization;
  };
  std::vector<Task> tasks;
  std::vector<std::size_t> first_task;
  for (double sigma : cfg.sigmas) {
    for (double eps : cfg.epsilons) {
      SweepCell cell;
      cell.sigma = sigma;
      cell.epsilon = eps;
      const bool random = eps != 0.0 && !cfg.table;
      const std::size_t distinct = random ? cfg.realizations : 1;
      first_task.push_back(tasks.size());
      for (std::size_t r = 0; r < distinct; ++r) tasks.push_back({result.cells.size(), r});
      result.cells.push_back(std::move(cell));
    }
  }
  std::vector<detail::RealizationOutcome> outcomes(tasks.size());
  parallel_for(tasks.size(), cfg.threads, [&](std::size_t i) {
    const auto& cell = result.cells[tasks[i].cell];
    outcomes[i] = detail::run_realization(cfg, cell.sigma, cell.epsilon, tasks[i].realization);
  });
  // Deterministic (sigma, epsilon, r) aggregation.
  first_task.push_back(tasks.size());
  for (std::size_t c = 0; c < result.cells.size(); ++c) {
    auto& cell = result.cells[c];
    const std::size_t distinct = first_task[c + 1] - first_task[c];
    for (std::size_t r = 0; r < cfg.realizations; ++r) {
      const auto& o = outcomes[first_task[c] + (distinct == 1 ? 0 : r)];
      cell.qfi.push_back(o.qfi);
      cell.n_bar.push_back(o.n_bar);
      cell.clamped_entries += o.clamped;
      if (cfg.compute_fisher) {
        cell.cfi.push_back(o.cfi);
        cell.theta_opt.push_back(o.theta);
      }
    }
    detail::finish_cell(cell, cfg);
  }
  return result;
}

/// One cell of the sweep.
[[nodiscard]] inline SweepCell run_disorder_ensemble(const SweepConfig& cfg, double sigma, double epsilon) {
  SweepConfig one = cfg;
  one.sigmas = {sigma};
  one.epsilons = {epsilon};
  return std::move(sweep_sigma(one).cells.front());
}

/// Conditional outcome distribution p(n | theta, N) of one block on a theta grid.
struct ProbabilityMap {
  int block = 0;
  double block_mass = 0.0;
  Generator generator = Generator::x;
  std::vector<double> thetas;
  int k_min = 0;  // first row; imbalance n = k - block/2
  int k_max = 0;
  std::vector<std::vector<double>> probabilities;  // [theta][k - k_min]

  [[nodiscard]] double imbalance(int k) const noexcept { return k - 0.5 * block; }
};

inline constexpr double kEmptyBlockMass = 1e-12;

/// n_min / n_max restrict the rows (imbalance units); default is the whole block.
[[nodiscard]] inline ProbabilityMap probability_map(const BlockSpectrum& spec, int block, std::span<const double> thetas,
                                                    Generator gen = Generator::x,
                                                    std::optional<double> n_min = std::nullopt,
                                                    std::optional<double> n_max = std::nullopt) {
  const SpectrumBlock* blk = spec.find(block);
  const double mass = blk ? blk->mass() : 0.0;
  if (!(mass >= kEmptyBlockMass)) throw Error("empty block");
  ProbabilityMap map;
  map.block = block;
  map.block_mass = mass;
  map.generator = gen;
  map.thetas.assign(thetas.begin(), thetas.end());
  map.k_min = n_min ? std::max(0, static_cast<int>(std::ceil(*n_min + 0.5 * block - 1e-9))) : 0;
  map.k_max = n_max ? std::min(block, static_cast<int>(std::floor(*n_max + 0.5 * block + 1e-9))) : block;
  if (map.k_min > map.k_max) throw Error("empty imbalance range");
  Eigen::VectorXd lam(block + 1);
  for (int k = 0; k <= block; ++k) lam(k) = (*blk)(k) / mass;
  for (double theta : thetas) {
    if (!std::isfinite(theta)) throw Error("non-finite angle");
    const auto kernel = cached_rotation_kernel(block, theta, gen);
    const Eigen::VectorXd p = kernel->probabilities * lam;
    map.probabilities.emplace_back(p.data() + map.k_min, p.data() + map.k_max + 1);
  }
  return map;
}

/// Sum over neighbouring angles of the L1 distance between rows.
[[nodiscard]] inline double total_variation(const ProbabilityMap& map) {
  double tv = 0.0;
  for (std::size_t t = 1; t < map.probabilities.size(); ++t) {
    const auto& a = map.probabilities[t - 1];
    const auto& b = map.probabilities[t];
    for (std::size_t i = 0; i < a.size(); ++i) tv += std::abs(b[i] - a[i]);
  }
  return tv;
}

/// theta_i = 2 pi i / (count - 1), i = 0 .. count-1, closing the circle.
[[nodiscard]] inline std::vector<double> full_turn_grid(std::size_t count) {
  if (count < 2) return std::vector<double>(count, 0.0);
  const double two_pi = 2.0 * std::acos(-1.0);
  std::vector<double> g(count);
  for (std::size_t i = 0; i < count; ++i) g[i] = two_pi * static_cast<double>(i) / static_cast<double>(count - 1);
  return g;
}

}  // namespace twin_metrology
