// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file state_model.hpp
 * @brief Atom-number distributions of two independent sources and the
 *        eigenvalue spectrum of the resulting block-diagonal input state.
 *
 * The product state P_a(N_a) P_b(N_b) |N_a, N_b><N_a, N_b| is diagonal in the
 * Fock basis. Grouped by N = N_a + N_b it becomes a direct sum of blocks whose
 * eigenvalues are lambda^(N)_k = P_a(k) P_b(N - k), with k = N_a.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <boost/math/special_functions/erf.hpp>

#include "twin_metrology/error.hpp"
#include "twin_metrology/random.hpp"

namespace twin_metrology {

enum class EnvelopeKind { gaussian, table };

struct GaussianEnvelope {
  double mean = 0.0;   // mu = N_bar / 2
  double width = 1.0;  // sigma
  double mass_tol = 1e-12;
};

struct TableEnvelope {
  int start = 0;
  std::vector<double> values;
};

using EnvelopeSpec = std::variant<GaussianEnvelope, TableEnvelope>;

/// P(N_i) over the window [start, start + values.size() - 1].
struct NumberDistribution {
  EnvelopeKind kind = EnvelopeKind::table;
  double mean = 0.0;   // gaussian only
  double width = 0.0;  // gaussian only
  int start = 0;
  std::vector<double> values;
  bool normalized = false;
  std::size_t clamped_entries = 0;  // negative products zeroed by apply_disorder

  [[nodiscard]] int window_min() const noexcept { return start; }
  [[nodiscard]] int window_max() const noexcept { return start + static_cast<int>(values.size()) - 1; }
  [[nodiscard]] double operator()(int atoms) const noexcept {
    const int i = atoms - start;
    return i >= 0 && i < static_cast<int>(values.size()) ? values[static_cast<std::size_t>(i)] : 0.0;
  }
  [[nodiscard]] double total() const noexcept {
    double t = 0.0;
    for (double v : values) t += v;
    return t;
  }
  [[nodiscard]] double mean_atoms() const noexcept {
    double m = 0.0, t = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      m += (start + static_cast<double>(i)) * values[i];
      t += values[i];
    }
    return t > 0 ? m / t : 0.0;
  }
};

/// Half-width of the Gaussian window in units of sigma: at least 8, wider if
/// mass_tol asks for it.
[[nodiscard]] inline double gaussian_window_halfwidth(double mass_tol) {
  if (!(mass_tol > 0.0 && mass_tol < 1.0)) throw Error("invalid mass tolerance");
  return std::max(8.0, std::sqrt(2.0) * boost::math::erfc_inv(mass_tol));
}

namespace detail {
inline void normalize(NumberDistribution& d) {
  const double t = d.total();
  if (!(t > 0.0) || !std::isfinite(t)) throw Error("degenerate distribution");
  for (double& v : d.values) v /= t;
  d.normalized = true;
}
}  // namespace detail

[[nodiscard]] inline NumberDistribution build_distribution(const EnvelopeSpec& spec) {
  NumberDistribution d;
  if (const auto* g = std::get_if<GaussianEnvelope>(&spec)) {
    if (!(g->width > 0.0) || !std::isfinite(g->width)) throw Error("invalid width");
    if (!std::isfinite(g->mean) || g->mean < 0.0) throw Error("invalid mean");
    const double half = gaussian_window_halfwidth(g->mass_tol) * g->width;
    const int lo = std::max(0, static_cast<int>(std::ceil(g->mean - half)));
    const int hi = static_cast<int>(std::ceil(g->mean + half));
    d.kind = EnvelopeKind::gaussian;
    d.mean = g->mean;
    d.width = g->width;
    d.start = lo;
    d.values.resize(static_cast<std::size_t>(hi - lo + 1));
    for (int n = lo; n <= hi; ++n) {
      const double z = (n - g->mean) / g->width;
      d.values[static_cast<std::size_t>(n - lo)] = std::exp(-0.5 * z * z);
    }
  } else {
    const auto& t = std::get<TableEnvelope>(spec);
    if (t.start < 0) throw Error("invalid window");
    if (t.values.empty()) throw Error("degenerate distribution");
    for (double v : t.values)
      if (!(v >= 0.0) || !std::isfinite(v)) throw Error("invalid probability");
    d.kind = EnvelopeKind::table;
    d.start = t.start;
    d.values = t.values;
  }
  detail::normalize(d);
  return d;
}

enum class DisorderKind { iid_uniform, table };
enum class DisorderSharing { shared, independent };
enum class Source { a, b };

/// One draw of the stationary process xi(N) for both sources.
struct DisorderRealization {
  double amplitude = 0.0;
  DisorderKind kind = DisorderKind::iid_uniform;
  DisorderSharing sharing = DisorderSharing::shared;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  double kappa0 = 1.0 / 3.0;  // declared correlation at lag 0
  double kappa1 = 0.0;        // declared correlation at lag 1
  int start_a = 0;
  std::vector<double> xi_a;
  int start_b = 0;
  std::vector<double> xi_b;

  [[nodiscard]] double xi(Source s, int atoms) const noexcept {
    const auto& t = s == Source::a ? xi_a : xi_b;
    const int i = atoms - (s == Source::a ? start_a : start_b);
    return i >= 0 && i < static_cast<int>(t.size()) ? t[static_cast<std::size_t>(i)] : 0.0;
  }
};

/// Value of the iid-uniform process at atom number N_i; a pure function of
/// (seed, stream, source, N_i).
[[nodiscard]] inline double iid_uniform_xi(std::uint64_t seed, std::uint64_t stream, Source source, int atoms) {
  const CounterRng rng = CounterRng(seed, stream).split(source == Source::a ? 0 : 1);
  return rng.symmetric(static_cast<std::uint64_t>(atoms));
}

/// Draws realization `stream` of the iid-uniform process over both windows.
[[nodiscard]] inline DisorderRealization draw_disorder(const NumberDistribution& pa, const NumberDistribution& pb,
                                                       double amplitude, DisorderSharing sharing, std::uint64_t seed,
                                                       std::uint64_t stream) {
  if (!(amplitude >= 0.0 && amplitude <= 1.0)) throw Error("invalid disorder amplitude");
  DisorderRealization r;
  r.amplitude = amplitude;
  r.kind = DisorderKind::iid_uniform;
  r.sharing = sharing;
  r.seed = seed;
  r.stream = stream;
  const Source b_source = sharing == DisorderSharing::shared ? Source::a : Source::b;
  r.start_a = pa.start;
  r.xi_a.resize(pa.values.size());
  for (std::size_t i = 0; i < pa.values.size(); ++i)
    r.xi_a[i] = iid_uniform_xi(seed, stream, Source::a, pa.start + static_cast<int>(i));
  r.start_b = pb.start;
  r.xi_b.resize(pb.values.size());
  for (std::size_t i = 0; i < pb.values.size(); ++i)
    r.xi_b[i] = iid_uniform_xi(seed, stream, b_source, pb.start + static_cast<int>(i));
  return r;
}

/// Realization from an explicit xi table; xi is 0 outside [start, start + size).
[[nodiscard]] inline DisorderRealization disorder_from_table(const NumberDistribution& pa,
                                                             const NumberDistribution& pb, double amplitude,
                                                             int start, std::span<const double> xi, double kappa0,
                                                             double kappa1) {
  if (!(amplitude >= 0.0 && amplitude <= 1.0)) throw Error("invalid disorder amplitude");
  DisorderRealization r;
  r.amplitude = amplitude;
  r.kind = DisorderKind::table;
  r.kappa0 = kappa0;
  r.kappa1 = kappa1;
  auto fill = [&](const NumberDistribution& p, int& s, std::vector<double>& out) {
    s = p.start;
    out.assign(p.values.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const long j = static_cast<long>(p.start) + static_cast<long>(i) - start;
      if (j >= 0 && j < static_cast<long>(xi.size())) out[i] = xi[static_cast<std::size_t>(j)];
    }
  };
  fill(pa, r.start_a, r.xi_a);
  fill(pb, r.start_b, r.xi_b);
  return r;
}

/// P(N_i) -> P(N_i) (1 + eps xi(N_i)), renormalized. Negative products are
/// clamped to zero and counted.
[[nodiscard]] inline NumberDistribution apply_disorder(const NumberDistribution& dist,
                                                       const DisorderRealization& real, Source source) {
  if (!dist.normalized) throw Error("distribution not normalized");
  NumberDistribution out = dist;
  if (real.amplitude == 0.0) return out;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double v = dist.values[i] * (1.0 + real.amplitude * real.xi(source, dist.start + static_cast<int>(i)));
    if (v < 0.0) {
      out.values[i] = 0.0;
      ++out.clamped_entries;
    } else {
      out.values[i] = v;
    }
  }
  detail::normalize(out);
  return out;
}

/// lambda^(N)_k for k in [offset, offset + weights.size()); zero elsewhere in [0, N].
struct SpectrumBlock {
  int total_atoms = 0;
  int offset = 0;
  std::vector<double> weights;

  [[nodiscard]] double operator()(int k) const noexcept {
    const int i = k - offset;
    return i >= 0 && i < static_cast<int>(weights.size()) ? weights[static_cast<std::size_t>(i)] : 0.0;
  }
  [[nodiscard]] double mass() const noexcept {
    double m = 0.0;
    for (double w : weights) m += w;
    return m;
  }
};

/// Eigenvalues of the two-source state grouped by total atom number, ascending N.
struct BlockSpectrum {
  std::vector<SpectrumBlock> blocks;
  double trace = 0.0;       // before normalization
  double mean_atoms = 0.0;  // N_bar

  [[nodiscard]] const SpectrumBlock* find(int total_atoms) const noexcept {
    if (blocks.empty()) return nullptr;
    const int i = total_atoms - blocks.front().total_atoms;
    return i >= 0 && i < static_cast<int>(blocks.size()) ? &blocks[static_cast<std::size_t>(i)] : nullptr;
  }
  [[nodiscard]] double weight(int total_atoms, int k) const noexcept {
    const auto* b = find(total_atoms);
    return b ? (*b)(k) : 0.0;
  }
  [[nodiscard]] int max_total_atoms() const noexcept { return blocks.empty() ? -1 : blocks.back().total_atoms; }
  /// Sum of (N+1) over blocks: the dimension a dense representation needs.
  [[nodiscard]] std::size_t dense_dimension() const noexcept {
    std::size_t d = 0;
    for (const auto& b : blocks) d += static_cast<std::size_t>(b.total_atoms) + 1;
    return d;
  }
};

[[nodiscard]] inline BlockSpectrum block_spectra(const NumberDistribution& pa, const NumberDistribution& pb) {
  if (!pa.normalized || !pb.normalized) throw Error("distribution not normalized");
  if (pa.values.empty() || pb.values.empty()) throw Error("empty spectrum");
  BlockSpectrum spec;
  const int a0 = pa.window_min(), a1 = pa.window_max();
  const int b0 = pb.window_min(), b1 = pb.window_max();
  spec.blocks.reserve(static_cast<std::size_t>(a1 + b1 - a0 - b0 + 1));
  double trace = 0.0;
  for (int n = a0 + b0; n <= a1 + b1; ++n) {
    SpectrumBlock blk;
    blk.total_atoms = n;
    blk.offset = std::max(a0, n - b1);
    const int last = std::min(a1, n - b0);
    blk.weights.resize(static_cast<std::size_t>(last - blk.offset + 1));
    for (int k = blk.offset; k <= last; ++k) {
      const double w = pa(k) * pb(n - k);
      blk.weights[static_cast<std::size_t>(k - blk.offset)] = w;
      trace += w;
    }
    spec.blocks.push_back(std::move(blk));
  }
  if (!(trace > 0.0)) throw Error("empty spectrum");
  double mean = 0.0;
  for (auto& blk : spec.blocks) {
    for (double& w : blk.weights) w /= trace;
    mean += blk.total_atoms * blk.mass();
  }
  spec.trace = trace;
  spec.mean_atoms = mean;
  return spec;
}

}  // namespace twin_metrology
