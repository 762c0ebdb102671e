// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file spin_algebra.hpp
 * @brief Schwinger angular-momentum algebra of one total-atom-number block.
 *
 * A block with N atoms spans the Fock states |k, N-k>, k = 0..N, where k is
 * the occupation of mode a and n = k - N/2 is the imbalance. In that basis
 *
 *   Jz = diag(n),   <k+1|Jx|k> = sqrt((k+1)(N-k)) / 2,   Jy = -i[Jx-like].
 *
 * Two independent routes produce rotation kernels K[k,k'] = |<k|U(theta)|k'>|^2:
 *  - rotation_kernel(): spectral decomposition of the tridiagonal Jx; cached.
 *  - RotationLadder: recursion over N that adds one boson at a time. It builds
 *    every block up to N_max for one angle in O(sum N * band) and is the
 *    production path for outcome statistics of large states.
 */

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string_view>
#include <tuple>
#include <vector>

#if defined(__SSE2__) || defined(_M_X64)
#include <xmmintrin.h>
#define TWIN_METROLOGY_HAS_MXCSR 1
#endif

#include "twin_metrology/error.hpp"

namespace twin_metrology {

/// Rotation axis in the x-y plane of the collective spin.
enum class Generator { x, y };

inline std::string_view to_string(Generator g) noexcept { return g == Generator::x ? "jx" : "jy"; }

/// One total-atom-number block.
struct BlockIndex {
  int total_atoms = 0;

  [[nodiscard]] constexpr int dimension() const noexcept { return total_atoms + 1; }
  /// n = k - N/2; half-integer for odd N.
  [[nodiscard]] constexpr double imbalance(int k) const noexcept { return k - 0.5 * total_atoms; }
  /// Inverse of imbalance(); n must be a valid (half-)integer of this block.
  [[nodiscard]] int index(double n) const {
    const double k = n + 0.5 * total_atoms;
    const double r = std::round(k);
    if (std::abs(k - r) > 1e-9 || r < 0 || r > total_atoms)
      throw Error("imbalance outside block");
    return static_cast<int>(r);
  }
};

/// <k+1|Jx|k> = sqrt((k+1)(N-k))/2, i.e. sqrt(a_n)/2 with a_n = (N/2+n)(N/2-n+1), n = k+1-N/2.
[[nodiscard]] inline double ladder_coefficient(int total_atoms, int k) noexcept {
  return 0.5 * std::sqrt(static_cast<double>(k + 1) * static_cast<double>(total_atoms - k));
}

struct AngularMomentumMatrices {
  BlockIndex block;
  Eigen::MatrixXd jx;
  Eigen::MatrixXcd jy;
  Eigen::MatrixXd jz;

  [[nodiscard]] Eigen::MatrixXcd generator(Generator g) const {
    return g == Generator::x ? Eigen::MatrixXcd(jx.cast<std::complex<double>>()) : jy;
  }
};

[[nodiscard]] inline AngularMomentumMatrices angular_momentum_matrices(int total_atoms) {
  if (total_atoms < 0) throw Error("negative block size");
  const int d = total_atoms + 1;
  AngularMomentumMatrices m{BlockIndex{total_atoms}, Eigen::MatrixXd::Zero(d, d),
                            Eigen::MatrixXcd::Zero(d, d), Eigen::MatrixXd::Zero(d, d)};
  const std::complex<double> half_i(0.0, 1.0);
  for (int k = 0; k < d; ++k) {
    m.jz(k, k) = m.block.imbalance(k);
    if (k + 1 < d) {
      const double c = ladder_coefficient(total_atoms, k);
      m.jx(k + 1, k) = c;
      m.jx(k, k + 1) = c;
      // Jy = (a^dag b - a b^dag) / 2i
      m.jy(k + 1, k) = -half_i * c;
      m.jy(k, k + 1) = half_i * c;
    }
  }
  return m;
}

/// |<k|exp(-i theta J)|k'>|^2 and its theta-derivative for one block.
struct RotationKernel {
  BlockIndex block;
  double theta = 0.0;
  Generator generator = Generator::x;
  Eigen::MatrixXd probabilities;  // K
  Eigen::MatrixXd derivative;     // dK/dtheta
};

namespace detail {

struct JxEigenbasis {
  Eigen::VectorXd eigenvalues;
  Eigen::MatrixXd eigenvectors;
};

inline std::shared_ptr<const JxEigenbasis> jx_eigenbasis(int total_atoms) {
  static std::mutex mutex;
  static std::map<int, std::shared_ptr<const JxEigenbasis>> cache;
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(total_atoms); it != cache.end()) return it->second;
  }
  const int d = total_atoms + 1;
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd sub(std::max(d - 1, 0));
  for (int k = 0; k + 1 < d; ++k) sub(k) = ladder_coefficient(total_atoms, k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) throw Error("eigensolver failed");
  auto basis = std::make_shared<const JxEigenbasis>(
      JxEigenbasis{solver.eigenvalues(), solver.eigenvectors()});
  std::lock_guard lock(mutex);
  return cache.try_emplace(total_atoms, std::move(basis)).first->second;
}

// (Jx M) for tridiagonal Jx.
inline Eigen::MatrixXd apply_jx(int total_atoms, const Eigen::MatrixXd& m) {
  const int d = total_atoms + 1;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, d);
  for (int k = 0; k + 1 < d; ++k) {
    const double c = ladder_coefficient(total_atoms, k);
    out.row(k + 1) += c * m.row(k);
    out.row(k) += c * m.row(k + 1);
  }
  return out;
}

}  // namespace detail

/**
 * Kernel from the spectral form exp(-i theta Jx) = V exp(-i theta L) V^T.
 * With U = C - iS (C, S real) the derivative follows from dU/dtheta = -i Jx U:
 * K' = 2 (S o JxC - C o JxS). A y-rotation is the x-rotation conjugated by
 * the diagonal phase exp(-i pi/2 Jz), so both generators share K and K'.
 */
[[nodiscard]] inline RotationKernel rotation_kernel(int total_atoms, double theta, Generator gen) {
  if (total_atoms < 0) throw Error("negative block size");
  if (!std::isfinite(theta)) throw Error("non-finite angle");
  const auto basis = detail::jx_eigenbasis(total_atoms);
  const Eigen::MatrixXd& v = basis->eigenvectors;
  const Eigen::ArrayXd phase = theta * basis->eigenvalues.array();
  const Eigen::MatrixXd c = v * phase.cos().matrix().asDiagonal() * v.transpose();
  const Eigen::MatrixXd s = v * phase.sin().matrix().asDiagonal() * v.transpose();
  RotationKernel kernel{BlockIndex{total_atoms}, theta, gen, {}, {}};
  kernel.probabilities = (c.array().square() + s.array().square()).matrix();
  kernel.derivative = 2.0 * (s.array() * detail::apply_jx(total_atoms, c).array() -
                             c.array() * detail::apply_jx(total_atoms, s).array())
                                .matrix();
  return kernel;
}

/// Thread-safe cache of spectral kernels keyed by (N, bit pattern of theta, generator).
/// Insertions stop once the byte budget is reached; lookups keep working.
class KernelCache {
 public:
  explicit KernelCache(std::size_t byte_budget = std::size_t{256} << 20) : budget_(byte_budget) {}

  std::shared_ptr<const RotationKernel> get(int total_atoms, double theta, Generator gen) {
    const Key key{total_atoms, std::bit_cast<std::uint64_t>(theta), gen};
    {
      std::lock_guard lock(mutex_);
      if (auto it = entries_.find(key); it != entries_.end()) return it->second;
    }
    auto kernel = std::make_shared<const RotationKernel>(rotation_kernel(total_atoms, theta, gen));
    const std::size_t bytes = 2 * sizeof(double) * static_cast<std::size_t>(kernel->probabilities.size());
    std::lock_guard lock(mutex_);
    if (auto it = entries_.find(key); it != entries_.end()) return it->second;
    if (used_ + bytes <= budget_) {
      used_ += bytes;
      entries_.emplace(key, kernel);
    }
    return kernel;
  }

  [[nodiscard]] std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }

  void clear() {
    std::lock_guard lock(mutex_);
    entries_.clear();
    used_ = 0;
  }

 private:
  using Key = std::tuple<int, std::uint64_t, Generator>;
  mutable std::mutex mutex_;
  std::map<Key, std::shared_ptr<const RotationKernel>> entries_;
  std::size_t budget_;
  std::size_t used_ = 0;
};

inline KernelCache& kernel_cache() {
  static KernelCache cache;
  return cache;
}

[[nodiscard]] inline std::shared_ptr<const RotationKernel> cached_rotation_kernel(int total_atoms, double theta,
                                                                                  Generator gen) {
  return kernel_cache().get(total_atoms, theta, gen);
}

/// Inclusive column range; hi < lo means empty.
struct ColumnBand {
  int lo = 0;
  int hi = -1;

  [[nodiscard]] constexpr bool empty() const noexcept { return hi < lo; }
  [[nodiscard]] constexpr int width() const noexcept { return empty() ? 0 : hi - lo + 1; }
  [[nodiscard]] constexpr bool contains(int c) const noexcept { return c >= lo && c <= hi; }
};

/// Read-only view of the rotation matrix D(theta) = exp(-i theta Jy) of one
/// block, restricted to a column band. All N+1 rows are present.
class LadderBlock {
 public:
  LadderBlock(int total_atoms, ColumnBand band, const double* data) noexcept
      : total_atoms_(total_atoms), band_(band), data_(data) {}

  [[nodiscard]] int total_atoms() const noexcept { return total_atoms_; }
  [[nodiscard]] ColumnBand band() const noexcept { return band_; }
  /// Row A, indexed by column - band().lo.
  [[nodiscard]] const double* row(int a) const noexcept {
    return data_ + static_cast<std::size_t>(a) * static_cast<std::size_t>(band_.width());
  }
  [[nodiscard]] double operator()(int a, int column) const noexcept { return row(a)[column - band_.lo]; }

 private:
  int total_atoms_;
  ColumnBand band_;
  const double* data_;
};

/// Flushes subnormal results to zero for the lifetime of the object. Far
/// outside the classically allowed region D(theta) decays below 1e-308, and
/// subnormal arithmetic there is two orders of magnitude slower.
class ScopedFlushToZero {
 public:
#ifdef TWIN_METROLOGY_HAS_MXCSR
  ScopedFlushToZero() noexcept : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }  // FTZ | DAZ
  ~ScopedFlushToZero() { _mm_setcsr(saved_); }
#else
  ScopedFlushToZero() noexcept = default;
#endif
  ScopedFlushToZero(const ScopedFlushToZero&) = delete;
  ScopedFlushToZero& operator=(const ScopedFlushToZero&) = delete;

 private:
#ifdef TWIN_METROLOGY_HAS_MXCSR
  unsigned saved_;
#endif
};

/**
 * Builds exp(-i theta Jy) block by block from the two-mode boson recursion
 *
 *   |na, nb> = a^dag |na-1, nb> / sqrt(na) = b^dag |na, nb-1> / sqrt(nb),
 *   U a^dag U^dag = c a^dag + s b^dag,  U b^dag U^dag = -s a^dag + c b^dag,
 *
 * with c = cos(theta/2), s = sin(theta/2). Either form alone loses accuracy
 * exponentially in N; their average weighted by na/N and nb/N does not, so
 * it is used wherever columns na-1 and na of block N-1 are both present and
 * a single form only at the edge of a band. The constructor propagates the
 * requested column bands down to N = 0 without widening them.
 */
class RotationLadder {
 public:
  explicit RotationLadder(std::vector<ColumnBand> required) : required_(std::move(required)) {
    while (!required_.empty() && required_.back().empty()) required_.pop_back();
    bands_ = required_;
    const int top = static_cast<int>(bands_.size()) - 1;
    // Relative position of the band edges, carried down along rays through
    // the origin so that small blocks keep a proportionate band.
    double ray_lo = 1.0, ray_hi = 0.0;
    for (int m = top; m >= 0; --m) {
      ColumnBand band = clip(bands_[static_cast<std::size_t>(m)], m);
      if (m < top) {
        const ColumnBand next = bands_[static_cast<std::size_t>(m) + 1];
        if (!next.empty()) {
          const int lo = std::min(next.lo, m);
          const ColumnBand pred{lo, std::max(lo, std::min(next.hi - 1, m))};
          band = hull(band, pred);
        }
      }
      if (m > 0 && ray_lo <= ray_hi)
        band = hull(band, clip({static_cast<int>(std::floor(ray_lo * m)), static_cast<int>(std::ceil(ray_hi * m))}, m));
      if (const ColumnBand req = clip(required_[static_cast<std::size_t>(m)], m); m > 0 && !req.empty()) {
        ray_lo = std::min(ray_lo, static_cast<double>(req.lo) / m);
        ray_hi = std::max(ray_hi, static_cast<double>(req.hi) / m);
      }
      bands_[static_cast<std::size_t>(m)] = band;
    }
    std::size_t largest = 1;
    for (std::size_t n = 0; n < bands_.size(); ++n)
      largest = std::max(largest, (n + 1) * static_cast<std::size_t>(bands_[n].width()));
    capacity_ = largest;
    int max_width = 1;
    for (const auto& b : bands_) max_width = std::max(max_width, b.width());
    zeros_.assign(static_cast<std::size_t>(max_width), 0.0);
    sqrt_.resize(bands_.size() + 1);
    inv_sqrt_.resize(bands_.size() + 1);
    for (std::size_t i = 0; i < sqrt_.size(); ++i) {
      sqrt_[i] = std::sqrt(static_cast<double>(i));
      inv_sqrt_[i] = i == 0 ? 0.0 : 1.0 / sqrt_[i];
    }
  }

  [[nodiscard]] int max_block() const noexcept { return static_cast<int>(bands_.size()) - 1; }
  [[nodiscard]] ColumnBand band(int total_atoms) const { return bands_.at(static_cast<std::size_t>(total_atoms)); }
  [[nodiscard]] ColumnBand required(int total_atoms) const {
    return required_.at(static_cast<std::size_t>(total_atoms));
  }

  /// Calls visit(LadderBlock) for every block with a non-empty requested band,
  /// in ascending N.
  template <class Visitor>
  void run(double theta, Visitor&& visit) const {
    if (bands_.empty()) return;
    if (!std::isfinite(theta)) throw Error("non-finite angle");
    const double c = std::cos(0.5 * theta);
    const double s = std::sin(0.5 * theta);
    const ScopedFlushToZero ftz;
    std::vector<double> prev(capacity_), cur(capacity_), w1, w2;
    cur[0] = 1.0;
    if (!required_[0].empty()) visit(LadderBlock(0, bands_[0], cur.data()));
    for (int n = 1; n <= max_block(); ++n) {
      std::swap(prev, cur);
      step(n, c, s, prev, cur, w1, w2);
      if (!required_[static_cast<std::size_t>(n)].empty())
        visit(LadderBlock(n, bands_[static_cast<std::size_t>(n)], cur.data()));
    }
  }

 private:
  static ColumnBand hull(ColumnBand a, ColumnBand b) noexcept {
    if (a.empty()) return b;
    if (b.empty()) return a;
    return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)};
  }

  static ColumnBand clip(ColumnBand b, int m) noexcept {
    if (b.empty()) return b;
    return {std::max(b.lo, 0), std::min(b.hi, m)};
  }

  void step(int n, double c, double s, const std::vector<double>& prev, std::vector<double>& cur,
            std::vector<double>& w1, std::vector<double>& w2) const {
    const ColumnBand pb = bands_[static_cast<std::size_t>(n - 1)];
    const ColumnBand cb = bands_[static_cast<std::size_t>(n)];
    const int pw = pb.width();
    const int cw = cb.width();
    // Columns with both predecessors.
    const int both_lo = std::max({cb.lo, pb.lo + 1, 1});
    const int both_hi = std::min({cb.hi, pb.hi, n - 1});
    if (s == 0.0) {  // D = c^N * identity, exactly
      const double sign = (c < 0.0 && (n % 2 != 0)) ? -1.0 : 1.0;
      std::fill(cur.begin(), cur.begin() + static_cast<std::ptrdiff_t>(n + 1) * cw, 0.0);
      for (int col = cb.lo; col <= cb.hi; ++col) cur[static_cast<std::size_t>(col) * cw + (col - cb.lo)] = sign;
      return;
    }
    const double inv_n = 1.0 / n;
    // Weights sqrt(na)/N and sqrt(nb)/N, laid out contiguously for the inner loop.
    const int nboth = std::max(0, both_hi - both_lo + 1);
    w1.resize(static_cast<std::size_t>(nboth));
    w2.resize(static_cast<std::size_t>(nboth));
    for (int j = 0; j < nboth; ++j) {
      w1[static_cast<std::size_t>(j)] = sqrt_[static_cast<std::size_t>(both_lo + j)] * inv_n;
      w2[static_cast<std::size_t>(j)] = sqrt_[static_cast<std::size_t>(n - both_lo - j)] * inv_n;
    }
    for (int a = 0; a <= n; ++a) {
      const double* up = (a >= 1 ? prev.data() + static_cast<std::size_t>(a - 1) * pw : zeros_.data()) - pb.lo;
      const double* same = (a <= n - 1 ? prev.data() + static_cast<std::size_t>(a) * pw : zeros_.data()) - pb.lo;
      double* out = cur.data() + static_cast<std::size_t>(a) * cw - cb.lo;
      const double ra = sqrt_[static_cast<std::size_t>(a)];
      const double rb = sqrt_[static_cast<std::size_t>(n - a)];
      const double c1 = c * ra, s1 = s * rb;   // a^dag form, from column col-1
      const double c2 = -s * ra, s2 = c * rb;  // b^dag form, from column col
      {
        const double* u0 = up + both_lo - 1;
        const double* s0 = same + both_lo - 1;
        double* o = out + both_lo;
        const double* a1 = w1.data();
        const double* a2 = w2.data();
        for (int j = 0; j < nboth; ++j) {
          const double g1 = c1 * u0[j] + s1 * s0[j];
          const double g2 = c2 * u0[j + 1] + s2 * s0[j + 1];
          o[j] = a1[j] * g1 + a2[j] * g2;
        }
      }
      const auto single = [&](int col) {
        if (col < n && pb.contains(col))
          out[col] = (c2 * up[col] + s2 * same[col]) * inv_sqrt_[static_cast<std::size_t>(n - col)];
        else
          out[col] = (c1 * up[col - 1] + s1 * same[col - 1]) * inv_sqrt_[static_cast<std::size_t>(col)];
      };
      if (both_lo > both_hi) {
        for (int col = cb.lo; col <= cb.hi; ++col) single(col);
      } else {
        for (int col = cb.lo; col < both_lo; ++col) single(col);
        for (int col = both_hi + 1; col <= cb.hi; ++col) single(col);
      }
    }
  }

  std::vector<ColumnBand> required_;
  std::vector<ColumnBand> bands_;
  std::size_t capacity_ = 1;
  std::vector<double> zeros_;
  std::vector<double> sqrt_;
  std::vector<double> inv_sqrt_;
};

/// Generator rows of X = -iJy = (b^dag a - a^dag b)/2, so dD/dtheta = X D.
/// Returns {X[A, A-1], X[A, A+1]}.
[[nodiscard]] inline std::pair<double, double> ladder_generator_row(int total_atoms, int a) noexcept {
  const double lower = a >= 1 ? -ladder_coefficient(total_atoms, a - 1) : 0.0;
  const double upper = a < total_atoms ? ladder_coefficient(total_atoms, a) : 0.0;
  return {lower, upper};
}

/// Full kernel of one block through the recursion route.
[[nodiscard]] inline RotationKernel recursive_rotation_kernel(int total_atoms, double theta, Generator gen) {
  if (total_atoms < 0) throw Error("negative block size");
  std::vector<ColumnBand> bands(static_cast<std::size_t>(total_atoms) + 1);
  bands.back() = {0, total_atoms};
  RotationLadder ladder(std::move(bands));
  const int d = total_atoms + 1;
  RotationKernel kernel{BlockIndex{total_atoms}, theta, gen, Eigen::MatrixXd(d, d), Eigen::MatrixXd(d, d)};
  ladder.run(theta, [&](const LadderBlock& blk) {
    for (int a = 0; a < d; ++a) {
      const auto [lower, upper] = ladder_generator_row(total_atoms, a);
      for (int col = 0; col < d; ++col) {
        const double v = blk(a, col);
        double dv = 0.0;
        if (a >= 1) dv += lower * blk(a - 1, col);
        if (a < total_atoms) dv += upper * blk(a + 1, col);
        kernel.probabilities(a, col) = v * v;
        kernel.derivative(a, col) = 2.0 * v * dv;
      }
    }
  });
  return kernel;
}

}  // namespace twin_metrology
