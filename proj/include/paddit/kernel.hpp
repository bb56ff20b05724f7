#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "paddit/errors.hpp"
#include "paddit/grid.hpp"
#include "paddit/rng.hpp"

namespace paddit {

// Diagonal jitter added to the Gram matrix so the Cholesky factorization is
// stable when control points nearly coincide.
inline constexpr double kGramJitter = 1e-8;

inline constexpr const char* kKernelName = "wendland-c2";

// Wendland C2 kernel with compact support: control-point spacing in voxels
// per axis plus a physical support radius.
template <std::size_t N>
struct KernelConfig {
  double support_radius = 0.0;        // mm
  GridIndex<N> spacing_voxels{};      // control-point spacing per axis

  KernelConfig() { spacing_voxels.fill(8); }

  KernelConfig(double radius, const GridIndex<N>& spacing)
      : support_radius(radius), spacing_voxels(spacing) {
    validate();
  }

  void validate() const {
    if (!(support_radius > 0.0))
      throw std::invalid_argument("kernel support radius must be positive");
    for (std::size_t a = 0; a < N; ++a)
      if (spacing_voxels[a] < 1)
        throw std::invalid_argument("control-point spacing must be >= 1 voxel");
  }

  // Uniform spacing; a non-positive radius selects the default of twice the
  // control spacing in physical units (largest axis).
  static KernelConfig uniform(const GridGeometry<N>& geom, int spacing = 8,
                              double support_radius = 0.0) {
    KernelConfig cfg;
    cfg.spacing_voxels.fill(spacing);
    if (support_radius > 0.0) {
      cfg.support_radius = support_radius;
    } else {
      double m = 0.0;
      for (std::size_t a = 0; a < N; ++a)
        m = std::max(m, static_cast<double>(spacing) * geom.spacing[a]);
      cfg.support_radius = 2.0 * m;
    }
    cfg.validate();
    return cfg;
  }
};

// Wendland C2: phi(u) = (1-u)^4 (4u+1) for u < 1, else 0, with u = r/R.
template <std::size_t N>
inline double kernel_eval(const KernelConfig<N>& cfg, double r) {
  const double u = r / cfg.support_radius;
  if (u >= 1.0) return 0.0;
  const double q = 1.0 - u;
  const double q2 = q * q;
  return q2 * q2 * (4.0 * u + 1.0);
}

// phi'(r) / r = -20 (1-u)^3 / R^2; finite at r = 0.
template <std::size_t N>
inline double kernel_deriv_over_r(const KernelConfig<N>& cfg, double r) {
  const double u = r / cfg.support_radius;
  if (u >= 1.0) return 0.0;
  const double q = 1.0 - u;
  return -20.0 * q * q * q / (cfg.support_radius * cfg.support_radius);
}

// Control points on a regular sub-grid of the volume, centered so that any
// slack from integer division is split between the two boundaries.
template <std::size_t N>
class ControlGrid {
 public:
  ControlGrid() = default;

  ControlGrid(const GridGeometry<N>& geom, const KernelConfig<N>& cfg)
      : geom_(geom), cfg_(cfg) {
    cfg_.validate();
    for (std::size_t a = 0; a < N; ++a) {
      const int s = cfg_.spacing_voxels[a];
      shape_[a] = (geom_.dims[a] - 1) / s + 1;
      margin_[a] = 0.5 * ((geom_.dims[a] - 1) - (shape_[a] - 1) * s);
      lattice_window_[a] =
          cfg_.support_radius / (static_cast<double>(s) * geom_.spacing[a]);
    }
    positions_.reserve(count());
    const int n = count();
    for (int lin = 0; lin < n; ++lin) positions_.push_back(position(index_of(lin)));
  }

  const GridGeometry<N>& geometry() const { return geom_; }
  const KernelConfig<N>& config() const { return cfg_; }
  const GridIndex<N>& shape() const { return shape_; }

  int count() const {
    int n = 1;
    for (std::size_t a = 0; a < N; ++a) n *= shape_[a];
    return n;
  }

  int linear(const GridIndex<N>& idx) const {
    int lin = idx[N - 1];
    for (int a = static_cast<int>(N) - 2; a >= 0; --a) lin = lin * shape_[a] + idx[a];
    return lin;
  }

  GridIndex<N> index_of(int lin) const {
    GridIndex<N> idx;
    for (std::size_t a = 0; a < N; ++a) {
      idx[a] = lin % shape_[a];
      lin /= shape_[a];
    }
    return idx;
  }

  Vec<N> position(const GridIndex<N>& idx) const {
    Vec<N> ci;
    for (std::size_t a = 0; a < N; ++a)
      ci[a] = margin_[a] + static_cast<double>(idx[a] * cfg_.spacing_voxels[a]);
    return geom_.world(ci);
  }

  const Vec<N>& position(int lin) const { return positions_[lin]; }
  const std::vector<Vec<N>>& positions() const { return positions_; }

  // Coordinates of a physical point in lattice units.
  Vec<N> lattice_coord(const Vec<N>& p) const {
    Vec<N> u = geom_.continuous_index(p);
    Vec<N> t;
    for (std::size_t a = 0; a < N; ++a)
      t[a] = (u[a] - margin_[a]) / static_cast<double>(cfg_.spacing_voxels[a]);
    return t;
  }

  // Support radius in lattice units per axis.
  const Vec<N>& lattice_window() const { return lattice_window_; }

  bool operator==(const ControlGrid& o) const {
    return geom_ == o.geom_ && shape_ == o.shape_ &&
           cfg_.support_radius == o.cfg_.support_radius &&
           cfg_.spacing_voxels == o.cfg_.spacing_voxels;
  }

 private:
  GridGeometry<N> geom_;
  KernelConfig<N> cfg_;
  GridIndex<N> shape_{};
  Vec<N> margin_{};
  Vec<N> lattice_window_{};
  std::vector<Vec<N>> positions_;
};

// Velocity field v(x) = sum_i phi(|x - x_i|) a_i with one coefficient vector
// per control point, in physical units (mm).
template <std::size_t N>
class KernelVelocityField {
 public:
  KernelVelocityField() = default;

  explicit KernelVelocityField(const ControlGrid<N>& grid)
      : grid_(grid), coeffs_(grid.count(), Vec<N>{}) {}

  KernelVelocityField(const ControlGrid<N>& grid, std::vector<Vec<N>> coeffs)
      : grid_(grid), coeffs_(std::move(coeffs)) {
    if (static_cast<int>(coeffs_.size()) != grid_.count())
      throw std::invalid_argument("coefficient count does not match control grid");
    for (const auto& a : coeffs_)
      if (!all_finite(a))
        throw std::invalid_argument("velocity coefficients must be finite");
  }

  static KernelVelocityField zero(const ControlGrid<N>& grid) {
    return KernelVelocityField(grid);
  }

  const ControlGrid<N>& grid() const { return grid_; }
  const std::vector<Vec<N>>& coeffs() const { return coeffs_; }
  std::vector<Vec<N>>& coeffs() { return coeffs_; }
  int count() const { return static_cast<int>(coeffs_.size()); }

  // Axis-major flattening: [a_x(all points), a_y(all points), ...].
  Eigen::VectorXd flatten() const {
    const int p = count();
    Eigen::VectorXd flat(static_cast<Eigen::Index>(p * N));
    for (std::size_t a = 0; a < N; ++a)
      for (int i = 0; i < p; ++i) flat[a * p + i] = coeffs_[i][a];
    return flat;
  }

  static KernelVelocityField unflatten(const ControlGrid<N>& grid,
                                       const Eigen::VectorXd& flat) {
    const int p = grid.count();
    if (flat.size() != static_cast<Eigen::Index>(p * N))
      throw std::invalid_argument("flat coefficient size mismatch");
    std::vector<Vec<N>> coeffs(p);
    for (std::size_t a = 0; a < N; ++a)
      for (int i = 0; i < p; ++i) coeffs[i][a] = flat[a * p + i];
    return KernelVelocityField(grid, std::move(coeffs));
  }

 private:
  ControlGrid<N> grid_;
  std::vector<Vec<N>> coeffs_;
};

template <std::size_t N>
KernelVelocityField<N> negated(const KernelVelocityField<N>& v) {
  std::vector<Vec<N>> coeffs(v.coeffs());
  for (auto& a : coeffs)
    for (std::size_t c = 0; c < N; ++c) a[c] = -a[c];
  return KernelVelocityField<N>(v.grid(), std::move(coeffs));
}

namespace detail {

// Control-point index window whose kernels can reach the lattice coordinate t.
template <std::size_t N>
inline bool support_window(const ControlGrid<N>& grid, const Vec<N>& t,
                           GridIndex<N>& lo, GridIndex<N>& hi) {
  const auto& win = grid.lattice_window();
  for (std::size_t a = 0; a < N; ++a) {
    lo[a] = std::max(0, static_cast<int>(std::ceil(t[a] - win[a])));
    hi[a] = std::min(grid.shape()[a] - 1, static_cast<int>(std::floor(t[a] + win[a])));
    if (lo[a] > hi[a]) return false;
  }
  return true;
}

}  // namespace detail

// Field value at a physical point; the compact support keeps the sum local.
template <std::size_t N>
Vec<N> velocity_at(const KernelVelocityField<N>& v, const Vec<N>& p) {
  const auto& grid = v.grid();
  const double radius2 = grid.config().support_radius * grid.config().support_radius;
  Vec<N> out{};
  GridIndex<N> lo, hi;
  if (!detail::support_window(grid, grid.lattice_coord(p), lo, hi)) return out;

  GridIndex<N> idx = lo;
  while (true) {
    const int lin = grid.linear(idx);
    const Vec<N> delta = sub(p, grid.position(lin));
    const double r2 = squared_norm(delta);
    if (r2 < radius2) {
      const double w = kernel_eval(grid.config(), std::sqrt(r2));
      const Vec<N>& a = v.coeffs()[lin];
      for (std::size_t c = 0; c < N; ++c) out[c] += w * a[c];
    }
    std::size_t axis = 0;
    for (; axis < N; ++axis) {
      if (++idx[axis] <= hi[axis]) break;
      idx[axis] = lo[axis];
    }
    if (axis == N) break;
  }
  return out;
}

// Spatial Jacobian dv_c/dp_d of the field at a physical point.
template <std::size_t N>
std::array<Vec<N>, N> velocity_jacobian_at(const KernelVelocityField<N>& v,
                                           const Vec<N>& p) {
  const auto& grid = v.grid();
  const double radius2 = grid.config().support_radius * grid.config().support_radius;
  std::array<Vec<N>, N> jac{};
  GridIndex<N> lo, hi;
  if (!detail::support_window(grid, grid.lattice_coord(p), lo, hi)) return jac;

  GridIndex<N> idx = lo;
  while (true) {
    const int lin = grid.linear(idx);
    const Vec<N> delta = sub(p, grid.position(lin));
    const double r2 = squared_norm(delta);
    if (r2 < radius2) {
      const double dw = kernel_deriv_over_r(grid.config(), std::sqrt(r2));
      const Vec<N>& a = v.coeffs()[lin];
      for (std::size_t c = 0; c < N; ++c)
        for (std::size_t d = 0; d < N; ++d) jac[c][d] += a[c] * dw * delta[d];
    }
    std::size_t axis = 0;
    for (; axis < N; ++axis) {
      if (++idx[axis] <= hi[axis]) break;
      idx[axis] = lo[axis];
    }
    if (axis == N) break;
  }
  return jac;
}

// Rasterizes the field at every voxel center of its reference grid.
template <std::size_t N>
DisplacementField<N> dense_velocity(const KernelVelocityField<N>& v,
                                    const GridGeometry<N>& g) {
  if (!(g == v.grid().geometry()))
    throw std::invalid_argument("dense_velocity: geometry mismatch");
  DisplacementField<N> out(g);
  const std::size_t n = g.voxel_count();
  GridIndex<N> idx{};
  for (std::size_t lin = 0; lin < n; ++lin) {
    out[lin] = velocity_at(v, g.world(idx));
    for (std::size_t a = 0; a < N; ++a) {
      if (++idx[a] < g.dims[a]) break;
      idx[a] = 0;
    }
  }
  return out;
}

// RKHS norm |v|^2 = sum_ij a_i . a_j K(x_i, x_j), evaluated over the sparse
// neighbor structure of the compactly supported kernel. K carries the same
// diagonal jitter as gram_matrix so both routes agree exactly.
template <std::size_t N>
double norm_sq(const KernelVelocityField<N>& v) {
  const auto& grid = v.grid();
  const auto& cfg = grid.config();
  const double radius2 = cfg.support_radius * cfg.support_radius;
  GridIndex<N> reach;
  for (std::size_t a = 0; a < N; ++a)
    reach[a] = static_cast<int>(std::floor(grid.lattice_window()[a]));

  double acc = 0.0;
  const int n = grid.count();
  for (int i = 0; i < n; ++i) {
    const GridIndex<N> ci = grid.index_of(i);
    const Vec<N>& ai = v.coeffs()[i];
    GridIndex<N> lo, hi;
    for (std::size_t a = 0; a < N; ++a) {
      lo[a] = std::max(0, ci[a] - reach[a]);
      hi[a] = std::min(grid.shape()[a] - 1, ci[a] + reach[a]);
    }
    GridIndex<N> idx = lo;
    while (true) {
      const int j = grid.linear(idx);
      const Vec<N> delta = sub(grid.position(i), grid.position(j));
      const double r2 = squared_norm(delta);
      if (r2 < radius2)
        acc += dot(ai, v.coeffs()[j]) * kernel_eval(cfg, std::sqrt(r2));
      std::size_t axis = 0;
      for (; axis < N; ++axis) {
        if (++idx[axis] <= hi[axis]) break;
        idx[axis] = lo[axis];
      }
      if (axis == N) break;
    }
    acc += kGramJitter * dot(ai, ai);
  }
  return acc;
}

struct GramMatrix {
  Eigen::MatrixXd entries;
};

template <std::size_t N>
GramMatrix gram_matrix(const ControlGrid<N>& grid, const KernelConfig<N>& cfg) {
  const int n = grid.count();
  Eigen::MatrixXd k(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const double w = kernel_eval(cfg, norm(sub(grid.position(i), grid.position(j))));
      k(i, j) = w;
      k(j, i) = w;
    }
    k(i, i) += kGramJitter;
  }
  return GramMatrix{std::move(k)};
}

// Control grid plus the cached Gram factorization: everything the prior,
// the posterior gradient and the samplers need from the kernel.
template <std::size_t N>
class KernelModel {
 public:
  KernelModel(const GridGeometry<N>& geom, const KernelConfig<N>& cfg)
      : KernelModel(ControlGrid<N>(geom, cfg)) {}

  explicit KernelModel(const ControlGrid<N>& grid)
      : grid_(grid), gram_(gram_matrix(grid_, grid_.config())) {
    llt_.compute(gram_.entries);
    if (llt_.info() != Eigen::Success)
      throw numerical_error("Gram matrix Cholesky factorization failed");
    log_det_ = 0.0;
    const auto& l = llt_.matrixLLT();
    for (Eigen::Index i = 0; i < l.rows(); ++i)
      log_det_ += 2.0 * std::log(l(i, i));
  }

  const ControlGrid<N>& grid() const { return grid_; }
  const KernelConfig<N>& config() const { return grid_.config(); }
  const Eigen::MatrixXd& gram() const { return gram_.entries; }
  double log_det() const { return log_det_; }
  int point_count() const { return grid_.count(); }

  // K^{-1} x via the cached Cholesky factor.
  Eigen::VectorXd solve(const Eigen::VectorXd& x) const { return llt_.solve(x); }

  // a' K^{-1} a summed over the per-axis coefficient blocks.
  double prior_quadratic(const Eigen::VectorXd& flat) const {
    const int p = point_count();
    double acc = 0.0;
    for (std::size_t a = 0; a < N; ++a) {
      const Eigen::VectorXd block = flat.segment(static_cast<Eigen::Index>(a) * p, p);
      acc += block.dot(llt_.solve(block));
    }
    return acc;
  }

  // Draws coefficients a ~ N(0, scale^2 K), independently per axis block.
  KernelVelocityField<N> sample_field(double scale, Rng& rng) const {
    const int p = point_count();
    std::vector<Vec<N>> coeffs(p, Vec<N>{});
    Eigen::VectorXd z(p);
    for (std::size_t a = 0; a < N; ++a) {
      for (int i = 0; i < p; ++i) z[i] = rng.normal();
      Eigen::VectorXd col = llt_.matrixL() * z;
      for (int i = 0; i < p; ++i) coeffs[i][a] = scale * col[i];
    }
    return KernelVelocityField<N>(grid_, std::move(coeffs));
  }

 private:
  ControlGrid<N> grid_;
  GramMatrix gram_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double log_det_ = 0.0;
};

}  // namespace paddit
