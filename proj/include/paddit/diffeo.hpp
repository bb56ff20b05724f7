#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "paddit/grid.hpp"
#include "paddit/kernel.hpp"

namespace paddit {

// Euler integration of the stationary velocity field: `steps` substeps up to
// `time` in [0, 1]. Exp(t*v) means partial integration to time t.
struct FlowConfig {
  int steps = 8;
  double time = 1.0;

  FlowConfig() = default;
  FlowConfig(int steps_, double time_) : steps(steps_), time(time_) { validate(); }

  void validate() const {
    if (steps < 1) throw std::invalid_argument("flow steps must be >= 1");
    if (!(time >= 0.0 && time <= 1.0))
      throw std::invalid_argument("flow time must lie in [0, 1]");
  }
};

// Euler trajectory of a single particle: y_{s+1} = y_s + h v(y_s).
template <std::size_t N>
Vec<N> flow_point(const KernelVelocityField<N>& v, Vec<N> start,
                  const FlowConfig& fc) {
  const double h = fc.time / static_cast<double>(fc.steps);
  for (int s = 0; s < fc.steps; ++s) {
    const Vec<N> vel = velocity_at(v, start);
    for (std::size_t a = 0; a < N; ++a) start[a] += h * vel[a];
  }
  return start;
}

// Dense realization of Exp(time * v) on the grid: phi(x) = x + d(x). The
// velocity is evaluated analytically from the kernel expansion at every
// substep, never from a rasterized field.
template <std::size_t N>
DisplacementField<N> exponentiate(const KernelVelocityField<N>& v,
                                  const GridGeometry<N>& g, const FlowConfig& fc) {
  fc.validate();
  if (!(g == v.grid().geometry()))
    throw std::invalid_argument("exponentiate: geometry mismatch");
  DisplacementField<N> out(g);
  const std::size_t n = g.voxel_count();
  GridIndex<N> idx{};
  for (std::size_t lin = 0; lin < n; ++lin) {
    const Vec<N> x = g.world(idx);
    out[lin] = sub(flow_point(v, x, fc), x);
    for (std::size_t a = 0; a < N; ++a) {
      if (++idx[a] < g.dims[a]) break;
      idx[a] = 0;
    }
  }
  return out;
}

template <std::size_t N>
struct InversionResult {
  DisplacementField<N> field;
  double max_residual = 0.0;  // mm
  bool converged = false;
};

// Composition residual max_x |d_inv(x) + d(x + d_inv(x))| in mm, with the
// forward field interpolated linearly between voxels.
template <std::size_t N>
double inverse_consistency_residual(const DisplacementField<N>& d,
                                    const DisplacementField<N>& d_inv) {
  detail::require_same_geometry(d.geometry(), d_inv.geometry(),
                                "inverse_consistency_residual");
  const auto& g = d.geometry();
  double worst = 0.0;
  const std::size_t n = g.voxel_count();
  GridIndex<N> idx{};
  for (std::size_t lin = 0; lin < n; ++lin) {
    const Vec<N>& di = d_inv[lin];
    Vec<N> u;
    for (std::size_t a = 0; a < N; ++a)
      u[a] = static_cast<double>(idx[a]) + di[a] / g.spacing[a];
    const Vec<N> fwd = sample_displacement_linear(d, u);
    worst = std::max(worst, norm(add(di, fwd)));
    for (std::size_t a = 0; a < N; ++a) {
      if (++idx[a] < g.dims[a]) break;
      idx[a] = 0;
    }
  }
  return worst;
}

// Fixed-point inversion d_inv(x) = -d(x + d_inv(x)) for dense-only fields.
// Fields produced by exponentiate are better inverted by flowing -v.
template <std::size_t N>
InversionResult<N> invert(const DisplacementField<N>& d, int iters = 10,
                          double tolerance_mm = 0.5) {
  if (iters < 1) throw std::invalid_argument("invert: iters must be >= 1");
  const auto& g = d.geometry();
  DisplacementField<N> inv(g);
  const std::size_t n = g.voxel_count();
  for (int it = 0; it < iters; ++it) {
    GridIndex<N> idx{};
    for (std::size_t lin = 0; lin < n; ++lin) {
      Vec<N> u;
      for (std::size_t a = 0; a < N; ++a)
        u[a] = static_cast<double>(idx[a]) + inv[lin][a] / g.spacing[a];
      inv[lin] = scaled(sample_displacement_linear(d, u), -1.0);
      for (std::size_t a = 0; a < N; ++a) {
        if (++idx[a] < g.dims[a]) break;
        idx[a] = 0;
      }
    }
  }
  InversionResult<N> result{std::move(inv), 0.0, false};
  result.max_residual = inverse_consistency_residual(d, result.field);
  result.converged = result.max_residual <= tolerance_mm;
  return result;
}

// det d(x + d(x))/dx per voxel, central differences inside the volume and
// one-sided differences on the boundary.
template <std::size_t N>
ScalarVolume<N> jacobian_determinant(const DisplacementField<N>& d) {
  const auto& g = d.geometry();
  ScalarVolume<N> out(g);
  const std::size_t n = g.voxel_count();
  GridIndex<N> idx{};
  for (std::size_t lin = 0; lin < n; ++lin) {
    // m[c][a] = d phi_c / d x_a
    std::array<Vec<N>, N> m{};
    for (std::size_t a = 0; a < N; ++a) {
      GridIndex<N> hi = idx, lo = idx;
      double denom;
      if (idx[a] == 0) {
        hi[a] = idx[a] + 1;
        denom = g.spacing[a];
      } else if (idx[a] == g.dims[a] - 1) {
        lo[a] = idx[a] - 1;
        denom = g.spacing[a];
      } else {
        hi[a] = idx[a] + 1;
        lo[a] = idx[a] - 1;
        denom = 2.0 * g.spacing[a];
      }
      const Vec<N>& dh = d.at(hi);
      const Vec<N>& dl = d.at(lo);
      for (std::size_t c = 0; c < N; ++c)
        m[c][a] = (dh[c] - dl[c]) / denom + (c == a ? 1.0 : 0.0);
    }
    if constexpr (N == 2) {
      out[lin] = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    } else {
      out[lin] = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                 m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                 m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    }
    for (std::size_t a = 0; a < N; ++a) {
      if (++idx[a] < g.dims[a]) break;
      idx[a] = 0;
    }
  }
  return out;
}

template <std::size_t N>
double min_jacobian(const DisplacementField<N>& d) {
  const ScalarVolume<N> j = jacobian_determinant(d);
  double worst = j[0];
  for (std::size_t i = 1; i < j.size(); ++i) worst = std::min(worst, j[i]);
  return worst;
}

}  // namespace paddit
