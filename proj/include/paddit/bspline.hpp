#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "paddit/grid.hpp"
#include "paddit/rng.hpp"

namespace paddit {

// Random free-form deformation: a coarse lattice of cubic B-spline control
// displacements drawn as Gaussian noise, the comparison arm for the sampled
// diffeomorphisms. Intentionally naive: no folding prevention.
struct BsplineConfig {
  int cp = 8;          // control points per axis spanning the volume
  double sd = 4.0;     // displacement noise std, in voxels
  std::uint64_t seed = 0;

  void validate() const {
    if (cp < 4) throw std::invalid_argument("cp must be >= 4 per axis");
    if (!(sd >= 0.0)) throw std::invalid_argument("sd must be non-negative");
  }
};

// Uniform cubic B-spline basis on the unit interval; weights sum to 1.
inline std::array<double, 4> bspline_weights(double f) {
  const double f2 = f * f;
  const double f3 = f2 * f;
  return {(1.0 - 3.0 * f + 3.0 * f2 - f3) / 6.0,
          (4.0 - 6.0 * f2 + 3.0 * f3) / 6.0,
          (1.0 + 3.0 * f + 3.0 * f2 - 3.0 * f3) / 6.0, f3 / 6.0};
}

namespace detail {

// Storage covers lattice coordinates -1..cp per axis (one-point margin each
// side) so the tensor-product stencil is defined over the whole volume.
template <std::size_t N>
struct BsplineLattice {
  GridIndex<N> shape;   // storage extent = cp + 2 per axis
  Vec<N> delta;         // control spacing in voxels: (dims-1)/(cp-1)

  BsplineLattice(const GridGeometry<N>& g, int cp) {
    for (std::size_t a = 0; a < N; ++a) {
      shape[a] = cp + 2;
      delta[a] = static_cast<double>(g.dims[a] - 1) / static_cast<double>(cp - 1);
    }
  }

  std::size_t count() const {
    std::size_t n = 1;
    for (std::size_t a = 0; a < N; ++a) n *= static_cast<std::size_t>(shape[a]);
    return n;
  }

  // storage linear index from lattice coordinate j in -1..cp (x fastest)
  std::size_t linear(const GridIndex<N>& j) const {
    std::size_t lin = 0;
    for (int a = static_cast<int>(N) - 1; a >= 0; --a)
      lin = lin * static_cast<std::size_t>(shape[a]) +
            static_cast<std::size_t>(j[a] + 1);
    return lin;
  }
};

}  // namespace detail

// Control displacements drawn i.i.d. N(0, sd^2) per axis in voxel units,
// in storage order (x fastest, axis components innermost), then scaled by
// the voxel spacing into physical units. Fully determined by cfg.seed.
template <std::size_t N>
std::vector<Vec<N>> sample_bspline_coefficients(const BsplineConfig& cfg,
                                                const GridGeometry<N>& g) {
  cfg.validate();
  g.validate();
  const detail::BsplineLattice<N> lattice(g, cfg.cp);
  Rng rng(cfg.seed);
  std::vector<Vec<N>> coeffs(lattice.count());
  for (auto& c : coeffs)
    for (std::size_t a = 0; a < N; ++a) c[a] = cfg.sd * rng.normal() * g.spacing[a];
  return coeffs;
}

// Dense tensor-product evaluation of the control lattice at every voxel
// center. sd = 0 yields an exactly zero field.
template <std::size_t N>
DisplacementField<N> sample_bspline_field(const BsplineConfig& cfg,
                                          const GridGeometry<N>& g) {
  const std::vector<Vec<N>> coeffs = sample_bspline_coefficients(cfg, g);
  const detail::BsplineLattice<N> lattice(g, cfg.cp);

  std::vector<Vec<N>> field(g.voxel_count(), Vec<N>{});
  GridIndex<N> idx{};
  for (std::size_t lin = 0; lin < field.size(); ++lin) {
    std::array<std::array<double, 4>, N> w;
    GridIndex<N> base;
    for (std::size_t a = 0; a < N; ++a) {
      const double u = static_cast<double>(idx[a]) / lattice.delta[a];
      int i = static_cast<int>(std::floor(u));
      i = std::min(std::max(i, 0), cfg.cp - 2);
      base[a] = i - 1;
      w[a] = bspline_weights(u - static_cast<double>(i));
    }

    Vec<N> d{};
    GridIndex<N> off{};
    while (true) {
      double weight = 1.0;
      GridIndex<N> j;
      for (std::size_t a = 0; a < N; ++a) {
        weight *= w[a][static_cast<std::size_t>(off[a])];
        j[a] = base[a] + off[a];
      }
      const Vec<N>& c = coeffs[lattice.linear(j)];
      for (std::size_t a = 0; a < N; ++a) d[a] += weight * c[a];

      std::size_t axis = 0;
      for (; axis < N; ++axis) {
        if (++off[axis] < 4) break;
        off[axis] = 0;
      }
      if (axis == N) break;
    }

    field[lin] = d;
    for (std::size_t a = 0; a < N; ++a) {
      if (++idx[a] < g.dims[a]) break;
      idx[a] = 0;
    }
  }
  return DisplacementField<N>(g, std::move(field));
}

// FNV-1a over the displacement components in storage order, bytes fed
// least-significant first so the digest is endian-independent.
template <std::size_t N>
std::uint64_t field_checksum(const DisplacementField<N>& d) {
  std::uint64_t h = 14695981039346656037ull;
  auto feed = [&h](double value) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(value);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffull;
      h *= 1099511628211ull;
    }
  };
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t a = 0; a < N; ++a) feed(d[i][a]);
  return h;
}

template <std::size_t N>
struct BaselineResult {
  ScalarVolume<N> image;
  LabelVolume<N> labels;
  DisplacementField<N> field;  // the one transformation shared by both
};

// Warp image (cubic) and labels (nearest) with a single sampled field.
template <std::size_t N>
BaselineResult<N> apply_baseline(const ScalarVolume<N>& img,
                                 const LabelVolume<N>& lbl,
                                 const BsplineConfig& cfg) {
  detail::require_same_geometry(img.geometry(), lbl.geometry(), "apply_baseline");
  DisplacementField<N> field = sample_bspline_field(cfg, img.geometry());
  return BaselineResult<N>{warp_image(img, field), warp_labels(lbl, field),
                           std::move(field)};
}

}  // namespace paddit
