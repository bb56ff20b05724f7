#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "paddit/errors.hpp"

namespace paddit {

template <std::size_t N>
using Vec = std::array<double, N>;

template <std::size_t N>
using GridIndex = std::array<int, N>;

// ---- small vector helpers ----------------------------------------------

template <std::size_t N>
inline Vec<N> add(const Vec<N>& a, const Vec<N>& b) {
  Vec<N> r;
  for (std::size_t i = 0; i < N; ++i) r[i] = a[i] + b[i];
  return r;
}

template <std::size_t N>
inline Vec<N> sub(const Vec<N>& a, const Vec<N>& b) {
  Vec<N> r;
  for (std::size_t i = 0; i < N; ++i) r[i] = a[i] - b[i];
  return r;
}

template <std::size_t N>
inline Vec<N> scaled(const Vec<N>& a, double s) {
  Vec<N> r;
  for (std::size_t i = 0; i < N; ++i) r[i] = a[i] * s;
  return r;
}

template <std::size_t N>
inline double dot(const Vec<N>& a, const Vec<N>& b) {
  double r = 0.0;
  for (std::size_t i = 0; i < N; ++i) r += a[i] * b[i];
  return r;
}

template <std::size_t N>
inline double squared_norm(const Vec<N>& a) {
  return dot(a, a);
}

template <std::size_t N>
inline double norm(const Vec<N>& a) {
  return std::sqrt(squared_norm(a));
}

template <std::size_t N>
inline bool all_finite(const Vec<N>& a) {
  for (std::size_t i = 0; i < N; ++i)
    if (!std::isfinite(a[i])) return false;
  return true;
}

// ---- geometry ------------------------------------------------------------

// Regular grid: voxel (0,...,0) sits at `origin`, axis a advances by
// `spacing[a]` millimetres per voxel. Storage is x-fastest.
template <std::size_t N>
struct GridGeometry {
  static_assert(N == 2 || N == 3, "2D and 3D grids only");

  GridIndex<N> dims{};
  Vec<N> spacing{};
  Vec<N> origin{};

  GridGeometry() {
    dims.fill(4);
    spacing.fill(1.0);
    origin.fill(0.0);
  }

  GridGeometry(const GridIndex<N>& d, const Vec<N>& s, const Vec<N>& o = {})
      : dims(d), spacing(s), origin(o) {
    validate();
  }

  void validate() const {
    for (std::size_t a = 0; a < N; ++a) {
      if (dims[a] < 4)
        throw std::invalid_argument("grid dims must be >= 4 per axis, got " +
                                    std::to_string(dims[a]));
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw std::invalid_argument("grid spacing must be positive");
      if (!std::isfinite(origin[a]))
        throw std::invalid_argument("grid origin must be finite");
    }
  }

  std::size_t voxel_count() const {
    std::size_t n = 1;
    for (std::size_t a = 0; a < N; ++a) n *= static_cast<std::size_t>(dims[a]);
    return n;
  }

  std::size_t linear(const GridIndex<N>& idx) const {
    std::size_t lin = static_cast<std::size_t>(idx[N - 1]);
    for (int a = static_cast<int>(N) - 2; a >= 0; --a)
      lin = lin * static_cast<std::size_t>(dims[a]) +
            static_cast<std::size_t>(idx[a]);
    return lin;
  }

  GridIndex<N> index_of(std::size_t lin) const {
    GridIndex<N> idx;
    for (std::size_t a = 0; a < N; ++a) {
      idx[a] = static_cast<int>(lin % static_cast<std::size_t>(dims[a]));
      lin /= static_cast<std::size_t>(dims[a]);
    }
    return idx;
  }

  Vec<N> world(const Vec<N>& continuous_index) const {
    Vec<N> p;
    for (std::size_t a = 0; a < N; ++a) p[a] = origin[a] + continuous_index[a] * spacing[a];
    return p;
  }

  Vec<N> world(const GridIndex<N>& idx) const {
    Vec<N> p;
    for (std::size_t a = 0; a < N; ++a) p[a] = origin[a] + idx[a] * spacing[a];
    return p;
  }

  Vec<N> continuous_index(const Vec<N>& p) const {
    Vec<N> u;
    for (std::size_t a = 0; a < N; ++a) u[a] = (p[a] - origin[a]) / spacing[a];
    return u;
  }

  bool operator==(const GridGeometry&) const = default;
};

// ---- volumes ---------------------------------------------------------------

template <std::size_t N>
class ScalarVolume {
 public:
  ScalarVolume() = default;

  explicit ScalarVolume(const GridGeometry<N>& geom, double fill = 0.0)
      : geom_(geom), values_(geom.voxel_count(), fill) {}

  ScalarVolume(const GridGeometry<N>& geom, std::vector<double> values)
      : geom_(geom), values_(std::move(values)) {
    if (values_.size() != geom_.voxel_count())
      throw std::invalid_argument("scalar volume value count does not match grid");
    for (double v : values_)
      if (!std::isfinite(v))
        throw std::invalid_argument("scalar volume contains non-finite values");
  }

  const GridGeometry<N>& geometry() const { return geom_; }
  std::size_t size() const { return values_.size(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(const GridIndex<N>& idx) const { return values_[geom_.linear(idx)]; }
  double& at(const GridIndex<N>& idx) { return values_[geom_.linear(idx)]; }

  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

 private:
  GridGeometry<N> geom_;
  std::vector<double> values_;
};

template <std::size_t N>
class LabelVolume {
 public:
  LabelVolume() = default;

  explicit LabelVolume(const GridGeometry<N>& geom, std::int32_t fill = 0)
      : geom_(geom), labels_(geom.voxel_count(), fill) {}

  LabelVolume(const GridGeometry<N>& geom, std::vector<std::int32_t> labels)
      : geom_(geom), labels_(std::move(labels)) {
    if (labels_.size() != geom_.voxel_count())
      throw std::invalid_argument("label volume count does not match grid");
    for (std::int32_t v : labels_)
      if (v < 0) throw std::invalid_argument("labels must be non-negative");
  }

  const GridGeometry<N>& geometry() const { return geom_; }
  std::size_t size() const { return labels_.size(); }

  std::int32_t operator[](std::size_t i) const { return labels_[i]; }
  std::int32_t& operator[](std::size_t i) { return labels_[i]; }
  std::int32_t at(const GridIndex<N>& idx) const { return labels_[geom_.linear(idx)]; }
  std::int32_t& at(const GridIndex<N>& idx) { return labels_[geom_.linear(idx)]; }

  const std::vector<std::int32_t>& labels() const { return labels_; }
  std::vector<std::int32_t>& labels() { return labels_; }

 private:
  GridGeometry<N> geom_;
  std::vector<std::int32_t> labels_;
};

// Dense per-voxel displacement in physical units (mm).
template <std::size_t N>
class DisplacementField {
 public:
  DisplacementField() = default;

  explicit DisplacementField(const GridGeometry<N>& geom)
      : geom_(geom), vectors_(geom.voxel_count(), Vec<N>{}) {}

  DisplacementField(const GridGeometry<N>& geom, std::vector<Vec<N>> vectors)
      : geom_(geom), vectors_(std::move(vectors)) {
    if (vectors_.size() != geom_.voxel_count())
      throw std::invalid_argument("displacement vector count does not match grid");
    for (const auto& v : vectors_)
      if (!all_finite(v))
        throw std::invalid_argument("displacement field contains non-finite values");
  }

  static DisplacementField zero(const GridGeometry<N>& geom) {
    return DisplacementField(geom);
  }

  const GridGeometry<N>& geometry() const { return geom_; }
  std::size_t size() const { return vectors_.size(); }

  const Vec<N>& operator[](std::size_t i) const { return vectors_[i]; }
  Vec<N>& operator[](std::size_t i) { return vectors_[i]; }
  const Vec<N>& at(const GridIndex<N>& idx) const { return vectors_[geom_.linear(idx)]; }
  Vec<N>& at(const GridIndex<N>& idx) { return vectors_[geom_.linear(idx)]; }

  const std::vector<Vec<N>>& vectors() const { return vectors_; }
  std::vector<Vec<N>>& vectors() { return vectors_; }

 private:
  GridGeometry<N> geom_;
  std::vector<Vec<N>> vectors_;
};

// ---- Catmull-Rom interpolation --------------------------------------------

// Weights over the 4-node stencil {i0-1, i0, i0+1, i0+2} for fractional
// offset f in [0,1]. Interpolating: f = 0 gives (0, 1, 0, 0).
inline std::array<double, 4> catmull_rom_weights(double f) {
  const double f2 = f * f;
  const double f3 = f2 * f;
  return {0.5 * (-f + 2.0 * f2 - f3), 0.5 * (2.0 - 5.0 * f2 + 3.0 * f3),
          0.5 * (f + 4.0 * f2 - 3.0 * f3), 0.5 * (-f2 + f3)};
}

inline std::array<double, 4> catmull_rom_weight_derivs(double f) {
  const double f2 = f * f;
  return {0.5 * (-1.0 + 4.0 * f - 3.0 * f2), 0.5 * (-10.0 * f + 9.0 * f2),
          0.5 * (1.0 + 8.0 * f - 9.0 * f2), 0.5 * (-2.0 * f + 3.0 * f2)};
}

namespace detail {

// Per-axis stencil: node indices (edge-clamped) plus value and derivative
// weights. `clamped` marks coordinates outside [0, dims-1]; the sampled
// extension is constant along a clamped axis, so its derivative is zero.
struct AxisStencil {
  std::array<int, 4> idx;
  std::array<double, 4> w;
  std::array<double, 4> dw;
  bool clamped;
};

inline AxisStencil make_stencil(double u, int dim, bool want_deriv) {
  AxisStencil s;
  s.clamped = false;
  if (u < 0.0) {
    u = 0.0;
    s.clamped = true;
  } else if (u > static_cast<double>(dim - 1)) {
    u = static_cast<double>(dim - 1);
    s.clamped = true;
  }
  int i0 = static_cast<int>(std::floor(u));
  if (i0 > dim - 1) i0 = dim - 1;
  const double f = u - static_cast<double>(i0);
  s.w = catmull_rom_weights(f);
  if (want_deriv) {
    s.dw = s.clamped ? std::array<double, 4>{0.0, 0.0, 0.0, 0.0}
                     : catmull_rom_weight_derivs(f);
  }
  for (int m = 0; m < 4; ++m)
    s.idx[m] = std::clamp(i0 - 1 + m, 0, dim - 1);
  return s;
}

// Evaluates the separable Catmull-Rom interpolant at continuous index u.
// When grad_ci is non-null it also receives d(value)/d(u_a).
template <std::size_t N>
inline double cubic_eval_ci(const ScalarVolume<N>& vol, const Vec<N>& u,
                            Vec<N>* grad_ci) {
  const auto& g = vol.geometry();
  std::array<AxisStencil, N> st;
  for (std::size_t a = 0; a < N; ++a)
    st[a] = make_stencil(u[a], g.dims[a], grad_ci != nullptr);

  double value = 0.0;
  if (grad_ci) grad_ci->fill(0.0);

  if constexpr (N == 2) {
    const int sx = g.dims[0];
    for (int j = 0; j < 4; ++j) {
      const std::size_t row = static_cast<std::size_t>(st[1].idx[j]) * sx;
      for (int i = 0; i < 4; ++i) {
        const double v = vol[row + st[0].idx[i]];
        value += st[0].w[i] * st[1].w[j] * v;
        if (grad_ci) {
          (*grad_ci)[0] += st[0].dw[i] * st[1].w[j] * v;
          (*grad_ci)[1] += st[0].w[i] * st[1].dw[j] * v;
        }
      }
    }
  } else {
    const std::size_t sx = static_cast<std::size_t>(g.dims[0]);
    const std::size_t sxy = sx * static_cast<std::size_t>(g.dims[1]);
    for (int k = 0; k < 4; ++k) {
      const std::size_t plane = static_cast<std::size_t>(st[2].idx[k]) * sxy;
      for (int j = 0; j < 4; ++j) {
        const std::size_t row = plane + static_cast<std::size_t>(st[1].idx[j]) * sx;
        const double wjk = st[1].w[j] * st[2].w[k];
        for (int i = 0; i < 4; ++i) {
          const double v = vol[row + st[0].idx[i]];
          value += st[0].w[i] * wjk * v;
          if (grad_ci) {
            (*grad_ci)[0] += st[0].dw[i] * st[1].w[j] * st[2].w[k] * v;
            (*grad_ci)[1] += st[0].w[i] * st[1].dw[j] * st[2].w[k] * v;
            (*grad_ci)[2] += st[0].w[i] * st[1].w[j] * st[2].dw[k] * v;
          }
        }
      }
    }
  }
  return value;
}

}  // namespace detail

// Catmull-Rom interpolation at continuous index coordinates. Outside the
// domain the edge-clamped extension is returned.
template <std::size_t N>
double sample_cubic_ci(const ScalarVolume<N>& vol, const Vec<N>& u) {
  return detail::cubic_eval_ci(vol, u, static_cast<Vec<N>*>(nullptr));
}

// Catmull-Rom interpolation at a physical point.
template <std::size_t N>
double sample_cubic(const ScalarVolume<N>& vol, const Vec<N>& p) {
  return sample_cubic_ci(vol, vol.geometry().continuous_index(p));
}

// Spatial gradient of the interpolant in physical units (per mm).
template <std::size_t N>
Vec<N> image_gradient_ci(const ScalarVolume<N>& vol, const Vec<N>& u) {
  Vec<N> grad;
  detail::cubic_eval_ci(vol, u, &grad);
  for (std::size_t a = 0; a < N; ++a) grad[a] /= vol.geometry().spacing[a];
  return grad;
}

template <std::size_t N>
Vec<N> image_gradient(const ScalarVolume<N>& vol, const Vec<N>& p) {
  return image_gradient_ci(vol, vol.geometry().continuous_index(p));
}

// Value and physical-space gradient in one pass.
template <std::size_t N>
double sample_cubic_with_gradient_ci(const ScalarVolume<N>& vol, const Vec<N>& u,
                                     Vec<N>& grad_out) {
  const double v = detail::cubic_eval_ci(vol, u, &grad_out);
  for (std::size_t a = 0; a < N; ++a) grad_out[a] /= vol.geometry().spacing[a];
  return v;
}

// Nearest voxel label at continuous index coordinates. Midpoint ties go to
// the lower index; outside the domain the nearest boundary voxel wins.
template <std::size_t N>
std::int32_t sample_nearest_ci(const LabelVolume<N>& labels, const Vec<N>& u) {
  const auto& g = labels.geometry();
  GridIndex<N> idx;
  for (std::size_t a = 0; a < N; ++a) {
    const int i = static_cast<int>(std::ceil(u[a] - 0.5));
    idx[a] = std::clamp(i, 0, g.dims[a] - 1);
  }
  return labels.at(idx);
}

template <std::size_t N>
std::int32_t sample_nearest(const LabelVolume<N>& labels, const Vec<N>& p) {
  return sample_nearest_ci(labels, labels.geometry().continuous_index(p));
}

// Multilinear interpolation of a displacement field at continuous index u
// (edge-clamped). Used by fixed-point inversion and composition checks.
template <std::size_t N>
Vec<N> sample_displacement_linear(const DisplacementField<N>& d, const Vec<N>& u) {
  const auto& g = d.geometry();
  std::array<int, N> i0;
  std::array<double, N> f;
  for (std::size_t a = 0; a < N; ++a) {
    double x = std::clamp(u[a], 0.0, static_cast<double>(g.dims[a] - 1));
    int i = static_cast<int>(std::floor(x));
    if (i > g.dims[a] - 2) i = g.dims[a] - 2;
    i0[a] = i;
    f[a] = x - static_cast<double>(i);
  }
  Vec<N> out{};
  if constexpr (N == 2) {
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i) {
        const double w = (i ? f[0] : 1.0 - f[0]) * (j ? f[1] : 1.0 - f[1]);
        const Vec<N>& v = d.at({i0[0] + i, i0[1] + j});
        for (std::size_t a = 0; a < N; ++a) out[a] += w * v[a];
      }
  } else {
    for (int k = 0; k < 2; ++k)
      for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i) {
          const double w = (i ? f[0] : 1.0 - f[0]) * (j ? f[1] : 1.0 - f[1]) *
                           (k ? f[2] : 1.0 - f[2]);
          const Vec<N>& v = d.at({i0[0] + i, i0[1] + j, i0[2] + k});
          for (std::size_t a = 0; a < N; ++a) out[a] += w * v[a];
        }
  }
  return out;
}

// ---- warping ---------------------------------------------------------------

namespace detail {

template <std::size_t N>
inline void require_same_geometry(const GridGeometry<N>& a, const GridGeometry<N>& b,
                                  const std::string& what) {
  if (!(a == b))
    throw std::invalid_argument(what + ": geometry mismatch");
}

}  // namespace detail

// output(x) = I(x + d(x)) with cubic interpolation. The target coordinate is
// formed in index space so a zero displacement reproduces the input exactly.
template <std::size_t N>
ScalarVolume<N> warp_image(const ScalarVolume<N>& vol, const DisplacementField<N>& d) {
  detail::require_same_geometry(vol.geometry(), d.geometry(), "warp_image");
  const auto& g = vol.geometry();
  std::vector<double> out(g.voxel_count());
  const std::size_t n = g.voxel_count();
  GridIndex<N> idx{};
  for (std::size_t lin = 0; lin < n; ++lin) {
    Vec<N> u;
    const Vec<N>& dv = d[lin];
    for (std::size_t a = 0; a < N; ++a)
      u[a] = static_cast<double>(idx[a]) + dv[a] / g.spacing[a];
    out[lin] = sample_cubic_ci(vol, u);
    for (std::size_t a = 0; a < N; ++a) {
      if (++idx[a] < g.dims[a]) break;
      idx[a] = 0;
    }
  }
  return ScalarVolume<N>(g, std::move(out));
}

// output(x) = L(x + d(x)) with nearest-neighbor lookup.
template <std::size_t N>
LabelVolume<N> warp_labels(const LabelVolume<N>& labels, const DisplacementField<N>& d) {
  detail::require_same_geometry(labels.geometry(), d.geometry(), "warp_labels");
  const auto& g = labels.geometry();
  std::vector<std::int32_t> out(g.voxel_count());
  const std::size_t n = g.voxel_count();
  GridIndex<N> idx{};
  for (std::size_t lin = 0; lin < n; ++lin) {
    Vec<N> u;
    const Vec<N>& dv = d[lin];
    for (std::size_t a = 0; a < N; ++a)
      u[a] = static_cast<double>(idx[a]) + dv[a] / g.spacing[a];
    out[lin] = sample_nearest_ci(labels, u);
    for (std::size_t a = 0; a < N; ++a) {
      if (++idx[a] < g.dims[a]) break;
      idx[a] = 0;
    }
  }
  return LabelVolume<N>(g, std::move(out));
}

}  // namespace paddit
