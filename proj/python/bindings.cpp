// Python bindings for the paddit core library.
//
// Conventions:
//   * Scalar volumes are float64 numpy arrays with shape == dims; indexing is
//     arr[x, y] (2D) / arr[x, y, z] (3D).
//   * Label volumes are int32 arrays of the same shape.
//   * Displacement fields are float64 arrays of shape dims + (ndim,), storing
//     physical (mm) displacement per voxel.
//   * spacing / origin default to 1.0 / 0.0 per axis when omitted.
// All operations are deterministic for a fixed seed.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "paddit/bspline.hpp"
#include "paddit/diffeo.hpp"
#include "paddit/errors.hpp"
#include "paddit/grid.hpp"
#include "paddit/io.hpp"
#include "paddit/kernel.hpp"
#include "paddit/posterior.hpp"
#include "paddit/rng.hpp"
#include "paddit/template_em.hpp"

namespace py = pybind11;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LArray = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;
using OptVec = std::optional<std::vector<double>>;

// Flat offset of `idx` in a C-order array of extent `dims` (first axis
// slowest); the native volumes store x fastest, so conversions go through
// index arithmetic rather than memcpy.
template <std::size_t N>
std::size_t c_offset(const paddit::GridIndex<N>& idx,
                     const paddit::GridIndex<N>& dims) {
  std::size_t off = static_cast<std::size_t>(idx[0]);
  for (std::size_t a = 1; a < N; ++a)
    off = off * static_cast<std::size_t>(dims[a]) + static_cast<std::size_t>(idx[a]);
  return off;
}

template <std::size_t N>
paddit::Vec<N> axis_values(const OptVec& v, double fallback, const char* what) {
  paddit::Vec<N> out;
  out.fill(fallback);
  if (v) {
    if (v->size() != N)
      throw paddit::data_error(std::string(what) + " must have one value per axis");
    for (std::size_t a = 0; a < N; ++a) out[a] = (*v)[a];
  }
  return out;
}

template <std::size_t N>
paddit::GridGeometry<N> make_geometry(const std::vector<py::ssize_t>& shape,
                                      const OptVec& spacing, const OptVec& origin) {
  paddit::GridIndex<N> dims;
  for (std::size_t a = 0; a < N; ++a) dims[a] = static_cast<int>(shape[a]);
  return paddit::GridGeometry<N>(dims, axis_values<N>(spacing, 1.0, "spacing"),
                                 axis_values<N>(origin, 0.0, "origin"));
}

template <std::size_t N>
paddit::ScalarVolume<N> to_image(const DArray& arr, const OptVec& spacing,
                                 const OptVec& origin) {
  std::vector<py::ssize_t> shape(arr.shape(), arr.shape() + arr.ndim());
  paddit::ScalarVolume<N> vol(make_geometry<N>(shape, spacing, origin));
  const auto& g = vol.geometry();
  const double* src = arr.data();
  for (std::size_t lin = 0; lin < vol.size(); ++lin)
    vol[lin] = src[c_offset<N>(g.index_of(lin), g.dims)];
  return vol;
}

template <std::size_t N>
paddit::LabelVolume<N> to_labels(const LArray& arr, const OptVec& spacing,
                                 const OptVec& origin) {
  std::vector<py::ssize_t> shape(arr.shape(), arr.shape() + arr.ndim());
  paddit::LabelVolume<N> vol(make_geometry<N>(shape, spacing, origin));
  const auto& g = vol.geometry();
  const std::int32_t* src = arr.data();
  for (std::size_t lin = 0; lin < vol.size(); ++lin)
    vol[lin] = src[c_offset<N>(g.index_of(lin), g.dims)];
  return vol;
}

template <std::size_t N>
paddit::DisplacementField<N> to_field(const DArray& arr, const OptVec& spacing,
                                      const OptVec& origin) {
  std::vector<py::ssize_t> shape(arr.shape(), arr.shape() + arr.ndim() - 1);
  paddit::DisplacementField<N> field(make_geometry<N>(shape, spacing, origin));
  const auto& g = field.geometry();
  const double* src = arr.data();
  for (std::size_t lin = 0; lin < field.size(); ++lin) {
    const std::size_t base = c_offset<N>(g.index_of(lin), g.dims) * N;
    for (std::size_t a = 0; a < N; ++a) field[lin][a] = src[base + a];
  }
  return field;
}

template <std::size_t N>
py::array_t<double> from_image(const paddit::ScalarVolume<N>& vol) {
  const auto& g = vol.geometry();
  std::vector<py::ssize_t> shape(g.dims.begin(), g.dims.end());
  py::array_t<double> out(shape);
  double* dst = out.mutable_data();
  for (std::size_t lin = 0; lin < vol.size(); ++lin)
    dst[c_offset<N>(g.index_of(lin), g.dims)] = vol[lin];
  return out;
}

template <std::size_t N>
py::array_t<std::int32_t> from_labels(const paddit::LabelVolume<N>& vol) {
  const auto& g = vol.geometry();
  std::vector<py::ssize_t> shape(g.dims.begin(), g.dims.end());
  py::array_t<std::int32_t> out(shape);
  std::int32_t* dst = out.mutable_data();
  for (std::size_t lin = 0; lin < vol.size(); ++lin)
    dst[c_offset<N>(g.index_of(lin), g.dims)] = vol[lin];
  return out;
}

template <std::size_t N>
py::array_t<double> from_field(const paddit::DisplacementField<N>& field) {
  const auto& g = field.geometry();
  std::vector<py::ssize_t> shape(g.dims.begin(), g.dims.end());
  shape.push_back(static_cast<py::ssize_t>(N));
  py::array_t<double> out(shape);
  double* dst = out.mutable_data();
  for (std::size_t lin = 0; lin < field.size(); ++lin) {
    const std::size_t base = c_offset<N>(g.index_of(lin), g.dims) * N;
    for (std::size_t a = 0; a < N; ++a) dst[base + a] = field[lin][a];
  }
  return out;
}

template <std::size_t N>
py::list axis_list(const paddit::Vec<N>& v) {
  py::list out;
  for (std::size_t a = 0; a < N; ++a) out.append(v[a]);
  return out;
}

std::size_t volume_ndim(const py::array& arr) {
  if (arr.ndim() == 2 || arr.ndim() == 3) return static_cast<std::size_t>(arr.ndim());
  throw paddit::data_error("expected a 2D or 3D volume, got ndim=" +
                           std::to_string(arr.ndim()));
}

std::size_t field_ndim(const py::array& arr) {
  const auto nd = arr.ndim();
  if ((nd == 3 || nd == 4) && arr.shape(nd - 1) == nd - 1)
    return static_cast<std::size_t>(nd - 1);
  throw paddit::data_error(
      "expected a displacement field of shape dims + (ndim,)");
}

paddit::HmcConfig make_hmc(int samples, std::uint64_t seed, double step_size,
                           int leapfrog_steps, int burn_in, int thin) {
  paddit::HmcConfig cfg;
  cfg.samples = samples;
  cfg.seed = seed;
  cfg.step_size = step_size;
  cfg.leapfrog_steps = leapfrog_steps;
  cfg.burn_in = burn_in;
  cfg.thin = thin;
  return cfg;
}

// ---- rank-generic implementations -----------------------------------------

template <std::size_t N>
py::tuple read_image_impl(const std::string& path) {
  const paddit::ScalarVolume<N> vol = paddit::load_image<N>(path);
  return py::make_tuple(from_image(vol), axis_list<N>(vol.geometry().spacing),
                        axis_list<N>(vol.geometry().origin));
}

template <std::size_t N>
py::tuple read_labels_impl(const std::string& path) {
  const paddit::LabelVolume<N> vol = paddit::load_labels<N>(path);
  return py::make_tuple(from_labels(vol), axis_list<N>(vol.geometry().spacing),
                        axis_list<N>(vol.geometry().origin));
}

template <std::size_t N>
py::array_t<double> bspline_field_impl(const std::vector<py::ssize_t>& shape,
                                       int cp, double sd, std::uint64_t seed,
                                       const OptVec& spacing, const OptVec& origin) {
  paddit::BsplineConfig cfg;
  cfg.cp = cp;
  cfg.sd = sd;
  cfg.seed = seed;
  const auto g = make_geometry<N>(shape, spacing, origin);
  return from_field(paddit::sample_bspline_field<N>(cfg, g));
}

template <std::size_t N>
py::dict estimate_template_impl(const std::vector<DArray>& images,
                                const OptVec& spacing, const OptVec& origin,
                                int em_iters, int hmc_samples, std::uint64_t seed,
                                int control_spacing, double support_radius,
                                int flow_steps, double step_size,
                                int leapfrog_steps, int burn_in, int thin,
                                int jobs) {
  std::vector<paddit::ScalarVolume<N>> vols;
  vols.reserve(images.size());
  for (const auto& arr : images) vols.push_back(to_image<N>(arr, spacing, origin));

  paddit::TemplateModel<N> model;
  {
    py::gil_scoped_release release;
    const auto kernel_cfg = paddit::KernelConfig<N>::uniform(
        vols.front().geometry(), control_spacing, support_radius);
    paddit::EmConfig em;
    em.iterations = em_iters;
    em.jobs = jobs;
    em.hmc = make_hmc(hmc_samples, seed, step_size, leapfrog_steps, burn_in, thin);
    paddit::RegistrationConfig<N> rc;
    rc.flow.steps = flow_steps;
    model = paddit::estimate_template<N>(vols, kernel_cfg, em, rc);
  }

  py::list trace;
  for (const auto& rec : model.em_trace) {
    py::dict row;
    row["complete_data_nlp"] = rec.complete_data_nlp;
    row["sigma"] = rec.sigma;
    row["acceptance_rates"] = rec.acceptance_rates;
    trace.append(row);
  }
  py::dict out;
  out["template"] = from_image(model.template_image);
  out["sigma"] = model.sigma;
  out["trace"] = trace;
  return out;
}

template <std::size_t N>
py::dict sample_deformations_impl(const DArray& image, const DArray& templ,
                                  double sigma, int samples, std::uint64_t seed,
                                  double time_override, int control_spacing,
                                  double support_radius, int flow_steps,
                                  double step_size, int leapfrog_steps,
                                  int burn_in, int thin, const OptVec& spacing,
                                  const OptVec& origin) {
  if (sigma <= 0.0) throw paddit::data_error("sigma must be positive");
  const paddit::ScalarVolume<N> obs = to_image<N>(image, spacing, origin);
  const paddit::ScalarVolume<N> tpl = to_image<N>(templ, spacing, origin);
  paddit::detail::require_same_geometry(obs.geometry(), tpl.geometry(),
                                        "image vs template");

  std::vector<paddit::DisplacementField<N>> fields;
  std::vector<double> times;
  paddit::ChainDiagnostics diag;
  {
    py::gil_scoped_release release;
    const auto kernel_cfg = paddit::KernelConfig<N>::uniform(
        obs.geometry(), control_spacing, support_radius);
    const paddit::ControlGrid<N> grid(obs.geometry(), kernel_cfg);
    const paddit::KernelModel<N> model(grid);

    paddit::RegistrationConfig<N> rc;
    rc.sigma = sigma;
    rc.flow.steps = flow_steps;

    const paddit::HmcConfig hmc =
        make_hmc(samples, seed, step_size, leapfrog_steps, burn_in, thin);
    const paddit::PosteriorSamples<N> post = paddit::sample_posterior<N>(
        obs, tpl, paddit::KernelVelocityField<N>::zero(grid), rc, model, hmc);
    diag = post.diagnostics;

    paddit::Rng time_rng(paddit::mix_seed(seed, 0x74696d65ULL));
    for (const auto& v : post.fields) {
      const double drawn = time_rng.uniform01();
      const double t = time_override >= 0.0 ? time_override : drawn;
      times.push_back(t);
      fields.push_back(paddit::exponentiate(
          v, obs.geometry(), paddit::FlowConfig{flow_steps, t}));
    }
  }

  std::vector<py::ssize_t> shape;
  shape.push_back(static_cast<py::ssize_t>(fields.size()));
  for (int d : obs.geometry().dims) shape.push_back(d);
  shape.push_back(static_cast<py::ssize_t>(N));
  py::array_t<double> out(shape);
  double* dst = out.mutable_data();
  const std::size_t per = obs.size() * N;
  const auto& g = obs.geometry();
  for (std::size_t s = 0; s < fields.size(); ++s)
    for (std::size_t lin = 0; lin < fields[s].size(); ++lin) {
      const std::size_t base = s * per + c_offset<N>(g.index_of(lin), g.dims) * N;
      for (std::size_t a = 0; a < N; ++a) dst[base + a] = fields[s][lin][a];
    }

  py::dict result;
  result["fields"] = out;
  result["times"] = py::cast(times);
  result["acceptance_rate"] = diag.acceptance_rate;
  result["tuned_step_size"] = diag.tuned_step_size;
  result["retunes"] = diag.retunes;
  return result;
}

std::string checksum_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Diffeomorphic registration and augmentation core";

  py::register_exception<paddit::io_error>(m, "IoError", PyExc_OSError);
  py::register_exception<paddit::data_error>(m, "DataError", PyExc_ValueError);
  py::register_exception<paddit::numerical_error>(m, "NumericalError",
                                                  PyExc_ArithmeticError);

  m.def(
      "read_image",
      [](const std::string& path) {
        return paddit::volume_rank(path) == 2 ? read_image_impl<2>(path)
                                              : read_image_impl<3>(path);
      },
      py::arg("path"),
      "Load a scalar volume; returns (data, spacing, origin).");

  m.def(
      "read_labels",
      [](const std::string& path) {
        return paddit::volume_rank(path) == 2 ? read_labels_impl<2>(path)
                                              : read_labels_impl<3>(path);
      },
      py::arg("path"),
      "Load a label volume; returns (labels, spacing, origin).");

  m.def(
      "write_image",
      [](const std::string& path, const DArray& data, const OptVec& spacing,
         const OptVec& origin) {
        if (volume_ndim(data) == 2)
          paddit::save_image(to_image<2>(data, spacing, origin), path);
        else
          paddit::save_image(to_image<3>(data, spacing, origin), path);
      },
      py::arg("path"), py::arg("data"), py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(),
      "Write a scalar volume (.nii, .nii.gz, or .json+.bin by extension).");

  m.def(
      "write_labels",
      [](const std::string& path, const LArray& data, const OptVec& spacing,
         const OptVec& origin) {
        if (volume_ndim(data) == 2)
          paddit::save_labels(to_labels<2>(data, spacing, origin), path);
        else
          paddit::save_labels(to_labels<3>(data, spacing, origin), path);
      },
      py::arg("path"), py::arg("data"), py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(), "Write a label volume.");

  m.def(
      "warp_image",
      [](const DArray& image, const DArray& field, const OptVec& spacing,
         const OptVec& origin) -> py::array_t<double> {
        if (volume_ndim(image) == 2)
          return from_image(paddit::warp_image(to_image<2>(image, spacing, origin),
                                               to_field<2>(field, spacing, origin)));
        return from_image(paddit::warp_image(to_image<3>(image, spacing, origin),
                                             to_field<3>(field, spacing, origin)));
      },
      py::arg("image"), py::arg("field"), py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(),
      "Warp a scalar volume by a displacement field (cubic interpolation).");

  m.def(
      "warp_labels",
      [](const LArray& labels, const DArray& field, const OptVec& spacing,
         const OptVec& origin) -> py::array_t<std::int32_t> {
        if (volume_ndim(labels) == 2)
          return from_labels(paddit::warp_labels(to_labels<2>(labels, spacing, origin),
                                                 to_field<2>(field, spacing, origin)));
        return from_labels(paddit::warp_labels(to_labels<3>(labels, spacing, origin),
                                               to_field<3>(field, spacing, origin)));
      },
      py::arg("labels"), py::arg("field"), py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(),
      "Warp a label volume by a displacement field (nearest neighbour).");

  m.def(
      "bspline_field",
      [](const std::vector<py::ssize_t>& shape, int cp, double sd,
         std::uint64_t seed, const OptVec& spacing, const OptVec& origin) {
        if (shape.size() == 2)
          return bspline_field_impl<2>(shape, cp, sd, seed, spacing, origin);
        if (shape.size() == 3)
          return bspline_field_impl<3>(shape, cp, sd, seed, spacing, origin);
        throw paddit::data_error("shape must have 2 or 3 axes");
      },
      py::arg("shape"), py::arg("cp") = 8, py::arg("sd") = 4.0,
      py::arg("seed") = 0, py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(),
      "Sample a random cubic B-spline displacement field (sd in voxels).");

  m.def(
      "jacobian_determinant",
      [](const DArray& field, const OptVec& spacing, const OptVec& origin)
          -> py::array_t<double> {
        if (field_ndim(field) == 2)
          return from_image(
              paddit::jacobian_determinant(to_field<2>(field, spacing, origin)));
        return from_image(
            paddit::jacobian_determinant(to_field<3>(field, spacing, origin)));
      },
      py::arg("field"), py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(),
      "Per-voxel Jacobian determinant of x + d(x) (central differences).");

  m.def(
      "min_jacobian",
      [](const DArray& field, const OptVec& spacing, const OptVec& origin) {
        if (field_ndim(field) == 2)
          return paddit::min_jacobian(to_field<2>(field, spacing, origin));
        return paddit::min_jacobian(to_field<3>(field, spacing, origin));
      },
      py::arg("field"), py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(),
      "Minimum Jacobian determinant over the grid (< 0 means folding).");

  m.def(
      "field_checksum",
      [](const DArray& field, const OptVec& spacing, const OptVec& origin) {
        if (field_ndim(field) == 2)
          return checksum_hex(
              paddit::field_checksum(to_field<2>(field, spacing, origin)));
        return checksum_hex(
            paddit::field_checksum(to_field<3>(field, spacing, origin)));
      },
      py::arg("field"), py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(),
      "Endianness-independent FNV-1a checksum of a field, as 16 hex digits.");

  m.def(
      "estimate_template",
      [](const std::vector<DArray>& images, const OptVec& spacing,
         const OptVec& origin, int em_iters, int hmc_samples,
         std::uint64_t seed, int control_spacing, double support_radius,
         int flow_steps, double step_size, int leapfrog_steps, int burn_in,
         int thin, int jobs) {
        if (images.empty()) throw paddit::data_error("need at least one image");
        const std::size_t nd = volume_ndim(images.front());
        for (const auto& arr : images)
          if (volume_ndim(arr) != nd)
            throw paddit::data_error("images must share a rank");
        if (nd == 2)
          return estimate_template_impl<2>(images, spacing, origin, em_iters,
                                           hmc_samples, seed, control_spacing,
                                           support_radius, flow_steps, step_size,
                                           leapfrog_steps, burn_in, thin, jobs);
        return estimate_template_impl<3>(images, spacing, origin, em_iters,
                                         hmc_samples, seed, control_spacing,
                                         support_radius, flow_steps, step_size,
                                         leapfrog_steps, burn_in, thin, jobs);
      },
      py::arg("images"), py::arg("spacing") = py::none(),
      py::arg("origin") = py::none(), py::arg("em_iters") = 10,
      py::arg("hmc_samples") = 10, py::arg("seed") = 0,
      py::arg("control_spacing") = 8, py::arg("support_radius") = 0.0,
      py::arg("flow_steps") = 8, py::arg("step_size") = 0.01,
      py::arg("leapfrog_steps") = 20, py::arg("burn_in") = 50,
      py::arg("thin") = 2, py::arg("jobs") = 1,
      "Monte-Carlo EM template estimation; returns dict(template, sigma, trace).");

  m.def(
      "sample_deformations",
      [](const DArray& image, const DArray& templ, double sigma, int samples,
         std::uint64_t seed, double time_override, int control_spacing,
         double support_radius, int flow_steps, double step_size,
         int leapfrog_steps, int burn_in, int thin, const OptVec& spacing,
         const OptVec& origin) {
        if (volume_ndim(image) == 2)
          return sample_deformations_impl<2>(
              image, templ, sigma, samples, seed, time_override, control_spacing,
              support_radius, flow_steps, step_size, leapfrog_steps, burn_in,
              thin, spacing, origin);
        return sample_deformations_impl<3>(
            image, templ, sigma, samples, seed, time_override, control_spacing,
            support_radius, flow_steps, step_size, leapfrog_steps, burn_in,
            thin, spacing, origin);
      },
      py::arg("image"), py::arg("template"), py::arg("sigma"),
      py::arg("samples") = 1, py::arg("seed") = 0,
      py::arg("time_override") = -1.0, py::arg("control_spacing") = 8,
      py::arg("support_radius") = 0.0, py::arg("flow_steps") = 8,
      py::arg("step_size") = 0.01, py::arg("leapfrog_steps") = 20,
      py::arg("burn_in") = 50, py::arg("thin") = 2,
      py::arg("spacing") = py::none(), py::arg("origin") = py::none(),
      "Sample diffeomorphic displacement fields from the registration "
      "posterior of image against template; each sample is integrated for a "
      "random time t ~ U(0,1) unless time_override in [0,1] is given. Returns "
      "dict(fields, times, acceptance_rate, tuned_step_size, retunes).");
}
