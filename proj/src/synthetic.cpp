#include "paddit/synthetic.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "paddit/diffeo.hpp"
#include "paddit/errors.hpp"
#include "paddit/io.hpp"
#include "paddit/rng.hpp"

namespace paddit {
namespace {

// per-subject RNG stream tags
constexpr std::uint64_t kFieldStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

struct ShapeParams {
  Vec<2> ellipse_center, ellipse_semi;
  Vec<2> disk_center;
  double disk_radius;
  Vec<2> lesion_center;
  double lesion_sigma;
  double edge_width;
};

// Shape layout in fractions of the physical extent, so any grid size yields
// the same picture.
ShapeParams shape_params(const GridGeometry<2>& g) {
  Vec<2> lo = g.origin;
  Vec<2> extent;
  for (int a = 0; a < 2; ++a)
    extent[a] = (g.dims[a] - 1) * g.spacing[a];
  auto at = [&](double fx, double fy) {
    return Vec<2>{lo[0] + fx * extent[0], lo[1] + fy * extent[1]};
  };
  const double scale = std::min(extent[0], extent[1]);
  ShapeParams p;
  p.ellipse_center = at(0.46, 0.52);
  p.ellipse_semi = {0.30 * extent[0], 0.25 * extent[1]};
  p.disk_center = at(0.60, 0.42);
  p.disk_radius = 0.17 * scale;
  p.lesion_center = at(0.42, 0.46);
  p.lesion_sigma = 0.07 * scale;
  p.edge_width = 0.035 * scale;
  return p;
}

// smooth inside-indicator of a normalized radial coordinate rho (edge at 1)
double soft_inside(double rho, double radial_scale, double width) {
  return 1.0 / (1.0 + std::exp((rho - 1.0) * radial_scale / width));
}

double lesion_bump(const ShapeParams& p, const Vec<2>& x) {
  const double dx = x[0] - p.lesion_center[0];
  const double dy = x[1] - p.lesion_center[1];
  return std::exp(-(dx * dx + dy * dy) / (2.0 * p.lesion_sigma * p.lesion_sigma));
}

double base_intensity(const ShapeParams& p, const Vec<2>& x) {
  const double ex = (x[0] - p.ellipse_center[0]) / p.ellipse_semi[0];
  const double ey = (x[1] - p.ellipse_center[1]) / p.ellipse_semi[1];
  const double rho_e = std::sqrt(ex * ex + ey * ey);
  const double body_e =
      soft_inside(rho_e, std::min(p.ellipse_semi[0], p.ellipse_semi[1]),
                  p.edge_width);

  const double dx = x[0] - p.disk_center[0];
  const double dy = x[1] - p.disk_center[1];
  const double rho_d = std::sqrt(dx * dx + dy * dy) / p.disk_radius;
  const double body_d = soft_inside(rho_d, p.disk_radius, p.edge_width);

  const double body = std::max(body_e, body_d);
  return 0.6 * body + 0.4 * body * lesion_bump(p, x);
}

}  // namespace

ScalarVolume<2> synthetic_base_image(const GridGeometry<2>& g) {
  g.validate();
  const ShapeParams p = shape_params(g);
  std::vector<double> values(g.voxel_count());
  for (int y = 0; y < g.dims[1]; ++y)
    for (int x = 0; x < g.dims[0]; ++x)
      values[g.linear({x, y})] = base_intensity(p, g.world(GridIndex<2>{x, y}));
  return ScalarVolume<2>(g, std::move(values));
}

SyntheticPopulation make_population(const PopulationConfig& cfg) {
  cfg.validate();
  GridGeometry<2> g{cfg.dims, cfg.spacing, {0.0, 0.0}};
  g.validate();

  ScalarVolume<2> base = synthetic_base_image(g);
  const ShapeParams p = shape_params(g);

  std::vector<std::int32_t> lesion(g.voxel_count(), 0);
  std::vector<std::int32_t> body(g.voxel_count(), 0);
  for (int y = 0; y < g.dims[1]; ++y)
    for (int x = 0; x < g.dims[0]; ++x) {
      const std::size_t i = g.linear({x, y});
      const Vec<2> w = g.world(GridIndex<2>{x, y});
      if (base[i] > kShapeThreshold) {
        body[i] = 1;
        if (lesion_bump(p, w) > kLesionThreshold) lesion[i] = 1;
      }
    }

  const KernelConfig<2> kcfg =
      KernelConfig<2>::uniform(g, cfg.control_spacing, cfg.support_radius);
  const ControlGrid<2> grid(g, kcfg);
  const KernelModel<2> model(grid);
  const FlowConfig flow{cfg.flow_steps, 1.0};

  SyntheticPopulation pop{cfg,
                          base,
                          LabelVolume<2>(g, std::move(lesion)),
                          LabelVolume<2>(g, std::move(body)),
                          {},
                          {},
                          {}};

  for (int k = 0; k < cfg.subjects; ++k) {
    Rng field_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(k), kFieldStream));
    KernelVelocityField<2> v = model.sample_field(cfg.deformation_scale, field_rng);
    const DisplacementField<2> d = exponentiate(v, g, flow);

    ScalarVolume<2> img = warp_image(pop.mean_image, d);
    if (cfg.noise_sd > 0.0) {
      Rng noise_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(k), kNoiseStream));
      std::vector<double> noisy(img.size());
      for (std::size_t i = 0; i < img.size(); ++i)
        noisy[i] = img[i] + cfg.noise_sd * noise_rng.normal();
      img = ScalarVolume<2>(g, std::move(noisy));
    }

    pop.images.push_back(std::move(img));
    pop.labels.push_back(warp_labels(pop.mean_labels, d));
    pop.truth_fields.push_back(std::move(v));
  }
  return pop;
}

void write_population(const SyntheticPopulation& pop,
                      const std::filesystem::path& dir,
                      const std::string& format) {
  if (format != "raw" && format != "nifti")
    throw data_error("unknown output format '" + format + "' (raw or nifti)");
  const std::string ext = format == "raw" ? ".json" : ".nii.gz";
  std::filesystem::create_directories(dir);

  using nlohmann::json;
  json manifest;
  manifest["subjects"] = json::array();
  json truth;
  truth["format"] = "paddit-truth-v1";
  const auto& cfg = pop.config;
  truth["config"] = {{"dims", {cfg.dims[0], cfg.dims[1]}},
                     {"spacing", {cfg.spacing[0], cfg.spacing[1]}},
                     {"subjects", cfg.subjects},
                     {"deformation_scale", cfg.deformation_scale},
                     {"noise_sd", cfg.noise_sd},
                     {"seed", cfg.seed},
                     {"control_spacing", cfg.control_spacing},
                     {"support_radius", pop.truth_fields.empty()
                                            ? cfg.support_radius
                                            : pop.truth_fields[0].grid().config().support_radius},
                     {"flow_steps", cfg.flow_steps}};
  truth["shape_threshold"] = kShapeThreshold;
  truth["lesion_threshold"] = kLesionThreshold;
  truth["mean_image"] = "mean_image" + ext;
  truth["mean_labels"] = "mean_labels" + ext;
  truth["mean_shape_mask"] = "mean_shape_mask" + ext;
  truth["subjects"] = json::array();

  save_image(pop.mean_image, dir / ("mean_image" + ext));
  save_labels(pop.mean_labels, dir / ("mean_labels" + ext));
  save_labels(pop.mean_shape_mask, dir / ("mean_shape_mask" + ext));

  char name[32];
  for (std::size_t k = 0; k < pop.images.size(); ++k) {
    std::snprintf(name, sizeof(name), "subj%03zu", k);
    const std::string id(name);
    save_image(pop.images[k], dir / (id + "_img" + ext));
    save_labels(pop.labels[k], dir / (id + "_lbl" + ext));
    manifest["subjects"].push_back({{"id", id},
                                    {"images", {id + "_img" + ext}},
                                    {"labels", id + "_lbl" + ext}});

    json coeffs = json::array();
    for (const auto& a : pop.truth_fields[k].coeffs())
      coeffs.push_back({a[0], a[1]});
    truth["subjects"].push_back({{"id", id}, {"coefficients", coeffs}});
  }

  const std::string mtext = manifest.dump(2) + "\n";
  detail::write_file(dir / "manifest.json",
                     std::vector<std::uint8_t>(mtext.begin(), mtext.end()));
  const std::string ttext = truth.dump(2) + "\n";
  detail::write_file(dir / "truth.json",
                     std::vector<std::uint8_t>(ttext.begin(), ttext.end()));
}

}  // namespace paddit
