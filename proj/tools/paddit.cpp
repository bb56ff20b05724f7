// paddit: diffeomorphic data augmentation for segmentation datasets.
//
// Subcommands:
//   estimate-template   learn a population template + noise level (MC-EM)
//   augment             write augmented image/label pairs (paddit | bspline)
//   baseline-grid       run the full Cp x Sd B-spline sweep
//   synthgen            generate a synthetic 2D population with ground truth
//   preview             render a volume slice to PNG
//   inspect             print geometry / manifest / checkpoint info as JSON
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "paddit/errors.hpp"
#include "paddit/io.hpp"
#include "paddit/pipeline.hpp"
#include "paddit/png.hpp"
#include "paddit/synthetic.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// JSON config files: a flat object of option name -> value, applied as
// defaults (explicit command-line values win, CLI11's standard precedence).
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool,
                        std::string) const override {
    json out = json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
      if (opt->count() == 0 && !default_also) continue;
      const std::string name = opt->get_lnames().front();
      if (opt->count() > 0) {
        out[name] = opt->results().size() == 1 ? json(opt->results().front())
                                               : json(opt->results());
      } else if (!opt->get_default_str().empty()) {
        out[name] = opt->get_default_str();
      }
    }
    return out.dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::ConfigError(std::string("malformed JSON config: ") + e.what());
    }
    if (!j.is_object())
      throw CLI::ConfigError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      item.name = key;
      if (value.is_array()) {
        for (const auto& e : value) item.inputs.push_back(scalar(e));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  }
};

// -------------------------------------------------------------- option sets

struct CommonOpts {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct HmcOpts {
  double step_size = 0.01;
  int leapfrog_steps = 20;
  int burn_in = 50;
  int thin = 2;
};

struct KernelOpts {
  int control_spacing = 8;
  double support_radius = 0.0;  // 0: twice the control spacing
};

void add_common(CLI::App* sub, CommonOpts& o, bool manifest_required = true) {
  auto* m = sub->add_option("--manifest", o.manifest,
                            "dataset manifest (JSON) listing subjects")
                ->check(CLI::ExistingFile);
  if (manifest_required) m->required();
  sub->add_option("--out", o.out, "output directory")->required();
  sub->add_option("--seed", o.seed, "global random seed")->capture_default_str();
  sub->add_option("--jobs", o.jobs, "worker threads (1 = bit-reproducible)")->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->set_config("--config", "", "JSON config file with option defaults")
      ->check(CLI::ExistingFile);
  sub->config_formatter(std::make_shared<JsonConfig>());
}

void add_hmc(CLI::App* sub, HmcOpts& o) {
  sub->add_option("--step-size", o.step_size, "initial leapfrog step size")->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--leapfrog-steps", o.leapfrog_steps,
                  "leapfrog steps per proposal")->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--burn-in", o.burn_in, "burn-in transitions (with tuning)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--thin", o.thin, "keep every thin-th state")->capture_default_str()
      ->check(CLI::PositiveNumber);
}

void add_kernel(CLI::App* sub, KernelOpts& o) {
  sub->add_option("--control-spacing", o.control_spacing,
                  "velocity control-point spacing in voxels")->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--support-radius", o.support_radius,
                  "kernel support radius in mm (0: twice the control spacing)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
}

paddit::HmcConfig make_hmc(const HmcOpts& o, int samples, std::uint64_t seed) {
  paddit::HmcConfig cfg;
  cfg.step_size = o.step_size;
  cfg.leapfrog_steps = o.leapfrog_steps;
  cfg.burn_in = o.burn_in;
  cfg.thin = o.thin;
  cfg.samples = samples;
  cfg.seed = seed;
  return cfg;
}

int manifest_rank(const paddit::DatasetManifest& manifest) {
  return paddit::volume_rank(manifest.subjects.front().images.front());
}

// ------------------------------------------------------------- subcommands

struct EstimateOpts {
  CommonOpts common;
  HmcOpts hmc;
  KernelOpts kernel;
  int em_iters = 10;
  int hmc_samples = 10;
  int flow_steps = 8;
  int channel = 0;
};

template <std::size_t N>
int run_estimate(const EstimateOpts& o, const paddit::DatasetManifest& manifest) {
  const paddit::ScalarVolume<N> first =
      paddit::load_image<N>(manifest.subjects.front().images.front());
  const auto kernel_cfg = paddit::KernelConfig<N>::uniform(
      first.geometry(), o.kernel.control_spacing, o.kernel.support_radius);

  paddit::EmConfig em;
  em.iterations = o.em_iters;
  em.jobs = o.common.jobs;
  em.hmc = make_hmc(o.hmc, o.hmc_samples, o.common.seed);

  paddit::RegistrationConfig<N> rc;
  rc.flow.steps = o.flow_steps;

  const paddit::EstimateResult<N> result =
      paddit::run_estimate_template<N>(manifest, kernel_cfg, em, rc, o.channel);
  paddit::save_checkpoint(result.checkpoint, o.common.out);

  const auto& model = result.checkpoint.model;
  std::cout << "template estimated: " << manifest.subjects.size() << " subjects, "
            << o.em_iters << " EM iterations\n"
            << "sigma: " << model.sigma << "\n"
            << "checkpoint: " << (fs::path(o.common.out) / "checkpoint.json").string()
            << "\n";
  return 0;
}

struct AugmentOpts {
  CommonOpts common;
  HmcOpts hmc;
  std::string method = "paddit";
  std::string checkpoint;
  int augmentations = 2;
  bool include_originals = false;
  bool reuse_samples = false;
  double time_override = -1.0;  // <0: draw t ~ U(0,1)
  int flow_steps = 8;
  int cp = 8;
  double sd = 4.0;
};

paddit::AugmentationSpec make_spec(const AugmentOpts& o) {
  paddit::AugmentationSpec spec;
  spec.method = o.method == "bspline" ? paddit::AugmentMethod::kBspline
                                      : paddit::AugmentMethod::kPaddit;
  spec.augmentations = o.augmentations;
  spec.seed = o.common.seed;
  spec.jobs = o.common.jobs;
  spec.include_originals = o.include_originals;
  spec.reuse_samples = o.reuse_samples;
  if (o.time_override >= 0.0) spec.time_override = o.time_override;
  spec.bspline.cp = o.cp;
  spec.bspline.sd = o.sd;
  return spec;
}

int report_outcome(const paddit::AugmentOutcome& outcome) {
  for (const auto& e : outcome.errors) std::cerr << "error: " << e << "\n";
  std::cout << "pairs written: " << outcome.pairs_written << "\n";
  if (outcome.originals_written > 0)
    std::cout << "originals copied: " << outcome.originals_written << "\n";
  if (outcome.pairs_written > 0)
    std::cout << "min jacobian: " << outcome.min_jacobian << "\n";
  if (outcome.subjects_failed > 0) {
    std::cout << "subjects failed: " << outcome.subjects_failed << "\n";
    return 3;
  }
  return 0;
}

template <std::size_t N>
int run_augment(const AugmentOpts& o, const paddit::DatasetManifest& manifest) {
  const paddit::AugmentationSpec spec = make_spec(o);
  if (spec.method == paddit::AugmentMethod::kBspline)
    return report_outcome(paddit::run_baseline<N>(manifest, spec, o.common.out));

  const auto ckpt = paddit::load_checkpoint<N>(o.checkpoint);
  paddit::RegistrationConfig<N> rc;
  rc.flow.steps = o.flow_steps;
  const paddit::HmcConfig hmc = make_hmc(o.hmc, o.augmentations, o.common.seed);
  return report_outcome(
      paddit::run_paddit<N>(manifest, spec, ckpt, rc, hmc, o.common.out));
}

struct BaselineGridOpts {
  CommonOpts common;
  int augmentations = 2;
};

template <std::size_t N>
int run_grid(const BaselineGridOpts& o, const paddit::DatasetManifest& manifest) {
  paddit::AugmentationSpec spec;
  spec.method = paddit::AugmentMethod::kBspline;
  spec.augmentations = o.augmentations;
  spec.seed = o.common.seed;
  spec.jobs = o.common.jobs;
  const auto cells = paddit::run_baseline_grid<N>(manifest, spec, o.common.out);
  std::cout << "cp\tsd\tmin_jacobian\tpairs\n";
  for (const auto& c : cells)
    std::cout << c.cp << "\t" << c.sd << "\t" << c.min_jacobian << "\t"
              << c.pairs_written << "\n";
  std::cout << "summary: " << (fs::path(o.common.out) / "grid_summary.json").string()
            << "\n";
  return 0;
}

struct SynthOpts {
  std::string out;
  std::string format = "raw";
  std::vector<int> dims{32, 32};
  std::vector<double> spacing{1.0, 1.0};
  int subjects = 10;
  double deformation_scale = 1.0;
  double noise_sd = 0.02;
  std::uint64_t seed = 0;
  KernelOpts kernel;
  int flow_steps = 8;
};

int run_synthgen(const SynthOpts& o) {
  paddit::PopulationConfig cfg;
  cfg.dims = {o.dims[0], o.dims[1]};
  cfg.spacing = {o.spacing[0], o.spacing[1]};
  cfg.subjects = o.subjects;
  cfg.deformation_scale = o.deformation_scale;
  cfg.noise_sd = o.noise_sd;
  cfg.seed = o.seed;
  cfg.control_spacing = o.kernel.control_spacing;
  cfg.support_radius = o.kernel.support_radius;
  cfg.flow_steps = o.flow_steps;

  const paddit::SyntheticPopulation pop = paddit::make_population(cfg);
  paddit::write_population(pop, o.out, o.format);
  std::cout << "subjects written: " << pop.images.size() << "\n"
            << "manifest: " << (fs::path(o.out) / "manifest.json").string() << "\n"
            << "ground truth: " << (fs::path(o.out) / "truth.json").string()
            << "\n";
  return 0;
}

struct PreviewOpts {
  std::string input;
  std::string out;
  bool labels = false;
  int axis = 2;
  int index = -1;  // <0: middle slice
};

int run_preview(const PreviewOpts& o) {
  const int rank = paddit::volume_rank(o.input);
  if (rank == 2) {
    if (o.labels)
      paddit::render_preview(paddit::load_labels<2>(o.input), o.out);
    else
      paddit::render_preview(paddit::load_image<2>(o.input), o.out);
  } else {
    const auto pick_index = [&](const auto& vol) {
      return o.index >= 0 ? o.index : vol.geometry().dims[o.axis] / 2;
    };
    if (o.labels) {
      const auto vol = paddit::load_labels<3>(o.input);
      paddit::render_preview(vol, o.axis, pick_index(vol), o.out);
    } else {
      const auto vol = paddit::load_image<3>(o.input);
      paddit::render_preview(vol, o.axis, pick_index(vol), o.out);
    }
  }
  std::cout << "preview: " << o.out << "\n";
  return 0;
}

template <std::size_t N>
json volume_info(const fs::path& path) {
  json info;
  paddit::GridGeometry<N> g;
  try {
    const auto vol = paddit::load_image<N>(path);
    g = vol.geometry();
    double lo = vol[0], hi = vol[0];
    for (std::size_t i = 1; i < vol.size(); ++i) {
      lo = std::min(lo, vol[i]);
      hi = std::max(hi, vol[i]);
    }
    info["kind"] = "image";
    info["intensity_range"] = {lo, hi};
  } catch (const paddit::data_error&) {
    const auto vol = paddit::load_labels<N>(path);
    g = vol.geometry();
    std::int32_t hi = 0;
    for (std::size_t i = 0; i < vol.size(); ++i) hi = std::max(hi, vol[i]);
    info["kind"] = "labels";
    info["max_label"] = hi;
  }
  info["dims"] = std::vector<int>(g.dims.begin(), g.dims.end());
  info["spacing"] = std::vector<double>(g.spacing.begin(), g.spacing.end());
  info["origin"] = std::vector<double>(g.origin.begin(), g.origin.end());
  return info;
}

int run_inspect(const std::string& target) {
  const fs::path path(target);
  json info;

  const fs::path ckpt_file =
      fs::is_directory(path) ? path / "checkpoint.json" : path;
  const std::string name = ckpt_file.filename().string();
  if (name.ends_with(".json") && fs::exists(ckpt_file)) {
    std::ifstream in(ckpt_file);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw paddit::data_error("malformed JSON in " + ckpt_file.string() + ": " +
                               e.what());
    }
    const std::string format = j.value("format", "");
    if (format == "paddit-checkpoint-v1") {
      info["kind"] = "checkpoint";
      info["iteration"] = j.at("iteration");
      info["sigma"] = j.at("sigma");
      info["kernel"] = j.at("kernel");
      info["em_iterations_recorded"] = j.value("em_trace", json::array()).size();
      info["stored_sample_subjects"] =
          j.value("subject_ids", json::array()).size();
    } else if (format == "paddit-provenance-v1" || format == "paddit-truth-v1") {
      info = j;
    } else if (j.contains("subjects")) {
      const auto manifest = paddit::load_manifest(ckpt_file);
      info["kind"] = "manifest";
      info["subjects"] = manifest.subjects.size();
      std::vector<std::string> ids;
      for (const auto& s : manifest.subjects) ids.push_back(s.id);
      info["ids"] = ids;
      info["channels"] = manifest.subjects.front().images.size();
      info["rank"] = manifest_rank(manifest);
    } else if (format == "paddit-raw-v1") {
      const int rank = paddit::volume_rank(ckpt_file);
      info = rank == 2 ? volume_info<2>(ckpt_file) : volume_info<3>(ckpt_file);
    } else {
      throw paddit::data_error("unrecognized JSON file: " + ckpt_file.string());
    }
  } else {
    const int rank = paddit::volume_rank(path);
    info = rank == 2 ? volume_info<2>(path) : volume_info<3>(path);
  }

  std::cout << info.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian diffeomorphic data augmentation toolkit"};
  app.require_subcommand(1);

  EstimateOpts est;
  auto* est_cmd = app.add_subcommand(
      "estimate-template", "Estimate a population template via Monte-Carlo EM");
  add_common(est_cmd, est.common);
  add_hmc(est_cmd, est.hmc);
  add_kernel(est_cmd, est.kernel);
  est_cmd->add_option("--em-iters", est.em_iters, "EM iterations")->capture_default_str()
      ->check(CLI::PositiveNumber);
  est_cmd->add_option("--hmc-samples", est.hmc_samples,
                      "posterior samples per subject per E-step")->capture_default_str()
      ->check(CLI::PositiveNumber);
  est_cmd->add_option("--flow-steps", est.flow_steps,
                      "Euler steps for the velocity-field exponential")->capture_default_str()
      ->check(CLI::PositiveNumber);
  est_cmd->add_option("--channel", est.channel,
                      "image channel used for registration")->capture_default_str()
      ->check(CLI::NonNegativeNumber);

  AugmentOpts aug;
  auto* aug_cmd =
      app.add_subcommand("augment", "Write augmented image/label pairs");
  add_common(aug_cmd, aug.common);
  add_hmc(aug_cmd, aug.hmc);
  aug_cmd->add_option("--method", aug.method, "augmentation method")->capture_default_str()
      ->check(CLI::IsMember({"paddit", "bspline"}));
  aug_cmd->add_option("--checkpoint", aug.checkpoint,
                      "template checkpoint (required for --method paddit)");
  aug_cmd->add_option("--augmentations", aug.augmentations,
                      "augmented pairs per subject")->capture_default_str()
      ->check(CLI::PositiveNumber);
  aug_cmd->add_flag("--include-originals", aug.include_originals,
                    "also copy the source pairs into the output");
  aug_cmd->add_flag("--reuse-samples", aug.reuse_samples,
                    "draw fields from the checkpoint's stored posterior samples");
  aug_cmd->add_option("--time-override", aug.time_override,
                      "fix the integration time t instead of drawing U(0,1)")
      ->check(CLI::Range(0.0, 1.0));
  aug_cmd->add_option("--flow-steps", aug.flow_steps,
                      "Euler steps for the velocity-field exponential")->capture_default_str()
      ->check(CLI::PositiveNumber);
  aug_cmd->add_option("--cp", aug.cp, "B-spline control points per axis")->capture_default_str()
      ->check(CLI::PositiveNumber);
  aug_cmd->add_option("--sd", aug.sd,
                      "B-spline displacement noise std in voxels")->capture_default_str()
      ->check(CLI::NonNegativeNumber);

  BaselineGridOpts grid;
  auto* grid_cmd = app.add_subcommand(
      "baseline-grid", "Run the B-spline baseline over the Cp x Sd grid");
  add_common(grid_cmd, grid.common);
  grid_cmd->add_option("--augmentations", grid.augmentations,
                       "augmented pairs per subject per cell")->capture_default_str()
      ->check(CLI::PositiveNumber);

  SynthOpts synth;
  auto* synth_cmd = app.add_subcommand(
      "synthgen", "Generate a synthetic 2D population with ground truth");
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--format", synth.format, "volume format")->capture_default_str()
      ->check(CLI::IsMember({"raw", "nifti"}));
  synth_cmd->add_option("--dims", synth.dims, "grid size (two values)")->capture_default_str()
      ->expected(2);
  synth_cmd->add_option("--spacing", synth.spacing, "voxel spacing in mm")->capture_default_str()
      ->expected(2);
  synth_cmd->add_option("--subjects", synth.subjects, "population size")->capture_default_str()
      ->check(CLI::PositiveNumber);
  synth_cmd
      ->add_option("--deformation-scale", synth.deformation_scale,
                   "multiplier on the velocity prior scale")->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--noise-sd", synth.noise_sd,
                        "additive intensity noise std")->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--seed", synth.seed, "global random seed")->capture_default_str();
  add_kernel(synth_cmd, synth.kernel);
  synth_cmd->add_option("--flow-steps", synth.flow_steps,
                        "Euler steps for the velocity-field exponential")->capture_default_str()
      ->check(CLI::PositiveNumber);
  synth_cmd->set_config("--config", "", "JSON config file with option defaults")
      ->check(CLI::ExistingFile);
  synth_cmd->config_formatter(std::make_shared<JsonConfig>());

  PreviewOpts prev;
  auto* prev_cmd = app.add_subcommand("preview", "Render a volume slice to PNG");
  prev_cmd->add_option("--input,-i,input", prev.input, "volume to render")
      ->required()
      ->check(CLI::ExistingFile);
  prev_cmd->add_option("--out", prev.out, "output PNG path")->required();
  prev_cmd->add_flag("--labels", prev.labels,
                     "render as a label map (fixed color table)");
  prev_cmd->add_option("--axis", prev.axis, "slice axis for 3D volumes")->capture_default_str()
      ->check(CLI::Range(0, 2));
  prev_cmd->add_option("--index", prev.index,
                       "slice index for 3D volumes (default: middle)");

  std::string inspect_target;
  auto* inspect_cmd = app.add_subcommand(
      "inspect", "Print geometry / manifest / checkpoint info as JSON");
  inspect_cmd->add_option("path", inspect_target, "file or checkpoint directory")
      ->required()
      ->check(CLI::ExistingPath);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (est_cmd->parsed()) {
      const auto manifest = paddit::load_manifest(est.common.manifest);
      return manifest_rank(manifest) == 2 ? run_estimate<2>(est, manifest)
                                          : run_estimate<3>(est, manifest);
    }
    if (aug_cmd->parsed()) {
      const auto manifest = paddit::load_manifest(aug.common.manifest);
      int rank = manifest_rank(manifest);
      if (aug.method == "paddit") {
        if (aug.checkpoint.empty()) {
          std::cerr << "error: --method paddit requires --checkpoint\n";
          return 1;
        }
        const int ckpt_rank = paddit::checkpoint_rank(aug.checkpoint);
        if (ckpt_rank != rank)
          throw paddit::data_error("checkpoint is " + std::to_string(ckpt_rank) +
                                   "D but the dataset is " + std::to_string(rank) +
                                   "D");
      }
      return rank == 2 ? run_augment<2>(aug, manifest)
                       : run_augment<3>(aug, manifest);
    }
    if (grid_cmd->parsed()) {
      const auto manifest = paddit::load_manifest(grid.common.manifest);
      return manifest_rank(manifest) == 2 ? run_grid<2>(grid, manifest)
                                          : run_grid<3>(grid, manifest);
    }
    if (synth_cmd->parsed()) return run_synthgen(synth);
    if (prev_cmd->parsed()) return run_preview(prev);
    if (inspect_cmd->parsed()) return run_inspect(inspect_target);
  } catch (const paddit::numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const paddit::io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const paddit::data_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
