#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "paddit/grid.hpp"
#include "paddit/kernel.hpp"

namespace paddit {

// Desk-scale 2D verification data: a smooth base shape (ellipse/disk union
// with a bright lesion blob) deformed by known random velocity fields. The
// generator keeps the ground truth, so tests can recompute every subject and
// compare estimated templates against the analytic mean shape.
struct PopulationConfig {
  GridIndex<2> dims{32, 32};
  Vec<2> spacing{1.0, 1.0};
  int subjects = 10;
  double deformation_scale = 1.0;  // multiplier on the coefficient prior scale
  double noise_sd = 0.02;          // additive Gaussian intensity noise
  std::uint64_t seed = 0;
  int control_spacing = 8;         // truth-field control spacing, voxels
  double support_radius = 0.0;     // 0 = twice the control spacing
  int flow_steps = 8;

  void validate() const {
    if (subjects < 1) throw std::invalid_argument("subjects must be >= 1");
    if (!(deformation_scale >= 0.0))
      throw std::invalid_argument("deformation_scale must be non-negative");
    if (!(noise_sd >= 0.0))
      throw std::invalid_argument("noise_sd must be non-negative");
    if (control_spacing < 1)
      throw std::invalid_argument("control_spacing must be >= 1");
    if (flow_steps < 1) throw std::invalid_argument("flow_steps must be >= 1");
  }
};

// intensity threshold separating the body shape from background; also applied
// to estimated templates when comparing against the mean mask
inline constexpr double kShapeThreshold = 0.3;
// threshold on the lesion bump amplitude defining the lesion label
inline constexpr double kLesionThreshold = 0.5;

struct SyntheticPopulation {
  PopulationConfig config;
  ScalarVolume<2> mean_image;      // analytic base, the population mean shape
  LabelVolume<2> mean_labels;      // lesion mask of the base
  LabelVolume<2> mean_shape_mask;  // body mask of the base (Dice reference)
  std::vector<ScalarVolume<2>> images;
  std::vector<LabelVolume<2>> labels;
  std::vector<KernelVelocityField<2>> truth_fields;
};

// The noiseless analytic base image on the given grid.
ScalarVolume<2> synthetic_base_image(const GridGeometry<2>& g);

SyntheticPopulation make_population(const PopulationConfig& cfg);

// Writes subjects, manifest.json, and truth.json under `dir`. `format` is
// "raw" (JSON sidecar + .bin) or "nifti" (.nii.gz).
void write_population(const SyntheticPopulation& pop,
                      const std::filesystem::path& dir,
                      const std::string& format = "raw");

}  // namespace paddit
