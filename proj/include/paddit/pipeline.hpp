#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "paddit/bspline.hpp"
#include "paddit/grid.hpp"
#include "paddit/hmc.hpp"
#include "paddit/kernel.hpp"
#include "paddit/posterior.hpp"
#include "paddit/template_em.hpp"

namespace paddit {

// ------------------------------------------------------------ dataset intake

struct SubjectEntry {
  std::string id;
  std::vector<std::filesystem::path> images;  // one per channel
  std::filesystem::path labels;
};

struct DatasetManifest {
  std::vector<SubjectEntry> subjects;
};

// JSON manifest: {"subjects": [{"id", "images": [...] (or "image"), "labels"}]}
// with paths resolved against the manifest directory; every path must exist.
DatasetManifest load_manifest(const std::filesystem::path& path);

template <std::size_t N>
struct Subject {
  std::string id;
  std::vector<ScalarVolume<N>> images;
  LabelVolume<N> labels;
};

// Loads every subject and checks that all volumes share one grid geometry.
template <std::size_t N>
std::vector<Subject<N>> load_subjects(const DatasetManifest& manifest);

// ------------------------------------------------------------- checkpointing

template <std::size_t N>
struct Checkpoint {
  TemplateModel<N> model;
  int iteration = 0;
  // last E-step samples (flattened coefficients), kept for --reuse-samples
  std::vector<std::string> subject_ids;
  std::vector<std::vector<std::vector<double>>> samples;  // [subject][s][dim]
};

template <std::size_t N>
void save_checkpoint(const Checkpoint<N>& ckpt, const std::filesystem::path& dir);

// Spatial rank of the checkpoint's template, for runtime dispatch.
int checkpoint_rank(const std::filesystem::path& dir_or_file);

template <std::size_t N>
Checkpoint<N> load_checkpoint(const std::filesystem::path& dir_or_file);

// --------------------------------------------------------------- augmentation

enum class AugmentMethod { kPaddit, kBspline };

struct AugmentationSpec {
  AugmentMethod method = AugmentMethod::kPaddit;
  int augmentations = 2;  // A new pairs per subject
  std::uint64_t seed = 0;
  int jobs = 1;
  bool include_originals = false;
  // testing hook: fixes the integration time instead of drawing t ~ U(0,1)
  std::optional<double> time_override;
  // draw velocity fields from the checkpoint's stored E-step samples instead
  // of running fresh chains
  bool reuse_samples = false;
  BsplineConfig bspline{};  // baseline arm parameters (cp, sd)

  void validate() const;
};

struct AugmentOutcome {
  int pairs_written = 0;
  int originals_written = 0;
  int subjects_failed = 0;
  std::vector<std::string> errors;  // one message per failed subject
  // worst Jacobian determinant over all emitted transformations; +inf when
  // nothing was written
  double min_jacobian = std::numeric_limits<double>::infinity();
};

// Sampled-diffeomorphism augmentation: per subject, fresh HMC chains against
// the checkpointed template yield A velocity fields; each is integrated to an
// independent random time t and applied to every channel and the labels.
// Degenerate chains skip the subject and are reported in the outcome.
template <std::size_t N>
AugmentOutcome run_paddit(const DatasetManifest& manifest,
                          const AugmentationSpec& spec, const Checkpoint<N>& ckpt,
                          const RegistrationConfig<N>& rc, const HmcConfig& hmc,
                          const std::filesystem::path& out_dir);

// Random-B-spline baseline with the same output layout.
template <std::size_t N>
AugmentOutcome run_baseline(const DatasetManifest& manifest,
                            const AugmentationSpec& spec,
                            const std::filesystem::path& out_dir);

struct GridCell {
  int cp = 0;
  double sd = 0.0;
  double min_jacobian = 0.0;
  int pairs_written = 0;
};

// The full baseline sweep Cp in {4,8,16} x Sd in {2,4,6}; each cell writes to
// its own subdirectory and reports the worst Jacobian determinant it emitted.
template <std::size_t N>
std::vector<GridCell> run_baseline_grid(const DatasetManifest& manifest,
                                        AugmentationSpec spec,
                                        const std::filesystem::path& out_dir);

// ----------------------------------------------------- template estimation

template <std::size_t N>
struct EstimateResult {
  Checkpoint<N> checkpoint;
};

// Loads one channel of every subject (default: the first), runs MC-EM, and
// returns a checkpoint carrying the last E-step samples.
template <std::size_t N>
EstimateResult<N> run_estimate_template(const DatasetManifest& manifest,
                                        const KernelConfig<N>& kernel_cfg,
                                        const EmConfig& em_cfg,
                                        const RegistrationConfig<N>& rc,
                                        int channel = 0);

extern template std::vector<Subject<2>> load_subjects<2>(const DatasetManifest&);
extern template std::vector<Subject<3>> load_subjects<3>(const DatasetManifest&);
extern template void save_checkpoint<2>(const Checkpoint<2>&,
                                        const std::filesystem::path&);
extern template void save_checkpoint<3>(const Checkpoint<3>&,
                                        const std::filesystem::path&);
extern template Checkpoint<2> load_checkpoint<2>(const std::filesystem::path&);
extern template Checkpoint<3> load_checkpoint<3>(const std::filesystem::path&);
extern template AugmentOutcome run_paddit<2>(const DatasetManifest&,
                                             const AugmentationSpec&,
                                             const Checkpoint<2>&,
                                             const RegistrationConfig<2>&,
                                             const HmcConfig&,
                                             const std::filesystem::path&);
extern template AugmentOutcome run_paddit<3>(const DatasetManifest&,
                                             const AugmentationSpec&,
                                             const Checkpoint<3>&,
                                             const RegistrationConfig<3>&,
                                             const HmcConfig&,
                                             const std::filesystem::path&);
extern template AugmentOutcome run_baseline<2>(const DatasetManifest&,
                                               const AugmentationSpec&,
                                               const std::filesystem::path&);
extern template AugmentOutcome run_baseline<3>(const DatasetManifest&,
                                               const AugmentationSpec&,
                                               const std::filesystem::path&);
extern template std::vector<GridCell> run_baseline_grid<2>(
    const DatasetManifest&, AugmentationSpec, const std::filesystem::path&);
extern template std::vector<GridCell> run_baseline_grid<3>(
    const DatasetManifest&, AugmentationSpec, const std::filesystem::path&);
extern template EstimateResult<2> run_estimate_template<2>(
    const DatasetManifest&, const KernelConfig<2>&, const EmConfig&,
    const RegistrationConfig<2>&, int);
extern template EstimateResult<3> run_estimate_template<3>(
    const DatasetManifest&, const KernelConfig<3>&, const EmConfig&,
    const RegistrationConfig<3>&, int);

}  // namespace paddit
