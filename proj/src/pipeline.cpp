#include "paddit/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <functional>
#include <nlohmann/json.hpp>
#include <thread>

#include "paddit/diffeo.hpp"
#include "paddit/errors.hpp"
#include "paddit/io.hpp"
#include "paddit/rng.hpp"

namespace paddit {
namespace {

using nlohmann::json;

// RNG stream tags keeping augmentation-time draws disjoint from EM chains
constexpr std::uint64_t kAugChainStream = 0x61756763ULL;  // "augc"
constexpr std::uint64_t kTimeStream = 0x61756774ULL;      // "augt"
constexpr std::uint64_t kBaselineStream = 0x62736c00ULL;  // "bsl"

constexpr char kCheckpointTag[] = "paddit-checkpoint-v1";
constexpr char kProvenanceTag[] = "paddit-provenance-v1";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// output files mirror the format the input volume arrived in
std::string volume_ext(const std::filesystem::path& p) {
  const std::string name = p.filename().string();
  if (name.ends_with(".nii.gz")) return ".nii.gz";
  if (name.ends_with(".nii")) return ".nii";
  return ".json";
}

void write_json(const std::filesystem::path& path, const json& j) {
  const std::string text = j.dump(2) + "\n";
  detail::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

json load_json(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw data_error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

// Worker pool over subject indices. Exceptions are captured per index and
// rethrown in index order after the join, so error behavior does not depend
// on scheduling.
void run_indexed(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t k) {
    try {
      fn(k);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  if (jobs <= 1 || n <= 1) {
    for (std::size_t k = 0; k < n; ++k) guarded(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int workers = std::min<int>(jobs, static_cast<int>(n));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t k = next.fetch_add(1); k < n; k = next.fetch_add(1))
          guarded(k);
      });
    for (auto& t : pool) t.join();
  }
  for (std::size_t k = 0; k < n; ++k)
    if (errors[k]) std::rethrow_exception(errors[k]);
}

std::string image_name(const std::string& id, const std::string& stem, int channel,
                       std::size_t channels, const std::string& ext) {
  std::string name = id + "_" + stem + "_img";
  if (channels > 1) name += std::to_string(channel);
  return name + ext;
}

template <std::size_t N>
void check_labels_in_range(const LabelVolume<N>&) {}

}  // namespace

// ----------------------------------------------------------------- manifest

DatasetManifest load_manifest(const std::filesystem::path& path) {
  const json j = load_json(path);
  if (!j.contains("subjects") || !j["subjects"].is_array())
    throw data_error("manifest " + path.string() + " lacks a subjects array");
  const std::filesystem::path root = path.parent_path();

  DatasetManifest manifest;
  for (const auto& s : j["subjects"]) {
    SubjectEntry entry;
    try {
      entry.id = s.at("id").get<std::string>();
      if (s.contains("images")) {
        for (const auto& p : s.at("images"))
          entry.images.push_back(root / p.get<std::string>());
      } else {
        entry.images.push_back(root / s.at("image").get<std::string>());
      }
      entry.labels = root / s.at("labels").get<std::string>();
    } catch (const json::exception& e) {
      throw data_error("malformed subject entry in " + path.string() + ": " +
                       e.what());
    }
    if (entry.images.empty())
      throw data_error("subject " + entry.id + " lists no images");
    for (const auto& p : entry.images)
      if (!std::filesystem::exists(p))
        throw data_error("missing image file: " + p.string());
    if (!std::filesystem::exists(entry.labels))
      throw data_error("missing label file: " + entry.labels.string());
    manifest.subjects.push_back(std::move(entry));
  }
  if (manifest.subjects.empty())
    throw data_error("manifest " + path.string() + " has no subjects");
  return manifest;
}

template <std::size_t N>
std::vector<Subject<N>> load_subjects(const DatasetManifest& manifest) {
  std::vector<Subject<N>> subjects;
  subjects.reserve(manifest.subjects.size());
  for (const auto& entry : manifest.subjects) {
    Subject<N> s;
    s.id = entry.id;
    for (const auto& p : entry.images) s.images.push_back(load_image<N>(p));
    s.labels = load_labels<N>(entry.labels);
    for (const auto& img : s.images)
      if (!(img.geometry() == s.labels.geometry()))
        throw data_error("subject " + s.id +
                         ": image and label geometries differ");
    subjects.push_back(std::move(s));
  }
  const auto& g0 = subjects[0].labels.geometry();
  for (const auto& s : subjects)
    if (!(s.labels.geometry() == g0))
      throw data_error("subject " + s.id +
                       " has a different grid geometry than subject " +
                       subjects[0].id);
  return subjects;
}

// -------------------------------------------------------------- checkpoints

template <std::size_t N>
void save_checkpoint(const Checkpoint<N>& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_image(ckpt.model.template_image, dir / "template.json");

  json j;
  j["format"] = kCheckpointTag;
  j["iteration"] = ckpt.iteration;
  j["sigma"] = ckpt.model.sigma;
  j["kernel"] = {
      {"name", kKernelName},
      {"support_radius", ckpt.model.kernel.support_radius},
      {"spacing_voxels",
       std::vector<int>(ckpt.model.kernel.spacing_voxels.begin(),
                        ckpt.model.kernel.spacing_voxels.end())}};
  j["template"] = "template.json";
  j["em_trace"] = json::array();
  for (const auto& rec : ckpt.model.em_trace)
    j["em_trace"].push_back({{"complete_data_nlp", rec.complete_data_nlp},
                             {"sigma", rec.sigma},
                             {"acceptance_rates", rec.acceptance_rates}});
  if (!ckpt.subject_ids.empty()) {
    j["subject_ids"] = ckpt.subject_ids;
    j["samples"] = ckpt.samples;
  }
  write_json(dir / "checkpoint.json", j);
}

namespace {

std::filesystem::path checkpoint_file(const std::filesystem::path& dir_or_file) {
  if (std::filesystem::is_directory(dir_or_file))
    return dir_or_file / "checkpoint.json";
  return dir_or_file;
}

}  // namespace

int checkpoint_rank(const std::filesystem::path& dir_or_file) {
  const std::filesystem::path file = checkpoint_file(dir_or_file);
  const json j = load_json(file);
  if (!j.contains("format") || j["format"] != kCheckpointTag)
    throw data_error(file.string() + " is not a checkpoint file");
  return volume_rank(file.parent_path() / j.at("template").get<std::string>());
}

template <std::size_t N>
Checkpoint<N> load_checkpoint(const std::filesystem::path& dir_or_file) {
  const std::filesystem::path file = checkpoint_file(dir_or_file);
  const json j = load_json(file);
  if (!j.contains("format") || j["format"] != kCheckpointTag)
    throw data_error(file.string() + " is not a checkpoint file");

  Checkpoint<N> ckpt;
  try {
    ckpt.iteration = j.at("iteration").get<int>();
    ckpt.model.sigma = j.at("sigma").get<double>();
    const auto& k = j.at("kernel");
    ckpt.model.kernel.support_radius = k.at("support_radius").get<double>();
    const auto spacing = k.at("spacing_voxels").get<std::vector<int>>();
    if (spacing.size() != N)
      throw data_error(file.string() + ": kernel spacing has " +
                       std::to_string(spacing.size()) + " axes, expected " +
                       std::to_string(N));
    for (std::size_t a = 0; a < N; ++a)
      ckpt.model.kernel.spacing_voxels[a] = spacing[static_cast<std::size_t>(a)];
    ckpt.model.template_image =
        load_image<N>(file.parent_path() / j.at("template").get<std::string>());
    for (const auto& rec : j.value("em_trace", json::array())) {
      EmIterationRecord r;
      r.complete_data_nlp = rec.at("complete_data_nlp").get<double>();
      r.sigma = rec.at("sigma").get<double>();
      r.acceptance_rates = rec.at("acceptance_rates").get<std::vector<double>>();
      ckpt.model.em_trace.push_back(std::move(r));
    }
    if (j.contains("subject_ids")) {
      ckpt.subject_ids = j.at("subject_ids").get<std::vector<std::string>>();
      ckpt.samples =
          j.at("samples").get<std::vector<std::vector<std::vector<double>>>>();
      if (ckpt.samples.size() != ckpt.subject_ids.size())
        throw data_error(file.string() + ": sample/subject count mismatch");
    }
  } catch (const json::exception& e) {
    throw data_error("malformed checkpoint " + file.string() + ": " + e.what());
  }
  try {
    ckpt.model.kernel.validate();
  } catch (const std::invalid_argument& e) {
    throw data_error("invalid kernel config in " + file.string() + ": " + e.what());
  }
  if (!(ckpt.model.sigma > 0.0))
    throw data_error("invalid sigma in " + file.string());
  return ckpt;
}

// -------------------------------------------------------------- augmentation

void AugmentationSpec::validate() const {
  if (augmentations < 1)
    throw std::invalid_argument("augmentations must be >= 1");
  if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
  if (time_override && !(*time_override >= 0.0 && *time_override <= 1.0))
    throw std::invalid_argument("time override must lie in [0, 1]");
  if (method == AugmentMethod::kBspline) bspline.validate();
}

namespace {

// provenance + volume output for one augmented pair
template <std::size_t N>
void write_pair(const std::filesystem::path& out_dir, const SubjectEntry& entry,
                const Subject<N>& subject, const DisplacementField<N>& disp,
                int aug_index, json provenance, double* min_jac_out) {
  const double min_jac = min_jacobian(disp);
  const std::uint64_t checksum = field_checksum(disp);
  *min_jac_out = min_jac;

  const std::string aug_stem = "aug" + std::to_string(aug_index);
  json outputs;
  outputs["images"] = json::array();
  for (std::size_t ch = 0; ch < subject.images.size(); ++ch) {
    const std::string name =
        image_name(subject.id, aug_stem, static_cast<int>(ch),
                   subject.images.size(), volume_ext(entry.images[ch]));
    save_image(warp_image(subject.images[ch], disp), out_dir / name);
    outputs["images"].push_back(name);
  }
  const std::string label_name =
      subject.id + "_" + aug_stem + "_lbl" + volume_ext(entry.labels);
  save_labels(warp_labels(subject.labels, disp), out_dir / label_name);
  outputs["labels"] = label_name;

  provenance["format"] = kProvenanceTag;
  provenance["subject"] = subject.id;
  provenance["augmentation"] = aug_index;
  provenance["min_jacobian"] = min_jac;
  provenance["field_checksum_image"] = hex64(checksum);
  provenance["field_checksum_labels"] = hex64(checksum);
  provenance["outputs"] = outputs;
  write_json(out_dir / (subject.id + "_" + aug_stem + ".provenance.json"),
             provenance);
}

template <std::size_t N>
void write_originals(const std::filesystem::path& out_dir,
                     const SubjectEntry& entry, const Subject<N>& subject) {
  for (std::size_t ch = 0; ch < subject.images.size(); ++ch) {
    const std::string name =
        image_name(subject.id, "orig", static_cast<int>(ch),
                   subject.images.size(), volume_ext(entry.images[ch]));
    save_image(subject.images[ch], out_dir / name);
  }
  save_labels(subject.labels,
              out_dir / (subject.id + "_orig_lbl" + volume_ext(entry.labels)));
}

}  // namespace

template <std::size_t N>
AugmentOutcome run_paddit(const DatasetManifest& manifest,
                          const AugmentationSpec& spec, const Checkpoint<N>& ckpt,
                          const RegistrationConfig<N>& rc, const HmcConfig& hmc,
                          const std::filesystem::path& out_dir) {
  spec.validate();
  rc.validate();
  hmc.validate();
  const std::vector<Subject<N>> subjects = load_subjects<N>(manifest);
  const auto& geom = subjects[0].labels.geometry();
  if (!(geom == ckpt.model.template_image.geometry()))
    throw data_error(
        "dataset grid geometry does not match the checkpointed template");

  // resolve stored-sample indices up front so a bad pairing is a hard error
  std::vector<int> sample_index(subjects.size(), -1);
  if (spec.reuse_samples) {
    if (ckpt.subject_ids.empty())
      throw data_error(
          "checkpoint stores no posterior samples; rerun estimate-template or "
          "drop --reuse-samples");
    for (std::size_t k = 0; k < subjects.size(); ++k) {
      const auto it = std::find(ckpt.subject_ids.begin(), ckpt.subject_ids.end(),
                                subjects[k].id);
      if (it == ckpt.subject_ids.end())
        throw data_error("subject " + subjects[k].id +
                         " has no stored samples in the checkpoint");
      const int j = static_cast<int>(it - ckpt.subject_ids.begin());
      if (static_cast<int>(ckpt.samples[static_cast<std::size_t>(j)].size()) <
          spec.augmentations)
        throw data_error("subject " + subjects[k].id + " has only " +
                         std::to_string(ckpt.samples[static_cast<std::size_t>(j)].size()) +
                         " stored samples, need " +
                         std::to_string(spec.augmentations));
      sample_index[k] = j;
    }
  }

  std::filesystem::create_directories(out_dir);
  const ControlGrid<N> grid(geom, ckpt.model.kernel);
  const KernelModel<N> kernel(grid);
  RegistrationConfig<N> rck = rc;
  rck.sigma = ckpt.model.sigma;

  const std::size_t n = subjects.size();
  std::vector<std::string> failures(n);
  std::vector<int> pair_counts(n, 0);
  std::vector<double> min_jacs(n, std::numeric_limits<double>::infinity());

  run_indexed(n, spec.jobs, [&](std::size_t k) {
    const Subject<N>& subject = subjects[k];
    try {
      std::vector<KernelVelocityField<N>> fields;
      json chain_info;
      if (spec.reuse_samples) {
        const auto& flat_list = ckpt.samples[static_cast<std::size_t>(sample_index[k])];
        for (int a = 0; a < spec.augmentations; ++a) {
          const auto& flat = flat_list[static_cast<std::size_t>(a)];
          Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(
              flat.data(), static_cast<Eigen::Index>(flat.size()));
          fields.push_back(KernelVelocityField<N>::unflatten(grid, v));
        }
        chain_info["reused_samples"] = true;
      } else {
        HmcConfig chain_cfg = hmc;
        chain_cfg.samples = spec.augmentations;
        chain_cfg.seed = mix_seed(spec.seed, static_cast<std::uint64_t>(k),
                                  kAugChainStream);
        PosteriorSamples<N> ps = sample_posterior(
            subject.images[0], ckpt.model.template_image,
            KernelVelocityField<N>::zero(grid), rck, kernel, chain_cfg);
        fields = std::move(ps.fields);
        chain_info["reused_samples"] = false;
        chain_info["chain_seed"] = chain_cfg.seed;
        chain_info["acceptance_rate"] = ps.diagnostics.acceptance_rate;
        chain_info["tuned_step_size"] = ps.diagnostics.tuned_step_size;
        chain_info["retunes"] = ps.diagnostics.retunes;
      }

      Rng time_rng(mix_seed(spec.seed, static_cast<std::uint64_t>(k), kTimeStream));
      for (int a = 0; a < spec.augmentations; ++a) {
        const double drawn = time_rng.uniform01();
        const double t = spec.time_override ? *spec.time_override : drawn;
        const DisplacementField<N> disp =
            exponentiate(fields[static_cast<std::size_t>(a)], geom,
                         FlowConfig(rc.flow.steps, t));
        json provenance = chain_info;
        provenance["method"] = "paddit";
        provenance["global_seed"] = spec.seed;
        provenance["t"] = t;
        provenance["flow_steps"] = rc.flow.steps;
        double pair_min_jac = 0.0;
        write_pair(out_dir, manifest.subjects[k], subject, disp, a,
                   std::move(provenance), &pair_min_jac);
        min_jacs[k] = std::min(min_jacs[k], pair_min_jac);
        ++pair_counts[k];
      }
      if (spec.include_originals)
        write_originals(out_dir, manifest.subjects[k], subject);
    } catch (const numerical_error& e) {
      failures[k] = e.what();
    }
  });

  AugmentOutcome outcome;
  for (std::size_t k = 0; k < n; ++k) {
    if (!failures[k].empty()) {
      ++outcome.subjects_failed;
      outcome.errors.push_back("subject " + subjects[k].id + ": " + failures[k]);
      continue;
    }
    outcome.pairs_written += pair_counts[k];
    outcome.min_jacobian = std::min(outcome.min_jacobian, min_jacs[k]);
    if (spec.include_originals) ++outcome.originals_written;
  }
  return outcome;
}

template <std::size_t N>
AugmentOutcome run_baseline(const DatasetManifest& manifest,
                            const AugmentationSpec& spec,
                            const std::filesystem::path& out_dir) {
  spec.validate();
  spec.bspline.validate();
  const std::vector<Subject<N>> subjects = load_subjects<N>(manifest);
  const auto& geom = subjects[0].labels.geometry();
  std::filesystem::create_directories(out_dir);

  const std::size_t n = subjects.size();
  std::vector<int> pair_counts(n, 0);
  std::vector<double> min_jacs(n, std::numeric_limits<double>::infinity());

  run_indexed(n, spec.jobs, [&](std::size_t k) {
    const Subject<N>& subject = subjects[k];
    for (int a = 0; a < spec.augmentations; ++a) {
      BsplineConfig cfg = spec.bspline;
      cfg.seed = mix_seed(spec.seed, static_cast<std::uint64_t>(k),
                          kBaselineStream, static_cast<std::uint64_t>(a));
      const DisplacementField<N> disp = sample_bspline_field(cfg, geom);
      json provenance;
      provenance["method"] = "bspline";
      provenance["global_seed"] = spec.seed;
      provenance["field_seed"] = cfg.seed;
      provenance["cp"] = cfg.cp;
      provenance["sd"] = cfg.sd;
      double pair_min_jac = 0.0;
      write_pair(out_dir, manifest.subjects[k], subject, disp, a,
                 std::move(provenance), &pair_min_jac);
      min_jacs[k] = std::min(min_jacs[k], pair_min_jac);
      ++pair_counts[k];
    }
    if (spec.include_originals)
      write_originals(out_dir, manifest.subjects[k], subject);
  });

  AugmentOutcome outcome;
  for (std::size_t k = 0; k < n; ++k) {
    outcome.pairs_written += pair_counts[k];
    outcome.min_jacobian = std::min(outcome.min_jacobian, min_jacs[k]);
    if (spec.include_originals) ++outcome.originals_written;
  }
  return outcome;
}

template <std::size_t N>
std::vector<GridCell> run_baseline_grid(const DatasetManifest& manifest,
                                        AugmentationSpec spec,
                                        const std::filesystem::path& out_dir) {
  spec.method = AugmentMethod::kBspline;
  const int cps[] = {4, 8, 16};
  const double sds[] = {2.0, 4.0, 6.0};

  std::vector<GridCell> cells;
  std::filesystem::create_directories(out_dir);
  for (int cp : cps) {
    for (double sd : sds) {
      AugmentationSpec cell_spec = spec;
      cell_spec.bspline.cp = cp;
      cell_spec.bspline.sd = sd;
      cell_spec.seed = mix_seed(spec.seed, static_cast<std::uint64_t>(cp),
                                static_cast<std::uint64_t>(sd * 1000.0));
      char name[32];
      std::snprintf(name, sizeof(name), "cp%d_sd%g", cp, sd);
      const AugmentOutcome outcome =
          run_baseline<N>(manifest, cell_spec, out_dir / name);
      cells.push_back(GridCell{cp, sd, outcome.min_jacobian, outcome.pairs_written});
    }
  }

  json summary = json::array();
  for (const auto& c : cells)
    summary.push_back({{"cp", c.cp},
                       {"sd", c.sd},
                       {"min_jacobian", c.min_jacobian},
                       {"pairs_written", c.pairs_written}});
  write_json(out_dir / "grid_summary.json", summary);
  return cells;
}

// ------------------------------------------------------ template estimation

template <std::size_t N>
EstimateResult<N> run_estimate_template(const DatasetManifest& manifest,
                                        const KernelConfig<N>& kernel_cfg,
                                        const EmConfig& em_cfg,
                                        const RegistrationConfig<N>& rc,
                                        int channel) {
  const std::vector<Subject<N>> subjects = load_subjects<N>(manifest);
  std::vector<ScalarVolume<N>> images;
  images.reserve(subjects.size());
  for (const auto& s : subjects) {
    if (channel < 0 || channel >= static_cast<int>(s.images.size()))
      throw data_error("subject " + s.id + " has no channel " +
                       std::to_string(channel));
    images.push_back(s.images[static_cast<std::size_t>(channel)]);
  }

  EStepResult<N> last;
  TemplateModel<N> model =
      estimate_template(images, kernel_cfg, em_cfg, rc, &last);

  EstimateResult<N> result;
  result.checkpoint.model = std::move(model);
  result.checkpoint.iteration = em_cfg.iterations;
  for (std::size_t k = 0; k < subjects.size(); ++k) {
    result.checkpoint.subject_ids.push_back(subjects[k].id);
    std::vector<std::vector<double>> flats;
    for (const auto& field : last.samples[k]) {
      const Eigen::VectorXd flat = field.flatten();
      flats.emplace_back(flat.data(), flat.data() + flat.size());
    }
    result.checkpoint.samples.push_back(std::move(flats));
  }
  return result;
}

template std::vector<Subject<2>> load_subjects<2>(const DatasetManifest&);
template std::vector<Subject<3>> load_subjects<3>(const DatasetManifest&);
template void save_checkpoint<2>(const Checkpoint<2>&, const std::filesystem::path&);
template void save_checkpoint<3>(const Checkpoint<3>&, const std::filesystem::path&);
template Checkpoint<2> load_checkpoint<2>(const std::filesystem::path&);
template Checkpoint<3> load_checkpoint<3>(const std::filesystem::path&);
template AugmentOutcome run_paddit<2>(const DatasetManifest&, const AugmentationSpec&,
                                      const Checkpoint<2>&, const RegistrationConfig<2>&,
                                      const HmcConfig&, const std::filesystem::path&);
template AugmentOutcome run_paddit<3>(const DatasetManifest&, const AugmentationSpec&,
                                      const Checkpoint<3>&, const RegistrationConfig<3>&,
                                      const HmcConfig&, const std::filesystem::path&);
template AugmentOutcome run_baseline<2>(const DatasetManifest&, const AugmentationSpec&,
                                        const std::filesystem::path&);
template AugmentOutcome run_baseline<3>(const DatasetManifest&, const AugmentationSpec&,
                                        const std::filesystem::path&);
template std::vector<GridCell> run_baseline_grid<2>(const DatasetManifest&,
                                                    AugmentationSpec,
                                                    const std::filesystem::path&);
template std::vector<GridCell> run_baseline_grid<3>(const DatasetManifest&,
                                                    AugmentationSpec,
                                                    const std::filesystem::path&);
template EstimateResult<2> run_estimate_template<2>(const DatasetManifest&,
                                                    const KernelConfig<2>&,
                                                    const EmConfig&,
                                                    const RegistrationConfig<2>&, int);
template EstimateResult<3> run_estimate_template<3>(const DatasetManifest&,
                                                    const KernelConfig<3>&,
                                                    const EmConfig&,
                                                    const RegistrationConfig<3>&, int);

}  // namespace paddit
