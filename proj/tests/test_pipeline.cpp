// End-to-end pipeline behavior on a small generated dataset: manifest intake
// with its error matrix, checkpoint persistence, and the two augmentation
// paths. Determinism is checked at the byte level on the emitted files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "paddit/errors.hpp"
#include "paddit/io.hpp"
#include "paddit/pipeline.hpp"
#include "paddit/rng.hpp"
#include "paddit/synthetic.hpp"

using namespace paddit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("paddit-pipe-" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

json load_json_file(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  return json::parse(in);
}

// every regular file under `a` must exist under `b` with identical bytes,
// and vice versa
void check_dirs_equal(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> rel_a, rel_b;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel_a.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rel_b.push_back(fs::relative(e.path(), b));
  std::sort(rel_a.begin(), rel_a.end());
  std::sort(rel_b.begin(), rel_b.end());
  REQUIRE(rel_a == rel_b);
  for (const auto& r : rel_a) CHECK(slurp(a / r) == slurp(b / r));
}

// one shared 16x16 dataset on disk for the whole suite
struct Dataset {
  TempDir dir;
  DatasetManifest manifest;
  SyntheticPopulation pop;

  Dataset() {
    PopulationConfig cfg;
    cfg.dims = {16, 16};
    cfg.subjects = 3;
    cfg.seed = 33;
    cfg.deformation_scale = 0.8;
    cfg.noise_sd = 0.02;
    cfg.control_spacing = 8;
    cfg.flow_steps = 4;
    pop = make_population(cfg);
    write_population(pop, dir.path, "raw");
    manifest = load_manifest(dir.path / "manifest.json");
  }
};

Dataset& dataset() {
  static Dataset d;
  return d;
}

RegistrationConfig<2> quick_rc() {
  RegistrationConfig<2> rc;
  rc.flow.steps = 4;
  return rc;
}

HmcConfig quick_hmc() {
  HmcConfig hmc;
  hmc.samples = 2;
  hmc.burn_in = 40;
  hmc.thin = 2;
  hmc.step_size = 0.002;
  hmc.seed = 9;
  return hmc;
}

// a one-iteration estimation run used by the checkpoint and paddit tests
const Checkpoint<2>& quick_checkpoint() {
  static const Checkpoint<2> ckpt = [] {
    KernelConfig<2> kcfg = KernelConfig<2>::uniform(
        dataset().pop.mean_image.geometry(), 8, 0.0);
    EmConfig em;
    em.iterations = 1;
    em.hmc = quick_hmc();
    return run_estimate_template<2>(dataset().manifest, kcfg, em, quick_rc())
        .checkpoint;
  }();
  return ckpt;
}

}  // namespace

TEST_CASE("manifest loading resolves paths and validates structure") {
  const DatasetManifest& m = dataset().manifest;
  REQUIRE(m.subjects.size() == 3);
  CHECK(m.subjects[0].id == "subj000");
  REQUIRE(m.subjects[0].images.size() == 1);
  // paths are resolved against the manifest's directory
  CHECK(fs::exists(m.subjects[0].images[0]));
  CHECK(fs::exists(m.subjects[0].labels));
}

TEST_CASE("manifest error matrix") {
  TempDir tmp;

  SUBCASE("missing manifest file") {
    CHECK_THROWS_AS(load_manifest(tmp.path / "nope.json"), io_error);
  }
  SUBCASE("malformed json") {
    write_text(tmp.path / "m.json", "{ not json");
    CHECK_THROWS_AS(load_manifest(tmp.path / "m.json"), data_error);
  }
  SUBCASE("no subjects array") {
    write_text(tmp.path / "m.json", "{\"items\": []}");
    CHECK_THROWS_AS(load_manifest(tmp.path / "m.json"), data_error);
  }
  SUBCASE("empty subjects array") {
    write_text(tmp.path / "m.json", "{\"subjects\": []}");
    CHECK_THROWS_AS(load_manifest(tmp.path / "m.json"), data_error);
  }
  SUBCASE("referenced volume missing") {
    write_text(tmp.path / "m.json",
               "{\"subjects\": [{\"id\": \"s0\", \"images\": [\"gone.json\"],"
               " \"labels\": \"gone_lbl.json\"}]}");
    CHECK_THROWS_AS(load_manifest(tmp.path / "m.json"), data_error);
  }
  SUBCASE("singular image key is accepted") {
    GridGeometry<2> g{{4, 4}, {1.0, 1.0}, {0.0, 0.0}};
    save_image(ScalarVolume<2>(g, 1.0), tmp.path / "img.json");
    save_labels(LabelVolume<2>(g, 0), tmp.path / "lbl.json");
    write_text(tmp.path / "m.json",
               "{\"subjects\": [{\"id\": \"s0\", \"image\": \"img.json\","
               " \"labels\": \"lbl.json\"}]}");
    const DatasetManifest m = load_manifest(tmp.path / "m.json");
    REQUIRE(m.subjects.size() == 1);
    REQUIRE(m.subjects[0].images.size() == 1);
    CHECK(m.subjects[0].images[0].filename() == "img.json");
  }
}

TEST_CASE("subject loading rejects mixed grid geometry") {
  TempDir tmp;
  GridGeometry<2> g1{{4, 4}, {1.0, 1.0}, {0.0, 0.0}};
  GridGeometry<2> g2{{5, 4}, {1.0, 1.0}, {0.0, 0.0}};
  save_image(ScalarVolume<2>(g1, 1.0), tmp.path / "a.json");
  save_labels(LabelVolume<2>(g1, 0), tmp.path / "a_lbl.json");
  save_image(ScalarVolume<2>(g2, 1.0), tmp.path / "b.json");
  save_labels(LabelVolume<2>(g2, 0), tmp.path / "b_lbl.json");
  write_text(tmp.path / "m.json",
             "{\"subjects\": ["
             "{\"id\": \"a\", \"images\": [\"a.json\"], \"labels\": \"a_lbl.json\"},"
             "{\"id\": \"b\", \"images\": [\"b.json\"], \"labels\": \"b_lbl.json\"}]}");
  const DatasetManifest m = load_manifest(tmp.path / "m.json");
  CHECK_THROWS_AS(load_subjects<2>(m), data_error);

  // label geometry must also match its own image
  write_text(tmp.path / "m2.json",
             "{\"subjects\": ["
             "{\"id\": \"a\", \"images\": [\"a.json\"], \"labels\": \"b_lbl.json\"}]}");
  CHECK_THROWS_AS(load_subjects<2>(load_manifest(tmp.path / "m2.json")), data_error);
}

TEST_CASE("checkpoint survives a save/load round trip") {
  const Checkpoint<2>& ckpt = quick_checkpoint();
  REQUIRE(ckpt.subject_ids.size() == 3);
  REQUIRE(ckpt.samples.size() == 3);
  REQUIRE(ckpt.samples[0].size() == 2);  // hmc samples per subject

  TempDir tmp;
  save_checkpoint(ckpt, tmp.path / "ckpt");
  CHECK(checkpoint_rank(tmp.path / "ckpt") == 2);
  CHECK(checkpoint_rank(tmp.path / "ckpt" / "checkpoint.json") == 2);

  const Checkpoint<2> back = load_checkpoint<2>(tmp.path / "ckpt");
  CHECK(back.iteration == ckpt.iteration);
  CHECK(back.model.sigma == ckpt.model.sigma);
  CHECK(back.model.kernel.support_radius == ckpt.model.kernel.support_radius);
  CHECK(back.model.kernel.spacing_voxels == ckpt.model.kernel.spacing_voxels);
  REQUIRE(back.model.em_trace.size() == ckpt.model.em_trace.size());
  for (std::size_t i = 0; i < back.model.em_trace.size(); ++i) {
    CHECK(back.model.em_trace[i].sigma == ckpt.model.em_trace[i].sigma);
    CHECK(back.model.em_trace[i].complete_data_nlp ==
          ckpt.model.em_trace[i].complete_data_nlp);
  }
  // template pixels come back float32-quantized
  REQUIRE(back.model.template_image.size() == ckpt.model.template_image.size());
  for (std::size_t i = 0; i < back.model.template_image.size(); ++i)
    CHECK(back.model.template_image[i] ==
          static_cast<double>(static_cast<float>(ckpt.model.template_image[i])));
  // stored coefficient samples round-trip exactly through JSON
  CHECK(back.subject_ids == ckpt.subject_ids);
  CHECK(back.samples == ckpt.samples);
}

TEST_CASE("checkpoint loader rejects wrong or damaged inputs") {
  TempDir tmp;
  SUBCASE("not a checkpoint") {
    write_text(tmp.path / "x.json", "{\"format\": \"something-else\"}");
    CHECK_THROWS_AS(checkpoint_rank(tmp.path / "x.json"), data_error);
    CHECK_THROWS_AS(load_checkpoint<2>(tmp.path / "x.json"), data_error);
  }
  SUBCASE("missing fields") {
    write_text(tmp.path / "x.json", "{\"format\": \"paddit-checkpoint-v1\"}");
    CHECK_THROWS_AS(load_checkpoint<2>(tmp.path / "x.json"), data_error);
  }
  SUBCASE("rank mismatch") {
    save_checkpoint(quick_checkpoint(), tmp.path / "ckpt");
    CHECK_THROWS_AS(load_checkpoint<3>(tmp.path / "ckpt"), data_error);
  }
}

TEST_CASE("sampled-diffeomorphism augmentation writes complete deterministic output") {
  const Checkpoint<2>& ckpt = quick_checkpoint();
  AugmentationSpec spec;
  spec.method = AugmentMethod::kPaddit;
  spec.augmentations = 2;
  spec.seed = 17;
  spec.include_originals = true;

  TempDir tmp;
  const fs::path out_a = tmp.path / "a";
  const AugmentOutcome outcome =
      run_paddit<2>(dataset().manifest, spec, ckpt, quick_rc(), quick_hmc(), out_a);
  REQUIRE(outcome.subjects_failed == 0);
  CHECK(outcome.pairs_written == 6);
  CHECK(outcome.originals_written == 3);
  CHECK(outcome.min_jacobian > 0.0);
  CHECK(outcome.min_jacobian < 10.0);

  // full per-pair file set
  for (const std::string id : {"subj000", "subj001", "subj002"}) {
    for (const std::string stem : {"aug0", "aug1"}) {
      CHECK(fs::exists(out_a / (id + "_" + stem + "_img.json")));
      CHECK(fs::exists(out_a / (id + "_" + stem + "_img.bin")));
      CHECK(fs::exists(out_a / (id + "_" + stem + "_lbl.json")));
      CHECK(fs::exists(out_a / (id + "_" + stem + ".provenance.json")));
    }
    CHECK(fs::exists(out_a / (id + "_orig_img.json")));
    CHECK(fs::exists(out_a / (id + "_orig_lbl.json")));
  }

  const json prov = load_json_file(out_a / "subj001_aug1.provenance.json");
  CHECK(prov.at("format") == "paddit-provenance-v1");
  CHECK(prov.at("method") == "paddit");
  CHECK(prov.at("subject") == "subj001");
  CHECK(prov.at("augmentation") == 1);
  CHECK(prov.at("global_seed") == 17);
  CHECK(prov.at("reused_samples") == false);
  CHECK(prov.contains("chain_seed"));
  CHECK(prov.contains("acceptance_rate"));
  CHECK(prov.contains("tuned_step_size"));
  const double t = prov.at("t").get<double>();
  CHECK(t >= 0.0);
  CHECK(t <= 1.0);
  CHECK(prov.at("field_checksum_image") == prov.at("field_checksum_labels"));
  CHECK(prov.at("outputs").at("labels") == "subj001_aug1_lbl.json");

  // a second run with the same seed reproduces every byte
  const fs::path out_b = tmp.path / "b";
  const AugmentOutcome again =
      run_paddit<2>(dataset().manifest, spec, ckpt, quick_rc(), quick_hmc(), out_b);
  REQUIRE(again.subjects_failed == 0);
  CHECK(again.min_jacobian == outcome.min_jacobian);
  check_dirs_equal(out_a, out_b);
}

TEST_CASE("zero integration time reproduces the originals bit for bit") {
  const Checkpoint<2>& ckpt = quick_checkpoint();
  AugmentationSpec spec;
  spec.augmentations = 1;
  spec.seed = 5;
  spec.include_originals = true;
  spec.time_override = 0.0;
  spec.reuse_samples = true;  // the field is irrelevant at time zero

  TempDir tmp;
  const AugmentOutcome outcome = run_paddit<2>(dataset().manifest, spec, ckpt,
                                               quick_rc(), quick_hmc(), tmp.path);
  REQUIRE(outcome.subjects_failed == 0);
  CHECK(outcome.min_jacobian == 1.0);
  for (const std::string id : {"subj000", "subj001", "subj002"}) {
    CHECK(slurp(tmp.path / (id + "_aug0_img.bin")) ==
          slurp(tmp.path / (id + "_orig_img.bin")));
    CHECK(slurp(tmp.path / (id + "_aug0_lbl.bin")) ==
          slurp(tmp.path / (id + "_orig_lbl.bin")));
    const json prov = load_json_file(tmp.path / (id + "_aug0.provenance.json"));
    CHECK(prov.at("t") == 0.0);
  }
}

TEST_CASE("stored posterior samples can be replayed instead of fresh chains") {
  const Checkpoint<2>& ckpt = quick_checkpoint();
  AugmentationSpec spec;
  spec.augmentations = 2;  // matches the two stored samples per subject
  spec.seed = 29;
  spec.reuse_samples = true;

  TempDir tmp;
  const AugmentOutcome outcome = run_paddit<2>(
      dataset().manifest, spec, ckpt, quick_rc(), quick_hmc(), tmp.path / "a");
  REQUIRE(outcome.subjects_failed == 0);
  CHECK(outcome.pairs_written == 6);
  const json prov = load_json_file(tmp.path / "a" / "subj000_aug0.provenance.json");
  CHECK(prov.at("reused_samples") == true);
  CHECK_FALSE(prov.contains("chain_seed"));

  run_paddit<2>(dataset().manifest, spec, ckpt, quick_rc(), quick_hmc(),
                tmp.path / "b");
  check_dirs_equal(tmp.path / "a", tmp.path / "b");

  SUBCASE("asking for more samples than stored fails") {
    spec.augmentations = 3;
    CHECK_THROWS_AS(run_paddit<2>(dataset().manifest, spec, ckpt, quick_rc(),
                                  quick_hmc(), tmp.path / "c"),
                    data_error);
  }
  SUBCASE("checkpoint without samples fails") {
    Checkpoint<2> bare = ckpt;
    bare.subject_ids.clear();
    bare.samples.clear();
    spec.augmentations = 1;
    CHECK_THROWS_AS(run_paddit<2>(dataset().manifest, spec, bare, quick_rc(),
                                  quick_hmc(), tmp.path / "d"),
                    data_error);
  }
}

TEST_CASE("augmentation rejects a dataset on a different grid") {
  PopulationConfig cfg;
  cfg.dims = {20, 20};
  cfg.subjects = 2;
  cfg.seed = 1;
  TempDir tmp;
  write_population(make_population(cfg), tmp.path / "data", "raw");
  const DatasetManifest other = load_manifest(tmp.path / "data" / "manifest.json");

  AugmentationSpec spec;
  spec.augmentations = 1;
  CHECK_THROWS_AS(run_paddit<2>(other, spec, quick_checkpoint(), quick_rc(),
                                quick_hmc(), tmp.path / "out"),
                  data_error);
}

TEST_CASE("baseline augmentation: zero amplitude is the identity, bytes reproducible") {
  AugmentationSpec spec;
  spec.method = AugmentMethod::kBspline;
  spec.augmentations = 2;
  spec.seed = 99;
  spec.bspline.cp = 4;
  spec.bspline.sd = 0.0;

  TempDir tmp;
  const AugmentOutcome outcome =
      run_baseline<2>(dataset().manifest, spec, tmp.path / "a");
  CHECK(outcome.pairs_written == 6);
  CHECK(outcome.min_jacobian == 1.0);

  // zero field, so warped payloads equal the dataset's own payloads exactly
  for (const std::string id : {"subj000", "subj001", "subj002"}) {
    CHECK(slurp(tmp.path / "a" / (id + "_aug0_img.bin")) ==
          slurp(dataset().dir.path / (id + "_img.bin")));
    CHECK(slurp(tmp.path / "a" / (id + "_aug1_lbl.bin")) ==
          slurp(dataset().dir.path / (id + "_lbl.bin")));
  }

  const json prov = load_json_file(tmp.path / "a" / "subj002_aug1.provenance.json");
  CHECK(prov.at("method") == "bspline");
  CHECK(prov.at("cp") == 4);
  CHECK(prov.at("sd") == 0.0);
  CHECK(prov.contains("field_seed"));

  // nonzero amplitude: reruns and parallel runs are byte-identical
  spec.bspline.sd = 3.0;
  run_baseline<2>(dataset().manifest, spec, tmp.path / "b");
  run_baseline<2>(dataset().manifest, spec, tmp.path / "c");
  check_dirs_equal(tmp.path / "b", tmp.path / "c");

  spec.jobs = 3;
  run_baseline<2>(dataset().manifest, spec, tmp.path / "d");
  check_dirs_equal(tmp.path / "b", tmp.path / "d");
}

TEST_CASE("baseline grid sweeps all nine cells") {
  AugmentationSpec spec;
  spec.augmentations = 1;
  spec.seed = 3;

  TempDir tmp;
  const std::vector<GridCell> cells =
      run_baseline_grid<2>(dataset().manifest, spec, tmp.path);
  REQUIRE(cells.size() == 9);

  const int expected_cp[] = {4, 4, 4, 8, 8, 8, 16, 16, 16};
  const double expected_sd[] = {2.0, 4.0, 6.0, 2.0, 4.0, 6.0, 2.0, 4.0, 6.0};
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(cells[i].cp == expected_cp[i]);
    CHECK(cells[i].sd == expected_sd[i]);
    CHECK(cells[i].pairs_written == 3);
    CHECK(std::isfinite(cells[i].min_jacobian));
  }
  CHECK(fs::exists(tmp.path / "cp4_sd2" / "subj000_aug0_img.json"));
  CHECK(fs::exists(tmp.path / "cp16_sd6" / "subj002_aug0_lbl.bin"));

  const json summary = load_json_file(tmp.path / "grid_summary.json");
  REQUIRE(summary.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(summary[i].at("cp") == cells[i].cp);
    CHECK(summary[i].at("sd") == cells[i].sd);
    CHECK(summary[i].at("min_jacobian") == cells[i].min_jacobian);
    CHECK(summary[i].at("pairs_written") == cells[i].pairs_written);
  }
}

TEST_CASE("augmentation spec validation") {
  AugmentationSpec spec;
  spec.augmentations = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = AugmentationSpec{};
  spec.jobs = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = AugmentationSpec{};
  spec.time_override = 1.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = AugmentationSpec{};
  spec.method = AugmentMethod::kBspline;
  spec.bspline.cp = 2;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("template estimation runs in parallel with identical results") {
  KernelConfig<2> kcfg =
      KernelConfig<2>::uniform(dataset().pop.mean_image.geometry(), 8, 0.0);
  EmConfig em;
  em.iterations = 1;
  em.hmc = quick_hmc();

  const auto serial =
      run_estimate_template<2>(dataset().manifest, kcfg, em, quick_rc());
  em.jobs = 3;
  const auto parallel =
      run_estimate_template<2>(dataset().manifest, kcfg, em, quick_rc());

  CHECK(serial.checkpoint.model.sigma == parallel.checkpoint.model.sigma);
  REQUIRE(serial.checkpoint.model.template_image.size() ==
          parallel.checkpoint.model.template_image.size());
  for (std::size_t i = 0; i < serial.checkpoint.model.template_image.size(); ++i)
    CHECK(serial.checkpoint.model.template_image[i] ==
          parallel.checkpoint.model.template_image[i]);
  CHECK(serial.checkpoint.samples == parallel.checkpoint.samples);

  SUBCASE("bad channel index is a data error") {
    CHECK_THROWS_AS(
        run_estimate_template<2>(dataset().manifest, kcfg, em, quick_rc(), 1),
        data_error);
  }
}
