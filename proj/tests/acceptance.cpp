// Release gate: nine numbered end-to-end checks, one printed line each.
// Every check recomputes its reference quantity independently (finite
// differences, dense covariance, byte comparisons) and carries an explicit
// runtime budget where one applies. Exit status 0 only if all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "paddit/bspline.hpp"
#include "paddit/diffeo.hpp"
#include "paddit/errors.hpp"
#include "paddit/grid.hpp"
#include "paddit/hmc.hpp"
#include "paddit/io.hpp"
#include "paddit/kernel.hpp"
#include "paddit/pipeline.hpp"
#include "paddit/posterior.hpp"
#include "paddit/rng.hpp"
#include "paddit/synthetic.hpp"
#include "paddit/template_em.hpp"

using namespace paddit;
namespace fs = std::filesystem;

namespace {

struct CheckResult {
  bool pass = false;
  std::string metric;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// ------------------------------------------------------------ shared pieces

GridGeometry<2> grid16() { return {{16, 16}, {1.0, 1.0}, {0.0, 0.0}}; }

// 16x16 voxels at control spacing 7 -> a 3x3 control-point lattice
KernelModel<2>& model3x3() {
  static ControlGrid<2> grid(grid16(), KernelConfig<2>::uniform(grid16(), 7, 0.0));
  static KernelModel<2> model(grid);
  return model;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in.good()) throw io_error("cannot read " + p.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

bool dirs_byte_equal(const fs::path& a, const fs::path& b, std::string* why) {
  std::vector<fs::path> rel_a, rel_b;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel_a.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rel_b.push_back(fs::relative(e.path(), b));
  std::sort(rel_a.begin(), rel_a.end());
  std::sort(rel_b.begin(), rel_b.end());
  if (rel_a != rel_b) {
    *why = "file lists differ";
    return false;
  }
  for (const auto& r : rel_a)
    if (slurp(a / r) != slurp(b / r)) {
      *why = "bytes differ in " + r.string();
      return false;
    }
  return true;
}

struct Scratch {
  fs::path path;
  Scratch() {
    path = fs::temp_directory_path() /
           ("paddit-gate-" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(path);
  }
  ~Scratch() { fs::remove_all(path); }
};

// ---------------------------------------------------------------- criteria

// 1. Analytic posterior gradient vs central finite differences on 20 random
//    instances: 16x16 grid, 3x3 control points, 4 integration steps.
CheckResult check_gradient() {
  const GridGeometry<2> g = grid16();
  const KernelModel<2>& model = model3x3();
  const ScalarVolume<2> base = synthetic_base_image(g);
  RegistrationConfig<2> rc;
  rc.sigma = 0.2;
  rc.flow.steps = 4;

  const double h = 1e-5;
  double max_rel = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(1000 + static_cast<std::uint64_t>(inst));
    const KernelVelocityField<2> truth = model.sample_field(0.5, rng);
    ScalarVolume<2> obs =
        warp_image(base, exponentiate(truth, g, FlowConfig{4, 1.0}));
    for (std::size_t i = 0; i < obs.size(); ++i) obs[i] += 0.01 * rng.normal();

    const PosteriorTarget<2> target(obs, base, rc, model);
    Eigen::VectorXd q(target.dim());
    for (int j = 0; j < q.size(); ++j) q[j] = 0.4 * rng.normal();

    Eigen::VectorXd grad(target.dim());
    target.eval(q, &grad);
    Eigen::VectorXd fd(target.dim());
    for (int j = 0; j < q.size(); ++j) {
      Eigen::VectorXd qp = q, qm = q;
      qp[j] += h;
      qm[j] -= h;
      fd[j] = (target.eval(qp, nullptr) - target.eval(qm, nullptr)) / (2.0 * h);
    }
    const double rel = (fd - grad).norm() / std::max(grad.norm(), 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return {max_rel < 1e-4, "max rel err " + fmt("%.2e", max_rel)};
}

// 2. Prior-only sampling: 10,000 post-burn-in draws and the empirical
//    coefficient covariance must reproduce the kernel Gram matrix.
CheckResult check_hmc_calibration() {
  const KernelModel<2>& model = model3x3();
  const ScalarVolume<2> base = synthetic_base_image(grid16());
  RegistrationConfig<2> rc;
  rc.flow.steps = 4;
  const PosteriorTarget<2> target(base, base, rc, model, 0.0);

  HmcConfig cfg;
  cfg.samples = 10000;
  cfg.thin = 1;
  cfg.burn_in = 500;
  cfg.step_size = 0.2;
  cfg.leapfrog_steps = 20;
  cfg.seed = 42;
  const int dim = target.dim();
  const ChainResult chain = sample_chain(target, Eigen::VectorXd::Zero(dim), cfg);

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  for (const auto& s : chain.samples) mean += s;
  mean /= static_cast<double>(chain.samples.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& s : chain.samples) {
    const Eigen::VectorXd c = s - mean;
    cov += c * c.transpose();
  }
  cov /= static_cast<double>(chain.samples.size());

  const Eigen::MatrixXd& gram = model.gram();
  const int p = model.point_count();
  Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(dim, dim);
  expected.topLeftCorner(p, p) = gram;
  expected.bottomRightCorner(p, p) = gram;

  const double rel = (cov - expected).norm() / expected.norm();
  const double acc = chain.diagnostics.acceptance_rate;
  const bool pass = rel <= 0.10 && acc >= 0.4 && acc <= 0.95;
  return {pass, "cov rel Frobenius " + fmt("%.3f", rel) + ", acceptance " +
                    fmt("%.2f", acc)};
}

// 3. Leapfrog plus momentum flip returns every state to its start.
CheckResult check_reversibility() {
  const KernelModel<2>& model = model3x3();
  const ScalarVolume<2> base = synthetic_base_image(grid16());
  RegistrationConfig<2> rc;
  rc.flow.steps = 4;
  const PosteriorTarget<2> target(base, base, rc, model, 0.0);

  Rng rng(314);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd q0(target.dim()), p0(target.dim());
    for (int j = 0; j < q0.size(); ++j) {
      q0[j] = 0.7 * rng.normal();
      p0[j] = rng.normal();
    }
    Eigen::VectorXd q = q0, p = p0;
    leapfrog(q, p, target, 0.05, 25);
    p = -p;
    leapfrog(q, p, target, 0.05, 25);
    p = -p;
    const double err = std::max((q - q0).lpNorm<Eigen::Infinity>(),
                                (p - p0).lpNorm<Eigen::Infinity>());
    worst = std::max(worst, err);
  }
  return {worst < 1e-10, "max return error " + fmt("%.2e", worst)};
}

// 4. 100 prior-scale fields: positive Jacobian everywhere at 8 steps, and
//    inverse consistency within half a voxel for moderate displacements.
CheckResult check_diffeomorphism() {
  GridGeometry<2> g{{32, 32}, {1.0, 1.0}, {0.0, 0.0}};
  const ControlGrid<2> grid(g, KernelConfig<2>::uniform(g, 8, 0.0));
  const KernelModel<2> model(grid);

  int positive = 0;
  int moderate = 0;
  double worst_jac = std::numeric_limits<double>::infinity();
  double worst_residual = 0.0;
  for (int i = 0; i < 100; ++i) {
    Rng rng(5000 + static_cast<std::uint64_t>(i));
    const KernelVelocityField<2> v = model.sample_field(1.0, rng);

    const DisplacementField<2> d8 = exponentiate(v, g, FlowConfig{8, 1.0});
    const double mj = min_jacobian(d8);
    worst_jac = std::min(worst_jac, mj);
    if (mj > 0.0) ++positive;

    const DisplacementField<2> d16 = exponentiate(v, g, FlowConfig{16, 1.0});
    double max_disp = 0.0;
    for (std::size_t k = 0; k < d16.size(); ++k)
      max_disp = std::max(max_disp,
                          std::sqrt(d16[k][0] * d16[k][0] + d16[k][1] * d16[k][1]));
    if (max_disp <= 5.0) {  // unit spacing: mm equal voxels
      ++moderate;
      const InversionResult<2> inv = invert(d16, 30, 1e-3);
      worst_residual = std::max(worst_residual, inv.max_residual);
    }
  }
  const bool pass = positive == 100 && moderate >= 50 && worst_residual < 0.5;
  return {pass, "min jacobian " + fmt("%.3f", worst_jac) + ", " +
                    std::to_string(moderate) + "/100 fields <= 5 voxels, max inverse "
                    "residual " + fmt("%.3f", worst_residual) + " voxels"};
}

// 5. Template estimation on a 10-subject synthetic population: thresholded
//    template vs the true mean shape (Dice), and closer to the true mean
//    image than the median subject.
CheckResult check_template_recovery() {
  PopulationConfig pc;  // 32x32, 10 subjects, defaults otherwise
  pc.seed = 2026;
  const SyntheticPopulation pop = make_population(pc);
  const GridGeometry<2>& g = pop.mean_image.geometry();

  EmConfig em;
  em.iterations = 5;
  em.hmc.samples = 5;
  em.hmc.burn_in = 30;
  em.hmc.thin = 2;
  em.hmc.step_size = 0.005;
  em.hmc.leapfrog_steps = 20;
  em.hmc.seed = 7;
  RegistrationConfig<2> rc;
  rc.flow.steps = 8;

  const TemplateModel<2> model = estimate_template(
      pop.images, KernelConfig<2>::uniform(g, 8, 0.0), em, rc);

  double inter = 0.0, a_count = 0.0, b_count = 0.0;
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    const bool a = model.template_image[i] > kShapeThreshold;
    const bool b = pop.mean_shape_mask[i] == 1;
    a_count += a;
    b_count += b;
    inter += a && b;
  }
  const double dice = 2.0 * inter / (a_count + b_count);

  auto mse = [&](const ScalarVolume<2>& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = x[i] - pop.mean_image[i];
      s += r * r;
    }
    return s / static_cast<double>(x.size());
  };
  const double template_mse = mse(model.template_image);
  std::vector<double> subject_mse;
  for (const auto& img : pop.images) subject_mse.push_back(mse(img));
  std::sort(subject_mse.begin(), subject_mse.end());
  const std::size_t n = subject_mse.size();
  const double median = n % 2 == 1
                            ? subject_mse[n / 2]
                            : 0.5 * (subject_mse[n / 2 - 1] + subject_mse[n / 2]);

  const bool pass = dice >= 0.9 && template_mse < median;
  return {pass, "dice " + fmt("%.3f", dice) + ", template mse " +
                    fmt("%.2e", template_mse) + " vs median subject " +
                    fmt("%.2e", median)};
}

// 6. The closed-form M-step never loses to random perturbations of the
//    template and noise scale under the same fixed samples.
CheckResult check_mstep_optimality() {
  PopulationConfig pc;
  pc.dims = {16, 16};
  pc.subjects = 3;
  pc.seed = 77;
  pc.flow_steps = 4;
  const SyntheticPopulation pop = make_population(pc);
  const GridGeometry<2>& g = pop.mean_image.geometry();

  const KernelConfig<2> kcfg = KernelConfig<2>::uniform(g, 8, 0.0);
  const ControlGrid<2> grid(g, kcfg);
  const KernelModel<2> kernel(grid);
  const TemplateModel<2> init = initialize_template(pop.images, kcfg);

  EmConfig em;
  em.hmc.samples = 3;
  em.hmc.burn_in = 30;
  em.hmc.step_size = 0.003;
  em.hmc.seed = 5;
  RegistrationConfig<2> rc;
  rc.flow.steps = 4;
  const EStepResult<2> es = e_step(pop.images, init, kernel, em, rc, 0);

  const TemplateModel<2> updated = m_step(pop.images, es.samples, init,
                                          rc.flow, 1e-4);

  // the complete-data objective evaluated on the same warped samples
  std::vector<std::vector<ScalarVolume<2>>> warped;
  for (std::size_t k = 0; k < pop.images.size(); ++k) {
    std::vector<ScalarVolume<2>> per_subject;
    for (const auto& v : es.samples[k])
      per_subject.push_back(
          warp_image(pop.images[k], exponentiate(v, g, rc.flow)));
    warped.push_back(std::move(per_subject));
  }
  const double best =
      complete_data_nll(warped, updated.template_image, updated.sigma);
  const double slack = 1e-8 * (std::abs(best) + 1.0);

  Rng rng(123);
  int beaten = 0;
  double closest = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 100; ++trial) {
    ScalarVolume<2> tpl = updated.template_image;
    for (std::size_t i = 0; i < tpl.size(); ++i) tpl[i] += 0.02 * rng.normal();
    const double sigma = updated.sigma * std::exp(0.2 * rng.normal());
    const double nll = complete_data_nll(warped, tpl, sigma);
    closest = std::min(closest, nll - best);
    if (nll < best - slack) ++beaten;
  }
  return {beaten == 0, std::to_string(beaten) +
                           " of 100 perturbations beat the update; closest gap " +
                           fmt("%.2e", closest)};
}

// 7. Baseline arm: zero amplitude is the byte-level identity and the full
//    cp x sd sweep completes with Jacobian diagnostics.
CheckResult check_baseline_contract(const fs::path& data_dir,
                                    const DatasetManifest& manifest) {
  Scratch out;
  AugmentationSpec spec;
  spec.method = AugmentMethod::kBspline;
  spec.augmentations = 2;
  spec.seed = 11;
  spec.bspline.cp = 4;
  spec.bspline.sd = 0.0;

  run_baseline<2>(manifest, spec, out.path / "zero_a");
  run_baseline<2>(manifest, spec, out.path / "zero_b");
  std::string why;
  if (!dirs_byte_equal(out.path / "zero_a", out.path / "zero_b", &why))
    return {false, "zero-amplitude reruns differ: " + why};
  for (int k = 0; k < 3; ++k) {
    char id[16];
    std::snprintf(id, sizeof(id), "subj%03d", k);
    const std::string s(id);
    if (slurp(out.path / "zero_a" / (s + "_aug0_img.bin")) !=
        slurp(data_dir / (s + "_img.bin")))
      return {false, "zero-amplitude output differs from the input image"};
    if (slurp(out.path / "zero_a" / (s + "_aug1_lbl.bin")) !=
        slurp(data_dir / (s + "_lbl.bin")))
      return {false, "zero-amplitude output differs from the input labels"};
  }

  AugmentationSpec grid_spec;
  grid_spec.augmentations = 1;
  grid_spec.seed = 3;
  const std::vector<GridCell> cells =
      run_baseline_grid<2>(manifest, grid_spec, out.path / "grid");
  if (cells.size() != 9) return {false, "grid produced " +
                                            std::to_string(cells.size()) + " cells"};
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& c : cells) {
    if (c.pairs_written != 3)
      return {false, "grid cell wrote " + std::to_string(c.pairs_written) +
                         " pairs"};
    if (!std::isfinite(c.min_jacobian))
      return {false, "grid cell missing jacobian diagnostic"};
    worst = std::min(worst, c.min_jacobian);
  }
  if (!fs::exists(out.path / "grid" / "grid_summary.json"))
    return {false, "grid summary file missing"};
  return {true, "identity at sd=0; 9/9 cells, worst jacobian " +
                    fmt("%.2f", worst)};
}

// 8. Two augmentations per subject triple the set with originals included,
//    and reruns are byte-identical in serial and parallel mode.
CheckResult check_pipeline_determinism(const DatasetManifest& manifest) {
  KernelConfig<2> kcfg =
      KernelConfig<2>::uniform(load_subjects<2>(manifest)[0].labels.geometry(), 8,
                               0.0);
  EmConfig em;
  em.iterations = 1;
  em.hmc.samples = 2;
  em.hmc.burn_in = 40;
  em.hmc.step_size = 0.002;
  em.hmc.seed = 9;
  RegistrationConfig<2> rc;
  rc.flow.steps = 4;
  const Checkpoint<2> ckpt =
      run_estimate_template<2>(manifest, kcfg, em, rc).checkpoint;

  AugmentationSpec spec;
  spec.augmentations = 2;
  spec.seed = 17;
  spec.include_originals = true;

  Scratch out;
  const AugmentOutcome first =
      run_paddit<2>(manifest, spec, ckpt, rc, em.hmc, out.path / "serial_a");
  if (first.subjects_failed != 0)
    return {false, std::to_string(first.subjects_failed) + " subjects failed"};
  const int n = static_cast<int>(manifest.subjects.size());
  if (first.pairs_written != 2 * n || first.originals_written != n)
    return {false, "wrote " + std::to_string(first.pairs_written) + " pairs and " +
                       std::to_string(first.originals_written) + " originals"};

  run_paddit<2>(manifest, spec, ckpt, rc, em.hmc, out.path / "serial_b");
  std::string why;
  if (!dirs_byte_equal(out.path / "serial_a", out.path / "serial_b", &why))
    return {false, "serial rerun differs: " + why};

  AugmentationSpec par = spec;
  par.jobs = 3;
  run_paddit<2>(manifest, par, ckpt, rc, em.hmc, out.path / "parallel");
  if (!dirs_byte_equal(out.path / "serial_a", out.path / "parallel", &why))
    return {false, "parallel run differs: " + why};

  return {true, std::to_string(2 * n) + " pairs + " + std::to_string(n) +
                    " originals; serial and parallel reruns byte-identical"};
}

// 9. Warping with a zero displacement field is bit-exact for images and
//    labels, in 2D and 3D.
CheckResult check_interpolation_identity() {
  {
    GridGeometry<2> g{{20, 19}, {1.0, 1.5}, {0.0, -2.0}};
    ScalarVolume<2> img(g, 0.0);
    LabelVolume<2> lbl(g, 0);
    Rng rng(271828);
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] = rng.normal();
      lbl[i] = static_cast<std::int32_t>(rng.next_u64() % 6);
    }
    const DisplacementField<2> zero = DisplacementField<2>::zero(g);
    const ScalarVolume<2> wi = warp_image(img, zero);
    const LabelVolume<2> wl = warp_labels(lbl, zero);
    if (std::memcmp(wi.values().data(), img.values().data(),
                    img.size() * sizeof(double)) != 0)
      return {false, "2d image bytes changed"};
    if (std::memcmp(wl.labels().data(), lbl.labels().data(),
                    lbl.size() * sizeof(std::int32_t)) != 0)
      return {false, "2d label bytes changed"};
  }
  {
    GridGeometry<3> g{{8, 9, 10}, {1.0, 1.0, 2.0}, {0.0, 0.0, 0.0}};
    ScalarVolume<3> img(g, 0.0);
    LabelVolume<3> lbl(g, 0);
    Rng rng(161803);
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] = rng.normal();
      lbl[i] = static_cast<std::int32_t>(rng.next_u64() % 4);
    }
    const DisplacementField<3> zero = DisplacementField<3>::zero(g);
    const ScalarVolume<3> wi = warp_image(img, zero);
    const LabelVolume<3> wl = warp_labels(lbl, zero);
    if (std::memcmp(wi.values().data(), img.values().data(),
                    img.size() * sizeof(double)) != 0)
      return {false, "3d image bytes changed"};
    if (std::memcmp(wl.labels().data(), lbl.labels().data(),
                    lbl.size() * sizeof(std::int32_t)) != 0)
      return {false, "3d label bytes changed"};
  }
  return {true, "2d and 3d warps bit-exact"};
}

// ------------------------------------------------------------------ runner

bool run_check(int id, const char* name, double budget_seconds,
               const std::function<CheckResult()>& fn) {
  const auto start = std::chrono::steady_clock::now();
  CheckResult result;
  try {
    result = fn();
  } catch (const std::exception& e) {
    result = {false, std::string("exception: ") + e.what()};
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  bool pass = result.pass;
  std::string metric = result.metric;
  if (budget_seconds > 0.0) {
    metric += "; budget " + fmt("%.0f", budget_seconds) + "s";
    if (elapsed >= budget_seconds) pass = false;
  }
  std::printf("criterion %d %s: %s (%s; %.1fs)\n", id, name,
              pass ? "PASS" : "FAIL", metric.c_str(), elapsed);
  std::fflush(stdout);
  return pass;
}

}  // namespace

int main() {
  // shared on-disk dataset for the pipeline-level checks
  Scratch data;
  PopulationConfig pc;
  pc.dims = {16, 16};
  pc.subjects = 3;
  pc.seed = 33;
  pc.deformation_scale = 0.8;
  pc.flow_steps = 4;
  write_population(make_population(pc), data.path, "raw");
  const DatasetManifest manifest = load_manifest(data.path / "manifest.json");

  bool all = true;
  all &= run_check(1, "gradient-correctness", 60.0, check_gradient);
  all &= run_check(2, "hmc-calibration", 120.0, check_hmc_calibration);
  all &= run_check(3, "leapfrog-reversibility", 0.0, check_reversibility);
  all &= run_check(4, "diffeomorphism-property", 0.0, check_diffeomorphism);
  all &= run_check(5, "template-recovery", 600.0, check_template_recovery);
  all &= run_check(6, "m-step-optimality", 0.0, check_mstep_optimality);
  all &= run_check(7, "baseline-contract", 0.0,
                   [&] { return check_baseline_contract(data.path, manifest); });
  all &= run_check(8, "pipeline-determinism", 0.0,
                   [&] { return check_pipeline_determinism(manifest); });
  all &= run_check(9, "interpolation-identity", 0.0, check_interpolation_identity);

  std::printf("%s\n", all ? "all criteria passed" : "one or more criteria FAILED");
  return all ? 0 : 1;
}
