#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "paddit/diffeo.hpp"
#include "paddit/errors.hpp"
#include "paddit/grid.hpp"
#include "paddit/hmc.hpp"
#include "paddit/kernel.hpp"
#include "paddit/posterior.hpp"
#include "paddit/rng.hpp"

namespace paddit {

struct EmIterationRecord {
  double complete_data_nlp = 0.0;  // negative log posterior of the completed data
  double sigma = 0.0;
  std::vector<double> acceptance_rates;  // one entry per observation
};

template <std::size_t N>
struct TemplateModel {
  ScalarVolume<N> template_image;
  double sigma;
  KernelConfig<N> kernel;
  std::vector<EmIterationRecord> em_trace;

  void validate(double sigma_floor) const {
    if (!(sigma >= sigma_floor))
      throw std::invalid_argument("template model sigma below floor");
  }
};

struct EmConfig {
  int iterations = 10;
  HmcConfig hmc{};
  bool warm_start = true;
  int jobs = 1;

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
    if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
    hmc.validate();
  }
};

namespace detail {

template <std::size_t N>
void require_population(const std::vector<ScalarVolume<N>>& images) {
  if (images.size() < 2)
    throw std::invalid_argument("template estimation needs at least 2 images");
  for (std::size_t k = 1; k < images.size(); ++k)
    require_same_geometry(images[0].geometry(), images[k].geometry(),
                          "population image " + std::to_string(k));
}

}  // namespace detail

// Floor keeping the likelihood away from collapse on (near-)duplicate data:
// 1e-4 of the population intensity range, with an absolute fallback when the
// range itself is degenerate.
template <std::size_t N>
double sigma_floor(const std::vector<ScalarVolume<N>>& images) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& img : images)
    for (std::size_t i = 0; i < img.size(); ++i) {
      lo = std::min(lo, img[i]);
      hi = std::max(hi, img[i]);
    }
  const double range = hi - lo;
  return range > 0.0 ? 1e-4 * range : 1e-4;
}

// Voxelwise mean initializer; sigma set to the root mean empirical variance
// across observations (biased MLE normalization, matching the M-step).
template <std::size_t N>
TemplateModel<N> initialize_template(const std::vector<ScalarVolume<N>>& images,
                                     const KernelConfig<N>& kernel_cfg) {
  detail::require_population(images);
  const auto& g = images[0].geometry();
  const double n = static_cast<double>(images.size());

  std::vector<double> mean(g.voxel_count(), 0.0);
  for (const auto& img : images)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += img[i];
  for (double& m : mean) m /= n;

  double ss = 0.0;
  for (const auto& img : images)
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double r = img[i] - mean[i];
      ss += r * r;
    }
  const double variance = ss / (n * static_cast<double>(mean.size()));
  const double floor = sigma_floor(images);

  TemplateModel<N> model{ScalarVolume<N>(g, std::move(mean)),
                         std::max(std::sqrt(variance), floor), kernel_cfg,
                         {}};
  return model;
}

template <std::size_t N>
TemplateModel<N> initialize_template(const std::vector<ScalarVolume<N>>& images) {
  detail::require_population(images);
  return initialize_template(images, KernelConfig<N>::uniform(images[0].geometry()));
}

template <std::size_t N>
struct EStepResult {
  std::vector<std::vector<KernelVelocityField<N>>> samples;  // [subject][s]
  std::vector<ChainDiagnostics> diagnostics;                 // per subject
  std::vector<KernelVelocityField<N>> final_states;          // warm starts
};

// One Monte-Carlo E-step: an independent HMC chain per observation against
// the current {I_T, sigma}. Chain seeds are hashed from (global seed,
// subject, iteration) so results do not depend on scheduling.
template <std::size_t N>
EStepResult<N> e_step(const std::vector<ScalarVolume<N>>& images,
                      const TemplateModel<N>& model, const KernelModel<N>& kernel,
                      const EmConfig& cfg, const RegistrationConfig<N>& rc,
                      int iteration,
                      const std::vector<KernelVelocityField<N>>* warm_starts = nullptr) {
  detail::require_population(images);
  cfg.validate();
  const std::size_t n = images.size();
  if (warm_starts && warm_starts->size() != n)
    throw std::invalid_argument("warm start count does not match image count");

  RegistrationConfig<N> rck = rc;
  rck.sigma = model.sigma;

  EStepResult<N> out;
  out.samples.resize(n);
  out.diagnostics.resize(n);
  out.final_states.resize(n, KernelVelocityField<N>::zero(kernel.grid()));

  std::vector<std::string> failures(n);
  auto run_subject = [&](std::size_t k) {
    HmcConfig chain_cfg = cfg.hmc;
    chain_cfg.seed = mix_seed(cfg.hmc.seed, static_cast<std::uint64_t>(k),
                              static_cast<std::uint64_t>(iteration));
    const KernelVelocityField<N> init =
        (cfg.warm_start && warm_starts) ? (*warm_starts)[k]
                                        : KernelVelocityField<N>::zero(kernel.grid());
    try {
      PosteriorSamples<N> ps = sample_posterior(images[k], model.template_image,
                                                init, rck, kernel, chain_cfg);
      out.samples[k] = std::move(ps.fields);
      out.diagnostics[k] = ps.diagnostics;
      out.final_states[k] = std::move(ps.final_state);
    } catch (const numerical_error& e) {
      failures[k] = e.what();
    }
  };

  if (cfg.jobs <= 1 || n <= 1) {
    for (std::size_t k = 0; k < n; ++k) run_subject(k);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    const int workers = std::min<int>(cfg.jobs, static_cast<int>(n));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t k = next.fetch_add(1); k < n; k = next.fetch_add(1))
          run_subject(k);
      });
    for (auto& t : pool) t.join();
  }

  for (std::size_t k = 0; k < n; ++k)
    if (!failures[k].empty())
      throw numerical_error("subject " + std::to_string(k) + ": " + failures[k]);
  return out;
}

// Negative complete-data log likelihood, averaged over the S samples of each
// observation; depends on theta = {I_T, sigma} only through the Gaussian term.
template <std::size_t N>
double complete_data_nll(const std::vector<std::vector<ScalarVolume<N>>>& warped,
                         const ScalarVolume<N>& template_image, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  const double voxels = static_cast<double>(template_image.size());
  double nll = 0.0;
  for (const auto& subject : warped) {
    if (subject.empty()) throw std::invalid_argument("empty sample list");
    double rss = 0.0;
    for (const auto& w : subject) {
      detail::require_same_geometry(w.geometry(), template_image.geometry(),
                                    "complete_data_nll");
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double r = template_image[i] - w[i];
        rss += r * r;
      }
    }
    const double inv_s = 1.0 / static_cast<double>(subject.size());
    nll += inv_s * (static_cast<double>(subject.size()) *
                        (voxels * std::log(sigma) +
                         0.5 * voxels * std::log(2.0 * std::numbers::pi)) +
                    rss / (2.0 * sigma * sigma));
  }
  return nll;
}

template <std::size_t N>
std::vector<std::vector<ScalarVolume<N>>> warp_samples(
    const std::vector<ScalarVolume<N>>& images,
    const std::vector<std::vector<KernelVelocityField<N>>>& samples,
    const FlowConfig& flow) {
  if (samples.size() != images.size())
    throw std::invalid_argument("sample list count does not match image count");
  std::vector<std::vector<ScalarVolume<N>>> warped;
  warped.reserve(images.size());
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (samples[k].empty()) throw std::invalid_argument("empty sample list");
    std::vector<ScalarVolume<N>> row;
    row.reserve(samples[k].size());
    for (const auto& v : samples[k])
      row.push_back(
          warp_image(images[k], exponentiate(v, images[k].geometry(), flow)));
    warped.push_back(std::move(row));
  }
  return warped;
}

// Closed-form M-step: the template is the sample-weighted mean of the warped
// observations and sigma^2 their mean squared residual against it, both
// jointly minimizing the complete-data negative log likelihood.
template <std::size_t N>
TemplateModel<N> m_step(const std::vector<ScalarVolume<N>>& images,
                        const std::vector<std::vector<KernelVelocityField<N>>>& samples,
                        const TemplateModel<N>& model, const FlowConfig& flow,
                        double floor) {
  detail::require_population(images);
  const auto warped = warp_samples(images, samples, flow);
  const auto& g = images[0].geometry();

  std::vector<double> mean(g.voxel_count(), 0.0);
  double total_weight = 0.0;
  for (const auto& subject : warped) {
    const double w = 1.0 / static_cast<double>(subject.size());
    for (const auto& vol : subject)
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += w * vol[i];
    total_weight += 1.0;
  }
  for (double& m : mean) m /= total_weight;

  double rss = 0.0;
  for (const auto& subject : warped) {
    const double w = 1.0 / static_cast<double>(subject.size());
    for (const auto& vol : subject)
      for (std::size_t i = 0; i < mean.size(); ++i) {
        const double r = mean[i] - vol[i];
        rss += w * r * r;
      }
  }
  const double denom =
      static_cast<double>(warped.size()) * static_cast<double>(mean.size());
  const double sigma = std::max(std::sqrt(rss / denom), floor);

  TemplateModel<N> next{ScalarVolume<N>(g, std::move(mean)), sigma, model.kernel,
                        model.em_trace};
  return next;
}

// Monte-Carlo EM driver. Deterministic from cfg.hmc.seed; the trace records
// the completed-data negative log posterior after each M-step. When
// last_e_step is given it receives the final iteration's samples, which the
// augmentation pipeline can reuse instead of running fresh chains.
template <std::size_t N>
TemplateModel<N> estimate_template(const std::vector<ScalarVolume<N>>& images,
                                   const KernelConfig<N>& kernel_cfg,
                                   const EmConfig& cfg,
                                   const RegistrationConfig<N>& rc,
                                   EStepResult<N>* last_e_step = nullptr) {
  detail::require_population(images);
  cfg.validate();
  rc.validate();

  const double floor = sigma_floor(images);
  TemplateModel<N> model = initialize_template(images, kernel_cfg);
  const ControlGrid<N> grid(images[0].geometry(), kernel_cfg);
  const KernelModel<N> kernel(grid);

  std::vector<KernelVelocityField<N>> warm(images.size(),
                                           KernelVelocityField<N>::zero(grid));
  for (int it = 0; it < cfg.iterations; ++it) {
    EStepResult<N> es = e_step(images, model, kernel, cfg, rc, it,
                               cfg.warm_start ? &warm : nullptr);
    warm = es.final_states;
    model = m_step(images, es.samples, model, rc.flow, floor);
    if (last_e_step && it + 1 == cfg.iterations) *last_e_step = es;

    EmIterationRecord rec;
    rec.sigma = model.sigma;
    const auto warped = warp_samples(images, es.samples, rc.flow);
    rec.complete_data_nlp =
        complete_data_nll(warped, model.template_image, model.sigma);
    for (const auto& subject : es.samples) {
      const double inv_s = 1.0 / static_cast<double>(subject.size());
      for (const auto& v : subject)
        rec.complete_data_nlp -= inv_s * log_prior(v, kernel);
    }
    rec.acceptance_rates.reserve(es.diagnostics.size());
    for (const auto& d : es.diagnostics)
      rec.acceptance_rates.push_back(d.acceptance_rate);
    model.em_trace.push_back(std::move(rec));
  }
  model.validate(floor);
  return model;
}

}  // namespace paddit
