#include "paddit/hmc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "paddit/errors.hpp"

namespace paddit {

namespace {

bool finite(double x) { return std::isfinite(x); }

bool finite(const Eigen::VectorXd& v) { return v.allFinite(); }

}  // namespace

void HmcConfig::validate() const {
  if (!(step_size > 0.0)) throw std::invalid_argument("hmc step_size must be > 0");
  if (leapfrog_steps < 1) throw std::invalid_argument("hmc leapfrog_steps must be >= 1");
  if (burn_in < 0) throw std::invalid_argument("hmc burn_in must be >= 0");
  if (samples < 1) throw std::invalid_argument("hmc samples must be >= 1");
  if (thin < 1) throw std::invalid_argument("hmc thin must be >= 1");
}

double leapfrog(Eigen::VectorXd& q, Eigen::VectorXd& p, const Target& target,
                double step_size, int leapfrog_steps) {
  constexpr double kBad = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd grad(target.dim());
  double lp = target.eval(q, &grad);
  if (!finite(lp) || !finite(grad)) return kBad;

  p += 0.5 * step_size * grad;
  for (int l = 0; l < leapfrog_steps; ++l) {
    q += step_size * p;
    lp = target.eval(q, &grad);
    if (!finite(lp) || !finite(grad)) return kBad;
    // full momentum step between interior positions, half step at the end
    p += (l + 1 < leapfrog_steps ? step_size : 0.5 * step_size) * grad;
  }
  return lp;
}

StepOutcome hmc_step(Eigen::VectorXd& state, const Target& target,
                     double step_size, int leapfrog_steps, Rng& rng) {
  StepOutcome out;
  const int d = target.dim();
  Eigen::VectorXd p(d);
  for (int i = 0; i < d; ++i) p[i] = rng.normal();

  const double lp0 = target.log_density(state);
  if (!finite(lp0)) {
    out.nonfinite = true;
    return out;
  }
  const double h0 = -lp0 + 0.5 * p.squaredNorm();

  Eigen::VectorXd q = state;
  const double lp1 = leapfrog(q, p, target, step_size, leapfrog_steps);
  if (!finite(lp1) || !finite(q) || !finite(p)) {
    out.nonfinite = true;
    return out;
  }
  const double h1 = -lp1 + 0.5 * p.squaredNorm();
  const double dh = h1 - h0;
  out.energy_error = std::abs(dh);
  out.accept_prob = std::min(1.0, std::exp(-dh));

  if (rng.uniform01() < out.accept_prob) {
    state = std::move(q);
    out.accepted = true;
  }
  return out;
}

namespace {

// Shared burn-in phase: multiplicative adaptation toward 0.65 acceptance.
double run_burn_in(const Target& target, Eigen::VectorXd& state,
                   const HmcConfig& cfg, Rng& rng) {
  constexpr double kTargetAcceptance = 0.65;
  constexpr double kAdjust = 4.0;
  // Robbins-Monro drift on the accept probability: log(eps) moves by
  // gain * (accept_prob - target), which has its fixed point where the MEAN
  // acceptance equals the target. Leapfrog acceptance drops almost
  // discontinuously at the integrator's stability limit, so a fixed-gain
  // up/down tuner oscillates across that edge and its final value is a coin
  // flip; the decaying gain settles the iterates, and averaging log(eps)
  // over the tail returns the center of any remaining oscillation.
  double eps = cfg.step_size;
  double log_eps_sum = 0.0;
  int averaged = 0;
  const int tail_start = cfg.burn_in - cfg.burn_in / 2;
  for (int i = 0; i < cfg.burn_in; ++i) {
    const StepOutcome step = hmc_step(state, target, eps, cfg.leapfrog_steps, rng);
    const double gain = 1.0 / std::sqrt(1.0 + i);
    const double accept = step.nonfinite ? 0.0 : step.accept_prob;
    eps *= std::pow(kAdjust, gain * (accept - kTargetAcceptance));
    eps = std::clamp(eps, 1e-10, 1e3);
    if (i >= tail_start) {
      log_eps_sum += std::log(eps);
      ++averaged;
    }
  }
  if (averaged > 0) eps = std::exp(log_eps_sum / static_cast<double>(averaged));
  return std::clamp(eps, 1e-10, 1e3);
}

}  // namespace

double tune_step_size(const Target& target, Eigen::VectorXd& state,
                      const HmcConfig& cfg, Rng& rng) {
  cfg.validate();
  return run_burn_in(target, state, cfg, rng);
}

ChainResult sample_chain(const Target& target, Eigen::VectorXd init,
                         const HmcConfig& cfg) {
  cfg.validate();
  if (init.size() != target.dim())
    throw std::invalid_argument("sample_chain: init dimension mismatch");

  // The leapfrog stability limit depends on where the chain sits, and burn-in
  // can end while the chain is still in transit toward the high-density
  // region. A step tuned during that transit may reject everything once the
  // chain arrives, so a degenerate sampling phase triggers a re-tune from a
  // much smaller step instead of an immediate failure. Each retry also
  // extends burn-in from the state reached so far, which is exactly what a
  // chain stuck mid-transit needs. The rng stream continues across attempts,
  // keeping the whole procedure deterministic given cfg.seed.
  constexpr int kMaxAttempts = 4;
  constexpr double kMinAcceptance = 0.05;
  constexpr double kRetryShrink = 16.0;

  Rng rng(cfg.seed);
  HmcConfig attempt_cfg = cfg;
  ChainResult result;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    result.samples.clear();
    result.diagnostics = ChainDiagnostics{};
    result.diagnostics.retunes = attempt;
    result.diagnostics.tuned_step_size =
        run_burn_in(target, init, attempt_cfg, rng);

    const double eps = result.diagnostics.tuned_step_size;
    long accepted = 0;
    long total = 0;
    double energy_error_sum = 0.0;

    result.samples.reserve(cfg.samples);
    while (static_cast<int>(result.samples.size()) < cfg.samples) {
      for (int t = 0; t < cfg.thin; ++t) {
        const StepOutcome step =
            hmc_step(init, target, eps, cfg.leapfrog_steps, rng);
        ++total;
        if (step.accepted) ++accepted;
        if (step.nonfinite)
          ++result.diagnostics.nonfinite_steps;
        else
          energy_error_sum += step.energy_error;
      }
      result.samples.push_back(init);
    }

    result.diagnostics.acceptance_rate =
        total > 0 ? static_cast<double>(accepted) / static_cast<double>(total)
                  : 0.0;
    result.diagnostics.mean_energy_error =
        total > 0 ? energy_error_sum / static_cast<double>(total) : 0.0;

    if (result.diagnostics.acceptance_rate >= kMinAcceptance) {
      result.final_state = std::move(init);
      return result;
    }
    attempt_cfg.step_size = eps / kRetryShrink;
  }

  throw numerical_error(
      "degenerate HMC chain: acceptance rate " +
      std::to_string(result.diagnostics.acceptance_rate) +
      " after tuning (step size " +
      std::to_string(result.diagnostics.tuned_step_size) + ")");
}

}  // namespace paddit
