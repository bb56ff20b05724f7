#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "paddit/rng.hpp"

namespace paddit {

struct HmcConfig {
  double step_size = 0.01;
  int leapfrog_steps = 20;
  int burn_in = 50;
  int samples = 10;
  int thin = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ChainDiagnostics {
  double acceptance_rate = 0.0;   // post burn-in fraction of accepted steps
  double mean_energy_error = 0.0; // mean |dH| over post burn-in proposals
  double tuned_step_size = 0.0;
  int nonfinite_steps = 0;
  int retunes = 0;  // extra tuning rounds forced by a degenerate sampling phase
};

// Log-density with gradient. eval() computes both in one pass; subclasses
// only implement that.
class Target {
 public:
  virtual ~Target() = default;
  virtual int dim() const = 0;
  // Returns log density at q; when grad is non-null it receives d(log p)/dq.
  virtual double eval(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const = 0;

  double log_density(const Eigen::VectorXd& q) const { return eval(q, nullptr); }
  Eigen::VectorXd gradient(const Eigen::VectorXd& q) const {
    Eigen::VectorXd g(dim());
    eval(q, &g);
    return g;
  }
};

struct StepOutcome {
  bool accepted = false;
  double accept_prob = 0.0;
  double energy_error = 0.0;  // |dH| of the proposal
  bool nonfinite = false;
};

// One leapfrog trajectory in place; returns the log density at the final
// position (or -inf if a non-finite value was encountered).
double leapfrog(Eigen::VectorXd& q, Eigen::VectorXd& p, const Target& target,
                double step_size, int leapfrog_steps);

// Single HMC transition: fresh standard-normal momentum (identity mass),
// leapfrog proposal, Metropolis correction. On rejection the state is left
// unchanged. Deterministic given the rng state.
StepOutcome hmc_step(Eigen::VectorXd& state, const Target& target,
                     double step_size, int leapfrog_steps, Rng& rng);

// Burn-in step-size tuning toward 0.65 acceptance: multiplicative updates
// with a decaying gain, and the returned step is the geometric mean over the
// last half of burn-in rather than the endpoint, so a single late rejection
// cannot leave the chain stranded past its stability limit. Mutates the
// state by running cfg.burn_in transitions. Tuning never extends past
// burn-in, so detailed balance holds for everything sampled afterwards.
double tune_step_size(const Target& target, Eigen::VectorXd& state,
                      const HmcConfig& cfg, Rng& rng);

struct ChainResult {
  std::vector<Eigen::VectorXd> samples;
  ChainDiagnostics diagnostics;
  Eigen::VectorXd final_state;
};

// Burn-in with tuning, then keep every thin-th state until cfg.samples are
// collected. Nothing is stored during burn-in. If the sampling phase turns
// out degenerate (acceptance < 0.05), tuning is restarted from a much
// smaller step — bounded retries, fully deterministic given cfg.seed — and
// numerical_error is thrown only once those are exhausted.
ChainResult sample_chain(const Target& target, Eigen::VectorXd init,
                         const HmcConfig& cfg);

}  // namespace paddit
