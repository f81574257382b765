#pragma once

// Training engines: the importance-sampled Monte Carlo objective (MCO) with
// Sobol prior particles, the variational ELBO with KL warm-up, Adam, and the
// DHO optimisation schedule.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "mtds/model.hpp"
#include "mtds/random.hpp"

namespace mtds::learn {

// Sequences that all share one input sequence U (the condition that lets one
// particle rollout be scored against every task).
struct SharedInputData {
  MatrixXd U;                  // T x m
  std::vector<MatrixXd> Y;     // each T x p
  int size() const { return static_cast<int>(Y.size()); }
};

// ---- Adam -------------------------------------------------------------------

struct AdamState {
  VectorXd m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState zeros(Eigen::Index n) {
    return {VectorXd::Zero(n), VectorXd::Zero(n), 0, 0.9, 0.999, 1e-8};
  }
};

/// One bias-corrected Adam step *descending* `grad`. beta1 overrides the
/// stored value (schedule rows change it). lr_scale, if given, multiplies the
/// learning rate per coordinate.
void adam_step(AdamState& state, VectorXd& params, const VectorXd& grad, double lr,
               double beta1, const VectorXd* lr_scale = nullptr);

// ---- schedule ---------------------------------------------------------------

struct ScheduleRow {
  int epoch = 1;                    // first epoch (1-based) the row applies to
  double lr = 8e-4;
  double beta1 = 0.9;
  double log_s_prior_mean = -1.0;
  int M = 1000;
};

/// The four-row DHO schedule (epochs 1, 200, 600, 1000).
std::vector<ScheduleRow> dho_schedule();

/// Last row whose epoch <= epoch. Rows must be sorted by epoch.
const ScheduleRow& active_row(const std::vector<ScheduleRow>& schedule, int epoch);

struct LogSPrior {
  double value = 0.0;
  double grad = 0.0;  // d value / d log_s
};

/// log N(log_s; mean, sd^2) and its derivative.
LogSPrior log_s_prior_penalty(double log_s, double mean, double sd = 0.05);

// ---- MCO --------------------------------------------------------------------

struct McoConfig {
  int M_rsmp = 5;
  int epochs = 1400;
  int batch_size = 0;  // 0: whole dataset
  std::vector<ScheduleRow> schedule = dho_schedule();
  double log_s_prior_sd = 0.05;
  bool use_log_s_prior = true;
  double transition_lr_factor = 0.1;
  int elbo_warmup_epochs = 10000;  // ELBO epochs run from the random init before MCO
  bool shift_particles = true;  // false: the same Sobol points every step
  std::uint64_t seed = 0;
};

/// Column-wise softmax of an M x N log-likelihood matrix. Throws
/// DegenerateTaskError if a column is entirely -inf.
MatrixXd construct_weights(const MatrixXd& loglik);

/// Particle log-likelihood matrix: entry (m, i) = log p(Y_i | h_phi(z_m)).
/// One rollout per particle, shared across tasks. Z is M x k.
MatrixXd particle_logliks(const HyperNetParams& phi, const ModelDims& dims,
                          const SharedInputData& data, const MatrixXd& Z);

struct McoEpochResult {
  HyperNetParams grad;      // ascent direction for sum_i L_MCO(Y_i), batch only
  VectorXd objective;       // per-task log-mean-exp estimates at this draw
  MatrixXd weights;         // M x |batch|
};

/// One resampled gradient estimate over the tasks in `batch` (indices into
/// data). Particles are Sobol points (randomly shifted from rng) mapped to
/// N(0, I); each task resamples M_rsmp particles from its weight column with
/// replacement and averages their log-likelihood gradients.
McoEpochResult mco_epoch(const HyperNetParams& phi, const ModelDims& dims,
                         const SharedInputData& data, const std::vector<int>& batch, int M,
                         int M_rsmp, Rng& rng, bool shift = true);

/// As mco_epoch but with caller-supplied particles and log-likelihoods for
/// the resampling step; used to test the estimator on hand-built weights.
HyperNetParams mco_gradient_from_particles(const HyperNetParams& phi, const ModelDims& dims,
                                           const SharedInputData& data,
                                           const std::vector<int>& batch, const MatrixXd& Z,
                                           const MatrixXd& weights, int M_rsmp, Rng& rng);

/// Per-task L_MCO estimates with M particles (shifted Sobol from rng; pass a
/// null rng for the unshifted sequence).
VectorXd mco_objective_estimate(const HyperNetParams& phi, const ModelDims& dims,
                                const SharedInputData& data, int M, Rng* rng = nullptr);

// ---- ELBO -------------------------------------------------------------------

/// KL(N(mu, diag(sd^2)) || N(0, I)).
double kl_diag_gaussian(const VectorXd& mu, const VectorXd& sd);

struct ElboConfig {
  int epochs = 1000;
  int batch_size = 0;
  int kl_free_epochs = 100;
  double init_posterior_sd = 1e-3;
  double lr = 1e-3;              // hypernetwork (multi-task) parameters
  double lr_variational = 1e-2;  // per-sequence posterior parameters
  double transition_lr_factor = 0.1;
  bool use_log_s_prior = false;
  double log_s_prior_mean = -1.5;
  double log_s_prior_sd = 0.05;
  std::uint64_t seed = 0;
};

// Free-form (non-amortised) diagonal Gaussian posterior per sequence.
// sd = softplus(sd_raw).
struct VariationalParams {
  MatrixXd mu;      // N x k
  MatrixXd sd_raw;  // N x k

  static VariationalParams init(int N, int k, double sd);
  VectorXd sd(int i) const;
};

double softplus(double x);
double softplus_inverse(double y);

struct ElboState {
  HyperNetParams phi;
  VariationalParams q;
  AdamState adam_phi;
  AdamState adam_q;
  int epoch = 0;  // completed epochs
};

struct ElboStepResult {
  double elbo = 0.0;  // single-sample estimate summed over the batch
  double grad_norm = 0.0;
};

/// Gradient of the single-sample ELBO for sequence i with noise eps frozen:
/// returns the value and fills d/dphi (accumulated), d/dmu_i and d/dsd_raw_i.
/// include_kl = false drops the KL term and the sd gradient (warm-up).
double elbo_sample_gradient(const HyperNetParams& phi, const ModelDims& dims, const MatrixXd& U,
                            const MatrixXd& Y, const VectorXd& mu, const VectorXd& sd_raw,
                            const VectorXd& eps, bool include_kl, HyperNetParams& dphi,
                            VectorXd& dmu, VectorXd& dsd_raw);

/// One reparameterised ascent step on the batch.
ElboStepResult elbo_step(ElboState& state, const ModelDims& dims, const SharedInputData& data,
                         const std::vector<int>& batch, const ElboConfig& config, Rng& rng);

/// Monte Carlo ELBO per sequence with n_samples draws from q.
VectorXd elbo_estimate(const HyperNetParams& phi, const ModelDims& dims,
                       const SharedInputData& data, const VariationalParams& q, int n_samples,
                       Rng& rng);

// ---- drivers ----------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double log_s = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Random initial hypernetwork whose output at any z is a stable, lightly
/// damped oscillator.
HyperNetParams init_hypernet(const ModelDims& dims, Rng& rng);

/// Per-coordinate learning-rate multipliers for the flattened phi: the
/// transition block (its out_weights columns and out_bias entries) gets
/// `factor`, everything else 1.
VectorXd transition_lr_scale(const ModelDims& dims, double factor);

struct McoTrainState {
  HyperNetParams phi;
  AdamState adam;
  int epoch = 0;  // completed epochs
};

/// Runs epochs (state.epoch, config.epochs]. Resumable: passing a state with
/// epoch > 0 continues from there.
void train_mco(McoTrainState& state, const McoConfig& config, const ModelDims& dims,
               const SharedInputData& data, const EpochCallback& on_epoch = {});

void train_elbo(ElboState& state, const ElboConfig& config, const ModelDims& dims,
                const SharedInputData& data, const EpochCallback& on_epoch = {});

/// Fresh MCO state: init_hypernet from rng, then config.elbo_warmup_epochs of
/// ELBO training (default ElboConfig otherwise) on data. The variational
/// parameters are discarded.
McoTrainState init_mco_state(const McoConfig& config, const ModelDims& dims,
                             const SharedInputData& data, Rng& rng);

}  // namespace mtds::learn
