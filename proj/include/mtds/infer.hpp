#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "mtds/model.hpp"
#include "mtds/random.hpp"

namespace mtds::infer {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Gaussian mixture over (z, log s). Covariances are full; the Cholesky
/// factors are kept alongside and refreshed by `refresh()`.
struct MoGPosterior {
  VectorXd alpha;
  std::vector<VectorXd> mu;
  std::vector<MatrixXd> cov;
  std::vector<MatrixXd> chol;  // lower factors of cov

  int components() const { return static_cast<int>(mu.size()); }
  int dim() const { return mu.empty() ? 0 : static_cast<int>(mu.front().size()); }

  static MoGPosterior gaussian(const VectorXd& mean, const MatrixXd& covariance);
  /// N(0, I_k) x N(log_s_mean, log_s_sd^2).
  static MoGPosterior prior(int k, double log_s_mean = -2.0, double log_s_sd = 0.1);

  /// Recomputes Cholesky factors. Throws NumericalError for a non-SPD cov and
  /// DomainError for weights off the simplex.
  void refresh();

  double logpdf(const VectorXd& x) const;
  VectorXd logpdf_rows(const MatrixXd& X) const;
  MatrixXd sample(int M, Rng& rng) const;  // M x dim
  VectorXd mean() const;
  MatrixXd covariance() const;

  /// Copy with every covariance multiplied by `factor`.
  MoGPosterior scaled(double factor) const;
};

struct AdaisHyper {
  int J = 3;
  int N_AIS = 7;
  int M = 1000;
  int M_0 = 3000;
  int M_final = 3000;
  double tilt = 2.0;
  double M_ess = 100;
  int n_retry = 2;
  int EM_iters = 3;
  int kmeans_iters = 100;

  void validate() const;
};

/// 1 / sum w^2 for normalized weights; throws DomainError otherwise.
double ess(const VectorXd& weights);

/// Weighted log-likelihood sum_m w_m log q(x_m).
double weighted_loglik(const MoGPosterior& q, const MatrixXd& X, const VectorXd& w);

struct EmTrace {
  std::vector<double> loglik;  // after initialization, then after each iteration
  int reseeded = 0;
  std::vector<int> irregular;  // iterations (1-based) that reseeded or needed jitter
};

/// Weighted EM for a J-component mixture on the rows of X. With init null the
/// mixture is started from weighted k-means++ (at most kmeans_iters Lloyd
/// steps); otherwise it is warm-started from *init. Throws NumericalError if
/// the weighted log-likelihood decreases in an iteration without reseeding.
MoGPosterior weighted_em(const MatrixXd& X, const VectorXd& w, int J, const MoGPosterior* init,
                         int iters, int kmeans_iters, Rng& rng, EmTrace* trace = nullptr);

/// Unnormalized log density evaluated on each row of X.
using LogDensity = std::function<VectorXd(const MatrixXd& X)>;

struct AdaisResult {
  MoGPosterior q;
  VectorXd weights;              // normalized, over `samples`
  MatrixXd samples;              // M_final x dim
  std::vector<double> ess_trace; // one entry per inner iteration, all attempts
  double final_ess = 0.0;
  int retries = 0;
  bool converged = false;
  double max_loglik = 0.0;
};

/// Iterated adaptive importance sampling. q_init_is_prior selects M_0 for the
/// first round. Each round's proposal is the previous fit with covariances
/// scaled by hyper.tilt (the prior is used as-is). Stops once the ESS exceeds
/// M_ess; otherwise restarts from q_init up to n_retry times and keeps the
/// best round. The returned mixture is refitted on the M_final-sample round.
AdaisResult adais_refine(const LogDensity& target, const MoGPosterior& q_init,
                         const AdaisHyper& hyper, Rng& rng, bool q_init_is_prior = false);

struct InferencePrior {
  double log_s_mean = -2.0;
  double log_s_sd = 0.1;
};

/// log p(y_{1:t} | u_{1:t}, h_phi(z), s) + log N(z; 0, I) + log N(log s; ...)
/// for each row (z, log s) of X; t = Y.rows().
VectorXd prefix_log_joint(const HyperNetParams& phi, const ModelDims& dims, const MatrixXd& U,
                          const MatrixXd& Y, const MatrixXd& X, const InferencePrior& prior = {});

struct FilterStep {
  int t = 0;
  AdaisResult result;
};

/// Posteriors at t = tau, 2 tau, ... up to t_max (default Y.rows()). Each
/// step targets the whole prefix y_{1:t} and starts from the previous step.
std::vector<FilterStep> filter_posteriors(const MatrixXd& Y, const MatrixXd& U,
                                          const HyperNetParams& phi, const ModelDims& dims,
                                          int tau, const AdaisHyper& hyper, Rng& rng,
                                          int t_max = -1, const InferencePrior& prior = {});

struct Predictive {
  int start = 0;                 // first predicted step (0-based row of U)
  MatrixXd mean, sd;             // horizon x p
  MatrixXd lo95, hi95;           // noisy-draw quantiles, horizon x p
  std::vector<MatrixXd> yhat;    // S rollouts, each horizon x p
  VectorXd s;                    // S emission std-devs
};

/// Samples (z, log s) ~ q and rolls out U rows [0, start + horizon).
Predictive posterior_predictive(const MoGPosterior& q, const HyperNetParams& phi,
                                const ModelDims& dims, const MatrixXd& U, int start,
                                int horizon, int S, Rng& rng);

struct Metrics {
  double rmse = 0.0;
  double nll = 0.0;  // per frame
};

Metrics metrics_rmse_nll(const MatrixXd& truth, const Predictive& pred);

/// {t, alpha, mu, cov_cholesky, ess_trace, retries} as one JSON line.
std::string posterior_record(int t, const AdaisResult& result);

}  // namespace mtds::infer
