#include "mtds/infer.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "mtds/errors.hpp"
#include "mtds/parallel.hpp"
#include "mtds/stats.hpp"

namespace mtds::infer {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Cholesky with escalating diagonal jitter for (near-)singular inputs.
// Returns the jitter that was added.
double spd_factor(MatrixXd& cov, MatrixXd& chol) {
  cov = 0.5 * (cov + cov.transpose());
  const Eigen::Index d = cov.rows();
  double jitter = 0.0;
  const double scale = std::max(cov.trace() / static_cast<double>(d), 1e-300);
  for (int attempt = 0; attempt < 40; ++attempt) {
    Eigen::LLT<MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0) {
      chol = llt.matrixL();
      return jitter;
    }
    const double add = jitter == 0.0 ? 1e-12 * scale : jitter * 9.0;
    cov.diagonal().array() += add;
    jitter += add;
  }
  throw NumericalError("covariance is not positive definite");
}

VectorXd softmax(const VectorXd& logw) {
  const double mx = logw.maxCoeff();
  VectorXd w = (logw.array() - mx).exp();
  return w / w.sum();
}

// Per-component log densities, M x J.
MatrixXd component_logpdfs(const MoGPosterior& q, const MatrixXd& X) {
  const Eigen::Index d = X.cols();
  MatrixXd out(X.rows(), q.components());
  for (int j = 0; j < q.components(); ++j) {
    MatrixXd centered = (X.rowwise() - q.mu[j].transpose()).transpose();
    q.chol[j].triangularView<Eigen::Lower>().solveInPlace(centered);
    const double logdet = q.chol[j].diagonal().array().log().sum();
    const double base = -0.5 * static_cast<double>(d) * stats::kLog2Pi - logdet +
                        (q.alpha[j] > 0.0 ? std::log(q.alpha[j]) : kNegInf);
    out.col(j) = (base - 0.5 * centered.colwise().squaredNorm().array()).matrix().transpose();
  }
  return out;
}

void weighted_moments(const MatrixXd& X, const VectorXd& w, VectorXd& mean, MatrixXd& cov) {
  const double total = w.sum();
  mean = (X.transpose() * w) / total;
  const MatrixXd c = X.rowwise() - mean.transpose();
  cov = c.transpose() * w.asDiagonal() * c / total;
}

// A component covariance that has collapsed relative to the data spread.
bool degenerate(const MatrixXd& cov, const MatrixXd& global) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (cov + cov.transpose()), Eigen::EigenvaluesOnly);
  return !(es.eigenvalues().minCoeff() > 1e-10 * std::max(global.trace(), 1e-300));
}

MoGPosterior kmeans_init(const MatrixXd& X, const VectorXd& w, int J, int iters, Rng& rng) {
  const Eigen::Index M = X.rows();
  std::vector<VectorXd> centers;
  {
    const VectorXd p = w / w.sum();
    centers.push_back(X.row(static_cast<Eigen::Index>(rng.categorical({p.data(), static_cast<std::size_t>(M)}))).transpose());
  }
  VectorXd d2(M);
  while (static_cast<int>(centers.size()) < J) {
    for (Eigen::Index m = 0; m < M; ++m) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, (X.row(m).transpose() - c).squaredNorm());
      d2[m] = w[m] * best;
    }
    Eigen::Index pick;
    if (d2.sum() > 0.0) {
      const VectorXd p = d2 / d2.sum();
      pick = static_cast<Eigen::Index>(rng.categorical({p.data(), static_cast<std::size_t>(M)}));
    } else {
      w.maxCoeff(&pick);
    }
    centers.push_back(X.row(pick).transpose());
  }

  std::vector<int> label(M, 0);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    for (Eigen::Index m = 0; m < M; ++m) {
      int best_j = 0;
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < J; ++j) {
        const double dist = (X.row(m).transpose() - centers[j]).squaredNorm();
        if (dist < best) best = dist, best_j = j;
      }
      changed |= label[m] != best_j;
      label[m] = best_j;
    }
    for (int j = 0; j < J; ++j) {
      VectorXd sum = VectorXd::Zero(X.cols());
      double mass = 0.0;
      for (Eigen::Index m = 0; m < M; ++m)
        if (label[m] == j) sum += w[m] * X.row(m).transpose(), mass += w[m];
      if (mass > 0.0) centers[j] = sum / mass;
    }
    if (!changed && it > 0) break;
  }

  MoGPosterior q;
  q.alpha = VectorXd::Zero(J);
  VectorXd gmean;
  MatrixXd gcov;
  weighted_moments(X, w, gmean, gcov);
  for (int j = 0; j < J; ++j) {
    VectorXd wj = VectorXd::Zero(M);
    for (Eigen::Index m = 0; m < M; ++m)
      if (label[m] == j) wj[m] = w[m];
    const double mass = wj.sum();
    VectorXd mean;
    MatrixXd cov;
    if (mass > 0.0) weighted_moments(X, wj, mean, cov);
    else mean = centers[j];
    if (mass <= 0.0 || degenerate(cov, gcov)) cov = gcov;
    q.alpha[j] = mass;
    q.mu.push_back(mean);
    q.cov.push_back(cov);
  }
  q.alpha /= q.alpha.sum();
  q.chol.resize(J);
  for (int j = 0; j < J; ++j) spd_factor(q.cov[j], q.chol[j]);
  return q;
}

}  // namespace

// ---- MoGPosterior -----------------------------------------------------------

MoGPosterior MoGPosterior::gaussian(const VectorXd& mean, const MatrixXd& covariance) {
  MoGPosterior q;
  q.alpha = VectorXd::Ones(1);
  q.mu = {mean};
  q.cov = {covariance};
  q.refresh();
  return q;
}

MoGPosterior MoGPosterior::prior(int k, double log_s_mean, double log_s_sd) {
  VectorXd mean = VectorXd::Zero(k + 1);
  mean[k] = log_s_mean;
  MatrixXd cov = MatrixXd::Identity(k + 1, k + 1);
  cov(k, k) = log_s_sd * log_s_sd;
  return gaussian(mean, cov);
}

void MoGPosterior::refresh() {
  require_dims(static_cast<Eigen::Index>(mu.size()) == alpha.size() && cov.size() == mu.size() &&
                   !mu.empty(),
               "MoGPosterior: component count mismatch");
  if ((alpha.array() < 0.0).any() || std::abs(alpha.sum() - 1.0) > 1e-9)
    throw DomainError("MoGPosterior: weights must lie on the simplex");
  chol.resize(mu.size());
  for (std::size_t j = 0; j < mu.size(); ++j) {
    require_dims(mu[j].size() == dim() && cov[j].rows() == dim() && cov[j].cols() == dim(),
                 "MoGPosterior: component shape mismatch");
    Eigen::LLT<MatrixXd> llt(cov[j]);
    if (llt.info() != Eigen::Success) throw NumericalError("MoGPosterior: covariance is not SPD");
    chol[j] = llt.matrixL();
  }
}

VectorXd MoGPosterior::logpdf_rows(const MatrixXd& X) const {
  require_dims(X.cols() == dim(), "MoGPosterior::logpdf_rows: dimension mismatch");
  const MatrixXd L = component_logpdfs(*this, X);
  VectorXd out(X.rows());
  for (Eigen::Index m = 0; m < X.rows(); ++m) out[m] = stats::log_sum_exp(L.row(m).transpose());
  return out;
}

double MoGPosterior::logpdf(const VectorXd& x) const { return logpdf_rows(x.transpose())[0]; }

MatrixXd MoGPosterior::sample(int M, Rng& rng) const {
  MatrixXd X(M, dim());
  VectorXd eps(dim());
  for (int m = 0; m < M; ++m) {
    const std::size_t j = components() == 1 ? 0 : rng.categorical({alpha.data(), static_cast<std::size_t>(alpha.size())});
    for (int i = 0; i < dim(); ++i) eps[i] = rng.normal();
    X.row(m) = (mu[j] + chol[j] * eps).transpose();
  }
  return X;
}

VectorXd MoGPosterior::mean() const {
  VectorXd m = VectorXd::Zero(dim());
  for (int j = 0; j < components(); ++j) m += alpha[j] * mu[j];
  return m;
}

MatrixXd MoGPosterior::covariance() const {
  const VectorXd m = mean();
  MatrixXd c = MatrixXd::Zero(dim(), dim());
  for (int j = 0; j < components(); ++j) {
    const VectorXd d = mu[j] - m;
    c += alpha[j] * (cov[j] + d * d.transpose());
  }
  return c;
}

MoGPosterior MoGPosterior::scaled(double factor) const {
  if (!(factor > 0.0)) throw DomainError("MoGPosterior::scaled: factor must be positive");
  MoGPosterior q = *this;
  const double r = std::sqrt(factor);
  for (int j = 0; j < components(); ++j) {
    q.cov[j] *= factor;
    q.chol[j] *= r;
  }
  return q;
}

void AdaisHyper::validate() const {
  if (J < 1 || N_AIS < 1 || M < 1 || M_0 < 1 || M_final < 1 || n_retry < 0 || EM_iters < 1 ||
      kmeans_iters < 1 || !(tilt > 0.0) || !(M_ess > 0.0))
    throw DomainError("AdaisHyper: counts must be positive");
  if (M_ess > M) throw DomainError("AdaisHyper: M_ess must not exceed M");
}

// ---- ESS and EM -------------------------------------------------------------

double ess(const VectorXd& weights) {
  if (weights.size() == 0 || (weights.array() < 0.0).any() ||
      std::abs(weights.sum() - 1.0) > 1e-9)
    throw DomainError("ess: weights must be normalized");
  return 1.0 / weights.squaredNorm();
}

double weighted_loglik(const MoGPosterior& q, const MatrixXd& X, const VectorXd& w) {
  return w.dot(q.logpdf_rows(X));
}

MoGPosterior weighted_em(const MatrixXd& X, const VectorXd& w_in, int J, const MoGPosterior* init,
                         int iters, int kmeans_iters, Rng& rng, EmTrace* trace) {
  const Eigen::Index M = X.rows();
  require_dims(w_in.size() == M, "weighted_em: one weight per sample");
  require_dims(M >= J && J >= 1, "weighted_em: need at least J samples");
  if ((w_in.array() < 0.0).any() || std::abs(w_in.sum() - 1.0) > 1e-9)
    throw DomainError("weighted_em: weights must be normalized");
  const VectorXd w = w_in / w_in.sum();

  MoGPosterior q;
  if (init != nullptr && init->components() == J && init->dim() == X.cols()) {
    q = *init;
  } else {
    q = kmeans_init(X, w, J, kmeans_iters, rng);
  }
  EmTrace local;
  EmTrace& tr = trace != nullptr ? *trace : local;
  tr.loglik.assign(1, weighted_loglik(q, X, w));

  Eigen::Index top;
  w.maxCoeff(&top);
  VectorXd gmean;
  MatrixXd gcov;
  weighted_moments(X, w, gmean, gcov);
  for (int it = 0; it < iters; ++it) {
    const MatrixXd L = component_logpdfs(q, X);
    MatrixXd R(M, J);
    for (Eigen::Index m = 0; m < M; ++m) {
      const double lse = stats::log_sum_exp(L.row(m).transpose());
      if (std::isfinite(lse))
        R.row(m) = (L.row(m).array() - lse).exp().matrix();
      else
        R.row(m).setConstant(1.0 / J);
    }
    bool irregular = false;
    MoGPosterior next;
    next.alpha.resize(J);
    next.chol.resize(J);
    for (int j = 0; j < J; ++j) {
      const VectorXd wr = w.cwiseProduct(R.col(j));
      const double mass = wr.sum();
      VectorXd mean;
      MatrixXd cov;
      if (mass > 1e-300) {
        weighted_moments(X, wr, mean, cov);
        next.alpha[j] = mass;
      }
      if (mass <= 1e-300 || degenerate(cov, gcov)) {
        // Empty or collapsed component: restart it at the heaviest sample.
        irregular = true;
        ++tr.reseeded;
        mean = X.row(top).transpose();
        cov = gcov;
        next.alpha[j] = std::max(mass, 1.0 / static_cast<double>(M));
      }
      if (spd_factor(cov, next.chol[j]) > 0.0) irregular = true;
      next.mu.push_back(mean);
      next.cov.push_back(cov);
    }
    next.alpha /= next.alpha.sum();
    const double ll = weighted_loglik(next, X, w);
    if (irregular) tr.irregular.push_back(it + 1);
    if (!irregular && ll < tr.loglik.back() - 1e-9 * (1.0 + std::abs(tr.loglik.back())))
      throw NumericalError("weighted_em: log-likelihood decreased");
    tr.loglik.push_back(ll);
    q = std::move(next);
  }
  return q;
}

// ---- AdaIS ------------------------------------------------------------------

AdaisResult adais_refine(const LogDensity& target, const MoGPosterior& q_init,
                         const AdaisHyper& hyper, Rng& rng, bool q_init_is_prior) {
  hyper.validate();
  AdaisResult res;
  res.max_loglik = kNegInf;
  double best_ess = -1.0;
  MoGPosterior best_q, last_fit;

  for (int attempt = 0; attempt <= hyper.n_retry && !res.converged; ++attempt) {
    if (attempt > 0) ++res.retries;
    MoGPosterior q_prev = q_init;
    for (int n = 1; n <= hyper.N_AIS; ++n) {
      const bool raw_prior = n == 1 && q_init_is_prior;
      const MoGPosterior proposal = raw_prior ? q_prev : q_prev.scaled(hyper.tilt);
      const MatrixXd X = proposal.sample(raw_prior ? hyper.M_0 : hyper.M, rng);
      const VectorXd logp = target(X);
      res.max_loglik = std::max(res.max_loglik, logp.maxCoeff());
      const VectorXd logw = logp - proposal.logpdf_rows(X);
      if (!(logw.maxCoeff() > kNegInf) || !std::isfinite(logw.maxCoeff())) {
        res.ess_trace.push_back(0.0);
        continue;
      }
      const VectorXd w = softmax(logw);
      const double e = ess(w);
      res.ess_trace.push_back(e);
      const MoGPosterior fit = weighted_em(X, w, hyper.J, &q_prev, hyper.EM_iters, hyper.kmeans_iters, rng);
      if (e > best_ess) best_ess = e, best_q = fit;
      q_prev = fit;
      last_fit = fit;
      if (e > hyper.M_ess) {
        res.converged = true;
        break;
      }
    }
  }
  if (best_ess < 0.0) {
    std::ostringstream msg;
    msg << "adais_refine: every importance weight is zero (max loglik " << res.max_loglik << ", ESS trace";
    for (double e : res.ess_trace) msg << ' ' << e;
    msg << ')';
    throw NumericalError(msg.str());
  }

  const MoGPosterior fitted = res.converged ? last_fit : best_q;
  const MoGPosterior proposal = fitted.scaled(hyper.tilt);
  res.samples = proposal.sample(hyper.M_final, rng);
  const VectorXd logw = target(res.samples) - proposal.logpdf_rows(res.samples);
  if (!std::isfinite(logw.maxCoeff())) {
    res.q = fitted;
    res.weights = VectorXd::Constant(hyper.M_final, 1.0 / hyper.M_final);
    res.final_ess = 0.0;
    return res;
  }
  res.weights = softmax(logw);
  res.final_ess = ess(res.weights);
  res.q = weighted_em(res.samples, res.weights, hyper.J, &fitted, hyper.EM_iters, hyper.kmeans_iters, rng);
  return res;
}

// ---- filtering --------------------------------------------------------------

VectorXd prefix_log_joint(const HyperNetParams& phi, const ModelDims& dims, const MatrixXd& U,
                          const MatrixXd& Y, const MatrixXd& X, const InferencePrior& prior) {
  require_dims(X.cols() == dims.k + 1, "prefix_log_joint: rows must be (z, log s)");
  require_dims(Y.rows() >= 1 && U.rows() >= Y.rows(), "prefix_log_joint: need 1 <= t <= T");
  const MatrixXd Ut = U.topRows(Y.rows());
  VectorXd out(X.rows());
  parallel_for(static_cast<std::size_t>(X.rows()), [&](std::size_t r) {
    const auto i = static_cast<Eigen::Index>(r);
    const VectorXd z = X.row(i).head(dims.k).transpose();
    const double log_s = X(i, dims.k);
    const RolloutResult fwd = rollout(realize(hypernet_forward(phi, z), log_s, dims), Ut, dims.base);
    double v = gaussian_loglik(Y, fwd.predictions, std::exp(log_s));
    v += -0.5 * z.squaredNorm() - 0.5 * dims.k * stats::kLog2Pi;
    v += stats::normal_logpdf(log_s, prior.log_s_mean, prior.log_s_sd);
    out[i] = std::isnan(v) ? kNegInf : v;
  });
  return out;
}

std::vector<FilterStep> filter_posteriors(const MatrixXd& Y, const MatrixXd& U,
                                          const HyperNetParams& phi, const ModelDims& dims,
                                          int tau, const AdaisHyper& hyper, Rng& rng, int t_max,
                                          const InferencePrior& prior) {
  if (t_max < 0) t_max = static_cast<int>(Y.rows());
  require_dims(tau >= 1 && t_max >= tau && t_max <= Y.rows(), "filter_posteriors: need tau <= t_max <= T");
  std::vector<FilterStep> steps;
  MoGPosterior q = MoGPosterior::prior(dims.k, prior.log_s_mean, prior.log_s_sd);
  bool is_prior = true;
  for (int t = tau; t <= t_max; t += tau) {
    const MatrixXd Yt = Y.topRows(t);
    const LogDensity target = [&](const MatrixXd& X) {
      return prefix_log_joint(phi, dims, U, Yt, X, prior);
    };
    FilterStep step;
    step.t = t;
    step.result = adais_refine(target, q, hyper, rng, is_prior);
    q = step.result.q;
    is_prior = false;
    steps.push_back(std::move(step));
  }
  return steps;
}

// ---- prediction -------------------------------------------------------------

Predictive posterior_predictive(const MoGPosterior& q, const HyperNetParams& phi,
                                const ModelDims& dims, const MatrixXd& U, int start, int horizon,
                                int S, Rng& rng) {
  require_dims(S >= 1 && horizon >= 1 && start >= 0 && start + horizon <= U.rows(),
               "posterior_predictive: bad horizon");
  require_dims(q.dim() == dims.k + 1, "posterior_predictive: posterior must be over (z, log s)");
  const MatrixXd X = q.sample(S, rng);
  Predictive pred;
  pred.start = start;
  pred.yhat.resize(S);
  pred.s.resize(S);
  const MatrixXd Ut = U.topRows(start + horizon);
  parallel_for(static_cast<std::size_t>(S), [&](std::size_t r) {
    const auto i = static_cast<Eigen::Index>(r);
    const double log_s = X(i, dims.k);
    const RolloutResult fwd =
        rollout(realize(hypernet_forward(phi, X.row(i).head(dims.k).transpose()), log_s, dims), Ut, dims.base);
    pred.yhat[r] = fwd.predictions.bottomRows(horizon);
    pred.s[i] = std::exp(log_s);
  });

  const int p = dims.p;
  pred.mean = MatrixXd::Zero(horizon, p);
  for (const auto& y : pred.yhat) pred.mean += y;
  pred.mean /= S;
  MatrixXd second = MatrixXd::Zero(horizon, p);
  for (int i = 0; i < S; ++i)
    second.array() += (pred.yhat[i] - pred.mean).array().square() + pred.s[i] * pred.s[i];
  pred.sd = (second / S).cwiseSqrt();

  pred.lo95.resize(horizon, p);
  pred.hi95.resize(horizon, p);
  std::vector<double> draws(S);
  MatrixXd noise(S, horizon * p);
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = rng.normal();
  for (int t = 0; t < horizon; ++t) {
    for (int c = 0; c < p; ++c) {
      for (int i = 0; i < S; ++i) draws[i] = pred.yhat[i](t, c) + pred.s[i] * noise(i, t * p + c);
      std::sort(draws.begin(), draws.end());
      auto quantile = [&](double prob) {
        const double pos = prob * (S - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min<std::size_t>(lo + 1, S - 1);
        return draws[lo] + (pos - lo) * (draws[hi] - draws[lo]);
      };
      pred.lo95(t, c) = quantile(0.025);
      pred.hi95(t, c) = quantile(0.975);
    }
  }
  return pred;
}

Metrics metrics_rmse_nll(const MatrixXd& truth, const Predictive& pred) {
  require_dims(truth.rows() == pred.mean.rows() && truth.cols() == pred.mean.cols() && truth.rows() >= 1,
               "metrics_rmse_nll: truth must match the predictive horizon");
  Metrics out;
  out.rmse = std::sqrt((truth - pred.mean).array().square().mean());
  const auto S = static_cast<Eigen::Index>(pred.yhat.size());
  double total = 0.0;
  VectorXd terms(S);
  for (Eigen::Index t = 0; t < truth.rows(); ++t) {
    for (Eigen::Index i = 0; i < S; ++i) {
      double v = 0.0;
      for (Eigen::Index c = 0; c < truth.cols(); ++c)
        v += stats::normal_logpdf(truth(t, c), pred.yhat[i](t, c), pred.s[i]);
      terms[i] = v;
    }
    total += stats::log_mean_exp(terms);
  }
  out.nll = -total / static_cast<double>(truth.rows());
  return out;
}

std::string posterior_record(int t, const AdaisResult& result) {
  using nlohmann::json;
  json rec;
  rec["t"] = t;
  const MoGPosterior& q = result.q;
  rec["alpha"] = std::vector<double>(q.alpha.data(), q.alpha.data() + q.alpha.size());
  json mu = json::array(), chol = json::array();
  for (int j = 0; j < q.components(); ++j) {
    mu.push_back(std::vector<double>(q.mu[j].data(), q.mu[j].data() + q.mu[j].size()));
    json rows = json::array();
    for (Eigen::Index r = 0; r < q.chol[j].rows(); ++r) {
      std::vector<double> row(q.chol[j].cols());
      for (Eigen::Index c = 0; c < q.chol[j].cols(); ++c) row[c] = q.chol[j](r, c);
      rows.push_back(row);
    }
    chol.push_back(rows);
  }
  rec["mu"] = mu;
  rec["cov_cholesky"] = chol;
  rec["ess_trace"] = result.ess_trace;
  rec["retries"] = result.retries;
  return rec.dump();
}

}  // namespace mtds::infer
