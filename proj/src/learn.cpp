#include "mtds/learn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mtds/errors.hpp"
#include "mtds/parallel.hpp"
#include "mtds/paramspace.hpp"
#include "mtds/sobol.hpp"
#include "mtds/stats.hpp"

namespace mtds::learn {

// ---- Adam -------------------------------------------------------------------

void adam_step(AdamState& state, VectorXd& params, const VectorXd& grad, double lr,
               double beta1, const VectorXd* lr_scale) {
  require_dims(grad.size() == params.size() && state.m.size() == params.size() &&
                   state.v.size() == params.size(),
               "adam_step: shape mismatch");
  require_dims(lr_scale == nullptr || lr_scale->size() == params.size(),
               "adam_step: lr_scale shape");
  state.beta1 = beta1;
  ++state.step;
  state.m = beta1 * state.m + (1.0 - beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  Eigen::ArrayXd update = lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
  if (lr_scale != nullptr) update *= lr_scale->array();
  params.array() -= update;
}

// ---- schedule ---------------------------------------------------------------

std::vector<ScheduleRow> dho_schedule() {
  return {{1, 8e-4, 0.9, -1.0, 1000},
          {200, 8e-4, 0.9, -1.3, 1000},
          {600, 4e-4, 0.9, -1.5, 2000},
          {1000, 2e-4, 0.8, -1.5, 4000}};
}

const ScheduleRow& active_row(const std::vector<ScheduleRow>& schedule, int epoch) {
  require_dims(!schedule.empty(), "active_row: empty schedule");
  const ScheduleRow* row = &schedule.front();
  for (const auto& r : schedule) {
    if (r.epoch <= epoch) row = &r;
  }
  return *row;
}

LogSPrior log_s_prior_penalty(double log_s, double mean, double sd) {
  if (!(sd > 0.0)) throw DomainError("log_s_prior_penalty: sd must be positive");
  return {stats::normal_logpdf(log_s, mean, sd), -(log_s - mean) / (sd * sd)};
}

// ---- MCO --------------------------------------------------------------------

MatrixXd construct_weights(const MatrixXd& loglik) {
  MatrixXd W(loglik.rows(), loglik.cols());
  for (Eigen::Index i = 0; i < loglik.cols(); ++i) {
    const double mx = loglik.col(i).maxCoeff();
    if (!(mx > -std::numeric_limits<double>::infinity()) || std::isnan(mx))
      throw DegenerateTaskError("construct_weights: every particle has zero likelihood for task " +
                                std::to_string(i));
    W.col(i) = (loglik.col(i).array() - mx).exp();
    W.col(i) /= W.col(i).sum();
  }
  return W;
}

namespace {

struct ParticleForward {
  VectorXd raw;
  LdsRealization sys;
  RolloutResult fwd;
};

ParticleForward forward_particle(const HyperNetParams& phi, const ModelDims& dims,
                                 const MatrixXd& U, const VectorXd& z) {
  ParticleForward p;
  p.raw = hypernet_forward(phi, z);
  p.sys = realize(p.raw, phi.log_s, dims);
  p.fwd = rollout(p.sys, U, dims.base);
  return p;
}

// Resamples M_rsmp particles per task and backpropagates the averaged
// log-likelihood gradients. Tasks that pick the same particle share one
// backward pass (the upstream gradient is linear in the residuals).
HyperNetParams resampled_gradient(const HyperNetParams& phi, const ModelDims& dims,
                                  const SharedInputData& data, const std::vector<int>& batch,
                                  const MatrixXd& Z, const MatrixXd& W, int M_rsmp, Rng& rng,
                                  const std::vector<ParticleForward>* cache) {
  require_dims(M_rsmp >= 1, "mco: M_rsmp must be >= 1");
  const Eigen::Index M = Z.rows();
  std::vector<std::vector<std::pair<int, double>>> picks(M);  // particle -> (task, weight)
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const VectorXd col = W.col(static_cast<Eigen::Index>(b));
    for (int r = 0; r < M_rsmp; ++r) {
      const std::size_t m = rng.categorical({col.data(), static_cast<std::size_t>(col.size())});
      picks[m].emplace_back(batch[b], 1.0 / M_rsmp);
    }
  }
  std::vector<Eigen::Index> active;
  for (Eigen::Index m = 0; m < M; ++m)
    if (!picks[m].empty()) active.push_back(m);

  std::vector<VectorXd> draws(active.size());
  std::vector<double> dlog_s(active.size(), 0.0);
  parallel_for(active.size(), [&](std::size_t a) {
    const Eigen::Index m = active[a];
    const ParticleForward p = cache != nullptr ? (*cache)[m]
                                               : forward_particle(phi, dims, data.U, Z.row(m).transpose());
    const double s2 = p.sys.s * p.sys.s;
    MatrixXd upstream = MatrixXd::Zero(p.fwd.predictions.rows(), p.fwd.predictions.cols());
    for (auto [task, w] : picks[m]) {
      const MatrixXd resid = data.Y[task] - p.fwd.predictions;
      upstream += (w / s2) * resid;
      dlog_s[a] += w * (-static_cast<double>(resid.size()) + resid.squaredNorm() / s2);
    }
    draws[a] = realize_backward(p.raw, dims, rollout_backward(p.sys, data.U, p.fwd, upstream, dims.base));
  });

  HyperNetParams grad = HyperNetParams::zeros(dims);
  for (std::size_t a = 0; a < active.size(); ++a) {
    hypernet_backward(phi, Z.row(active[a]).transpose(), draws[a], grad, nullptr);
    grad.log_s += dlog_s[a];
  }
  return grad;
}

VectorXd random_shift(Rng& rng, int dim) {
  VectorXd s(dim);
  for (int d = 0; d < dim; ++d) s[d] = rng.uniform();
  return s;
}

}  // namespace

MatrixXd particle_logliks(const HyperNetParams& phi, const ModelDims& dims,
                          const SharedInputData& data, const MatrixXd& Z) {
  require_dims(Z.cols() == dims.k, "particle_logliks: Z must be M x k");
  const double s = std::exp(phi.log_s);
  MatrixXd L(Z.rows(), data.size());
  parallel_for(static_cast<std::size_t>(Z.rows()), [&](std::size_t m) {
    const VectorXd raw = hypernet_forward(phi, Z.row(static_cast<Eigen::Index>(m)).transpose());
    const RolloutResult fwd = rollout(realize(raw, phi.log_s, dims), data.U, dims.base);
    for (int i = 0; i < data.size(); ++i)
      L(static_cast<Eigen::Index>(m), i) = gaussian_loglik(data.Y[i], fwd.predictions, s);
  });
  return L;
}

McoEpochResult mco_epoch(const HyperNetParams& phi, const ModelDims& dims,
                         const SharedInputData& data, const std::vector<int>& batch, int M,
                         int M_rsmp, Rng& rng, bool shift) {
  require_dims(M >= 1, "mco_epoch: M must be >= 1");
  const MatrixXd Z = shift ? qmc::sobol_standard_normal(M, dims.k, random_shift(rng, dims.k))
                           : qmc::sobol_standard_normal(M, dims.k);

  std::vector<ParticleForward> cache(static_cast<std::size_t>(M));
  parallel_for(cache.size(), [&](std::size_t m) {
    cache[m] = forward_particle(phi, dims, data.U, Z.row(static_cast<Eigen::Index>(m)).transpose());
  });
  const double s = std::exp(phi.log_s);
  MatrixXd L(M, static_cast<Eigen::Index>(batch.size()));
  for (int m = 0; m < M; ++m)
    for (std::size_t b = 0; b < batch.size(); ++b)
      L(m, static_cast<Eigen::Index>(b)) = gaussian_loglik(data.Y[batch[b]], cache[m].fwd.predictions, s);

  McoEpochResult out;
  out.weights = construct_weights(L);
  out.objective.resize(static_cast<Eigen::Index>(batch.size()));
  for (Eigen::Index b = 0; b < L.cols(); ++b) out.objective[b] = stats::log_mean_exp(L.col(b));
  out.grad = resampled_gradient(phi, dims, data, batch, Z, out.weights, M_rsmp, rng, &cache);
  return out;
}

HyperNetParams mco_gradient_from_particles(const HyperNetParams& phi, const ModelDims& dims,
                                           const SharedInputData& data,
                                           const std::vector<int>& batch, const MatrixXd& Z,
                                           const MatrixXd& weights, int M_rsmp, Rng& rng) {
  require_dims(weights.rows() == Z.rows() &&
                   weights.cols() == static_cast<Eigen::Index>(batch.size()),
               "mco_gradient_from_particles: weights must be M x |batch|");
  return resampled_gradient(phi, dims, data, batch, Z, weights, M_rsmp, rng, nullptr);
}

VectorXd mco_objective_estimate(const HyperNetParams& phi, const ModelDims& dims,
                                const SharedInputData& data, int M, Rng* rng) {
  require_dims(M >= 1, "mco_objective_estimate: M must be >= 1");
  const MatrixXd Z = rng != nullptr ? qmc::sobol_standard_normal(M, dims.k, random_shift(*rng, dims.k))
                                    : qmc::sobol_standard_normal(M, dims.k);
  const MatrixXd L = particle_logliks(phi, dims, data, Z);
  VectorXd out(L.cols());
  for (Eigen::Index i = 0; i < L.cols(); ++i) out[i] = stats::log_mean_exp(L.col(i));
  return out;
}

// ---- ELBO -------------------------------------------------------------------

double kl_diag_gaussian(const VectorXd& mu, const VectorXd& sd) {
  require_dims(mu.size() == sd.size(), "kl_diag_gaussian: shape mismatch");
  if (sd.size() > 0 && !(sd.minCoeff() > 0.0))
    throw DomainError("kl_diag_gaussian: sd must be positive");
  return 0.5 * (mu.squaredNorm() + sd.squaredNorm() - static_cast<double>(mu.size()) -
                2.0 * sd.array().log().sum());
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

VariationalParams VariationalParams::init(int N, int k, double sd) {
  return {MatrixXd::Zero(N, k), MatrixXd::Constant(N, k, softplus_inverse(sd))};
}

VectorXd VariationalParams::sd(int i) const {
  return sd_raw.row(i).transpose().unaryExpr(&softplus);
}

double elbo_sample_gradient(const HyperNetParams& phi, const ModelDims& dims, const MatrixXd& U,
                            const MatrixXd& Y, const VectorXd& mu, const VectorXd& sd_raw,
                            const VectorXd& eps, bool include_kl, HyperNetParams& dphi,
                            VectorXd& dmu, VectorXd& dsd_raw) {
  const VectorXd sd = sd_raw.unaryExpr(&softplus);
  const VectorXd z = mu + sd.cwiseProduct(eps);
  const LossGrad lg = loss_backward(phi, z, U, Y, dims);
  dphi += lg.dphi;
  dmu = lg.dz;
  const VectorXd dsoft = sd_raw.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  double value = lg.value;
  if (include_kl) {
    value -= kl_diag_gaussian(mu, sd);
    dmu -= mu;
    const VectorXd dsd = lg.dz.cwiseProduct(eps) - (sd - sd.cwiseInverse());
    dsd_raw = dsd.cwiseProduct(dsoft);
  } else {
    dsd_raw = VectorXd::Zero(sd.size());
  }
  return value;
}

ElboStepResult elbo_step(ElboState& state, const ModelDims& dims, const SharedInputData& data,
                         const std::vector<int>& batch, const ElboConfig& config, Rng& rng) {
  const bool warmup = state.epoch < config.kl_free_epochs;
  const int N = data.size();
  if (warmup) {
    // s_lambda pinned during the KL-free phase.
    for (int i : batch) state.q.sd_raw.row(i).setConstant(softplus_inverse(config.init_posterior_sd));
  }
  std::vector<VectorXd> eps(batch.size());
  for (auto& e : eps) {
    e.resize(dims.k);
    for (int j = 0; j < dims.k; ++j) e[j] = rng.normal();
  }

  std::vector<HyperNetParams> dphis(batch.size());
  std::vector<VectorXd> dmus(batch.size()), dsds(batch.size());
  std::vector<double> values(batch.size());
  parallel_for(batch.size(), [&](std::size_t b) {
    const int i = batch[b];
    dphis[b] = HyperNetParams::zeros(dims);
    values[b] = elbo_sample_gradient(state.phi, dims, data.U, data.Y[i],
                                     state.q.mu.row(i).transpose(), state.q.sd_raw.row(i).transpose(),
                                     eps[b], !warmup, dphis[b], dmus[b], dsds[b]);
  });

  const double scale = static_cast<double>(N) / static_cast<double>(batch.size());
  HyperNetParams gphi = HyperNetParams::zeros(dims);
  MatrixXd gmu = MatrixXd::Zero(N, dims.k), gsd = MatrixXd::Zero(N, dims.k);
  ElboStepResult res;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    gphi += dphis[b];
    gmu.row(batch[b]) = dmus[b].transpose();
    gsd.row(batch[b]) = dsds[b].transpose();
    res.elbo += values[b];
  }
  gphi *= scale;
  if (config.use_log_s_prior) {
    const LogSPrior prior = log_s_prior_penalty(state.phi.log_s, config.log_s_prior_mean, config.log_s_prior_sd);
    gphi.log_s += prior.grad;
  }

  // Adam descends; negate the ascent direction.
  VectorXd flat = state.phi.flatten();
  const VectorXd gflat = -gphi.flatten();
  res.grad_norm = gflat.norm();
  const VectorXd lr_scale = transition_lr_scale(dims, config.transition_lr_factor);
  adam_step(state.adam_phi, flat, gflat, config.lr, state.adam_phi.beta1, &lr_scale);
  state.phi.unflatten(flat);

  VectorXd qflat(2 * N * dims.k), qgrad(2 * N * dims.k);
  qflat << Eigen::Map<const VectorXd>(state.q.mu.data(), N * dims.k),
      Eigen::Map<const VectorXd>(state.q.sd_raw.data(), N * dims.k);
  qgrad << -Eigen::Map<const VectorXd>(gmu.data(), N * dims.k),
      -Eigen::Map<const VectorXd>(gsd.data(), N * dims.k);
  adam_step(state.adam_q, qflat, qgrad, config.lr_variational, state.adam_q.beta1);
  state.q.mu = Eigen::Map<const MatrixXd>(qflat.data(), N, dims.k);
  if (!warmup) state.q.sd_raw = Eigen::Map<const MatrixXd>(qflat.data() + N * dims.k, N, dims.k);
  return res;
}

VectorXd elbo_estimate(const HyperNetParams& phi, const ModelDims& dims,
                       const SharedInputData& data, const VariationalParams& q, int n_samples,
                       Rng& rng) {
  VectorXd out(data.size());
  const double s = std::exp(phi.log_s);
  for (int i = 0; i < data.size(); ++i) {
    const VectorXd mu = q.mu.row(i).transpose(), sd = q.sd(i);
    double acc = 0.0;
    for (int r = 0; r < n_samples; ++r) {
      VectorXd z(dims.k);
      for (int j = 0; j < dims.k; ++j) z[j] = mu[j] + sd[j] * rng.normal();
      const RolloutResult fwd = rollout(realize(hypernet_forward(phi, z), phi.log_s, dims), data.U, dims.base);
      acc += gaussian_loglik(data.Y[i], fwd.predictions, s);
    }
    out[i] = acc / n_samples - kl_diag_gaussian(mu, sd);
  }
  return out;
}

// ---- drivers ----------------------------------------------------------------

HyperNetParams init_hypernet(const ModelDims& dims, Rng& rng) {
  HyperNetParams phi = HyperNetParams::zeros(dims);
  const double hidden_sd = 1.0 / std::sqrt(static_cast<double>(dims.feature_size()));
  for (Eigen::Index j = 0; j < phi.hidden_weights.cols(); ++j)
    for (Eigen::Index i = 0; i < phi.hidden_weights.rows(); ++i)
      phi.hidden_weights(i, j) = hidden_sd * rng.normal();
  for (Eigen::Index i = 0; i < phi.hidden_bias.size(); ++i) phi.hidden_bias[i] = 0.5 * rng.normal();
  const double out_sd = 1.0 / std::sqrt(static_cast<double>(dims.H));
  for (Eigen::Index j = 0; j < phi.out_weights.cols(); ++j)
    for (Eigen::Index i = 0; i < phi.out_weights.rows(); ++i)
      phi.out_weights(i, j) = out_sd * rng.normal();
  // Hidden units average ~0.5, so remove that offset from each output.
  phi.out_bias = -0.5 * phi.out_weights.colwise().sum().transpose();

  const RawLayout lay = RawLayout::of(dims);
  const int n = dims.n;
  if (dims.base == BaseModel::lds) {
    for (int i = 0; i < n; ++i) phi.out_bias[lay.transition + i] += std::atanh(0.9);
    for (int i = 0; i < paramspace::skew_count(n); ++i)
      phi.out_bias[lay.transition + n + i] += 0.3 * rng.normal();
  } else {
    for (int i = 0; i < n; ++i) phi.out_bias[lay.transition + i * n + i] += 0.9;
  }
  for (int i = 0; i < n * dims.m; ++i) phi.out_bias[lay.b2 + i] += rng.normal();
  for (int i = 0; i < n * dims.p; ++i) phi.out_bias[lay.C + i] += 0.5 * rng.normal();
  phi.log_s = -1.0;
  return phi;
}

VectorXd transition_lr_scale(const ModelDims& dims, double factor) {
  const HyperNetParams shape = HyperNetParams::zeros(dims);
  VectorXd scale = VectorXd::Ones(shape.size());
  const RawLayout lay = RawLayout::of(dims);
  const Eigen::Index H = dims.H;
  const Eigen::Index out_w = shape.hidden_weights.size() + shape.hidden_bias.size();
  const Eigen::Index out_b = out_w + shape.out_weights.size();
  for (int j = lay.transition; j < lay.transition + lay.transition_size; ++j) {
    scale.segment(out_w + j * H, H).setConstant(factor);
    scale[out_b + j] = factor;
  }
  return scale;
}

namespace {

std::vector<std::vector<int>> make_batches(int N, int batch_size, Rng& rng) {
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  if (batch_size <= 0 || batch_size >= N) return {order};
  for (int i = N - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[i], order[j]);
  }
  std::vector<std::vector<int>> batches;
  for (int lo = 0; lo < N; lo += batch_size)
    batches.emplace_back(order.begin() + lo, order.begin() + std::min(N, lo + batch_size));
  return batches;
}

}  // namespace

void train_mco(McoTrainState& state, const McoConfig& config, const ModelDims& dims,
               const SharedInputData& data, const EpochCallback& on_epoch) {
  const int N = data.size();
  require_dims(N >= 1, "train_mco: empty dataset");
  if (state.adam.m.size() != state.phi.size()) state.adam = AdamState::zeros(state.phi.size());
  const VectorXd lr_scale = transition_lr_scale(dims, config.transition_lr_factor);
  const Rng root(config.seed);

  for (int epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
    const ScheduleRow& row = active_row(config.schedule, epoch);
    Rng rng = root.split(static_cast<std::uint64_t>(epoch));
    double objective = 0.0, grad_norm = 0.0;
    for (const auto& batch : make_batches(N, config.batch_size, rng)) {
      McoEpochResult res = mco_epoch(state.phi, dims, data, batch, row.M, config.M_rsmp, rng, config.shift_particles);
      res.grad *= static_cast<double>(N) / static_cast<double>(batch.size());
      if (config.use_log_s_prior) {
        const LogSPrior prior =
            log_s_prior_penalty(state.phi.log_s, row.log_s_prior_mean, config.log_s_prior_sd);
        res.grad.log_s += prior.grad;
      }
      objective += res.objective.sum();
      VectorXd flat = state.phi.flatten();
      const VectorXd g = -res.grad.flatten();
      grad_norm = std::max(grad_norm, g.norm());
      adam_step(state.adam, flat, g, row.lr, row.beta1, &lr_scale);
      state.phi.unflatten(flat);
    }
    state.epoch = epoch;
    if (on_epoch) on_epoch({epoch, objective / N, grad_norm, row.lr, state.phi.log_s});
  }
}

void train_elbo(ElboState& state, const ElboConfig& config, const ModelDims& dims,
                const SharedInputData& data, const EpochCallback& on_epoch) {
  const int N = data.size();
  require_dims(N >= 1, "train_elbo: empty dataset");
  if (state.q.mu.rows() != N) state.q = VariationalParams::init(N, dims.k, config.init_posterior_sd);
  if (state.adam_phi.m.size() != state.phi.size()) state.adam_phi = AdamState::zeros(state.phi.size());
  if (state.adam_q.m.size() != 2 * N * dims.k) state.adam_q = AdamState::zeros(2 * N * dims.k);
  const Rng root(config.seed);
  while (state.epoch < config.epochs) {
    Rng rng = root.split(static_cast<std::uint64_t>(state.epoch + 1));
    double elbo = 0.0, grad_norm = 0.0;
    for (const auto& batch : make_batches(N, config.batch_size, rng)) {
      const ElboStepResult r = elbo_step(state, dims, data, batch, config, rng);
      elbo += r.elbo;
      grad_norm = std::max(grad_norm, r.grad_norm);
    }
    ++state.epoch;
    if (on_epoch) on_epoch({state.epoch, elbo / N, grad_norm, config.lr, state.phi.log_s});
  }
}

McoTrainState init_mco_state(const McoConfig& config, const ModelDims& dims,
                             const SharedInputData& data, Rng& rng) {
  HyperNetParams phi = init_hypernet(dims, rng);
  if (config.elbo_warmup_epochs > 0) {
    ElboConfig ec;
    ec.epochs = config.elbo_warmup_epochs;
    ec.seed = rng.next_u64();
    ElboState es{std::move(phi), VariationalParams::init(data.size(), dims.k, ec.init_posterior_sd),
                 {}, {}, 0};
    train_elbo(es, ec, dims, data);
    phi = std::move(es.phi);
  }
  return {std::move(phi), {}, 0};
}

}  // namespace mtds::learn
