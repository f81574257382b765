#include "mtds/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <ostream>
#include <set>
#include <sstream>

#include "mtds/errors.hpp"
#include "mtds/io.hpp"
#include "mtds/parallel.hpp"
#include "mtds/paramspace.hpp"

namespace mtds::bench {

using nlohmann::json;

namespace {

json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// Column-major flat array.
json mat_json(const MatrixXd& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

VectorXd json_vec(const json& j, Eigen::Index expect, const char* what) {
  const auto v = j.get<std::vector<double>>();
  if (static_cast<Eigen::Index>(v.size()) != expect)
    throw DimensionError(std::string("checkpoint: wrong length for ") + what);
  return Eigen::Map<const VectorXd>(v.data(), expect);
}

MatrixXd json_mat(const json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  const VectorXd v = json_vec(j, rows * cols, what);
  return Eigen::Map<const MatrixXd>(v.data(), rows, cols);
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw DomainError("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw DomainError("config: unknown key " + where + "." + key);
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json dims_json(const ModelDims& d) {
  return {{"n", d.n}, {"m", d.m}, {"p", d.p}, {"k", d.k}, {"H", d.H}, {"base", to_string(d.base)}, {"offsets", d.offsets}};
}

ModelDims json_dims(const json& j) {
  check_keys(j, {"n", "m", "p", "k", "H", "base", "offsets"}, "model");
  ModelDims d = dho_dims();
  read_key(j, "n", d.n);
  read_key(j, "m", d.m);
  read_key(j, "p", d.p);
  read_key(j, "k", d.k);
  read_key(j, "H", d.H);
  read_key(j, "offsets", d.offsets);
  if (j.contains("base")) d.base = base_model_from_string(j.at("base").get<std::string>());
  if (d.n < 1 || d.m < 1 || d.p < 1 || d.k < 1 || d.H < 1)
    throw DomainError("config: model dimensions must be positive");
  return d;
}

json adam_json(const learn::AdamState& a) {
  return {{"step", a.step}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps},
          {"m", vec_json(a.m)}, {"v", vec_json(a.v)}};
}

learn::AdamState json_adam(const json& j, Eigen::Index n) {
  learn::AdamState a;
  a.step = j.at("step").get<long>();
  a.beta1 = j.at("beta1").get<double>();
  a.beta2 = j.at("beta2").get<double>();
  a.eps = j.at("eps").get<double>();
  a.m = json_vec(j.at("m"), n, "adam.m");
  a.v = json_vec(j.at("v"), n, "adam.v");
  return a;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

}  // namespace

// ---- config -----------------------------------------------------------------

RunConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DomainError(std::string("config: ") + e.what());
  }
  check_keys(root, {"model", "mco", "elbo", "pooled", "inference"}, "root");
  RunConfig c;
  try {
    if (root.contains("model")) c.dims = json_dims(root["model"]);
    if (root.contains("mco")) {
      const json& j = root["mco"];
      check_keys(j, {"M_rsmp", "epochs", "batch_size", "schedule", "log_s_prior_sd", "use_log_s_prior",
                     "transition_lr_factor", "elbo_warmup_epochs", "shift_particles", "seed"}, "mco");
      read_key(j, "M_rsmp", c.mco.M_rsmp);
      read_key(j, "epochs", c.mco.epochs);
      read_key(j, "batch_size", c.mco.batch_size);
      read_key(j, "log_s_prior_sd", c.mco.log_s_prior_sd);
      read_key(j, "use_log_s_prior", c.mco.use_log_s_prior);
      read_key(j, "transition_lr_factor", c.mco.transition_lr_factor);
      read_key(j, "elbo_warmup_epochs", c.mco.elbo_warmup_epochs);
      read_key(j, "shift_particles", c.mco.shift_particles);
      read_key(j, "seed", c.mco.seed);
      if (j.contains("schedule")) {
        c.mco.schedule.clear();
        for (const json& r : j["schedule"]) {
          check_keys(r, {"epoch", "lr", "beta1", "log_s_prior_mean", "M"}, "mco.schedule[]");
          learn::ScheduleRow row;
          read_key(r, "epoch", row.epoch);
          read_key(r, "lr", row.lr);
          read_key(r, "beta1", row.beta1);
          read_key(r, "log_s_prior_mean", row.log_s_prior_mean);
          read_key(r, "M", row.M);
          if (row.M < 1 || !(row.lr > 0.0) || row.epoch < 1 || !(row.beta1 >= 0.0 && row.beta1 < 1.0))
            throw DomainError("config: invalid mco.schedule row");
          if (!c.mco.schedule.empty() && row.epoch <= c.mco.schedule.back().epoch)
            throw DomainError("config: mco.schedule epochs must increase");
          c.mco.schedule.push_back(row);
        }
        if (c.mco.schedule.empty()) throw DomainError("config: mco.schedule is empty");
      }
      if (c.mco.M_rsmp < 1 || c.mco.epochs < 0 || c.mco.elbo_warmup_epochs < 0 || c.mco.batch_size < 0 || !(c.mco.log_s_prior_sd > 0.0))
        throw DomainError("config: invalid mco settings");
    }
    if (root.contains("elbo")) {
      const json& j = root["elbo"];
      check_keys(j, {"epochs", "batch_size", "kl_free_epochs", "init_posterior_sd", "lr", "lr_variational",
                     "transition_lr_factor", "use_log_s_prior", "log_s_prior_mean", "log_s_prior_sd", "seed"},
                 "elbo");
      read_key(j, "epochs", c.elbo.epochs);
      read_key(j, "batch_size", c.elbo.batch_size);
      read_key(j, "kl_free_epochs", c.elbo.kl_free_epochs);
      read_key(j, "init_posterior_sd", c.elbo.init_posterior_sd);
      read_key(j, "lr", c.elbo.lr);
      read_key(j, "lr_variational", c.elbo.lr_variational);
      read_key(j, "transition_lr_factor", c.elbo.transition_lr_factor);
      read_key(j, "use_log_s_prior", c.elbo.use_log_s_prior);
      read_key(j, "log_s_prior_mean", c.elbo.log_s_prior_mean);
      read_key(j, "log_s_prior_sd", c.elbo.log_s_prior_sd);
      read_key(j, "seed", c.elbo.seed);
      if (c.elbo.epochs < 0 || !(c.elbo.init_posterior_sd > 0.0) || !(c.elbo.lr > 0.0) ||
          !(c.elbo.lr_variational > 0.0))
        throw DomainError("config: invalid elbo settings");
    }
    if (root.contains("pooled")) {
      const json& j = root["pooled"];
      check_keys(j, {"epochs", "lr", "seed"}, "pooled");
      read_key(j, "epochs", c.pooled.epochs);
      read_key(j, "lr", c.pooled.lr);
      read_key(j, "seed", c.pooled.seed);
      if (c.pooled.epochs < 0 || !(c.pooled.lr > 0.0)) throw DomainError("config: invalid pooled settings");
    }
    if (root.contains("inference")) {
      const json& j = root["inference"];
      check_keys(j, {"J", "N_AIS", "M", "M_0", "M_final", "tilt", "M_ess", "n_retry", "EM_iters",
                     "kmeans_iters", "tau", "predictive_samples", "log_s_mean", "log_s_sd"},
                 "inference");
      auto& a = c.inference.adais;
      read_key(j, "J", a.J);
      read_key(j, "N_AIS", a.N_AIS);
      read_key(j, "M", a.M);
      read_key(j, "M_0", a.M_0);
      read_key(j, "M_final", a.M_final);
      read_key(j, "tilt", a.tilt);
      read_key(j, "M_ess", a.M_ess);
      read_key(j, "n_retry", a.n_retry);
      read_key(j, "EM_iters", a.EM_iters);
      read_key(j, "kmeans_iters", a.kmeans_iters);
      read_key(j, "tau", c.inference.tau);
      read_key(j, "predictive_samples", c.inference.predictive_samples);
      read_key(j, "log_s_mean", c.inference.prior.log_s_mean);
      read_key(j, "log_s_sd", c.inference.prior.log_s_sd);
      a.validate();
      if (c.inference.tau < 1 || c.inference.predictive_samples < 1 || !(c.inference.prior.log_s_sd > 0.0))
        throw DomainError("config: invalid inference settings");
    }
  } catch (const json::exception& e) {
    throw DomainError(std::string("config: ") + e.what());
  }
  return c;
}

std::string dump_config(const RunConfig& c) {
  json sched = json::array();
  for (const auto& r : c.mco.schedule)
    sched.push_back({{"epoch", r.epoch}, {"lr", r.lr}, {"beta1", r.beta1},
                     {"log_s_prior_mean", r.log_s_prior_mean}, {"M", r.M}});
  const auto& a = c.inference.adais;
  json root = {
      {"model", dims_json(c.dims)},
      {"mco", {{"M_rsmp", c.mco.M_rsmp}, {"epochs", c.mco.epochs}, {"batch_size", c.mco.batch_size},
               {"schedule", sched}, {"log_s_prior_sd", c.mco.log_s_prior_sd},
               {"use_log_s_prior", c.mco.use_log_s_prior},
               {"transition_lr_factor", c.mco.transition_lr_factor}, {"elbo_warmup_epochs", c.mco.elbo_warmup_epochs},
               {"shift_particles", c.mco.shift_particles}, {"seed", c.mco.seed}}},
      {"elbo", {{"epochs", c.elbo.epochs}, {"batch_size", c.elbo.batch_size},
                {"kl_free_epochs", c.elbo.kl_free_epochs}, {"init_posterior_sd", c.elbo.init_posterior_sd},
                {"lr", c.elbo.lr}, {"lr_variational", c.elbo.lr_variational},
                {"transition_lr_factor", c.elbo.transition_lr_factor},
                {"use_log_s_prior", c.elbo.use_log_s_prior}, {"log_s_prior_mean", c.elbo.log_s_prior_mean},
                {"log_s_prior_sd", c.elbo.log_s_prior_sd}, {"seed", c.elbo.seed}}},
      {"pooled", {{"epochs", c.pooled.epochs}, {"lr", c.pooled.lr}, {"seed", c.pooled.seed}}},
      {"inference", {{"J", a.J}, {"N_AIS", a.N_AIS}, {"M", a.M}, {"M_0", a.M_0}, {"M_final", a.M_final},
                     {"tilt", a.tilt}, {"M_ess", a.M_ess}, {"n_retry", a.n_retry},
                     {"EM_iters", a.EM_iters}, {"kmeans_iters", a.kmeans_iters},
                     {"tau", c.inference.tau}, {"predictive_samples", c.inference.predictive_samples},
                     {"log_s_mean", c.inference.prior.log_s_mean},
                     {"log_s_sd", c.inference.prior.log_s_sd}}}};
  return root.dump(2) + "\n";
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path)); }

std::string config_hash(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(dump_config(config))));
  return buf;
}

// ---- pooled -----------------------------------------------------------------

PooledModel init_pooled(const ModelDims& dims, Rng& rng) {
  const RawLayout lay = RawLayout::of(dims);
  PooledModel m;
  m.theta = VectorXd::Zero(lay.total);
  const int n = dims.n;
  if (dims.base == BaseModel::lds) {
    for (int i = 0; i < n; ++i) m.theta[lay.transition + i] = std::atanh(0.9);
    for (int i = 0; i < paramspace::skew_count(n); ++i) m.theta[lay.transition + n + i] = 0.3 * rng.normal();
  } else {
    for (int i = 0; i < n; ++i) m.theta[lay.transition + i * n + i] = 0.9;
  }
  for (int i = 0; i < n * dims.m; ++i) m.theta[lay.b2 + i] = rng.normal();
  for (int i = 0; i < n * dims.p; ++i) m.theta[lay.C + i] = 0.5 * rng.normal();
  m.log_s = -1.0;
  return m;
}

void train_pooled(PooledTrainState& state, const PooledConfig& config, const ModelDims& dims,
                  const learn::SharedInputData& data, const learn::EpochCallback& on_epoch) {
  const int N = data.size();
  require_dims(N >= 1, "train_pooled: empty dataset");
  const Eigen::Index d = state.model.theta.size();
  require_dims(d == RawLayout::of(dims).total, "train_pooled: theta does not match the layout");
  if (state.adam.m.size() != d + 1) state.adam = learn::AdamState::zeros(d + 1);
  std::vector<VectorXd> draws(N);
  std::vector<double> dlog(N), values(N);
  for (int epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
    parallel_for(static_cast<std::size_t>(N), [&](std::size_t i) {
      values[i] = raw_loss_backward(state.model.theta, state.model.log_s, data.U, data.Y[i], dims, draws[i], dlog[i]);
    });
    VectorXd grad = VectorXd::Zero(d + 1);
    double objective = 0.0;
    for (int i = 0; i < N; ++i) {
      grad.head(d) += draws[i];
      grad[d] += dlog[i];
      objective += values[i];
    }
    grad /= N;  // mean log-likelihood keeps the step size independent of N
    VectorXd params(d + 1);
    params << state.model.theta, state.model.log_s;
    adam_step(state.adam, params, -grad, config.lr, 0.9);
    state.model.theta = params.head(d);
    state.model.log_s = params[d];
    state.epoch = epoch;
    if (on_epoch) on_epoch({epoch, objective / N, grad.norm(), config.lr, state.model.log_s});
  }
}

// ---- checkpoints ------------------------------------------------------------

std::string checkpoint_to_string(const Checkpoint& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["kind"] = c.kind;
  j["model"] = dims_json(c.dims);
  if (c.kind == "pooled") {
    j["pooled"] = {{"theta", vec_json(c.pooled.theta)}, {"log_s", c.pooled.log_s}};
  } else {
    j["hypernet"] = {{"hidden_weights", mat_json(c.phi.hidden_weights)},
                     {"hidden_bias", vec_json(c.phi.hidden_bias)},
                     {"out_weights", mat_json(c.phi.out_weights)},
                     {"out_bias", vec_json(c.phi.out_bias)},
                     {"log_s", c.phi.log_s}};
  }
  j["optimizer"] = adam_json(c.adam);
  if (c.kind == "elbo") {
    j["variational"] = {{"N", c.q.mu.rows()}, {"mu", mat_json(c.q.mu)}, {"sd_raw", mat_json(c.q.sd_raw)}};
    j["optimizer_variational"] = adam_json(c.adam_q);
  }
  j["meta"] = {{"seed", c.seed}, {"epochs_completed", c.epochs_completed}, {"config_hash", c.config_hash}};
  return j.dump() + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  Checkpoint c;
  try {
    const json j = json::parse(text);
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != kCheckpointSchema)
      throw DomainError("checkpoint: unsupported schema_version " + std::to_string(c.schema_version));
    c.kind = j.at("kind").get<std::string>();
    if (c.kind != "mco" && c.kind != "elbo" && c.kind != "pooled")
      throw DomainError("checkpoint: unknown kind " + c.kind);
    c.dims = json_dims(j.at("model"));
    Eigen::Index n_opt = 0;
    if (c.kind == "pooled") {
      const json& p = j.at("pooled");
      c.pooled.theta = json_vec(p.at("theta"), RawLayout::of(c.dims).total, "theta");
      c.pooled.log_s = p.at("log_s").get<double>();
      n_opt = c.pooled.theta.size() + 1;
    } else {
      const json& h = j.at("hypernet");
      c.phi = HyperNetParams::zeros(c.dims);
      c.phi.hidden_weights = json_mat(h.at("hidden_weights"), c.phi.hidden_weights.rows(), c.phi.hidden_weights.cols(), "hidden_weights");
      c.phi.hidden_bias = json_vec(h.at("hidden_bias"), c.phi.hidden_bias.size(), "hidden_bias");
      c.phi.out_weights = json_mat(h.at("out_weights"), c.phi.out_weights.rows(), c.phi.out_weights.cols(), "out_weights");
      c.phi.out_bias = json_vec(h.at("out_bias"), c.phi.out_bias.size(), "out_bias");
      c.phi.log_s = h.at("log_s").get<double>();
      n_opt = c.phi.size();
    }
    const json& opt = j.at("optimizer");
    c.adam = opt.at("m").empty() ? learn::AdamState{} : json_adam(opt, n_opt);
    if (opt.at("m").empty()) c.adam.step = opt.at("step").get<long>();
    if (c.kind == "elbo") {
      const json& v = j.at("variational");
      const Eigen::Index N = v.at("N").get<Eigen::Index>();
      c.q.mu = json_mat(v.at("mu"), N, c.dims.k, "mu");
      c.q.sd_raw = json_mat(v.at("sd_raw"), N, c.dims.k, "sd_raw");
      const json& oq = j.at("optimizer_variational");
      if (!oq.at("m").empty()) c.adam_q = json_adam(oq, 2 * N * c.dims.k);
    }
    const json& meta = j.at("meta");
    c.seed = meta.at("seed").get<std::uint64_t>();
    c.epochs_completed = meta.at("epochs_completed").get<int>();
    c.config_hash = meta.at("config_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw DomainError(std::string("checkpoint: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_atomic(path, checkpoint_to_string(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_string(io::read_file(path));
}

// ---- evaluation -------------------------------------------------------------

learn::SharedInputData shared_input(const dho::SequenceSet& set) {
  learn::SharedInputData data;
  data.U = dho::impulse_input(set.T);
  data.Y.reserve(set.size());
  for (int i = 0; i < set.size(); ++i) data.Y.push_back(set.sequence(i));
  return data;
}

namespace {

void check_cond(const std::vector<int>& cond, int T) {
  require_dims(!cond.empty(), "evaluate: no conditioning lengths");
  for (int t : cond) require_dims(t >= 1 && t < T, "evaluate: conditioning length must lie in [1, T)");
}

}  // namespace

EvalOutput evaluate_mtds(const HyperNetParams& phi, const ModelDims& dims,
                         const dho::SequenceSet& test, const std::vector<int>& cond,
                         const InferenceConfig& config, std::uint64_t seed) {
  check_cond(cond, test.T);
  for (int t : cond)
    require_dims(t % config.tau == 0, "evaluate: conditioning lengths must be multiples of tau");
  const int t_max = *std::max_element(cond.begin(), cond.end());
  const MatrixXd U = dho::impulse_input(test.T);
  const Rng root(seed);
  const int n = test.size();
  std::vector<std::vector<SequenceEval>> per(n);
  std::vector<std::vector<std::string>> records(n);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t idx) {
    const int i = static_cast<int>(idx);
    Rng rng = root.split(idx);
    const MatrixXd Y = test.sequence(i);
    const auto steps = infer::filter_posteriors(Y, U, phi, dims, config.tau, config.adais, rng, t_max, config.prior);
    for (const auto& step : steps) {
      nlohmann::json rec = nlohmann::json::parse(infer::posterior_record(step.t, step.result));
      rec["sequence"] = i;
      records[idx].push_back(rec.dump());
    }
    for (int t : cond) {
      const auto& step = steps[static_cast<std::size_t>(t / config.tau - 1)];
      SequenceEval ev;
      ev.index = i;
      ev.cond_t = t;
      ev.truth = Y.bottomRows(test.T - t);
      ev.pred = infer::posterior_predictive(step.result.q, phi, dims, U, t, test.T - t,
                                            config.predictive_samples, rng);
      ev.metrics = infer::metrics_rmse_nll(ev.truth, ev.pred);
      per[idx].push_back(std::move(ev));
    }
  });
  EvalOutput out;
  for (int i = 0; i < n; ++i) {
    for (auto& ev : per[i]) out.sequences.push_back(std::move(ev));
    for (auto& r : records[i]) out.posterior_records.push_back(std::move(r));
  }
  return out;
}

EvalOutput evaluate_pooled(const PooledModel& model, const ModelDims& dims,
                           const dho::SequenceSet& test, const std::vector<int>& cond) {
  check_cond(cond, test.T);
  const MatrixXd U = dho::impulse_input(test.T);
  const RolloutResult fwd = rollout(realize(model.theta, model.log_s, dims), U, dims.base);
  const double s = std::exp(model.log_s);
  EvalOutput out;
  for (int i = 0; i < test.size(); ++i) {
    const MatrixXd Y = test.sequence(i);
    for (int t : cond) {
      SequenceEval ev;
      ev.index = i;
      ev.cond_t = t;
      ev.truth = Y.bottomRows(test.T - t);
      ev.pred.start = t;
      ev.pred.mean = fwd.predictions.bottomRows(test.T - t);
      ev.pred.sd = MatrixXd::Constant(ev.pred.mean.rows(), ev.pred.mean.cols(), s);
      ev.pred.lo95 = ev.pred.mean.array() - 1.959963984540054 * s;
      ev.pred.hi95 = ev.pred.mean.array() + 1.959963984540054 * s;
      ev.pred.yhat = {ev.pred.mean};
      ev.pred.s = VectorXd::Constant(1, s);
      ev.metrics = infer::metrics_rmse_nll(ev.truth, ev.pred);
      out.sequences.push_back(std::move(ev));
    }
  }
  return out;
}

std::vector<MetricRow> summarize(const EvalOutput& eval, const std::string& model, int N_train,
                                 int rep, double runtime_s, std::uint64_t seed) {
  std::vector<int> conds;
  for (const auto& ev : eval.sequences)
    if (std::find(conds.begin(), conds.end(), ev.cond_t) == conds.end()) conds.push_back(ev.cond_t);
  std::vector<MetricRow> rows;
  for (int t : conds) {
    MetricRow row{model, N_train, rep, t, 0.0, 0.0, runtime_s, seed};
    int count = 0;
    for (const auto& ev : eval.sequences) {
      if (ev.cond_t != t) continue;
      row.rmse += ev.metrics.rmse;
      row.nll += ev.metrics.nll;
      ++count;
    }
    row.rmse /= count;
    row.nll /= count;
    rows.push_back(row);
  }
  return rows;
}

std::string metrics_csv_header() { return "model,N_train,rep,cond_t,rmse,nll,runtime_s,seed\n"; }

std::string metrics_csv_row(const MetricRow& r) {
  std::ostringstream os;
  os << r.model << ',' << r.N_train << ',' << r.rep << ',' << r.cond_t << ',' << fmt(r.rmse) << ','
     << fmt(r.nll) << ',' << fmt(r.runtime_s) << ',' << r.seed << '\n';
  return os.str();
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  std::getline(in, line);
  if (line + "\n" != metrics_csv_header()) throw DomainError("metrics: unexpected header in " + path.string());
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> f;
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw DomainError("metrics: malformed row in " + path.string());
    rows.push_back({f[0], std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3]), std::stod(f[4]),
                    std::stod(f[5]), std::stod(f[6]), std::stoull(f[7])});
  }
  return rows;
}

void emit_traces(const std::filesystem::path& dir, const std::string& label, const EvalOutput& eval) {
  std::ostringstream table;
  table << "sequence,cond_t,rmse,nll\n";
  for (const auto& ev : eval.sequences) {
    std::ostringstream os;
    os << "t,y_true,pred_mean,pred_lo95,pred_hi95\n";
    for (Eigen::Index r = 0; r < ev.truth.rows(); ++r) {
      os << ev.pred.start + r + 1 << ',' << fmt(ev.truth(r, 0)) << ',' << fmt(ev.pred.mean(r, 0)) << ','
         << fmt(ev.pred.lo95(r, 0)) << ',' << fmt(ev.pred.hi95(r, 0)) << '\n';
    }
    io::write_atomic(dir / (label + "_seq" + std::to_string(ev.index) + "_t" + std::to_string(ev.cond_t) + ".csv"),
                     os.str());
    table << ev.index << ',' << ev.cond_t << ',' << fmt(ev.metrics.rmse) << ',' << fmt(ev.metrics.nll) << '\n';
  }
  io::write_atomic(dir / (label + "_per_sequence.csv"), table.str());
}

// ---- DHO benchmark ----------------------------------------------------------

ExperimentSpec ExperimentSpec::full() { return ExperimentSpec{}; }

ExperimentSpec ExperimentSpec::smoke() {
  ExperimentSpec s;
  s.repetitions = 1;
  s.pooled_n = 64;
  s.config.inference.adais.M = 300;
  s.config.inference.adais.M_0 = 600;
  s.config.inference.adais.M_final = 600;
  s.config.inference.adais.M_ess = 60;
  s.config.inference.predictive_samples = 300;
  return s;
}

MarginalRow marginal_comparison(const HyperNetParams& phi, const ModelDims& dims,
                                const dho::SequenceSet& test, int M, std::uint64_t seed) {
  MarginalRow row;
  const learn::SharedInputData data = shared_input(test);
  Rng rng(seed);
  Rng model_rng = rng.split(0);
  row.model_loglik = learn::mco_objective_estimate(phi, dims, data, M, &model_rng).mean();
  for (int i = 0; i < test.size(); ++i) {
    Rng r = rng.split(1 + static_cast<std::uint64_t>(i));
    row.true_loglik += dho::true_marginal_loglik(test.sequences.row(i).transpose(), M, r, test.noise_sd);
  }
  row.true_loglik /= test.size();
  return row;
}

std::uint64_t repetition_seed(const ExperimentSpec& spec, int rep) {
  return Rng(spec.seed).split(static_cast<std::uint64_t>(rep)).next_u64();
}

std::vector<MetricRow> reproduce_dho(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                                     std::ostream* log) {
  namespace fs = std::filesystem;
  using clock = std::chrono::steady_clock;
  fs::create_directories(out_dir / "cells");
  io::write_atomic(out_dir / "config.json", dump_config(spec.config));
  const std::string hash = config_hash(spec.config);
  auto say = [&](const std::string& msg) {
    if (log != nullptr) *log << msg << std::endl;
  };

  std::vector<MetricRow> all;
  std::ostringstream marginal_csv;
  marginal_csv << "N_train,rep,model_loglik,true_loglik\n";
  for (int rep = 0; rep < spec.repetitions; ++rep) {
    const std::uint64_t rep_seed = repetition_seed(spec, rep);
    const dho::SequenceSet test = dho::make_dataset(1, spec.n_test, rep_seed).second;

    struct Cell {
      std::string model;
      int N;
    };
    std::vector<Cell> cells;
    for (int N : spec.train_sizes) cells.push_back({"MTLDS", N});
    cells.push_back({"Pooled", spec.pooled_n});

    for (const Cell& cell : cells) {
      const std::string name = cell.model + "-" + std::to_string(cell.N) + "_rep" + std::to_string(rep);
      const fs::path done = out_dir / "cells" / (name + ".csv");
      if (fs::exists(done)) {
        const auto rows = read_metrics_csv(done);
        all.insert(all.end(), rows.begin(), rows.end());
        say("skip " + name + " (done)");
        continue;
      }
      const auto start = clock::now();
      const dho::SequenceSet train = dho::make_dataset(cell.N, spec.n_test, rep_seed).first;
      const learn::SharedInputData data = shared_input(train);
      const std::uint64_t cell_seed = Rng(rep_seed).split(static_cast<std::uint64_t>(cell.N)).next_u64();
      EvalOutput eval;
      Checkpoint ckpt;
      ckpt.dims = spec.config.dims;
      ckpt.seed = cell_seed;
      ckpt.config_hash = hash;
      if (cell.model == "Pooled") {
        PooledConfig pc = spec.config.pooled;
        pc.seed = cell_seed;
        Rng init(cell_seed);
        PooledTrainState st{init_pooled(spec.config.dims, init), {}, 0};
        train_pooled(st, pc, spec.config.dims, data);
        eval = evaluate_pooled(st.model, spec.config.dims, test, spec.cond);
        ckpt.kind = "pooled";
        ckpt.pooled = st.model;
        ckpt.adam = st.adam;
        ckpt.epochs_completed = st.epoch;
      } else {
        learn::McoConfig mc = spec.config.mco;
        mc.seed = cell_seed;
        Rng init(cell_seed);
        learn::McoTrainState st = learn::init_mco_state(mc, spec.config.dims, data, init);
        learn::train_mco(st, mc, spec.config.dims, data, [&](const learn::EpochLog& e) {
          if (e.epoch % 100 == 0)
            say("  " + name + " epoch " + std::to_string(e.epoch) + " L=" + fmt(e.objective) +
                " log_s=" + fmt(e.log_s));
        });
        eval = evaluate_mtds(st.phi, spec.config.dims, test, spec.cond, spec.config.inference,
                             Rng(cell_seed).split(7).next_u64());
        ckpt.kind = "mco";
        ckpt.phi = st.phi;
        ckpt.adam = st.adam;
        ckpt.epochs_completed = st.epoch;
        if (spec.marginal) {
          const MarginalRow m = marginal_comparison(st.phi, spec.config.dims, test, spec.marginal_samples,
                                                    Rng(cell_seed).split(8).next_u64());
          marginal_csv << cell.N << ',' << rep << ',' << fmt(m.model_loglik) << ',' << fmt(m.true_loglik) << '\n';
        }
        std::string posts;
        for (const auto& r : eval.posterior_records) posts += r + "\n";
        io::write_atomic(out_dir / "posteriors" / (name + ".jsonl"), posts);
      }
      const double secs = std::chrono::duration<double>(clock::now() - start).count();
      save_checkpoint(out_dir / "checkpoints" / (name + ".json"), ckpt);
      emit_traces(out_dir / "traces" / name, name, eval);
      const auto rows = summarize(eval, cell.model + "-" + std::to_string(cell.N), cell.N, rep, secs, cell_seed);
      std::string text = metrics_csv_header();
      for (const auto& r : rows) {
        text += metrics_csv_row(r);
        say(name + " t=" + std::to_string(r.cond_t) + " rmse=" + fmt(r.rmse) + " nll=" + fmt(r.nll));
      }
      io::write_atomic(done, text);
      all.insert(all.end(), rows.begin(), rows.end());
    }
  }
  std::string text = metrics_csv_header();
  for (const auto& r : all) text += metrics_csv_row(r);
  io::write_atomic(out_dir / "metrics.csv", text);
  if (spec.marginal) io::write_atomic(out_dir / "marginal.csv", marginal_csv.str());
  return all;
}

}  // namespace mtds::bench
