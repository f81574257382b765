#pragma once

// Experiment plumbing: configs, checkpoints, the pooled baseline, evaluation
// and the DHO benchmark driver.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtds/dho.hpp"
#include "mtds/infer.hpp"
#include "mtds/learn.hpp"
#include "mtds/model.hpp"

namespace mtds::bench {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr int kCheckpointSchema = 1;

/// Default DHO model: 4 states, no offsets.
inline ModelDims dho_dims() {
  ModelDims d;
  d.offsets = false;
  return d;
}

struct PooledConfig {
  int epochs = 2000;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

struct InferenceConfig {
  infer::AdaisHyper adais;
  infer::InferencePrior prior;
  int tau = 5;
  int predictive_samples = 1000;
};

struct RunConfig {
  ModelDims dims = dho_dims();
  learn::McoConfig mco;
  learn::ElboConfig elbo;
  PooledConfig pooled;
  InferenceConfig inference;
};

/// Parses the JSON config; absent keys keep their defaults, unknown keys and
/// out-of-range values throw DomainError.
RunConfig parse_config(const std::string& text);
std::string dump_config(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);
/// FNV-1a 64 of the canonical dump, as 16 hex digits.
std::string config_hash(const RunConfig& config);

// ---- pooled baseline --------------------------------------------------------

struct PooledModel {
  VectorXd theta;  // raw layout, see RawLayout
  double log_s = -1.0;
};

PooledModel init_pooled(const ModelDims& dims, Rng& rng);

struct PooledTrainState {
  PooledModel model;
  learn::AdamState adam;
  int epoch = 0;
};

/// Adam ascent on sum_i log p(Y_i | theta, s) with one theta for every task.
void train_pooled(PooledTrainState& state, const PooledConfig& config, const ModelDims& dims,
                  const learn::SharedInputData& data, const learn::EpochCallback& on_epoch = {});

// ---- checkpoints ------------------------------------------------------------

struct Checkpoint {
  int schema_version = kCheckpointSchema;
  std::string kind = "mco";  // mco | elbo | pooled
  ModelDims dims;
  HyperNetParams phi;            // mco, elbo
  learn::VariationalParams q;    // elbo
  PooledModel pooled;            // pooled
  learn::AdamState adam;         // phi or theta
  learn::AdamState adam_q;       // elbo
  std::uint64_t seed = 0;
  int epochs_completed = 0;
  std::string config_hash;
};

std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- evaluation -------------------------------------------------------------

learn::SharedInputData shared_input(const dho::SequenceSet& set);

struct SequenceEval {
  int index = 0;
  int cond_t = 0;
  infer::Metrics metrics;
  MatrixXd truth;        // horizon x p
  infer::Predictive pred;
};

struct EvalOutput {
  std::vector<SequenceEval> sequences;
  std::vector<std::string> posterior_records;  // one JSON line per (sequence, t)
};

/// Filters each test sequence up to max(cond) and scores the posterior
/// predictive of y_{t+1:T} at every conditioning length. Sequence i draws
/// from Rng(seed).split(i), so results do not depend on the worker count.
EvalOutput evaluate_mtds(const HyperNetParams& phi, const ModelDims& dims,
                         const dho::SequenceSet& test, const std::vector<int>& cond,
                         const InferenceConfig& config, std::uint64_t seed);

/// The pooled model ignores the conditioning data; its predictive is the
/// single rollout with emission std-dev exp(log_s).
EvalOutput evaluate_pooled(const PooledModel& model, const ModelDims& dims,
                           const dho::SequenceSet& test, const std::vector<int>& cond);

struct MetricRow {
  std::string model;
  int N_train = 0;
  int rep = 0;
  int cond_t = 0;
  double rmse = 0.0;
  double nll = 0.0;
  double runtime_s = 0.0;
  std::uint64_t seed = 0;
};

/// Mean RMSE / NLL over sequences, one row per conditioning length.
std::vector<MetricRow> summarize(const EvalOutput& eval, const std::string& model, int N_train,
                                 int rep, double runtime_s, std::uint64_t seed);

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricRow& row);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

/// Per-sequence trace files {t, y_true, pred_mean, pred_lo95, pred_hi95} and a
/// per-sequence RMSE/NLL table, written under dir.
void emit_traces(const std::filesystem::path& dir, const std::string& label,
                 const EvalOutput& eval);

// ---- DHO benchmark ----------------------------------------------------------

struct ExperimentSpec {
  std::vector<int> train_sizes = {4, 16};
  int repetitions = 10;
  std::vector<int> cond = {10, 20, 40};
  int n_test = 20;
  int pooled_n = 1000;
  std::uint64_t seed = 1;
  bool marginal = false;  // also write mean test log marginal likelihoods
  int marginal_samples = 10000;
  RunConfig config;

  static ExperimentSpec full();
  static ExperimentSpec smoke();
};

/// Seed of repetition rep; its test set is dho::make_dataset(1, n_test, seed).second.
std::uint64_t repetition_seed(const ExperimentSpec& spec, int rep);

/// Runs every (train size, repetition) cell plus a pooled baseline per
/// repetition, writing metrics.csv, traces and checkpoints under out_dir.
/// Finished cells are kept on disk and skipped on a rerun.
std::vector<MetricRow> reproduce_dho(const ExperimentSpec& spec,
                                     const std::filesystem::path& out_dir, std::ostream* log);

struct MarginalRow {
  int N_train = 0;
  int rep = 0;
  double model_loglik = 0.0;  // mean over test sequences
  double true_loglik = 0.0;
};

/// Mean test log marginal likelihood of a trained model (shifted-Sobol
/// estimate with M particles) next to the generating-prior estimate.
MarginalRow marginal_comparison(const HyperNetParams& phi, const ModelDims& dims,
                                const dho::SequenceSet& test, int M, std::uint64_t seed);

}  // namespace mtds::bench
