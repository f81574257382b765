#include "mtds/dho.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <string>

#include "mtds/errors.hpp"
#include "mtds/io.hpp"
#include "mtds/model.hpp"
#include "mtds/sobol.hpp"
#include "mtds/stats.hpp"

namespace mtds::dho {

using nlohmann::json;

double half_life_to_decay(double nu) {
  if (!(nu > 0.0)) throw DomainError("half_life_to_decay: half-life must be positive");
  return std::exp(-std::numbers::ln2 / nu);
}

DhoTask task_from_half_lives(double omega1, double nu1, double omega2, double nu2) {
  return {omega1, nu1, half_life_to_decay(nu1), omega2, nu2, half_life_to_decay(nu2)};
}

DhoTask sample_task(Rng& rng) {
  const double omega1 = rng.uniform(kOmega1Lo, kOmega1Hi);
  const double nu1 = rng.uniform(kNu1Lo, kNu1Hi);
  const double omega2 = rng.uniform(kOmega2Lo, kOmega2Hi);
  const double nu2 = rng.uniform(kNu2Lo, kNu2Hi);
  return task_from_half_lives(omega1, nu1, omega2, nu2);
}

VectorXd render_task(const DhoTask& task, int T, double noise_sd, Rng& rng) {
  require_dims(T >= 1, "render_task: T must be >= 1");
  if (!(noise_sd >= 0.0)) throw DomainError("render_task: noise_sd must be >= 0");
  VectorXd y(T);
  for (int t = 1; t <= T; ++t) {
    y[t - 1] = kGamma1 * std::pow(task.rho1, t) * std::sin(task.omega1 * t) +
               kGamma2 * std::pow(task.rho2, t) * std::sin(task.omega2 * t);
    if (noise_sd > 0.0) y[t - 1] += noise_sd * rng.normal();
  }
  return y;
}

MatrixXd impulse_input(int T) {
  MatrixXd u = MatrixXd::Zero(T, 1);
  u(0, 0) = 1.0;
  return u;
}

SequenceSet generate(int n, std::uint64_t seed, int T, double noise_sd) {
  SequenceSet set;
  set.T = T;
  set.noise_sd = noise_sd;
  set.seed = seed;
  set.sequences.resize(n, T);
  const Rng base(seed);
  for (int i = 0; i < n; ++i) {
    Rng rng = base.split(static_cast<std::uint64_t>(i));
    const DhoTask task = sample_task(rng);
    set.sequences.row(i) = render_task(task, T, noise_sd, rng).transpose();
    set.tasks.push_back(task);
    set.task_ids.push_back(i);
  }
  return set;
}

std::pair<SequenceSet, SequenceSet> make_dataset(int n_train, int n_test, std::uint64_t seed,
                                                 int T) {
  const Rng root(seed);
  return {generate(n_train, root.split(0).next_u64(), T),
          generate(n_test, root.split(1).next_u64(), T)};
}

void write_dataset(const std::filesystem::path& path, const SequenceSet& set) {
  std::string text;
  json header{{"schema_version", kSchemaVersion},
              {"kind", "dho"},
              {"T", set.T},
              {"noise_sd", set.noise_sd},
              {"seed", set.seed},
              {"n", set.size()}};
  text += header.dump() + "\n";
  for (int i = 0; i < set.size(); ++i) {
    json rec;
    rec["task_id"] = set.task_ids.empty() ? i : set.task_ids[i];
    std::vector<double> y(set.sequences.row(i).begin(), set.sequences.row(i).end());
    rec["y"] = y;
    if (!set.tasks.empty()) {
      const DhoTask& t = set.tasks[i];
      rec["truth"] = {{"omega1", t.omega1}, {"nu1", t.nu1}, {"omega2", t.omega2}, {"nu2", t.nu2}};
    }
    text += rec.dump() + "\n";
  }
  io::write_atomic(path, text);
}

SequenceSet read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty dataset " + path.string());
  const json header = json::parse(line);
  if (header.at("schema_version").get<int>() != kSchemaVersion)
    throw std::runtime_error("unsupported dataset schema_version in " + path.string());
  SequenceSet set;
  set.T = header.at("T").get<int>();
  set.noise_sd = header.at("noise_sd").get<double>();
  set.seed = header.at("seed").get<std::uint64_t>();
  std::vector<std::vector<double>> rows;
  bool have_truth = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    rows.push_back(rec.at("y").get<std::vector<double>>());
    require_dims(static_cast<int>(rows.back().size()) == set.T,
                 "dataset record length differs from header T");
    set.task_ids.push_back(rec.at("task_id").get<int>());
    if (rec.contains("truth")) {
      const json& t = rec["truth"];
      set.tasks.push_back(task_from_half_lives(t.at("omega1").get<double>(), t.at("nu1").get<double>(),
                                               t.at("omega2").get<double>(), t.at("nu2").get<double>()));
    } else {
      have_truth = false;
    }
  }
  if (!have_truth) set.tasks.clear();
  set.sequences.resize(static_cast<Eigen::Index>(rows.size()), set.T);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int t = 0; t < set.T; ++t) set.sequences(static_cast<Eigen::Index>(i), t) = rows[i][t];
  return set;
}

double true_marginal_loglik(const VectorXd& y, int M, Rng& rng, double noise_sd) {
  if (M < 1) throw DomainError("true_marginal_loglik: M must be >= 1");
  VectorXd shift(4);
  for (int d = 0; d < 4; ++d) shift[d] = rng.uniform();
  const MatrixXd u = qmc::sobol_uniform(M, 4, shift);
  const int T = static_cast<int>(y.size());
  const MatrixXd Y = y;
  VectorXd ll(M);
  Rng unused(0);
  for (int m = 0; m < M; ++m) {
    const DhoTask task = task_from_half_lives(
        kOmega1Lo + (kOmega1Hi - kOmega1Lo) * u(m, 0), kNu1Lo + (kNu1Hi - kNu1Lo) * u(m, 1),
        kOmega2Lo + (kOmega2Hi - kOmega2Lo) * u(m, 2), kNu2Lo + (kNu2Hi - kNu2Lo) * u(m, 3));
    const MatrixXd yhat = render_task(task, T, 0.0, unused);
    ll[m] = gaussian_loglik(Y, yhat, noise_sd);
  }
  return stats::log_mean_exp(ll);
}

}  // namespace mtds::dho
