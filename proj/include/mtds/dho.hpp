#pragma once

// Damped harmonic oscillator benchmark: task prior, rendering, datasets and
// the dataset file format.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <utility>
#include <vector>

#include "mtds/random.hpp"

namespace mtds::dho {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kGamma1 = 1.0;
inline constexpr double kGamma2 = -0.5;
inline constexpr int kDefaultLength = 80;
inline constexpr double kNoiseSd = 0.05;
inline constexpr int kSchemaVersion = 1;

// Prior ranges. Frequencies in radians per step.
inline constexpr double kBaseFreq = 2.0 * std::numbers::pi / 80.0;
inline constexpr double kOmega1Lo = 1.5 * kBaseFreq, kOmega1Hi = 6.0 * kBaseFreq;
inline constexpr double kOmega2Lo = 5.0 * kBaseFreq, kOmega2Hi = 8.0 * kBaseFreq;
inline constexpr double kNu1Lo = 4.0, kNu1Hi = 80.0;
inline constexpr double kNu2Lo = 8.0, kNu2Hi = 60.0;

struct DhoTask {
  double omega1 = 0.0, nu1 = 1.0, rho1 = 0.5;
  double omega2 = 0.0, nu2 = 1.0, rho2 = 0.5;
};

/// rho = exp(-ln 2 / nu).
double half_life_to_decay(double nu);

DhoTask task_from_half_lives(double omega1, double nu1, double omega2, double nu2);

/// Independent uniform draws in the order omega1, nu1, omega2, nu2.
DhoTask sample_task(Rng& rng);

/// y_t = g1 rho1^t sin(omega1 t) + g2 rho2^t sin(omega2 t) + eps_t, t = 1..T.
VectorXd render_task(const DhoTask& task, int T, double noise_sd, Rng& rng);

struct SequenceSet {
  int T = kDefaultLength;
  double noise_sd = kNoiseSd;
  std::uint64_t seed = 0;
  std::vector<int> task_ids;
  MatrixXd sequences;          // N x T
  std::vector<DhoTask> tasks;  // empty when ground truth is unknown

  int size() const { return static_cast<int>(sequences.rows()); }
  // Sequence i as a T x 1 matrix.
  MatrixXd sequence(int i) const { return sequences.row(i).transpose(); }
};

/// u = [1, 0, 0, ...] as a T x 1 matrix.
MatrixXd impulse_input(int T);

/// n sequences; task i uses stream Rng(seed).split(i): task draw first, then
/// noise for t = 1..T.
SequenceSet generate(int n, std::uint64_t seed, int T = kDefaultLength,
                     double noise_sd = kNoiseSd);

/// Training and test sets from disjoint streams of one seed.
std::pair<SequenceSet, SequenceSet> make_dataset(int n_train, int n_test, std::uint64_t seed,
                                                 int T = kDefaultLength);

// Line-delimited JSON: a header object then one record per sequence.
void write_dataset(const std::filesystem::path& path, const SequenceSet& set);
SequenceSet read_dataset(const std::filesystem::path& path);

/// log (1/M) sum_m p(y | task_m) with tasks taken from the generating prior
/// via Sobol points (randomly shifted using rng) and emission std noise_sd.
double true_marginal_loglik(const VectorXd& y, int M, Rng& rng, double noise_sd = kNoiseSd);

}  // namespace mtds::dho
