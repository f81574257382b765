#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>

namespace mtds::stats {

// Stable log(sum(exp(x))). Returns -inf when every entry is -inf.
inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double mx = x.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((x.array() - mx).exp().sum());
}

inline double log_mean_exp(const Eigen::Ref<const Eigen::VectorXd>& x) {
  return log_sum_exp(x) - std::log(static_cast<double>(x.size()));
}

inline constexpr double kLog2Pi = 1.8378770664093454836;

// log N(x; mean, sd^2), scalar.
inline double normal_logpdf(double x, double mean, double sd) {
  const double r = (x - mean) / sd;
  return -0.5 * kLog2Pi - std::log(sd) - 0.5 * r * r;
}

}  // namespace mtds::stats
