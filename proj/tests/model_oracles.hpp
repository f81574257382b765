#pragma once

// Random model instances and a quadrature reference for one-dimensional codes.

#include <cmath>

#include "mtds/model.hpp"
#include "mtds/stats.hpp"
#include "oracles.hpp"

namespace oracle {

inline mtds::HyperNetParams random_phi(mtds::Rng& rng, const mtds::ModelDims& dims,
                                       double log_s = -1.0) {
  mtds::HyperNetParams phi = mtds::HyperNetParams::zeros(dims);
  phi.hidden_weights = random_matrix(rng, dims.feature_size(), dims.H, 0.8);
  phi.hidden_bias = random_vector(rng, dims.H, 0.5);
  phi.out_weights = random_matrix(rng, dims.H, dims.raw_size(), 0.4);
  phi.out_bias = random_vector(rng, dims.raw_size(), 0.5);
  phi.log_s = log_s;
  return phi;
}

inline mtds::LdsRealization random_system(mtds::Rng& rng, const mtds::ModelDims& dims) {
  return mtds::realize(random_vector(rng, dims.raw_size(), 0.8), -1.0, dims);
}

// Composite Simpson on [-9, 0] and [0, 9]; the code enters the hypernetwork
// through |z|, so the integrand has a kink at the origin.
inline double log_marginal_quadrature(const mtds::HyperNetParams& phi, const mtds::ModelDims& dims,
                                      const MatrixXd& U, const MatrixXd& Y) {
  const int n = 6000;
  const double h = 9.0 / n;
  VectorXd terms(2 * (n + 1));
  Eigen::Index idx = 0;
  for (double sign : {-1.0, 1.0}) {
    for (int j = 0; j <= n; ++j) {
      const double zj = sign * j * h;
      const double coef = (j == 0 || j == n) ? 1.0 : (j % 2 == 1 ? 4.0 : 2.0);
      const VectorXd z = VectorXd::Constant(1, zj);
      const auto fwd = mtds::rollout(mtds::realize(mtds::hypernet_forward(phi, z), phi.log_s, dims), U, dims.base);
      terms[idx++] = std::log(coef * h / 3.0) + mtds::stats::normal_logpdf(zj, 0.0, 1.0) +
                     mtds::gaussian_loglik(Y, fwd.predictions, std::exp(phi.log_s));
    }
  }
  return mtds::stats::log_sum_exp(terms);
}

}  // namespace oracle
