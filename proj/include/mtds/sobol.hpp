#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

namespace mtds::qmc {

/// Unscrambled Sobol sequence with Joe-Kuo direction numbers, generated in
/// Gray-code order (same point order as the common reference generators).
/// The all-zero point at index 0 is skipped, so the first call to next()
/// returns index 1, i.e. (0.5, ..., 0.5).
class SobolSequence {
 public:
  static constexpr int kMaxDim = 16;
  static constexpr int kBits = 32;

  explicit SobolSequence(int dim);

  int dim() const { return dim_; }
  std::uint64_t index() const { return index_; }

  // Writes the next point into out (length dim), values in (0, 1).
  void next(std::vector<double>& out);

 private:
  int dim_;
  std::uint64_t index_ = 0;
  std::vector<std::uint32_t> state_;
  std::vector<std::vector<std::uint32_t>> directions_;  // [dim][bit]
};

/// First M points (indices 1..M) as an M x dim matrix. If shift is non-empty
/// each point is rotated by it modulo 1 (Cranley-Patterson randomization).
Eigen::MatrixXd sobol_uniform(int M, int dim, const Eigen::VectorXd& shift = {});

/// Sobol points mapped through the inverse standard-normal CDF.
Eigen::MatrixXd sobol_standard_normal(int M, int dim, const Eigen::VectorXd& shift = {});

/// Phi^{-1}(p) for p in (0, 1): Acklam's rational approximation followed by
/// one Halley step against erfc, giving close to double precision.
double inverse_normal_cdf(double p);

}  // namespace mtds::qmc
