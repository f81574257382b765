#include "mtds/sobol.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mtds/errors.hpp"

namespace mtds::qmc {

namespace {

struct DirectionRow {
  int degree;
  std::uint32_t poly;  // coefficients a (interior bits of the primitive polynomial)
  std::array<std::uint32_t, 8> m;
};

// new-joe-kuo-6.21201, dimensions 2..16. Dimension 1 is van der Corput.
constexpr std::array<DirectionRow, 15> kJoeKuo{{
    {1, 0, {1}},
    {2, 1, {1, 3}},
    {3, 1, {1, 3, 1}},
    {3, 2, {1, 1, 1}},
    {4, 1, {1, 1, 3, 3}},
    {4, 4, {1, 3, 5, 13}},
    {5, 2, {1, 1, 5, 5, 17}},
    {5, 4, {1, 1, 5, 5, 5}},
    {5, 7, {1, 1, 7, 11, 19}},
    {5, 11, {1, 1, 5, 1, 1}},
    {5, 13, {1, 1, 1, 3, 11}},
    {5, 14, {1, 3, 5, 5, 31}},
    {6, 1, {1, 3, 3, 9, 7, 49}},
    {6, 13, {1, 1, 1, 15, 21, 21}},
    {6, 16, {1, 3, 1, 13, 27, 49}},
}};

}  // namespace

SobolSequence::SobolSequence(int dim) : dim_(dim) {
  if (dim < 1 || dim > kMaxDim)
    throw DimensionError("SobolSequence: dimension " + std::to_string(dim) +
                         " unsupported (1.." + std::to_string(kMaxDim) + ")");
  state_.assign(dim, 0u);
  directions_.assign(dim, std::vector<std::uint32_t>(kBits));
  for (int b = 0; b < kBits; ++b) directions_[0][b] = 1u << (kBits - 1 - b);
  for (int d = 1; d < dim; ++d) {
    const DirectionRow& row = kJoeKuo[d - 1];
    auto& v = directions_[d];
    const int s = row.degree;
    for (int b = 0; b < s; ++b) v[b] = row.m[b] << (kBits - 1 - b);
    for (int b = s; b < kBits; ++b) {
      std::uint32_t x = v[b - s] ^ (v[b - s] >> s);
      for (int j = 1; j < s; ++j)
        if ((row.poly >> (s - 1 - j)) & 1u) x ^= v[b - j];
      v[b] = x;
    }
  }
}

void SobolSequence::next(std::vector<double>& out) {
  // Gray-code step from index_ to index_ + 1 flips the lowest zero bit of index_.
  std::uint64_t c = 0, i = index_;
  while (i & 1u) {
    i >>= 1;
    ++c;
  }
  if (c >= static_cast<std::uint64_t>(kBits)) throw NumericalError("SobolSequence exhausted");
  ++index_;
  out.resize(dim_);
  for (int d = 0; d < dim_; ++d) {
    state_[d] ^= directions_[d][c];
    out[d] = static_cast<double>(state_[d]) * 0x1.0p-32;
  }
}

Eigen::MatrixXd sobol_uniform(int M, int dim, const Eigen::VectorXd& shift) {
  require_dims(shift.size() == 0 || shift.size() == dim, "sobol_uniform: shift length");
  SobolSequence seq(dim);
  Eigen::MatrixXd out(M, dim);
  std::vector<double> pt;
  for (int r = 0; r < M; ++r) {
    seq.next(pt);
    for (int d = 0; d < dim; ++d) {
      double u = pt[d];
      if (shift.size() > 0) {
        u += shift[d];
        u -= std::floor(u);
      }
      // Keep strictly inside (0, 1) so the normal map stays finite.
      if (u <= 0.0) u = 0x1.0p-33;
      out(r, d) = u;
    }
  }
  return out;
}

Eigen::MatrixXd sobol_standard_normal(int M, int dim, const Eigen::VectorXd& shift) {
  Eigen::MatrixXd u = sobol_uniform(M, dim, shift);
  return u.unaryExpr(&inverse_normal_cdf);
}

double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw DomainError("inverse_normal_cdf: p outside [0, 1]");
  }
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement.
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

}  // namespace mtds::qmc
