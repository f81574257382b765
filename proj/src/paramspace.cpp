#include "mtds/paramspace.hpp"

#include <cmath>
#include <string>

#include "mtds/errors.hpp"

namespace mtds::paramspace {

namespace {

struct CayleyParts {
  MatrixXd Q;
  MatrixXd inv_plus;  // (I + S)^{-1}
};

CayleyParts cayley_parts(const MatrixXd& S) {
  require_dims(S.rows() == S.cols(), "cayley: S must be square");
  const auto n = S.rows();
  const MatrixXd I = MatrixXd::Identity(n, n);
  Eigen::PartialPivLU<MatrixXd> lu(I + S);
  CayleyParts out;
  out.inv_plus = lu.inverse();
  out.Q = (I - S) * out.inv_plus;
  const double residual = (out.Q.transpose() * out.Q - I).norm();
  if (!(residual < 1e-8))
    throw NumericalError("cayley: orthogonality residual " + std::to_string(residual));
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

MatrixXd skew_symmetric(const SkewCoeffs& coeffs) {
  const int n = coeffs.n;
  require_dims(n >= 1, "skew_symmetric: n must be >= 1");
  require_dims(coeffs.gamma.size() == skew_count(n),
               "skew_symmetric: expected " + std::to_string(skew_count(n)) +
                   " coefficients, got " + std::to_string(coeffs.gamma.size()));
  MatrixXd S = MatrixXd::Zero(n, n);
  int idx = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      S(i, j) = coeffs.gamma[idx];
      S(j, i) = -coeffs.gamma[idx];
      ++idx;
    }
  return S;
}

MatrixXd cayley(const MatrixXd& S) { return cayley_parts(S).Q; }

MatrixXd stable_transition(const StableTransitionRaw& raw) {
  require_dims(raw.upsilon.size() == raw.skew.n,
               "stable_transition: upsilon length must equal n");
  const MatrixXd Q = cayley(skew_symmetric(raw.skew));
  return raw.upsilon.array().tanh().matrix().asDiagonal() * Q;
}

MatrixXd bounded_matrix(const BoundedMatrixRaw& raw) {
  require_dims(raw.b1.rows() == raw.b2.rows() && raw.b1.cols() == raw.b2.cols(),
               "bounded_matrix: b1 and b2 shapes differ");
  return raw.b1.unaryExpr(&sigmoid).cwiseProduct(raw.b2.array().tanh().matrix());
}

MatrixXd adjoint_cayley(const MatrixXd& S, const MatrixXd& dQ) {
  // dQ = -(I + Q) dS (I + S)^{-1}  =>  dL/dS = -(I + Q)^T G (I + S)^{-T}.
  const CayleyParts parts = cayley_parts(S);
  const auto n = S.rows();
  const MatrixXd IpQ = MatrixXd::Identity(n, n) + parts.Q;
  return -IpQ.transpose() * dQ * parts.inv_plus.transpose();
}

VectorXd adjoint_skew_symmetric(int n, const MatrixXd& dS) {
  require_dims(dS.rows() == n && dS.cols() == n, "adjoint_skew_symmetric: shape");
  VectorXd g(skew_count(n));
  int idx = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) g[idx++] = dS(i, j) - dS(j, i);
  return g;
}

StableTransitionRaw adjoint_stable_transition(const StableTransitionRaw& raw,
                                              const MatrixXd& dA) {
  const int n = raw.skew.n;
  require_dims(raw.upsilon.size() == n && dA.rows() == n && dA.cols() == n,
               "adjoint_stable_transition: shape");
  const MatrixXd S = skew_symmetric(raw.skew);
  const MatrixXd Q = cayley(S);
  const VectorXd sigma = raw.upsilon.array().tanh();

  StableTransitionRaw grad;
  grad.skew.n = n;
  // A_ij = sigma_i Q_ij
  const VectorXd dsigma = dA.cwiseProduct(Q).rowwise().sum();
  grad.upsilon = dsigma.array() * (1.0 - sigma.array().square());
  const MatrixXd dQ = sigma.asDiagonal() * dA;
  grad.skew.gamma = adjoint_skew_symmetric(n, adjoint_cayley(S, dQ));
  return grad;
}

BoundedMatrixRaw adjoint_bounded_matrix(const BoundedMatrixRaw& raw, const MatrixXd& dB) {
  require_dims(dB.rows() == raw.b1.rows() && dB.cols() == raw.b1.cols(),
               "adjoint_bounded_matrix: shape");
  const Eigen::ArrayXXd gate = raw.b1.unaryExpr(&sigmoid).array();
  const Eigen::ArrayXXd val = raw.b2.array().tanh();
  BoundedMatrixRaw grad;
  grad.b1 = (dB.array() * val * gate * (1.0 - gate)).matrix();
  grad.b2 = (dB.array() * gate * (1.0 - val.square())).matrix();
  return grad;
}

}  // namespace mtds::paramspace
