#pragma once

// Constrained matrix parameterizations used by the multi-task LDS, together
// with their reverse-mode adjoints.
//
// Raw storage conventions (shared with the checkpoint format):
//   * skew coefficients fill the strictly upper triangle row-major:
//     (0,1), (0,2), ..., (0,n-1), (1,2), ..., (n-2,n-1)
//   * matrices are flattened row-major.

#include <Eigen/Dense>

namespace mtds::paramspace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr int skew_count(int n) { return n * (n - 1) / 2; }

struct SkewCoeffs {
  int n = 0;
  VectorXd gamma;  // n(n-1)/2 entries
};

struct StableTransitionRaw {
  VectorXd upsilon;  // pre-tanh diagonal, length n
  SkewCoeffs skew;
};

struct BoundedMatrixRaw {
  MatrixXd b1;  // gate pre-activations
  MatrixXd b2;  // value pre-activations
};

/// S = Gamma - Gamma^T with Gamma strictly upper triangular.
MatrixXd skew_symmetric(const SkewCoeffs& coeffs);

/// Q = (I - S)(I + S)^{-1} via partially pivoted LU. Throws NumericalError if
/// the orthogonality residual ||Q^T Q - I||_F exceeds 1e-8.
MatrixXd cayley(const MatrixXd& S);

/// A = diag(tanh(upsilon)) * cayley(skew_symmetric(gamma)).
MatrixXd stable_transition(const StableTransitionRaw& raw);

/// B = sigmoid(b1) .* tanh(b2).
MatrixXd bounded_matrix(const BoundedMatrixRaw& raw);

// Adjoints. Each takes the forward inputs and dL/d(output) and returns dL/d(inputs).

/// dL/dS for Q = cayley(S).
MatrixXd adjoint_cayley(const MatrixXd& S, const MatrixXd& dQ);

/// dL/dGamma (packed) from dL/dS for S = Gamma - Gamma^T.
VectorXd adjoint_skew_symmetric(int n, const MatrixXd& dS);

StableTransitionRaw adjoint_stable_transition(const StableTransitionRaw& raw,
                                              const MatrixXd& dA);

BoundedMatrixRaw adjoint_bounded_matrix(const BoundedMatrixRaw& raw, const MatrixXd& dB);

}  // namespace mtds::paramspace
