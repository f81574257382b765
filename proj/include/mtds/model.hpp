#pragma once

// Hypernetwork h_phi: z -> raw system parameters, the two base models
// (deterministic LDS and tanh RNN), the Gaussian emission likelihood, and
// exact reverse-mode gradients through all of it.

#include <Eigen/Dense>
#include <string>

namespace mtds {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class BaseModel { lds, rnn };

std::string to_string(BaseModel base);
BaseModel base_model_from_string(const std::string& tag);

struct ModelDims {
  int n = 4;    // state
  int m = 1;    // input
  int p = 1;    // output
  int k = 4;    // latent code
  int H = 300;  // hypernetwork hidden units
  BaseModel base = BaseModel::lds;
  bool offsets = true;  // false: b and d are fixed at zero

  int feature_size() const { return 3 * k + 1; }
  int raw_size() const;
};

// Offsets into the raw parameter vector. Layout (version 1):
//   lds: [upsilon(n), gamma(n(n-1)/2), B1(n*m), B2(n*m), b(n), C(p*n), d(p)]
//   rnn: [A(n*n),                      B1(n*m), B2(n*m), b(n), C(p*n), d(p)]
// Matrices are row-major.
struct RawLayout {
  int transition = 0;  // start of upsilon (lds) or A (rnn)
  int transition_size = 0;
  int b1 = 0, b2 = 0, b = 0, C = 0, d = 0, total = 0;

  static RawLayout of(const ModelDims& dims);
};

struct HyperNetParams {
  MatrixXd hidden_weights;  // (3k+1) x H
  VectorXd hidden_bias;     // H
  MatrixXd out_weights;     // H x d_raw
  VectorXd out_bias;        // d_raw
  double log_s = 0.0;       // global log emission std-dev

  static HyperNetParams zeros(const ModelDims& dims);

  Eigen::Index size() const;
  VectorXd flatten() const;
  // Inverse of flatten; shapes must already be set (e.g. via zeros()).
  void unflatten(const VectorXd& flat);

  HyperNetParams& operator+=(const HyperNetParams& other);
  HyperNetParams& operator*=(double scale);
};

struct LdsRealization {
  MatrixXd A;  // n x n
  MatrixXd B;  // n x m
  VectorXd b;  // n
  MatrixXd C;  // p x n
  VectorXd d;  // p
  double s = 1.0;
};

struct RolloutResult {
  MatrixXd states;       // T x n, row t-1 holds x_t
  MatrixXd predictions;  // T x p
};

/// [z; sin z; cos z; ||z||]
VectorXd featurize(const VectorXd& z);

VectorXd hypernet_forward(const HyperNetParams& phi, const VectorXd& z);

/// Maps a raw vector to system matrices per RawLayout. For the LDS the
/// transition uses the stable parameterization; the RNN transition is taken
/// as-is.
LdsRealization realize(const VectorXd& raw, double log_s, const ModelDims& dims);

/// x_t = A x_{t-1} + B u_t + b, y_t = C x_t + d, x_0 = 0. U is T x m.
RolloutResult rollout_lds(const LdsRealization& params, const MatrixXd& U);

/// x_t = tanh(A x_{t-1} + B u_t + b), y_t = C x_t + d, x_0 = 0.
RolloutResult rollout_rnn(const LdsRealization& params, const MatrixXd& U);

RolloutResult rollout(const LdsRealization& params, const MatrixXd& U, BaseModel base);

/// Sum over entries of log N(y; yhat, s^2). Only the first Y.rows() rows of
/// Yhat are used, so a prefix of the observations can be scored against a
/// longer rollout.
double gaussian_loglik(const MatrixXd& Y, const MatrixXd& Yhat, double s);

/// A <- G^-1 A G, B <- G^-1 B, b <- G^-1 b, C <- C G, d <- d.
LdsRealization similarity_transform(const LdsRealization& params, const MatrixXd& G);

// ---- reverse mode -------------------------------------------------------

struct SystemGrad {
  MatrixXd A, B;
  VectorXd b;
  MatrixXd C;
  VectorXd d;
};

/// Backpropagation through time given dL/dYhat (T x p).
SystemGrad rollout_backward(const LdsRealization& params, const MatrixXd& U,
                            const RolloutResult& fwd, const MatrixXd& dYhat, BaseModel base);

/// dL/draw from system-matrix gradients.
VectorXd realize_backward(const VectorXd& raw, const ModelDims& dims, const SystemGrad& grad);

/// Accumulates dL/dphi into `dphi` (log_s untouched) and, if dz is non-null,
/// writes dL/dz.
void hypernet_backward(const HyperNetParams& phi, const VectorXd& z, const VectorXd& draw,
                       HyperNetParams& dphi, VectorXd* dz);

struct LossGrad {
  double value = 0.0;     // log p(Y | U, h_phi(z), s)
  HyperNetParams dphi;    // includes d/dlog_s in dphi.log_s
  VectorXd dz;
  double dlog_s = 0.0;
};

/// Log-likelihood of Y under the model at code z and its gradient with
/// respect to phi, z and log_s. The emission std-dev is exp(phi.log_s).
LossGrad loss_backward(const HyperNetParams& phi, const VectorXd& z, const MatrixXd& U,
                       const MatrixXd& Y, const ModelDims& dims);

/// Same, but for a raw parameter vector (no hypernetwork). Used by the pooled
/// baseline. Returns the value and fills draw / dlog_s.
double raw_loss_backward(const VectorXd& raw, double log_s, const MatrixXd& U,
                         const MatrixXd& Y, const ModelDims& dims, VectorXd& draw,
                         double& dlog_s);

}  // namespace mtds
