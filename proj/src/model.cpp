#include "mtds/model.hpp"

#include <cmath>
#include <numbers>

#include "mtds/errors.hpp"
#include "mtds/paramspace.hpp"

namespace mtds {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

MatrixXd row_major_block(const VectorXd& raw, int offset, int rows, int cols) {
  MatrixXd M(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) M(i, j) = raw[offset + i * cols + j];
  return M;
}

void put_row_major(VectorXd& raw, int offset, const MatrixXd& M) {
  for (int i = 0; i < M.rows(); ++i)
    for (int j = 0; j < M.cols(); ++j) raw[offset + i * M.cols() + j] = M(i, j);
}

paramspace::StableTransitionRaw transition_raw(const VectorXd& raw, const RawLayout& lay,
                                               int n) {
  paramspace::StableTransitionRaw t;
  t.upsilon = raw.segment(lay.transition, n);
  t.skew.n = n;
  t.skew.gamma = raw.segment(lay.transition + n, paramspace::skew_count(n));
  return t;
}

paramspace::BoundedMatrixRaw input_raw(const VectorXd& raw, const RawLayout& lay, int n,
                                       int m) {
  return {row_major_block(raw, lay.b1, n, m), row_major_block(raw, lay.b2, n, m)};
}

}  // namespace

std::string to_string(BaseModel base) { return base == BaseModel::lds ? "lds" : "rnn"; }

BaseModel base_model_from_string(const std::string& tag) {
  if (tag == "lds") return BaseModel::lds;
  if (tag == "rnn") return BaseModel::rnn;
  throw DimensionError("unknown base model tag '" + tag + "'");
}

RawLayout RawLayout::of(const ModelDims& dims) {
  const int n = dims.n, m = dims.m, p = dims.p;
  RawLayout lay;
  lay.transition = 0;
  lay.transition_size =
      dims.base == BaseModel::lds ? n + paramspace::skew_count(n) : n * n;
  lay.b1 = lay.transition + lay.transition_size;
  lay.b2 = lay.b1 + n * m;
  lay.b = lay.b2 + n * m;
  lay.C = lay.b + n;
  lay.d = lay.C + p * n;
  lay.total = lay.d + p;
  return lay;
}

int ModelDims::raw_size() const { return RawLayout::of(*this).total; }

// ---- HyperNetParams -------------------------------------------------------

HyperNetParams HyperNetParams::zeros(const ModelDims& dims) {
  HyperNetParams phi;
  phi.hidden_weights = MatrixXd::Zero(dims.feature_size(), dims.H);
  phi.hidden_bias = VectorXd::Zero(dims.H);
  phi.out_weights = MatrixXd::Zero(dims.H, dims.raw_size());
  phi.out_bias = VectorXd::Zero(dims.raw_size());
  phi.log_s = 0.0;
  return phi;
}

Eigen::Index HyperNetParams::size() const {
  return hidden_weights.size() + hidden_bias.size() + out_weights.size() + out_bias.size() +
         1;
}

// Flat order: hidden_weights (column-major), hidden_bias, out_weights
// (column-major), out_bias, log_s.
VectorXd HyperNetParams::flatten() const {
  VectorXd flat(size());
  Eigen::Index o = 0;
  auto put = [&](const auto& block) {
    flat.segment(o, block.size()) = Eigen::Map<const VectorXd>(block.data(), block.size());
    o += block.size();
  };
  put(hidden_weights);
  put(hidden_bias);
  put(out_weights);
  put(out_bias);
  flat[o] = log_s;
  return flat;
}

void HyperNetParams::unflatten(const VectorXd& flat) {
  require_dims(flat.size() == size(), "HyperNetParams::unflatten: size mismatch");
  Eigen::Index o = 0;
  auto get = [&](auto& block) {
    Eigen::Map<VectorXd>(block.data(), block.size()) = flat.segment(o, block.size());
    o += block.size();
  };
  get(hidden_weights);
  get(hidden_bias);
  get(out_weights);
  get(out_bias);
  log_s = flat[o];
}

HyperNetParams& HyperNetParams::operator+=(const HyperNetParams& other) {
  hidden_weights += other.hidden_weights;
  hidden_bias += other.hidden_bias;
  out_weights += other.out_weights;
  out_bias += other.out_bias;
  log_s += other.log_s;
  return *this;
}

HyperNetParams& HyperNetParams::operator*=(double scale) {
  hidden_weights *= scale;
  hidden_bias *= scale;
  out_weights *= scale;
  out_bias *= scale;
  log_s *= scale;
  return *this;
}

// ---- forward ----------------------------------------------------------------

VectorXd featurize(const VectorXd& z) {
  const auto k = z.size();
  VectorXd f(3 * k + 1);
  f.head(k) = z;
  f.segment(k, k) = z.array().sin();
  f.segment(2 * k, k) = z.array().cos();
  f[3 * k] = z.norm();
  return f;
}

VectorXd hypernet_forward(const HyperNetParams& phi, const VectorXd& z) {
  require_dims(3 * z.size() + 1 == phi.hidden_weights.rows(),
               "hypernet_forward: latent size does not match hidden_weights");
  const VectorXd f = featurize(z);
  const VectorXd hidden =
      (phi.hidden_weights.transpose() * f + phi.hidden_bias).unaryExpr(&sigmoid);
  return phi.out_weights.transpose() * hidden + phi.out_bias;
}

LdsRealization realize(const VectorXd& raw, double log_s, const ModelDims& dims) {
  const RawLayout lay = RawLayout::of(dims);
  require_dims(raw.size() == lay.total, "realize: raw length " + std::to_string(raw.size()) +
                                            " does not match layout " +
                                            std::to_string(lay.total));
  const int n = dims.n, m = dims.m, p = dims.p;
  LdsRealization out;
  if (dims.base == BaseModel::lds)
    out.A = paramspace::stable_transition(transition_raw(raw, lay, n));
  else
    out.A = row_major_block(raw, lay.transition, n, n);
  out.B = paramspace::bounded_matrix(input_raw(raw, lay, n, m));
  out.b = dims.offsets ? VectorXd(raw.segment(lay.b, n)) : VectorXd::Zero(n);
  out.C = row_major_block(raw, lay.C, p, n);
  out.d = dims.offsets ? VectorXd(raw.segment(lay.d, p)) : VectorXd::Zero(p);
  out.s = std::exp(log_s);
  return out;
}

RolloutResult rollout_lds(const LdsRealization& params, const MatrixXd& U) {
  const auto T = U.rows();
  require_dims(T >= 1, "rollout: need T >= 1");
  require_dims(U.cols() == params.B.cols(), "rollout: input width mismatch");
  const auto n = params.A.rows();
  RolloutResult r{MatrixXd(T, n), MatrixXd(T, params.C.rows())};
  VectorXd x = VectorXd::Zero(n);
  for (Eigen::Index t = 0; t < T; ++t) {
    x = params.A * x + params.B * U.row(t).transpose() + params.b;
    r.states.row(t) = x.transpose();
    r.predictions.row(t) = (params.C * x + params.d).transpose();
  }
  return r;
}

RolloutResult rollout_rnn(const LdsRealization& params, const MatrixXd& U) {
  const auto T = U.rows();
  require_dims(T >= 1, "rollout: need T >= 1");
  require_dims(U.cols() == params.B.cols(), "rollout: input width mismatch");
  const auto n = params.A.rows();
  RolloutResult r{MatrixXd(T, n), MatrixXd(T, params.C.rows())};
  VectorXd x = VectorXd::Zero(n);
  for (Eigen::Index t = 0; t < T; ++t) {
    x = (params.A * x + params.B * U.row(t).transpose() + params.b).array().tanh().matrix();
    r.states.row(t) = x.transpose();
    r.predictions.row(t) = (params.C * x + params.d).transpose();
  }
  return r;
}

RolloutResult rollout(const LdsRealization& params, const MatrixXd& U, BaseModel base) {
  return base == BaseModel::lds ? rollout_lds(params, U) : rollout_rnn(params, U);
}

double gaussian_loglik(const MatrixXd& Y, const MatrixXd& Yhat, double s) {
  if (!(s > 0.0)) throw DomainError("gaussian_loglik: s must be positive");
  require_dims(Y.cols() == Yhat.cols() && Y.rows() <= Yhat.rows(),
               "gaussian_loglik: shape mismatch");
  const double sq = (Y - Yhat.topRows(Y.rows())).squaredNorm();
  const double count = static_cast<double>(Y.size());
  return -0.5 * count * std::log(2.0 * std::numbers::pi * s * s) - sq / (2.0 * s * s);
}

LdsRealization similarity_transform(const LdsRealization& params, const MatrixXd& G) {
  require_dims(G.rows() == params.A.rows() && G.cols() == G.rows(),
               "similarity_transform: G must be n x n");
  Eigen::FullPivLU<MatrixXd> lu(G);
  if (!lu.isInvertible()) throw NumericalError("similarity_transform: G is singular");
  LdsRealization out = params;
  out.A = lu.solve(params.A * G);
  out.B = lu.solve(params.B);
  out.b = lu.solve(params.b);
  out.C = params.C * G;
  return out;
}

// ---- reverse mode -----------------------------------------------------------

SystemGrad rollout_backward(const LdsRealization& params, const MatrixXd& U,
                            const RolloutResult& fwd, const MatrixXd& dYhat, BaseModel base) {
  const auto T = U.rows();
  const auto n = params.A.rows();
  require_dims(dYhat.rows() == T && dYhat.cols() == params.C.rows(),
               "rollout_backward: dYhat shape");
  SystemGrad g{MatrixXd::Zero(n, n), MatrixXd::Zero(n, params.B.cols()), VectorXd::Zero(n),
               MatrixXd::Zero(params.C.rows(), n), VectorXd::Zero(params.C.rows())};
  g.C = dYhat.transpose() * fwd.states;
  g.d = dYhat.colwise().sum().transpose();

  // carry = dL/d(pre-activation of x_{t+1}) propagated back through A.
  VectorXd carry = VectorXd::Zero(n);
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    VectorXd lambda = params.C.transpose() * dYhat.row(t).transpose() + carry;
    if (base == BaseModel::rnn)
      lambda.array() *= 1.0 - fwd.states.row(t).transpose().array().square();
    if (t > 0) g.A.noalias() += lambda * fwd.states.row(t - 1);
    g.B.noalias() += lambda * U.row(t);
    g.b += lambda;
    carry.noalias() = params.A.transpose() * lambda;
  }
  return g;
}

VectorXd realize_backward(const VectorXd& raw, const ModelDims& dims, const SystemGrad& grad) {
  const RawLayout lay = RawLayout::of(dims);
  require_dims(raw.size() == lay.total, "realize_backward: raw length mismatch");
  const int n = dims.n, m = dims.m;
  VectorXd draw = VectorXd::Zero(lay.total);
  if (dims.base == BaseModel::lds) {
    const auto gt = paramspace::adjoint_stable_transition(transition_raw(raw, lay, n), grad.A);
    draw.segment(lay.transition, n) = gt.upsilon;
    draw.segment(lay.transition + n, paramspace::skew_count(n)) = gt.skew.gamma;
  } else {
    put_row_major(draw, lay.transition, grad.A);
  }
  const auto gb = paramspace::adjoint_bounded_matrix(input_raw(raw, lay, n, m), grad.B);
  put_row_major(draw, lay.b1, gb.b1);
  put_row_major(draw, lay.b2, gb.b2);
  if (dims.offsets) draw.segment(lay.b, n) = grad.b;
  put_row_major(draw, lay.C, grad.C);
  if (dims.offsets) draw.segment(lay.d, dims.p) = grad.d;
  return draw;
}

void hypernet_backward(const HyperNetParams& phi, const VectorXd& z, const VectorXd& draw,
                       HyperNetParams& dphi, VectorXd* dz) {
  const auto k = z.size();
  const VectorXd f = featurize(z);
  const VectorXd hidden =
      (phi.hidden_weights.transpose() * f + phi.hidden_bias).unaryExpr(&sigmoid);

  dphi.out_weights.noalias() += hidden * draw.transpose();
  dphi.out_bias += draw;
  const VectorXd dhidden = phi.out_weights * draw;
  const VectorXd dpre = dhidden.array() * hidden.array() * (1.0 - hidden.array());
  dphi.hidden_weights.noalias() += f * dpre.transpose();
  dphi.hidden_bias += dpre;

  if (dz != nullptr) {
    const VectorXd df = phi.hidden_weights * dpre;
    VectorXd g = df.head(k);
    g.array() += df.segment(k, k).array() * z.array().cos();
    g.array() -= df.segment(2 * k, k).array() * z.array().sin();
    const double norm = z.norm();
    // ||z|| is not differentiable at 0; use the zero subgradient there.
    if (norm > 0.0) g += df[3 * k] * z / norm;
    *dz = g;
  }
}

LossGrad loss_backward(const HyperNetParams& phi, const VectorXd& z, const MatrixXd& U,
                       const MatrixXd& Y, const ModelDims& dims) {
  const VectorXd raw = hypernet_forward(phi, z);
  LossGrad out;
  out.dphi = HyperNetParams::zeros(dims);
  VectorXd draw;
  out.value = raw_loss_backward(raw, phi.log_s, U, Y, dims, draw, out.dlog_s);
  hypernet_backward(phi, z, draw, out.dphi, &out.dz);
  out.dphi.log_s = out.dlog_s;
  return out;
}

double raw_loss_backward(const VectorXd& raw, double log_s, const MatrixXd& U,
                         const MatrixXd& Y, const ModelDims& dims, VectorXd& draw,
                         double& dlog_s) {
  require_dims(Y.rows() == U.rows(), "loss_backward: Y and U lengths differ");
  const LdsRealization sys = realize(raw, log_s, dims);
  const RolloutResult fwd = rollout(sys, U, dims.base);
  const double value = gaussian_loglik(Y, fwd.predictions, sys.s);
  const MatrixXd resid = Y - fwd.predictions;
  const double s2 = sys.s * sys.s;
  dlog_s = -static_cast<double>(Y.size()) + resid.squaredNorm() / s2;
  const SystemGrad g = rollout_backward(sys, U, fwd, resid / s2, dims.base);
  draw = realize_backward(raw, dims, g);
  return value;
}

}  // namespace mtds
