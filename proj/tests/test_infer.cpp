#include <doctest.h>

#include <cmath>
#include <vector>

#include "mtds/dho.hpp"
#include "mtds/errors.hpp"
#include "mtds/infer.hpp"
#include "mtds/learn.hpp"
#include "mtds/stats.hpp"
#include "oracles.hpp"

using namespace mtds;
using namespace mtds::infer;

namespace {

struct Conjugate {
  MatrixXd H;
  VectorXd y;
  double sigma = 0.5;
  VectorXd post_mean;
  MatrixXd post_cov;

  VectorXd operator()(const MatrixXd& X) const {
    VectorXd out(X.rows());
    for (Eigen::Index m = 0; m < X.rows(); ++m) {
      const VectorXd x = X.row(m).transpose();
      out[m] = -0.5 * x.squaredNorm() - 0.5 * (y - H * x).squaredNorm() / (sigma * sigma);
    }
    return out;
  }
};

Conjugate make_conjugate(int d, std::uint64_t seed) {
  Rng rng(seed);
  Conjugate c;
  c.H = oracle::random_matrix(rng, d + 2, d);
  const VectorXd truth = oracle::random_vector(rng, d);
  c.y = c.H * truth;
  for (Eigen::Index i = 0; i < c.y.size(); ++i) c.y[i] += c.sigma * rng.normal();
  const MatrixXd precision = MatrixXd::Identity(d, d) + c.H.transpose() * c.H / (c.sigma * c.sigma);
  c.post_cov = precision.inverse();
  c.post_mean = c.post_cov * c.H.transpose() * c.y / (c.sigma * c.sigma);
  return c;
}

MatrixXd two_clusters(int per, Rng& rng, VectorXd& w) {
  MatrixXd X(2 * per, 2);
  for (int i = 0; i < 2 * per; ++i) {
    const double cx = i < per ? -3.0 : 3.0;
    X(i, 0) = cx + 0.3 * rng.normal();
    X(i, 1) = 1.0 + 0.3 * rng.normal();
  }
  w = VectorXd::Constant(2 * per, 1.0 / (2 * per));
  return X;
}

}  // namespace

TEST_CASE("ess") {
  CHECK(ess(VectorXd::Constant(1000, 1e-3)) == doctest::Approx(1000.0).epsilon(1e-12));
  VectorXd one_hot = VectorXd::Zero(10);
  one_hot[3] = 1.0;
  CHECK(ess(one_hot) == 1.0);
  VectorXd halves = VectorXd::Zero(50);
  halves[0] = halves[7] = 0.5;
  CHECK(ess(halves) == 2.0);
  CHECK_THROWS_AS(ess(VectorXd::Constant(4, 1.0)), DomainError);

  Rng rng(1);
  for (int rep = 0; rep < 50; ++rep) {
    VectorXd w(20);
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.uniform();
    w /= w.sum();
    const double e = ess(w);
    CHECK(e >= 1.0);
    CHECK(e <= 20.0 + 1e-12);
    VectorXd rev = w.reverse();
    CHECK(ess(rev) == doctest::Approx(e).epsilon(1e-12));
  }
}

TEST_CASE("MoG density") {
  Rng rng(2);
  MoGPosterior q;
  q.alpha = VectorXd::Ones(2) * 0.5;
  q.alpha << 0.3, 0.7;
  q.mu = {VectorXd::Constant(2, -1.0), VectorXd::Constant(2, 1.5)};
  MatrixXd c0(2, 2), c1(2, 2);
  c0 << 0.5, 0.1, 0.1, 0.3;
  c1 << 1.0, -0.4, -0.4, 0.8;
  q.cov = {c0, c1};
  q.refresh();

  SUBCASE("matches a hand-written mixture density") {
    VectorXd x(2);
    x << 0.2, -0.4;
    auto gauss = [&](const VectorXd& mu, const MatrixXd& S) {
      const VectorXd d = x - mu;
      return std::exp(-0.5 * d.dot(S.inverse() * d)) / (2.0 * M_PI * std::sqrt(S.determinant()));
    };
    const double ref = 0.3 * gauss(q.mu[0], c0) + 0.7 * gauss(q.mu[1], c1);
    CHECK(q.logpdf(x) == doctest::Approx(std::log(ref)).epsilon(1e-12));
  }
  SUBCASE("integrates to one") {
    // E_r[q / r] = 1 with r a broad Gaussian covering q.
    const MoGPosterior r = MoGPosterior::gaussian(VectorXd::Zero(2), 9.0 * MatrixXd::Identity(2, 2));
    const MatrixXd X = r.sample(200000, rng);
    const VectorXd ratio = (q.logpdf_rows(X) - r.logpdf_rows(X)).array().exp();
    const double mean = ratio.mean();
    const double se = std::sqrt((ratio.array() - mean).square().mean() / ratio.size());
    CHECK(std::abs(mean - 1.0) < 3.0 * se);
  }
  SUBCASE("sample moments") {
    const MatrixXd X = q.sample(200000, rng);
    const VectorXd m = X.colwise().mean().transpose();
    CHECK((m - q.mean()).cwiseAbs().maxCoeff() < 0.02);
    const MatrixXd Xc = X.rowwise() - m.transpose();
    const MatrixXd C = Xc.transpose() * Xc / static_cast<double>(X.rows());
    CHECK((C - q.covariance()).norm() / q.covariance().norm() < 0.02);
  }
  SUBCASE("validation") {
    MoGPosterior bad = q;
    bad.alpha << 0.5, 0.6;
    CHECK_THROWS_AS(bad.refresh(), DomainError);
    bad = q;
    bad.cov[0] << 1.0, 2.0, 2.0, 1.0;
    CHECK_THROWS_AS(bad.refresh(), NumericalError);
  }
}

TEST_CASE("weighted EM") {
  Rng rng(3);
  SUBCASE("J = 1 equals the weighted moments") {
    for (int rep = 0; rep < 20; ++rep) {
      const MatrixXd X = oracle::random_matrix(rng, 40, 3);
      VectorXd w(40);
      for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.uniform();
      w /= w.sum();
      const MoGPosterior q = weighted_em(X, w, 1, nullptr, 3, 100, rng);
      VectorXd mean = VectorXd::Zero(3);
      for (int m = 0; m < 40; ++m) mean += w[m] * X.row(m).transpose();
      MatrixXd cov = MatrixXd::Zero(3, 3);
      for (int m = 0; m < 40; ++m) {
        const VectorXd d = X.row(m).transpose() - mean;
        cov += w[m] * d * d.transpose();
      }
      CHECK(oracle::relative_error(q.mu[0], mean) < 1e-12);
      CHECK(oracle::relative_error(oracle::matrix_to_flat(q.cov[0]), oracle::matrix_to_flat(cov)) < 1e-12);
      CHECK(q.alpha[0] == 1.0);
    }
  }
  SUBCASE("two separated clusters") {
    VectorXd w;
    const MatrixXd X = two_clusters(200, rng, w);
    const MoGPosterior q = weighted_em(X, w, 2, nullptr, 3, 100, rng);
    std::vector<double> xs = {q.mu[0][0], q.mu[1][0]};
    std::sort(xs.begin(), xs.end());
    CHECK(std::abs(xs[0] + 3.0) < 0.1);
    CHECK(std::abs(xs[1] - 3.0) < 0.1);
    CHECK(std::abs(q.mu[0][1] - 1.0) < 0.1);
  }
  SUBCASE("weights on one sample") {
    const MatrixXd X = oracle::random_matrix(rng, 30, 2);
    VectorXd w = VectorXd::Zero(30);
    w[11] = 1.0;
    const MoGPosterior q = weighted_em(X, w, 1, nullptr, 3, 100, rng);
    CHECK((q.mu[0] - X.row(11).transpose()).norm() < 1e-9);
  }
  SUBCASE("log-likelihood is non-decreasing") {
    int checked = 0, reseeds = 0;
    for (int rep = 0; rep < 100; ++rep) {
      const int J = 1 + rep % 3;
      MatrixXd X = oracle::random_matrix(rng, 200, 2);
      X.topRows(70).array() += 2.5;
      VectorXd w(200);
      for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = std::exp(rng.normal());
      w /= w.sum();
      EmTrace tr;
      weighted_em(X, w, J, nullptr, 3, 100, rng, &tr);
      reseeds += tr.reseeded;
      for (std::size_t i = 1; i < tr.loglik.size(); ++i) {
        if (std::find(tr.irregular.begin(), tr.irregular.end(), static_cast<int>(i)) != tr.irregular.end()) continue;
        CHECK(tr.loglik[i] >= tr.loglik[i - 1] - 1e-9 * (1.0 + std::abs(tr.loglik[i - 1])));
        ++checked;
      }
    }
    // Collapsed components are reseeded, which is exempt from the check.
    CHECK(checked + reseeds >= 300);
    CHECK(reseeds <= 3);
  }
  SUBCASE("warm start keeps the component count") {
    VectorXd w;
    const MatrixXd X = two_clusters(100, rng, w);
    const MoGPosterior first = weighted_em(X, w, 2, nullptr, 3, 100, rng);
    const MoGPosterior second = weighted_em(X, w, 2, &first, 3, 100, rng);
    CHECK(second.components() == 2);
    CHECK(weighted_loglik(second, X, w) >= weighted_loglik(first, X, w) - 1e-12);
  }
}

TEST_CASE("AdaIS on a conjugate Gaussian target") {
  const AdaisHyper hyper;
  for (int d : {1, 2, 4}) {
    CAPTURE(d);
    const Conjugate c = make_conjugate(d, 100 + d);
    Rng rng(7 + d);
    const MoGPosterior prior = MoGPosterior::gaussian(VectorXd::Zero(d), MatrixXd::Identity(d, d));
    const AdaisResult r = adais_refine([&](const MatrixXd& X) { return c(X); }, prior, hyper, rng, true);
    CHECK(r.converged);
    CHECK(r.ess_trace.back() >= hyper.M_ess);
    const VectorXd sd = c.post_cov.diagonal().cwiseSqrt();
    CHECK(((r.q.mean() - c.post_mean).cwiseAbs().array() / sd.array()).maxCoeff() < 0.05);
    CHECK((r.q.covariance() - c.post_cov).norm() / c.post_cov.norm() < 0.10);
    CHECK(r.samples.rows() == hyper.M_final);
    CHECK(r.weights.sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("AdaIS self-targeting and determinism") {
  AdaisHyper hyper;
  const MoGPosterior prior = MoGPosterior::prior(2);
  const LogDensity target = [&](const MatrixXd& X) { return prior.logpdf_rows(X); };
  Rng rng(11);
  const AdaisResult r = adais_refine(target, prior, hyper, rng, true);
  REQUIRE(!r.ess_trace.empty());
  CHECK(r.ess_trace.front() == doctest::Approx(hyper.M_0).epsilon(1e-9));
  CHECK((r.q.mean() - prior.mean()).cwiseAbs().maxCoeff() < 0.1);
  CHECK((r.q.covariance() - prior.covariance()).norm() / prior.covariance().norm() < 0.1);

  Rng a(12), b(12);
  const AdaisResult ra = adais_refine(target, prior, hyper, a, true);
  const AdaisResult rb = adais_refine(target, prior, hyper, b, true);
  CHECK(ra.ess_trace == rb.ess_trace);
  CHECK(ra.q.mean() == rb.q.mean());
}

TEST_CASE("AdaIS failure and hyperparameter validation") {
  AdaisHyper hyper;
  hyper.M = 50;
  hyper.M_0 = 50;
  hyper.M_final = 50;
  hyper.M_ess = 10;
  const MoGPosterior prior = MoGPosterior::gaussian(VectorXd::Zero(1), MatrixXd::Identity(1, 1));
  Rng rng(1);
  const LogDensity dead = [](const MatrixXd& X) {
    return VectorXd::Constant(X.rows(), -std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(adais_refine(dead, prior, hyper, rng, true), NumericalError);
  hyper.M_ess = 100;
  CHECK_THROWS_AS(hyper.validate(), DomainError);
}

TEST_CASE("filtering and prediction on DHO data") {
  ModelDims dims;
  dims.H = 16;
  Rng init(5);
  const HyperNetParams phi = learn::init_hypernet(dims, init);
  const dho::SequenceSet set = dho::generate(1, 3, 30);
  const MatrixXd Y = set.sequence(0);
  const MatrixXd U = dho::impulse_input(30);
  AdaisHyper hyper;
  hyper.M = 200;
  hyper.M_0 = 400;
  hyper.M_final = 400;
  hyper.M_ess = 50;

  SUBCASE("one step when tau equals the horizon") {
    Rng rng(1);
    const auto steps = filter_posteriors(Y, U, phi, dims, 30, hyper, rng);
    REQUIRE(steps.size() == 1u);
    CHECK(steps[0].t == 30);
    CHECK(steps[0].result.q.dim() == dims.k + 1);
  }
  SUBCASE("steps at multiples of tau") {
    Rng rng(1);
    const auto steps = filter_posteriors(Y, U, phi, dims, 5, hyper, rng, 20);
    REQUIRE(steps.size() == 4u);
    for (int i = 0; i < 4; ++i) CHECK(steps[i].t == 5 * (i + 1));
    const std::string rec = posterior_record(steps[3].t, steps[3].result);
    CHECK(rec.find("\"cov_cholesky\"") != std::string::npos);
    CHECK(rec.find("\"t\":20") != std::string::npos);
  }
  SUBCASE("prefix joint density matches a direct evaluation") {
    MatrixXd X(1, dims.k + 1);
    X << 0.1, -0.2, 0.3, 0.4, -1.9;
    const VectorXd v = prefix_log_joint(phi, dims, U, Y.topRows(12), X);
    const VectorXd z = X.row(0).head(dims.k).transpose();
    const auto fwd = rollout(realize(hypernet_forward(phi, z), -1.9, dims), U, dims.base);
    double ref = gaussian_loglik(Y.topRows(12), fwd.predictions, std::exp(-1.9));
    for (int j = 0; j < dims.k; ++j) ref += stats::normal_logpdf(z[j], 0.0, 1.0);
    ref += stats::normal_logpdf(-1.9, -2.0, 0.1);
    CHECK(v[0] == doctest::Approx(ref).epsilon(1e-12));
  }
  SUBCASE("point-mass posterior predicts the single rollout") {
    VectorXd mean(dims.k + 1);
    mean << 0.5, -0.5, 0.2, 0.0, -2.3;
    const MoGPosterior point = MoGPosterior::gaussian(mean, 1e-30 * MatrixXd::Identity(dims.k + 1, dims.k + 1));
    Rng rng(2);
    const Predictive pred = posterior_predictive(point, phi, dims, U, 10, 20, 400, rng);
    const auto fwd = rollout(realize(hypernet_forward(phi, mean.head(dims.k)), -2.3, dims), U, dims.base);
    CHECK((pred.mean - fwd.predictions.middleRows(10, 20)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((pred.lo95.array() <= pred.mean.array()).all());
    CHECK((pred.hi95.array() >= pred.mean.array()).all());
  }
  SUBCASE("Monte Carlo means agree across sample sizes") {
    const MoGPosterior prior = MoGPosterior::prior(dims.k);
    Rng r1(3), r2(4);
    const Predictive small = posterior_predictive(prior, phi, dims, U, 0, 30, 1000, r1);
    const Predictive big = posterior_predictive(prior, phi, dims, U, 0, 30, 10000, r2);
    for (int t = 0; t < 30; ++t) {
      double var = 0.0;
      for (const auto& y : big.yhat) var += std::pow(y(t, 0) - big.mean(t, 0), 2);
      var /= 10000.0;
      const double se = std::sqrt(var / 1000.0 + var / 10000.0);
      CHECK(std::abs(small.mean(t, 0) - big.mean(t, 0)) <= 3.0 * se + 1e-12);
    }
  }
}

TEST_CASE("predictive metrics") {
  Predictive pred;
  pred.mean = MatrixXd::Zero(5, 1);
  pred.yhat = {MatrixXd::Zero(5, 1)};
  pred.s = VectorXd::Constant(1, 0.1);
  const Metrics m = metrics_rmse_nll(MatrixXd::Zero(5, 1), pred);
  CHECK(m.rmse == 0.0);
  CHECK(m.nll == doctest::Approx(0.5 * std::log(2.0 * M_PI * 0.01)).epsilon(1e-12));
  CHECK(m.nll == doctest::Approx(-1.383646).epsilon(1e-6));

  Rng rng(9);
  MatrixXd y(2000, 1);
  for (int i = 0; i < 2000; ++i) y(i, 0) = 0.7 + 0.3 * rng.normal();
  Predictive constant;
  constant.mean = MatrixXd::Constant(2000, 1, y.mean());
  constant.yhat = {constant.mean};
  constant.s = VectorXd::Constant(1, 0.3);
  const double var = (y.array() - y.mean()).square().mean();
  CHECK(std::pow(metrics_rmse_nll(y, constant).rmse, 2) == doctest::Approx(var).epsilon(1e-12));
}
