// Acceptance report: one PASS / FAIL / SKIP line per criterion.
//   acceptance [--full] [--out DIR] [--only N,...]
// Criteria 1 and 3 need the full training budget and are skipped without --full.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "model_oracles.hpp"
#include "mtds/bench.hpp"
#include "mtds/dho.hpp"
#include "mtds/infer.hpp"
#include "mtds/io.hpp"
#include "mtds/learn.hpp"
#include "mtds/paramspace.hpp"

using namespace mtds;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

struct Outcome {
  enum Kind { pass, fail, skip } kind = fail;
  std::string detail;
};

Outcome verdict(bool ok, const std::string& detail) { return {ok ? Outcome::pass : Outcome::fail, detail}; }

std::string num(double x, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << x;
  return s.str();
}

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

// ---- 4: analytic gradients against central differences ----------------------

Outcome gradient_suite() {
  using namespace paramspace;
  const auto t0 = clock_type::now();
  Rng rng(4004);
  double worst = 0.0;
  int instances = 0;
  for (int draw = 0; draw < 60; ++draw) {
    const int n = 1 + draw % 6;
    {
      const SkewCoeffs sk{n, oracle::random_vector(rng, skew_count(n), 0.8)};
      const MatrixXd W = oracle::random_matrix(rng, n, n);
      auto f = [&](const VectorXd& g) { return W.cwiseProduct(cayley(skew_symmetric({n, g}))).sum(); };
      const VectorXd an = adjoint_skew_symmetric(n, adjoint_cayley(skew_symmetric(sk), W));
      worst = std::max(worst, oracle::relative_error(an, oracle::central_difference(f, sk.gamma)));
    }
    {
      const StableTransitionRaw raw{oracle::random_vector(rng, n, 1.5),
                                    {n, oracle::random_vector(rng, skew_count(n), 0.7)}};
      const MatrixXd W = oracle::random_matrix(rng, n, n);
      VectorXd x(n + skew_count(n));
      x << raw.upsilon, raw.skew.gamma;
      auto f = [&](const VectorXd& v) {
        return W.cwiseProduct(stable_transition({v.head(n), {n, v.tail(skew_count(n))}})).sum();
      };
      const auto g = adjoint_stable_transition(raw, W);
      VectorXd an(x.size());
      an << g.upsilon, g.skew.gamma;
      worst = std::max(worst, oracle::relative_error(an, oracle::central_difference(f, x)));
    }
    {
      const int c = 1 + draw % 3;
      const BoundedMatrixRaw raw{oracle::random_matrix(rng, n, c, 1.5), oracle::random_matrix(rng, n, c, 1.5)};
      const MatrixXd W = oracle::random_matrix(rng, n, c);
      VectorXd x(2 * n * c);
      x << oracle::matrix_to_flat(raw.b1), oracle::matrix_to_flat(raw.b2);
      auto f = [&](const VectorXd& v) {
        return W.cwiseProduct(bounded_matrix({oracle::flat_to_matrix(v.head(n * c), n, c),
                                              oracle::flat_to_matrix(v.tail(n * c), n, c)})).sum();
      };
      const auto g = adjoint_bounded_matrix(raw, W);
      VectorXd an(x.size());
      an << oracle::matrix_to_flat(g.b1), oracle::matrix_to_flat(g.b2);
      worst = std::max(worst, oracle::relative_error(an, oracle::central_difference(f, x)));
    }
    // Hypernetwork, rollout and Gaussian loss together, both base models.
    for (BaseModel base : {BaseModel::lds, BaseModel::rnn}) {
      const ModelDims dims{3, 1, 1, 2, 6, base};
      const HyperNetParams phi = oracle::random_phi(rng, dims, -0.5 + 0.3 * rng.normal());
      const VectorXd z = oracle::random_vector(rng, 2);
      const MatrixXd U = oracle::random_matrix(rng, 10, 1);
      const MatrixXd Y = oracle::random_matrix(rng, 10, 1);
      const LossGrad g = loss_backward(phi, z, U, Y, dims);
      auto loss = [&](const HyperNetParams& p, const VectorXd& zz) {
        const LdsRealization sys = realize(hypernet_forward(p, zz), p.log_s, dims);
        return gaussian_loglik(Y, rollout(sys, U, base).predictions, sys.s);
      };
      auto f_phi = [&](const VectorXd& v) {
        HyperNetParams p = HyperNetParams::zeros(dims);
        p.unflatten(v);
        return loss(p, z);
      };
      auto f_z = [&](const VectorXd& zz) { return loss(phi, zz); };
      worst = std::max(worst, oracle::relative_error(g.dphi.flatten(), oracle::central_difference(f_phi, phi.flatten())));
      worst = std::max(worst, oracle::relative_error(g.dz, oracle::central_difference(f_z, z)));
    }
    ++instances;
  }
  const double secs = seconds_since(t0);
  return verdict(worst < 1e-5 && secs < 60.0,
                 std::to_string(instances) + " instances per family, worst rel err " + num(worst, 3) + ", " +
                     num(secs, 3) + " s");
}

// ---- 5: parameterization ---------------------------------------------------

Outcome parameterization_suite() {
  using namespace paramspace;
  Rng rng(5005);
  double orth = 0.0, sigma = 0.0, sim = 0.0;
  for (int draw = 0; draw < 160; ++draw) {
    const int n = 1 + draw % 16;
    const MatrixXd Q = cayley(skew_symmetric({n, oracle::random_vector(rng, skew_count(n), 2.0)}));
    orth = std::max(orth, (Q.transpose() * Q - MatrixXd::Identity(n, n)).norm());
    const StableTransitionRaw raw{oracle::random_vector(rng, n, 1.5),
                                  {n, oracle::random_vector(rng, skew_count(n), 0.7)}};
    const double bound = raw.upsilon.array().tanh().abs().maxCoeff();
    sigma = std::max(sigma, std::abs(oracle::spectral_norm(stable_transition(raw)) - bound));
  }
  const ModelDims dims{4, 1, 2, 1, 1};
  for (int i = 0; i < 50; ++i) {
    const LdsRealization sys = oracle::random_system(rng, dims);
    const MatrixXd U = oracle::random_matrix(rng, 30, 1);
    const MatrixXd base = rollout_lds(sys, U).predictions;
    const MatrixXd G = oracle::random_orthogonal(rng, 4);
    sim = std::max(sim, (rollout_lds(similarity_transform(sys, G), U).predictions - base).cwiseAbs().maxCoeff());
  }
  return verdict(orth < 1e-10 && sigma < 1e-10 && sim < 1e-8,
                 "orthogonality " + num(orth, 2) + ", sigma_max " + num(sigma, 2) + ", similarity " + num(sim, 2));
}

// ---- 6: MCO bound on a one-dimensional toy ---------------------------------

Outcome mco_bound_suite() {
  ModelDims dims;
  dims.n = 2;
  dims.k = 1;
  dims.H = 6;
  Rng init(21);
  HyperNetParams phi = learn::init_hypernet(dims, init);
  phi.log_s = -0.7;
  learn::SharedInputData data;
  data.U = dho::impulse_input(6);
  const dho::SequenceSet set = dho::generate(3, 8, 6);
  for (int i = 0; i < set.size(); ++i) data.Y.push_back(set.sequence(i));

  VectorXd quad(data.size());
  for (int i = 0; i < data.size(); ++i) quad[i] = oracle::log_marginal_quadrature(phi, dims, data.U, data.Y[i]);

  const int reps = 100;
  const std::vector<int> Ms = {10, 100, 1000};
  std::vector<VectorXd> mean(Ms.size(), VectorXd::Zero(data.size())), sq = mean;
  Rng rng(6006);
  for (int r = 0; r < reps; ++r) {
    const Rng base = rng.split(static_cast<std::uint64_t>(r));
    for (std::size_t j = 0; j < Ms.size(); ++j) {
      Rng paired = base;
      const VectorXd est = learn::mco_objective_estimate(phi, dims, data, Ms[j], &paired);
      mean[j] += est;
      sq[j] += est.cwiseAbs2();
    }
  }
  bool bound_ok = true;
  double worst_z = -1e300;
  std::vector<double> gap(Ms.size());
  for (std::size_t j = 0; j < Ms.size(); ++j) {
    mean[j] /= reps;
    const VectorXd var = (sq[j] / reps - mean[j].cwiseAbs2()) * reps / (reps - 1.0);
    for (int i = 0; i < data.size(); ++i) {
      const double se = std::sqrt(std::max(var[i], 0.0) / reps);
      bound_ok = bound_ok && mean[j][i] <= quad[i] + 3.0 * se;
      if (se > 0) worst_z = std::max(worst_z, (mean[j][i] - quad[i]) / se);
    }
    gap[j] = (quad - mean[j]).sum();
  }
  const bool shrinks = gap[0] > gap[1] && gap[1] > gap[2];
  return verdict(bound_ok && shrinks, "summed gaps " + num(gap[0], 3) + " > " + num(gap[1], 3) + " > " +
                                          num(gap[2], 3) + ", max (L-quad)/se " + num(worst_z, 3));
}

// ---- 7: AdaIS against a conjugate Gaussian posterior -----------------------

Outcome adais_suite() {
  const infer::AdaisHyper hyper;
  bool ok = hyper.M_ess == 100;
  double worst_mean = 0.0, worst_cov = 0.0, min_ess = 1e300;
  for (int d : {1, 2, 4}) {
    Rng rng(700 + d);
    const MatrixXd H = oracle::random_matrix(rng, d + 2, d);
    const double sigma = 0.5;
    VectorXd y = H * oracle::random_vector(rng, d);
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += sigma * rng.normal();
    const MatrixXd cov = (MatrixXd::Identity(d, d) + H.transpose() * H / (sigma * sigma)).inverse();
    const VectorXd mu = cov * H.transpose() * y / (sigma * sigma);
    auto target = [&](const MatrixXd& X) {
      VectorXd out(X.rows());
      for (Eigen::Index m = 0; m < X.rows(); ++m) {
        const VectorXd x = X.row(m).transpose();
        out[m] = -0.5 * x.squaredNorm() - 0.5 * (y - H * x).squaredNorm() / (sigma * sigma);
      }
      return out;
    };
    const auto prior = infer::MoGPosterior::gaussian(VectorXd::Zero(d), MatrixXd::Identity(d, d));
    const infer::AdaisResult r = infer::adais_refine(target, prior, hyper, rng, true);
    ok = ok && r.converged;
    const VectorXd sd = cov.diagonal().cwiseSqrt();
    worst_mean = std::max(worst_mean, ((r.q.mean() - mu).cwiseAbs().array() / sd.array()).maxCoeff());
    worst_cov = std::max(worst_cov, (r.q.covariance() - cov).norm() / cov.norm());
    min_ess = std::min(min_ess, r.ess_trace.back());
  }
  ok = ok && worst_mean < 0.05 && worst_cov < 0.10 && min_ess >= hyper.M_ess;
  return verdict(ok, "mean err/sd " + num(worst_mean, 3) + ", cov rel Frobenius " + num(worst_cov, 3) +
                         ", min accepted ESS " + num(min_ess, 5));
}

// ---- 8: weighted EM ----------------------------------------------------------

Outcome em_suite() {
  Rng rng(8008);
  double moments = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const MatrixXd X = oracle::random_matrix(rng, 40, 3);
    VectorXd w(40);
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.uniform();
    w /= w.sum();
    const infer::MoGPosterior q = infer::weighted_em(X, w, 1, nullptr, 3, 100, rng);
    const VectorXd mean = X.transpose() * w;
    const MatrixXd D = X.rowwise() - mean.transpose();
    const MatrixXd cov = D.transpose() * w.asDiagonal() * D;
    moments = std::max({moments, oracle::relative_error(q.mu[0], mean),
                        oracle::relative_error(oracle::matrix_to_flat(q.cov[0]), oracle::matrix_to_flat(cov))});
  }
  int checked = 0, decreases = 0, reseeded = 0;
  for (int rep = 0; rep < 100; ++rep) {
    MatrixXd X = oracle::random_matrix(rng, 200, 2);
    X.topRows(70).array() += 2.5;
    VectorXd w(200);
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = std::exp(rng.normal());
    w /= w.sum();
    infer::EmTrace tr;
    infer::weighted_em(X, w, 1 + rep % 3, nullptr, 3, 100, rng, &tr);
    reseeded += tr.reseeded;
    for (std::size_t i = 1; i < tr.loglik.size(); ++i) {
      if (std::count(tr.irregular.begin(), tr.irregular.end(), static_cast<int>(i)) > 0) continue;
      ++checked;
      if (tr.loglik[i] < tr.loglik[i - 1] - 1e-9 * (1.0 + std::abs(tr.loglik[i - 1]))) ++decreases;
    }
  }
  return verdict(moments < 1e-12 && decreases == 0,
                 "J=1 moment rel err " + num(moments, 2) + ", " + std::to_string(checked) +
                     " iterations checked, " + std::to_string(decreases) + " decreases, " +
                     std::to_string(reseeded) + " collapsed-component reseeds exempt");
}

// ---- 9: DHO generator --------------------------------------------------------

Outcome generator_suite(const fs::path& out) {
  auto dp4 = [](double x) { return std::round(x * 1e4) / 1e4; };
  const bool ends = dp4(dho::half_life_to_decay(4.0)) == 0.8409 && dp4(dho::half_life_to_decay(80.0)) == 0.9914 &&
                    dp4(dho::half_life_to_decay(8.0)) == 0.9170 && dp4(dho::half_life_to_decay(60.0)) == 0.9885;
  const auto [a_train, a_test] = dho::make_dataset(16, 20, 1);
  const auto [b_train, b_test] = dho::make_dataset(16, 20, 1);
  fs::create_directories(out);
  dho::write_dataset(out / "a.jsonl", a_train);
  dho::write_dataset(out / "b.jsonl", b_train);
  const bool same = a_train.sequences == b_train.sequences && a_test.sequences == b_test.sequences &&
                    io::read_file(out / "a.jsonl") == io::read_file(out / "b.jsonl") &&
                    dho::read_dataset(out / "a.jsonl").sequences == a_train.sequences;
  return verdict(ends && same, std::string("decay endpoints ") + (ends ? "match" : "differ") +
                                   ", fixed-seed datasets " + (same ? "bit-identical" : "differ"));
}

// ---- 1, 2, 3: benchmark runs --------------------------------------------------

double mean_of(const std::vector<bench::MetricRow>& rows, const std::string& model, int cond,
               double bench::MetricRow::*field) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.model == model && r.cond_t == cond) {
      s += r.*field;
      ++n;
    }
  return n > 0 ? s / n : std::nan("");
}

Outcome ordering_smoke(const fs::path& out, std::uint64_t seed) {
  fs::remove_all(out);
  std::ofstream log(fs::path(out.string() + ".log"));
  const auto t0 = clock_type::now();
  bench::ExperimentSpec spec = bench::ExperimentSpec::smoke();
  spec.seed = seed;
  const auto rows = bench::reproduce_dho(spec, out, &log);
  const std::string pooled_label = "Pooled-" + std::to_string(spec.pooled_n);
  const double secs = seconds_since(t0);
  auto rmse = [&](const std::string& m, int t) { return mean_of(rows, m, t, &bench::MetricRow::rmse); };
  const double m16 = rmse("MTLDS-16", 20), m4 = rmse("MTLDS-4", 20), pooled = rmse(pooled_label, 20);
  const double m16_40 = rmse("MTLDS-16", 40), pooled_40 = rmse(pooled_label, 40);
  const bool ok = m16 < m4 && m4 < pooled && m16_40 < 0.5 * pooled_40 && secs < 900.0;
  return verdict(ok, "t=20 RMSE MTLDS-16 " + num(m16, 3) + ", MTLDS-4 " + num(m4, 3) + ", Pooled " + num(pooled, 3) +
                         "; t=40 MTLDS-16 " + num(m16_40, 3) + " vs Pooled " + num(pooled_40, 3) + "; " +
                         num(secs, 4) + " s");
}

Outcome table_full(const fs::path& out) {
  std::ofstream log(fs::path(out.string() + ".log"), std::ios::app);
  const auto rows = bench::reproduce_dho(bench::ExperimentSpec::full(), out, &log);
  auto rmse = [&](const std::string& m, int t) { return mean_of(rows, m, t, &bench::MetricRow::rmse); };
  const double a = rmse("MTLDS-4", 20), b = rmse("MTLDS-16", 20), c = rmse("MTLDS-4", 40), d = rmse("MTLDS-16", 40);
  const double nll = mean_of(rows, "MTLDS-16", 20, &bench::MetricRow::nll);
  const bool ok = std::abs(a - 0.18) <= 0.06 && std::abs(b - 0.11) <= 0.06 && std::abs(c - 0.12) <= 0.05 &&
                  std::abs(d - 0.07) <= 0.05 && std::abs(nll + 0.43) <= 0.25;
  return verdict(ok, "RMSE t=20 N=4 " + num(a, 3) + " (0.18), N=16 " + num(b, 3) + " (0.11); t=40 N=4 " + num(c, 3) +
                         " (0.12), N=16 " + num(d, 3) + " (0.07); NLL t=20 N=16 " + num(nll, 3) + " (-0.43)");
}

Outcome marginal_full(const fs::path& out) {
  bench::ExperimentSpec spec = bench::ExperimentSpec::full();
  spec.train_sizes = {128};
  spec.repetitions = 1;
  std::ofstream log(fs::path(out.string() + ".log"), std::ios::app);
  bench::reproduce_dho(spec, out, &log);
  const bench::Checkpoint ck = bench::load_checkpoint(out / "checkpoints" / "MTLDS-128_rep0.json");
  const dho::SequenceSet test = dho::make_dataset(1, spec.n_test, bench::repetition_seed(spec, 0)).second;
  const bench::MarginalRow m = bench::marginal_comparison(ck.phi, ck.dims, test, spec.marginal_samples, 128);
  const double diff = m.true_loglik - m.model_loglik;
  return verdict(std::abs(diff) <= 1.5, "mean test log marginal: model " + num(m.model_loglik, 5) + ", true " +
                                            num(m.true_loglik, 5) + ", difference " + num(diff, 3) + " nats");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance report"};
  bool full = false;
  std::string out = "acceptance_out";
  std::vector<int> only;
  std::uint64_t smoke_seed = bench::ExperimentSpec::smoke().seed;
  app.add_flag("--full", full, "Also run the full-budget criteria (hours)");
  app.add_option("--out", out, "Working directory for benchmark runs");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--smoke-seed", smoke_seed, "Experiment seed for the smoke ordering run");
  CLI11_PARSE(app, argc, argv);
  if (const char* env = std::getenv("MTDS_FULL_ACCEPTANCE"); env != nullptr && std::string(env) == "1") full = true;

  const fs::path dir = fs::absolute(out);
  fs::create_directories(dir);
  const std::set<int> wanted(only.begin(), only.end());
  int failures = 0;

  auto run = [&](int id, const std::string& title, bool needs_full, auto&& body) {
    if (!wanted.empty() && wanted.count(id) == 0) return;
    Outcome o;
    if (needs_full && !full) {
      o = {Outcome::skip, "full budget; rerun with --full"};
    } else {
      try {
        o = body();
      } catch (const std::exception& e) {
        o = {Outcome::fail, std::string("exception: ") + e.what()};
      }
    }
    const char* tag = o.kind == Outcome::pass ? "PASS" : o.kind == Outcome::fail ? "FAIL" : "SKIP";
    if (o.kind == Outcome::fail) ++failures;
    std::cout << "criterion " << id << ": " << tag << "  " << title << " | " << o.detail << std::endl;
  };

  run(1, "DHO table reproduction", true, [&] { return table_full(dir / "full"); });
  run(2, "ordering MTLDS-16 < MTLDS-4 < Pooled (smoke budget)", false, [&] { return ordering_smoke(dir / "smoke", smoke_seed); });
  run(3, "MTLDS-128 marginal likelihood within 1.5 nats", true, [&] { return marginal_full(dir / "marginal"); });
  run(4, "analytic gradients vs central differences", false, gradient_suite);
  run(5, "parameterization invariants", false, parameterization_suite);
  run(6, "MCO lower bound and tightening", false, mco_bound_suite);
  run(7, "AdaIS conjugate-Gaussian oracle", false, adais_suite);
  run(8, "weighted EM monotonicity and moments", false, em_suite);
  run(9, "DHO generator endpoints and reproducibility", false, [&] { return generator_suite(dir / "generator"); });
  return failures == 0 ? 0 : 1;
}
