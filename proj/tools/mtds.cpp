#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "mtds/bench.hpp"
#include "mtds/dho.hpp"
#include "mtds/errors.hpp"
#include "mtds/infer.hpp"
#include "mtds/io.hpp"
#include "mtds/learn.hpp"
#include "mtds/sobol.hpp"

namespace fs = std::filesystem;
using namespace mtds;

namespace {

// "data/train" may name data/train.jsonl.
fs::path dataset_path(const fs::path& p) {
  if (fs::exists(p) && !fs::is_directory(p)) return p;
  fs::path with_ext = p;
  with_ext += ".jsonl";
  if (fs::exists(with_ext)) return with_ext;
  throw DomainError("dataset not found: " + p.string());
}

bench::RunConfig config_or_default(const std::string& path) {
  return path.empty() ? bench::RunConfig{} : bench::load_config(path);
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (used != item.size()) throw DomainError("not an integer list: " + text);
    out.push_back(v);
  }
  if (out.empty()) throw DomainError("empty integer list");
  return out;
}

class EpochLogWriter {
 public:
  explicit EpochLogWriter(fs::path path) : path_(std::move(path)) {
    text_ = "epoch,objective,grad_norm,lr,log_s\n";
  }
  void operator()(const learn::EpochLog& e) {
    std::ostringstream os;
    os.precision(10);
    os << e.epoch << ',' << e.objective << ',' << e.grad_norm << ',' << e.lr << ',' << e.log_s << '\n';
    text_ += os.str();
  }
  void flush() const {
    if (!path_.empty()) io::write_atomic(path_, text_);
  }

 private:
  fs::path path_;
  std::string text_;
};

int run_selftest() {
  int failures = 0;
  auto report = [&](const char* name, bool ok) {
    std::cout << (ok ? "ok   " : "FAIL ") << name << '\n';
    failures += ok ? 0 : 1;
  };
  {
    ModelDims dims;
    dims.H = 8;
    Rng rng(1);
    const HyperNetParams phi = learn::init_hypernet(dims, rng);
    const MatrixXd U = dho::impulse_input(20);
    const MatrixXd Y = dho::generate(1, 2, 20).sequence(0);
    const VectorXd z = VectorXd::Constant(dims.k, 0.3);
    const LossGrad g = loss_backward(phi, z, U, Y, dims);
    const double h = 1e-5;
    double worst = 0.0;
    for (int j = 0; j < dims.k; ++j) {
      VectorXd zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      const double fd = (loss_backward(phi, zp, U, Y, dims).value - loss_backward(phi, zm, U, Y, dims).value) / (2 * h);
      worst = std::max(worst, std::abs(fd - g.dz[j]) / std::max(1.0, std::abs(fd)));
    }
    report("latent-code gradient matches finite differences", worst < 1e-5);
  }
  {
    const dho::SequenceSet a = dho::generate(3, 9), b = dho::generate(3, 9);
    report("dataset generation is reproducible", a.sequences == b.sequences);
  }
  {
    const MatrixXd Z = qmc::sobol_standard_normal(4096, 2);
    report("Sobol normals have unit variance", std::abs((Z.array().square().mean()) - 1.0) < 0.01);
  }
  {
    const infer::MoGPosterior prior = infer::MoGPosterior::prior(2);
    Rng rng(3);
    const auto res = infer::adais_refine([&](const MatrixXd& X) { return prior.logpdf_rows(X); }, prior,
                                         infer::AdaisHyper{}, rng, true);
    report("AdaIS accepts a self-targeting prior", res.converged);
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task dynamical systems: DHO benchmark tools"};
  app.require_subcommand(1);

  // dho-gen
  int n_train = 4, n_test = 20, T = dho::kDefaultLength;
  std::uint64_t seed = 1;
  std::string out;
  auto* gen = app.add_subcommand("dho-gen", "Generate DHO training and test datasets");
  gen->add_option("--n-train", n_train)->check(CLI::PositiveNumber);
  gen->add_option("--n-test", n_test)->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed);
  gen->add_option("--T", T)->check(CLI::PositiveNumber);
  gen->add_option("--out", out, "Output directory")->required();

  // training
  std::string config_path, data, ckpt_path, log_path;
  bool resume = false;
  int checkpoint_every = 100;
  auto add_train = [&](const char* name, const char* help) {
    auto* sc = app.add_subcommand(name, help);
    sc->add_option("--config", config_path, "JSON config (defaults if omitted)");
    sc->add_option("--data", data, "Training dataset")->required();
    sc->add_option("--out", ckpt_path, "Checkpoint path")->required();
    sc->add_option("--log", log_path, "Per-epoch CSV log (default <out>.log.csv)");
    sc->add_flag("--resume", resume, "Continue from an existing checkpoint at --out");
    sc->add_option("--checkpoint-every", checkpoint_every)->check(CLI::PositiveNumber);
    return sc;
  };
  auto* train_mco = add_train("train-mco", "Train a hypernetwork model with the MCO objective");
  auto* train_elbo = add_train("train-elbo", "Train a hypernetwork model with the ELBO");
  auto* train_pooled = add_train("train-pooled", "Train a single pooled model");

  // infer
  int index = 0, tau = 0, t_max = -1;
  std::uint64_t infer_seed = 0;
  auto* inf = app.add_subcommand("infer", "Filtered posteriors for one test sequence");
  inf->add_option("--ckpt", ckpt_path)->required();
  inf->add_option("--data", data)->required();
  inf->add_option("--config", config_path);
  inf->add_option("--index", index)->check(CLI::NonNegativeNumber);
  inf->add_option("--tau", tau)->check(CLI::NonNegativeNumber);
  inf->add_option("--t-max", t_max);
  inf->add_option("--seed", infer_seed);
  inf->add_option("--out", out, "Posterior records (JSONL)")->required();

  // evaluate
  std::string cond_text = "10,20,40", traces;
  auto* ev = app.add_subcommand("evaluate", "Posterior-predictive RMSE/NLL on a test set");
  ev->add_option("--ckpt", ckpt_path)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--config", config_path);
  ev->add_option("--cond", cond_text, "Comma-separated conditioning lengths");
  ev->add_option("--seed", infer_seed);
  ev->add_option("--out", out, "Metrics CSV")->required();
  ev->add_option("--traces", traces, "Directory for per-sequence trace files");

  // reproduce-dho
  std::string budget = "smoke", sizes_text;
  int reps = 0;
  bool marginal = false;
  auto* rep = app.add_subcommand("reproduce-dho", "Run the DHO benchmark");
  rep->add_option("--budget", budget)->check(CLI::IsMember({"full", "smoke"}));
  auto* smoke_flag = rep->add_flag("--smoke", "Same as --budget smoke");
  auto* full_flag = rep->add_flag("--full", "Same as --budget full");
  smoke_flag->excludes(full_flag);
  rep->add_option("--config", config_path, "Override the budget's config");
  rep->add_option("--sizes", sizes_text, "Comma-separated training-set sizes");
  rep->add_option("--reps", reps)->check(CLI::PositiveNumber);
  rep->add_option("--seed", seed);
  rep->add_flag("--marginal", marginal, "Also compare test log marginal likelihoods");
  rep->add_option("--out", out, "Run directory")->required();

  auto* self = app.add_subcommand("selftest", "Quick internal consistency checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      const auto [train, test] = dho::make_dataset(n_train, n_test, seed, T);
      dho::write_dataset(fs::path(out) / "train.jsonl", train);
      dho::write_dataset(fs::path(out) / "test.jsonl", test);
      std::cout << "wrote " << (fs::path(out) / "train.jsonl") << " and " << (fs::path(out) / "test.jsonl") << '\n';
      return 0;
    }

    if (train_mco->parsed() || train_elbo->parsed() || train_pooled->parsed()) {
      const bench::RunConfig cfg = config_or_default(config_path);
      const dho::SequenceSet set = dho::read_dataset(dataset_path(data));
      const learn::SharedInputData dd = bench::shared_input(set);
      const std::string hash = bench::config_hash(cfg);
      EpochLogWriter writer(log_path.empty() ? fs::path(ckpt_path + ".log.csv") : fs::path(log_path));
      bench::Checkpoint ck;
      const bool have = resume && fs::exists(ckpt_path);
      if (have) {
        ck = bench::load_checkpoint(ckpt_path);
        if (ck.config_hash != hash) throw DomainError("resume: config hash differs from the checkpoint");
      }
      ck.dims = cfg.dims;
      ck.config_hash = hash;
      auto save = [&] { bench::save_checkpoint(ckpt_path, ck); };

      if (train_mco->parsed()) {
        if (have && ck.kind != "mco") throw DomainError("resume: checkpoint is not an MCO model");
        ck.kind = "mco";
        ck.seed = cfg.mco.seed;
        Rng init(cfg.mco.seed);
        learn::McoTrainState st = have ? learn::McoTrainState{ck.phi, ck.adam, ck.epochs_completed}
                                       : learn::init_mco_state(cfg.mco, cfg.dims, dd, init);
        learn::train_mco(st, cfg.mco, cfg.dims, dd, [&](const learn::EpochLog& e) {
          writer(e);
          if (e.epoch % checkpoint_every == 0) {
            ck.phi = st.phi, ck.adam = st.adam, ck.epochs_completed = e.epoch;
            save();
            writer.flush();
          }
        });
        ck.phi = st.phi, ck.adam = st.adam, ck.epochs_completed = st.epoch;
      } else if (train_elbo->parsed()) {
        if (have && ck.kind != "elbo") throw DomainError("resume: checkpoint is not an ELBO model");
        ck.kind = "elbo";
        ck.seed = cfg.elbo.seed;
        Rng init(cfg.elbo.seed);
        learn::ElboState st{have ? ck.phi : learn::init_hypernet(cfg.dims, init), ck.q, ck.adam, ck.adam_q,
                            ck.epochs_completed};
        learn::train_elbo(st, cfg.elbo, cfg.dims, dd, [&](const learn::EpochLog& e) {
          writer(e);
          if (e.epoch % checkpoint_every == 0) {
            ck.phi = st.phi, ck.q = st.q, ck.adam = st.adam_phi, ck.adam_q = st.adam_q, ck.epochs_completed = e.epoch;
            save();
            writer.flush();
          }
        });
        ck.phi = st.phi, ck.q = st.q, ck.adam = st.adam_phi, ck.adam_q = st.adam_q, ck.epochs_completed = st.epoch;
      } else {
        if (have && ck.kind != "pooled") throw DomainError("resume: checkpoint is not a pooled model");
        ck.kind = "pooled";
        ck.seed = cfg.pooled.seed;
        Rng init(cfg.pooled.seed);
        bench::PooledTrainState st{have ? ck.pooled : bench::init_pooled(cfg.dims, init), ck.adam, ck.epochs_completed};
        bench::train_pooled(st, cfg.pooled, cfg.dims, dd, [&](const learn::EpochLog& e) {
          writer(e);
          if (e.epoch % checkpoint_every == 0) {
            ck.pooled = st.model, ck.adam = st.adam, ck.epochs_completed = e.epoch;
            save();
            writer.flush();
          }
        });
        ck.pooled = st.model, ck.adam = st.adam, ck.epochs_completed = st.epoch;
      }
      save();
      writer.flush();
      std::cout << "checkpoint " << ckpt_path << " after " << ck.epochs_completed << " epochs\n";
      return 0;
    }

    if (inf->parsed()) {
      bench::RunConfig cfg = config_or_default(config_path);
      const bench::Checkpoint ck = bench::load_checkpoint(ckpt_path);
      if (ck.kind == "pooled") throw DomainError("infer: pooled models have no latent code");
      const dho::SequenceSet set = dho::read_dataset(dataset_path(data));
      if (index >= set.size()) throw DomainError("infer: --index out of range");
      if (tau > 0) cfg.inference.tau = tau;
      Rng rng = Rng(infer_seed).split(static_cast<std::uint64_t>(index));
      const auto steps = infer::filter_posteriors(set.sequence(index), dho::impulse_input(set.T), ck.phi, ck.dims,
                                                  cfg.inference.tau, cfg.inference.adais, rng, t_max,
                                                  cfg.inference.prior);
      std::string text;
      for (const auto& s : steps) text += infer::posterior_record(s.t, s.result) + "\n";
      io::write_atomic(out, text);
      for (const auto& s : steps)
        std::cout << "t=" << s.t << " ess=" << s.result.final_ess << (s.result.converged ? "" : " (not converged)") << '\n';
      return 0;
    }

    if (ev->parsed()) {
      const bench::RunConfig cfg = config_or_default(config_path);
      const bench::Checkpoint ck = bench::load_checkpoint(ckpt_path);
      const dho::SequenceSet set = dho::read_dataset(dataset_path(data));
      const std::vector<int> cond = parse_int_list(cond_text);
      const auto start = std::chrono::steady_clock::now();
      const bench::EvalOutput eval = ck.kind == "pooled"
                                         ? bench::evaluate_pooled(ck.pooled, ck.dims, set, cond)
                                         : bench::evaluate_mtds(ck.phi, ck.dims, set, cond, cfg.inference, infer_seed);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const std::string label = ck.kind == "pooled" ? "Pooled" : (ck.kind == "elbo" ? "MTLDS-ELBO" : "MTLDS");
      std::string text = bench::metrics_csv_header();
      for (const auto& r : bench::summarize(eval, label, -1, 0, secs, infer_seed)) {
        text += bench::metrics_csv_row(r);
        std::cout << label << " t=" << r.cond_t << " rmse=" << r.rmse << " nll=" << r.nll << '\n';
      }
      io::write_atomic(out, text);
      if (!traces.empty()) bench::emit_traces(traces, label, eval);
      return 0;
    }

    if (rep->parsed()) {
      const bool full = full_flag->count() > 0 || (smoke_flag->count() == 0 && budget == "full");
      bench::ExperimentSpec spec = full ? bench::ExperimentSpec::full() : bench::ExperimentSpec::smoke();
      if (!config_path.empty()) spec.config = bench::load_config(config_path);
      if (!sizes_text.empty()) spec.train_sizes = parse_int_list(sizes_text);
      if (reps > 0) spec.repetitions = reps;
      if (rep->count("--seed") > 0) spec.seed = seed;
      spec.marginal = marginal;
      bench::reproduce_dho(spec, out, &std::cout);
      return 0;
    }

    if (self->parsed()) return run_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
