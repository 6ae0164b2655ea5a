// cosin: simulate, fit, bench, summarize, export-graph.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cosin/cosin.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct HyperOverrides {
  std::optional<double> alpha, sigma_beta2, c_p;
  std::optional<int> iterations, burn_in, thin, k_init, k_max;
  std::optional<std::uint64_t> seed;
  bool no_adapt = false;
};

void add_hyper_flags(CLI::App* cmd, HyperOverrides& o, std::string& config, bool& fast) {
  cmd->add_option("--config", config, "key=value file of sampler settings")->check(CLI::ExistingFile);
  cmd->add_flag("--fast", fast, "4000 iterations, 1000 burn-in, thin 2");
  cmd->add_option("--alpha", o.alpha);
  cmd->add_option("--sigma-beta2", o.sigma_beta2);
  cmd->add_option("--c-p", o.c_p);
  cmd->add_option("--iterations", o.iterations);
  cmd->add_option("--burn-in", o.burn_in);
  cmd->add_option("--thin", o.thin);
  cmd->add_option("--k-init", o.k_init);
  cmd->add_option("--k-max", o.k_max);
  cmd->add_option("--seed", o.seed);
  cmd->add_flag("--no-adapt", o.no_adapt, "keep the truncation level fixed");
}

// Precedence: defaults < --fast < --config < individual flags.
cosin::HyperParams resolve_hyper(const HyperOverrides& o, const std::string& config, bool fast) {
  cosin::HyperParams hp = fast ? cosin::HyperParams::fast_profile() : cosin::HyperParams{};
  if (!config.empty()) cosin::io::read_config(config, hp);
  if (o.alpha) hp.alpha = *o.alpha;
  if (o.sigma_beta2) hp.sigma_beta2 = *o.sigma_beta2;
  if (o.c_p) hp.c_p = *o.c_p;
  if (o.iterations) hp.iterations = *o.iterations;
  if (o.burn_in) hp.burn_in = *o.burn_in;
  if (o.thin) hp.thin = *o.thin;
  if (o.k_init) hp.k_init = *o.k_init;
  if (o.k_max) hp.k_max = *o.k_max;
  if (o.seed) hp.seed = *o.seed;
  if (o.no_adapt) hp.adapt = false;
  return hp;
}

// Output directories are filled under a sibling staging name and renamed
// into place once complete.
class StagedDir {
 public:
  explicit StagedDir(fs::path target) : target_(std::move(target)) {
    if (fs::exists(target_) && !(fs::is_directory(target_) && fs::is_empty(target_)))
      throw cosin::IoError("output directory " + target_.string() + " already exists and is not empty");
    staging_ = target_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }
  const fs::path& path() const { return staging_; }
  void commit() {
    if (fs::exists(target_)) fs::remove(target_);
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_, staging_;
  bool committed_ = false;
};

void write_text(const fs::path& path, const std::string& text) {
  auto out = cosin::io::open_output(path);
  out << text;
  if (!out) throw cosin::IoError("write failed: " + path.string());
}

void write_staged_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".partial";
  write_text(tmp, text);
  fs::rename(tmp, path);
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

// simulate ------------------------------------------------------------------

struct SimulateArgs {
  long n = 50, p = 100;
  double sigma = 1.0, holdout = 0.25;
  std::uint64_t seed = 1;
  std::string out;
};

void cmd_simulate(const SimulateArgs& a, const std::string& cmdline) {
  cosin::SimScenario sc{a.n, a.p, a.sigma, a.seed, a.holdout};
  const cosin::SimTruth truth = cosin::generate(sc);
  cosin::RngStream mask_rng(sc.replicate_seed, 1);
  const cosin::FlagGrid mask = cosin::mask_holdout(sc.n, sc.p, sc.holdout_fraction, mask_rng);

  StagedDir dir(a.out);
  const fs::path& d = dir.path();
  cosin::io::write_matrix_csv(d / "y.csv", truth.y.values);
  cosin::io::write_matrix_csv(d / "x.csv", cosin::Matrix::Ones(sc.n, 1));
  cosin::io::write_matrix_csv(d / "wT.csv", cosin::Matrix::Ones(sc.p, 1));
  cosin::io::write_matrix_csv(d / "wB.csv", truth.w_b);
  cosin::io::write_mask_csv(d / "mask.csv", mask);
  fs::create_directories(d / "truth");
  cosin::io::write_matrix_csv(d / "truth" / "z.csv", truth.z_true);
  cosin::io::write_matrix_csv(d / "truth" / "eta.csv", truth.eta);
  cosin::io::write_matrix_csv(d / "truth" / "lambda.csv", truth.lambda);
  for (Eigen::Index h = 0; h < cosin::kTrueContributions; ++h)
    cosin::io::write_matrix_csv(d / "truth" / ("contribution_" + std::to_string(h + 1) + ".csv"),
                                truth.contribution(h));
  json m;
  m["command"] = "simulate";
  m["command_line"] = cmdline;
  m["n"] = sc.n;
  m["p"] = sc.p;
  m["sigma"] = sc.sigma;
  m["seed"] = sc.replicate_seed;
  m["holdout_fraction"] = sc.holdout_fraction;
  m["saturated_entries"] = truth.saturated;
  write_text(d / "manifest.json", m.dump(1) + "\n");
  dir.commit();
}

// fit -------------------------------------------------------------------------

struct FitArgs {
  std::string y, x, wt, wb, mask, out;
  bool no_meta = false, nometa_fixed = false, wb_no_intercept = false, export_csv = false;
  std::size_t workers = 1;
  HyperOverrides hyper;
  std::string config;
  bool fast = false;
};

void cmd_fit(const FitArgs& a, const std::string& cmdline) {
  // Everything is read and validated before sampling starts.
  const cosin::HyperParams hp = resolve_hyper(a.hyper, a.config, a.fast);
  if (a.wb.empty() && !a.no_meta && !a.nometa_fixed)
    throw cosin::ValidationError(
        "meta-covariates are enabled but --wb was not given; pass --wb FILE, or --no-meta to fit without them");
  if (!a.wb.empty() && (a.no_meta || a.nometa_fixed))
    throw cosin::ValidationError("--wb cannot be combined with --no-meta or --nometa-fixed");
  cosin::CountMatrix y;
  y.values = cosin::io::read_count_csv(a.y);
  const auto n = y.n(), p = y.p();
  cosin::Covariates cov = cosin::Covariates::intercepts(n, p);
  if (!a.x.empty()) cov.x = cosin::io::read_matrix_csv(a.x);
  if (!a.wt.empty()) cov.wT = cosin::io::read_matrix_csv(a.wt);
  if (!a.wb.empty()) {
    const cosin::Matrix wb = cosin::io::read_matrix_csv(a.wb);
    if (a.wb_no_intercept) {
      cov.wB = wb;
    } else {
      cov.wB.resize(wb.rows(), wb.cols() + 1);
      cov.wB << cosin::Matrix::Ones(wb.rows(), 1), wb;
    }
  } else if (a.nometa_fixed) cov.wB = cosin::Matrix::Zero(p, 1);
  if (!a.mask.empty()) y.mask = cosin::io::read_mask_csv(a.mask, n, p);
  const cosin::ValidatedInputs in = cosin::validate_inputs(y, cov, hp);
  for (const auto& w : in.warnings) std::cerr << "warning: " << w << '\n';

  StagedDir dir(a.out);
  cosin::ChainOptions options;
  options.workers = a.workers;
  options.progress = [](int t, int k, int active) {
    std::cerr << "iteration " << t << ": k* = " << k << ", active = " << active << '\n';
  };
  const auto start = std::chrono::steady_clock::now();
  const cosin::DrawStore store = cosin::run_chain(in, options);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  cosin::io::save_draw_store(store, dir.path() / "draws");
  if (a.export_csv) cosin::io::export_draws_csv(store, dir.path() / "draws.csv");
  std::ostringstream conf;
  cosin::io::write_config(conf, in.hp);
  write_text(dir.path() / "settings.conf", conf.str());

  json m;
  m["command"] = "fit";
  m["command_line"] = cmdline;
  m["inputs"] = {{"y", a.y}, {"x", a.x}, {"wT", a.wt}, {"wB", a.wb}, {"mask", a.mask}};
  m["meta_covariates"] = a.no_meta ? "intercept" : a.nometa_fixed ? "zero" : a.wb_no_intercept ? "file" : "intercept+file";
  m["seed"] = in.hp.seed;
  m["settings"] = cosin::io::hyperparams_json(in.hp);
  m["workers"] = a.workers;
  m["wall_time_seconds"] = seconds;
  m["retained_draws"] = store.draws.size();
  auto events = json::array();
  for (const auto& e : store.meta.adaptations)
    events.push_back({{"iteration", e.iteration}, {"k_before", e.k_before}, {"k_after", e.k_after}});
  m["adaptations"] = events;
  m["warnings"] = in.warnings;
  write_text(dir.path() / "manifest.json", m.dump(1) + "\n");
  dir.commit();
  std::cerr << "stored " << store.draws.size() << " draws in " << a.out << '\n';
}

// bench -----------------------------------------------------------------------

struct BenchArgs {
  std::vector<std::string> scenarios;
  bool full_grid = false;
  int replicates = 50;
  std::vector<std::string> methods;
  std::vector<int> ks{2, 3, 4, 5, 6, 7, 8};
  bool no_rmse = false, nometa_fixed = false;
  std::size_t workers = 1;
  std::uint64_t bench_seed = 20240101;
  std::vector<std::string> fail;
  std::string out;
  HyperOverrides hyper;
  std::string config;
  bool fast = false;
};

cosin::SimScenario parse_scenario(const std::string& s) {
  const auto f = cosin::io::split_fields(s);
  if (f.size() != 3) throw cosin::ValidationError("--scenario expects n,p,sigma, got '" + s + "'");
  cosin::SimScenario sc;
  sc.n = cosin::io::parse_int(f[0], "--scenario");
  sc.p = cosin::io::parse_int(f[1], "--scenario");
  sc.sigma = cosin::io::parse_double(f[2], "--scenario");
  if (sc.n < 2 || sc.p < 2 || !(sc.sigma > 0)) throw cosin::ValidationError("--scenario: invalid " + s);
  return sc;
}

void cmd_bench(const BenchArgs& a, const std::string& cmdline) {
  cosin::BenchOptions opt;
  opt.hp = resolve_hyper(a.hyper, a.config, a.fast);
  if (a.full_grid && !a.scenarios.empty()) throw cosin::ValidationError("--full-grid and --scenario are exclusive");
  if (!a.scenarios.empty()) {
    opt.scenarios.clear();
    for (const auto& s : a.scenarios) opt.scenarios.push_back(parse_scenario(s));
  } else if (!a.full_grid) {
    opt.scenarios = {cosin::SimScenario{50, 100, 1.0, 0, 0.25}};
  }
  opt.replicates = a.replicates;
  if (!a.methods.empty()) {
    opt.methods.clear();
    for (const auto& m : a.methods) {
      const auto parsed = cosin::parse_method(m);
      if (!parsed) throw cosin::ValidationError("unknown method '" + m + "' (cosin_meta, cosin_nometa, pearson_pca)");
      opt.methods.push_back(*parsed);
    }
  }
  opt.baseline_ks = a.ks;
  opt.rmse = !a.no_rmse;
  opt.nometa_fixed = a.nometa_fixed;
  opt.workers = a.workers;
  opt.seed = a.bench_seed;
  // --fail-replicate R: the fits of replicate R raise, exercising exclusion.
  std::vector<int> failing;
  for (const auto& f : a.fail) failing.push_back(static_cast<int>(cosin::io::parse_int(f, "--fail-replicate")));
  if (!failing.empty())
    opt.before_fit = [failing](const cosin::SimScenario&, int replicate, cosin::Method) {
      for (int r : failing)
        if (r == replicate) throw cosin::NumericalError("injected failure");
    };
  opt.log = [](const std::string& msg) { std::cerr << msg << '\n'; };

  StagedDir dir(a.out);
  const auto start = std::chrono::steady_clock::now();
  const cosin::BenchReport report = cosin::run_benchmark(opt);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::ostringstream csv, reps, table;
  cosin::io::write_bench_csv(csv, report);
  cosin::io::write_bench_replicates_csv(reps, report);
  cosin::io::write_bench_table(table, report);
  write_text(dir.path() / "bench.csv", csv.str());
  write_text(dir.path() / "replicates.csv", reps.str());
  write_text(dir.path() / "bench.txt", table.str());
  json m;
  m["command"] = "bench";
  m["command_line"] = cmdline;
  m["seed"] = opt.seed;
  m["replicates"] = opt.replicates;
  m["settings"] = cosin::io::hyperparams_json(opt.hp);
  m["wall_time_seconds"] = seconds;
  write_text(dir.path() / "manifest.json", m.dump(1) + "\n");
  dir.commit();
  std::cout << table.str();
}

// summarize / export-graph -----------------------------------------------------

struct SummarizeArgs {
  std::string draws, out;
  double level = 0.9;
};

cosin::DrawStore load_nonempty(const std::string& path) {
  cosin::DrawStore store = cosin::io::load_draw_store(path);
  if (store.draws.empty()) throw cosin::ValidationError("draw store " + path + " holds no draws");
  return store;
}

void cmd_summarize(const SummarizeArgs& a) {
  if (!(a.level > 0 && a.level < 1)) throw cosin::ValidationError("--level must lie in (0,1)");
  const cosin::DrawStore store = load_nonempty(a.draws);
  const auto rows = cosin::summarize_beta(store, a.level);
  const auto aligned = cosin::align_contributions(store);
  const auto rep = cosin::representative_draw(store, aligned);

  StagedDir dir(a.out);
  std::ostringstream beta;
  cosin::io::write_beta_summary(beta, rows);
  write_text(dir.path() / "beta_summary.csv", beta.str());
  cosin::io::write_matrix_csv(dir.path() / "factor_scores.csv", rep.eta);
  cosin::io::write_matrix_csv(dir.path() / "factor_loadings.csv", rep.lambda);
  fs::create_directories(dir.path() / "contributions");
  for (std::size_t h = 0; h < aligned.mean_contributions.size(); ++h)
    cosin::io::write_matrix_csv(dir.path() / "contributions" / ("contribution_" + std::to_string(h + 1) + ".csv"),
                                aligned.mean_contributions[h]);
  cosin::io::write_matrix_csv(dir.path() / "contributions" / "residual.csv", aligned.residual_contribution);
  json m;
  m["command"] = "summarize";
  m["draws"] = a.draws;
  m["level"] = a.level;
  m["representative_method"] = cosin::RepresentativeDraw::kMethod;
  m["representative_index"] = rep.index;
  m["representative_iteration"] = store.draws[rep.index].iteration;
  m["representative_total_distance"] = rep.total_distance;
  m["contribution_norms"] = aligned.frobenius_norms;
  m["draws_with_surplus_factors"] = aligned.draws_with_surplus;
  write_text(dir.path() / "manifest.json", m.dump(1) + "\n");
  dir.commit();
}

struct GraphArgs {
  std::string draws, out;
  double threshold = 0.025;
  bool covariance_form = false;
};

void cmd_export_graph(const GraphArgs& a) {
  if (!(a.threshold >= 0)) throw cosin::ValidationError("--threshold must be nonnegative");
  const cosin::DrawStore store = load_nonempty(a.draws);
  const auto graph = cosin::covariance_graph(
      store, a.threshold, a.covariance_form ? cosin::GraphForm::kCovariance : cosin::GraphForm::kCorrelation);
  if (!graph.jittered_draws.empty())
    std::cerr << "warning: " << graph.jittered_draws.size() << " draws needed diagonal jitter\n";
  std::ostringstream edges;
  cosin::io::write_edge_list(edges, graph);
  write_staged_file(a.out, edges.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian structured infinite factorization of count matrices"};
  app.require_subcommand(1);
  const std::string cmdline = command_line(argc, argv);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "generate one synthetic data set");
  simulate->add_option("--n", sim.n, "rows (cells)");
  simulate->add_option("--p", sim.p, "columns (genes)");
  simulate->add_option("--sigma", sim.sigma, "idiosyncratic standard deviation");
  simulate->add_option("--holdout", sim.holdout, "held-out fraction");
  simulate->add_option("--seed", sim.seed);
  simulate->add_option("--out", sim.out)->required();

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "run the Gibbs sampler");
  fit_cmd->add_option("--y", fit.y, "count matrix CSV, rows = cells")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--x", fit.x, "cell covariates CSV (default: intercept)")->check(CLI::ExistingFile);
  fit_cmd->add_option("--wt", fit.wt, "gene covariates for beta (default: intercept)")->check(CLI::ExistingFile);
  fit_cmd->add_option("--wb", fit.wb, "gene meta-covariates for factor selection")->check(CLI::ExistingFile);
  fit_cmd->add_option("--mask", fit.mask, "held-out i,j pairs")->check(CLI::ExistingFile);
  fit_cmd->add_flag("--no-meta", fit.no_meta, "intercept-only meta-covariates");
  fit_cmd->add_flag("--nometa-fixed", fit.nometa_fixed, "zero meta-covariate column (selection mean c_p/2)");
  fit_cmd->add_flag("--wb-no-intercept", fit.wb_no_intercept, "use the --wb columns without a leading intercept");
  fit_cmd->add_flag("--export-csv", fit.export_csv, "also write draws.csv");
  fit_cmd->add_option("--workers", fit.workers)->check(CLI::PositiveNumber);
  fit_cmd->add_option("--out", fit.out)->required();
  add_hyper_flags(fit_cmd, fit.hyper, fit.config, fit.fast);

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "simulation benchmark");
  bench_cmd->add_option("--scenario", bench.scenarios, "n,p,sigma (repeatable; default 50,100,1)");
  bench_cmd->add_flag("--full-grid", bench.full_grid, "all six (n,p,sigma) settings");
  bench_cmd->add_option("--replicates", bench.replicates)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--methods", bench.methods, "subset of cosin_meta cosin_nometa pearson_pca");
  bench_cmd->add_option("--ks", bench.ks, "baseline ranks");
  bench_cmd->add_flag("--no-rmse", bench.no_rmse, "skip the full-data contribution fits");
  bench_cmd->add_flag("--nometa-fixed", bench.nometa_fixed, "no-meta variant with a zero meta-covariate column");
  bench_cmd->add_option("--workers", bench.workers)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--bench-seed", bench.bench_seed);
  bench_cmd->add_option("--fail-replicate", bench.fail, "make every fit of this replicate fail");
  bench_cmd->add_option("--out", bench.out)->required();
  add_hyper_flags(bench_cmd, bench.hyper, bench.config, bench.fast);

  SummarizeArgs summ;
  auto* summ_cmd = app.add_subcommand("summarize", "beta table, factor scores, contributions");
  summ_cmd->add_option("--draws", summ.draws)->required();
  summ_cmd->add_option("--level", summ.level, "credible level");
  summ_cmd->add_option("--out", summ.out)->required();

  GraphArgs graph;
  auto* graph_cmd = app.add_subcommand("export-graph", "partial-correlation edge list");
  graph_cmd->add_option("--draws", graph.draws)->required();
  graph_cmd->add_option("--threshold", graph.threshold);
  graph_cmd->add_flag("--covariance-form", graph.covariance_form, "invert Omega instead of its correlation");
  graph_cmd->add_option("--out", graph.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(cosin::ExitCode::kValidation);
  }

  try {
    if (*simulate) cmd_simulate(sim, cmdline);
    else if (*fit_cmd) cmd_fit(fit, cmdline);
    else if (*bench_cmd) cmd_bench(bench, cmdline);
    else if (*summ_cmd) cmd_summarize(summ);
    else if (*graph_cmd) cmd_export_graph(graph);
  } catch (const cosin::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(cosin::ExitCode::kIo);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(cosin::ExitCode::kNumerical);
  }
  return 0;
}
