// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Binaries of the other suites and the CLI are passed in at build time.

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cosin/sim_bench.hpp"

namespace fs = std::filesystem;
using namespace cosin;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::array<Verdict, 9> verdicts;

void record(int criterion, bool pass, const std::string& detail) {
  verdicts[static_cast<std::size_t>(criterion)] = {pass, detail};
  std::cerr << "criterion " << criterion << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

bool within(double value, double target, double tol) { return std::abs(value - target) <= tol * target; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

int run(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double row_median(const BenchReport& r, Method m, const std::string& metric) {
  const AggregateRow* row = r.find(0, m, metric);
  return row && row->replicates > 0 ? row->median : std::nan("");
}

int failures(const BenchReport& r) {
  int n = 0;
  for (const auto& x : r.results) n += x.failed;
  return n;
}

BenchOptions bench(SimScenario sc, int replicates, std::initializer_list<Method> methods, HyperParams hp, bool rmse) {
  BenchOptions opt;
  opt.scenarios = {sc};
  opt.replicates = replicates;
  opt.methods.assign(methods.begin(), methods.end());
  opt.hp = hp;
  opt.rmse = rmse;
  opt.log = [](const std::string& msg) { std::cerr << "  " << msg << std::endl; };
  return opt;
}

void suites() {
  auto t0 = std::chrono::steady_clock::now();
  const int sampler = run(COSIN_SAMPLER_TESTS " --gtest_brief=1");
  record(5, sampler == 0, "sampler suite exit " + std::to_string(sampler) + ", " + fmt(seconds_since(t0)) + " s");

  t0 = std::chrono::steady_clock::now();
  const int geweke = run(COSIN_GEWEKE_TEST " --gtest_brief=1");
  const double geweke_s = seconds_since(t0);
  record(6, geweke == 0 && geweke_s < 120, "Geweke test exit " + std::to_string(geweke) + ", " + fmt(geweke_s) + " s");
}

void determinism() {
  const fs::path dir = fs::temp_directory_path() / "cosin_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string base =
      std::string(COSIN_CLI) + " bench --fast --scenario 50,100,1 --replicates 2 --bench-seed 31 2>/dev/null >/dev/null";
  const int a = run(base + " --workers 1 --out " + (dir / "a").string());
  const int b = run(base + " --workers 2 --out " + (dir / "b").string());
  bool same = a == 0 && b == 0;
  for (const char* f : {"bench.csv", "replicates.csv", "bench.txt"})
    same = same && fs::exists(dir / "a" / f) && slurp(dir / "a" / f) == slurp(dir / "b" / f);
  record(7, same, "bench --fast twice (exit " + std::to_string(a) + "/" + std::to_string(b) + "), reports " +
                      (same ? "byte-identical" : "differ"));
  fs::remove_all(dir);
}

void low_noise_scenario() {
  const auto t0 = std::chrono::steady_clock::now();
  const BenchReport r = run_benchmark(bench({200, 100, 0.1, 0, 0.25}, 10,
                                            {Method::kCosinNoMeta, Method::kCosinMeta, Method::kBaseline},
                                            HyperParams::fast_profile(), false));
  const double nometa = row_median(r, Method::kCosinNoMeta, "mae");
  const double meta = row_median(r, Method::kCosinMeta, "mae");
  const double base = row_median(r, Method::kBaseline, "mae");
  const bool ok = failures(r) == 0 && within(nometa, 0.5055, 0.3) && within(meta, 0.5071, 0.3) &&
                  within(base, 1.3518, 0.3) && nometa < base && meta < base;
  record(2, ok, "(200,100,0.1) fast profile, 10 replicates: median MAE nometa " + fmt(nometa) + " meta " + fmt(meta) +
                    " baseline " + fmt(base) + ", " + std::to_string(failures(r)) + " failed fits, " +
                    fmt(seconds_since(t0)) + " s");

  std::string modes;
  bool in_range = true;
  int counted = 0;
  for (const auto& x : r.results) {
    if (x.method != Method::kCosinMeta || x.replicate >= 5) continue;
    ++counted;
    const int k = static_cast<int>(x.modal_active);
    in_range = in_range && !x.failed && k >= 2 && k <= 5;
    modes += (modes.empty() ? "" : ",") + std::to_string(k);
  }
  record(4, in_range && counted == 5, "modal active factors over 5 replicates: " + modes);
}

void table_scenario() {
  const auto t0 = std::chrono::steady_clock::now();
  const BenchReport r = run_benchmark(bench({50, 100, 1.0, 0, 0.25}, 10,
                                            {Method::kCosinNoMeta, Method::kCosinMeta, Method::kBaseline},
                                            HyperParams{}, true));
  const double nometa = row_median(r, Method::kCosinNoMeta, "mae");
  const double meta = row_median(r, Method::kCosinMeta, "mae");
  const double base = row_median(r, Method::kBaseline, "mae");
  const bool ok = failures(r) == 0 && within(nometa, 4.6107, 0.2) && within(meta, 4.5624, 0.2) &&
                  within(base, 6.1408, 0.2) && nometa < base && meta < base;
  record(1, ok, "(50,100,1) full profile, 10 replicates: median MAE nometa " + fmt(nometa) + " meta " + fmt(meta) +
                    " baseline " + fmt(base) + ", " + std::to_string(failures(r)) + " failed fits, " +
                    fmt(seconds_since(t0)) + " s");

  const std::array<double, 3> target{0.62, 0.57, 0.39};
  double cosin_total = 0.0, base_total = 0.0;
  bool ok3 = failures(r) == 0;
  std::string values;
  for (int h = 0; h < 3; ++h) {
    const std::string metric = "rmse_c" + std::to_string(h + 1);
    const double c = row_median(r, Method::kCosinMeta, metric);
    const double b = row_median(r, Method::kBaseline, metric);
    ok3 = ok3 && within(c, target[static_cast<std::size_t>(h)], 0.3);
    cosin_total += c;
    base_total += b;
    values += " C" + std::to_string(h + 1) + " " + fmt(c) + "/" + fmt(b);
  }
  ok3 = ok3 && cosin_total < base_total;
  record(3, ok3, "(50,100,1) median RMSE cosin/baseline:" + values + ", totals " + fmt(cosin_total) + " vs " +
                     fmt(base_total));
}

void properties() {
  auto t0 = std::chrono::steady_clock::now();
  const int props = run(COSIN_PROPERTY_TESTS " --gtest_brief=1");
  const double props_s = seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  const BenchReport r = run_benchmark(
      bench({200, 1000, 1.0, 0, 0.25}, 1, {Method::kCosinMeta, Method::kBaseline}, HyperParams::fast_profile(), false));
  const double meta = row_median(r, Method::kCosinMeta, "mae");
  const bool smoke = failures(r) == 0 && std::isfinite(meta);
  record(8, props == 0 && smoke,
         "property suites exit " + std::to_string(props) + " (" + fmt(props_s) + " s); (200,1000,1) fast smoke MAE " +
             fmt(meta) + " baseline " + fmt(row_median(r, Method::kBaseline, "mae")) + ", " +
             fmt(seconds_since(t0)) + " s");
}

}  // namespace

int main() {
  suites();
  determinism();
  properties();
  low_noise_scenario();
  table_scenario();
  bool all = true;
  for (int c = 1; c <= 8; ++c) {
    const Verdict& v = verdicts[static_cast<std::size_t>(c)];
    std::cout << "criterion " << c << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << '\n';
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
