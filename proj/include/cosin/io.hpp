#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cosin/error.hpp"
#include "cosin/gibbs.hpp"
#include "cosin/model.hpp"
#include "cosin/postprocess.hpp"
#include "cosin/sim_bench.hpp"

namespace cosin::io {

namespace fs = std::filesystem;

/// Shortest decimal form that parses back to the same double.
inline std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_number(std::int64_t v) { return std::to_string(v); }

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

inline double parse_double(const std::string& field, const std::string& where) {
  double v = 0.0;
  const char* end = field.data() + field.size();
  const auto res = std::from_chars(field.data(), end, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != end)
    throw ValidationError(where + ": not a number: '" + field + "'");
  return v;
}

inline std::int64_t parse_int(const std::string& field, const std::string& where) {
  std::int64_t v = 0;
  const char* end = field.data() + field.size();
  const auto res = std::from_chars(field.data(), end, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != end)
    throw ValidationError(where + ": not an integer: '" + field + "'");
  return v;
}

inline std::uint64_t parse_seed(const std::string& field, const std::string& where) {
  std::uint64_t v = 0;
  const char* end = field.data() + field.size();
  const auto res = std::from_chars(field.data(), end, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != end)
    throw ValidationError(where + ": not an unsigned 64-bit seed: '" + field + "'");
  return v;
}

/// Headerless numeric CSV; every row must have the same width.
inline std::vector<std::vector<std::string>> read_rows(const fs::path& path) {
  auto in = open_input(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    rows.push_back(split_fields(line));
    if (rows.size() > 1 && rows.back().size() != rows.front().size())
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(rows.front().size()) + " fields, found " +
                            std::to_string(rows.back().size()));
  }
  if (rows.empty()) throw ValidationError(path.string() + ": empty file");
  return rows;
}

inline Matrix read_matrix_csv(const fs::path& path) {
  const auto rows = read_rows(path);
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          parse_double(rows[i][j], path.string() + ":" + std::to_string(i + 1));
  return m;
}

inline CountGrid read_count_csv(const fs::path& path) {
  const auto rows = read_rows(path);
  CountGrid m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          parse_int(rows[i][j], path.string() + ":" + std::to_string(i + 1));
  return m;
}

/// Mask file of zero-based `i,j` pairs; an optional `i,j` header is skipped.
inline FlagGrid read_mask_csv(const fs::path& path, Eigen::Index n, Eigen::Index p) {
  auto in = open_input(path);
  FlagGrid mask = FlagGrid::Zero(n, p);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (trim(line).empty()) continue;
    const auto f = split_fields(line);
    if (line_no == 1 && f.size() == 2 && f[0] == "i" && f[1] == "j") continue;
    if (f.size() != 2) throw ValidationError(where + ": expected an i,j pair");
    const auto i = parse_int(f[0], where), j = parse_int(f[1], where);
    if (i < 0 || i >= n || j < 0 || j >= p)
      throw ValidationError(where + ": mask entry (" + f[0] + ", " + f[1] + ") outside the " +
                            std::to_string(n) + "x" + std::to_string(p) + " count matrix");
    mask(i, j) = 1;
  }
  return mask;
}

template <typename Derived>
void write_matrix(std::ostream& out, const Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << format_number(m(i, j));
    }
    out << '\n';
  }
}

template <typename Derived>
void write_matrix_csv(const fs::path& path, const Eigen::DenseBase<Derived>& m) {
  auto out = open_output(path);
  write_matrix(out, m);
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_mask_csv(const fs::path& path, const FlagGrid& mask) {
  auto out = open_output(path);
  out << "i,j\n";
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      if (mask(i, j)) out << i << ',' << j << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

// Config files: flat key=value lines named after HyperParams fields.

inline void set_hyperparam(HyperParams& hp, const std::string& key, const std::string& value,
                           const std::string& where) {
  auto real = [&] { return parse_double(value, where); };
  auto integer = [&] { return static_cast<int>(parse_int(value, where)); };
  if (key == "alpha") hp.alpha = real();
  else if (key == "sigma_beta2") hp.sigma_beta2 = real();
  else if (key == "sigma_gamma2") hp.sigma_gamma2 = real();
  else if (key == "a_theta") hp.a_theta = real();
  else if (key == "b_theta") hp.b_theta = real();
  else if (key == "a_sigma") hp.a_sigma = real();
  else if (key == "b_sigma") hp.b_sigma = real();
  else if (key == "c_p") hp.c_p = real();
  else if (key == "k_init") hp.k_init = integer();
  else if (key == "k_max") hp.k_max = integer();
  else if (key == "iterations") hp.iterations = integer();
  else if (key == "burn_in") hp.burn_in = integer();
  else if (key == "thin") hp.thin = integer();
  else if (key == "adapt_start") hp.adapt_start = integer();
  else if (key == "adapt_c0") hp.adapt_c0 = real();
  else if (key == "adapt_c1") hp.adapt_c1 = real();
  else if (key == "seed") hp.seed = parse_seed(value, where);
  else if (key == "adapt") {
    if (value == "true" || value == "1") hp.adapt = true;
    else if (value == "false" || value == "0") hp.adapt = false;
    else throw ValidationError(where + ": adapt must be true or false");
  } else {
    throw ValidationError(where + ": unknown setting '" + key + "'");
  }
}

inline void read_config(const fs::path& path, HyperParams& hp) {
  auto in = open_input(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    const auto hash = line.find('#');
    const std::string body = trim(line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ValidationError(where + ": expected key=value");
    set_hyperparam(hp, trim(body.substr(0, eq)), trim(body.substr(eq + 1)), where);
  }
}

inline nlohmann::ordered_json hyperparams_json(const HyperParams& hp) {
  return {{"alpha", hp.alpha},           {"sigma_beta2", hp.sigma_beta2}, {"sigma_gamma2", hp.sigma_gamma2},
          {"a_theta", hp.a_theta},       {"b_theta", hp.b_theta},         {"a_sigma", hp.a_sigma},
          {"b_sigma", hp.b_sigma},       {"c_p", hp.c_p},                 {"k_init", hp.k_init},
          {"k_max", hp.k_max},           {"iterations", hp.iterations},   {"burn_in", hp.burn_in},
          {"thin", hp.thin},             {"adapt_start", hp.adapt_start}, {"adapt_c0", hp.adapt_c0},
          {"adapt_c1", hp.adapt_c1},     {"seed", hp.seed},               {"adapt", hp.adapt}};
}

inline void write_config(std::ostream& out, const HyperParams& hp) {
  const auto j = hyperparams_json(hp);
  for (const auto& [key, value] : j.items()) {
    out << key << '=';
    if (value.is_boolean()) out << (value.get<bool>() ? "true" : "false");
    else if (value.is_number_float()) out << format_number(value.get<double>());
    else out << value.dump();
    out << '\n';
  }
}

// Draw store: directory with meta.json and one little-endian row-major
// float64 file per retained draw.

inline void write_doubles(std::ostream& out, const double* data, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    auto bits = std::bit_cast<std::uint64_t>(data[i]);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

inline void read_doubles(std::istream& in, double* data, std::size_t count, const std::string& where) {
  for (std::size_t i = 0; i < count; ++i) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw IoError(where + ": truncated draw file");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    data[i] = std::bit_cast<double>(bits);
  }
}

inline void write_block(std::ostream& out, const Matrix& m) {
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  write_doubles(out, rm.data(), static_cast<std::size_t>(rm.size()));
}

inline Matrix read_block(std::istream& in, Eigen::Index rows, Eigen::Index cols, const std::string& where) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  read_doubles(in, rm.data(), static_cast<std::size_t>(rm.size()), where);
  return rm;
}

inline std::string draw_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "draw_%06zu.bin", index);
  return buf;
}

inline const char* kDrawLayout = "beta[d,p] sigma2[p] eta[n,k] lambda[p,k] gamma_t[d,qt] gamma_b[qb,k] rho[k]";

inline nlohmann::ordered_json store_meta_json(const DrawStoreMeta& m) {
  nlohmann::ordered_json j;
  j["iterations"] = m.iterations;
  j["burn_in"] = m.burn_in;
  j["thin"] = m.thin;
  j["seed"] = m.seed;
  j["n"] = m.n;
  j["p"] = m.p;
  j["d"] = m.d;
  j["qt"] = m.qt;
  j["qb"] = m.qb;
  auto events = nlohmann::ordered_json::array();
  for (const auto& e : m.adaptations) events.push_back({e.iteration, e.k_before, e.k_after});
  j["adaptations"] = events;
  j["active_trace"] = m.active_trace;
  j["k_trace"] = m.k_trace;
  return j;
}

inline void save_draw_store(const DrawStore& store, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::ordered_json j;
  j["format"] = "cosin-draws-1";
  j["layout"] = kDrawLayout;
  j["meta"] = store_meta_json(store.meta);
  auto draws = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < store.draws.size(); ++t) {
    const Draw& d = store.draws[t];
    draws.push_back({{"file", draw_file_name(t)}, {"iteration", d.iteration}, {"k", d.k()}});
    auto out = open_output(dir / draw_file_name(t));
    write_block(out, d.beta);
    write_block(out, d.sigma2.transpose());
    write_block(out, d.eta);
    write_block(out, d.lambda);
    write_block(out, d.gamma_t);
    write_block(out, d.gamma_b);
    write_block(out, d.rho.cast<double>().transpose());
    if (!out) throw IoError("write failed: " + (dir / draw_file_name(t)).string());
  }
  j["draws"] = draws;
  auto out = open_output(dir / "meta.json");
  out << j.dump(1) << '\n';
}

inline DrawStore load_draw_store(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw IoError("no draw store at " + dir.string() + " (meta.json missing)");
  nlohmann::json j;
  try {
    auto in = open_input(meta_path);
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(meta_path.string() + ": " + e.what());
  }
  DrawStore store;
  try {
    const auto& m = j.at("meta");
    store.meta.iterations = m.at("iterations");
    store.meta.burn_in = m.at("burn_in");
    store.meta.thin = m.at("thin");
    store.meta.seed = m.at("seed");
    store.meta.n = m.at("n");
    store.meta.p = m.at("p");
    store.meta.d = m.at("d");
    store.meta.qt = m.at("qt");
    store.meta.qb = m.at("qb");
    for (const auto& e : m.at("adaptations")) store.meta.adaptations.push_back({e.at(0), e.at(1), e.at(2)});
    store.meta.active_trace = m.at("active_trace").get<std::vector<int>>();
    store.meta.k_trace = m.at("k_trace").get<std::vector<int>>();
    const auto& mt = store.meta;
    for (const auto& entry : j.at("draws")) {
      const fs::path file = dir / entry.at("file").get<std::string>();
      const Eigen::Index k = entry.at("k");
      auto in = open_input(file);
      const std::string where = file.string();
      Draw d;
      d.iteration = entry.at("iteration");
      d.beta = read_block(in, mt.d, mt.p, where);
      d.sigma2 = read_block(in, 1, mt.p, where).transpose();
      d.eta = read_block(in, mt.n, k, where);
      d.lambda = read_block(in, mt.p, k, where);
      d.gamma_t = read_block(in, mt.d, mt.qt, where);
      d.gamma_b = read_block(in, mt.qb, k, where);
      d.rho = read_block(in, 1, k, where).transpose().cast<std::uint8_t>();
      store.draws.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(meta_path.string() + ": malformed manifest: " + e.what());
  }
  return store;
}

/// Long-format CSV export of a draw store: draw,iteration,array,row,col,value.
inline void export_draws_csv(const DrawStore& store, const fs::path& path) {
  auto out = open_output(path);
  out << "draw,iteration,array,row,col,value\n";
  auto emit = [&](std::size_t t, int it, const char* name, const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        out << t << ',' << it << ',' << name << ',' << r << ',' << c << ',' << format_number(m(r, c)) << '\n';
  };
  for (std::size_t t = 0; t < store.draws.size(); ++t) {
    const Draw& d = store.draws[t];
    emit(t, d.iteration, "beta", d.beta);
    emit(t, d.iteration, "sigma2", d.sigma2.transpose());
    emit(t, d.iteration, "eta", d.eta);
    emit(t, d.iteration, "lambda", d.lambda);
    emit(t, d.iteration, "gamma_t", d.gamma_t);
    emit(t, d.iteration, "gamma_b", d.gamma_b);
    emit(t, d.iteration, "rho", d.rho.cast<double>().transpose());
  }
  if (!out) throw IoError("write failed: " + path.string());
}

// Reports.

inline void write_beta_summary(std::ostream& out, const std::vector<BetaSummaryRow>& rows) {
  out << "covariate,min,q1,median,q3,max,nonzero_count\n";
  for (std::size_t l = 0; l < rows.size(); ++l) {
    const auto& r = rows[l];
    out << l << ',' << format_number(r.min) << ',' << format_number(r.q1) << ','
        << format_number(r.median) << ',' << format_number(r.q3) << ',' << format_number(r.max) << ','
        << r.excluding_zero << '\n';
  }
}

inline void write_edge_list(std::ostream& out, const GeneGraph& g) {
  out << "gene_j,gene_k,weight\n";
  for (const auto& e : g.edges) out << e.j << ',' << e.k << ',' << format_number(e.weight) << '\n';
}

inline void write_bench_csv(std::ostream& out, const BenchReport& report) {
  out << "scenario,n,p,sigma,method,metric,median,iqr,replicates,excluded\n";
  for (const auto& r : report.rows) {
    const auto& sc = report.scenarios[r.scenario];
    out << r.scenario << ',' << sc.n << ',' << sc.p << ',' << format_number(sc.sigma) << ','
        << method_name(r.method) << ',' << r.metric << ',' << format_number(r.median) << ','
        << format_number(r.iqr) << ',' << r.replicates << ',' << r.excluded << '\n';
  }
}

inline void write_bench_replicates_csv(std::ostream& out, const BenchReport& report) {
  out << "scenario,replicate,method,status,mae,rmse_c1,rmse_c2,rmse_c3,baseline_k,modal_active\n";
  for (const auto& r : report.results) {
    out << r.scenario << ',' << r.replicate << ',' << method_name(r.method) << ',' << (r.failed ? "failed" : "ok");
    if (r.failed) {
      out << ",,,,,,\n";
      continue;
    }
    out << ',' << format_number(r.mae);
    for (double v : r.rmse) out << ',' << (r.has_rmse ? format_number(v) : "");
    out << ',' << (r.method == Method::kBaseline ? std::to_string(r.baseline_k) : "") << ','
        << (r.method == Method::kBaseline ? "" : format_number(r.modal_active)) << '\n';
  }
}

/// Text tables: holdout MAE per scenario (median with IQR in parentheses)
/// and per-contribution RMSE.
inline void write_bench_table(std::ostream& out, const BenchReport& report) {
  auto cell = [&](std::size_t s, Method m, const std::string& metric) {
    const AggregateRow* row = report.find(s, m, metric);
    if (!row || row->replicates == 0) return std::string("-");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f (%.2f)", row->median, row->iqr);
    return std::string(buf);
  };
  char line[256];
  out << "Holdout MAE, median (IQR)\n";
  std::snprintf(line, sizeof line, "%-20s", "(n,p,sigma)");
  out << line;
  for (Method m : report.methods) {
    std::snprintf(line, sizeof line, "%-18s", method_name(m));
    out << line;
  }
  out << '\n';
  for (std::size_t s = 0; s < report.scenarios.size(); ++s) {
    std::snprintf(line, sizeof line, "%-20s", report.scenarios[s].label().c_str());
    out << line;
    for (Method m : report.methods) {
      std::snprintf(line, sizeof line, "%-18s", cell(s, m, "mae").c_str());
      out << line;
    }
    out << '\n';
  }
  bool any_rmse = false;
  for (const auto& r : report.rows)
    if (r.metric.rfind("rmse", 0) == 0) any_rmse = true;
  if (any_rmse) {
    out << "\nContribution RMSE, median (IQR)\n";
    for (std::size_t s = 0; s < report.scenarios.size(); ++s)
      for (Method m : report.methods) {
        if (!report.find(s, m, "rmse_c1")) continue;
        std::snprintf(line, sizeof line, "%-20s%-18s", report.scenarios[s].label().c_str(), method_name(m));
        out << line;
        for (const char* metric : {"rmse_c1", "rmse_c2", "rmse_c3"}) {
          std::snprintf(line, sizeof line, "%-18s", cell(s, m, metric).c_str());
          out << line;
        }
        out << '\n';
      }
  }
  int excluded = 0;
  for (const auto& r : report.results) excluded += r.failed;
  if (excluded) out << "\nexcluded replicate fits: " << excluded << '\n';
}

}  // namespace cosin::io
