#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fastgp/dense.hpp"
#include "fastgp/hodlr.hpp"
#include "fastgp/inducing.hpp"
#include "fastgp/structured.hpp"
#include "fastgp/types.hpp"

namespace fastgp {

enum class Method { full, fitc, vfe, ski, hcfgp };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::full: return "full";
    case Method::fitc: return "fitc";
    case Method::vfe: return "vfe";
    case Method::ski: return "ski";
    case Method::hcfgp: return "hcfgp";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  if (s == "full") return Method::full;
  if (s == "fitc") return Method::fitc;
  if (s == "vfe") return Method::vfe;
  if (s == "ski") return Method::ski;
  if (s == "hcfgp") return Method::hcfgp;
  throw ShapeError("unknown method: " + s);
}

struct ExperimentConfig {
  Method method = Method::full;
  Eigen::Index n = 100;
  Eigen::Index m = 10;  // inducing points / grid size; ignored for full
  unsigned seed = 42;
  int repeats = 1;
  HyperParams hyper = HyperParams::natural1d(1.0, 1.0, 0.2);
  double tol = 1e-8;         // HODLR / ACA
  Eigen::Index leaf_size = 64;
  double cg_tol = 1e-6;
  Eigen::Index oracle_cap = 8000;  // skip rmse_vs_full above this n; 0 disables
  bool optimize_inducing = false;
  int inducing_steps = 20;

  void validate() const {
    if (n < 1) throw ShapeError("ExperimentConfig: n must be >= 1");
    if (repeats < 1) throw ShapeError("ExperimentConfig: repeats must be >= 1");
    if (m < 1) throw ShapeError("ExperimentConfig: m must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"method", method_name(method)}, {"n", n},     {"m", m},
            {"seed", seed},                  {"repeats", repeats},
            {"hyper", hyper.to_json()},      {"tol", tol}, {"leaf_size", leaf_size},
            {"cg_tol", cg_tol},              {"oracle_cap", oracle_cap},
            {"optimize_inducing", optimize_inducing},
            {"inducing_steps", inducing_steps}};
  }
  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("method")) c.method = method_from_name(j.at("method"));
    if (j.contains("n")) c.n = j.at("n").get<Eigen::Index>();
    if (j.contains("m")) c.m = j.at("m").get<Eigen::Index>();
    if (j.contains("seed")) c.seed = j.at("seed").get<unsigned>();
    if (j.contains("repeats")) c.repeats = j.at("repeats").get<int>();
    if (j.contains("hyper")) c.hyper = HyperParams::from_json(j.at("hyper"));
    if (j.contains("tol")) c.tol = j.at("tol").get<double>();
    if (j.contains("leaf_size")) c.leaf_size = j.at("leaf_size").get<Eigen::Index>();
    if (j.contains("cg_tol")) c.cg_tol = j.at("cg_tol").get<double>();
    if (j.contains("oracle_cap")) c.oracle_cap = j.at("oracle_cap").get<Eigen::Index>();
    if (j.contains("optimize_inducing"))
      c.optimize_inducing = j.at("optimize_inducing").get<bool>();
    if (j.contains("inducing_steps")) c.inducing_steps = j.at("inducing_steps").get<int>();
    c.validate();
    return c;
  }
};

// Noise-free toy target 0.02 x + sinc(x), sinc normalized as
// sin(pi x)/(pi x) with sinc(0) = 1 by continuity.
inline double toy_truth(double x) {
  const double s = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
  return 0.02 * x + s;
}

struct ToyData {
  Dataset train;
  Vector test_x;  // 400 equispaced points on [-10, 10]
  Vector truth;   // noise-free target at test_x
};

inline constexpr double kToyNoiseVariance = 0.2;

inline ToyData gen_toy(Eigen::Index n, unsigned seed) {
  if (n < 1) throw ShapeError("gen_toy: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-10.0, 10.0);
  std::normal_distribution<double> eps(0.0, std::sqrt(kToyNoiseVariance));
  Matrix X(n, 1);
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = ux(rng);
    y[i] = toy_truth(X(i, 0)) + eps(rng);
  }
  ToyData d;
  d.train = Dataset(std::move(X), std::move(y));
  d.test_x = Vector::LinSpaced(400, -10.0, 10.0);
  d.truth.resize(400);
  for (Eigen::Index i = 0; i < 400; ++i) d.truth[i] = toy_truth(d.test_x[i]);
  return d;
}

struct RunResult {
  std::string method;
  Eigen::Index n = 0;
  double fit_seconds = 0;
  double predict_seconds = 0;
  Vector test_x;
  Vector mean;
  Vector variance;
  double rmse_vs_full = std::numeric_limits<double>::quiet_NaN();
  double rmse_vs_truth = std::numeric_limits<double>::quiet_NaN();
  double nlml = std::numeric_limits<double>::quiet_NaN();
  Matrix z_init, z_final;  // inducing locations when applicable
  bool failed = false;
  std::string error;
};

inline double rmse(const Vector& a, const Vector& b) {
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

inline InducingSet uniform_inducing(const Dataset& data, Eigen::Index m) {
  InducingSet z;
  z.Z.resize(m, data.dim());
  for (Eigen::Index d = 0; d < data.dim(); ++d)
    z.Z.col(d) = Vector::LinSpaced(m, data.X.col(d).minCoeff(), data.X.col(d).maxCoeff());
  return z;
}

inline RunResult run_method(const ExperimentConfig& cfg, const ToyData& data) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  RunResult r;
  r.method = method_name(cfg.method);
  r.n = data.train.size();
  r.test_x = data.test_x;
  Matrix Xstar(data.test_x.size(), 1);
  Xstar.col(0) = data.test_x;
  KernelSpec spec(cfg.hyper);

  try {
    const auto t0 = clock::now();
    switch (cfg.method) {
      case Method::full: {
        ExactPosterior post = exact_fit(data.train, spec);
        const auto t1 = clock::now();
        Prediction p = post.predict(Xstar);
        r.mean = p.mean;
        r.variance = p.cov.diagonal().cwiseMax(0.0);
        r.nlml = post.nlml();
        r.predict_seconds = std::chrono::duration<double>(clock::now() - t1).count();
        r.fit_seconds = std::chrono::duration<double>(t1 - t0).count();
        break;
      }
      case Method::fitc:
      case Method::vfe: {
        InducingSet z = uniform_inducing(data.train, cfg.m);
        r.z_init = z.Z;
        if (cfg.optimize_inducing)
          z = optimize_inducing(data.train, z, spec,
                                cfg.method == Method::vfe ? InducingObjective::vfe
                                                          : InducingObjective::fitc,
                                cfg.inducing_steps);
        r.z_final = z.Z;
        SparsePosterior post = SparsePosterior::fit(
            data.train, z, spec,
            cfg.method == Method::vfe ? SparsePosterior::Kind::vfe
                                      : SparsePosterior::Kind::fitc);
        const auto t1 = clock::now();
        SparsePrediction p = post.predict(Xstar);
        r.mean = p.mean;
        r.variance = p.variance;
        r.nlml = cfg.method == Method::vfe ? -post.elbo() : post.nlml();
        r.predict_seconds = std::chrono::duration<double>(clock::now() - t1).count();
        r.fit_seconds = std::chrono::duration<double>(t1 - t0).count();
        break;
      }
      case Method::ski: {
        Matrix both(data.train.size() + Xstar.rows(), 1);
        both << data.train.X, Xstar;
        RegularGrid grid = RegularGrid::covering(both, cfg.m);
        SkiModel model = SkiModel::fit(data.train, grid, spec, cfg.cg_tol);
        r.nlml = ski_nlml_approx(data.train, grid, spec, cfg.cg_tol);
        const auto t1 = clock::now();
        SparsePrediction p = model.predict(Xstar);
        r.mean = p.mean;
        r.variance = p.variance;
        r.predict_seconds = std::chrono::duration<double>(clock::now() - t1).count();
        r.fit_seconds = std::chrono::duration<double>(t1 - t0).count();
        break;
      }
      case Method::hcfgp: {
        HodlrConfig hc;
        hc.tol = cfg.tol;
        hc.leaf_size = cfg.leaf_size;
        HcfgpModel model = HcfgpModel::fit(data.train, spec, hc);
        const auto t1 = clock::now();
        HcfgpResult p = model.predict(Xstar);
        r.mean = p.mean;
        r.variance = p.variance;
        r.nlml = p.nlml;
        r.predict_seconds = std::chrono::duration<double>(clock::now() - t1).count();
        r.fit_seconds = std::chrono::duration<double>(t1 - t0).count();
        break;
      }
    }
    r.rmse_vs_truth = rmse(r.mean, data.truth);
    if (cfg.method == Method::full) {
      r.rmse_vs_full = 0.0;
    } else if (cfg.oracle_cap > 0 && data.train.size() <= cfg.oracle_cap) {
      Prediction full = exact_fit(data.train, spec).predict(Xstar);
      r.rmse_vs_full = rmse(r.mean, full.mean);
    }
  } catch (const std::exception& e) {
    r.failed = true;
    r.error = e.what();
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV helpers (full precision so re-runs compare bit-identically)

inline std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void write(std::ostream& os) const {
    for (size_t i = 0; i < header.size(); ++i)
      os << header[i] << (i + 1 < header.size() ? "," : "\n");
    for (const auto& row : rows)
      for (size_t i = 0; i < row.size(); ++i)
        os << row[i] << (i + 1 < row.size() ? "," : "\n");
  }

  static CsvTable read(std::istream& is) {
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (line.back() == ',') cells.push_back("");
      if (first) {
        t.header = std::move(cells);
        first = false;
      } else {
        t.rows.push_back(std::move(cells));
      }
    }
    return t;
  }

  Vector column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ShapeError("CsvTable: no column " + name);
    const size_t c = static_cast<size_t>(it - header.begin());
    std::vector<double> vals;
    for (const auto& row : rows)
      if (c < row.size() && !row[c].empty()) vals.push_back(std::stod(row[c]));
    Vector v(static_cast<Eigen::Index>(vals.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = vals[static_cast<size_t>(i)];
    return v;
  }
};

/// CSV of a single run: test grid columns plus sparse training columns.
inline CsvTable run_result_csv(const RunResult& r, const ToyData& data) {
  CsvTable t;
  t.header = {"x", "truth", "mean", "variance", "lo95", "hi95", "train_x", "train_y"};
  const Eigen::Index ng = r.test_x.size(), nt = data.train.size();
  for (Eigen::Index i = 0; i < std::max(ng, nt); ++i) {
    std::vector<std::string> row(8);
    if (i < ng) {
      const double sd = std::sqrt(std::max(r.variance[i], 0.0));
      row[0] = fmt_full(r.test_x[i]);
      row[1] = fmt_full(data.truth[i]);
      row[2] = fmt_full(r.mean[i]);
      row[3] = fmt_full(r.variance[i]);
      row[4] = fmt_full(r.mean[i] - 1.96 * sd);
      row[5] = fmt_full(r.mean[i] + 1.96 * sd);
    }
    if (i < nt) {
      row[6] = fmt_full(data.train.X(i, 0));
      row[7] = fmt_full(data.train.y[i]);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Fig.-1-style export: full-GP band and method band side by side, plus
/// training data and inducing locations as sparse columns.
inline CsvTable export_fig_data(const RunResult& method_result, const RunResult& full_result,
                                const ToyData& data) {
  if (method_result.test_x.size() != full_result.test_x.size() ||
      (method_result.test_x - full_result.test_x).norm() != 0)
    throw ShapeError("export_fig_data: test grids do not align");
  CsvTable t;
  t.header = {"x",           "truth",       "full_mean", "full_lo95", "full_hi95",
              "method_mean", "method_lo95", "method_hi95", "train_x", "train_y",
              "z_init",      "z_final"};
  const Eigen::Index ng = method_result.test_x.size();
  const Eigen::Index nt = data.train.size();
  const Eigen::Index nz = method_result.z_init.rows();
  for (Eigen::Index i = 0; i < std::max({ng, nt, nz}); ++i) {
    std::vector<std::string> row(12);
    if (i < ng) {
      const double fs = 1.96 * std::sqrt(std::max(full_result.variance[i], 0.0));
      const double ms = 1.96 * std::sqrt(std::max(method_result.variance[i], 0.0));
      row[0] = fmt_full(method_result.test_x[i]);
      row[1] = fmt_full(data.truth[i]);
      row[2] = fmt_full(full_result.mean[i]);
      row[3] = fmt_full(full_result.mean[i] - fs);
      row[4] = fmt_full(full_result.mean[i] + fs);
      row[5] = fmt_full(method_result.mean[i]);
      row[6] = fmt_full(method_result.mean[i] - ms);
      row[7] = fmt_full(method_result.mean[i] + ms);
    }
    if (i < nt) {
      row[8] = fmt_full(data.train.X(i, 0));
      row[9] = fmt_full(data.train.y[i]);
    }
    if (i < nz) {
      row[10] = fmt_full(method_result.z_init(i, 0));
      row[11] = fmt_full(method_result.z_final(i, 0));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Timing sweep

struct TimingCell {
  double median = std::numeric_limits<double>::quiet_NaN();
  double iqr = std::numeric_limits<double>::quiet_NaN();
  double fit_median = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
  std::string error;
};

struct TimingTable {
  std::vector<Eigen::Index> sizes;
  std::vector<Method> methods;
  std::vector<std::vector<TimingCell>> cells;  // [size][method]

  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(12) << "n";
    for (Method m : methods) os << std::setw(16) << method_name(m);
    os << '\n';
    bool any_failed = false;
    for (size_t i = 0; i < sizes.size(); ++i) {
      os << std::setw(12) << sizes[i];
      for (size_t j = 0; j < methods.size(); ++j) {
        const TimingCell& c = cells[i][j];
        if (c.failed) {
          os << std::setw(16) << "FAIL*";
          any_failed = true;
        } else {
          std::ostringstream v;
          v << std::fixed << std::setprecision(4) << c.median << "s";
          os << std::setw(16) << v.str();
        }
      }
      os << '\n';
    }
    if (any_failed) {
      os << "* failed cells:\n";
      for (size_t i = 0; i < sizes.size(); ++i)
        for (size_t j = 0; j < methods.size(); ++j)
          if (cells[i][j].failed)
            os << "  n=" << sizes[i] << ' ' << method_name(methods[j]) << ": "
               << cells[i][j].error << '\n';
    }
    return os.str();
  }

  CsvTable to_csv() const {
    CsvTable t;
    t.header = {"n"};
    for (Method m : methods) {
      t.header.push_back(method_name(m) + "_median_s");
      t.header.push_back(method_name(m) + "_iqr_s");
      t.header.push_back(method_name(m) + "_fit_median_s");
    }
    for (size_t i = 0; i < sizes.size(); ++i) {
      std::vector<std::string> row;
      row.push_back(std::to_string(sizes[i]));
      for (size_t j = 0; j < methods.size(); ++j) {
        const TimingCell& c = cells[i][j];
        if (c.failed) {
          row.insert(row.end(), {"FAIL", "FAIL", "FAIL"});
        } else {
          row.push_back(fmt_full(c.median));
          row.push_back(fmt_full(c.iqr));
          row.push_back(fmt_full(c.fit_median));
        }
      }
      t.rows.push_back(std::move(row));
    }
    return t;
  }
};

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double iqr_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto q = [&](double f) {
    const double pos = f * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    return lo + 1 < v.size() ? v[lo] * (1 - frac) + v[lo + 1] * frac : v[lo];
  };
  return q(0.75) - q(0.25);
}

inline TimingTable timing_table(const std::vector<Eigen::Index>& sizes,
                                const std::vector<Method>& methods, int repeats,
                                unsigned seed, const ExperimentConfig& base = {}) {
  TimingTable table;
  table.sizes = sizes;
  table.methods = methods;
  for (size_t i = 0; i < sizes.size(); ++i) {
    std::vector<TimingCell> row;
    for (Method m : methods) {
      TimingCell cell;
      std::vector<double> totals, fits;
      for (int rep = 0; rep < repeats; ++rep) {
        ExperimentConfig cfg = base;
        cfg.method = m;
        cfg.n = sizes[i];
        cfg.seed = seed + static_cast<unsigned>(rep);
        cfg.repeats = 1;
        cfg.oracle_cap = 0;  // timing only; no oracle comparison runs
        ToyData data = gen_toy(cfg.n, cfg.seed);
        RunResult r = run_method(cfg, data);
        if (r.failed) {
          cell.failed = true;
          cell.error = r.error;
          break;
        }
        totals.push_back(r.fit_seconds + r.predict_seconds);
        fits.push_back(r.fit_seconds);
      }
      if (!cell.failed) {
        cell.median = median_of(totals);
        cell.iqr = iqr_of(totals);
        cell.fit_median = median_of(fits);
      }
      row.push_back(std::move(cell));
    }
    table.cells.push_back(std::move(row));
  }
  return table;
}

}  // namespace fastgp
