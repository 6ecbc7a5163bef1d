// Benchmark harness: single runs, timing sweeps, and figure-data export
// for the GP backends (full, fitc, vfe, ski, hcfgp) on the 1D toy target
// 0.02 x + sinc(x) with Gaussian noise.
//
// Exit codes: 0 success, 1 any failed run/cell, 2 configuration error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fastgp/bench.hpp"

namespace fs = std::filesystem;
using namespace fastgp;

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir = ".";
  std::string format = "csv";
  std::string method = "full";
  std::string methods = "full,fitc,vfe,ski,hcfgp";
  std::string sizes = "500,1000,2000";
  long n = 100, m = 10, leaf_size = 64;
  unsigned seed = 42;
  int repeats = 1, inducing_steps = 20;
  double tol = 1e-8, cg_tol = 1e-6;
  bool optimize_inducing = false;

  // which flags the user actually passed, so they override the config file
  CLI::App* cmd = nullptr;
  bool passed(const std::string& flag) const {
    const CLI::Option* opt = cmd->get_option_no_throw(flag);
    return opt != nullptr && opt->count() > 0;
  }
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

ExperimentConfig build_config(const CliOptions& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) {
    std::ifstream is(o.config_path);
    if (!is) throw ShapeError("cannot open config file: " + o.config_path);
    nlohmann::json j;
    is >> j;
    cfg = ExperimentConfig::from_json(j);
  }
  if (o.passed("--method")) cfg.method = method_from_name(o.method);
  if (o.passed("--n")) cfg.n = o.n;
  if (o.passed("--m")) cfg.m = o.m;
  if (o.passed("--seed")) cfg.seed = o.seed;
  if (o.passed("--repeats")) cfg.repeats = o.repeats;
  if (o.passed("--tol")) cfg.tol = o.tol;
  if (o.passed("--leaf-size")) cfg.leaf_size = o.leaf_size;
  if (o.passed("--cg-tol")) cfg.cg_tol = o.cg_tol;
  if (o.passed("--optimize-inducing")) cfg.optimize_inducing = o.optimize_inducing;
  if (o.passed("--inducing-steps")) cfg.inducing_steps = o.inducing_steps;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw ShapeError("cannot write " + path.string());
  os << content;
}

std::string csv_string(const CsvTable& t) {
  std::ostringstream os;
  t.write(os);
  return os.str();
}

nlohmann::json result_meta(const RunResult& r, const ExperimentConfig& cfg) {
  nlohmann::json j{{"method", r.method},
                   {"n", r.n},
                   {"fit_seconds", r.fit_seconds},
                   {"predict_seconds", r.predict_seconds},
                   {"rmse_vs_truth", r.rmse_vs_truth},
                   {"nlml", r.nlml},
                   {"failed", r.failed},
                   {"config", cfg.to_json()}};
  if (std::isfinite(r.rmse_vs_full)) j["rmse_vs_full"] = r.rmse_vs_full;
  if (r.failed) j["error"] = r.error;
  return j;
}

nlohmann::json result_json(const RunResult& r, const ToyData& data,
                           const ExperimentConfig& cfg) {
  nlohmann::json j = result_meta(r, cfg);
  auto vec = [](const Vector& v) {
    std::vector<double> out(v.data(), v.data() + v.size());
    return out;
  };
  j["x"] = vec(r.test_x);
  j["truth"] = vec(data.truth);
  j["mean"] = vec(r.mean);
  j["variance"] = vec(r.variance);
  return j;
}

int cmd_run(const CliOptions& o) {
  ExperimentConfig cfg = build_config(o);
  ToyData data = gen_toy(cfg.n, cfg.seed);
  RunResult r = run_method(cfg, data);
  fs::create_directories(o.out_dir);
  const std::string base = "run_" + r.method;
  if (o.format == "json") {
    write_file(fs::path(o.out_dir) / (base + ".json"), result_json(r, data, cfg).dump(2) + "\n");
  } else {
    write_file(fs::path(o.out_dir) / (base + ".csv"), csv_string(run_result_csv(r, data)));
    write_file(fs::path(o.out_dir) / (base + ".json"), result_meta(r, cfg).dump(2) + "\n");
  }
  if (r.failed) {
    std::cerr << "run failed: " << r.error << "\n";
    return 1;
  }
  std::cout << r.method << " n=" << r.n << " fit=" << r.fit_seconds
            << "s predict=" << r.predict_seconds << "s nlml=" << r.nlml
            << " rmse_vs_truth=" << r.rmse_vs_truth;
  if (std::isfinite(r.rmse_vs_full)) std::cout << " rmse_vs_full=" << r.rmse_vs_full;
  std::cout << "\n";
  return 0;
}

int cmd_table(const CliOptions& o) {
  ExperimentConfig base = build_config(o);
  std::vector<Eigen::Index> sizes;
  for (const std::string& s : split_csv(o.sizes)) sizes.push_back(std::stol(s));
  if (sizes.empty()) throw ShapeError("table: no sizes given");
  std::vector<Method> methods;
  for (const std::string& s : split_csv(o.methods)) methods.push_back(method_from_name(s));
  if (methods.empty()) throw ShapeError("table: no methods given");

  TimingTable t = timing_table(sizes, methods, base.repeats, base.seed, base);
  std::cout << t.to_text();
  fs::create_directories(o.out_dir);
  write_file(fs::path(o.out_dir) / "timing.csv", csv_string(t.to_csv()));
  for (const auto& row : t.cells)
    for (const TimingCell& c : row)
      if (c.failed) return 1;
  return 0;
}

int cmd_figure(const CliOptions& o) {
  ExperimentConfig base = build_config(o);
  ToyData data = gen_toy(base.n, base.seed);

  ExperimentConfig full_cfg = base;
  full_cfg.method = Method::full;
  RunResult full = run_method(full_cfg, data);
  fs::create_directories(o.out_dir);
  if (full.failed) {
    std::cerr << "full-GP reference failed: " << full.error << "\n";
    return 1;
  }

  bool any_failed = false;
  for (const std::string& name : split_csv(o.methods)) {
    ExperimentConfig cfg = base;
    cfg.method = method_from_name(name);
    RunResult r = cfg.method == Method::full ? full : run_method(cfg, data);
    if (r.failed) {
      std::cerr << name << " failed: " << r.error << "\n";
      any_failed = true;
      continue;
    }
    CsvTable t = export_fig_data(r, full, data);
    write_file(fs::path(o.out_dir) / ("figure_" + name + ".csv"), csv_string(t));
    std::cout << name << ": rmse_vs_full=" << r.rmse_vs_full
              << " rmse_vs_truth=" << r.rmse_vs_truth << "\n";
  }
  return any_failed ? 1 : 0;
}

void add_common_flags(CLI::App* cmd, CliOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON config file (flags override it)");
  cmd->add_option("--n", o.n, "number of training points");
  cmd->add_option("--m", o.m, "inducing points / grid size (ignored for full)");
  cmd->add_option("--seed", o.seed, "RNG seed");
  cmd->add_option("--repeats", o.repeats, "repeats per timing cell");
  cmd->add_option("--tol", o.tol, "HODLR/ACA tolerance");
  cmd->add_option("--leaf-size", o.leaf_size, "HODLR leaf size");
  cmd->add_option("--cg-tol", o.cg_tol, "SKI conjugate-gradient tolerance");
  cmd->add_flag("--optimize-inducing", o.optimize_inducing,
                "optimize inducing locations (fitc/vfe)");
  cmd->add_option("--inducing-steps", o.inducing_steps,
                  "gradient steps for inducing-point optimization");
  cmd->add_option("--out", o.out_dir, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GP regression benchmark harness"};
  app.require_subcommand(1);
  CliOptions o;

  CLI::App* run = app.add_subcommand("run", "run a single experiment");
  run->add_option("--method", o.method, "full|fitc|vfe|ski|hcfgp");
  run->add_option("--format", o.format, "csv|json")
      ->check(CLI::IsMember({"csv", "json"}));
  add_common_flags(run, o);

  CLI::App* table = app.add_subcommand("table", "timing sweep over sizes x methods");
  table->add_option("--sizes", o.sizes, "comma-separated training sizes");
  table->add_option("--methods", o.methods, "comma-separated method list");
  add_common_flags(table, o);

  CLI::App* figure = app.add_subcommand("figure", "export figure data vs the full GP");
  figure->add_option("--methods", o.methods, "comma-separated method list");
  add_common_flags(figure, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help/version are success; bad flags are config errors
  }

  try {
    if (run->parsed()) {
      o.cmd = run;
      return cmd_run(o);
    }
    if (table->parsed()) {
      o.cmd = table;
      return cmd_table(o);
    }
    o.cmd = figure;
    return cmd_figure(o);
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
