#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "fastgp/bench.hpp"
#include "test_util.hpp"

using namespace fastgp;
using testutil::rel_err;

TEST_CASE("toy_truth closed-form values") {
  CHECK(toy_truth(0.0) == 1.0);                    // sinc(0) by continuity
  CHECK(toy_truth(1.0) == Catch::Approx(0.02));    // sinc vanishes at integers
  CHECK(toy_truth(-2.0) == Catch::Approx(-0.04));
  CHECK(toy_truth(0.5) ==
        Catch::Approx(0.01 + std::sin(std::numbers::pi * 0.5) / (std::numbers::pi * 0.5)));
}

TEST_CASE("gen_toy is deterministic in the seed and spans the interval") {
  ToyData a = gen_toy(200, 7), b = gen_toy(200, 7), c = gen_toy(200, 8);
  CHECK((a.train.X - b.train.X).norm() == 0.0);
  CHECK((a.train.y - b.train.y).norm() == 0.0);
  CHECK((a.train.X - c.train.X).norm() > 0.0);
  CHECK(a.train.X.minCoeff() >= -10.0);
  CHECK(a.train.X.maxCoeff() <= 10.0);
  REQUIRE(a.test_x.size() == 400);
  CHECK(a.test_x[0] == -10.0);
  CHECK(a.test_x[399] == 10.0);
  CHECK(a.truth[0] == Catch::Approx(toy_truth(-10.0)));
  CHECK_THROWS_AS(gen_toy(0, 1), ShapeError);
}

TEST_CASE("method names round-trip") {
  for (Method m : {Method::full, Method::fitc, Method::vfe, Method::ski, Method::hcfgp})
    CHECK(method_from_name(method_name(m)) == m);
  CHECK_THROWS_AS(method_from_name("nope"), ShapeError);
}

TEST_CASE("ExperimentConfig JSON round trip and validation") {
  ExperimentConfig c;
  c.method = Method::ski;
  c.n = 321;
  c.m = 17;
  c.seed = 5;
  c.optimize_inducing = true;
  ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.method == Method::ski);
  CHECK(back.n == 321);
  CHECK(back.m == 17);
  CHECK(back.seed == 5);
  CHECK(back.optimize_inducing);
  CHECK(rel_err(back.hyper.pack(), c.hyper.pack()) < 1e-14);

  nlohmann::json bad = c.to_json();
  bad["n"] = 0;
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ShapeError);
}

TEST_CASE("run_method full has zero rmse against itself") {
  ExperimentConfig cfg;
  cfg.method = Method::full;
  cfg.n = 60;
  ToyData data = gen_toy(cfg.n, cfg.seed);
  RunResult r = run_method(cfg, data);
  REQUIRE_FALSE(r.failed);
  CHECK(r.rmse_vs_full == 0.0);
  CHECK(r.mean.size() == 400);
  CHECK(r.variance.minCoeff() >= 0.0);
  CHECK(std::isfinite(r.nlml));
  CHECK(r.rmse_vs_truth < 1.0);
}

TEST_CASE("run_method vfe with m close to n nearly matches full") {
  ExperimentConfig cfg;
  cfg.method = Method::vfe;
  cfg.n = 60;
  cfg.m = 60;
  ToyData data = gen_toy(cfg.n, cfg.seed);
  RunResult r = run_method(cfg, data);
  REQUIRE_FALSE(r.failed);
  CHECK(r.rmse_vs_full < 1e-3);
  CHECK(r.z_init.rows() == 60);
  CHECK((r.z_init - r.z_final).norm() == 0.0);  // no optimization requested
}

TEST_CASE("run_method captures failures instead of aborting") {
  ExperimentConfig cfg;
  cfg.method = Method::fitc;
  cfg.n = 30;
  cfg.m = 3;
  cfg.hyper.log_noise_variance = std::log(1e-300);  // conditioning disaster
  cfg.hyper.log_lengthscale = Vector::Constant(1, std::log(1e3));
  ToyData data = gen_toy(cfg.n, cfg.seed);
  RunResult r = run_method(cfg, data);
  if (r.failed) CHECK_FALSE(r.error.empty());  // either captured or survived
  CHECK_NOTHROW(run_method(cfg, data));
}

TEST_CASE("run_method is deterministic for a fixed config") {
  for (Method m : {Method::fitc, Method::ski, Method::hcfgp}) {
    ExperimentConfig cfg;
    cfg.method = m;
    cfg.n = 80;
    cfg.m = 16;
    ToyData data = gen_toy(cfg.n, cfg.seed);
    RunResult a = run_method(cfg, data);
    RunResult b = run_method(cfg, data);
    REQUIRE_FALSE(a.failed);
    CHECK((a.mean - b.mean).norm() == 0.0);
    CHECK((a.variance - b.variance).norm() == 0.0);
  }
}

TEST_CASE("CSV write/read round trip preserves cells") {
  CsvTable t;
  t.header = {"a", "b", "c"};
  t.rows = {{"1", "2.5", "x"}, {fmt_full(1.0 / 3.0), "", "z"}};
  std::ostringstream os;
  t.write(os);
  std::istringstream is(os.str());
  CsvTable back = CsvTable::read(is);
  CHECK(back.header == t.header);
  REQUIRE(back.rows.size() == 2);
  CHECK(back.rows[0] == t.rows[0]);
  CHECK(back.rows[1] == t.rows[1]);
  Vector col = back.column("a");
  REQUIRE(col.size() == 2);
  CHECK(col[1] == 1.0 / 3.0);  // %.17g survives the round trip exactly
  CHECK_THROWS_AS(back.column("missing"), ShapeError);
}

TEST_CASE("run_result_csv pads ragged columns") {
  ExperimentConfig cfg;
  cfg.method = Method::full;
  cfg.n = 20;
  ToyData data = gen_toy(cfg.n, cfg.seed);
  RunResult r = run_method(cfg, data);
  CsvTable t = run_result_csv(r, data);
  CHECK(t.header.size() == 8);
  CHECK(t.rows.size() == 400);  // grid is longer than train set
  CHECK(t.rows[0][6] != "");
  CHECK(t.rows[25][6] == "");  // train columns exhausted after n rows
  CHECK(t.column("train_x").size() == 20);
  CHECK(t.column("x").size() == 400);
  // lo95/hi95 bracket the mean
  Vector lo = t.column("lo95"), hi = t.column("hi95"), mean = t.column("mean");
  for (Eigen::Index i = 0; i < 400; ++i) {
    CHECK(lo[i] <= mean[i]);
    CHECK(hi[i] >= mean[i]);
  }
}

TEST_CASE("export_fig_data aligns grids and emits inducing columns") {
  ExperimentConfig cfg;
  cfg.method = Method::vfe;
  cfg.n = 50;
  cfg.m = 8;
  ToyData data = gen_toy(cfg.n, cfg.seed);
  RunResult method = run_method(cfg, data);
  cfg.method = Method::full;
  RunResult full = run_method(cfg, data);
  CsvTable t = export_fig_data(method, full, data);
  CHECK(t.header.size() == 12);
  CHECK(t.column("z_init").size() == 8);
  CHECK(t.column("x").size() == 400);
  CHECK(rel_err(t.column("full_mean"), full.mean) < 1e-15);

  RunResult misaligned = full;
  misaligned.test_x = Vector::LinSpaced(100, -10.0, 10.0);
  misaligned.mean = Vector::Zero(100);
  misaligned.variance = Vector::Zero(100);
  CHECK_THROWS_AS(export_fig_data(method, misaligned, data), ShapeError);
}

TEST_CASE("median and iqr helpers") {
  CHECK(median_of({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median_of({4.0, 1.0, 2.0, 3.0}) == 2.5);
  CHECK(iqr_of({1.0, 2.0, 3.0, 4.0, 5.0}) == Catch::Approx(2.0));
  CHECK(iqr_of({5.0, 5.0, 5.0}) == 0.0);
}

TEST_CASE("timing_table single cell and failure annotation") {
  ExperimentConfig base;
  base.m = 16;
  TimingTable t = timing_table({64}, {Method::full, Method::vfe}, 3, 9, base);
  REQUIRE(t.cells.size() == 1);
  REQUIRE(t.cells[0].size() == 2);
  CHECK_FALSE(t.cells[0][0].failed);
  CHECK(t.cells[0][0].median >= 0.0);
  CHECK(t.cells[0][0].fit_median <= t.cells[0][0].median + 1e-12);

  std::string text = t.to_text();
  CHECK(text.find("full") != std::string::npos);
  CHECK(text.find("64") != std::string::npos);

  CsvTable csv = t.to_csv();
  CHECK(csv.header.size() == 1 + 2 * 3);
  CHECK(csv.rows.size() == 1);
  CHECK(csv.rows[0][0] == "64");
}
