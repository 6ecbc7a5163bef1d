#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "fastgp/dense.hpp"
#include "fastgp/trainer.hpp"
#include "test_util.hpp"

using namespace fastgp;
using testutil::rel_err;

TEST_CASE("minimize_nlml returns immediately at a stationary point") {
  auto f = [](const Vector& t) { return t.squaredNorm(); };
  auto g = [](const Vector& t) { return Vector(2.0 * t); };
  OptimizeResult r = minimize_nlml(f, g, Vector::Zero(3));
  CHECK(r.value == 0.0);
  CHECK(r.trace.size() == 1);
  CHECK(r.trace[0].grad_norm == 0.0);
}

TEST_CASE("minimize_nlml solves a convex quadratic") {
  Vector target(2);
  target << 1.5, -0.75;
  auto f = [&](const Vector& t) { return 0.5 * (t - target).squaredNorm(); };
  auto g = [&](const Vector& t) { return Vector(t - target); };
  OptimizeConfig cfg;
  cfg.max_iters = 200;
  cfg.grad_tol = 1e-8;
  OptimizeResult r = minimize_nlml(f, g, Vector::Zero(2), cfg);
  CHECK(rel_err(r.theta, target) < 1e-6);
  CHECK(r.value < 1e-12);
}

TEST_CASE("trace is monotone non-increasing") {
  // Rosenbrock-like objective with finite-difference gradients.
  auto f = [](const Vector& t) {
    const double a = 1.0 - t[0], b = t[1] - t[0] * t[0];
    return a * a + 10.0 * b * b;
  };
  OptimizeConfig cfg;
  cfg.max_iters = 60;
  cfg.use_finite_diff = true;
  Vector t0(2);
  t0 << -1.2, 1.0;
  OptimizeResult r = minimize_nlml(f, std::nullopt, t0, cfg);
  REQUIRE(r.trace.size() >= 2);
  for (size_t i = 1; i < r.trace.size(); ++i)
    CHECK(r.trace[i].value <= r.trace[i - 1].value + 1e-15);
  CHECK(r.value <= f(t0));
}

TEST_CASE("minimize_nlml rejects a non-finite starting objective") {
  auto f = [](const Vector&) { return std::numeric_limits<double>::quiet_NaN(); };
  CHECK_THROWS_AS(minimize_nlml(f, std::nullopt, Vector::Zero(1)), OptimizationError);
  OptimizeConfig bad;
  bad.max_iters = 0;
  auto ok = [](const Vector& t) { return t.squaredNorm(); };
  CHECK_THROWS_AS(minimize_nlml(ok, std::nullopt, Vector::Zero(1), bad), ShapeError);
}

TEST_CASE("finite_diff_grad is exact for linear and O(h^2) for cubic") {
  Vector c(3);
  c << 1.0, -2.0, 0.5;
  auto lin = [&](const Vector& t) { return c.dot(t); };
  Vector g = finite_diff_grad(lin, Vector::Ones(3), 1e-5);
  CHECK(rel_err(g, c) < 1e-10);

  auto cubic = [](const Vector& t) { return t[0] * t[0] * t[0]; };
  Vector x0 = Vector::Ones(1);
  // error ~ h^2 * f'''/6 = h^2; check the ratio between two step sizes
  const double e1 = std::abs(finite_diff_grad(cubic, x0, 1e-3)[0] - 3.0);
  const double e2 = std::abs(finite_diff_grad(cubic, x0, 1e-4)[0] - 3.0);
  CHECK(e1 / e2 == Catch::Approx(100.0).epsilon(0.05));
}

TEST_CASE("analytic NLML gradient agrees with finite differences in direction") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  Matrix X = testutil::random_inputs(30, 1, -4, 4, 8);
  Vector y = testutil::random_vector(30, 9);
  Dataset d(X, y);
  auto obj = [&](const Vector& th) {
    return exact_nlml(d, KernelSpec(HyperParams::unpack(th)));
  };
  for (int trial = 0; trial < 20; ++trial) {
    Vector th(3);
    for (int i = 0; i < 3; ++i) th[i] = u(rng);
    Vector ga = exact_nlml_grad(d, KernelSpec(HyperParams::unpack(th)));
    Vector gf = finite_diff_grad(obj, th, 1e-5);
    CHECK(rel_err(ga, gf) < 1e-5);
    CHECK(ga.dot(gf) / (ga.norm() * gf.norm()) > 0.999);
  }
}

TEST_CASE("hyperparameter training on noisy sinc data is self-consistent") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ux(-10.0, 10.0);
  std::normal_distribution<double> noise(0.0, std::sqrt(0.2));
  Matrix X(80, 1);
  Vector y(80);
  for (Eigen::Index i = 0; i < 80; ++i) {
    const double x = ux(rng);
    X(i, 0) = x;
    const double px = std::numbers::pi * x;
    y[i] = 0.02 * x + (std::abs(px) < 1e-12 ? 1.0 : std::sin(px) / px) + noise(rng);
  }
  Dataset d(X, y);
  auto obj = [&](const Vector& th) {
    return exact_nlml(d, KernelSpec(HyperParams::unpack(th)));
  };
  auto grad = [&](const Vector& th) {
    return exact_nlml_grad(d, KernelSpec(HyperParams::unpack(th)));
  };
  Vector th0 = HyperParams::natural1d(2.0, 0.5, 0.5).pack();
  OptimizeConfig cfg;
  cfg.max_iters = 150;
  OptimizeResult r = minimize_nlml(obj, grad, th0, cfg);
  CHECK(r.value <= obj(th0));
  HyperParams learned = HyperParams::unpack(r.theta);
  // the true observation noise is 0.2; training should land near it
  CHECK(learned.noise_variance() > 0.2 / 3.0);
  CHECK(learned.noise_variance() < 0.2 * 3.0);
}

TEST_CASE("finite-difference and analytic training reach similar objectives") {
  Matrix X = testutil::random_inputs(40, 1, -5, 5, 13);
  Vector y = testutil::random_vector(40, 14);
  Dataset d(X, y);
  auto obj = [&](const Vector& th) {
    return exact_nlml(d, KernelSpec(HyperParams::unpack(th)));
  };
  auto grad = [&](const Vector& th) {
    return exact_nlml_grad(d, KernelSpec(HyperParams::unpack(th)));
  };
  Vector th0 = HyperParams::natural1d(1.0, 1.0, 0.5).pack();
  OptimizeConfig cfg;
  cfg.max_iters = 80;
  OptimizeResult ra = minimize_nlml(obj, grad, th0, cfg);
  OptimizeConfig cfd = cfg;
  cfd.use_finite_diff = true;
  OptimizeResult rf = minimize_nlml(obj, std::nullopt, th0, cfd);
  CHECK(std::abs(ra.value - rf.value) < 1e-2 * std::abs(ra.value) + 1e-2);
}

TEST_CASE("write_trace_csv emits one row per iteration") {
  std::vector<TraceRow> trace{{0, 3.5, 1.0, 1.0}, {1, 2.5, 0.5, 1.5}};
  std::ostringstream os;
  write_trace_csv(os, trace);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "iteration,objective,grad_norm,step");
  std::getline(is, line);
  CHECK(line.rfind("0,3.5,", 0) == 0);
  std::getline(is, line);
  CHECK(line.rfind("1,2.5,", 0) == 0);
}
