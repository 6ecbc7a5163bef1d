#include <catch2/catch_amalgamated.hpp>

#include "fastgp/dense.hpp"
#include "fastgp/inducing.hpp"
#include "test_util.hpp"

using namespace fastgp;
using testutil::rel_err;

namespace {

KernelSpec default_spec() { return KernelSpec(HyperParams::natural1d(1.0, 1.0, 0.3)); }

Dataset separated_dataset(Eigen::Index n, unsigned seed) {
  Matrix X = testutil::separated_inputs_1d(n, 0.5, seed);
  Vector y = testutil::random_vector(n, seed + 100);
  return Dataset(std::move(X), std::move(y));
}

Matrix dense_nystrom(const Dataset& d, const InducingSet& z, const KernelSpec& spec) {
  Matrix Kxz = kern_cross(spec, d.X, z.Z);
  Matrix Kzz = kern_cross(spec, z.Z, z.Z);
  Kzz.diagonal().array() += kInducingJitter * spec.hyper.signal_variance();
  return Kxz * Kzz.inverse() * Kxz.transpose();
}

// NLML of N(y | 0, C) evaluated densely.
double dense_gaussian_nlml(const Vector& y, const Matrix& C) {
  Eigen::LLT<Matrix> llt(C);
  REQUIRE(llt.info() == Eigen::Success);
  const double n = static_cast<double>(y.size());
  return 0.5 * y.dot(llt.solve(y)) + Matrix(llt.matrixL()).diagonal().array().log().sum() +
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

}  // namespace

TEST_CASE("InducingSet rejects duplicates") {
  Matrix Z(2, 1);
  Z << 1.0, 1.0;
  CHECK_THROWS_AS(InducingSet(Z), ShapeError);
}

TEST_CASE("Nystrom factor reproduces Q_XX and under-approximates the diagonal") {
  Dataset d = separated_dataset(25, 3);
  KernelSpec spec = default_spec();
  InducingSet z(testutil::separated_inputs_1d(6, 2.0, 4));
  NystromFactor nf = NystromFactor::build(d.X, z, spec);
  Matrix Q = nf.V * nf.V.transpose();
  CHECK(rel_err(Q, dense_nystrom(d, z, spec)) < 1e-8);
  Vector resid = Vector::Constant(d.size(), spec.hyper.signal_variance()) - nf.q_diag();
  CHECK(resid.minCoeff() > -1e-10);
}

TEST_CASE("FITC with Z = X recovers the exact GP") {
  Dataset d = separated_dataset(40, 7);
  KernelSpec spec = default_spec();
  InducingSet z(d.X);
  auto post = fitc_fit(d, z, spec);
  auto exact = exact_fit(d, spec);
  Matrix Xs = testutil::random_inputs(9, 1, 0, 20, 8);
  SparsePrediction sp = post.predict(Xs);
  Prediction ep = exact.predict(Xs);
  CHECK(rel_err(sp.mean, ep.mean) < 1e-8);
  CHECK(rel_err(sp.variance, Vector(ep.cov.diagonal())) < 1e-8);
  CHECK(rel_err(post.nlml(), exact.nlml()) < 1e-8);
}

TEST_CASE("FITC m=1 diagonal correction by hand") {
  // n = 2, one inducing point: lambda_i = s^2 - k(x_i,z)^2/k(z,z) + sigma^2
  Matrix X(2, 1);
  X << 0.0, 1.0;
  Vector y(2);
  y << 1.0, -1.0;
  KernelSpec spec = default_spec();
  Matrix Z(1, 1);
  Z << 0.4;
  Dataset d(X, y);
  InducingSet z(Z);
  const double s2 = spec.hyper.signal_variance();
  const double sigma2 = spec.hyper.noise_variance();
  Vector kxz(2);
  for (int i = 0; i < 2; ++i)
    kxz[i] = kern_eval(spec, X.row(i).transpose(), Z.row(0).transpose());
  const double kzz = s2 * (1.0 + kInducingJitter);
  Matrix Q = kxz * kxz.transpose() / kzz;
  Matrix C = Q;
  C(0, 0) = s2 + sigma2;
  C(1, 1) = s2 + sigma2;  // FITC keeps the exact diagonal
  CHECK(rel_err(fitc_nlml(d, z, spec), dense_gaussian_nlml(y, C)) < 1e-10);
}

TEST_CASE("FITC NLML and prediction against the dense construction") {
  Dataset d = separated_dataset(40, 11);
  KernelSpec spec = default_spec();
  InducingSet z(testutil::separated_inputs_1d(5, 4.0, 12));
  const double sigma2 = spec.hyper.noise_variance();

  Matrix Q = dense_nystrom(d, z, spec);
  Matrix C = Q;
  Vector corr = (Vector::Constant(d.size(), spec.hyper.signal_variance()) -
                 Q.diagonal()).cwiseMax(0.0);
  C.diagonal() += corr;
  C.diagonal().array() += sigma2;
  CHECK(rel_err(fitc_nlml(d, z, spec), dense_gaussian_nlml(d.y, C)) < 1e-8);

  // dense FITC predictive: joint over (f*, y) with cross-cov Q_*X
  Matrix Xs = testutil::random_inputs(7, 1, 0, 20, 13);
  Matrix Kxz = kern_cross(spec, d.X, z.Z);
  Matrix Ksz = kern_cross(spec, Xs, z.Z);
  Matrix Kzz = kern_cross(spec, z.Z, z.Z);
  Kzz.diagonal().array() += kInducingJitter * spec.hyper.signal_variance();
  Matrix Qsx = Ksz * Kzz.inverse() * Kxz.transpose();
  Matrix Cinv = C.inverse();
  Vector mean = Qsx * Cinv * d.y;
  Vector var = Vector::Constant(Xs.rows(), spec.hyper.signal_variance()) -
               (Qsx * Cinv * Qsx.transpose()).diagonal();
  SparsePrediction p = fitc_fit(d, z, spec).predict(Xs);
  CHECK(rel_err(p.mean, mean) < 1e-8);
  CHECK(rel_err(p.variance, var) < 1e-8);
}

TEST_CASE("FITC effective covariance keeps the exact diagonal") {
  Dataset d = separated_dataset(30, 17);
  KernelSpec spec = default_spec();
  InducingSet z(testutil::separated_inputs_1d(4, 4.0, 18));
  Matrix Q = dense_nystrom(d, z, spec);
  Vector eff_diag = Q.diagonal() +
                    (Vector::Constant(d.size(), spec.hyper.signal_variance()) -
                     Q.diagonal()).cwiseMax(0.0);
  CHECK((eff_diag.array() - spec.hyper.signal_variance()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("sparse predictions revert to the prior far away") {
  Dataset d = separated_dataset(20, 19);
  KernelSpec spec = default_spec();
  InducingSet z(testutil::separated_inputs_1d(5, 2.0, 20));
  Matrix far(1, 1);
  far << 1e3;
  for (auto kind : {SparsePosterior::Kind::fitc, SparsePosterior::Kind::vfe}) {
    SparsePrediction p = SparsePosterior::fit(d, z, spec, kind).predict(far);
    CHECK(std::abs(p.mean[0]) < 1e-10);
    CHECK(p.variance[0] == Catch::Approx(spec.hyper.signal_variance()));
  }
}

TEST_CASE("VFE with Z = X matches the exact GP") {
  Dataset d = separated_dataset(40, 23);
  KernelSpec spec = default_spec();
  InducingSet z(d.X);
  auto exact = exact_fit(d, spec);
  CHECK(rel_err(vfe_elbo(d, z, spec), -exact.nlml()) < 1e-8);
  Matrix Xs = testutil::random_inputs(6, 1, 0, 20, 24);
  SparsePrediction sp = vfe_predict(d, z, spec, Xs);
  Prediction ep = exact.predict(Xs);
  CHECK(rel_err(sp.mean, ep.mean) < 1e-8);
  CHECK(rel_err(sp.variance, Vector(ep.cov.diagonal())) < 1e-8);
}

TEST_CASE("VFE ELBO against dense evaluation of both terms") {
  Dataset d = separated_dataset(50, 27);
  KernelSpec spec = default_spec();
  InducingSet z(testutil::separated_inputs_1d(6, 4.0, 28));
  Matrix Q = dense_nystrom(d, z, spec);
  Matrix C = Q;
  C.diagonal().array() += spec.hyper.noise_variance();
  const double gauss = -dense_gaussian_nlml(d.y, C);
  const double tr = (Vector::Constant(d.size(), spec.hyper.signal_variance()) -
                     Q.diagonal()).cwiseMax(0.0).sum();
  const double want = gauss - tr / (2.0 * spec.hyper.noise_variance());
  CHECK(rel_err(vfe_elbo(d, z, spec), want) < 1e-8);
}

TEST_CASE("VFE ELBO lower-bounds the exact evidence for random Z") {
  for (unsigned ds = 0; ds < 3; ++ds) {
    Dataset d = separated_dataset(50, 31 + ds);
    KernelSpec spec = default_spec();
    const double evidence = -exact_nlml(d, spec);
    for (unsigned s = 0; s < 40; ++s) {
      InducingSet z(testutil::random_inputs(6, 1, 0, 25, 100 * ds + s));
      CHECK(vfe_elbo(d, z, spec) <= evidence + 1e-8);
    }
  }
}

TEST_CASE("VFE dense variational-posterior oracle") {
  Dataset d = separated_dataset(40, 37);
  KernelSpec spec = default_spec();
  InducingSet z(testutil::separated_inputs_1d(5, 4.0, 38));
  Matrix Xs = testutil::random_inputs(6, 1, 0, 20, 39);
  const double sigma2 = spec.hyper.noise_variance();

  Matrix Kzz = kern_cross(spec, z.Z, z.Z);
  Kzz.diagonal().array() += kInducingJitter * spec.hyper.signal_variance();
  Matrix Kzx = kern_cross(spec, z.Z, d.X);
  Matrix B = Kzz + Kzx * Kzx.transpose() / sigma2;
  Matrix Ksz = kern_cross(spec, Xs, z.Z);
  Vector mean = Ksz * B.inverse() * Kzx * d.y / sigma2;
  Vector var = Vector::Constant(Xs.rows(), spec.hyper.signal_variance()) -
               (Ksz * (Kzz.inverse() - B.inverse()) * Ksz.transpose()).diagonal();
  SparsePrediction p = vfe_predict(d, z, spec, Xs);
  CHECK(rel_err(p.mean, mean) < 1e-8);
  CHECK(rel_err(p.variance, var) < 1e-8);
}

TEST_CASE("ELBO is monotone under inducing-set growth") {
  Dataset d = separated_dataset(40, 43);
  KernelSpec spec = default_spec();
  Matrix Zsmall = testutil::separated_inputs_1d(4, 4.0, 44);
  Matrix Zbig(7, 1);
  Zbig << Zsmall, testutil::random_inputs(3, 1, 0.05, 19.95, 45);
  CHECK(vfe_elbo(d, InducingSet(Zbig), spec) >=
        vfe_elbo(d, InducingSet(Zsmall), spec) - 1e-9);
}

TEST_CASE("optimize_inducing improves the objective monotonically") {
  Dataset d = separated_dataset(40, 47);
  KernelSpec spec = default_spec();
  InducingSet z0(testutil::separated_inputs_1d(5, 4.0, 48));
  const double before = vfe_elbo(d, z0, spec);
  InducingSet zopt = optimize_inducing(d, z0, spec, InducingObjective::vfe, 10);
  const double after = vfe_elbo(d, zopt, spec);
  CHECK(after >= before);
  // Inducing points stay inside the clamping box.
  const double ell = spec.hyper.lengthscale(0);
  CHECK(zopt.Z.minCoeff() >= d.X.minCoeff() - ell - 1e-12);
  CHECK(zopt.Z.maxCoeff() <= d.X.maxCoeff() + ell + 1e-12);

  const double before_f = -fitc_nlml(d, z0, spec);
  InducingSet zf = optimize_inducing(d, z0, spec, InducingObjective::fitc, 10);
  CHECK(-fitc_nlml(d, zf, spec) >= before_f);
}

TEST_CASE("inducing set JSON round trip") {
  InducingSet z(testutil::random_inputs(4, 2, -1, 1, 53));
  InducingSet back = InducingSet::from_json(z.to_json());
  CHECK(rel_err(back.Z, z.Z) < 1e-15);
}
