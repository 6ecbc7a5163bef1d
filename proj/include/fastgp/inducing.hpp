#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include <json.hpp>

#include "fastgp/dense.hpp"
#include "fastgp/kernel.hpp"
#include "fastgp/types.hpp"

namespace fastgp {

// Relative jitter on K_ZZ, applied unconditionally; K_ZZ conditioning is
// the dominant failure mode. Kept at 1e-10 so the Z = X recovery
// identities still hold to 1e-8 relative error.
inline constexpr double kInducingJitter = 1e-10;

/// Pseudo-input locations Z (m x D).
struct InducingSet {
  Matrix Z;

  InducingSet() = default;
  explicit InducingSet(Matrix Z_) : Z(std::move(Z_)) {
    if (Z.rows() < 1) throw ShapeError("InducingSet: need at least one point");
    for (Eigen::Index i = 0; i < Z.rows(); ++i)
      for (Eigen::Index j = i + 1; j < Z.rows(); ++j)
        if ((Z.row(i) - Z.row(j)).norm() == 0.0)
          throw ShapeError("InducingSet: duplicate inducing points make K_ZZ singular");
  }

  Eigen::Index size() const { return Z.rows(); }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < Z.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index d = 0; d < Z.cols(); ++d) row.push_back(Z(i, d));
      rows.push_back(row);
    }
    return rows;
  }
  static InducingSet from_json(const nlohmann::json& j) {
    const auto m = static_cast<Eigen::Index>(j.size());
    if (m < 1) throw ShapeError("InducingSet: empty JSON array");
    const auto D = static_cast<Eigen::Index>(j.at(0).size());
    Matrix Z(m, D);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index d = 0; d < D; ++d) Z(i, d) = j.at(i).at(d).get<double>();
    return InducingSet(std::move(Z));
  }
};

/// Cholesky of K_ZZ (+ jitter) together with V = K_XZ L^-T so that the
/// Nystrom term Q_XX = V V^T never needs forming explicitly.
struct NystromFactor {
  Matrix K_XZ;     // n x m
  Matrix chol_ZZ;  // m x m lower
  Matrix V;        // n x m

  static NystromFactor build(const Eigen::Ref<const Matrix>& X, const InducingSet& Z,
                             const KernelSpec& spec) {
    NystromFactor f;
    f.K_XZ = kern_cross(spec, X, Z.Z);
    Matrix Kzz = kern_cross(spec, Z.Z, Z.Z);
    Kzz.diagonal().array() += kInducingJitter * spec.hyper.signal_variance();
    Eigen::LLT<Matrix> llt(Kzz);
    if (llt.info() != Eigen::Success)
      throw SingularFactorError("degenerate inducing set: K_ZZ not positive definite");
    f.chol_ZZ = llt.matrixL();
    f.V = f.chol_ZZ.triangularView<Eigen::Lower>()
              .solve(f.K_XZ.transpose())
              .transpose();
    return f;
  }

  Vector q_diag() const { return V.rowwise().squaredNorm(); }
};

struct SparsePrediction {
  Vector mean;
  Vector variance;
};

/// Shared FITC/VFE posterior. Both models have effective train covariance
/// V V^T + diag(lambda); they differ only in lambda (FITC: diag(K - Q) +
/// sigma^2, VFE: sigma^2). Stored in whitened form for stability.
class SparsePosterior {
 public:
  enum class Kind { fitc, vfe };

  static SparsePosterior fit(const Dataset& data, const InducingSet& Z,
                             const KernelSpec& spec, Kind kind) {
    SparsePosterior p;
    p.Z_ = Z;
    p.spec_ = spec;
    NystromFactor nf = NystromFactor::build(data.X, Z, spec);
    const double sigma2 = spec.hyper.noise_variance();
    const Eigen::Index n = data.size();
    if (kind == Kind::fitc) {
      Vector kdiag = Vector::Constant(n, spec.hyper.signal_variance());
      p.lambda_ = (kdiag - nf.q_diag()).cwiseMax(0.0).array() + sigma2;
    } else {
      p.lambda_ = Vector::Constant(n, sigma2);
    }
    // Vt is the whitened m x n cross factor L_ZZ^-1 K_ZX.
    Matrix Vt = nf.V.transpose();
    Matrix Vl = Vt * p.lambda_.cwiseInverse().asDiagonal();  // m x n
    Matrix C = Matrix::Identity(Z.size(), Z.size());
    C.noalias() += Vl * Vt.transpose();
    Eigen::LLT<Matrix> llt(C);
    if (llt.info() != Eigen::Success)
      throw SingularFactorError("sparse fit: inner system not positive definite");
    p.L_C_ = llt.matrixL();
    p.L_ZZ_ = nf.chol_ZZ;
    Vector Vly = Vl * data.y;
    p.c_ = llt.solve(Vly);
    p.nlml_ = 0.5 * (data.y.array().square() / p.lambda_.array()).sum() -
              0.5 * Vly.dot(p.c_) + 0.5 * p.lambda_.array().log().sum() +
              p.L_C_.diagonal().array().log().sum() +
              0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    // Trace term of the Titsias bound; zero for FITC by construction.
    p.trace_term_ = (Vector::Constant(n, spec.hyper.signal_variance()) - nf.q_diag())
                        .cwiseMax(0.0)
                        .sum() /
                    (2.0 * sigma2);
    p.kind_ = kind;
    return p;
  }

  SparsePrediction predict(const Eigen::Ref<const Matrix>& Xstar) const {
    if (Xstar.cols() != Z_.Z.cols())
      throw ShapeError("sparse predict: test dimension mismatch");
    Matrix Ksz = kern_cross(spec_, Xstar, Z_.Z);  // n* x m
    Matrix U = L_ZZ_.triangularView<Eigen::Lower>().solve(Ksz.transpose());  // m x n*
    Matrix T = L_C_.triangularView<Eigen::Lower>().solve(U);                 // m x n*
    SparsePrediction out;
    out.mean = U.transpose() * c_;
    const double s2 = spec_.hyper.signal_variance();
    out.variance = Vector::Constant(Xstar.rows(), s2) -
                   U.colwise().squaredNorm().transpose() +
                   T.colwise().squaredNorm().transpose();
    out.variance = out.variance.cwiseMax(0.0);
    return out;
  }

  // NLML of the model's effective train distribution: FITC likelihood for
  // fitc, the Gaussian part of the Titsias bound for vfe.
  double nlml() const { return nlml_; }
  // Evidence lower bound (only meaningful for vfe fits).
  double elbo() const { return -nlml_ - trace_term_; }
  Kind kind() const { return kind_; }

 private:
  InducingSet Z_;
  KernelSpec spec_;
  Vector lambda_;
  Matrix L_ZZ_, L_C_;
  Vector c_;
  double nlml_ = 0, trace_term_ = 0;
  Kind kind_ = Kind::fitc;
};

using FitcPosterior = SparsePosterior;

inline SparsePosterior fitc_fit(const Dataset& data, const InducingSet& Z,
                                const KernelSpec& spec) {
  return SparsePosterior::fit(data, Z, spec, SparsePosterior::Kind::fitc);
}

inline SparsePrediction fitc_predict(const SparsePosterior& post,
                                     const Eigen::Ref<const Matrix>& Xstar) {
  return post.predict(Xstar);
}

inline double fitc_nlml(const Dataset& data, const InducingSet& Z,
                        const KernelSpec& spec) {
  return fitc_fit(data, Z, spec).nlml();
}

inline SparsePosterior vfe_fit(const Dataset& data, const InducingSet& Z,
                               const KernelSpec& spec) {
  return SparsePosterior::fit(data, Z, spec, SparsePosterior::Kind::vfe);
}

inline double vfe_elbo(const Dataset& data, const InducingSet& Z,
                       const KernelSpec& spec) {
  return vfe_fit(data, Z, spec).elbo();
}

inline SparsePrediction vfe_predict(const Dataset& data, const InducingSet& Z,
                                    const KernelSpec& spec,
                                    const Eigen::Ref<const Matrix>& Xstar) {
  return vfe_fit(data, Z, spec).predict(Xstar);
}

enum class InducingObjective { fitc, vfe };

/// Gradient ascent over the inducing locations with backtracking line
/// search; gradients by central finite differences (fine for m <= 50).
/// Locations are clamped to the training range expanded by one
/// lengthscale per dimension.
inline InducingSet optimize_inducing(const Dataset& data, const InducingSet& Z0,
                                     const KernelSpec& spec, InducingObjective obj,
                                     int steps) {
  auto value = [&](const Matrix& Z) {
    InducingSet zs;
    zs.Z = Z;  // skip the duplicate scan inside the optimizer loop
    return obj == InducingObjective::vfe ? vfe_elbo(data, zs, spec)
                                         : -fitc_nlml(data, zs, spec);
  };

  Matrix Z = Z0.Z;
  double f = value(Z);
  if (!std::isfinite(f))
    throw OptimizationError("optimize_inducing: objective non-finite at Z0");

  Vector lo(Z.cols()), hi(Z.cols());
  for (Eigen::Index d = 0; d < Z.cols(); ++d) {
    const double ell = spec.hyper.lengthscale(d);
    lo[d] = data.X.col(d).minCoeff() - ell;
    hi[d] = data.X.col(d).maxCoeff() + ell;
  }
  auto clamp = [&](Matrix& M) {
    for (Eigen::Index d = 0; d < M.cols(); ++d)
      M.col(d) = M.col(d).cwiseMax(lo[d]).cwiseMin(hi[d]);
  };

  const double h = 1e-5;
  double step = 0.1;
  for (int it = 0; it < steps; ++it) {
    Matrix G(Z.rows(), Z.cols());
    for (Eigen::Index i = 0; i < Z.rows(); ++i)
      for (Eigen::Index d = 0; d < Z.cols(); ++d) {
        Matrix Zp = Z, Zm = Z;
        Zp(i, d) += h;
        Zm(i, d) -= h;
        G(i, d) = (value(Zp) - value(Zm)) / (2 * h);
      }
    const double gnorm = G.norm();
    if (gnorm < 1e-10) break;
    bool improved = false;
    for (int bt = 0; bt < 30; ++bt) {
      Matrix Zt = Z + (step / gnorm) * G;
      clamp(Zt);
      const double ft = value(Zt);
      if (std::isfinite(ft) && ft > f) {
        Z = Zt;
        f = ft;
        step *= 1.5;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
  }
  InducingSet out;
  out.Z = Z;
  return out;
}

}  // namespace fastgp
