#pragma once

#include <cmath>
#include <numbers>

#include "fastgp/kernel.hpp"
#include "fastgp/types.hpp"

namespace fastgp {

struct Prediction {
  Vector mean;
  Matrix cov;
};

/// Lower Cholesky factor of A, with one jitter retry (1e-8 * mean
/// diagonal) before giving up. Escalating further would hide modeling
/// problems, so the second failure is a hard error.
inline Matrix chol_with_jitter(Matrix A) {
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  const double jitter = 1e-8 * A.diagonal().mean();
  A.diagonal().array() += jitter;
  llt.compute(A);
  if (llt.info() != Eigen::Success)
    throw IllConditionedError(
        "Cholesky failed after jitter retry (jitter = " + std::to_string(jitter) + ")");
  return llt.matrixL();
}

/// Exact GP posterior from a dense Cholesky of K + sigma^2 I. Immutable
/// after fit; predictions may run concurrently.
class ExactPosterior {
 public:
  static ExactPosterior fit(Dataset data, KernelSpec spec) {
    ExactPosterior p;
    p.data_ = std::move(data);
    p.spec_ = std::move(spec);
    Matrix K = kern_cross(p.spec_, p.data_.X, p.data_.X);
    K.diagonal().array() += p.spec_.hyper.noise_variance();
    p.L_ = chol_with_jitter(std::move(K));
    p.alpha_ = p.L_.triangularView<Eigen::Lower>().solve(p.data_.y);
    p.L_.triangularView<Eigen::Lower>().transpose().solveInPlace(p.alpha_);
    return p;
  }

  Prediction predict(const Eigen::Ref<const Matrix>& Xstar) const {
    if (Xstar.cols() != data_.dim())
      throw ShapeError("exact_predict: test dimension mismatch");
    Matrix Ks = kern_cross(spec_, Xstar, data_.X);  // n* x n
    Prediction out;
    out.mean = Ks * alpha_;
    Matrix Vt = L_.triangularView<Eigen::Lower>().solve(Ks.transpose());  // n x n*
    out.cov = kern_cross(spec_, Xstar, Xstar);
    out.cov.noalias() -= Vt.transpose() * Vt;
    return out;
  }

  double nlml() const {
    const double n = static_cast<double>(data_.size());
    return 0.5 * data_.y.dot(alpha_) + L_.diagonal().array().log().sum() +
           0.5 * n * std::log(2.0 * std::numbers::pi);
  }

  const Matrix& chol() const { return L_; }
  const Vector& alpha() const { return alpha_; }
  const Dataset& data() const { return data_; }
  const KernelSpec& spec() const { return spec_; }

 private:
  Dataset data_;
  KernelSpec spec_;
  Matrix L_;
  Vector alpha_;
};

inline ExactPosterior exact_fit(Dataset data, KernelSpec spec) {
  return ExactPosterior::fit(std::move(data), std::move(spec));
}

inline Prediction exact_predict(const ExactPosterior& post,
                                const Eigen::Ref<const Matrix>& Xstar) {
  return post.predict(Xstar);
}

inline double exact_nlml(const Dataset& data, const KernelSpec& spec) {
  return ExactPosterior::fit(data, spec).nlml();
}

/// Gradient of the NLML over pack()-ordered log hyperparameters:
/// 1/2 tr((Kn^-1 - alpha alpha^T) dKn/dtheta_j).
inline Vector exact_nlml_grad(const Dataset& data, const KernelSpec& spec) {
  ExactPosterior post = ExactPosterior::fit(data, spec);
  const Eigen::Index n = data.size();
  Matrix Kinv = Matrix::Identity(n, n);
  post.chol().triangularView<Eigen::Lower>().solveInPlace(Kinv);
  post.chol().triangularView<Eigen::Lower>().transpose().solveInPlace(Kinv);
  const Vector& alpha = post.alpha();
  std::vector<Matrix> dK = kern_grad(spec, data.X);
  Vector g(static_cast<Eigen::Index>(dK.size()));
  for (size_t j = 0; j < dK.size(); ++j) {
    const double tr = (Kinv.array() * dK[j].array()).sum();
    const double quad = alpha.dot(dK[j] * alpha);
    g[static_cast<Eigen::Index>(j)] = 0.5 * (tr - quad);
  }
  return g;
}

}  // namespace fastgp
