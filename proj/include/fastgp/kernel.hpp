#pragma once

#include <cmath>
#include <vector>

#include <json.hpp>

#include "fastgp/types.hpp"

namespace fastgp {

/// Kernel hyperparameters, stored in log-space so the exponentiated
/// values are strictly positive without constrained optimization.
struct HyperParams {
  Vector log_lengthscale;          // one entry per input dimension
  double log_signal_variance = 0;  // log s^2
  double log_noise_variance = std::log(0.1);  // log sigma^2

  HyperParams() : log_lengthscale(Vector::Zero(1)) {}

  static HyperParams natural(const Vector& lengthscale, double signal_variance,
                             double noise_variance) {
    HyperParams h;
    h.log_lengthscale = lengthscale.array().log();
    h.log_signal_variance = std::log(signal_variance);
    h.log_noise_variance = std::log(noise_variance);
    return h;
  }
  static HyperParams natural1d(double lengthscale, double signal_variance,
                               double noise_variance) {
    Vector ls(1);
    ls << lengthscale;
    return natural(ls, signal_variance, noise_variance);
  }

  Eigen::Index dim() const { return log_lengthscale.size(); }
  double lengthscale(Eigen::Index d) const { return std::exp(log_lengthscale[d]); }
  double signal_variance() const { return std::exp(log_signal_variance); }
  double noise_variance() const { return std::exp(log_noise_variance); }

  // Flat log-space vector: [log ls_1 .. log ls_D, log s^2, log sigma^2].
  // This is the theta the trainer optimizes over.
  Vector pack() const {
    Vector v(dim() + 2);
    v.head(dim()) = log_lengthscale;
    v[dim()] = log_signal_variance;
    v[dim() + 1] = log_noise_variance;
    return v;
  }
  static HyperParams unpack(const Vector& v) {
    if (v.size() < 3) throw ShapeError("HyperParams::unpack: need >= 3 entries");
    HyperParams h;
    h.log_lengthscale = v.head(v.size() - 2);
    h.log_signal_variance = v[v.size() - 2];
    h.log_noise_variance = v[v.size() - 1];
    return h;
  }

  // JSON carries natural (non-log) values.
  nlohmann::json to_json() const {
    std::vector<double> ls(dim());
    for (Eigen::Index d = 0; d < dim(); ++d) ls[d] = lengthscale(d);
    return {{"lengthscale", ls},
            {"signal_variance", signal_variance()},
            {"noise_variance", noise_variance()}};
  }
  static HyperParams from_json(const nlohmann::json& j) {
    auto ls = j.at("lengthscale").get<std::vector<double>>();
    Vector v = Eigen::Map<const Vector>(ls.data(), static_cast<Eigen::Index>(ls.size()));
    return natural(v, j.at("signal_variance").get<double>(),
                   j.at("noise_variance").get<double>());
  }
};

/// Squared-exponential covariance; the only family here, stationary by
/// construction (required for the Toeplitz fast path).
struct KernelSpec {
  HyperParams hyper;

  KernelSpec() = default;
  explicit KernelSpec(HyperParams h) : hyper(std::move(h)) {}

  Eigen::Index dim() const { return hyper.dim(); }
};

inline double kern_eval(const KernelSpec& spec, const Eigen::Ref<const Vector>& x,
                        const Eigen::Ref<const Vector>& xp) {
  if (x.size() != spec.dim() || xp.size() != spec.dim())
    throw ShapeError("kern_eval: input dimension does not match kernel spec");
  double q = 0;
  for (Eigen::Index d = 0; d < x.size(); ++d) {
    const double ell = spec.hyper.lengthscale(d);
    const double diff = (x[d] - xp[d]) / ell;
    q += diff * diff;
  }
  return spec.hyper.signal_variance() * std::exp(-0.5 * q);
}

/// Cross-covariance matrix K(A, B), entry (i,j) = k(A_i, B_j). Never
/// includes observation noise.
inline Matrix kern_cross(const KernelSpec& spec, const Eigen::Ref<const Matrix>& A,
                         const Eigen::Ref<const Matrix>& B) {
  if (A.cols() != spec.dim() || B.cols() != spec.dim())
    throw ShapeError("kern_cross: column dimension does not match kernel spec");
  const double s2 = spec.hyper.signal_variance();
  Matrix Q = Matrix::Zero(A.rows(), B.rows());
  for (Eigen::Index d = 0; d < A.cols(); ++d) {
    const double inv_ell = 1.0 / spec.hyper.lengthscale(d);
    Vector a = A.col(d) * inv_ell;
    Vector b = B.col(d) * inv_ell;
    Q.noalias() += (a.array().square().matrix() * Eigen::RowVectorXd::Ones(B.rows()) +
                    Vector::Ones(A.rows()) * b.array().square().matrix().transpose() -
                    2.0 * a * b.transpose());
  }
  return s2 * (-0.5 * Q.array()).exp().matrix();
}

/// Derivatives of K(A,A) + sigma^2 I with respect to the log-space
/// hyperparameters, in pack() order. The noise slot is sigma^2 I.
inline std::vector<Matrix> kern_grad(const KernelSpec& spec,
                                     const Eigen::Ref<const Matrix>& A) {
  if (A.rows() < 1) throw ShapeError("kern_grad: empty input");
  if (A.cols() != spec.dim())
    throw ShapeError("kern_grad: column dimension does not match kernel spec");
  const Eigen::Index n = A.rows();
  const Eigen::Index D = A.cols();
  Matrix K = kern_cross(spec, A, A);

  std::vector<Matrix> grads;
  grads.reserve(D + 2);
  for (Eigen::Index d = 0; d < D; ++d) {
    const double ell = spec.hyper.lengthscale(d);
    Matrix G(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        const double diff = (A(i, d) - A(j, d)) / ell;
        G(i, j) = K(i, j) * diff * diff;  // d k / d log ell_d
      }
    grads.push_back(std::move(G));
  }
  grads.push_back(K);  // d K / d log s^2 is K itself
  grads.push_back(spec.hyper.noise_variance() * Matrix::Identity(n, n));
  return grads;
}

}  // namespace fastgp
