#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "fastgp/fft.hpp"
#include "fastgp/inducing.hpp"
#include "fastgp/kernel.hpp"
#include "fastgp/types.hpp"

namespace fastgp {

/// Cartesian product grid with equispaced coordinates per dimension.
/// Flattened point order puts dimension 0 slowest, matching the
/// K_1 (x) ... (x) K_D Kronecker ordering.
struct RegularGrid {
  std::vector<Vector> coords;

  RegularGrid() = default;
  explicit RegularGrid(std::vector<Vector> axes) : coords(std::move(axes)) {
    for (const Vector& c : coords) {
      if (c.size() < 2) throw ShapeError("RegularGrid: need >= 2 points per dimension");
      const double h = c[1] - c[0];
      if (h <= 0) throw ShapeError("RegularGrid: coordinates must increase");
      for (Eigen::Index i = 1; i < c.size(); ++i) {
        const double hi = c[i] - c[i - 1];
        if (std::abs(hi - h) > 1e-12 * std::abs(h))
          throw ShapeError("RegularGrid: spacing not constant");
      }
    }
  }

  static RegularGrid uniform1d(double lo, double hi, Eigen::Index m) {
    return RegularGrid({Vector::LinSpaced(m, lo, hi)});
  }

  // Covers [min X, max X] per dimension, expanded by 2%.
  static RegularGrid covering(const Eigen::Ref<const Matrix>& X, Eigen::Index m_per_dim) {
    std::vector<Vector> axes;
    for (Eigen::Index d = 0; d < X.cols(); ++d) {
      double lo = X.col(d).minCoeff(), hi = X.col(d).maxCoeff();
      const double pad = 0.02 * (hi - lo);
      axes.push_back(Vector::LinSpaced(m_per_dim, lo - pad, hi + pad));
    }
    return RegularGrid(std::move(axes));
  }

  Eigen::Index dim() const { return static_cast<Eigen::Index>(coords.size()); }
  Eigen::Index size() const {
    Eigen::Index m = 1;
    for (const Vector& c : coords) m *= c.size();
    return m;
  }
  double spacing(Eigen::Index d) const { return coords[d][1] - coords[d][0]; }

  // All grid points as an m x D matrix in flattened order.
  Matrix points() const {
    const Eigen::Index m = size(), D = dim();
    Matrix P(m, D);
    for (Eigen::Index i = 0; i < m; ++i) {
      Eigen::Index rem = i;
      for (Eigen::Index d = D - 1; d >= 0; --d) {
        const Eigen::Index md = coords[d].size();
        P(i, d) = coords[d][rem % md];
        rem /= md;
      }
    }
    return P;
  }
};

/// Symmetric Toeplitz operator given by its first column; MVM via
/// circulant embedding and FFT in O(m log m).
class ToeplitzOp {
 public:
  explicit ToeplitzOp(Vector first_column) : col_(std::move(first_column)) {
    const size_t m = static_cast<size_t>(col_.size());
    L_ = next_pow2(2 * m);
    std::vector<std::complex<double>> c(L_, 0.0);
    for (size_t i = 0; i < m; ++i) c[i] = col_[static_cast<Eigen::Index>(i)];
    for (size_t i = 1; i < m; ++i) c[L_ - i] = col_[static_cast<Eigen::Index>(i)];
    fft_inplace(c, false);
    spectrum_ = std::move(c);
  }

  static ToeplitzOp from_grid(const RegularGrid& grid, const KernelSpec& spec) {
    if (grid.dim() != 1) throw ShapeError("ToeplitzOp: grid must be 1D");
    const Vector& z = grid.coords[0];
    Vector c(z.size());
    for (Eigen::Index j = 0; j < z.size(); ++j) {
      Vector a(1), b(1);
      a << z[0];
      b << z[j];
      c[j] = kern_eval(spec, a, b);
    }
    return ToeplitzOp(std::move(c));
  }

  Eigen::Index size() const { return col_.size(); }
  const Vector& first_column() const { return col_; }

  Vector mvm(const Eigen::Ref<const Vector>& v) const {
    if (v.size() != col_.size()) throw ShapeError("toeplitz_mvm: length mismatch");
    std::vector<std::complex<double>> x(L_, 0.0);
    for (Eigen::Index i = 0; i < v.size(); ++i) x[static_cast<size_t>(i)] = v[i];
    fft_inplace(x, false);
    for (size_t i = 0; i < L_; ++i) x[i] *= spectrum_[i];
    fft_inplace(x, true);
    Vector out(col_.size());
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = x[static_cast<size_t>(i)].real();
    return out;
  }

  // Dense eigenvalues; fine at desk scale, used only for the log-det
  // approximation.
  Vector eigenvalues() const {
    const Eigen::Index m = col_.size();
    Matrix T(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j) T(i, j) = col_[std::abs(i - j)];
    Eigen::SelfAdjointEigenSolver<Matrix> es(T, Eigen::EigenvaluesOnly);
    return es.eigenvalues();
  }

 private:
  Vector col_;
  size_t L_ = 0;
  std::vector<std::complex<double>> spectrum_;
};

inline Vector toeplitz_mvm(const ToeplitzOp& op, const Eigen::Ref<const Vector>& v) {
  return op.mvm(v);
}

/// Kronecker product operator K_1 (x) ... (x) K_D held as its factors.
class KronOp {
 public:
  explicit KronOp(std::vector<Matrix> factors) : factors_(std::move(factors)) {
    for (const Matrix& F : factors_)
      if (F.rows() != F.cols()) throw ShapeError("KronOp: factors must be square");
  }

  static KronOp from_grid(const RegularGrid& grid, const KernelSpec& spec) {
    std::vector<Matrix> fs;
    for (Eigen::Index d = 0; d < grid.dim(); ++d) {
      KernelSpec spec1d;
      spec1d.hyper.log_lengthscale = Vector::Constant(1, spec.hyper.log_lengthscale[d]);
      // Split s^2 evenly across factors so the product carries it once.
      spec1d.hyper.log_signal_variance =
          spec.hyper.log_signal_variance / static_cast<double>(grid.dim());
      const Vector& z = grid.coords[d];
      Matrix c = kern_cross(spec1d, z, z);
      fs.push_back(std::move(c));
    }
    return KronOp(std::move(fs));
  }

  Eigen::Index size() const {
    Eigen::Index m = 1;
    for (const Matrix& F : factors_) m *= F.rows();
    return m;
  }
  const std::vector<Matrix>& factors() const { return factors_; }

  Vector mvm(const Eigen::Ref<const Vector>& v) const {
    return apply_factors(v, [](const Matrix& F, const Matrix& X) -> Matrix { return F * X; });
  }

  // Applies (K_1 (x) ... (x) K_D)^-1; valid only in the noise-free case.
  Vector inv_apply(const Eigen::Ref<const Vector>& v) const {
    std::vector<Eigen::PartialPivLU<Matrix>> lus;
    lus.reserve(factors_.size());
    for (size_t d = 0; d < factors_.size(); ++d) {
      lus.emplace_back(factors_[d]);
      const double rcond = lus.back().rcond();
      if (!(rcond > 1e-14))
        throw SingularFactorError("kron_inv_apply: factor for dimension " +
                                  std::to_string(d) + " is singular");
    }
    // apply_factors walks the factors last-to-first.
    size_t d = factors_.size();
    return apply_factors(v, [&](const Matrix&, const Matrix& X) -> Matrix {
      return lus[--d].solve(X);
    });
  }

  Vector eigenvalues() const {
    Vector ev = Vector::Ones(1);
    for (const Matrix& F : factors_) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(F, Eigen::EigenvaluesOnly);
      Vector next(ev.size() * F.rows());
      Eigen::Index k = 0;
      for (Eigen::Index i = 0; i < ev.size(); ++i)
        for (Eigen::Index j = 0; j < F.rows(); ++j) next[k++] = ev[i] * es.eigenvalues()[j];
      ev = std::move(next);
    }
    return ev;
  }

 private:
  // Shared skeleton of the vec-trick: for each factor d (last to first),
  // reshape, transform along that mode, transpose.
  template <typename Transform>
  Vector apply_factors(const Eigen::Ref<const Vector>& v, Transform&& tf) const {
    if (v.size() != size()) throw ShapeError("kron apply: length mismatch");
    Vector x = v;
    for (auto it = factors_.rbegin(); it != factors_.rend(); ++it) {
      const Matrix& F = *it;
      const Eigen::Index md = F.rows();
      const Eigen::Index rest = x.size() / md;
      Eigen::Map<const Matrix> X(x.data(), md, rest);
      Matrix Y = tf(F, Matrix(X));
      Matrix Yt = Y.transpose();
      x = Eigen::Map<Vector>(Yt.data(), x.size());
    }
    return x;
  }

  std::vector<Matrix> factors_;
};

inline Vector kron_mvm(const KronOp& op, const Eigen::Ref<const Vector>& v) {
  return op.mvm(v);
}
inline Vector kron_inv_apply(const KronOp& op, const Eigen::Ref<const Vector>& v) {
  return op.inv_apply(v);
}

/// Sparse linear-interpolation weights W (n x m): 2^D nonzeros per row,
/// each row summing to 1, columns addressing flattened grid points.
struct InterpWeights {
  Eigen::Index rows = 0, cols = 0;
  Eigen::Index nnz_per_row = 0;
  std::vector<Eigen::Index> idx;  // rows * nnz_per_row
  std::vector<double> w;          // rows * nnz_per_row

  Vector apply(const Eigen::Ref<const Vector>& v) const {  // W v, m -> n
    if (v.size() != cols) throw ShapeError("InterpWeights::apply: length mismatch");
    Vector out = Vector::Zero(rows);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index k = 0; k < nnz_per_row; ++k)
        out[i] += w[i * nnz_per_row + k] * v[idx[i * nnz_per_row + k]];
    return out;
  }
  Vector applyT(const Eigen::Ref<const Vector>& v) const {  // W^T v, n -> m
    if (v.size() != rows) throw ShapeError("InterpWeights::applyT: length mismatch");
    Vector out = Vector::Zero(cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index k = 0; k < nnz_per_row; ++k)
        out[idx[i * nnz_per_row + k]] += w[i * nnz_per_row + k] * v[i];
    return out;
  }
  Matrix to_dense() const {
    Matrix W = Matrix::Zero(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index k = 0; k < nnz_per_row; ++k)
        W(i, idx[i * nnz_per_row + k]) += w[i * nnz_per_row + k];
    return W;
  }
};

/// Local linear interpolation of each input onto its bracketing grid
/// points; multi-D weights are tensor products of per-dimension weights.
inline InterpWeights ski_weights(const Eigen::Ref<const Matrix>& X,
                                 const RegularGrid& grid) {
  if (X.cols() != grid.dim()) throw ShapeError("ski_weights: dimension mismatch");
  const Eigen::Index n = X.rows(), D = grid.dim();
  InterpWeights W;
  W.rows = n;
  W.cols = grid.size();
  W.nnz_per_row = Eigen::Index(1) << D;
  W.idx.assign(static_cast<size_t>(n * W.nnz_per_row), 0);
  W.w.assign(static_cast<size_t>(n * W.nnz_per_row), 0.0);

  std::vector<Eigen::Index> stride(static_cast<size_t>(D), 1);
  for (Eigen::Index d = D - 2; d >= 0; --d)
    stride[static_cast<size_t>(d)] =
        stride[static_cast<size_t>(d + 1)] * grid.coords[static_cast<size_t>(d + 1)].size();

  for (Eigen::Index i = 0; i < n; ++i) {
    // Per-dimension bracketing cell and weight on the left grid point.
    std::vector<Eigen::Index> a(static_cast<size_t>(D));
    std::vector<double> wa(static_cast<size_t>(D));
    for (Eigen::Index d = 0; d < D; ++d) {
      const Vector& z = grid.coords[static_cast<size_t>(d)];
      const double x = X(i, d);
      if (x < z[0] - 1e-12 || x > z[z.size() - 1] + 1e-12)
        throw ExtrapolationError("ski_weights: input outside grid in dimension " +
                                 std::to_string(d));
      const double h = grid.spacing(d);
      Eigen::Index cell = static_cast<Eigen::Index>(std::floor((x - z[0]) / h));
      cell = std::max<Eigen::Index>(0, std::min<Eigen::Index>(cell, z.size() - 2));
      a[static_cast<size_t>(d)] = cell;
      wa[static_cast<size_t>(d)] = (z[cell + 1] - x) / h;  // 1 at left point
    }
    for (Eigen::Index k = 0; k < W.nnz_per_row; ++k) {
      Eigen::Index col = 0;
      double weight = 1.0;
      for (Eigen::Index d = 0; d < D; ++d) {
        const bool right = (k >> d) & 1;
        col += (a[static_cast<size_t>(d)] + (right ? 1 : 0)) * stride[static_cast<size_t>(d)];
        weight *= right ? (1.0 - wa[static_cast<size_t>(d)]) : wa[static_cast<size_t>(d)];
      }
      W.idx[static_cast<size_t>(i * W.nnz_per_row + k)] = col;
      W.w[static_cast<size_t>(i * W.nnz_per_row + k)] = weight;
    }
  }
  return W;
}

/// Type-erased MVM with the grid kernel matrix K_ZZ.
struct GridKernelOp {
  std::function<Vector(const Vector&)> mvm;
  std::function<Vector()> eigenvalues;
  Eigen::Index size = 0;
};

inline GridKernelOp make_grid_op(const RegularGrid& grid, const KernelSpec& spec) {
  GridKernelOp op;
  op.size = grid.size();
  if (grid.dim() == 1) {
    auto t = std::make_shared<ToeplitzOp>(ToeplitzOp::from_grid(grid, spec));
    op.mvm = [t](const Vector& v) { return t->mvm(v); };
    op.eigenvalues = [t] { return t->eigenvalues(); };
  } else {
    auto k = std::make_shared<KronOp>(KronOp::from_grid(grid, spec));
    op.mvm = [k](const Vector& v) { return k->mvm(v); };
    op.eigenvalues = [k] { return k->eigenvalues(); };
  }
  return op;
}

/// One application of the SKI train operator W K_ZZ W^T + sigma^2 I.
inline Vector ski_apply(const InterpWeights& W, const GridKernelOp& Kgrid, double sigma2,
                        const Eigen::Ref<const Vector>& v) {
  if (v.size() != W.rows || Kgrid.size != W.cols)
    throw ShapeError("ski_apply: shape mismatch");
  return W.apply(Kgrid.mvm(W.applyT(v))) + sigma2 * v;
}

struct CgResult {
  Vector x;
  int iterations = 0;
  double residual = 0;
};

/// Plain conjugate gradients; the operator must be SPD (caller contract).
inline CgResult cg_solve(const std::function<Vector(const Vector&)>& apply,
                         const Eigen::Ref<const Vector>& b, double tol, int maxit) {
  CgResult res;
  res.x = Vector::Zero(b.size());
  const double bnorm = b.norm();
  if (bnorm == 0.0) return res;
  Vector r = b;
  Vector p = r;
  double rs = r.squaredNorm();
  for (int it = 0; it < maxit; ++it) {
    Vector Ap = apply(p);
    const double pAp = p.dot(Ap);
    if (!std::isfinite(pAp) || pAp <= 0)
      throw BreakdownError("cg_solve: breakdown (operator not SPD?)");
    const double alpha = rs / pAp;
    res.x += alpha * p;
    r -= alpha * Ap;
    const double rs_new = r.squaredNorm();
    if (!std::isfinite(rs_new)) throw BreakdownError("cg_solve: non-finite residual");
    res.iterations = it + 1;
    res.residual = std::sqrt(rs_new) / bnorm;
    if (res.residual <= tol) return res;
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  return res;
}

/// SKI backend bundle: weights, grid operator, and the CG-solved alpha.
struct SkiModel {
  RegularGrid grid;
  KernelSpec spec;
  InterpWeights W;
  GridKernelOp Kgrid;
  Vector alpha;       // (W K W^T + sigma^2 I)^-1 y
  Vector grid_mean;   // K_ZZ W^T alpha, reused for every test point
  double cg_tol = 1e-6;
  int cg_maxit = 1000;

  static SkiModel fit(const Dataset& data, const RegularGrid& grid, const KernelSpec& spec,
                      double cg_tol = 1e-6, int cg_maxit = 1000) {
    SkiModel m;
    m.grid = grid;
    m.spec = spec;
    m.cg_tol = cg_tol;
    m.cg_maxit = cg_maxit;
    m.W = ski_weights(data.X, grid);
    m.Kgrid = make_grid_op(grid, spec);
    const double sigma2 = spec.hyper.noise_variance();
    auto apply = [&m, sigma2](const Vector& v) { return ski_apply(m.W, m.Kgrid, sigma2, v); };
    m.alpha = cg_solve(apply, data.y, cg_tol, cg_maxit).x;
    m.grid_mean = m.Kgrid.mvm(m.W.applyT(m.alpha));
    return m;
  }

  SparsePrediction predict(const Eigen::Ref<const Matrix>& Xstar) const {
    InterpWeights Ws = ski_weights(Xstar, grid);
    const double sigma2 = spec.hyper.noise_variance();
    const double s2 = spec.hyper.signal_variance();
    auto apply = [this, sigma2](const Vector& v) { return ski_apply(W, Kgrid, sigma2, v); };
    SparsePrediction out;
    out.mean = Ws.apply(grid_mean);
    out.variance.resize(Xstar.rows());
    for (Eigen::Index i = 0; i < Xstar.rows(); ++i) {
      // k_*X ~ w_* K_ZZ W^T; one CG solve per test point.
      Vector e = Vector::Zero(Xstar.rows());
      e[i] = 1.0;
      Vector kx = W.apply(Kgrid.mvm(Ws.applyT(e)));
      Vector sol = cg_solve(apply, kx, cg_tol, cg_maxit).x;
      double var = s2 - kx.dot(sol);
      if (var < 0) var = 0;  // floor at -1e-8 tolerance, then zero
      out.variance[i] = var;
    }
    return out;
  }
};

inline SparsePrediction ski_predict(const Dataset& data, const RegularGrid& grid,
                                    const KernelSpec& spec,
                                    const Eigen::Ref<const Matrix>& Xstar,
                                    double cg_tol = 1e-6, int cg_maxit = 1000) {
  return SkiModel::fit(data, grid, spec, cg_tol, cg_maxit).predict(Xstar);
}

/// Approximate NLML for the SKI operator: quadratic term by CG, log-det
/// by the scaled grid-eigenvalue surrogate
/// log|W K_ZZ W^T + s^2 I| ~ sum_i log((n/m) lambda_i + sigma^2).
inline double ski_nlml_approx(const Dataset& data, const RegularGrid& grid,
                              const KernelSpec& spec, double cg_tol = 1e-6,
                              int cg_maxit = 1000) {
  SkiModel m = SkiModel::fit(data, grid, spec, cg_tol, cg_maxit);
  const double n = static_cast<double>(data.size());
  const double mm = static_cast<double>(grid.size());
  const double sigma2 = spec.hyper.noise_variance();
  Vector ev = m.Kgrid.eigenvalues();
  std::sort(ev.data(), ev.data() + ev.size(), std::greater<double>());
  double logdet = 0;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    const double lam = i < ev.size() ? std::max(ev[i], 0.0) : 0.0;
    logdet += std::log((n / mm) * lam + sigma2);
  }
  return 0.5 * data.y.dot(m.alpha) + 0.5 * logdet +
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

}  // namespace fastgp
