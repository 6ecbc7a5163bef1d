#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "fastgp/kernel.hpp"
#include "fastgp/types.hpp"

namespace fastgp {

struct HodlrConfig {
  double tol = 1e-8;
  Eigen::Index leaf_size = 64;
  int max_rank = 50;
};

/// Ordering of the original data indices induced by the spatial
/// partition: perm[k] is the original index of the k-th tree point.
struct Permutation {
  std::vector<Eigen::Index> perm;

  Eigen::Index size() const { return static_cast<Eigen::Index>(perm.size()); }

  Vector apply(const Eigen::Ref<const Vector>& v) const {
    Vector out(size());
    for (Eigen::Index i = 0; i < size(); ++i) out[i] = v[perm[i]];
    return out;
  }
  Vector unapply(const Eigen::Ref<const Vector>& v) const {
    Vector out(size());
    for (Eigen::Index i = 0; i < size(); ++i) out[perm[i]] = v[i];
    return out;
  }
  Matrix apply_rows(const Eigen::Ref<const Matrix>& M) const {
    Matrix out(size(), M.cols());
    for (Eigen::Index i = 0; i < size(); ++i) out.row(i) = M.row(perm[i]);
    return out;
  }
};

namespace detail {
inline Eigen::Index split_left(Eigen::Index n) { return (n + 1) / 2; }
}  // namespace detail

/// Recursive median split along the dimension of maximal extent, ties
/// broken by original index order. Leaves end up with between
/// leaf_size/2 and leaf_size points.
inline Permutation partition_points(const Eigen::Ref<const Matrix>& X,
                                    Eigen::Index leaf_size) {
  if (X.rows() < 1) throw ShapeError("partition_points: empty input");
  if (leaf_size < 8) throw ShapeError("partition_points: leaf_size must be >= 8");
  Permutation p;
  p.perm.resize(static_cast<size_t>(X.rows()));
  std::iota(p.perm.begin(), p.perm.end(), 0);

  std::function<void(Eigen::Index, Eigen::Index)> split = [&](Eigen::Index lo,
                                                              Eigen::Index hi) {
    const Eigen::Index count = hi - lo;
    if (count <= leaf_size) return;
    Eigen::Index dim = 0;
    double best_extent = -1;
    for (Eigen::Index d = 0; d < X.cols(); ++d) {
      double mn = X(p.perm[static_cast<size_t>(lo)], d), mx = mn;
      for (Eigen::Index i = lo + 1; i < hi; ++i) {
        const double v = X(p.perm[static_cast<size_t>(i)], d);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      if (mx - mn > best_extent) {
        best_extent = mx - mn;
        dim = d;
      }
    }
    std::sort(p.perm.begin() + lo, p.perm.begin() + hi,
              [&](Eigen::Index a, Eigen::Index b) {
                const double xa = X(a, dim), xb = X(b, dim);
                return xa < xb || (xa == xb && a < b);
              });
    const Eigen::Index mid = lo + detail::split_left(count);
    split(lo, mid);
    split(mid, hi);
  };
  split(0, X.rows());
  return p;
}

/// Rank-r factor pair: block ~ U V^T.
struct LowRank {
  Matrix U, V;
  bool truncated = false;

  Eigen::Index rank() const { return U.cols(); }

  Matrix to_dense(Eigen::Index p, Eigen::Index q) const {
    if (rank() == 0) return Matrix::Zero(p, q);
    return U * V.transpose();
  }

  // QR + small SVD truncation; keeps singular values above tol relative
  // to the largest, capped at max_rank.
  void recompress(double tol, int max_rank) {
    const Eigen::Index k = rank();
    if (k == 0) return;
    Eigen::HouseholderQR<Matrix> qru(U), qrv(V);
    Matrix Ru = Matrix(qru.matrixQR().topRows(std::min(k, U.rows())))
                    .triangularView<Eigen::Upper>();
    Matrix Rv = Matrix(qrv.matrixQR().topRows(std::min(k, V.rows())))
                    .triangularView<Eigen::Upper>();
    Matrix core = Ru * Rv.transpose();
    Eigen::JacobiSVD<Matrix> svd(core, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    Eigen::Index r = 0;
    while (r < sv.size() && r < max_rank && sv[r] > tol * sv[0]) ++r;
    Matrix Qu = qru.householderQ() * Matrix::Identity(U.rows(), Ru.rows());
    Matrix Qv = qrv.householderQ() * Matrix::Identity(V.rows(), Rv.rows());
    U = Qu * svd.matrixU().leftCols(r) * sv.head(r).asDiagonal();
    V = Qv * svd.matrixV().leftCols(r);
  }
};

/// Partially pivoted adaptive cross approximation of a p x q block,
/// sampling O(r (p+q)) entries.
inline LowRank aca_compress(const std::function<double(Eigen::Index, Eigen::Index)>& entry,
                            Eigen::Index p, Eigen::Index q, double tol, int max_rank) {
  if (!(tol > 0)) throw ShapeError("aca_compress: tol must be positive");
  std::vector<Vector> us, vs;
  std::vector<bool> row_used(static_cast<size_t>(p), false);
  std::vector<bool> col_used(static_cast<size_t>(q), false);
  double est2 = 0;  // running squared Frobenius norm of the approximation
  bool truncated = false;

  auto residual_row = [&](Eigen::Index i) {
    Vector r(q);
    for (Eigen::Index j = 0; j < q; ++j) r[j] = entry(i, j);
    for (size_t k = 0; k < us.size(); ++k) r -= us[k][i] * vs[k];
    return r;
  };
  auto residual_col = [&](Eigen::Index j) {
    Vector c(p);
    for (Eigen::Index i = 0; i < p; ++i) c[i] = entry(i, j);
    for (size_t k = 0; k < us.size(); ++k) c -= vs[k][j] * us[k];
    return c;
  };

  Eigen::Index i_star = 0;
  while (static_cast<int>(us.size()) < max_rank) {
    // Find a usable pivot row; a run of zero rows means we are done.
    Vector v;
    Eigen::Index j_star = -1;
    bool found = false;
    for (Eigen::Index attempt = 0; attempt < p; ++attempt) {
      if (i_star < 0 || row_used[static_cast<size_t>(i_star)]) {
        i_star = -1;
        for (Eigen::Index i = 0; i < p; ++i)
          if (!row_used[static_cast<size_t>(i)]) {
            i_star = i;
            break;
          }
        if (i_star < 0) break;
      }
      v = residual_row(i_star);
      row_used[static_cast<size_t>(i_star)] = true;
      j_star = -1;
      double best = 0;
      for (Eigen::Index j = 0; j < q; ++j)
        if (!col_used[static_cast<size_t>(j)] && std::abs(v[j]) > best) {
          best = std::abs(v[j]);
          j_star = j;
        }
      if (j_star >= 0 && best > 1e-300) {
        found = true;
        break;
      }
      i_star = -1;  // force a scan for the next unused row
    }
    if (!found) break;

    col_used[static_cast<size_t>(j_star)] = true;
    Vector u = residual_col(j_star) / v[j_star];
    const double term = u.norm() * v.norm();
    if (!us.empty() && term <= tol * std::sqrt(est2)) break;
    est2 += term * term;
    for (size_t k = 0; k < us.size(); ++k)
      est2 += 2.0 * u.dot(us[k]) * v.dot(vs[k]);
    us.push_back(std::move(u));
    vs.push_back(std::move(v));

    // next pivot row: largest entry of the new u among unused rows
    i_star = -1;
    double best = -1;
    for (Eigen::Index i = 0; i < p; ++i)
      if (!row_used[static_cast<size_t>(i)] && std::abs(us.back()[i]) > best) {
        best = std::abs(us.back()[i]);
        i_star = i;
      }
    if (i_star < 0) break;
    if (static_cast<int>(us.size()) == max_rank) {
      // did not get a chance to meet tol; flag for the caller
      Vector probe = residual_row(i_star);
      if (probe.lpNorm<Eigen::Infinity>() > tol * std::sqrt(est2)) truncated = true;
    }
  }

  LowRank lr;
  const auto r = static_cast<Eigen::Index>(us.size());
  lr.U.resize(p, r);
  lr.V.resize(q, r);
  for (Eigen::Index k = 0; k < r; ++k) {
    // Balance each pair (||u|| = ||v||); the pivot division above can
    // leave the norms separated by many orders of magnitude, which would
    // destroy the conditioning of downstream small systems.
    const double un = us[static_cast<size_t>(k)].norm();
    const double vn = vs[static_cast<size_t>(k)].norm();
    const double s = (un > 0 && vn > 0) ? std::sqrt(vn / un) : 1.0;
    lr.U.col(k) = s * us[static_cast<size_t>(k)];
    lr.V.col(k) = vs[static_cast<size_t>(k)] / s;
  }
  lr.truncated = truncated;
  return lr;
}

struct HodlrNode {
  Eigen::Index begin = 0, size = 0;
  std::unique_ptr<HodlrNode> left, right;
  Matrix dense;  // leaf diagonal block
  LowRank lr;    // internal: block(left, right) = U V^T, block(right, left) = V U^T

  bool leaf() const { return !left; }

  std::unique_ptr<HodlrNode> clone() const {
    auto n = std::make_unique<HodlrNode>();
    n->begin = begin;
    n->size = size;
    n->dense = dense;
    n->lr = lr;
    if (left) n->left = left->clone();
    if (right) n->right = right->clone();
    return n;
  }
};

struct AssemblyReport {
  int truncated_blocks = 0;
  Eigen::Index max_rank_seen = 0;
};

/// Recursive block representation with dense diagonal leaves and
/// ACA-compressed symmetric off-diagonal blocks.
class HodlrMatrix {
 public:
  static HodlrMatrix assemble(const std::function<double(Eigen::Index, Eigen::Index)>& entry,
                              Eigen::Index n, const HodlrConfig& cfg) {
    HodlrMatrix M;
    M.n_ = n;
    M.cfg_ = cfg;
    M.root_ = M.build(entry, 0, n);
    return M;
  }

  Eigen::Index size() const { return n_; }
  const HodlrNode* root() const { return root_.get(); }
  const HodlrConfig& config() const { return cfg_; }
  const AssemblyReport& report() const { return report_; }

  Vector mvm(const Eigen::Ref<const Vector>& v) const {
    if (v.size() != n_) throw ShapeError("hodlr_mvm: length mismatch");
    Vector out = Vector::Zero(n_);
    mvm_node(*root_, v, out);
    return out;
  }

  Matrix to_dense() const {
    Matrix A = Matrix::Zero(n_, n_);
    dense_node(*root_, A);
    return A;
  }

  // Per-level observed ranks and compression ratios.
  nlohmann::json rank_report() const {
    std::vector<std::vector<Eigen::Index>> ranks;
    size_t stored = 0;
    std::function<void(const HodlrNode&, size_t)> walk = [&](const HodlrNode& nd,
                                                             size_t depth) {
      if (nd.leaf()) {
        stored += static_cast<size_t>(nd.dense.size());
        return;
      }
      if (ranks.size() <= depth) ranks.resize(depth + 1);
      ranks[depth].push_back(nd.lr.rank());
      stored += static_cast<size_t>(nd.lr.U.size() + nd.lr.V.size());
      walk(*nd.left, depth + 1);
      walk(*nd.right, depth + 1);
    };
    walk(*root_, 0);
    nlohmann::json levels = nlohmann::json::array();
    for (size_t d = 0; d < ranks.size(); ++d)
      levels.push_back({{"level", d}, {"ranks", ranks[d]}});
    const double dense_entries = static_cast<double>(n_) * static_cast<double>(n_);
    return {{"n", n_},
            {"levels", levels},
            {"stored_entries", stored},
            {"compression_ratio", static_cast<double>(stored) / dense_entries}};
  }

  std::unique_ptr<HodlrNode> clone_tree() const { return root_->clone(); }

 private:
  std::unique_ptr<HodlrNode> build(
      const std::function<double(Eigen::Index, Eigen::Index)>& entry, Eigen::Index begin,
      Eigen::Index size) {
    auto nd = std::make_unique<HodlrNode>();
    nd->begin = begin;
    nd->size = size;
    if (size <= cfg_.leaf_size) {
      nd->dense.resize(size, size);
      for (Eigen::Index i = 0; i < size; ++i)
        for (Eigen::Index j = 0; j < size; ++j)
          nd->dense(i, j) = entry(begin + i, begin + j);
      return nd;
    }
    const Eigen::Index h = detail::split_left(size);
    nd->left = build(entry, begin, h);
    nd->right = build(entry, begin + h, size - h);
    nd->lr = aca_compress(
        [&](Eigen::Index i, Eigen::Index j) { return entry(begin + i, begin + h + j); }, h,
        size - h, cfg_.tol, cfg_.max_rank);
    if (nd->lr.truncated) ++report_.truncated_blocks;
    report_.max_rank_seen = std::max(report_.max_rank_seen, nd->lr.rank());
    return nd;
  }

  static void mvm_node(const HodlrNode& nd, const Eigen::Ref<const Vector>& v, Vector& out) {
    if (nd.leaf()) {
      out.segment(nd.begin, nd.size).noalias() += nd.dense * v.segment(nd.begin, nd.size);
      return;
    }
    mvm_node(*nd.left, v, out);
    mvm_node(*nd.right, v, out);
    if (nd.lr.rank() > 0) {
      out.segment(nd.left->begin, nd.left->size).noalias() +=
          nd.lr.U * (nd.lr.V.transpose() * v.segment(nd.right->begin, nd.right->size));
      out.segment(nd.right->begin, nd.right->size).noalias() +=
          nd.lr.V * (nd.lr.U.transpose() * v.segment(nd.left->begin, nd.left->size));
    }
  }

  static void dense_node(const HodlrNode& nd, Matrix& A) {
    if (nd.leaf()) {
      A.block(nd.begin, nd.begin, nd.size, nd.size) = nd.dense;
      return;
    }
    dense_node(*nd.left, A);
    dense_node(*nd.right, A);
    Matrix B = nd.lr.to_dense(nd.left->size, nd.right->size);
    A.block(nd.left->begin, nd.right->begin, nd.left->size, nd.right->size) = B;
    A.block(nd.right->begin, nd.left->begin, nd.right->size, nd.left->size) = B.transpose();
  }

  std::unique_ptr<HodlrNode> root_;
  Eigen::Index n_ = 0;
  HodlrConfig cfg_;
  AssemblyReport report_;
};

/// Kernel-matrix assembly: spatial partition first, sigma^2 folded into
/// the leaf diagonals so the off-diagonal blocks stay noise-free.
struct HodlrKernel {
  HodlrMatrix M;
  Permutation perm;
  Matrix Xp;  // permuted inputs
};

inline HodlrKernel hodlr_assemble(const Eigen::Ref<const Matrix>& X, const KernelSpec& spec,
                                  double sigma2, const HodlrConfig& cfg) {
  HodlrKernel hk;
  hk.perm = partition_points(X, cfg.leaf_size);
  hk.Xp = hk.perm.apply_rows(X);
  auto entry = [&](Eigen::Index i, Eigen::Index j) {
    double k = kern_eval(spec, hk.Xp.row(i).transpose(), hk.Xp.row(j).transpose());
    if (i == j) k += sigma2;
    return k;
  };
  hk.M = HodlrMatrix::assemble(entry, X.rows(), cfg);
  return hk;
}

inline Vector hodlr_mvm(const HodlrMatrix& M, const Eigen::Ref<const Vector>& v) {
  return M.mvm(v);
}

/// Multiplicative factorization K = D * F_deepest * ... * F_root where D
/// is the block diagonal of leaf factors and every F is a block-diagonal
/// low-rank update to the identity, inverted through its small SMW core.
class HodlrFactorChain {
 public:
  struct LeafFactor {
    Eigen::Index begin, size;
    Eigen::LLT<Matrix> llt;
  };
  struct NodeFactor {
    Eigen::Index begin, size;
    Matrix P, Q;  // F = I + P Q^T on this node's span
    Eigen::PartialPivLU<Matrix> core;  // LU of I + Q^T P
  };

  Vector solve(const Eigen::Ref<const Vector>& b) const {
    Vector x = b;
    for (const LeafFactor& lf : leaves_)
      x.segment(lf.begin, lf.size) = lf.llt.solve(x.segment(lf.begin, lf.size));
    for (const auto& level : levels_)
      for (const NodeFactor& f : level) {
        auto seg = x.segment(f.begin, f.size);
        seg -= f.P * f.core.solve(f.Q.transpose() * seg);
      }
    return x;
  }

  Vector apply(const Eigen::Ref<const Vector>& v) const {
    Vector x = v;
    for (auto level = levels_.rbegin(); level != levels_.rend(); ++level)
      for (const NodeFactor& f : *level) {
        auto seg = x.segment(f.begin, f.size);
        seg += f.P * (f.Q.transpose() * seg);
      }
    for (const LeafFactor& lf : leaves_)
      x.segment(lf.begin, lf.size) =
          lf.llt.matrixL() *
          (lf.llt.matrixL().transpose() * x.segment(lf.begin, lf.size)).eval();
    return x;
  }

  double logdet() const { return logdet_; }

  friend HodlrFactorChain hodlr_factorize(const HodlrMatrix& M);

 private:
  std::vector<LeafFactor> leaves_;
  // levels_[0] holds the deepest internal level; application order for solve
  std::vector<std::vector<NodeFactor>> levels_;
  double logdet_ = 0;
};

inline HodlrFactorChain hodlr_factorize(const HodlrMatrix& M) {
  // Working copies of the generators; row sides get updated as factors
  // are peeled off, column sides stay original.
  struct Work {
    HodlrNode* node;
    Matrix Uw, Vw;  // row-updated copies
    size_t depth;
  };
  auto tree = M.clone_tree();
  std::vector<Work> internals;
  std::vector<HodlrNode*> leaves;
  std::function<void(HodlrNode*, size_t)> walk = [&](HodlrNode* nd, size_t depth) {
    if (nd->leaf()) {
      leaves.push_back(nd);
      return;
    }
    internals.push_back({nd, nd->lr.U, nd->lr.V, depth});
    walk(nd->left.get(), depth + 1);
    walk(nd->right.get(), depth + 1);
  };
  walk(tree.get(), 0);
  size_t max_depth = 0;
  for (const Work& w : internals) max_depth = std::max(max_depth, w.depth);

  HodlrFactorChain chain;

  // Leaf pass: factor the dense diagonal blocks and push their inverses
  // into every enclosing node's row generators.
  for (HodlrNode* lf : leaves) {
    Eigen::LLT<Matrix> llt(lf->dense);
    if (llt.info() != Eigen::Success)
      throw IndefiniteMatrixError("hodlr_factorize: leaf block not positive definite");
    chain.logdet_ += 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
    for (Work& w : internals) {
      const Eigen::Index ub = w.node->left->begin, us = w.node->left->size;
      const Eigen::Index vb = w.node->right->begin, vs = w.node->right->size;
      if (lf->begin >= ub && lf->begin < ub + us && w.Uw.cols() > 0)
        w.Uw.middleRows(lf->begin - ub, lf->size) =
            llt.solve(w.Uw.middleRows(lf->begin - ub, lf->size));
      else if (lf->begin >= vb && lf->begin < vb + vs && w.Vw.cols() > 0)
        w.Vw.middleRows(lf->begin - vb, lf->size) =
            llt.solve(w.Vw.middleRows(lf->begin - vb, lf->size));
    }
    chain.leaves_.push_back({lf->begin, lf->size, std::move(llt)});
  }

  // Level passes, deepest internal level first.
  for (size_t depth = max_depth + 1; depth-- > 0;) {
    std::vector<HodlrFactorChain::NodeFactor> level;
    for (Work& w : internals) {
      if (w.depth != depth) continue;
      const Eigen::Index p = w.node->left->size, q = w.node->right->size;
      const Eigen::Index r = w.node->lr.rank();
      HodlrFactorChain::NodeFactor f;
      f.begin = w.node->begin;
      f.size = w.node->size;
      f.P = Matrix::Zero(p + q, 2 * r);
      f.P.topLeftCorner(p, r) = w.Uw;
      f.P.bottomRightCorner(q, r) = w.Vw;
      f.Q = Matrix::Zero(p + q, 2 * r);
      f.Q.topRightCorner(p, r) = w.node->lr.U;
      f.Q.bottomLeftCorner(q, r) = w.node->lr.V;
      Matrix C = Matrix::Identity(2 * r, 2 * r);
      C.noalias() += f.Q.transpose() * f.P;
      f.core.compute(C);
      if (r > 0 && !(f.core.rcond() > 1e-14))
        throw SingularFactorError("hodlr_factorize: near-singular SMW core at level " +
                                  std::to_string(depth));
      const double det = f.core.determinant();
      if (!(det > 0))
        throw SingularFactorError("hodlr_factorize: non-positive core determinant at level " +
                                  std::to_string(depth));
      chain.logdet_ += std::log(det);

      // Apply F^-1 rows to every strict ancestor's working generators.
      for (Work& anc : internals) {
        if (anc.depth >= depth) continue;
        const Eigen::Index ub = anc.node->left->begin, us = anc.node->left->size;
        const Eigen::Index vb = anc.node->right->begin, vs = anc.node->right->size;
        Matrix* G = nullptr;
        Eigen::Index off = 0;
        if (f.begin >= ub && f.begin < ub + us) {
          G = &anc.Uw;
          off = f.begin - ub;
        } else if (f.begin >= vb && f.begin < vb + vs) {
          G = &anc.Vw;
          off = f.begin - vb;
        } else {
          continue;
        }
        if (G->cols() == 0) continue;
        auto rowsblk = G->middleRows(off, f.size);
        rowsblk -= f.P * f.core.solve(f.Q.transpose() * rowsblk);
      }
      level.push_back(std::move(f));
    }
    if (!level.empty()) chain.levels_.push_back(std::move(level));
  }
  return chain;
}

inline Vector hodlr_solve(const HodlrFactorChain& chain, const Eigen::Ref<const Vector>& b) {
  return chain.solve(b);
}

inline double hodlr_logdet(const HodlrFactorChain& chain) { return chain.logdet(); }

/// Hierarchical Cholesky factor (Ballani-style): dense lower factors on
/// leaves, low-rank sub-diagonal couplings, Schur-complement downdates
/// pushed into the right subtree.
class HodlrCholesky {
 public:
  struct Node {
    Eigen::Index begin = 0, size = 0;
    std::unique_ptr<Node> left, right;
    Matrix denseL;   // leaf
    Matrix Bv, Bu;   // internal: L block(right, left) = Bv * Bu^T
    bool leaf() const { return !left; }
  };

  static HodlrCholesky factorize(const HodlrMatrix& M) {
    HodlrCholesky hc;
    hc.n_ = M.size();
    hc.cfg_ = M.config();
    auto work = M.clone_tree();
    hc.root_ = hc.build(work.get());
    return hc;
  }

  Eigen::Index size() const { return n_; }

  Vector solve_forward(const Eigen::Ref<const Vector>& b) const {
    Matrix x = b;
    forward(*root_, x, 0);
    return x.col(0);
  }
  Vector solve_backward(const Eigen::Ref<const Vector>& b) const {
    Matrix x = b;
    backward(*root_, x, 0);
    return x.col(0);
  }
  Vector solve(const Eigen::Ref<const Vector>& b) const {
    Matrix x = b;
    forward(*root_, x, 0);
    backward(*root_, x, 0);
    return x.col(0);
  }

  double logdet() const {
    double ld = 0;
    std::function<void(const Node&)> walk = [&](const Node& nd) {
      if (nd.leaf()) {
        ld += 2.0 * nd.denseL.diagonal().array().log().sum();
        return;
      }
      walk(*nd.left);
      walk(*nd.right);
    };
    walk(*root_);
    return ld;
  }

  Matrix to_dense() const {
    Matrix L = Matrix::Zero(n_, n_);
    std::function<void(const Node&)> walk = [&](const Node& nd) {
      if (nd.leaf()) {
        L.block(nd.begin, nd.begin, nd.size, nd.size) = nd.denseL;
        return;
      }
      walk(*nd.left);
      walk(*nd.right);
      if (nd.Bv.cols() > 0)
        L.block(nd.right->begin, nd.left->begin, nd.right->size, nd.left->size) =
            nd.Bv * nd.Bu.transpose();
    };
    walk(*root_);
    return L;
  }

 private:
  std::unique_ptr<Node> build(HodlrNode* k) {
    auto nd = std::make_unique<Node>();
    nd->begin = k->begin;
    nd->size = k->size;
    if (k->leaf()) {
      Eigen::LLT<Matrix> llt(k->dense);
      if (llt.info() != Eigen::Success)
        throw IndefiniteMatrixError("hodlr_cholesky: leaf block not positive definite");
      nd->denseL = llt.matrixL();
      return nd;
    }
    nd->left = build(k->left.get());
    // B = V (L1^-1 U)^T, so B L1^T = V U^T
    Matrix W = k->lr.U;
    if (W.cols() > 0) forward(*nd->left, W, 0);
    nd->Bv = k->lr.V;
    nd->Bu = W;
    if (W.cols() > 0) {
      Matrix Mc = W.transpose() * W;  // r x r
      downdate(k->right.get(), k->lr.V, Mc);
    }
    nd->right = build(k->right.get());
    return nd;
  }

  // K2 <- K2 - Vmat * Mc * Vmat^T, recursively distributed over the
  // subtree's blocks; off-diagonal generators are augmented then
  // recompressed.
  void downdate(HodlrNode* nd, const Eigen::Ref<const Matrix>& Vmat,
                const Eigen::Ref<const Matrix>& Mc) {
    if (nd->leaf()) {
      nd->dense.noalias() -= Vmat * Mc * Vmat.transpose();
      return;
    }
    const Eigen::Index p = nd->left->size;
    Matrix V1 = Vmat.topRows(p);
    Matrix V2 = Vmat.bottomRows(nd->size - p);
    Matrix U2(nd->lr.U.rows(), nd->lr.U.cols() + V1.cols());
    U2 << nd->lr.U, V1;
    Matrix W2(nd->lr.V.rows(), nd->lr.V.cols() + V2.cols());
    W2 << nd->lr.V, -(V2 * Mc);
    nd->lr.U = std::move(U2);
    nd->lr.V = std::move(W2);
    nd->lr.recompress(cfg_.tol, cfg_.max_rank);
    downdate(nd->left.get(), V1, Mc);
    downdate(nd->right.get(), V2, Mc);
  }

  // Rows [base, base + nd.size) of x correspond to this node's span.
  static void forward(const Node& nd, Matrix& x, Eigen::Index base) {
    if (nd.leaf()) {
      auto blk = x.middleRows(base, nd.size);
      nd.denseL.triangularView<Eigen::Lower>().solveInPlace(blk);
      return;
    }
    const Eigen::Index p = nd.left->size;
    forward(*nd.left, x, base);
    if (nd.Bv.cols() > 0)
      x.middleRows(base + p, nd.right->size).noalias() -=
          nd.Bv * (nd.Bu.transpose() * x.middleRows(base, p));
    forward(*nd.right, x, base + p);
  }

  static void backward(const Node& nd, Matrix& x, Eigen::Index base) {
    if (nd.leaf()) {
      auto blk = x.middleRows(base, nd.size);
      nd.denseL.triangularView<Eigen::Lower>().transpose().solveInPlace(blk);
      return;
    }
    const Eigen::Index p = nd.left->size;
    backward(*nd.right, x, base + p);
    if (nd.Bv.cols() > 0)
      x.middleRows(base, p).noalias() -=
          nd.Bu * (nd.Bv.transpose() * x.middleRows(base + p, nd.right->size));
    backward(*nd.left, x, base);
  }

  std::unique_ptr<Node> root_;
  Eigen::Index n_ = 0;
  HodlrConfig cfg_;
};

inline HodlrCholesky hodlr_cholesky(const HodlrMatrix& M) {
  return HodlrCholesky::factorize(M);
}

struct HcfgpResult {
  Vector mean;
  Vector variance;
  double nlml = 0;
};

/// HCFGP backend: HODLR assembly of K + sigma^2 I followed by its
/// hierarchical Cholesky; predictions and NLML run through the factor.
class HcfgpModel {
 public:
  static HcfgpModel fit(const Dataset& data, const KernelSpec& spec,
                        const HodlrConfig& cfg) {
    HcfgpModel m;
    m.spec_ = spec;
    m.kernel_ = hodlr_assemble(data.X, spec, spec.hyper.noise_variance(), cfg);
    m.chol_ = HodlrCholesky::factorize(m.kernel_.M);
    Vector yp = m.kernel_.perm.apply(data.y);
    m.alpha_ = m.chol_.solve(yp);
    const double n = static_cast<double>(data.size());
    m.nlml_ = 0.5 * yp.dot(m.alpha_) + 0.5 * m.chol_.logdet() +
              0.5 * n * std::log(2.0 * std::numbers::pi);
    return m;
  }

  HcfgpResult predict(const Eigen::Ref<const Matrix>& Xstar) const {
    if (Xstar.cols() != kernel_.Xp.cols())
      throw ShapeError("hcfgp predict: test dimension mismatch");
    HcfgpResult out;
    out.nlml = nlml_;
    Matrix Ks = kern_cross(spec_, Xstar, kernel_.Xp);  // n* x n (permuted)
    out.mean = Ks * alpha_;
    const double s2 = spec_.hyper.signal_variance();
    out.variance.resize(Xstar.rows());
    for (Eigen::Index i = 0; i < Xstar.rows(); ++i) {
      Vector z = chol_.solve_forward(Ks.row(i).transpose());
      double var = s2 - z.squaredNorm();
      out.variance[i] = var < 0 ? 0 : var;
    }
    return out;
  }

  double nlml() const { return nlml_; }
  const HodlrKernel& kernel() const { return kernel_; }

 private:
  KernelSpec spec_;
  HodlrKernel kernel_;
  HodlrCholesky chol_;
  Vector alpha_;
  double nlml_ = 0;
};

inline HcfgpResult hcfgp_fit_predict_nlml(const Dataset& data, const KernelSpec& spec,
                                          double tol, Eigen::Index leaf_size,
                                          const Eigen::Ref<const Matrix>& Xstar) {
  HodlrConfig cfg;
  cfg.tol = tol;
  cfg.leaf_size = leaf_size;
  return HcfgpModel::fit(data, spec, cfg).predict(Xstar);
}

}  // namespace fastgp
