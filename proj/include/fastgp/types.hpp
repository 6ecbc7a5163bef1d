#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace fastgp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Input shapes disagree (dimension or length mismatch).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Base for everything that goes wrong numerically.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Cholesky failed even after a jitter retry.
struct IllConditionedError : NumericError {
  using NumericError::NumericError;
};

// A factor that must be invertible is (numerically) singular.
struct SingularFactorError : NumericError {
  using NumericError::NumericError;
};

// A matrix expected to be positive definite is not.
struct IndefiniteMatrixError : NumericError {
  using NumericError::NumericError;
};

// Interpolation requested outside the grid.
struct ExtrapolationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Iterative optimization could not make progress / diverged.
struct OptimizationError : NumericError {
  using NumericError::NumericError;
};

// CG hit a non-finite residual (operator indefinite or inconsistent).
struct BreakdownError : NumericError {
  using NumericError::NumericError;
};

// Training inputs X (n x D) with noisy targets y (n).
struct Dataset {
  Matrix X;
  Vector y;

  Dataset() = default;
  Dataset(Matrix X_, Vector y_) : X(std::move(X_)), y(std::move(y_)) {
    if (X.rows() < 1) throw ShapeError("Dataset: need at least one point");
    if (X.rows() != y.size())
      throw ShapeError("Dataset: X rows (" + std::to_string(X.rows()) +
                       ") != y length (" + std::to_string(y.size()) + ")");
    if (!X.allFinite() || !y.allFinite())
      throw ShapeError("Dataset: non-finite entries");
  }

  Eigen::Index size() const { return X.rows(); }
  Eigen::Index dim() const { return X.cols(); }
};

}  // namespace fastgp
