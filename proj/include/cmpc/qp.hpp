#pragma once

// Sparse convex QP solver:
//
//   minimize    1/2 z'Pz + q'z + constant
//   subject to  A z  = b
//               G z <= h
//
// Primal-dual interior point (Mehrotra predictor-corrector). Each iteration
// factors the quasi-definite KKT matrix with a sparse LDL^T.

#include <optional>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace cmpc {

using SparseMatrix = Eigen::SparseMatrix<double>;

struct QpProblem {
  SparseMatrix P;  // symmetric, both triangles stored
  Eigen::VectorXd q;
  SparseMatrix A;
  Eigen::VectorXd b;
  SparseMatrix G;
  Eigen::VectorXd h;
  double constant{0};

  Eigen::Index num_variables() const { return q.size(); }
  double objective(const Eigen::VectorXd& z) const { return 0.5 * z.dot(P * z) + q.dot(z) + constant; }
  /// Throws DimensionMismatch if the blocks disagree.
  void validate() const;
};

enum class QpStatus { Solved, MaxIterations, PrimalInfeasible, DualInfeasible, NumericalError };

const char* to_string(QpStatus status);

/// Scaled KKT residuals, each normalized by (1 + magnitude of the terms involved).
struct KktResiduals {
  double stationarity{0};
  double primal_equality{0};
  double primal_inequality{0};
  double complementarity{0};
  double dual_sign{0};  // largest negative inequality multiplier

  double max() const;
};

KktResiduals kkt_residuals(const QpProblem& problem, const Eigen::VectorXd& z, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& lambda);

struct QpSettings {
  double tol{1e-9};
  // A run that stalls below tol is still reported Solved if its best iterate
  // reaches this residual.
  double acceptable_tol{1e-7};
  int max_iterations{80};
  // Static regularization of the KKT matrix, removed by iterative refinement.
  double regularization{1e-9};
  // Replacement magnitude for pivots that come out tiny or of the wrong sign.
  double dynamic_regularization{1e-7};
  int refinement_steps{8};
};

struct QpSolution {
  Eigen::VectorXd z;
  Eigen::VectorXd y;       // equality multipliers
  Eigen::VectorXd lambda;  // inequality multipliers, >= 0
  double objective{0};
  QpStatus status{QpStatus::NumericalError};
  int iterations{0};
  KktResiduals residuals{};

  bool converged() const { return status == QpStatus::Solved; }
};

/// Optional starting point. Multipliers and slacks are pushed into the interior.
struct QpWarmStart {
  Eigen::VectorXd z;
  Eigen::VectorXd y;
  Eigen::VectorXd lambda;
};

QpSolution solve_qp(const QpProblem& problem, const QpSettings& settings = {},
                    const std::optional<QpWarmStart>& warm = std::nullopt);

}  // namespace cmpc
