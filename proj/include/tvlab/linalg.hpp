#pragma once

// Dense linear algebra and probability primitives. Storage is Eigen; the
// solvers below are written out explicitly so that their failure modes and
// tolerances are under our control.

#include <span>

#include <Eigen/Dense>

#include "tvlab/error.hpp"

namespace tvlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Non-negative entries summing to one (within 1e-9). Construction validates.
class ProbabilityVector {
public:
    explicit ProbabilityVector(Vector p);

    const Vector& values() const noexcept { return p_; }
    Eigen::Index size() const noexcept { return p_.size(); }
    double operator[](Eigen::Index i) const { return p_[i]; }

private:
    Vector p_;
};

bool all_finite(const Matrix& m);

/// Solves A X = B for symmetric positive definite A via an explicit
/// Cholesky factorisation. Throws decomposition_failure on a non-positive
/// pivot and dimension_mismatch on incompatible shapes.
Matrix cholesky_solve(const Matrix& a, const Matrix& b);

/// Ridge regression in the column convention: H is d x N (inputs as columns),
/// Y is p x N (targets as columns). Returns the p x d matrix W minimising
/// ||Y - W H||_F^2 + lambda ||W||_F^2, obtained from
/// (H H^T + lambda I) W^T = H Y^T.
Matrix ridge_solve(const Matrix& h, const Matrix& y, double lambda);

/// ||(H H^T + lambda I) W^T - H Y^T||_F / (1 + ||H Y^T||_F).
double ridge_relative_residual(const Matrix& h, const Matrix& y, double lambda, const Matrix& w);

/// ||Y - W H||_F^2 + lambda ||W||_F^2.
double ridge_objective(const Matrix& h, const Matrix& y, double lambda, const Matrix& w);

ProbabilityVector softmax(const Vector& z);

/// KL(P || Q) in nats. Terms with P_i = 0 contribute nothing.
double kl_divergence(const ProbabilityVector& p, const ProbabilityVector& q);

/// Largest singular value by power iteration on M^T M, starting from the
/// normalised all-ones vector.
double spectral_norm(const Matrix& m);

double pearson(std::span<const double> xs, std::span<const double> ys);

}  // namespace tvlab
