#include "tvlab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace tvlab {

namespace {

std::string shape(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::dimension_mismatch: return "dimension-mismatch";
        case ErrorCode::decomposition_failure: return "decomposition-failure";
        case ErrorCode::non_positive_lambda: return "non-positive-lambda";
        case ErrorCode::support_violation: return "support-violation";
        case ErrorCode::degenerate_input: return "degenerate-input";
        case ErrorCode::sequence_too_long: return "sequence-too-long";
        case ErrorCode::token_out_of_range: return "token-out-of-range";
        case ErrorCode::injection_dim_mismatch: return "injection-dim-mismatch";
        case ErrorCode::layer_out_of_range: return "layer-out-of-range";
        case ErrorCode::empty_batch: return "empty-batch";
        case ErrorCode::shape_mismatch: return "shape-mismatch";
        case ErrorCode::vocab_exhausted: return "vocab-exhausted";
        case ErrorCode::too_few_shots: return "too-few-shots";
        case ErrorCode::malformed_number: return "malformed-number";
        case ErrorCode::empty_label_set: return "empty-label-set";
        case ErrorCode::wrong_model: return "wrong-model";
        case ErrorCode::empty_queries: return "empty-queries";
        case ErrorCode::empty_validation: return "empty-validation";
        case ErrorCode::vocab_mismatch: return "vocab-mismatch";
        case ErrorCode::unsupported_method: return "unsupported-method";
        case ErrorCode::length_mismatch: return "length-mismatch";
        case ErrorCode::invalid_config: return "invalid-config";
        case ErrorCode::config_error: return "config-error";
        case ErrorCode::io_error: return "io-error";
        case ErrorCode::bad_magic: return "bad-magic";
        case ErrorCode::version_mismatch: return "version-mismatch";
        case ErrorCode::truncated_file: return "truncated-file";
        case ErrorCode::digest_mismatch: return "digest-mismatch";
        case ErrorCode::gap_too_small: return "gap-too-small";
    }
    return "unknown";
}

ProbabilityVector::ProbabilityVector(Vector p) : p_(std::move(p)) {
    if (p_.size() == 0) throw Error(ErrorCode::dimension_mismatch, "empty probability vector");
    for (Eigen::Index i = 0; i < p_.size(); ++i) {
        if (!std::isfinite(p_[i]) || p_[i] < 0.0 || p_[i] > 1.0)
            throw Error(ErrorCode::degenerate_input, "probability entry out of [0,1]");
    }
    if (std::abs(p_.sum() - 1.0) > 1e-9)
        throw Error(ErrorCode::degenerate_input, "probabilities do not sum to one");
}

bool all_finite(const Matrix& m) {
    return m.allFinite();
}

Matrix cholesky_solve(const Matrix& a, const Matrix& b) {
    const Eigen::Index n = a.rows();
    if (a.cols() != n || b.rows() != n)
        throw Error(ErrorCode::dimension_mismatch, "cholesky_solve: A " + shape(a) + ", B " + shape(b));

    // Lower-triangular factor, column by column.
    Matrix l = Matrix::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double pivot = a(j, j);
        for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
        if (!(pivot > 0.0))
            throw Error(ErrorCode::decomposition_failure,
                        "non-positive pivot at column " + std::to_string(j));
        const double diag = std::sqrt(pivot);
        l(j, j) = diag;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / diag;
        }
    }

    // Forward substitution L Z = B, then back substitution L^T X = Z.
    Matrix x = b;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        for (Eigen::Index i = 0; i < n; ++i) {
            double s = x(i, c);
            for (Eigen::Index k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (Eigen::Index i = n - 1; i >= 0; --i) {
            double s = x(i, c);
            for (Eigen::Index k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
            x(i, c) = s / l(i, i);
        }
    }
    return x;
}

Matrix ridge_solve(const Matrix& h, const Matrix& y, double lambda) {
    if (!(lambda > 0.0)) throw Error(ErrorCode::non_positive_lambda, "lambda must be > 0");
    if (h.cols() != y.cols() || h.cols() == 0)
        throw Error(ErrorCode::dimension_mismatch, "ridge_solve: H " + shape(h) + ", Y " + shape(y));

    Matrix gram = h * h.transpose();
    gram.diagonal().array() += lambda;
    const Matrix rhs = h * y.transpose();
    return cholesky_solve(gram, rhs).transpose();
}

double ridge_relative_residual(const Matrix& h, const Matrix& y, double lambda, const Matrix& w) {
    Matrix gram = h * h.transpose();
    gram.diagonal().array() += lambda;
    const Matrix rhs = h * y.transpose();
    return (gram * w.transpose() - rhs).norm() / (1.0 + rhs.norm());
}

double ridge_objective(const Matrix& h, const Matrix& y, double lambda, const Matrix& w) {
    return (y - w * h).squaredNorm() + lambda * w.squaredNorm();
}

ProbabilityVector softmax(const Vector& z) {
    if (z.size() == 0) throw Error(ErrorCode::dimension_mismatch, "softmax of empty vector");
    const double shift = z.maxCoeff();
    Vector e = (z.array() - shift).exp();
    e /= e.sum();
    return ProbabilityVector(std::move(e));
}

double kl_divergence(const ProbabilityVector& p, const ProbabilityVector& q) {
    if (p.size() != q.size())
        throw Error(ErrorCode::dimension_mismatch, "kl_divergence: sizes differ");
    double kl = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] == 0.0)
            throw Error(ErrorCode::support_violation, "Q is zero where P is positive at " + std::to_string(i));
        kl += p[i] * std::log(p[i] / q[i]);
    }
    // Rounding can leave a tiny negative residue when P and Q nearly coincide.
    return kl < 0.0 ? 0.0 : kl;
}

double spectral_norm(const Matrix& m) {
    if (m.size() == 0) throw Error(ErrorCode::dimension_mismatch, "spectral_norm of empty matrix");
    // The per-step change is held far below the 1e-6 target accuracy because a
    // small spectral gap makes the change underestimate the remaining error.
    constexpr double step_tolerance = 1e-12;
    constexpr int max_iterations = 1000;

    Vector u = Vector::Ones(m.cols()).normalized();
    double sigma = (m * u).norm();
    for (int it = 0; it < max_iterations; ++it) {
        Vector next = m.transpose() * (m * u);
        const double len = next.norm();
        if (len == 0.0) return 0.0;
        u = next / len;
        const double estimate = (m * u).norm();
        const bool converged = std::abs(estimate - sigma) <= step_tolerance * estimate;
        sigma = estimate;
        if (converged) break;
    }
    return sigma;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size())
        throw Error(ErrorCode::length_mismatch, "pearson: sequences differ in length");
    if (xs.size() < 3) throw Error(ErrorCode::degenerate_input, "pearson needs at least 3 points");
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw Error(ErrorCode::degenerate_input, "pearson: constant sequence");
    const double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

}  // namespace tvlab
