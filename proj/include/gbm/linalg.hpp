#pragma once

#include "gbm/types.hpp"

#include <functional>

namespace gbm {

// Inverse of a symmetric positive definite matrix via Cholesky; throws numeric_error on failure.
Matrix spd_inverse(const Matrix& F, const std::string& what);

// Solves (F) x = b for symmetric positive definite F.
Vector spd_solve(const Matrix& F, const Vector& b, const std::string& what);

// (MᵀM)⁻¹Mᵀ; throws rank_error when M has deficient column rank.
Matrix left_pseudoinverse(const Matrix& M, const std::string& name);

struct CompactSvd {
    Matrix U;
    Vector d;
    Matrix V;
};

// Rank-r compact SVD with singular values in descending order.
CompactSvd compact_svd(const Matrix& M, Eigen::Index rank);

// Runs body(i) for i in [0, n), partitioned across `threads` workers.
// Each index must write only to state it owns.
void parallel_for(Eigen::Index n, int threads, const std::function<void(Eigen::Index)>& body);

// Resolves a requested thread count: values < 1 fall back to GBM_THREADS or 1.
int resolve_threads(int requested);

}  // namespace gbm
