#pragma once

#include "gbm/types.hpp"

#include <set>

namespace gbm {

// η = XAᵀ + BZᵀ + XCZᵀ + UDVᵀ.
Matrix compute_eta(const GbmParams& params, const CovariateSet& cov);

// log(Y + epsilon) − η.
Matrix residuals(const Matrix& Y, const Matrix& eta, double epsilon = 0.125);

// η restricted to the kept covariate/latent columns (0-based indices) plus resid.
Matrix partial_residuals(const GbmParams& params, const CovariateSet& cov, const Matrix& resid,
                         const std::set<Eigen::Index>& keep_x, const std::set<Eigen::Index>& keep_z,
                         const std::set<Eigen::Index>& keep_u);

// w = rμ/(r+μ).
Matrix residual_precisions(const Matrix& mu, const Matrix& r);

struct SumOfSquares {
    double ss_xa = 0, ss_bz = 0, ss_xcz = 0, ss_udv = 0, ss_total = 0;
};

// Requires the orthogonality constraints to hold within constraint_tol.
SumOfSquares sum_of_squares_decomposition(const GbmParams& params, const CovariateSet& cov,
                                          double constraint_tol = 1e-8);

struct ConstraintReport {
    double za = 0, xb = 0, xu = 0, zv = 0;   // scaled max |entry| of the products
    double utu = 0, vtv = 0;                 // max |UᵀU − I|, |VᵀV − I|
    bool d_ordered = true;                   // d₁ > … > d_M
    bool d_positive = true;
    bool sign_ok = true;                     // only evaluated in strict mode
    double mean_exp_s = 0, mean_exp_t = 0;   // |mean exp − 1|
    bool pass = true;

    std::string describe() const;
};

// Orthogonality products are scaled by the largest absolute entry of the factor involved.
ConstraintReport check_constraints(const GbmParams& params, const CovariateSet& cov, double tol = 1e-8,
                                   bool strict = false);

// Index of the first entry of a column whose magnitude is nonzero, or -1.
Eigen::Index first_nonzero(const Eigen::Ref<const Vector>& col);

}  // namespace gbm
