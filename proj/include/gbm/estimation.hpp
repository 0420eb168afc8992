#pragma once

#include "gbm/nb.hpp"
#include "gbm/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gbm {

struct AdaptiveStepState {
    Vector rho_s;
    Vector rho_t;
};

// Mutable estimation state; updates recompute the workspace from params on entry.
struct FitState {
    Matrix Y;
    CovariateSet cov;
    GbmParams params;
    PriorConfig prior;
    FitConfig config;
    AdaptiveStepState adapt;
    long clamp_events = 0;
    std::vector<std::string> warnings;

    FitState(Matrix Y, CovariateSet cov, GbmParams params, PriorConfig prior, FitConfig config);
    NbWorkspace workspace();
};

struct FitResult {
    GbmParams params;
    CovariateSet cov;
    std::vector<double> trace;
    bool converged = false;
    int iterations = 0;
    long clamp_events = 0;
    std::vector<std::string> warnings;
};

// Centers columns 2..K and scales them to unit mean square.
Matrix standardize_covariates(const Matrix& Xraw);

// Optionally standardizes, then builds the covariate set.
CovariateSet preprocess_covariates(const Matrix& Xraw, const Matrix& Zraw, bool standardize);

// beta + ξ·min{1, ρ√dim/‖ξ‖} with ξ = (F + λI)⁻¹(grad − λβ).
Vector bounded_fisher_step(const Vector& beta, const Vector& grad, const Matrix& fisher, double lambda,
                           double rho);
// Per-coordinate precisions Λ = diag(lambda).
Vector bounded_fisher_step(const Vector& beta, const Vector& grad, const Matrix& fisher,
                           const Vector& lambda, double rho);

// Likelihood-preserving projections.
void project_a(GbmParams& p, const CovariateSet& cov);
void project_b(GbmParams& p, const CovariateSet& cov);
// Given an updated G (replacing UD), restores all constraints on (A, C, U, D, V).
// Returns false when the resulting singular values are degenerate.
bool project_g(GbmParams& p, const CovariateSet& cov, const Matrix& G);
// Given an updated H (replacing VD), restores all constraints on (B, C, U, D, V).
bool project_h(GbmParams& p, const CovariateSet& cov, const Matrix& H);
void project_s(GbmParams& p);
void project_t(GbmParams& p);

double log_prior(const GbmParams& p, const PriorConfig& prior);
double log_posterior(const Matrix& Y, const CovariateSet& cov, const GbmParams& p,
                     const PriorConfig& prior);

GbmParams initialize(const Matrix& Y, const CovariateSet& cov, Eigen::Index M, const PriorConfig& prior,
                     const FitConfig& config);

void update_a(FitState& st);
void update_b(FitState& st);
void update_c(FitState& st);
void update_d(FitState& st);
void update_g(FitState& st);
void update_h(FitState& st);
void update_s(FitState& st);
void update_t(FitState& st);

void bias_correct_dispersions(FitState& st, double s_floor, double t_floor);

// Makes D positive and descending and fixes factor signs. Returns warnings for zero columns.
std::vector<std::string> finalize_factors(GbmParams& p);

// Covariates are standardized per config.standardize; `start` replaces the default initialization.
FitResult fit(const DataMatrix& Y, const CovariateSet& cov, Eigen::Index M, const PriorConfig& prior,
              const FitConfig& config, const std::optional<GbmParams>& start = std::nullopt);
// Same, for real-valued Y (used by tests with synthetic data).
FitResult fit_real(const Matrix& Y, const CovariateSet& cov, Eigen::Index M, const PriorConfig& prior,
                   const FitConfig& config, const std::optional<GbmParams>& start = std::nullopt);

}  // namespace gbm
