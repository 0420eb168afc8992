#pragma once

#include "gbm/types.hpp"

namespace gbm {

// Linear predictors are clamped to this magnitude before exponentiation.
inline constexpr double kEtaClamp = 700.0;
// Above this inverse dispersion the digamma differences switch to asymptotic forms.
inline constexpr double kLargeR = 1e8;

double nb_log_pmf(double y, double mu, double r);

struct NbWorkspace {
    Matrix mu;
    Matrix r;
    Matrix W;
    Matrix E;
    long clamp_events = 0;
};

// r = exp(−s_i − t_j − ω).
Matrix inverse_dispersions(const Vector& S, const Vector& T, double omega);

NbWorkspace compute_workspace(const Matrix& Y, const Matrix& eta, const Vector& S, const Vector& T,
                              double omega);

// Σ_ij nb_log_pmf(Y_ij, μ_ij, r_ij).
double nb_log_likelihood(const Matrix& Y, const Matrix& mu, const Matrix& r);

double log1p_stable(double x);
double psi_delta(double y, double r);
double psi_prime_delta(double y, double r);

struct DispersionDerivs {
    Matrix delta;
    Matrix delta_prime;
};

DispersionDerivs dispersion_derivatives(const Matrix& Y, const Matrix& mu, const Matrix& r);

// Likelihood gradients in each parameter block; the score in η is E.
struct LoglikGradients {
    Matrix A;  // EᵀX
    Matrix B;  // EZ
    Matrix C;  // XᵀEZ
    Vector D;  // diag(UᵀEV)
    Matrix U;  // EVD
    Matrix V;  // EᵀUD
};

LoglikGradients loglik_gradients(const NbWorkspace& ws, const GbmParams& params, const CovariateSet& cov);

}  // namespace gbm
