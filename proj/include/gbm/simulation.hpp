#pragma once

#include "gbm/rng.hpp"
#include "gbm/types.hpp"

#include <string>
#include <utility>
#include <vector>

namespace gbm {

enum class CovariateScheme { Normal, Gamma, Binary };
enum class ParameterScheme { Normal, Gamma };
enum class Outcome { NB, LNP, Poisson, Geometric };

struct SimScheme {
    Outcome outcome = Outcome::NB;
    CovariateScheme covariates = CovariateScheme::Normal;
    ParameterScheme parameters = ParameterScheme::Normal;
    Eigen::Index I = 100, J = 50, K = 2, L = 2, M = 1;
    std::uint64_t seed = 0;
    double omega0 = -2.3;

    void validate() const;
};

// Parses "Outcome/Covariates/Parameters", e.g. "NB/Normal/Normal".
void parse_scheme(const std::string& text, SimScheme& scheme);
std::string scheme_string(const SimScheme& scheme);
// Parses "IxJxKxLxM".
void parse_dims(const std::string& text, SimScheme& scheme);

struct SimTruth {
    CovariateSet cov;
    GbmParams params0;
    Matrix mu0;
    Matrix r0;
    long clamp_events = 0;  // copula draws clipped to ±100
};

struct SimData {
    SimTruth truth;
    DataMatrix Y;
};

// n×p design: intercept column plus p−1 standardized copula columns.
// If raw is given it receives the pre-standardization values.
Matrix generate_covariates(Eigen::Index n, Eigen::Index p, CovariateScheme scheme, Rng& rng,
                           long* clamp_events = nullptr, Matrix* raw = nullptr);

GbmParams generate_parameters(const CovariateSet& cov, Eigen::Index M, ParameterScheme scheme, Rng& rng,
                              double omega0 = -2.3);

DataMatrix generate_outcomes(const Matrix& mu0, const Matrix& r0, Outcome outcome, Rng& rng);

// Truth and data for replicate `replicate` of a scheme; streams derive from (seed, component, replicate).
SimTruth simulate_truth(const SimScheme& scheme, std::uint64_t replicate = 0);
SimData simulate(const SimScheme& scheme, std::uint64_t replicate = 0);

struct LatentAlignment {
    std::vector<Eigen::Index> perm;  // perm[t] = estimated column matched to truth column t
    Vector signs;                    // ±1 per truth column
};

LatentAlignment latent_alignment(const GbmParams& est, const GbmParams& truth);

// Permutes and sign-flips latent columns of est to best match truth.
GbmParams align_latent_factors(const GbmParams& est, const GbmParams& truth);

// Applies an alignment to the columns of an I×M or J×M matrix; `flip` negates per the signs.
Matrix apply_alignment(const Matrix& cols, const LatentAlignment& a, bool flip);

double relative_mse(const Matrix& est, const Matrix& truth);

// Actual coverage at each target in 0, 0.01, …, 1.
std::vector<std::pair<double, double>> coverage_curve(const Matrix& estimates, const Matrix& ses,
                                                      const Matrix& truths, int grid = 101);

// Fraction of entries whose nominal `level` Wald interval covers the truth.
double coverage_at(const Matrix& estimates, const Matrix& ses, const Matrix& truths, double level);

}  // namespace gbm
