#pragma once

#include "gbm/nb.hpp"
#include "gbm/types.hpp"

#include <string>
#include <vector>

namespace gbm {

// Vectorization conventions used throughout:
//   A: index j*K + k (vec Aᵀ)   B: i*L + l (vec Bᵀ)   C: l*K + k (vec C)
//   U: i*M + m (vec Uᵀ)         V: j*M + m (vec Vᵀ)

// Quantities evaluated once at the fitted parameters.
struct InferenceContext {
    Matrix Y;
    CovariateSet cov;
    GbmParams params;
    PriorConfig prior;
    int threads = 1;

    NbWorkspace ws;
    Matrix dWM;    // ∂w/∂η
    Matrix dEM;    // ∂e/∂η
    Matrix gradA;  // EᵀX, J×K
    Matrix gradB;  // EZ, I×L
    Matrix gradC;  // XᵀEZ, K×L
    Vector gradS;
    Vector gradT;
    DispersionDerivs dd;
    std::vector<std::string> warnings;
};

InferenceContext prepare_inference(const Matrix& Y, const CovariateSet& cov, const GbmParams& params,
                                   const PriorConfig& prior, int threads = 1);

struct ConditionalInverses {
    std::vector<Matrix> invFa;  // J blocks, K×K
    std::vector<Matrix> invFb;  // I blocks, L×L
    Matrix invFc;               // KL×KL
    std::vector<Matrix> invFu;  // I blocks, M×M
    std::vector<Matrix> invFv;  // J blocks, M×M
    Vector invFs;
    Vector invFt;
};

ConditionalInverses conditional_inverses(InferenceContext& ctx);

struct ConstraintJacobians {
    Matrix Ju;  // (MK + M²)×IM
    Matrix Jv;  // (ML + M²)×JM
};

ConstraintJacobians constraint_jacobians(const GbmParams& params, const CovariateSet& cov);

// Drops the duplicated symmetric rows (m1 > m2) of an orthonormality block, leaving
// n_orth + M(M+1)/2 rows. Needed because (m1,m2) and (m2,m1) encode the same constraint.
Matrix unique_constraint_rows(const Matrix& J, Eigen::Index n_orth, Eigen::Index M);

struct UVVariance {
    Vector varU;  // IM
    Vector varV;  // JM
};

UVVariance joint_uv_uncertainty(InferenceContext& ctx, const ConditionalInverses& ci);

struct ABFromUV {
    Vector varAfromU, varAfromV;  // JK
    Vector varBfromU, varBfromV;  // IL
};

ABFromUV propagate_uv_to_ab(const InferenceContext& ctx, const ConditionalInverses& ci, const Vector& varU,
                            const Vector& varV);

struct CFromAB {
    Vector varCfromA, varCfromB;  // KL
};

CFromAB propagate_ab_to_c(const InferenceContext& ctx, const ConditionalInverses& ci);

struct DispersionsFrom {
    Vector varSfromA, varSfromB, varSfromU, varSfromV;
    Vector varTfromA, varTfromB, varTfromU, varTfromV;
};

DispersionsFrom propagate_to_dispersions(const InferenceContext& ctx, const ConditionalInverses& ci,
                                         const Vector& varA, const Vector& varB, const Vector& varU,
                                         const Vector& varV);

// Edges of the propagation graph: source block → target block.
enum class Edge { UtoA, VtoA, UtoB, VtoB, AtoC, BtoC, AtoS, BtoS, UtoS, VtoS, AtoT, BtoT, UtoT, VtoT };

// Dense Jacobian ∂ĥ_target/∂source (target-dim × source-dim) for diagnostics and tests.
Matrix propagation_jacobian(const InferenceContext& ctx, const ConditionalInverses& ci, Edge edge);

struct InferenceResult {
    Matrix se_A, se_B, se_C, se_U, se_V;
    Vector se_S, se_T;

    Vector condA, condB, condC, condS, condT;  // conditional variances
    Vector varU, varV;
    ABFromUV ab;
    CFromAB c;
    DispersionsFrom disp;
    std::vector<std::string> warnings;
};

InferenceResult standard_errors(const Matrix& Y, const CovariateSet& cov, const GbmParams& params,
                                const PriorConfig& prior, int threads = 1);

struct WaldResult {
    Vector z, p_values, ci_lower, ci_upper;
};

WaldResult wald_tests(const Vector& estimates, const Vector& ses, double level = 0.95);

// Blocks to include in the oracle's bordered system.
struct OracleBlocks {
    bool a = true, b = true, c = true, d = true, u = true, v = true;
    static OracleBlocks uv_only() { return {false, false, false, false, true, true}; }
};

struct OracleResult {
    Matrix bordered;  // assembled [[F + Λ, Jᵀ], [J, 0]]
    Eigen::Index n_params = 0;
    Vector varA, varB, varC, varD, varU, varV;  // empty for excluded blocks
};

inline constexpr Eigen::Index kOracleMaxParams = 2000;

Eigen::Index oracle_parameter_count(const CovariateSet& cov, Eigen::Index M);

OracleResult full_augmented_fisher_oracle(const Matrix& Y, const CovariateSet& cov, const GbmParams& params,
                                          const PriorConfig& prior, OracleBlocks blocks = {});

// Expected cross-information between (S, T, ω) and (A, B, C, D, U, V), evaluated by summing the NB
// pmf over outcomes. Rows: s (I), t (J), ω; columns follow the oracle's parameter order.
Matrix dispersion_cross_information(const Matrix& mu, const Matrix& r, const CovariateSet& cov,
                                    const GbmParams& params);

}  // namespace gbm
