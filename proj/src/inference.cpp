#include "gbm/inference.hpp"

#include "gbm/linalg.hpp"
#include "gbm/model.hpp"

#include <boost/math/distributions/normal.hpp>

#include <cmath>

namespace gbm {

InferenceContext prepare_inference(const Matrix& Y, const CovariateSet& cov, const GbmParams& params,
                                   const PriorConfig& prior, int threads) {
    prior.validate();
    check_dimensions(params, cov);
    if (Y.rows() != cov.I() || Y.cols() != cov.J()) throw shape_error("counts do not match covariates");
    InferenceContext c;
    c.Y = Y;
    c.cov = cov;
    c.params = params;
    c.prior = prior;
    c.threads = resolve_threads(threads);
    c.ws = compute_workspace(Y, compute_eta(params, cov), params.S, params.T, params.omega);
    const auto mu = c.ws.mu.array();
    const auto r = c.ws.r.array();
    const auto den = (r + mu).square();
    c.dWM = (mu * r.square() / den).matrix();
    c.dEM = (-mu * r * (r + Y.array()) / den).matrix();
    LoglikGradients g = loglik_gradients(c.ws, params, cov);
    c.gradA = std::move(g.A);
    c.gradB = std::move(g.B);
    c.gradC = std::move(g.C);
    c.dd = dispersion_derivatives(Y, c.ws.mu, c.ws.r);
    c.gradS = (-prior.lambda_s * (params.S.array() - prior.m_s)).matrix() + c.dd.delta.rowwise().sum();
    c.gradT = (-prior.lambda_t * (params.T.array() - prior.m_t)).matrix() + c.dd.delta.colwise().sum().transpose();
    return c;
}

namespace {
Matrix gram(const Matrix& X, const Eigen::Ref<const Vector>& w) { return X.transpose() * w.asDiagonal() * X; }

Matrix fisher_c(const InferenceContext& ctx) {
    const auto& X = ctx.cov.X;
    const auto& Z = ctx.cov.Z;
    const auto K = X.cols(), L = Z.cols();
    Matrix F = Matrix::Zero(K * L, K * L);
    for (Eigen::Index j = 0; j < Z.rows(); ++j) {
        const Matrix G = gram(X, ctx.ws.W.col(j));
        for (Eigen::Index l2 = 0; l2 < L; ++l2)
            for (Eigen::Index l1 = 0; l1 < L; ++l1) F.block(l1 * K, l2 * K, K, K) += Z(j, l1) * Z(j, l2) * G;
    }
    F.diagonal().array() += ctx.prior.lambda_c;
    return F;
}

Matrix fisher_u(const InferenceContext& ctx, Eigen::Index i) {
    const Matrix VD = ctx.params.V * ctx.params.D.asDiagonal();
    Matrix F = gram(VD, ctx.ws.W.row(i).transpose());
    F.diagonal().array() += ctx.prior.lambda_u;
    return F;
}

Matrix fisher_v(const InferenceContext& ctx, Eigen::Index j) {
    const Matrix UD = ctx.params.U * ctx.params.D.asDiagonal();
    Matrix F = gram(UD, ctx.ws.W.col(j));
    F.diagonal().array() += ctx.prior.lambda_v;
    return F;
}

double observed_inverse(double denom, const char* which, Eigen::Index idx, std::vector<std::string>& warn) {
    if (!(denom > 0)) {
        warn.push_back(std::string("observed information for ") + which + " entry " + std::to_string(idx + 1) +
                       " is not positive; using its absolute value");
        denom = std::abs(denom);
        if (denom == 0) throw numeric_error(std::string("zero observed information for ") + which);
    }
    return 1.0 / denom;
}
}  // namespace

ConditionalInverses conditional_inverses(InferenceContext& ctx) {
    const auto& X = ctx.cov.X;
    const auto& Z = ctx.cov.Z;
    const auto I = X.rows(), J = Z.rows(), K = X.cols(), L = Z.cols(), M = ctx.params.M();
    ConditionalInverses ci;
    ci.invFa.resize(static_cast<size_t>(J));
    ci.invFb.resize(static_cast<size_t>(I));
    parallel_for(J, ctx.threads, [&](Eigen::Index j) {
        Matrix F = gram(X, ctx.ws.W.col(j));
        F.diagonal().array() += ctx.prior.lambda_a;
        ci.invFa[static_cast<size_t>(j)] = spd_inverse(F, "A block " + std::to_string(j + 1));
    });
    parallel_for(I, ctx.threads, [&](Eigen::Index i) {
        Matrix F = gram(Z, ctx.ws.W.row(i).transpose());
        F.diagonal().array() += ctx.prior.lambda_b;
        ci.invFb[static_cast<size_t>(i)] = spd_inverse(F, "B block " + std::to_string(i + 1));
    });
    ci.invFc = spd_inverse(fisher_c(ctx), "C block");
    (void)K;
    (void)L;
    if (M > 0) {
        ci.invFu.resize(static_cast<size_t>(I));
        ci.invFv.resize(static_cast<size_t>(J));
        parallel_for(I, ctx.threads, [&](Eigen::Index i) {
            ci.invFu[static_cast<size_t>(i)] = spd_inverse(fisher_u(ctx, i), "U block " + std::to_string(i + 1));
        });
        parallel_for(J, ctx.threads, [&](Eigen::Index j) {
            ci.invFv[static_cast<size_t>(j)] = spd_inverse(fisher_v(ctx, j), "V block " + std::to_string(j + 1));
        });
    }
    ci.invFs.resize(I);
    ci.invFt.resize(J);
    for (Eigen::Index i = 0; i < I; ++i)
        ci.invFs(i) = observed_inverse(ctx.prior.lambda_s - ctx.dd.delta_prime.row(i).sum(), "S", i, ctx.warnings);
    for (Eigen::Index j = 0; j < J; ++j)
        ci.invFt(j) = observed_inverse(ctx.prior.lambda_t - ctx.dd.delta_prime.col(j).sum(), "T", j, ctx.warnings);
    return ci;
}

namespace {
// Per-row blocks vcat(X_{i:} ⊗ I_M, (U_{i:} ⊗ I_M) + (I_M ⊗ U_{i:})), concatenated horizontally.
Matrix factor_constraint_jacobian(const Matrix& X, const Matrix& U) {
    const auto I = X.rows(), K = X.cols(), M = U.cols();
    Matrix J = Matrix::Zero(M * K + M * M, I * M);
    for (Eigen::Index i = 0; i < I; ++i) {
        const auto c0 = i * M;
        for (Eigen::Index k = 0; k < K; ++k)
            for (Eigen::Index m = 0; m < M; ++m) J(k * M + m, c0 + m) = X(i, k);
        for (Eigen::Index a = 0; a < M; ++a)
            for (Eigen::Index b = 0; b < M; ++b) {
                const auto row = M * K + a * M + b;
                J(row, c0 + b) += U(i, a);
                J(row, c0 + a) += U(i, b);
            }
    }
    return J;
}
}  // namespace

ConstraintJacobians constraint_jacobians(const GbmParams& params, const CovariateSet& cov) {
    check_dimensions(params, cov);
    return {factor_constraint_jacobian(cov.X, params.U), factor_constraint_jacobian(cov.Z, params.V)};
}

Matrix unique_constraint_rows(const Matrix& J, Eigen::Index n_orth, Eigen::Index M) {
    const auto keep = n_orth + M * (M + 1) / 2;
    Matrix R(keep, J.cols());
    R.topRows(n_orth) = J.topRows(n_orth);
    Eigen::Index r = n_orth;
    for (Eigen::Index a = 0; a < M; ++a)
        for (Eigen::Index b = a; b < M; ++b) R.row(r++) = J.row(n_orth + a * M + b);
    return R;
}

namespace {
Matrix solve_or_throw(const Matrix& A, const Matrix& rhs, const std::string& what) {
    Eigen::FullPivLU<Matrix> lu(A);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible())
        throw rank_error(what + " is singular (rank " + std::to_string(lu.rank()) + " of " +
                         std::to_string(A.rows()) + ")");
    return lu.solve(rhs);
}
}  // namespace

UVVariance joint_uv_uncertainty(InferenceContext& ctx, const ConditionalInverses& ci) {
    const auto& p = ctx.params;
    const auto I = ctx.cov.I(), J = ctx.cov.J(), K = ctx.cov.K(), L = ctx.cov.L(), M = p.M();
    UVVariance out;
    if (M == 0) {
        out.varU = Vector::Zero(0);
        out.varV = Vector::Zero(0);
        return out;
    }
    const ConstraintJacobians cj = constraint_jacobians(p, ctx.cov);
    const Matrix Ju = unique_constraint_rows(cj.Ju, M * K, M);
    const Matrix Jv = unique_constraint_rows(cj.Jv, M * L, M);
    const auto cu = Ju.rows(), cv = Jv.rows();
    const Matrix DU = p.U * p.D.asDiagonal();
    const Matrix DV = p.V * p.D.asDiagonal();

    Matrix FJ(I * M, cu);
    for (Eigen::Index i = 0; i < I; ++i)
        FJ.middleRows(i * M, M) = ci.invFu[static_cast<size_t>(i)] * Ju.middleCols(i * M, M).transpose();

    Matrix Fuv(I * M, J * M);
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index i = 0; i < I; ++i)
            Fuv.block(i * M, j * M, M, M) = ctx.ws.W(i, j) * DV.row(j).transpose() * DU.row(i);

    const Matrix FuvFJ = Fuv.transpose() * FJ;
    const Matrix invJFJ =
        solve_or_throw(Ju * FJ, Matrix::Identity(cu, cu), "U constraint system (X-orthogonality/orthonormality)");

    Matrix FFuv(I * M, J * M);
    for (Eigen::Index i = 0; i < I; ++i)
        FFuv.middleRows(i * M, M) = ci.invFu[static_cast<size_t>(i)] * Fuv.middleRows(i * M, M);
    const Matrix FuvFFuv = Fuv.transpose() * FFuv;

    Matrix Amat = -FuvFFuv + FuvFJ * invJFJ * FuvFJ.transpose();
    for (Eigen::Index j = 0; j < J; ++j) Amat.block(j * M, j * M, M, M) += fisher_v(ctx, j);

    Matrix bord = Matrix::Zero(J * M + cv, J * M + cv);
    bord.topLeftCorner(J * M, J * M) = Amat;
    bord.topRightCorner(J * M, cv) = Jv.transpose();
    bord.bottomLeftCorner(cv, J * M) = Jv;
    Matrix rhs = Matrix::Zero(J * M + cv, J * M);
    rhs.topRows(J * M).setIdentity();
    const Matrix Bsol =
        solve_or_throw(bord, rhs, "bordered V constraint system (Z-orthogonality/orthonormality)");
    Matrix Cmat = Bsol.topRows(J * M);
    Cmat = 0.5 * (Cmat + Cmat.transpose()).eval();

    const Matrix FuvD = FFuv.transpose() - FuvFJ * invJFJ * FJ.transpose();

    Vector d(I * M);
    for (Eigen::Index i = 0; i < I; ++i) d.segment(i * M, M) = ci.invFu[static_cast<size_t>(i)].diagonal();
    const Matrix invJFJ_FJt = invJFJ * FJ.transpose();
    const Vector f = (FJ.transpose().array() * invJFJ_FJt.array()).colwise().sum().transpose();
    const Matrix CFuvD = Cmat * FuvD;
    const Vector g = (FuvD.array() * CFuvD.array()).colwise().sum().transpose();

    out.varU = d - f + g;
    out.varV = Cmat.diagonal();
    if ((out.varU.array() <= 0).any() || (out.varV.array() <= 0).any())
        ctx.warnings.push_back("joint (U,V) variances contain nonpositive entries");
    return out;
}

namespace {
// Per-column and per-row η-sensitivities of the one-step maps.
struct Sensitivities {
    std::vector<Matrix> Qa;  // J blocks, K×I: ∂ĥ_a_j/∂η_ij in column i
    std::vector<Matrix> Rb;  // I blocks, L×J: ∂ĥ_b_i/∂η_ij in column j
};

Sensitivities ab_sensitivities(const InferenceContext& ctx, const ConditionalInverses& ci) {
    const auto& X = ctx.cov.X;
    const auto& Z = ctx.cov.Z;
    const auto I = X.rows(), J = Z.rows();
    Sensitivities s;
    s.Qa.resize(static_cast<size_t>(J));
    s.Rb.resize(static_cast<size_t>(I));
    parallel_for(J, ctx.threads, [&](Eigen::Index j) {
        const Matrix& Fi = ci.invFa[static_cast<size_t>(j)];
        const Vector h = Fi * ctx.gradA.row(j).transpose();
        const Vector gamma = ctx.dEM.col(j).array() - ctx.dWM.col(j).array() * (X * h).array();
        s.Qa[static_cast<size_t>(j)] = Fi * X.transpose() * gamma.asDiagonal();
    });
    parallel_for(I, ctx.threads, [&](Eigen::Index i) {
        const Matrix& Fi = ci.invFb[static_cast<size_t>(i)];
        const Vector h = Fi * ctx.gradB.row(i).transpose();
        const Vector gamma = ctx.dEM.row(i).transpose().array() - ctx.dWM.row(i).transpose().array() * (Z * h).array();
        s.Rb[static_cast<size_t>(i)] = Fi * Z.transpose() * gamma.asDiagonal();
    });
    return s;
}

// dEM − dWM ⊙ (X H Zᵀ) with H = reshape(invFc·vec(gradC)).
Matrix c_gamma(const InferenceContext& ctx, const ConditionalInverses& ci) {
    const auto K = ctx.cov.K(), L = ctx.cov.L();
    const Vector h = ci.invFc * Eigen::Map<const Vector>(ctx.gradC.data(), K * L);
    const Matrix H = Eigen::Map<const Matrix>(h.data(), K, L);
    return ctx.dEM - (ctx.dWM.array() * (ctx.cov.X * H * ctx.cov.Z.transpose()).array()).matrix();
}

// KL×K block of ∂ĥ_c/∂a_j.
Matrix c_from_a_block(const InferenceContext& ctx, const ConditionalInverses& ci, const Matrix& G, Eigen::Index j) {
    const auto& X = ctx.cov.X;
    const auto K = X.cols(), L = ctx.cov.L();
    const Matrix Gj = X.transpose() * G.col(j).asDiagonal() * X;
    Matrix kron(K * L, K);
    for (Eigen::Index l = 0; l < L; ++l) kron.middleRows(l * K, K) = ctx.cov.Z(j, l) * Gj;
    return ci.invFc * kron;
}

// KL×L block of ∂ĥ_c/∂b_i.
Matrix c_from_b_block(const InferenceContext& ctx, const ConditionalInverses& ci, const Matrix& G, Eigen::Index i) {
    const auto& Z = ctx.cov.Z;
    const auto K = ctx.cov.K(), L = Z.cols();
    const Matrix Hi = Z.transpose() * G.row(i).transpose().asDiagonal() * Z;
    Matrix kron(K * L, L);
    for (Eigen::Index l2 = 0; l2 < L; ++l2)
        for (Eigen::Index l = 0; l < L; ++l) kron.block(l2 * K, l, K, 1) = Hi(l2, l) * ctx.cov.X.row(i).transpose();
    return ci.invFc * kron;
}

// κ_ij = invF_x q_ij − invF_x² grad_x (q_ij − p_ij) for rows (S) or columns (T).
void dispersion_kappas(const InferenceContext& ctx, const ConditionalInverses& ci, Matrix& kS, Matrix& kT) {
    const auto& w = ctx.ws.W.array();
    const Matrix q = (-w * ctx.ws.E.array() / ctx.ws.r.array()).matrix();
    const Matrix qp = (q.array() * (1.0 - 2.0 * w / ctx.ws.mu.array())).matrix();
    const Vector aS = ci.invFs.array().square() * ctx.gradS.array();
    const Vector aT = ci.invFt.array().square() * ctx.gradT.array();
    kS = ci.invFs.asDiagonal() * q - aS.asDiagonal() * qp;
    kT = q * ci.invFt.asDiagonal() - qp * aT.asDiagonal();
}

Matrix as_rows(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
    // v stored as vec of the transpose: element (r, c) at r*cols + c
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), rows,
                                                                                                    cols);
}

}  // namespace

ABFromUV propagate_uv_to_ab(const InferenceContext& ctx, const ConditionalInverses& ci, const Vector& varU,
                            const Vector& varV) {
    const auto& p = ctx.params;
    const auto I = ctx.cov.I(), J = ctx.cov.J(), K = ctx.cov.K(), L = ctx.cov.L(), M = p.M();
    ABFromUV out;
    out.varAfromU = Vector::Zero(J * K);
    out.varAfromV = Vector::Zero(J * K);
    out.varBfromU = Vector::Zero(I * L);
    out.varBfromV = Vector::Zero(I * L);
    if (M == 0) return out;
    const Sensitivities s = ab_sensitivities(ctx, ci);
    const Matrix VU = as_rows(varU, I, M);
    const Matrix VV = as_rows(varV, J, M);
    const Vector d2 = p.D.array().square();
    const Matrix UD = p.U * p.D.asDiagonal();
    const Matrix VD = p.V * p.D.asDiagonal();
    parallel_for(J, ctx.threads, [&](Eigen::Index j) {
        const Matrix& Q = s.Qa[static_cast<size_t>(j)];
        const Vector weight = VU * (p.V.row(j).transpose().array().square() * d2.array()).matrix();
        out.varAfromU.segment(j * K, K) = Q.array().square().matrix() * weight;
        const Matrix dA = Q * UD;
        out.varAfromV.segment(j * K, K) = dA.array().square().matrix() * VV.row(j).transpose();
    });
    parallel_for(I, ctx.threads, [&](Eigen::Index i) {
        const Matrix& R = s.Rb[static_cast<size_t>(i)];
        const Matrix dB = R * VD;
        out.varBfromU.segment(i * L, L) = dB.array().square().matrix() * VU.row(i).transpose();
        const Vector weight = VV * (p.U.row(i).transpose().array().square() * d2.array()).matrix();
        out.varBfromV.segment(i * L, L) = R.array().square().matrix() * weight;
    });
    return out;
}

CFromAB propagate_ab_to_c(const InferenceContext& ctx, const ConditionalInverses& ci) {
    const auto I = ctx.cov.I(), J = ctx.cov.J(), K = ctx.cov.K(), L = ctx.cov.L();
    const Matrix G = c_gamma(ctx, ci);
    std::vector<Vector> partA(static_cast<size_t>(J)), partB(static_cast<size_t>(I));
    parallel_for(J, ctx.threads, [&](Eigen::Index j) {
        const Matrix dC = c_from_a_block(ctx, ci, G, j);
        partA[static_cast<size_t>(j)] =
            (dC.array() * (dC * ci.invFa[static_cast<size_t>(j)]).array()).rowwise().sum().matrix();
    });
    parallel_for(I, ctx.threads, [&](Eigen::Index i) {
        const Matrix dC = c_from_b_block(ctx, ci, G, i);
        partB[static_cast<size_t>(i)] =
            (dC.array() * (dC * ci.invFb[static_cast<size_t>(i)]).array()).rowwise().sum().matrix();
    });
    CFromAB out;
    out.varCfromA = Vector::Zero(K * L);
    out.varCfromB = Vector::Zero(K * L);
    for (const auto& v : partA) out.varCfromA += v;
    for (const auto& v : partB) out.varCfromB += v;
    return out;
}

DispersionsFrom propagate_to_dispersions(const InferenceContext& ctx, const ConditionalInverses& ci,
                                         const Vector& varA, const Vector& varB, const Vector& varU,
                                         const Vector& varV) {
    const auto& p = ctx.params;
    const auto& X = ctx.cov.X;
    const auto& Z = ctx.cov.Z;
    const auto I = X.rows(), J = Z.rows(), K = X.cols(), L = Z.cols(), M = p.M();
    Matrix kS, kT;
    dispersion_kappas(ctx, ci, kS, kT);
    const Matrix kS2 = kS.array().square().matrix();
    const Matrix kT2 = kT.array().square().matrix();
    const Matrix VA = as_rows(varA, J, K);
    const Matrix VB = as_rows(varB, I, L);
    DispersionsFrom out;
    out.varSfromA = ((kS2 * VA).array() * X.array().square()).rowwise().sum().matrix();
    out.varSfromB = ((kS * Z).array().square() * VB.array()).rowwise().sum().matrix();
    out.varTfromA = ((kT.transpose() * X).array().square() * VA.array()).rowwise().sum().matrix();
    out.varTfromB = ((kT2.transpose() * VB).array() * Z.array().square()).rowwise().sum().matrix();
    if (M == 0) {
        out.varSfromU = out.varSfromV = Vector::Zero(I);
        out.varTfromU = out.varTfromV = Vector::Zero(J);
        return out;
    }
    const Matrix VU = as_rows(varU, I, M);
    const Matrix VV = as_rows(varV, J, M);
    const Matrix UD = p.U * p.D.asDiagonal();
    const Matrix VD = p.V * p.D.asDiagonal();
    out.varSfromU = ((kS * VD).array().square() * VU.array()).rowwise().sum().matrix();
    out.varSfromV = ((kS2 * VV).array() * UD.array().square()).rowwise().sum().matrix();
    out.varTfromU = ((kT2.transpose() * VU).array() * VD.array().square()).rowwise().sum().matrix();
    out.varTfromV = ((kT.transpose() * UD).array().square() * VV.array()).rowwise().sum().matrix();
    return out;
}

Matrix propagation_jacobian(const InferenceContext& ctx, const ConditionalInverses& ci, Edge edge) {
    const auto& p = ctx.params;
    const auto& X = ctx.cov.X;
    const auto& Z = ctx.cov.Z;
    const auto I = X.rows(), J = Z.rows(), K = X.cols(), L = Z.cols(), M = p.M();
    const Matrix UD = p.U * p.D.asDiagonal();
    const Matrix VD = p.V * p.D.asDiagonal();
    switch (edge) {
        case Edge::UtoA:
        case Edge::VtoA:
        case Edge::UtoB:
        case Edge::VtoB: {
            const Sensitivities s = ab_sensitivities(ctx, ci);
            if (edge == Edge::UtoA) {
                Matrix Jm = Matrix::Zero(J * K, I * M);
                for (Eigen::Index j = 0; j < J; ++j)
                    for (Eigen::Index i = 0; i < I; ++i)
                        for (Eigen::Index m = 0; m < M; ++m)
                            Jm.block(j * K, i * M + m, K, 1) = s.Qa[static_cast<size_t>(j)].col(i) * VD(j, m);
                return Jm;
            }
            if (edge == Edge::VtoA) {
                Matrix Jm = Matrix::Zero(J * K, J * M);
                for (Eigen::Index j = 0; j < J; ++j) Jm.block(j * K, j * M, K, M) = s.Qa[static_cast<size_t>(j)] * UD;
                return Jm;
            }
            if (edge == Edge::UtoB) {
                Matrix Jm = Matrix::Zero(I * L, I * M);
                for (Eigen::Index i = 0; i < I; ++i) Jm.block(i * L, i * M, L, M) = s.Rb[static_cast<size_t>(i)] * VD;
                return Jm;
            }
            Matrix Jm = Matrix::Zero(I * L, J * M);
            for (Eigen::Index i = 0; i < I; ++i)
                for (Eigen::Index j = 0; j < J; ++j)
                    for (Eigen::Index m = 0; m < M; ++m)
                        Jm.block(i * L, j * M + m, L, 1) = s.Rb[static_cast<size_t>(i)].col(j) * UD(i, m);
            return Jm;
        }
        case Edge::AtoC: {
            const Matrix G = c_gamma(ctx, ci);
            Matrix Jm(K * L, J * K);
            for (Eigen::Index j = 0; j < J; ++j) Jm.middleCols(j * K, K) = c_from_a_block(ctx, ci, G, j);
            return Jm;
        }
        case Edge::BtoC: {
            const Matrix G = c_gamma(ctx, ci);
            Matrix Jm(K * L, I * L);
            for (Eigen::Index i = 0; i < I; ++i) Jm.middleCols(i * L, L) = c_from_b_block(ctx, ci, G, i);
            return Jm;
        }
        default:
            break;
    }
    Matrix kS, kT;
    dispersion_kappas(ctx, ci, kS, kT);
    switch (edge) {
        case Edge::AtoS: {
            Matrix Jm(I, J * K);
            for (Eigen::Index j = 0; j < J; ++j)
                for (Eigen::Index k = 0; k < K; ++k) Jm.col(j * K + k) = kS.col(j).cwiseProduct(X.col(k));
            return Jm;
        }
        case Edge::BtoS: {
            Matrix Jm = Matrix::Zero(I, I * L);
            const Matrix kZ = kS * Z;
            for (Eigen::Index i = 0; i < I; ++i) Jm.block(i, i * L, 1, L) = kZ.row(i);
            return Jm;
        }
        case Edge::UtoS: {
            Matrix Jm = Matrix::Zero(I, I * M);
            const Matrix kV = kS * VD;
            for (Eigen::Index i = 0; i < I; ++i) Jm.block(i, i * M, 1, M) = kV.row(i);
            return Jm;
        }
        case Edge::VtoS: {
            Matrix Jm(I, J * M);
            for (Eigen::Index j = 0; j < J; ++j)
                for (Eigen::Index m = 0; m < M; ++m) Jm.col(j * M + m) = kS.col(j).cwiseProduct(UD.col(m));
            return Jm;
        }
        case Edge::AtoT: {
            Matrix Jm = Matrix::Zero(J, J * K);
            const Matrix kX = kT.transpose() * X;
            for (Eigen::Index j = 0; j < J; ++j) Jm.block(j, j * K, 1, K) = kX.row(j);
            return Jm;
        }
        case Edge::BtoT: {
            Matrix Jm(J, I * L);
            for (Eigen::Index i = 0; i < I; ++i)
                for (Eigen::Index l = 0; l < L; ++l)
                    Jm.col(i * L + l) = kT.row(i).transpose().cwiseProduct(Z.col(l));
            return Jm;
        }
        case Edge::UtoT: {
            Matrix Jm(J, I * M);
            for (Eigen::Index i = 0; i < I; ++i)
                for (Eigen::Index m = 0; m < M; ++m)
                    Jm.col(i * M + m) = kT.row(i).transpose().cwiseProduct(VD.col(m));
            return Jm;
        }
        case Edge::VtoT: {
            Matrix Jm = Matrix::Zero(J, J * M);
            const Matrix kU = kT.transpose() * UD;
            for (Eigen::Index j = 0; j < J; ++j) Jm.block(j, j * M, 1, M) = kU.row(j);
            return Jm;
        }
        default:
            break;
    }
    throw precondition_error("unknown propagation edge");
}

InferenceResult standard_errors(const Matrix& Y, const CovariateSet& cov, const GbmParams& params,
                                const PriorConfig& prior, int threads) {
    InferenceContext ctx = prepare_inference(Y, cov, params, prior, threads);
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L(), M = params.M();
    const ConditionalInverses ci = conditional_inverses(ctx);
    InferenceResult res;
    res.condA.resize(J * K);
    res.condB.resize(I * L);
    for (Eigen::Index j = 0; j < J; ++j) res.condA.segment(j * K, K) = ci.invFa[static_cast<size_t>(j)].diagonal();
    for (Eigen::Index i = 0; i < I; ++i) res.condB.segment(i * L, L) = ci.invFb[static_cast<size_t>(i)].diagonal();
    res.condC = ci.invFc.diagonal();
    res.condS = ci.invFs;
    res.condT = ci.invFt;

    const UVVariance uv = joint_uv_uncertainty(ctx, ci);
    res.varU = uv.varU;
    res.varV = uv.varV;
    res.ab = propagate_uv_to_ab(ctx, ci, uv.varU, uv.varV);
    const Vector varA = res.condA + res.ab.varAfromU + res.ab.varAfromV;
    const Vector varB = res.condB + res.ab.varBfromU + res.ab.varBfromV;
    res.c = propagate_ab_to_c(ctx, ci);
    const Vector varC = res.condC + res.c.varCfromA + res.c.varCfromB;
    res.disp = propagate_to_dispersions(ctx, ci, varA, varB, uv.varU, uv.varV);
    const Vector varS = res.condS + res.disp.varSfromA + res.disp.varSfromB + res.disp.varSfromU + res.disp.varSfromV;
    const Vector varT = res.condT + res.disp.varTfromA + res.disp.varTfromB + res.disp.varTfromU + res.disp.varTfromV;

    auto root = [](const Vector& v) { return v.cwiseMax(0.0).cwiseSqrt().eval(); };
    res.se_A = as_rows(root(varA), J, K);
    res.se_B = as_rows(root(varB), I, L);
    const Vector sc = root(varC);
    res.se_C = Eigen::Map<const Matrix>(sc.data(), K, L);
    res.se_U = M > 0 ? as_rows(root(uv.varU), I, M) : Matrix::Zero(I, 0);
    res.se_V = M > 0 ? as_rows(root(uv.varV), J, M) : Matrix::Zero(J, 0);
    res.se_S = root(varS);
    res.se_T = root(varT);
    auto check = [&](const Matrix& m, const char* name) {
        if (!m.allFinite() || (m.array() <= 0).any())
            res.warnings.push_back(std::string("standard errors for ") + name + " contain nonpositive or non-finite entries");
    };
    check(res.se_A, "A");
    check(res.se_B, "B");
    check(res.se_C, "C");
    check(res.se_U, "U");
    check(res.se_V, "V");
    check(res.se_S, "S");
    check(res.se_T, "T");
    res.warnings.insert(res.warnings.begin(), ctx.warnings.begin(), ctx.warnings.end());
    return res;
}

WaldResult wald_tests(const Vector& est, const Vector& se, double level) {
    if (est.size() != se.size()) throw shape_error("estimates and standard errors differ in length");
    if (!(level > 0 && level < 1)) throw domain_error("level must lie in (0, 1)");
    if ((se.array() <= 0).any() || !se.allFinite()) throw domain_error("standard errors must be positive");
    const boost::math::normal_distribution<double> nd;
    const double zc = boost::math::quantile(nd, 1.0 - (1.0 - level) / 2.0);
    WaldResult w;
    w.z = est.cwiseQuotient(se);
    w.p_values = w.z.unaryExpr([](double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); });
    w.ci_lower = est - zc * se;
    w.ci_upper = est + zc * se;
    return w;
}

Eigen::Index oracle_parameter_count(const CovariateSet& cov, Eigen::Index M) {
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L();
    return J * K + I * L + K * L + M + I * M + J * M;
}

namespace {
struct OracleLayout {
    Eigen::Index a = -1, b = -1, c = -1, d = -1, u = -1, v = -1, n = 0;
};

OracleLayout layout(const CovariateSet& cov, Eigen::Index M, const OracleBlocks& blk) {
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L();
    OracleLayout o;
    auto take = [&](bool on, Eigen::Index size, Eigen::Index& off) {
        if (on) {
            off = o.n;
            o.n += size;
        }
    };
    take(blk.a, J * K, o.a);
    take(blk.b, I * L, o.b);
    take(blk.c, K * L, o.c);
    take(blk.d && M > 0, M, o.d);
    take(blk.u && M > 0, I * M, o.u);
    take(blk.v && M > 0, J * M, o.v);
    return o;
}

// Sparse gradient of η_ij with respect to the included parameters.
void eta_gradient(const OracleLayout& o, const CovariateSet& cov, const GbmParams& p, Eigen::Index i, Eigen::Index j,
                  std::vector<std::pair<Eigen::Index, double>>& g) {
    const auto K = cov.K(), L = cov.L(), M = p.M();
    g.clear();
    if (o.a >= 0)
        for (Eigen::Index k = 0; k < K; ++k) g.emplace_back(o.a + j * K + k, cov.X(i, k));
    if (o.b >= 0)
        for (Eigen::Index l = 0; l < L; ++l) g.emplace_back(o.b + i * L + l, cov.Z(j, l));
    if (o.c >= 0)
        for (Eigen::Index l = 0; l < L; ++l)
            for (Eigen::Index k = 0; k < K; ++k) g.emplace_back(o.c + l * K + k, cov.X(i, k) * cov.Z(j, l));
    if (o.d >= 0)
        for (Eigen::Index m = 0; m < M; ++m) g.emplace_back(o.d + m, p.U(i, m) * p.V(j, m));
    if (o.u >= 0)
        for (Eigen::Index m = 0; m < M; ++m) g.emplace_back(o.u + i * M + m, p.D(m) * p.V(j, m));
    if (o.v >= 0)
        for (Eigen::Index m = 0; m < M; ++m) g.emplace_back(o.v + j * M + m, p.U(i, m) * p.D(m));
}
}  // namespace

OracleResult full_augmented_fisher_oracle(const Matrix& Y, const CovariateSet& cov, const GbmParams& params,
                                          const PriorConfig& prior, OracleBlocks blk) {
    check_dimensions(params, cov);
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L(), M = params.M();
    const auto total = oracle_parameter_count(cov, M);
    if (total > kOracleMaxParams)
        throw size_error("full Fisher oracle limited to " + std::to_string(kOracleMaxParams) + " parameters, got " +
                         std::to_string(total));
    const NbWorkspace ws = compute_workspace(Y, compute_eta(params, cov), params.S, params.T, params.omega);
    const OracleLayout o = layout(cov, M, blk);
    Matrix F = Matrix::Zero(o.n, o.n);
    std::vector<std::pair<Eigen::Index, double>> g;
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index i = 0; i < I; ++i) {
            eta_gradient(o, cov, params, i, j, g);
            const double w = ws.W(i, j);
            for (const auto& [r, gr] : g)
                for (const auto& [c, gc] : g) F(r, c) += w * gr * gc;
        }
    auto add_prior = [&](Eigen::Index off, Eigen::Index size, double lambda) {
        if (off >= 0) F.diagonal().segment(off, size).array() += lambda;
    };
    add_prior(o.a, J * K, prior.lambda_a);
    add_prior(o.b, I * L, prior.lambda_b);
    add_prior(o.c, K * L, prior.lambda_c);
    add_prior(o.d, M, prior.lambda_d);
    add_prior(o.u, I * M, prior.lambda_u);
    add_prior(o.v, J * M, prior.lambda_v);

    std::vector<Matrix> rows;
    if (o.a >= 0) {
        Matrix Ja = Matrix::Zero(K * L, o.n);
        for (Eigen::Index l = 0; l < L; ++l)
            for (Eigen::Index k = 0; k < K; ++k)
                for (Eigen::Index j = 0; j < J; ++j) Ja(l * K + k, o.a + j * K + k) = cov.Z(j, l);
        rows.push_back(Ja);
    }
    if (o.b >= 0) {
        Matrix Jb = Matrix::Zero(K * L, o.n);
        for (Eigen::Index k = 0; k < K; ++k)
            for (Eigen::Index l = 0; l < L; ++l)
                for (Eigen::Index i = 0; i < I; ++i) Jb(k * L + l, o.b + i * L + l) = cov.X(i, k);
        rows.push_back(Jb);
    }
    if (M > 0 && (o.u >= 0 || o.v >= 0)) {
        const ConstraintJacobians cj = constraint_jacobians(params, cov);
        if (o.u >= 0) {
            const Matrix Ju = unique_constraint_rows(cj.Ju, M * K, M);
            Matrix Jr = Matrix::Zero(Ju.rows(), o.n);
            Jr.middleCols(o.u, I * M) = Ju;
            rows.push_back(Jr);
        }
        if (o.v >= 0) {
            const Matrix Jv = unique_constraint_rows(cj.Jv, M * L, M);
            Matrix Jr = Matrix::Zero(Jv.rows(), o.n);
            Jr.middleCols(o.v, J * M) = Jv;
            rows.push_back(Jr);
        }
    }
    Eigen::Index nc = 0;
    for (const auto& r : rows) nc += r.rows();
    OracleResult res;
    res.n_params = o.n;
    res.bordered = Matrix::Zero(o.n + nc, o.n + nc);
    res.bordered.topLeftCorner(o.n, o.n) = F;
    Eigen::Index off = o.n;
    for (const auto& r : rows) {
        res.bordered.block(off, 0, r.rows(), o.n) = r;
        res.bordered.block(0, off, o.n, r.rows()) = r.transpose();
        off += r.rows();
    }
    Matrix rhs = Matrix::Zero(o.n + nc, o.n);
    rhs.topRows(o.n).setIdentity();
    const Matrix inv = solve_or_throw(res.bordered, rhs, "full constraint-augmented Fisher system");
    const Vector diag = inv.topRows(o.n).diagonal();
    auto pick = [&](Eigen::Index start, Eigen::Index size) {
        return start >= 0 ? Vector(diag.segment(start, size)) : Vector();
    };
    res.varA = pick(o.a, J * K);
    res.varB = pick(o.b, I * L);
    res.varC = pick(o.c, K * L);
    res.varD = pick(o.d, M);
    res.varU = pick(o.u, I * M);
    res.varV = pick(o.v, J * M);
    return res;
}

Matrix dispersion_cross_information(const Matrix& mu, const Matrix& r, const CovariateSet& cov,
                                    const GbmParams& params) {
    const auto I = cov.I(), J = cov.J();
    const OracleLayout o = layout(cov, params.M(), OracleBlocks{});
    // E[∂²L_ij/∂s_i∂η_ij] by direct summation over the pmf.
    Matrix m = Matrix::Zero(I, J);
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index i = 0; i < I; ++i) {
            const double mu_ = mu(i, j), r_ = r(i, j);
            const double sd = std::sqrt(mu_ + mu_ * mu_ / r_);
            const auto ymax = static_cast<long>(mu_ + 40.0 * sd + 50.0);
            double acc = 0.0;
            for (long y = 0; y <= ymax; ++y) {
                const double pmf = std::exp(nb_log_pmf(static_cast<double>(y), mu_, r_));
                acc += pmf * (-mu_ * r_ * (static_cast<double>(y) - mu_) / ((r_ + mu_) * (r_ + mu_)));
            }
            m(i, j) = acc;
        }
    Matrix out = Matrix::Zero(I + J + 1, o.n);
    std::vector<std::pair<Eigen::Index, double>> g;
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index i = 0; i < I; ++i) {
            eta_gradient(o, cov, params, i, j, g);
            for (const auto& [c, gc] : g) {
                out(i, c) += m(i, j) * gc;
                out(I + j, c) += m(i, j) * gc;
                out(I + J, c) += m(i, j) * gc;
            }
        }
    return out;
}

}  // namespace gbm
