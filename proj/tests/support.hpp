#pragma once

#include "gbm/estimation.hpp"
#include "gbm/inference.hpp"
#include "gbm/linalg.hpp"
#include "gbm/metrics.hpp"
#include "gbm/model.hpp"
#include "gbm/nb.hpp"
#include "gbm/rng.hpp"
#include "gbm/simulation.hpp"

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <functional>

namespace gbm::test {

inline Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sd = 1.0) {
    boost::random::normal_distribution<double> n(0.0, sd);
    Matrix m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = n(rng);
    return m;
}

inline double uniform(Rng& rng, double lo, double hi) {
    return boost::random::uniform_real_distribution<double>(lo, hi)(rng);
}

// Intercept plus Gaussian columns centered and scaled to unit mean square.
inline Matrix design(Rng& rng, Eigen::Index n, Eigen::Index p) {
    Matrix X(n, p);
    X.col(0).setOnes();
    if (p > 1) {
        Matrix G = gaussian(rng, n, p - 1);
        for (Eigen::Index k = 0; k < p - 1; ++k) {
            G.col(k).array() -= G.col(k).mean();
            G.col(k) /= std::sqrt(G.col(k).squaredNorm() / static_cast<double>(n));
        }
        X.rightCols(p - 1) = G;
    }
    return X;
}

inline CovariateSet random_covariates(Rng& rng, Eigen::Index I, Eigen::Index J, Eigen::Index K, Eigen::Index L) {
    return make_covariates(design(rng, I, K), design(rng, J, L));
}

// Orthogonal projector onto the complement of span(X), built from a QR factorization.
inline Matrix complement_projector(const Matrix& X) {
    Eigen::HouseholderQR<Matrix> qr(X);
    const Matrix Q = qr.householderQ() * Matrix::Identity(X.rows(), X.cols());
    return Matrix::Identity(X.rows(), X.rows()) - Q * Q.transpose();
}

// M orthonormal columns orthogonal to X, first nonzero entry of each column positive.
inline Matrix orthonormal_complement(Rng& rng, const Matrix& X, Eigen::Index M) {
    const Matrix N = complement_projector(X) * gaussian(rng, X.rows(), M);
    Eigen::HouseholderQR<Matrix> qr(N);
    Matrix Q = qr.householderQ() * Matrix::Identity(X.rows(), M);
    for (Eigen::Index m = 0; m < M; ++m) {
        Eigen::Index i = 0;
        while (i < Q.rows() && Q(i, m) == 0) ++i;
        if (i < Q.rows() && Q(i, m) < 0) Q.col(m) *= -1;
    }
    return Q;
}

// A parameter state satisfying every identifiability constraint, built without the library's projections.
inline GbmParams random_constrained(Rng& rng, const CovariateSet& cov, Eigen::Index M, double scale = 1.0) {
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L();
    GbmParams p = GbmParams::zeros(I, J, K, L, M);
    p.A = complement_projector(cov.Z) * gaussian(rng, J, K, scale);
    p.B = complement_projector(cov.X) * gaussian(rng, I, L, scale);
    p.C = gaussian(rng, K, L, scale);
    for (Eigen::Index m = 0; m < M; ++m) p.D(m) = scale * (2.0 + static_cast<double>(M - m));
    p.U = orthonormal_complement(rng, cov.X, M);
    p.V = orthonormal_complement(rng, cov.Z, M);
    p.S = gaussian(rng, I, 1, 0.3).col(0);
    p.S.array() -= std::log(p.S.array().exp().mean());
    p.T = gaussian(rng, J, 1, 0.3).col(0);
    p.T.array() -= std::log(p.T.array().exp().mean());
    p.omega = uniform(rng, -2.0, 0.0);
    return p;
}

// Every block filled with Gaussian noise; no constraints hold.
inline GbmParams random_unconstrained(Rng& rng, const CovariateSet& cov, Eigen::Index M, double scale = 1.0) {
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L();
    GbmParams p = GbmParams::zeros(I, J, K, L, M);
    p.A = gaussian(rng, J, K, scale);
    p.B = gaussian(rng, I, L, scale);
    p.C = gaussian(rng, K, L, scale);
    if (M > 0) p.D = gaussian(rng, M, 1, scale).col(0).cwiseAbs().array() + 1.0;
    p.U = gaussian(rng, I, M, scale);
    p.V = gaussian(rng, J, M, scale);
    p.S = gaussian(rng, I, 1, 0.5).col(0);
    p.T = gaussian(rng, J, 1, 0.5).col(0);
    p.omega = uniform(rng, -1.0, 1.0);
    return p;
}

// Scalar evaluation of the linear predictor for one entry.
inline double eta_entry(const GbmParams& p, const CovariateSet& cov, Eigen::Index i, Eigen::Index j) {
    double s = 0;
    for (Eigen::Index k = 0; k < cov.K(); ++k) s += cov.X(i, k) * p.A(j, k);
    for (Eigen::Index l = 0; l < cov.L(); ++l) s += p.B(i, l) * cov.Z(j, l);
    for (Eigen::Index k = 0; k < cov.K(); ++k)
        for (Eigen::Index l = 0; l < cov.L(); ++l) s += cov.X(i, k) * p.C(k, l) * cov.Z(j, l);
    for (Eigen::Index m = 0; m < p.M(); ++m) s += p.U(i, m) * p.D(m) * p.V(j, m);
    return s;
}

inline Matrix eta_loop(const GbmParams& p, const CovariateSet& cov) {
    Matrix e(cov.I(), cov.J());
    for (Eigen::Index i = 0; i < cov.I(); ++i)
        for (Eigen::Index j = 0; j < cov.J(); ++j) e(i, j) = eta_entry(p, cov, i, j);
    return e;
}

// Log-likelihood of Y with all blocks, evaluated from scratch.
inline double loglik(const Matrix& Y, const GbmParams& p, const CovariateSet& cov) {
    double s = 0;
    for (Eigen::Index i = 0; i < cov.I(); ++i)
        for (Eigen::Index j = 0; j < cov.J(); ++j)
            s += nb_log_pmf(Y(i, j), std::exp(eta_entry(p, cov, i, j)), std::exp(-p.S(i) - p.T(j) - p.omega));
    return s;
}

inline Matrix nb_draws(Rng& rng, const Matrix& mu, const Matrix& r) {
    return generate_outcomes(mu, r, Outcome::NB, rng).as_real();
}

inline double central_difference(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2 * h);
}

inline double second_difference(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - 2 * f(x) + f(x - h)) / (h * h);
}

inline double rel_err(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max(std::abs(b), floor);
}

// max |a − b| / max |b|.
inline double max_rel(const Matrix& a, const Matrix& b) {
    const double s = b.cwiseAbs().maxCoeff();
    return (a - b).cwiseAbs().maxCoeff() / std::max(s, 1e-300);
}

inline double max_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

// A small simulated NB data set with a fitted model, for inference tests.
struct Fitted {
    Matrix Y;
    CovariateSet cov;
    GbmParams params;
    PriorConfig prior;
};

inline Fitted fitted_instance(std::uint64_t seed, Eigen::Index I, Eigen::Index J, Eigen::Index K, Eigen::Index L,
                              Eigen::Index M, int max_iter = 50) {
    SimScheme s;
    s.I = I, s.J = J, s.K = K, s.L = L, s.M = M, s.seed = seed;
    const SimData d = simulate(s);
    FitConfig cfg;
    cfg.max_iter = max_iter;
    const FitResult fr = fit(d.Y, d.truth.cov, M, PriorConfig{}, cfg);
    return {d.Y.as_real(), fr.cov, fr.params, PriorConfig{}};
}

// One-step Fisher-scoring maps θ + F(θ)⁻¹ g(θ), evaluated from scratch with scalar loops.
struct OneStep {
    Vector A, B, C, S, T;  // vec Aᵀ, vec Bᵀ, vec C, S, T
};

inline OneStep one_step_maps(const Matrix& Y, const CovariateSet& cov, const GbmParams& p, const PriorConfig& prior) {
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L();
    Matrix mu(I, J), r(I, J), w(I, J), e(I, J);
    for (Eigen::Index i = 0; i < I; ++i)
        for (Eigen::Index j = 0; j < J; ++j) {
            mu(i, j) = std::exp(eta_entry(p, cov, i, j));
            r(i, j) = std::exp(-p.S(i) - p.T(j) - p.omega);
            w(i, j) = r(i, j) * mu(i, j) / (r(i, j) + mu(i, j));
            e(i, j) = (Y(i, j) - mu(i, j)) * r(i, j) / (r(i, j) + mu(i, j));
        }
    OneStep o;
    o.A.resize(J * K);
    for (Eigen::Index j = 0; j < J; ++j) {
        Matrix F = prior.lambda_a * Matrix::Identity(K, K);
        Vector g = Vector::Zero(K);
        for (Eigen::Index i = 0; i < I; ++i) {
            F += w(i, j) * cov.X.row(i).transpose() * cov.X.row(i);
            g += e(i, j) * cov.X.row(i).transpose();
        }
        o.A.segment(j * K, K) = p.A.row(j).transpose() + F.ldlt().solve(g);
    }
    o.B.resize(I * L);
    for (Eigen::Index i = 0; i < I; ++i) {
        Matrix F = prior.lambda_b * Matrix::Identity(L, L);
        Vector g = Vector::Zero(L);
        for (Eigen::Index j = 0; j < J; ++j) {
            F += w(i, j) * cov.Z.row(j).transpose() * cov.Z.row(j);
            g += e(i, j) * cov.Z.row(j).transpose();
        }
        o.B.segment(i * L, L) = p.B.row(i).transpose() + F.ldlt().solve(g);
    }
    {
        Matrix F = prior.lambda_c * Matrix::Identity(K * L, K * L);
        Vector g = Vector::Zero(K * L);
        for (Eigen::Index i = 0; i < I; ++i)
            for (Eigen::Index j = 0; j < J; ++j) {
                Vector d(K * L);
                for (Eigen::Index l = 0; l < L; ++l)
                    for (Eigen::Index k = 0; k < K; ++k) d(l * K + k) = cov.X(i, k) * cov.Z(j, l);
                F += w(i, j) * d * d.transpose();
                g += e(i, j) * d;
            }
        o.C = Eigen::Map<const Vector>(p.C.data(), K * L) + F.ldlt().solve(g);
    }
    const DispersionDerivs dd = dispersion_derivatives(Y, mu, r);
    o.S.resize(I);
    for (Eigen::Index i = 0; i < I; ++i) {
        const double g = -prior.lambda_s * (p.S(i) - prior.m_s) + dd.delta.row(i).sum();
        o.S(i) = p.S(i) + g / std::abs(prior.lambda_s - dd.delta_prime.row(i).sum());
    }
    o.T.resize(J);
    for (Eigen::Index j = 0; j < J; ++j) {
        const double g = -prior.lambda_t * (p.T(j) - prior.m_t) + dd.delta.col(j).sum();
        o.T(j) = p.T(j) + g / std::abs(prior.lambda_t - dd.delta_prime.col(j).sum());
    }
    return o;
}

enum class Block { A, B, U, V };

inline double& coordinate(GbmParams& p, Block b, Eigen::Index idx) {
    switch (b) {
        case Block::A: return p.A(idx / p.A.cols(), idx % p.A.cols());
        case Block::B: return p.B(idx / p.B.cols(), idx % p.B.cols());
        case Block::U: return p.U(idx / p.U.cols(), idx % p.U.cols());
        default: return p.V(idx / p.V.cols(), idx % p.V.cols());
    }
}

struct EdgeInfo {
    Edge edge;
    Block source;
    char target;  // 'A', 'B', 'C', 'S', 'T'
    const char* name;
};

inline const std::vector<EdgeInfo>& all_edges() {
    static const std::vector<EdgeInfo> e = {
        {Edge::UtoA, Block::U, 'A', "U->A"}, {Edge::VtoA, Block::V, 'A', "V->A"}, {Edge::UtoB, Block::U, 'B', "U->B"},
        {Edge::VtoB, Block::V, 'B', "V->B"}, {Edge::AtoC, Block::A, 'C', "A->C"}, {Edge::BtoC, Block::B, 'C', "B->C"},
        {Edge::AtoS, Block::A, 'S', "A->S"}, {Edge::BtoS, Block::B, 'S', "B->S"}, {Edge::UtoS, Block::U, 'S', "U->S"},
        {Edge::VtoS, Block::V, 'S', "V->S"}, {Edge::AtoT, Block::A, 'T', "A->T"}, {Edge::BtoT, Block::B, 'T', "B->T"},
        {Edge::UtoT, Block::U, 'T', "U->T"}, {Edge::VtoT, Block::V, 'T', "V->T"}};
    return e;
}

inline Vector pick_target(const OneStep& o, char t) {
    switch (t) {
        case 'A': return o.A;
        case 'B': return o.B;
        case 'C': return o.C;
        case 'S': return o.S;
        default: return o.T;
    }
}

// Central finite-difference column of ∂ĥ_target/∂(source coordinate).
inline Vector fd_jacobian_column(const Matrix& Y, const CovariateSet& cov, const GbmParams& p, const PriorConfig& prior,
                                 const EdgeInfo& e, Eigen::Index idx, double h = 1e-5) {
    GbmParams pp = p, pm = p;
    coordinate(pp, e.source, idx) += h;
    coordinate(pm, e.source, idx) -= h;
    return (pick_target(one_step_maps(Y, cov, pp, prior), e.target) -
            pick_target(one_step_maps(Y, cov, pm, prior), e.target)) /
           (2 * h);
}

inline Eigen::Index source_size(const GbmParams& p, Block b) {
    switch (b) {
        case Block::A: return p.A.size();
        case Block::B: return p.B.size();
        case Block::U: return p.U.size();
        default: return p.V.size();
    }
}

// Constraint Jacobian rows for XᵀU = 0 and the upper triangle of UᵀU = I, built entry by entry.
inline Matrix dense_constraint_jacobian(const Matrix& X, const Matrix& U) {
    const auto I = X.rows(), K = X.cols(), M = U.cols();
    Matrix J = Matrix::Zero(K * M + M * (M + 1) / 2, I * M);
    Eigen::Index row = 0;
    for (Eigen::Index k = 0; k < K; ++k)
        for (Eigen::Index m = 0; m < M; ++m, ++row)
            for (Eigen::Index i = 0; i < I; ++i) J(row, i * M + m) = X(i, k);
    for (Eigen::Index a = 0; a < M; ++a)
        for (Eigen::Index b = a; b < M; ++b, ++row)
            for (Eigen::Index i = 0; i < I; ++i) {
                J(row, i * M + a) += U(i, b);
                J(row, i * M + b) += U(i, a);
            }
    return J;
}

// Diagonal of the (U, V) block of the inverse of the bordered Fisher matrix, by dense inversion.
inline Vector dense_uv_variances(const Matrix& Y, const CovariateSet& cov, const GbmParams& p, const PriorConfig& prior) {
    const auto I = cov.I(), J = cov.J(), M = p.M();
    const NbWorkspace ws = compute_workspace(Y, compute_eta(p, cov), p.S, p.T, p.omega);
    const Matrix DU = p.U * p.D.asDiagonal(), DV = p.V * p.D.asDiagonal();
    const Matrix Ju = dense_constraint_jacobian(cov.X, p.U), Jv = dense_constraint_jacobian(cov.Z, p.V);
    const auto n = I * M + J * M, cu = Ju.rows(), cv = Jv.rows();
    Matrix Bd = Matrix::Zero(n + cu + cv, n + cu + cv);
    for (Eigen::Index i = 0; i < I; ++i)
        for (Eigen::Index j = 0; j < J; ++j) {
            const double w = ws.W(i, j);
            Bd.block(i * M, i * M, M, M) += w * DV.row(j).transpose() * DV.row(j);
            Bd.block(I * M + j * M, I * M + j * M, M, M) += w * DU.row(i).transpose() * DU.row(i);
            Bd.block(i * M, I * M + j * M, M, M) = w * DV.row(j).transpose() * DU.row(i);
            Bd.block(I * M + j * M, i * M, M, M) = w * DU.row(i).transpose() * DV.row(j);
        }
    Bd.diagonal().head(I * M).array() += prior.lambda_u;
    Bd.diagonal().segment(I * M, J * M).array() += prior.lambda_v;
    Bd.block(n, 0, cu, I * M) = Ju;
    Bd.block(0, n, I * M, cu) = Ju.transpose();
    Bd.block(n + cu, I * M, cv, J * M) = Jv;
    Bd.block(I * M, n + cu, J * M, cv) = Jv.transpose();
    return Bd.inverse().diagonal().head(n);
}

// Direct O(nk) evaluations of the windowed metrics in extended precision.
inline std::vector<long double> naive_wma_ld(const Vector& x, const Vector& w, Eigen::Index k) {
    const Eigen::Index n = x.size(), h = k / 2;
    std::vector<long double> out(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        long double num = 0, den = 0;
        for (Eigen::Index j = std::max<Eigen::Index>(0, i - h); j <= std::min(n - 1, i + h); ++j) {
            num += static_cast<long double>(w(j)) * x(j);
            den += w(j);
        }
        out[static_cast<size_t>(i)] = num / den;
    }
    return out;
}

inline Vector naive_wma(const Vector& x, const Vector& w, Eigen::Index k) {
    const auto ld = naive_wma_ld(x, w, k);
    Vector out(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = static_cast<double>(ld[static_cast<size_t>(i)]);
    return out;
}

inline double naive_lrse(const Vector& x, const Vector& w, Eigen::Index k) {
    const Eigen::Index n = x.size(), h = k / 2;
    const auto xb = naive_wma_ld(x, w, k);
    long double total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        long double sw = 0;
        Eigen::Index cnt = 0;
        for (Eigen::Index j = std::max<Eigen::Index>(0, i - h); j <= std::min(n - 1, i + h); ++j, ++cnt) sw += w(j);
        const long double t = w(i) / (sw / static_cast<long double>(cnt)) * (x(i) - xb[static_cast<size_t>(i)]);
        total += t * t;
    }
    return static_cast<double>(std::sqrt(total / static_cast<long double>(n)));
}

inline double naive_wmad(const Vector& x, const Vector& w, Eigen::Index k) {
    const auto xb = naive_wma_ld(x, w, k);
    std::vector<long double> d;
    for (size_t i = 0; i + 1 < xb.size(); ++i) d.push_back(static_cast<long double>(k) * std::abs(xb[i + 1] - xb[i]));
    std::sort(d.begin(), d.end());
    const size_t m = d.size();
    return static_cast<double>(m % 2 ? d[m / 2] : 0.5L * (d[m / 2 - 1] + d[m / 2]));
}

}  // namespace gbm::test
