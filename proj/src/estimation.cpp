#include "gbm/estimation.hpp"

#include "gbm/linalg.hpp"
#include "gbm/model.hpp"
#include "gbm/rng.hpp"

#include <boost/random/normal_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace gbm {

namespace {
constexpr double kMinD2 = 1e-12;

std::string fmt_index(const char* what, Eigen::Index i) {
    std::ostringstream os;
    os << what << " " << i + 1;
    return os.str();
}

// Xᵀ diag(w) X
Matrix weighted_gram(const Matrix& X, const Eigen::Ref<const Vector>& w) {
    return X.transpose() * w.asDiagonal() * X;
}
}  // namespace

FitState::FitState(Matrix Y_, CovariateSet cov_, GbmParams params_, PriorConfig prior_, FitConfig config_)
    : Y(std::move(Y_)), cov(std::move(cov_)), params(std::move(params_)), prior(prior_), config(config_) {
    adapt.rho_s = Vector::Constant(Y.rows(), config.rho);
    adapt.rho_t = Vector::Constant(Y.cols(), config.rho);
}

NbWorkspace FitState::workspace() {
    NbWorkspace ws = compute_workspace(Y, compute_eta(params, cov), params.S, params.T, params.omega);
    clamp_events += ws.clamp_events;
    return ws;
}

Matrix standardize_covariates(const Matrix& Xraw) {
    if (Xraw.cols() < 1 || Xraw.rows() < 1) throw shape_error("covariate matrix is empty");
    if ((Xraw.col(0).array() != 1.0).any()) throw precondition_error("column 1 must be all ones");
    Matrix X = Xraw;
    const double n = static_cast<double>(X.rows());
    for (Eigen::Index k = 1; k < X.cols(); ++k) {
        X.col(k).array() -= X.col(k).mean();
        const double ms = X.col(k).squaredNorm() / n;
        if (!(ms > 1e-24 * std::max(1.0, Xraw.col(k).squaredNorm() / n)))
            throw Error(ErrorKind::Precondition,
                        "degenerate covariate: column " + std::to_string(k + 1) + " has zero variance");
        X.col(k) /= std::sqrt(ms);
    }
    return X;
}

CovariateSet preprocess_covariates(const Matrix& Xraw, const Matrix& Zraw, bool standardize) {
    if (!standardize) return make_covariates(Xraw, Zraw);
    return make_covariates(standardize_covariates(Xraw), standardize_covariates(Zraw));
}

Vector bounded_fisher_step(const Vector& beta, const Vector& grad, const Matrix& fisher,
                           const Vector& lambda, double rho) {
    const auto n = beta.size();
    if (grad.size() != n || fisher.rows() != n || fisher.cols() != n || lambda.size() != n)
        throw shape_error("bounded_fisher_step dimensions");
    if (!grad.allFinite() || !fisher.allFinite()) throw numeric_error("non-finite gradient or Fisher matrix");
    if (n == 0) return beta;
    Matrix F = fisher;
    F.diagonal() += lambda;
    const Vector xi = spd_solve(F, grad - lambda.cwiseProduct(beta), "regularized Fisher step");
    const double norm = xi.norm();
    const double cap = rho * std::sqrt(static_cast<double>(n));
    const double scale = norm > cap ? cap / norm : 1.0;
    return beta + scale * xi;
}

Vector bounded_fisher_step(const Vector& beta, const Vector& grad, const Matrix& fisher, double lambda,
                           double rho) {
    return bounded_fisher_step(beta, grad, fisher, Vector::Constant(beta.size(), lambda), rho);
}

void project_a(GbmParams& p, const CovariateSet& cov) {
    const Matrix Q = cov.Zplus * p.A;  // L×K
    p.A.noalias() -= cov.Z * Q;
    p.C += Q.transpose();
}

void project_b(GbmParams& p, const CovariateSet& cov) {
    const Matrix Q = cov.Xplus * p.B;  // K×L
    p.B.noalias() -= cov.X * Q;
    p.C += Q;
}

namespace {
bool degenerate(const Vector& d) {
    for (Eigen::Index m = 0; m < d.size(); ++m) {
        if (d(m) <= 1e-300) return true;
        if (m + 1 < d.size() && d(m) - d(m + 1) <= 1e-10 * d(m)) return true;
    }
    return false;
}

bool orthonormal(const Matrix& V) {
    const auto M = V.cols();
    return (V.transpose() * V - Matrix::Identity(M, M)).cwiseAbs().maxCoeff() < 1e-10;
}

// (U', D', V') with U'D'V'ᵀ = G Fᵀ; cheap when F has orthonormal columns.
void refactor(const Matrix& G, const Matrix& F, Matrix& Gleft, Vector& d, Matrix& Fright) {
    const auto M = G.cols();
    if (orthonormal(F)) {
        CompactSvd s = compact_svd(G, M);
        Gleft = s.U;
        d = s.d;
        Fright = F * s.V;
    } else {
        CompactSvd s = compact_svd(G * F.transpose(), M);
        Gleft = s.U;
        d = s.d;
        Fright = s.V;
    }
}
}  // namespace

bool project_g(GbmParams& p, const CovariateSet& cov, const Matrix& G) {
    const Matrix Q = cov.Xplus * G;  // K×M
    const Matrix G0 = G - cov.X * Q;
    p.A.noalias() += p.V * Q.transpose();
    project_a(p, cov);
    refactor(G0, p.V, p.U, p.D, p.V);
    return !degenerate(p.D);
}

bool project_h(GbmParams& p, const CovariateSet& cov, const Matrix& H) {
    const Matrix Q = cov.Zplus * H;  // L×M
    const Matrix H0 = H - cov.Z * Q;
    p.B.noalias() += p.U * Q.transpose();
    project_b(p, cov);
    refactor(H0, p.U, p.V, p.D, p.U);
    return !degenerate(p.D);
}

void project_s(GbmParams& p) {
    const double c = std::log(p.S.array().exp().mean());
    p.S.array() -= c;
    p.omega += c;
}

void project_t(GbmParams& p) {
    const double c = std::log(p.T.array().exp().mean());
    p.T.array() -= c;
    p.omega += c;
}

double log_prior(const GbmParams& p, const PriorConfig& pr) {
    double q = pr.lambda_a * p.A.squaredNorm() + pr.lambda_b * p.B.squaredNorm() +
               pr.lambda_c * p.C.squaredNorm() + pr.lambda_d * p.D.squaredNorm() +
               pr.lambda_u * p.U.squaredNorm() + pr.lambda_v * p.V.squaredNorm() +
               pr.lambda_s * (p.S.array() - pr.m_s).square().sum() +
               pr.lambda_t * (p.T.array() - pr.m_t).square().sum();
    return -0.5 * q;
}

double log_posterior(const Matrix& Y, const CovariateSet& cov, const GbmParams& p, const PriorConfig& prior) {
    const NbWorkspace ws = compute_workspace(Y, compute_eta(p, cov), p.S, p.T, p.omega);
    return nb_log_likelihood(Y, ws.mu, ws.r) + log_prior(p, prior);
}

void update_a(FitState& st) {
    const NbWorkspace ws = st.workspace();
    auto& p = st.params;
    const auto& X = st.cov.X;
    parallel_for(p.A.rows(), st.config.threads, [&](Eigen::Index j) {
        const Matrix F = weighted_gram(X, ws.W.col(j));
        const Vector g = X.transpose() * ws.E.col(j);
        p.A.row(j) = bounded_fisher_step(p.A.row(j).transpose(), g, F, st.prior.lambda_a, st.config.rho);
    });
    project_a(p, st.cov);
}

void update_b(FitState& st) {
    const NbWorkspace ws = st.workspace();
    auto& p = st.params;
    const auto& Z = st.cov.Z;
    parallel_for(p.B.rows(), st.config.threads, [&](Eigen::Index i) {
        const Matrix F = weighted_gram(Z, ws.W.row(i).transpose());
        const Vector g = Z.transpose() * ws.E.row(i).transpose();
        p.B.row(i) = bounded_fisher_step(p.B.row(i).transpose(), g, F, st.prior.lambda_b, st.config.rho);
    });
    project_b(p, st.cov);
}

void update_c(FitState& st) {
    const NbWorkspace ws = st.workspace();
    auto& p = st.params;
    const auto& X = st.cov.X;
    const auto& Z = st.cov.Z;
    const auto K = X.cols(), L = Z.cols();
    Matrix F = Matrix::Zero(K * L, K * L);
    for (Eigen::Index j = 0; j < Z.rows(); ++j) {
        const Matrix G = weighted_gram(X, ws.W.col(j));
        for (Eigen::Index l2 = 0; l2 < L; ++l2)
            for (Eigen::Index l1 = 0; l1 < L; ++l1)
                F.block(l1 * K, l2 * K, K, K) += Z(j, l1) * Z(j, l2) * G;
    }
    const Matrix grad = X.transpose() * ws.E * Z;
    const Vector c = Eigen::Map<const Vector>(p.C.data(), K * L);
    const Vector g = Eigen::Map<const Vector>(grad.data(), K * L);
    const Vector cnew = bounded_fisher_step(c, g, F, st.prior.lambda_c, st.config.rho);
    p.C = Eigen::Map<const Matrix>(cnew.data(), K, L);
}

void update_d(FitState& st) {
    auto& p = st.params;
    const auto M = p.M();
    if (M == 0) return;
    const NbWorkspace ws = st.workspace();
    Matrix F = Matrix::Zero(M, M);
    for (Eigen::Index j = 0; j < p.V.rows(); ++j) {
        const Matrix UV = p.U * p.V.row(j).asDiagonal();
        F.noalias() += UV.transpose() * ws.W.col(j).asDiagonal() * UV;
    }
    p.D = bounded_fisher_step(p.D, loglik_gradients(ws, p, st.cov).D, F, st.prior.lambda_d, st.config.rho);
}

namespace {
Vector induced_precision(FitState& st, double lambda, const char* which) {
    const auto& D = st.params.D;
    Vector prec(D.size());
    for (Eigen::Index m = 0; m < D.size(); ++m) {
        double d2 = D(m) * D(m);
        if (d2 < kMinD2) {
            d2 = kMinD2;
            st.warnings.push_back(std::string("update_") + which + ": D^2 floored at 1e-12 for factor " +
                                  std::to_string(m + 1));
        }
        prec(m) = lambda / d2;
    }
    return prec;
}
}  // namespace

void update_g(FitState& st) {
    auto& p = st.params;
    if (p.M() == 0) return;
    const NbWorkspace ws = st.workspace();
    const Vector prec = induced_precision(st, st.prior.lambda_u, "G");
    Matrix G = p.U * p.D.asDiagonal();
    parallel_for(G.rows(), st.config.threads, [&](Eigen::Index i) {
        const Matrix F = weighted_gram(p.V, ws.W.row(i).transpose());
        const Vector g = p.V.transpose() * ws.E.row(i).transpose();
        G.row(i) = bounded_fisher_step(G.row(i).transpose(), g, F, prec, st.config.rho);
    });
    if (!project_g(p, st.cov, G)) st.warnings.push_back("update_G: degenerate latent factors");
}

void update_h(FitState& st) {
    auto& p = st.params;
    if (p.M() == 0) return;
    const NbWorkspace ws = st.workspace();
    const Vector prec = induced_precision(st, st.prior.lambda_v, "H");
    Matrix H = p.V * p.D.asDiagonal();
    parallel_for(H.rows(), st.config.threads, [&](Eigen::Index j) {
        const Matrix F = weighted_gram(p.U, ws.W.col(j));
        const Vector g = p.U.transpose() * ws.E.col(j);
        H.row(j) = bounded_fisher_step(H.row(j).transpose(), g, F, prec, st.config.rho);
    });
    if (!project_h(p, st.cov, H)) st.warnings.push_back("update_H: degenerate latent factors");
}

namespace {
// Adaptive Newton step on one dispersion offset.
double dispersion_step(double x, double grad_sum, double hess_sum, double lambda, double mean, double rho,
                       double& rho_i, const std::string& where) {
    const double g = -lambda * (x - mean) + grad_sum;
    const double h = -lambda + hess_sum;
    if (!std::isfinite(g) || !std::isfinite(h)) throw numeric_error("non-finite dispersion derivative at " + where);
    const double xi = h < 0 ? -g / h : g;
    const double a = std::abs(xi);
    const double step = a > rho_i ? xi * (rho_i / a) : xi;
    rho_i = a > rho_i ? rho_i / 2 : rho;
    return x + step;
}
}  // namespace

void update_s(FitState& st) {
    const NbWorkspace ws = st.workspace();
    const DispersionDerivs dd = dispersion_derivatives(st.Y, ws.mu, ws.r);
    auto& p = st.params;
    parallel_for(p.S.size(), st.config.threads, [&](Eigen::Index i) {
        p.S(i) = dispersion_step(p.S(i), dd.delta.row(i).sum(), dd.delta_prime.row(i).sum(), st.prior.lambda_s,
                                 st.prior.m_s, st.config.rho, st.adapt.rho_s(i), fmt_index("row", i));
    });
    project_s(p);
}

void update_t(FitState& st) {
    const NbWorkspace ws = st.workspace();
    const DispersionDerivs dd = dispersion_derivatives(st.Y, ws.mu, ws.r);
    auto& p = st.params;
    parallel_for(p.T.size(), st.config.threads, [&](Eigen::Index j) {
        p.T(j) = dispersion_step(p.T(j), dd.delta.col(j).sum(), dd.delta_prime.col(j).sum(), st.prior.lambda_t,
                                 st.prior.m_t, st.config.rho, st.adapt.rho_t(j), fmt_index("column", j));
    });
    project_t(p);
}

namespace {
// floor + log(exp(x − floor) + 1), computed without overflow.
double softplus_floor(double x, double floor) {
    const double z = x - floor;
    return z > 0 ? x + std::log1p(std::exp(-z)) : floor + std::log1p(std::exp(z));
}
}  // namespace

void bias_correct_dispersions(FitState& st, double s_floor, double t_floor) {
    auto& p = st.params;
    for (Eigen::Index i = 0; i < p.S.size(); ++i) p.S(i) = softplus_floor(p.S(i), s_floor);
    project_s(p);
    for (Eigen::Index j = 0; j < p.T.size(); ++j) p.T(j) = softplus_floor(p.T(j), t_floor);
    project_t(p);
}

std::vector<std::string> finalize_factors(GbmParams& p) {
    std::vector<std::string> warnings;
    const auto M = p.M();
    for (Eigen::Index m = 0; m < M; ++m)
        if (p.D(m) < 0) {
            p.D(m) = -p.D(m);
            p.V.col(m) = -p.V.col(m);
        }
    std::vector<Eigen::Index> order(static_cast<size_t>(M));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p.D(a) > p.D(b); });
    const GbmParams old = p;
    for (Eigen::Index m = 0; m < M; ++m) {
        const auto src = order[static_cast<size_t>(m)];
        p.D(m) = old.D(src);
        p.U.col(m) = old.U.col(src);
        p.V.col(m) = old.V.col(src);
        const auto i = first_nonzero(p.U.col(m));
        if (i < 0) {
            warnings.push_back("latent factor " + std::to_string(m + 1) + " has an all-zero U column");
        } else if (p.U(i, m) < 0) {
            p.U.col(m) = -p.U.col(m);
            p.V.col(m) = -p.V.col(m);
        }
    }
    return warnings;
}

GbmParams initialize(const Matrix& Y, const CovariateSet& cov, Eigen::Index M, const PriorConfig& prior,
                     const FitConfig& config) {
    const auto I = Y.rows(), J = Y.cols();
    if (cov.I() != I || cov.J() != J) throw shape_error("covariates do not match the count matrix");
    if (M < 0 || M >= std::min(I, J)) throw shape_error("latent dimension M must satisfy 0 <= M < min(I, J)");
    GbmParams p = GbmParams::zeros(I, J, cov.K(), cov.L(), M);
    const Matrix Ylog = (Y.array() + config.epsilon).log().matrix();
    const Matrix XpY = cov.Xplus * Ylog;
    p.C = XpY * cov.Zplus.transpose();
    p.A = (XpY - p.C * cov.Z.transpose()).transpose();
    p.B = Ylog * cov.Zplus.transpose() - cov.X * p.C;
    if (M > 0) {
        Rng rng = make_rng(config.seed, Stream::Init);
        boost::random::normal_distribution<double> nd(0.0, 1e-8);
        Matrix N(I, J);
        for (Eigen::Index j = 0; j < J; ++j)
            for (Eigen::Index i = 0; i < I; ++i) N(i, j) = nd(rng);
        N -= cov.X * (cov.Xplus * N);
        N -= (N * cov.Zplus.transpose()) * cov.Z.transpose();
        CompactSvd s = compact_svd(N, M);
        p.U = s.U;
        p.D = s.d;
        p.V = s.V;
    }
    FitState st(Y, cov, p, prior, config);
    for (int k = 0; k < config.init_st_iters; ++k) {
        update_s(st);
        update_t(st);
    }
    return st.params;
}

namespace {
template <class F>
void labelled(int iter, const char* comp, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        throw Error(e.kind(), std::string(e.what()) + " [iteration " + std::to_string(iter) + ", component " +
                                  comp + "]");
    }
}
}  // namespace

FitResult fit_real(const Matrix& Y, const CovariateSet& cov_in, Eigen::Index M, const PriorConfig& prior,
                   const FitConfig& config_in, const std::optional<GbmParams>& start) {
    prior.validate();
    config_in.validate();
    FitConfig config = config_in;
    config.threads = resolve_threads(config.threads);
    if (!Y.allFinite() || (Y.array() < 0).any()) throw domain_error("counts must be finite and nonnegative");
    CovariateSet cov = config.standardize ? make_covariates(standardize_covariates(cov_in.X),
                                                            standardize_covariates(cov_in.Z))
                                          : cov_in;
    GbmParams p0;
    if (start) {
        p0 = *start;
        check_dimensions(p0, cov);
        if (p0.M() != M) throw shape_error("starting parameters have a different latent dimension");
    } else {
        p0 = initialize(Y, cov, M, prior, config);
    }
    FitState st(Y, cov, std::move(p0), prior, config);
    FitResult res;
    double prev = log_posterior(st.Y, st.cov, st.params, prior);
    res.trace.push_back(prev);
    for (int it = 1; it <= config.max_iter; ++it) {
        labelled(it, "A", [&] { update_a(st); });
        labelled(it, "B", [&] { update_b(st); });
        labelled(it, "C", [&] { update_c(st); });
        if (M > 0) {
            labelled(it, "D", [&] { update_d(st); });
            labelled(it, "G", [&] { update_g(st); });
            labelled(it, "H", [&] { update_h(st); });
        }
        labelled(it, "S", [&] { update_s(st); });
        labelled(it, "T", [&] { update_t(st); });
        const double obj = log_posterior(st.Y, st.cov, st.params, prior);
        if (!std::isfinite(obj)) throw numeric_error("non-finite log-posterior at iteration " + std::to_string(it));
        res.trace.push_back(obj);
        res.iterations = it;
        if (std::abs(obj - prev) / (std::abs(obj) + 1.0) < config.tol) {
            res.converged = true;
            break;
        }
        prev = obj;
    }
    bias_correct_dispersions(st, config.s_floor, config.t_floor);
    for (auto& w : finalize_factors(st.params)) st.warnings.push_back(w);
    res.params = std::move(st.params);
    res.cov = std::move(st.cov);
    res.clamp_events = st.clamp_events;
    res.warnings = std::move(st.warnings);
    return res;
}

FitResult fit(const DataMatrix& Y, const CovariateSet& cov, Eigen::Index M, const PriorConfig& prior,
              const FitConfig& config, const std::optional<GbmParams>& start) {
    return fit_real(Y.as_real(), cov, M, prior, config, start);
}

}  // namespace gbm
