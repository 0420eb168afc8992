#include "gbm/simulation.hpp"

#include "gbm/estimation.hpp"
#include "gbm/model.hpp"
#include "gbm/nb.hpp"

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/random/gamma_distribution.hpp>
#include <boost/random/geometric_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/poisson_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace gbm {

void SimScheme::validate() const {
    if (I < 1 || J < 1 || K < 1 || L < 1 || M < 0) throw domain_error("simulation dimensions must be positive");
    if (M >= std::min(I, J)) throw domain_error("M must be smaller than min(I, J)");
    if (K >= I || L >= J) throw domain_error("need K < I and L < J for full-rank covariates");
}

namespace {
Error usage(const std::string& m) { return {ErrorKind::Usage, m}; }

std::vector<std::string> split(const std::string& s, char c) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, c)) out.push_back(item);
    return out;
}
}  // namespace

void parse_scheme(const std::string& text, SimScheme& s) {
    const auto parts = split(text, '/');
    if (parts.size() != 3)
        throw usage("scheme must be Outcome/Covariates/Parameters, e.g. NB/Normal/Normal");
    const auto& o = parts[0];
    if (o == "NB") s.outcome = Outcome::NB;
    else if (o == "LNP") s.outcome = Outcome::LNP;
    else if (o == "Poisson") s.outcome = Outcome::Poisson;
    else if (o == "Geometric") s.outcome = Outcome::Geometric;
    else throw usage("unknown outcome '" + o + "'; valid: NB, LNP, Poisson, Geometric");
    const auto& c = parts[1];
    if (c == "Normal") s.covariates = CovariateScheme::Normal;
    else if (c == "Gamma") s.covariates = CovariateScheme::Gamma;
    else if (c == "Binary") s.covariates = CovariateScheme::Binary;
    else throw usage("unknown covariate scheme '" + c + "'; valid: Normal, Gamma, Binary");
    const auto& p = parts[2];
    if (p == "Normal") s.parameters = ParameterScheme::Normal;
    else if (p == "Gamma") s.parameters = ParameterScheme::Gamma;
    else throw usage("unknown parameter scheme '" + p + "'; valid: Normal, Gamma");
}

std::string scheme_string(const SimScheme& s) {
    static const char* outs[] = {"NB", "LNP", "Poisson", "Geometric"};
    static const char* covs[] = {"Normal", "Gamma", "Binary"};
    static const char* pars[] = {"Normal", "Gamma"};
    return std::string(outs[static_cast<int>(s.outcome)]) + "/" + covs[static_cast<int>(s.covariates)] + "/" +
           pars[static_cast<int>(s.parameters)];
}

void parse_dims(const std::string& text, SimScheme& s) {
    const auto parts = split(text, 'x');
    if (parts.size() != 5) throw usage("dims must be IxJxKxLxM, e.g. 200x50x2x2x1");
    Eigen::Index v[5];
    for (int k = 0; k < 5; ++k) {
        try {
            size_t pos = 0;
            v[k] = std::stol(parts[static_cast<size_t>(k)], &pos);
            if (pos != parts[static_cast<size_t>(k)].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw usage("dims must be IxJxKxLxM with integer entries");
        }
    }
    s.I = v[0];
    s.J = v[1];
    s.K = v[2];
    s.L = v[3];
    s.M = v[4];
}

Matrix generate_covariates(Eigen::Index n, Eigen::Index p, CovariateScheme scheme, Rng& rng, long* clamp_events,
                           Matrix* raw) {
    if (n < 1 || p < 1) throw domain_error("covariate dimensions must be positive");
    boost::random::normal_distribution<double> nd;
    Matrix Q(p, p);
    for (Eigen::Index b = 0; b < p; ++b)
        for (Eigen::Index a = 0; a < p; ++a) Q(a, b) = nd(rng);
    Matrix Sigma = Q.transpose() * Q;
    const Vector sd = Sigma.diagonal().cwiseSqrt();
    Sigma = sd.cwiseInverse().asDiagonal() * Sigma * sd.cwiseInverse().asDiagonal();
    const Matrix Lc = Sigma.llt().matrixL();
    Matrix Zs(n, p);
    for (Eigen::Index b = 0; b < p; ++b)
        for (Eigen::Index a = 0; a < n; ++a) Zs(a, b) = nd(rng);
    const Matrix Xt = Zs * Lc.transpose();

    const boost::math::normal_distribution<double> std_normal;
    const boost::math::gamma_distribution<double> gam(2.0, 1.0 / std::sqrt(2.0));
    long clamps = 0;
    Matrix X(n, p);
    for (Eigen::Index b = 0; b < p; ++b)
        for (Eigen::Index a = 0; a < n; ++a) {
            const double x = Xt(a, b);
            double v = x;
            switch (scheme) {
                case CovariateScheme::Normal:
                    break;
                case CovariateScheme::Gamma:
                    v = x > 0 ? boost::math::quantile(boost::math::complement(gam, boost::math::cdf(std_normal, -x)))
                              : boost::math::quantile(gam, boost::math::cdf(std_normal, x));
                    break;
                case CovariateScheme::Binary:
                    v = x > 0 ? 1.0 : 0.0;
                    break;
            }
            if (std::abs(v) > 100.0) {
                v = std::copysign(100.0, v);
                ++clamps;
            }
            X(a, b) = v;
        }
    X.col(0).setOnes();
    if (raw) *raw = X;
    if (clamp_events) *clamp_events += clamps;
    return standardize_covariates(X);
}

namespace {
// Uniform orthonormal basis of an M-dimensional subspace of the complement of span(X).
Matrix stiefel_in_nullspace(const CovariateSet& cov, bool rows, Eigen::Index M, Rng& rng) {
    const Matrix& X = rows ? cov.X : cov.Z;
    const Matrix& Xp = rows ? cov.Xplus : cov.Zplus;
    const auto n = X.rows();
    boost::random::normal_distribution<double> nd;
    Matrix G(n, M);
    for (Eigen::Index b = 0; b < M; ++b)
        for (Eigen::Index a = 0; a < n; ++a) G(a, b) = nd(rng);
    G -= X * (Xp * G);
    Eigen::HouseholderQR<Matrix> qr(G);
    Matrix Q = qr.householderQ() * Matrix::Identity(n, M);
    const Matrix R = qr.matrixQR().topRows(M).triangularView<Eigen::Upper>();
    for (Eigen::Index m = 0; m < M; ++m)
        if (R(m, m) < 0) Q.col(m) = -Q.col(m);
    return Q;
}

Matrix draw(Eigen::Index r, Eigen::Index c, ParameterScheme scheme, double var, double gamma_rate, Rng& rng) {
    Matrix out(r, c);
    boost::random::normal_distribution<double> nd(0.0, std::sqrt(var));
    boost::random::gamma_distribution<double> gd(2.0, 1.0 / gamma_rate);
    for (Eigen::Index b = 0; b < c; ++b)
        for (Eigen::Index a = 0; a < r; ++a) out(a, b) = scheme == ParameterScheme::Normal ? nd(rng) : gd(rng);
    return out;
}

Vector centered_log_dispersions(Eigen::Index n, Rng& rng) {
    boost::random::normal_distribution<double> nd;
    Vector s(n);
    for (Eigen::Index a = 0; a < n; ++a) s(a) = nd(rng);
    s.array() -= std::log(s.array().exp().mean());
    return s;
}
}  // namespace

GbmParams generate_parameters(const CovariateSet& cov, Eigen::Index M, ParameterScheme scheme, Rng& rng,
                              double omega0) {
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L();
    const double dK = static_cast<double>(K), dL = static_cast<double>(L);
    GbmParams p;
    const Matrix At = draw(J, K, scheme, 1.0 / (4.0 * dK), 2.0 * std::sqrt(2.0 * dK), rng);
    const Matrix Bt = draw(I, L, scheme, 1.0 / (4.0 * dL), 2.0 * std::sqrt(2.0 * dL), rng);
    Matrix Ct = draw(K, L, scheme, 1.0 / (dK * dL), std::sqrt(2.0 * dK * dL), rng);
    Ct(0, 0) += 3.0;
    p.A = At - cov.Z * (cov.Zplus * At);
    p.B = Bt - cov.X * (cov.Xplus * Bt);
    p.C = Ct;
    p.U = stiefel_in_nullspace(cov, true, M, rng);
    p.V = stiefel_in_nullspace(cov, false, M, rng);
    const double lo = std::sqrt(static_cast<double>(I)) + std::sqrt(static_cast<double>(J));
    p.D.resize(M);
    for (Eigen::Index m = 0; m < M; ++m)
        p.D(m) = M == 1 ? lo : 2.0 * lo - lo * static_cast<double>(m) / static_cast<double>(M - 1);
    finalize_factors(p);
    p.S = centered_log_dispersions(I, rng);
    p.T = centered_log_dispersions(J, rng);
    p.omega = omega0;
    return p;
}

DataMatrix generate_outcomes(const Matrix& mu0, const Matrix& r0, Outcome outcome, Rng& rng) {
    if (mu0.rows() != r0.rows() || mu0.cols() != r0.cols()) throw shape_error("mu0 and r0 differ in shape");
    if ((mu0.array() <= 0).any() || (r0.array() <= 0).any()) throw domain_error("mu0 and r0 must be positive");
    CountMatrix Y(mu0.rows(), mu0.cols());
    auto poisson = [&](double lambda) -> std::int64_t {
        if (!(lambda > 0)) return 0;
        boost::random::poisson_distribution<std::int64_t, double> pd(lambda);
        return pd(rng);
    };
    for (Eigen::Index j = 0; j < mu0.cols(); ++j)
        for (Eigen::Index i = 0; i < mu0.rows(); ++i) {
            const double mu = mu0(i, j), r = r0(i, j);
            switch (outcome) {
                case Outcome::NB: {
                    boost::random::gamma_distribution<double> gd(r, mu / r);
                    Y(i, j) = poisson(gd(rng));
                    break;
                }
                case Outcome::LNP: {
                    const double s2 = std::log1p(1.0 / r);
                    boost::random::normal_distribution<double> nd(std::log(mu) - s2 / 2.0, std::sqrt(s2));
                    Y(i, j) = poisson(std::exp(nd(rng)));
                    break;
                }
                case Outcome::Poisson:
                    Y(i, j) = poisson(mu);
                    break;
                case Outcome::Geometric: {
                    boost::random::geometric_distribution<std::int64_t, double> gd(1.0 / (mu + 1.0));
                    Y(i, j) = gd(rng);
                    break;
                }
            }
        }
    return DataMatrix(std::move(Y));
}

SimTruth simulate_truth(const SimScheme& scheme, std::uint64_t replicate) {
    scheme.validate();
    SimTruth t;
    Rng rc = make_rng(scheme.seed, Stream::Covariates, replicate);
    const Matrix X = generate_covariates(scheme.I, scheme.K, scheme.covariates, rc, &t.clamp_events);
    const Matrix Z = generate_covariates(scheme.J, scheme.L, scheme.covariates, rc, &t.clamp_events);
    t.cov = make_covariates(X, Z);
    Rng rp = make_rng(scheme.seed, Stream::Parameters, replicate);
    t.params0 = generate_parameters(t.cov, scheme.M, scheme.parameters, rp, scheme.omega0);
    const Matrix eta = compute_eta(t.params0, t.cov);
    t.mu0 = eta.array().exp().matrix();
    t.r0 = inverse_dispersions(t.params0.S, t.params0.T, t.params0.omega);
    return t;
}

SimData simulate(const SimScheme& scheme, std::uint64_t replicate) {
    SimData d;
    d.truth = simulate_truth(scheme, replicate);
    Rng ro = make_rng(scheme.seed, Stream::Outcomes, replicate);
    d.Y = generate_outcomes(d.truth.mu0, d.truth.r0, scheme.outcome, ro);
    return d;
}

namespace {
double abs_corr(const Vector& a, const Vector& b) {
    const Vector ac = a.array() - a.mean();
    const Vector bc = b.array() - b.mean();
    const double den = ac.norm() * bc.norm();
    return den > 0 ? std::abs(ac.dot(bc)) / den : 0.0;
}
double signed_corr(const Vector& a, const Vector& b) {
    const Vector ac = a.array() - a.mean();
    const Vector bc = b.array() - b.mean();
    return ac.dot(bc);
}
}  // namespace

LatentAlignment latent_alignment(const GbmParams& est, const GbmParams& truth) {
    const auto M = est.M();
    if (truth.M() != M || est.U.rows() != truth.U.rows() || est.V.rows() != truth.V.rows())
        throw shape_error("latent dimensions of estimate and truth differ");
    Matrix score(M, M);  // score(t, e): |corr(truth t, est e)|
    for (Eigen::Index t = 0; t < M; ++t)
        for (Eigen::Index e = 0; e < M; ++e) score(t, e) = abs_corr(est.U.col(e), truth.U.col(t));
    LatentAlignment a;
    a.perm.resize(static_cast<size_t>(M));
    std::iota(a.perm.begin(), a.perm.end(), 0);
    if (M <= 5) {
        std::vector<Eigen::Index> cur = a.perm;
        double best = -1;
        do {
            double s = 0;
            for (Eigen::Index t = 0; t < M; ++t) s += score(t, cur[static_cast<size_t>(t)]);
            if (s > best + 1e-15) {
                best = s;
                a.perm = cur;
            }
        } while (std::next_permutation(cur.begin(), cur.end()));
    } else {
        std::vector<bool> used_t(static_cast<size_t>(M), false), used_e(static_cast<size_t>(M), false);
        for (Eigen::Index step = 0; step < M; ++step) {
            double best = -1;
            Eigen::Index bt = 0, be = 0;
            for (Eigen::Index t = 0; t < M; ++t)
                for (Eigen::Index e = 0; e < M; ++e)
                    if (!used_t[static_cast<size_t>(t)] && !used_e[static_cast<size_t>(e)] && score(t, e) > best) {
                        best = score(t, e);
                        bt = t;
                        be = e;
                    }
            used_t[static_cast<size_t>(bt)] = used_e[static_cast<size_t>(be)] = true;
            a.perm[static_cast<size_t>(bt)] = be;
        }
    }
    a.signs.resize(M);
    for (Eigen::Index t = 0; t < M; ++t)
        a.signs(t) = signed_corr(est.U.col(a.perm[static_cast<size_t>(t)]), truth.U.col(t)) < 0 ? -1.0 : 1.0;
    return a;
}

Matrix apply_alignment(const Matrix& cols, const LatentAlignment& a, bool flip) {
    Matrix out(cols.rows(), cols.cols());
    for (Eigen::Index t = 0; t < cols.cols(); ++t)
        out.col(t) = (flip ? a.signs(t) : 1.0) * cols.col(a.perm[static_cast<size_t>(t)]);
    return out;
}

GbmParams align_latent_factors(const GbmParams& est, const GbmParams& truth) {
    const LatentAlignment a = latent_alignment(est, truth);
    GbmParams out = est;
    out.U = apply_alignment(est.U, a, true);
    out.V = apply_alignment(est.V, a, true);
    for (Eigen::Index t = 0; t < est.M(); ++t) out.D(t) = est.D(a.perm[static_cast<size_t>(t)]);
    return out;
}

double relative_mse(const Matrix& est, const Matrix& truth) {
    if (est.rows() != truth.rows() || est.cols() != truth.cols()) throw shape_error("relative_mse shape mismatch");
    const double den = truth.squaredNorm();
    if (!(den > 0)) throw domain_error("relative_mse: truth has zero norm");
    return (est - truth).squaredNorm() / den;
}

namespace {
std::vector<double> coverage_scores(const Matrix& est, const Matrix& se, const Matrix& truth) {
    if (est.rows() != se.rows() || est.cols() != se.cols() || est.rows() != truth.rows() ||
        est.cols() != truth.cols())
        throw shape_error("coverage inputs differ in shape");
    std::vector<double> c;
    c.reserve(static_cast<size_t>(est.size()));
    for (Eigen::Index b = 0; b < est.cols(); ++b)
        for (Eigen::Index a = 0; a < est.rows(); ++a) {
            if (!(se(a, b) > 0)) throw domain_error("standard errors must be positive");
            const double z = std::abs(est(a, b) - truth(a, b)) / se(a, b);
            c.push_back(std::erf(z / std::sqrt(2.0)));  // 1 − 2(1 − Φ(z))
        }
    std::sort(c.begin(), c.end());
    return c;
}
}  // namespace

std::vector<std::pair<double, double>> coverage_curve(const Matrix& est, const Matrix& se, const Matrix& truth,
                                                      int grid) {
    const auto c = coverage_scores(est, se, truth);
    std::vector<std::pair<double, double>> out;
    for (int g = 0; g < grid; ++g) {
        const double target = grid > 1 ? static_cast<double>(g) / (grid - 1) : 1.0;
        const auto n_below = std::lower_bound(c.begin(), c.end(), target) - c.begin();
        out.emplace_back(target, c.empty() ? 0.0 : static_cast<double>(n_below) / static_cast<double>(c.size()));
    }
    return out;
}

double coverage_at(const Matrix& est, const Matrix& se, const Matrix& truth, double level) {
    const auto c = coverage_scores(est, se, truth);
    const auto n_below = std::lower_bound(c.begin(), c.end(), level) - c.begin();
    return c.empty() ? 0.0 : static_cast<double>(n_below) / static_cast<double>(c.size());
}

}  // namespace gbm
