#include "gbm/nb.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <cmath>

namespace gbm {

namespace {
// log Γ(y+r) − log Γ(r); for large r a Stirling difference avoids cancellation.
double lgamma_diff(double y, double r) {
    if (y == 0) return 0.0;
    if (r >= 1e6) {
        const double yr = y + r;
        return (r - 0.5) * std::log1p(y / r) + y * std::log(yr) - y - y / (12.0 * r * yr);
    }
    return std::lgamma(y + r) - std::lgamma(r);
}
}  // namespace

double nb_log_pmf(double y, double mu, double r) {
    if (!(mu > 0) || !(r > 0)) throw domain_error("nb_log_pmf requires mu > 0 and r > 0");
    const double lg = lgamma_diff(y, r) - std::lgamma(y + 1.0);
    // log(μ/(μ+r)) and log(r/(μ+r)) written to stay accurate when one dominates.
    const double log_p = -std::log1p(r / mu);
    const double log_q = -std::log1p(mu / r);
    const double ty = y == 0 ? 0.0 : y * log_p;
    return lg + ty + r * log_q;
}

Matrix inverse_dispersions(const Vector& S, const Vector& T, double omega) {
    Matrix r(S.size(), T.size());
    for (Eigen::Index j = 0; j < T.size(); ++j)
        for (Eigen::Index i = 0; i < S.size(); ++i) r(i, j) = std::exp(-S(i) - T(j) - omega);
    return r;
}

NbWorkspace compute_workspace(const Matrix& Y, const Matrix& eta, const Vector& S, const Vector& T,
                              double omega) {
    if (Y.rows() != eta.rows() || Y.cols() != eta.cols()) throw shape_error("Y and eta differ in shape");
    if (S.size() != Y.rows() || T.size() != Y.cols()) throw shape_error("S/T lengths do not match Y");
    if (!eta.allFinite()) throw numeric_error("non-finite linear predictor");
    NbWorkspace ws;
    const auto I = Y.rows(), J = Y.cols();
    ws.mu.resize(I, J);
    ws.r = inverse_dispersions(S, T, omega);
    ws.W.resize(I, J);
    ws.E.resize(I, J);
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index i = 0; i < I; ++i) {
            double e = eta(i, j);
            if (e > kEtaClamp) {
                e = kEtaClamp;
                ++ws.clamp_events;
            } else if (e < -kEtaClamp) {
                e = -kEtaClamp;
                ++ws.clamp_events;
            }
            const double mu = std::exp(e);
            const double r = ws.r(i, j);
            const double w = r * mu / (r + mu);
            ws.mu(i, j) = mu;
            ws.W(i, j) = w;
            ws.E(i, j) = (Y(i, j) - mu) * (w / mu);
        }
    return ws;
}

double nb_log_likelihood(const Matrix& Y, const Matrix& mu, const Matrix& r) {
    double total = 0.0;
    for (Eigen::Index j = 0; j < Y.cols(); ++j)
        for (Eigen::Index i = 0; i < Y.rows(); ++i) total += nb_log_pmf(Y(i, j), mu(i, j), r(i, j));
    return total;
}

double log1p_stable(double x) { return std::log1p(x); }

namespace {
// Exact finite sums for small integer y avoid cancellation in ψ(y+r) − ψ(r).
constexpr double kSmallCount = 64.0;
bool small_integer(double y) { return y <= kSmallCount && y == std::floor(y); }
}  // namespace

double psi_delta(double y, double r) {
    if (r >= kLargeR) return std::log1p(y / r);
    if (small_integer(y)) {
        double s = 0.0;
        for (int k = static_cast<int>(y) - 1; k >= 0; --k) s += 1.0 / (r + k);
        return s;
    }
    return boost::math::digamma(y + r) - boost::math::digamma(r);
}

double psi_prime_delta(double y, double r) {
    if (r >= kLargeR) return -(y / r) / (y + r);
    if (small_integer(y)) {
        double s = 0.0;
        for (int k = static_cast<int>(y) - 1; k >= 0; --k) s -= 1.0 / ((r + k) * (r + k));
        return s;
    }
    return boost::math::trigamma(y + r) - boost::math::trigamma(r);
}

DispersionDerivs dispersion_derivatives(const Matrix& Y, const Matrix& mu, const Matrix& r) {
    DispersionDerivs d;
    const auto I = Y.rows(), J = Y.cols();
    d.delta.resize(I, J);
    d.delta_prime.resize(I, J);
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index i = 0; i < I; ++i) {
            const double y = Y(i, j), m = mu(i, j), rr = r(i, j);
            const double ratio = m / rr;
            const double delta = -rr * (psi_delta(y, rr) - std::log1p(ratio) - (y - m) / (rr + m));
            const double onep = 1.0 + ratio;
            d.delta(i, j) = delta;
            d.delta_prime(i, j) = -delta + rr * rr * psi_prime_delta(y, rr) + (y + m * ratio) / (onep * onep);
        }
    return d;
}

LoglikGradients loglik_gradients(const NbWorkspace& ws, const GbmParams& p, const CovariateSet& cov) {
    LoglikGradients g;
    g.A = ws.E.transpose() * cov.X;
    g.B = ws.E * cov.Z;
    g.C = cov.X.transpose() * g.B;
    const Matrix EV = ws.E * p.V;
    g.D = (p.U.array() * EV.array()).colwise().sum().transpose();
    g.U = EV * p.D.asDiagonal();
    g.V = ws.E.transpose() * p.U * p.D.asDiagonal();
    return g;
}

}  // namespace gbm
