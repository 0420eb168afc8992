#include "gbm/model.hpp"

#include <cmath>
#include <sstream>

namespace gbm {

Matrix compute_eta(const GbmParams& p, const CovariateSet& cov) {
    check_dimensions(p, cov);
    Matrix eta = cov.X * p.A.transpose();
    eta.noalias() += p.B * cov.Z.transpose();
    eta.noalias() += cov.X * (p.C * cov.Z.transpose());
    if (p.M() > 0) eta.noalias() += (p.U * p.D.asDiagonal()) * p.V.transpose();
    return eta;
}

Matrix residuals(const Matrix& Y, const Matrix& eta, double epsilon) {
    if (Y.rows() != eta.rows() || Y.cols() != eta.cols()) throw shape_error("Y and eta differ in shape");
    if (!(epsilon > 0)) throw domain_error("epsilon must be positive");
    return (Y.array() + epsilon).log().matrix() - eta;
}

Matrix partial_residuals(const GbmParams& p, const CovariateSet& cov, const Matrix& resid,
                         const std::set<Eigen::Index>& keep_x, const std::set<Eigen::Index>& keep_z,
                         const std::set<Eigen::Index>& keep_u) {
    check_dimensions(p, cov);
    if (resid.rows() != cov.I() || resid.cols() != cov.J()) throw shape_error("residual matrix shape");
    auto mask = [](const std::set<Eigen::Index>& keep, Eigen::Index n, const char* name) {
        Vector m = Vector::Zero(n);
        for (auto k : keep) {
            if (k < 0 || k >= n) throw index_error(std::string("keep index out of range for ") + name);
            m(k) = 1.0;
        }
        return m;
    };
    const Vector mx = mask(keep_x, cov.K(), "X");
    const Vector mz = mask(keep_z, cov.L(), "Z");
    const Vector mu = mask(keep_u, p.M(), "U");
    const Matrix Xr = cov.X * mx.asDiagonal();
    const Matrix Zr = cov.Z * mz.asDiagonal();
    Matrix eta = Xr * p.A.transpose() + p.B * Zr.transpose() + Xr * p.C * Zr.transpose();
    if (p.M() > 0) eta += (p.U * mu.asDiagonal()) * p.D.asDiagonal() * p.V.transpose();
    return eta + resid;
}

Matrix residual_precisions(const Matrix& mu, const Matrix& r) {
    if (mu.rows() != r.rows() || mu.cols() != r.cols()) throw shape_error("mu and r differ in shape");
    if ((mu.array() <= 0).any() || (r.array() <= 0).any())
        throw domain_error("mu and r must be positive");
    return (r.array() * mu.array() / (r.array() + mu.array())).matrix();
}

SumOfSquares sum_of_squares_decomposition(const GbmParams& p, const CovariateSet& cov, double tol) {
    const ConstraintReport rep = check_constraints(p, cov, tol);
    if (rep.za > tol || rep.xb > tol || rep.xu > tol || rep.zv > tol)
        throw precondition_error("orthogonality constraints violated; decomposition invalid (" +
                                 rep.describe() + ")");
    SumOfSquares ss;
    ss.ss_xa = (cov.X * p.A.transpose()).squaredNorm();
    ss.ss_bz = (p.B * cov.Z.transpose()).squaredNorm();
    ss.ss_xcz = (cov.X * p.C * cov.Z.transpose()).squaredNorm();
    ss.ss_udv = p.M() > 0 ? (p.U * p.D.asDiagonal() * p.V.transpose()).squaredNorm() : 0.0;
    ss.ss_total = compute_eta(p, cov).squaredNorm();
    return ss;
}

Eigen::Index first_nonzero(const Eigen::Ref<const Vector>& col) {
    for (Eigen::Index i = 0; i < col.size(); ++i)
        if (col(i) != 0.0) return i;
    return -1;
}

namespace {
double scaled_max(const Matrix& prod, const Matrix& factor) {
    if (prod.size() == 0) return 0.0;
    const double scale = factor.size() ? std::max(1.0, factor.cwiseAbs().maxCoeff()) : 1.0;
    return prod.cwiseAbs().maxCoeff() / scale;
}
}  // namespace

ConstraintReport check_constraints(const GbmParams& p, const CovariateSet& cov, double tol, bool strict) {
    check_dimensions(p, cov);
    ConstraintReport r;
    const auto M = p.M();
    r.za = scaled_max(cov.Z.transpose() * p.A, p.A);
    r.xb = scaled_max(cov.X.transpose() * p.B, p.B);
    r.xu = scaled_max(cov.X.transpose() * p.U, p.U);
    r.zv = scaled_max(cov.Z.transpose() * p.V, p.V);
    if (M > 0) {
        r.utu = (p.U.transpose() * p.U - Matrix::Identity(M, M)).cwiseAbs().maxCoeff();
        r.vtv = (p.V.transpose() * p.V - Matrix::Identity(M, M)).cwiseAbs().maxCoeff();
    }
    for (Eigen::Index m = 0; m < M; ++m) {
        if (!(p.D(m) > 0)) r.d_positive = false;
        if (m + 1 < M && !(p.D(m) > p.D(m + 1))) r.d_ordered = false;
        if (strict) {
            const auto i = first_nonzero(p.U.col(m));
            if (i >= 0 && p.U(i, m) < 0) r.sign_ok = false;
        }
    }
    r.mean_exp_s = p.S.size() ? std::abs(p.S.array().exp().mean() - 1.0) : 0.0;
    r.mean_exp_t = p.T.size() ? std::abs(p.T.array().exp().mean() - 1.0) : 0.0;
    r.pass = r.za <= tol && r.xb <= tol && r.xu <= tol && r.zv <= tol && r.utu <= tol && r.vtv <= tol &&
             r.d_ordered && r.d_positive && r.sign_ok && r.mean_exp_s <= tol && r.mean_exp_t <= tol;
    return r;
}

std::string ConstraintReport::describe() const {
    std::ostringstream os;
    os << "ZtA=" << za << " XtB=" << xb << " XtU=" << xu << " ZtV=" << zv << " UtU-I=" << utu
       << " VtV-I=" << vtv << " d_ordered=" << d_ordered << " d_positive=" << d_positive
       << " sign_ok=" << sign_ok << " mean_exp_s-1=" << mean_exp_s << " mean_exp_t-1=" << mean_exp_t;
    return os.str();
}

}  // namespace gbm
