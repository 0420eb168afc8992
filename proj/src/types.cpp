#include "gbm/types.hpp"

#include "gbm/linalg.hpp"

#include <cmath>
#include <sstream>

namespace gbm {

DataMatrix::DataMatrix(CountMatrix counts) : counts_(std::move(counts)) {
    if (counts_.rows() < 1 || counts_.cols() < 1) throw shape_error("count matrix must be at least 1x1");
    for (Eigen::Index j = 0; j < counts_.cols(); ++j)
        for (Eigen::Index i = 0; i < counts_.rows(); ++i)
            if (counts_(i, j) < 0) {
                std::ostringstream os;
                os << "negative count at (" << i + 1 << "," << j + 1 << ")";
                throw domain_error(os.str());
            }
}

DataMatrix DataMatrix::from_real(const Matrix& values) {
    CountMatrix c(values.rows(), values.cols());
    for (Eigen::Index j = 0; j < values.cols(); ++j)
        for (Eigen::Index i = 0; i < values.rows(); ++i) {
            const double v = values(i, j);
            if (!std::isfinite(v) || v < 0 || v != std::floor(v) || v > 9.0e15) {
                std::ostringstream os;
                os << "entry (" << i + 1 << "," << j + 1 << ") = " << v
                   << " is not a nonnegative integer count";
                throw domain_error(os.str());
            }
            c(i, j) = static_cast<std::int64_t>(v);
        }
    return DataMatrix(std::move(c));
}

CovariateSet make_covariates(const Matrix& X, const Matrix& Z) {
    if (X.rows() < 1 || X.cols() < 1) throw shape_error("X must have at least one row and column");
    if (Z.rows() < 1 || Z.cols() < 1) throw shape_error("Z must have at least one row and column");
    if (!X.allFinite()) throw domain_error("X contains non-finite values");
    if (!Z.allFinite()) throw domain_error("Z contains non-finite values");
    if ((X.col(0).array() != 1.0).any()) throw precondition_error("column 1 of X must be all ones");
    if ((Z.col(0).array() != 1.0).any()) throw precondition_error("column 1 of Z must be all ones");
    CovariateSet cov;
    cov.X = X;
    cov.Z = Z;
    cov.Xplus = left_pseudoinverse(X, "X");
    cov.Zplus = left_pseudoinverse(Z, "Z");
    return cov;
}

CovariateSet intercept_only(Eigen::Index I, Eigen::Index J) {
    return make_covariates(Matrix::Ones(I, 1), Matrix::Ones(J, 1));
}

GbmParams GbmParams::zeros(Eigen::Index I, Eigen::Index J, Eigen::Index K, Eigen::Index L,
                           Eigen::Index M) {
    GbmParams p;
    p.A = Matrix::Zero(J, K);
    p.B = Matrix::Zero(I, L);
    p.C = Matrix::Zero(K, L);
    p.D = Vector::Zero(M);
    p.U = Matrix::Zero(I, M);
    p.V = Matrix::Zero(J, M);
    p.S = Vector::Zero(I);
    p.T = Vector::Zero(J);
    p.omega = 0.0;
    return p;
}

void PriorConfig::validate() const {
    const double l[] = {lambda_a, lambda_b, lambda_c, lambda_d, lambda_u, lambda_v, lambda_s, lambda_t};
    for (double v : l)
        if (!(v > 0) || !std::isfinite(v)) throw domain_error("prior precisions must be positive and finite");
    if (!std::isfinite(m_s) || !std::isfinite(m_t)) throw domain_error("prior means must be finite");
}

void FitConfig::validate() const {
    if (!(rho > 0)) throw domain_error("rho must be positive");
    if (!(tol > 0)) throw domain_error("tol must be positive");
    if (max_iter < 1) throw domain_error("max_iter must be at least 1");
    if (!(epsilon > 0)) throw domain_error("epsilon must be positive");
    if (init_st_iters < 0) throw domain_error("init_st_iters must be nonnegative");
}

void check_dimensions(const GbmParams& p, const CovariateSet& cov) {
    const auto I = cov.I(), J = cov.J(), K = cov.K(), L = cov.L(), M = p.D.size();
    auto need = [](bool ok, const char* what) {
        if (!ok) throw shape_error(std::string("parameter block ") + what + " has inconsistent dimensions");
    };
    need(p.A.rows() == J && p.A.cols() == K, "A (expected J x K)");
    need(p.B.rows() == I && p.B.cols() == L, "B (expected I x L)");
    need(p.C.rows() == K && p.C.cols() == L, "C (expected K x L)");
    need(p.U.rows() == I && p.U.cols() == M, "U (expected I x M)");
    need(p.V.rows() == J && p.V.cols() == M, "V (expected J x M)");
    need(p.S.size() == I, "S (expected length I)");
    need(p.T.size() == J, "T (expected length J)");
}

}  // namespace gbm
