#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gbm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

// Error hierarchy. Every error carries a category so the CLI can map it to an exit code.
enum class ErrorKind { Shape, Domain, Index, Precondition, Rank, Numeric, Size, Input, Usage };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline Error shape_error(const std::string& m) { return {ErrorKind::Shape, "shape error: " + m}; }
inline Error domain_error(const std::string& m) { return {ErrorKind::Domain, "domain error: " + m}; }
inline Error index_error(const std::string& m) { return {ErrorKind::Index, "index error: " + m}; }
inline Error precondition_error(const std::string& m) {
    return {ErrorKind::Precondition, "precondition error: " + m};
}
inline Error rank_error(const std::string& m) { return {ErrorKind::Rank, "rank error: " + m}; }
inline Error numeric_error(const std::string& m) { return {ErrorKind::Numeric, "numeric error: " + m}; }
inline Error size_error(const std::string& m) { return {ErrorKind::Size, "size error: " + m}; }
inline Error input_error(const std::string& m) { return {ErrorKind::Input, "input error: " + m}; }

// I×J nonnegative integer counts.
class DataMatrix {
public:
    DataMatrix() = default;
    explicit DataMatrix(CountMatrix counts);
    // Accepts real values that are exactly nonnegative integers.
    static DataMatrix from_real(const Matrix& values);

    const CountMatrix& counts() const { return counts_; }
    Matrix as_real() const { return counts_.cast<double>(); }
    Eigen::Index rows() const { return counts_.rows(); }
    Eigen::Index cols() const { return counts_.cols(); }

private:
    CountMatrix counts_;
};

struct CovariateSet {
    Matrix X;      // I×K, column 1 all ones
    Matrix Z;      // J×L, column 1 all ones
    Matrix Xplus;  // K×I
    Matrix Zplus;  // L×J

    Eigen::Index I() const { return X.rows(); }
    Eigen::Index J() const { return Z.rows(); }
    Eigen::Index K() const { return X.cols(); }
    Eigen::Index L() const { return Z.cols(); }
};

// Builds a covariate set from already-preprocessed matrices, computing the pseudoinverses.
// Throws rank_error if either matrix is column-rank deficient.
CovariateSet make_covariates(const Matrix& X, const Matrix& Z);

// Intercept-only design with K = L = 1.
CovariateSet intercept_only(Eigen::Index I, Eigen::Index J);

struct GbmParams {
    Matrix A;  // J×K
    Matrix B;  // I×L
    Matrix C;  // K×L
    Vector D;  // M
    Matrix U;  // I×M
    Matrix V;  // J×M
    Vector S;  // I
    Vector T;  // J
    double omega = 0.0;

    Eigen::Index M() const { return D.size(); }
    // Zero-initialized parameters of the given dimensions.
    static GbmParams zeros(Eigen::Index I, Eigen::Index J, Eigen::Index K, Eigen::Index L,
                           Eigen::Index M);
};

struct PriorConfig {
    double lambda_a = 1.0;
    double lambda_b = 1.0;
    double lambda_c = 1.0;
    double lambda_d = 1.0;
    double lambda_u = 1.0;
    double lambda_v = 1.0;
    double lambda_s = 1.0;
    double lambda_t = 1.0;
    double m_s = 0.0;
    double m_t = 0.0;

    void validate() const;
};

struct FitConfig {
    double rho = 5.0;
    double tol = 1e-6;
    int max_iter = 50;
    double epsilon = 0.125;
    double s_floor = -4.0;
    double t_floor = -4.0;
    bool standardize = true;
    int init_st_iters = 4;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const;
};

// Validates that params dimensions agree with cov; throws shape_error naming the offending block.
void check_dimensions(const GbmParams& params, const CovariateSet& cov);

}  // namespace gbm
