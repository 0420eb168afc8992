#include "gbm/linalg.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace gbm {

Matrix spd_inverse(const Matrix& F, const std::string& what) {
    if (!F.allFinite()) throw numeric_error("non-finite Fisher block in " + what);
    Eigen::LLT<Matrix> llt(F);
    if (llt.info() != Eigen::Success) throw numeric_error("Fisher block not positive definite in " + what);
    return llt.solve(Matrix::Identity(F.rows(), F.cols()));
}

Vector spd_solve(const Matrix& F, const Vector& b, const std::string& what) {
    if (!F.allFinite() || !b.allFinite()) throw numeric_error("non-finite system in " + what);
    Eigen::LLT<Matrix> llt(F);
    if (llt.info() != Eigen::Success) throw numeric_error("Fisher block not positive definite in " + what);
    return llt.solve(b);
}

Matrix left_pseudoinverse(const Matrix& M, const std::string& name) {
    const Matrix G = M.transpose() * M;
    Eigen::LDLT<Matrix> ldlt(G);
    Eigen::JacobiSVD<Matrix> svd(M);
    const auto& s = svd.singularValues();
    if (s.size() == 0 || s(s.size() - 1) <= 1e-10 * std::max(1.0, s(0)))
        throw rank_error(name + " does not have full column rank");
    return ldlt.solve(M.transpose());
}

CompactSvd compact_svd(const Matrix& M, Eigen::Index rank) {
    CompactSvd out;
    if (rank == 0) {
        out.U = Matrix::Zero(M.rows(), 0);
        out.d = Vector::Zero(0);
        out.V = Matrix::Zero(M.cols(), 0);
        return out;
    }
    Eigen::BDCSVD<Matrix> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.U = svd.matrixU().leftCols(rank);
    out.d = svd.singularValues().head(rank);
    out.V = svd.matrixV().leftCols(rank);
    return out;
}

void parallel_for(Eigen::Index n, int threads, const std::function<void(Eigen::Index)>& body) {
    if (threads <= 1 || n < 2) {
        for (Eigen::Index i = 0; i < n; ++i) body(i);
        return;
    }
    const Eigen::Index t = std::min<Eigen::Index>(threads, n);
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(static_cast<size_t>(t));
    for (Eigen::Index w = 0; w < t; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (Eigen::Index i = w; i < n; i += t) body(i);
            } catch (...) {
                errs[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

int resolve_threads(int requested) {
    if (requested >= 1) return requested;
    if (const char* env = std::getenv("GBM_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1) return v;
    }
    return 1;
}

}  // namespace gbm
