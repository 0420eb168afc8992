#include "gbm/estimation.hpp"
#include "gbm/inference.hpp"
#include "gbm/metrics.hpp"
#include "gbm/model.hpp"
#include "gbm/simulation.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

namespace py = pybind11;
using namespace gbm;

namespace {

Matrix with_intercept(const Matrix& M) {
    if (M.cols() >= 1 && (M.col(0).array() == 1.0).all()) return M;
    Matrix out(M.rows(), M.cols() + 1);
    out.col(0).setOnes();
    out.rightCols(M.cols()) = M;
    return out;
}

CovariateSet covariates(Eigen::Index I, Eigen::Index J, const std::optional<Matrix>& X, const std::optional<Matrix>& Z) {
    const Matrix Xf = X ? with_intercept(*X) : Matrix::Ones(I, 1);
    const Matrix Zf = Z ? with_intercept(*Z) : Matrix::Ones(J, 1);
    if (Xf.rows() != I) throw shape_error("X must have one row per row of Y");
    if (Zf.rows() != J) throw shape_error("Z must have one row per column of Y");
    return make_covariates(Xf, Zf);
}

py::dict params_dict(const GbmParams& p) {
    py::dict d;
    d["A"] = p.A;
    d["B"] = p.B;
    d["C"] = p.C;
    d["D"] = p.D;
    d["U"] = p.U;
    d["V"] = p.V;
    d["S"] = p.S;
    d["T"] = p.T;
    d["omega"] = p.omega;
    return d;
}

GbmParams params_from(const py::dict& d) {
    GbmParams p;
    p.A = d["A"].cast<Matrix>();
    p.B = d["B"].cast<Matrix>();
    p.C = d["C"].cast<Matrix>();
    p.D = d["D"].cast<Vector>();
    p.U = d["U"].cast<Matrix>();
    p.V = d["V"].cast<Matrix>();
    p.S = d["S"].cast<Vector>();
    p.T = d["T"].cast<Vector>();
    p.omega = d["omega"].cast<double>();
    return p;
}

py::dict simulate_py(const std::string& scheme, std::vector<Eigen::Index> dims, std::uint64_t seed,
                     std::uint64_t replicate) {
    if (dims.size() != 5) throw Error(ErrorKind::Usage, "usage error: dims must be (I, J, K, L, M)");
    SimScheme s;
    parse_scheme(scheme, s);
    s.I = dims[0], s.J = dims[1], s.K = dims[2], s.L = dims[3], s.M = dims[4];
    s.seed = seed;
    const SimData d = simulate(s, replicate);
    py::dict out;
    out["Y"] = d.Y.counts();
    out["X"] = d.truth.cov.X;
    out["Z"] = d.truth.cov.Z;
    out["truth"] = params_dict(d.truth.params0);
    out["mu"] = d.truth.mu0;
    out["r"] = d.truth.r0;
    return out;
}

py::dict fit_py(const Matrix& Y, const std::optional<Matrix>& X, const std::optional<Matrix>& Z, Eigen::Index M,
                const PriorConfig& prior, const FitConfig& config) {
    const DataMatrix data = DataMatrix::from_real(Y);
    const CovariateSet cov = covariates(Y.rows(), Y.cols(), X, Z);
    FitResult r;
    {
        py::gil_scoped_release release;
        r = fit(data, cov, M, prior, config);
    }
    py::dict out;
    out["params"] = params_dict(r.params);
    out["X"] = r.cov.X;
    out["Z"] = r.cov.Z;
    out["trace"] = r.trace;
    out["converged"] = r.converged;
    out["iterations"] = r.iterations;
    out["warnings"] = r.warnings;
    return out;
}

py::dict se_py(const Matrix& Y, const Matrix& X, const Matrix& Z, const py::dict& params, const PriorConfig& prior,
               int threads) {
    const CovariateSet cov = make_covariates(X, Z);
    const GbmParams p = params_from(params);
    InferenceResult r;
    {
        py::gil_scoped_release release;
        r = standard_errors(Y, cov, p, prior, threads);
    }
    py::dict out;
    out["A"] = r.se_A;
    out["B"] = r.se_B;
    out["C"] = r.se_C;
    out["U"] = r.se_U;
    out["V"] = r.se_V;
    out["S"] = r.se_S;
    out["T"] = r.se_T;
    out["warnings"] = r.warnings;
    return out;
}

py::dict wald_py(const Vector& est, const Vector& se, double level) {
    const WaldResult w = wald_tests(est, se, level);
    py::dict out;
    out["z"] = w.z;
    out["p_values"] = w.p_values;
    out["ci_lower"] = w.ci_lower;
    out["ci_upper"] = w.ci_upper;
    return out;
}

WeightedSeries series(const Vector& x, const std::optional<Vector>& w, Eigen::Index k) {
    return {x, w ? *w : Vector::Ones(x.size()), k};
}

}  // namespace

PYBIND11_MODULE(gbmuq, m) {
    m.doc() = "Generalized bilinear models for count matrices with uncertainty quantification";
    m.attr("__version__") = GBM_VERSION;
    py::register_exception<Error>(m, "GbmError", PyExc_ValueError);

    py::class_<PriorConfig>(m, "PriorConfig")
        .def(py::init<>())
        .def_readwrite("lambda_a", &PriorConfig::lambda_a)
        .def_readwrite("lambda_b", &PriorConfig::lambda_b)
        .def_readwrite("lambda_c", &PriorConfig::lambda_c)
        .def_readwrite("lambda_d", &PriorConfig::lambda_d)
        .def_readwrite("lambda_u", &PriorConfig::lambda_u)
        .def_readwrite("lambda_v", &PriorConfig::lambda_v)
        .def_readwrite("lambda_s", &PriorConfig::lambda_s)
        .def_readwrite("lambda_t", &PriorConfig::lambda_t)
        .def_readwrite("m_s", &PriorConfig::m_s)
        .def_readwrite("m_t", &PriorConfig::m_t);

    py::class_<FitConfig>(m, "FitConfig")
        .def(py::init<>())
        .def_readwrite("rho", &FitConfig::rho)
        .def_readwrite("tol", &FitConfig::tol)
        .def_readwrite("max_iter", &FitConfig::max_iter)
        .def_readwrite("epsilon", &FitConfig::epsilon)
        .def_readwrite("s_floor", &FitConfig::s_floor)
        .def_readwrite("t_floor", &FitConfig::t_floor)
        .def_readwrite("standardize", &FitConfig::standardize)
        .def_readwrite("init_st_iters", &FitConfig::init_st_iters)
        .def_readwrite("seed", &FitConfig::seed)
        .def_readwrite("threads", &FitConfig::threads);

    m.def("simulate", &simulate_py, py::arg("scheme") = "NB/Normal/Normal",
          py::arg("dims") = std::vector<Eigen::Index>{100, 50, 2, 2, 1}, py::arg("seed") = 0,
          py::arg("replicate") = 0, "Simulate counts, covariates and true parameters");
    m.def("fit", &fit_py, py::arg("Y"), py::arg("X") = py::none(), py::arg("Z") = py::none(), py::arg("M") = 0,
          py::arg("prior") = PriorConfig{}, py::arg("config") = FitConfig{}, "MAP fit of an NB-GBM");
    m.def("standard_errors", &se_py, py::arg("Y"), py::arg("X"), py::arg("Z"), py::arg("params"),
          py::arg("prior") = PriorConfig{}, py::arg("threads") = 1,
          "Approximate standard errors for A, B, C, U, V, S, T at a fitted state");
    m.def("wald_tests", &wald_py, py::arg("estimates"), py::arg("ses"), py::arg("level") = 0.95);
    m.def(
        "compute_eta",
        [](const py::dict& params, const Matrix& X, const Matrix& Z) {
            return compute_eta(params_from(params), make_covariates(X, Z));
        },
        py::arg("params"), py::arg("X"), py::arg("Z"));
    m.def(
        "weighted_moving_average",
        [](const Vector& x, const std::optional<Vector>& w, Eigen::Index k) {
            return weighted_moving_average(series(x, w, k));
        },
        py::arg("x"), py::arg("w") = py::none(), py::arg("k") = 100);
    m.def(
        "lrse", [](const Vector& x, const std::optional<Vector>& w, Eigen::Index k) { return lrse(series(x, w, k)); },
        py::arg("x"), py::arg("w") = py::none(), py::arg("k") = 100);
    m.def(
        "wmad", [](const Vector& x, const std::optional<Vector>& w, Eigen::Index k) { return wmad(series(x, w, k)); },
        py::arg("x"), py::arg("w") = py::none(), py::arg("k") = 100);
    m.def("relative_mse", &relative_mse, py::arg("estimate"), py::arg("truth"));
    m.def("coverage_curve", &coverage_curve, py::arg("estimates"), py::arg("ses"), py::arg("truths"),
          py::arg("grid") = 101);
}
