#include "cli.hpp"

#include "gbm/estimation.hpp"
#include "gbm/inference.hpp"
#include "gbm/io.hpp"
#include "gbm/linalg.hpp"
#include "gbm/metrics.hpp"
#include "gbm/model.hpp"
#include "gbm/simulation.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#ifndef GBM_VERSION
#define GBM_VERSION "0.0.0"
#endif

namespace gbm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

Error usage(const std::string& m) { return {ErrorKind::Usage, m}; }

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

json vector_json(const Vector& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw input_error("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw input_error("cannot create directory '" + p.string() + "': " + ec.message());
}

// Collects manifest fields while a command runs.
struct Manifest {
    std::string command;
    json config = json::object();
    json inputs = json::object();
    json outputs = json::object();
    json convergence = json::object();
    std::uint64_t seed = 0;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    std::string started = utc_now();

    void input(const std::string& name, const std::string& path) {
        inputs[name] = {{"path", path}, {"digest", io::file_digest(path)}};
    }
    void output(const fs::path& p) { outputs[p.filename().string()] = io::file_digest(p.string()); }

    void write(const fs::path& file) const {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        json j = {{"command", command},
                  {"version", GBM_VERSION},
                  {"seed", seed},
                  {"config", config},
                  {"inputs", inputs},
                  {"outputs", outputs},
                  {"convergence", convergence},
                  {"timing", {{"started_utc", started}, {"wall_seconds", wall}}}};
        write_json(file, j);
    }
};

Matrix with_intercept(const Matrix& M) {
    if (M.cols() >= 1 && (M.col(0).array() == 1.0).all()) return M;
    Matrix out(M.rows(), M.cols() + 1);
    out.col(0).setOnes();
    out.rightCols(M.cols()) = M;
    return out;
}

json prior_json(const PriorConfig& p) {
    return {{"lambda_a", p.lambda_a}, {"lambda_b", p.lambda_b}, {"lambda_c", p.lambda_c},
            {"lambda_d", p.lambda_d}, {"lambda_u", p.lambda_u}, {"lambda_v", p.lambda_v},
            {"lambda_s", p.lambda_s}, {"lambda_t", p.lambda_t}, {"m_s", p.m_s},
            {"m_t", p.m_t}};
}

PriorConfig prior_from_json(const json& j) {
    PriorConfig p;
    p.lambda_a = j.value("lambda_a", p.lambda_a);
    p.lambda_b = j.value("lambda_b", p.lambda_b);
    p.lambda_c = j.value("lambda_c", p.lambda_c);
    p.lambda_d = j.value("lambda_d", p.lambda_d);
    p.lambda_u = j.value("lambda_u", p.lambda_u);
    p.lambda_v = j.value("lambda_v", p.lambda_v);
    p.lambda_s = j.value("lambda_s", p.lambda_s);
    p.lambda_t = j.value("lambda_t", p.lambda_t);
    p.m_s = j.value("m_s", p.m_s);
    p.m_t = j.value("m_t", p.m_t);
    return p;
}

json fit_config_json(const FitConfig& c) {
    return {{"rho", c.rho},           {"tol", c.tol},
            {"max_iter", c.max_iter}, {"epsilon", c.epsilon},
            {"s_floor", c.s_floor},   {"t_floor", c.t_floor},
            {"standardize", c.standardize}, {"init_st_iters", c.init_st_iters},
            {"seed", c.seed},         {"threads", c.threads}};
}

// Parameter blocks as separate files; empty latent blocks are omitted.
void write_params(const fs::path& dir, const GbmParams& p, Manifest* man) {
    auto put = [&](const char* name, const Matrix& m) {
        if (m.size() == 0) return;
        const fs::path f = dir / name;
        io::write_matrix(f.string(), m);
        if (man) man->output(f);
    };
    put("A.csv", p.A);
    put("B.csv", p.B);
    put("C.csv", p.C);
    put("D.csv", p.D);
    put("U.csv", p.U);
    put("V.csv", p.V);
    put("S.csv", p.S);
    put("T.csv", p.T);
}

json params_json(const GbmParams& p) {
    return {{"A", matrix_json(p.A)}, {"B", matrix_json(p.B)}, {"C", matrix_json(p.C)},
            {"D", vector_json(p.D)}, {"U", matrix_json(p.U)}, {"V", matrix_json(p.V)},
            {"S", vector_json(p.S)}, {"T", vector_json(p.T)}, {"omega", p.omega}};
}

GbmParams read_params(const fs::path& dir, Eigen::Index I, Eigen::Index J, Eigen::Index K, Eigen::Index L,
                      Eigen::Index M, double omega) {
    auto need = [&](const char* name) {
        const fs::path f = dir / name;
        if (!fs::exists(f)) throw input_error(std::string("missing parameter block ") + f.string());
        return io::read_matrix(f.string());
    };
    GbmParams p = GbmParams::zeros(I, J, K, L, M);
    p.A = need("A.csv");
    p.B = need("B.csv");
    p.C = need("C.csv");
    if (M > 0) {
        p.D = need("D.csv").col(0);
        p.U = need("U.csv");
        p.V = need("V.csv");
    }
    p.S = need("S.csv").col(0);
    p.T = need("T.csv").col(0);
    p.omega = omega;
    return p;
}

struct LoadedFit {
    GbmParams params;
    CovariateSet cov;
    json result;
    json manifest;
};

LoadedFit load_fit(const fs::path& dir) {
    LoadedFit f;
    f.result = read_json(dir / "result.json");
    if (fs::exists(dir / "manifest.json")) f.manifest = read_json(dir / "manifest.json");
    const Matrix X = io::read_matrix((dir / "X.csv").string());
    const Matrix Z = io::read_matrix((dir / "Z.csv").string());
    f.cov = make_covariates(X, Z);
    const auto& d = f.result.at("dims");
    const Eigen::Index M = d.at("M").get<Eigen::Index>();
    f.params = read_params(dir, X.rows(), Z.rows(), X.cols(), Z.cols(), M, f.result.at("omega").get<double>());
    try {
        check_dimensions(f.params, f.cov);
    } catch (const Error& e) {
        throw input_error(std::string("fit directory '") + dir.string() + "': " + e.what());
    }
    return f;
}

Matrix load_counts(const std::string& path) {
    const Matrix Y = io::read_matrix(path);
    try {
        return DataMatrix::from_real(Y).as_real();
    } catch (const Error& e) {
        throw input_error("'" + path + "': " + e.what());
    }
}

std::vector<Eigen::Index> parse_index_list(const std::string& s, const char* what) {
    std::vector<Eigen::Index> out;
    if (s.empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stol(item) - 1);
        } catch (const std::exception&) {
            throw usage(std::string("cannot parse index list for ") + what + ": '" + s + "'");
        }
    }
    return out;
}

// ---- fit ----
struct FitArgs {
    std::string counts, xfile, zfile, out;
    Eigen::Index latent = 0;
    FitConfig config;
    PriorConfig prior;
    bool no_standardize = false;
};

int cmd_fit(const FitArgs& a, std::ostream& out) {
    Manifest man;
    man.command = "fit";
    const Matrix Y = load_counts(a.counts);
    man.input("counts", a.counts);
    const auto I = Y.rows(), J = Y.cols();
    Matrix X = Matrix::Ones(I, 1), Z = Matrix::Ones(J, 1);
    if (!a.xfile.empty()) {
        X = with_intercept(io::read_matrix(a.xfile));
        man.input("row_covariates", a.xfile);
        if (X.rows() != I)
            throw input_error("row covariates '" + a.xfile + "' have " + std::to_string(X.rows()) +
                              " rows but counts '" + a.counts + "' have " + std::to_string(I));
    }
    if (!a.zfile.empty()) {
        Z = with_intercept(io::read_matrix(a.zfile));
        man.input("col_covariates", a.zfile);
        if (Z.rows() != J)
            throw input_error("column covariates '" + a.zfile + "' have " + std::to_string(Z.rows()) +
                              " rows but counts '" + a.counts + "' have " + std::to_string(J) + " columns");
    }
    FitConfig cfg = a.config;
    cfg.standardize = !a.no_standardize;
    cfg.threads = resolve_threads(cfg.threads);
    man.seed = cfg.seed;
    man.config = {{"fit", fit_config_json(cfg)}, {"prior", prior_json(a.prior)}, {"latent", a.latent}};
    const CovariateSet cov = make_covariates(X, Z);
    const FitResult res = fit_real(Y, cov, a.latent, a.prior, cfg);

    const fs::path dir(a.out);
    ensure_dir(dir);
    write_params(dir, res.params, &man);
    io::write_matrix((dir / "X.csv").string(), res.cov.X);
    man.output(dir / "X.csv");
    io::write_matrix((dir / "Z.csv").string(), res.cov.Z);
    man.output(dir / "Z.csv");
    Matrix trace(static_cast<Eigen::Index>(res.trace.size()), 2);
    for (size_t k = 0; k < res.trace.size(); ++k) {
        trace(static_cast<Eigen::Index>(k), 0) = static_cast<double>(k);
        trace(static_cast<Eigen::Index>(k), 1) = res.trace[k];
    }
    io::write_matrix((dir / "trace.csv").string(), trace, {"iteration", "log_posterior"});
    man.output(dir / "trace.csv");
    json result = params_json(res.params);
    result["dims"] = {{"I", I}, {"J", J}, {"K", res.cov.K()}, {"L", res.cov.L()}, {"M", a.latent}};
    result["converged"] = res.converged;
    result["iterations"] = res.iterations;
    result["trace"] = res.trace;
    write_json(dir / "result.json", result);
    man.output(dir / "result.json");
    man.convergence = {{"converged", res.converged},
                       {"iterations", res.iterations},
                       {"final_log_posterior", res.trace.back()},
                       {"clamp_events", res.clamp_events},
                       {"warnings", res.warnings}};
    man.write(dir / "manifest.json");
    out << "fit: " << (res.converged ? "converged" : "did not converge") << " after " << res.iterations
        << " iterations; log-posterior " << io::format_double(res.trace.back()) << "\n";
    return kOk;
}

// ---- infer ----
struct InferArgs {
    std::string fit_dir, counts, out;
    std::vector<std::string> tests;
    double level = 0.95;
    bool oracle = false;
    int threads = 0;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
    Manifest man;
    man.command = "infer";
    const LoadedFit f = load_fit(a.fit_dir);
    std::string counts = a.counts;
    if (counts.empty()) {
        if (f.manifest.contains("inputs") && f.manifest["inputs"].contains("counts"))
            counts = f.manifest["inputs"]["counts"]["path"].get<std::string>();
        else
            throw usage("--counts is required when the fit manifest does not record the counts path");
    }
    const Matrix Y = load_counts(counts);
    man.input("counts", counts);
    man.input("fit_result", (fs::path(a.fit_dir) / "result.json").string());
    if (Y.rows() != f.cov.I() || Y.cols() != f.cov.J())
        throw input_error("counts '" + counts + "' do not match the fit in '" + a.fit_dir + "'");
    PriorConfig prior;
    if (f.manifest.contains("config") && f.manifest["config"].contains("prior"))
        prior = prior_from_json(f.manifest["config"]["prior"]);
    const int threads = resolve_threads(a.threads);
    man.config = {{"prior", prior_json(prior)}, {"level", a.level}, {"tests", a.tests},
                  {"oracle_full_fisher", a.oracle}, {"threads", threads}};
    if (a.oracle) {
        const auto n = oracle_parameter_count(f.cov, f.params.M());
        if (n > kOracleMaxParams)
            throw size_error("--oracle-full-fisher refused: " + std::to_string(n) + " parameters exceed the limit of " +
                             std::to_string(kOracleMaxParams));
    }
    const InferenceResult r = standard_errors(Y, f.cov, f.params, prior, threads);
    const fs::path dir(a.out);
    ensure_dir(dir);
    auto put = [&](const char* name, const Matrix& m) {
        if (m.size() == 0) return;
        io::write_matrix((dir / name).string(), m);
        man.output(dir / name);
    };
    put("se_A.csv", r.se_A);
    put("se_B.csv", r.se_B);
    put("se_C.csv", r.se_C);
    put("se_U.csv", r.se_U);
    put("se_V.csv", r.se_V);
    put("se_S.csv", r.se_S);
    put("se_T.csv", r.se_T);

    for (const auto& t : a.tests) {
        const auto colon = t.find(':');
        const std::string block = t.substr(0, colon);
        Eigen::Index col = 0;
        if (colon != std::string::npos) {
            try {
                col = std::stol(t.substr(colon + 1)) - 1;
            } catch (const std::exception&) {
                throw usage("--test expects BLOCK:COLUMN, e.g. B:4");
            }
        }
        const Matrix* est = nullptr;
        const Matrix* se = nullptr;
        Matrix sv, ev;
        if (block == "A") est = &f.params.A, se = &r.se_A;
        else if (block == "B") est = &f.params.B, se = &r.se_B;
        else if (block == "C") est = &f.params.C, se = &r.se_C;
        else if (block == "U") est = &f.params.U, se = &r.se_U;
        else if (block == "V") est = &f.params.V, se = &r.se_V;
        else if (block == "S") ev = f.params.S, sv = r.se_S, est = &ev, se = &sv;
        else if (block == "T") ev = f.params.T, sv = r.se_T, est = &ev, se = &sv;
        else throw usage("--test block must be one of A, B, C, U, V, S, T (got '" + block + "')");
        if (col < 0 || col >= est->cols())
            throw usage("--test column out of range for block " + block + " (has " + std::to_string(est->cols()) +
                        " columns)");
        const WaldResult w = wald_tests(est->col(col), se->col(col), a.level);
        Matrix tab(est->rows(), 7);
        for (Eigen::Index i = 0; i < est->rows(); ++i) {
            tab(i, 0) = static_cast<double>(i + 1);
            tab(i, 1) = (*est)(i, col);
            tab(i, 2) = (*se)(i, col);
            tab(i, 3) = w.z(i);
            tab(i, 4) = w.p_values(i);
            tab(i, 5) = w.ci_lower(i);
            tab(i, 6) = w.ci_upper(i);
        }
        const std::string name = "wald_" + block + "_" + std::to_string(col + 1) + ".csv";
        io::write_matrix((dir / name).string(), tab, {"index", "estimate", "se", "z", "p_value", "ci_lower", "ci_upper"});
        man.output(dir / name);
    }
    if (a.oracle) {
        const OracleResult o = full_augmented_fisher_oracle(Y, f.cov, f.params, prior);
        auto root = [](const Vector& v) { return v.cwiseMax(0.0).cwiseSqrt().eval(); };
        json oj = {{"n_params", o.n_params},
                   {"se_A", vector_json(root(o.varA))},
                   {"se_B", vector_json(root(o.varB))},
                   {"se_C", vector_json(root(o.varC))},
                   {"se_U", vector_json(root(o.varU))},
                   {"se_V", vector_json(root(o.varV))}};
        write_json(dir / "oracle_full_fisher.json", oj);
        man.output(dir / "oracle_full_fisher.json");
    }
    man.convergence = {{"warnings", r.warnings}};
    man.write(dir / "manifest.json");
    out << "infer: standard errors written to " << dir.string() << "\n";
    return kOk;
}

// ---- simulate ----
struct SimArgs {
    std::string scheme = "NB/Normal/Normal", dims = "200x50x2x2x1", out;
    std::uint64_t seed = 0, replicate = 0;
};

int cmd_simulate(const SimArgs& a, std::ostream& out) {
    Manifest man;
    man.command = "simulate";
    SimScheme s;
    parse_scheme(a.scheme, s);
    parse_dims(a.dims, s);
    s.seed = a.seed;
    try {
        s.validate();
    } catch (const Error& e) {
        throw usage(e.what());
    }
    man.seed = a.seed;
    man.config = {{"scheme", scheme_string(s)}, {"dims", a.dims}, {"replicate", a.replicate}};
    const SimData d = simulate(s, a.replicate);
    const fs::path dir(a.out);
    ensure_dir(dir / "truth");
    auto put = [&](const fs::path& p, const Matrix& m) {
        io::write_matrix(p.string(), m);
        man.output(p);
    };
    put(dir / "Y.csv", d.Y.as_real());
    put(dir / "X.csv", d.truth.cov.X);
    put(dir / "Z.csv", d.truth.cov.Z);
    write_params(dir / "truth", d.truth.params0, nullptr);
    json tj = {{"scheme", scheme_string(s)},
               {"dims", {{"I", s.I}, {"J", s.J}, {"K", s.K}, {"L", s.L}, {"M", s.M}}},
               {"seed", s.seed},
               {"replicate", a.replicate},
               {"omega", d.truth.params0.omega},
               {"clamp_events", d.truth.clamp_events}};
    write_json(dir / "truth" / "truth.json", tj);
    for (const auto& e : fs::directory_iterator(dir / "truth")) {
        man.outputs["truth/" + e.path().filename().string()] = io::file_digest(e.path().string());
    }
    man.convergence = {{"copula_clamp_events", d.truth.clamp_events}};
    man.write(dir / "manifest.json");
    out << "simulate: " << scheme_string(s) << " " << a.dims << " written to " << dir.string() << "\n";
    return kOk;
}

// ---- evaluate ----
struct EvalArgs {
    std::string fit_dir, truth_dir, se_dir, out;
};

Vector drop_first(const Matrix& m) {
    Vector v = Eigen::Map<const Vector>(m.data(), m.size());
    return v.tail(v.size() - 1);
}

int cmd_evaluate(const EvalArgs& a, std::ostream& out) {
    Manifest man;
    man.command = "evaluate";
    const LoadedFit f = load_fit(a.fit_dir);
    const fs::path td(a.truth_dir);
    const json tj = read_json(td / "truth.json");
    const auto& d = tj.at("dims");
    const GbmParams truth = read_params(td, d.at("I"), d.at("J"), d.at("K"), d.at("L"), d.at("M"),
                                        tj.at("omega").get<double>());
    man.input("fit_result", (fs::path(a.fit_dir) / "result.json").string());
    man.input("truth", (td / "truth.json").string());
    try {
        check_dimensions(truth, f.cov);
    } catch (const Error& e) {
        throw input_error(std::string("truth and fit shapes differ: ") + e.what());
    }
    if (truth.M() != f.params.M()) throw input_error("truth and fit have different latent dimensions");
    const LatentAlignment al = latent_alignment(f.params, truth);
    const GbmParams est = align_latent_factors(f.params, truth);
    json mse = json::object();
    auto rm = [&](const char* name, const Matrix& e, const Matrix& t) {
        if (t.size() == 0 || t.squaredNorm() == 0) return;
        mse[name] = relative_mse(e, t);
    };
    rm("A", est.A, truth.A);
    rm("B", est.B, truth.B);
    rm("C", est.C, truth.C);
    rm("D", est.D, truth.D);
    rm("U", est.U, truth.U);
    rm("V", est.V, truth.V);
    rm("S", est.S, truth.S);
    rm("T", est.T.array().exp().matrix(), truth.T.array().exp().matrix());
    mse["omega"] = std::pow(est.omega - truth.omega, 2) / std::pow(truth.omega, 2);
    json report = {{"relative_mse", mse}};
    if (!a.se_dir.empty()) {
        const fs::path sd(a.se_dir);
        auto se = [&](const char* name) { return io::read_matrix((sd / name).string()); };
        json cov = json::object();
        auto curve = [&](const char* name, const Matrix& e, const Matrix& s, const Matrix& t) {
            if (e.size() == 0) return;
            if (e.rows() != s.rows() || e.cols() != s.cols())
                throw input_error(std::string("standard errors for ") + name + " do not match the estimate shape");
            const auto c = coverage_curve(e, s, t);
            json pts = json::array();
            for (const auto& [target, actual] : c) pts.push_back({target, actual});
            cov[name] = {{"curve", pts}, {"at_0.50", c[50].second}, {"at_0.95", c[95].second}};
        };
        curve("A", est.A, se("se_A.csv"), truth.A);
        curve("B", est.B, se("se_B.csv"), truth.B);
        curve("C", drop_first(est.C), drop_first(se("se_C.csv")), drop_first(truth.C));
        if (est.M() > 0) {
            curve("U", est.U, apply_alignment(se("se_U.csv"), al, false), truth.U);
            curve("V", est.V, apply_alignment(se("se_V.csv"), al, false), truth.V);
        }
        curve("S", est.S, se("se_S.csv"), truth.S);
        curve("T", est.T, se("se_T.csv"), truth.T);
        report["coverage"] = cov;
        report["coverage_excludes"] = {"c11", "D", "omega"};
    }
    report["T_compared_in"] = "dispersion space exp(T)";
    const fs::path outp(a.out);
    if (outp.has_parent_path()) ensure_dir(outp.parent_path());
    write_json(outp, report);
    man.output(outp);
    man.write(fs::path(outp.string() + ".manifest.json"));
    out << report["relative_mse"].dump() << "\n";
    return kOk;
}

// ---- score ----
struct ScoreArgs {
    std::string series, weights, out;
    Eigen::Index bandwidth = 100;
};

int cmd_score(const ScoreArgs& a, std::ostream& out) {
    Manifest man;
    man.command = "score";
    const io::Table xs = io::read_table(a.series);
    man.input("series", a.series);
    Matrix W = Matrix::Ones(xs.values.rows(), xs.values.cols());
    if (!a.weights.empty()) {
        W = io::read_matrix(a.weights);
        man.input("weights", a.weights);
        if (W.rows() != xs.values.rows() || W.cols() != xs.values.cols())
            throw input_error("weights '" + a.weights + "' do not match series '" + a.series + "'");
        if ((W.array() <= 0).any()) throw input_error("weights must be positive");
    }
    if (a.bandwidth < 0 || a.bandwidth % 2) throw usage("--bandwidth must be an even nonnegative integer");
    man.config = {{"bandwidth", a.bandwidth}};
    json cols = json::array();
    for (Eigen::Index c = 0; c < xs.values.cols(); ++c) {
        WeightedSeries s{xs.values.col(c), W.col(c), a.bandwidth};
        json entry = {{"column", c + 1}, {"lrse", lrse(s)}, {"wmad", wmad(s)}};
        if (!xs.header.empty()) entry["name"] = xs.header[static_cast<size_t>(c)];
        cols.push_back(entry);
    }
    json report = {{"bandwidth", a.bandwidth}, {"series", cols}};
    const fs::path outp(a.out);
    if (outp.has_parent_path()) ensure_dir(outp.parent_path());
    write_json(outp, report);
    man.output(outp);
    man.write(fs::path(outp.string() + ".manifest.json"));
    out << cols.dump() << "\n";
    return kOk;
}

// ---- residualize ----
struct ResidArgs {
    std::string fit_dir, counts, out, keep_x, keep_z, keep_u;
    double epsilon = 0.125;
};

int cmd_residualize(const ResidArgs& a, std::ostream& out) {
    Manifest man;
    man.command = "residualize";
    const LoadedFit f = load_fit(a.fit_dir);
    std::string counts = a.counts;
    if (counts.empty() && f.manifest.contains("inputs") && f.manifest["inputs"].contains("counts"))
        counts = f.manifest["inputs"]["counts"]["path"].get<std::string>();
    if (counts.empty()) throw usage("--counts is required");
    const Matrix Y = load_counts(counts);
    man.input("counts", counts);
    if (Y.rows() != f.cov.I() || Y.cols() != f.cov.J())
        throw input_error("counts '" + counts + "' do not match the fit in '" + a.fit_dir + "'");
    auto to_set = [](const std::vector<Eigen::Index>& v) { return std::set<Eigen::Index>(v.begin(), v.end()); };
    const auto kx = to_set(parse_index_list(a.keep_x, "--keep-x"));
    const auto kz = to_set(parse_index_list(a.keep_z, "--keep-z"));
    const auto ku = to_set(parse_index_list(a.keep_u, "--keep-u"));
    man.config = {{"keep_x", a.keep_x}, {"keep_z", a.keep_z}, {"keep_u", a.keep_u}, {"epsilon", a.epsilon}};
    const Matrix eps = residuals(Y, compute_eta(f.params, f.cov), a.epsilon);
    Matrix pr;
    try {
        pr = partial_residuals(f.params, f.cov, eps, kx, kz, ku);
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Index) throw usage(e.what());
        throw;
    }
    const fs::path outp(a.out);
    if (outp.has_parent_path()) ensure_dir(outp.parent_path());
    io::write_matrix(outp.string(), pr);
    man.output(outp);
    man.write(fs::path(outp.string() + ".manifest.json"));
    out << "residualize: wrote " << outp.string() << "\n";
    return kOk;
}

int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::Usage:
        case ErrorKind::Size:
            return kUsage;
        case ErrorKind::Numeric:
        case ErrorKind::Rank:
            return kNumeric;
        default:
            return kInput;
    }
}

void add_prior_flags(CLI::App* c, PriorConfig& p) {
    c->add_option("--lambda-a", p.lambda_a, "Prior precision for A")->capture_default_str();
    c->add_option("--lambda-b", p.lambda_b, "Prior precision for B")->capture_default_str();
    c->add_option("--lambda-c", p.lambda_c, "Prior precision for C")->capture_default_str();
    c->add_option("--lambda-d", p.lambda_d, "Prior precision for D")->capture_default_str();
    c->add_option("--lambda-u", p.lambda_u, "Prior precision for U")->capture_default_str();
    c->add_option("--lambda-v", p.lambda_v, "Prior precision for V")->capture_default_str();
    c->add_option("--lambda-s", p.lambda_s, "Prior precision for S")->capture_default_str();
    c->add_option("--lambda-t", p.lambda_t, "Prior precision for T")->capture_default_str();
    c->add_option("--m-s", p.m_s, "Prior mean for S")->capture_default_str();
    c->add_option("--m-t", p.m_t, "Prior mean for T")->capture_default_str();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Generalized bilinear models for count matrices: fitting, inference, simulation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", GBM_VERSION);

    FitArgs fa;
    auto* fit_cmd = app.add_subcommand("fit", "Fit an NB-GBM by MAP estimation");
    fit_cmd->add_option("--counts", fa.counts, "I x J count matrix")->required()->check(CLI::ExistingFile);
    fit_cmd->add_option("--row-covariates", fa.xfile, "I x K row covariates (intercept added if absent)")
        ->check(CLI::ExistingFile);
    fit_cmd->add_option("--col-covariates", fa.zfile, "J x L column covariates (intercept added if absent)")
        ->check(CLI::ExistingFile);
    fit_cmd->add_option("--latent", fa.latent, "Number of latent factors M")->capture_default_str();
    fit_cmd->add_option("--out", fa.out, "Output directory")->required();
    fit_cmd->add_option("--max-iter", fa.config.max_iter, "Iteration cap")->capture_default_str();
    fit_cmd->add_option("--tol", fa.config.tol, "Relative change tolerance")->capture_default_str();
    fit_cmd->add_option("--rho", fa.config.rho, "RMS step bound")->capture_default_str();
    fit_cmd->add_option("--epsilon", fa.config.epsilon, "Residual pseudocount")->capture_default_str();
    fit_cmd->add_option("--s-floor", fa.config.s_floor, "Bias-correction floor for S")->capture_default_str();
    fit_cmd->add_option("--t-floor", fa.config.t_floor, "Bias-correction floor for T")->capture_default_str();
    fit_cmd->add_option("--init-st-iters", fa.config.init_st_iters, "Initial S/T cycles")->capture_default_str();
    fit_cmd->add_option("--seed", fa.config.seed, "Seed for the latent initialization")->capture_default_str();
    fit_cmd->add_option("--threads", fa.config.threads, "Worker threads (default: GBM_THREADS or 1)");
    fit_cmd->add_flag("--no-standardize", fa.no_standardize, "Use covariates as given");
    add_prior_flags(fit_cmd, fa.prior);

    InferArgs ia;
    auto* inf_cmd = app.add_subcommand("infer", "Approximate standard errors and Wald tests");
    inf_cmd->add_option("--fit", ia.fit_dir, "Fit output directory")->required()->check(CLI::ExistingDirectory);
    inf_cmd->add_option("--counts", ia.counts, "Count matrix (default: path recorded in the fit manifest)");
    inf_cmd->add_option("--out", ia.out, "Output directory")->required();
    inf_cmd->add_option("--test", ia.tests, "Wald tests for BLOCK:COLUMN, e.g. B:4 (repeatable)");
    inf_cmd->add_option("--level", ia.level, "Confidence level")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    inf_cmd->add_flag("--oracle-full-fisher", ia.oracle, "Also invert the full bordered Fisher matrix (small problems)");
    inf_cmd->add_option("--threads", ia.threads, "Worker threads (default: GBM_THREADS or 1)");

    SimArgs sa;
    auto* sim_cmd = app.add_subcommand("simulate", "Generate a synthetic data set with its truth");
    sim_cmd->add_option("--scheme", sa.scheme, "Outcome/Covariates/Parameters")->capture_default_str();
    sim_cmd->add_option("--dims", sa.dims, "IxJxKxLxM")->capture_default_str();
    sim_cmd->add_option("--seed", sa.seed, "Seed")->capture_default_str();
    sim_cmd->add_option("--replicate", sa.replicate, "Replicate index")->capture_default_str();
    sim_cmd->add_option("--out", sa.out, "Output directory")->required();

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("evaluate", "Compare a fit against simulation truth");
    eval_cmd->add_option("--fit", ea.fit_dir, "Fit output directory")->required()->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--truth", ea.truth_dir, "Truth directory")->required()->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--se", ea.se_dir, "Inference output directory")->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--out", ea.out, "Report file (JSON)")->required();

    ScoreArgs sc;
    auto* score_cmd = app.add_subcommand("score", "LRSE and WMAD of weighted series");
    score_cmd->add_option("--series", sc.series, "n x p table, one series per column")->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--weights", sc.weights, "n x p positive precisions (default: all ones)")
        ->check(CLI::ExistingFile);
    score_cmd->add_option("--bandwidth", sc.bandwidth, "Even window bandwidth k")->capture_default_str();
    score_cmd->add_option("--out", sc.out, "Report file (JSON)")->required();

    ResidArgs ra;
    auto* res_cmd = app.add_subcommand("residualize", "Partial residuals from a fit");
    res_cmd->add_option("--fit", ra.fit_dir, "Fit output directory")->required()->check(CLI::ExistingDirectory);
    res_cmd->add_option("--counts", ra.counts, "Count matrix (default: path recorded in the fit manifest)");
    res_cmd->add_option("--keep-x", ra.keep_x, "1-based X columns to retain, comma separated");
    res_cmd->add_option("--keep-z", ra.keep_z, "1-based Z columns to retain, comma separated");
    res_cmd->add_option("--keep-u", ra.keep_u, "1-based latent factors to retain, comma separated");
    res_cmd->add_option("--epsilon", ra.epsilon, "Residual pseudocount")->capture_default_str();
    res_cmd->add_option("--out", ra.out, "Output file")->required();

    std::vector<const char*> argv;
    for (const auto& s : args) argv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForVersion& e) {
        out << GBM_VERSION << "\n";
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return kUsage;
    }

    try {
        if (*fit_cmd) return cmd_fit(fa, out);
        if (*inf_cmd) return cmd_infer(ia, out);
        if (*sim_cmd) return cmd_simulate(sa, out);
        if (*eval_cmd) return cmd_evaluate(ea, out);
        if (*score_cmd) return cmd_score(sc, out);
        if (*res_cmd) return cmd_residualize(ra, out);
    } catch (const Error& e) {
        err << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const json::exception& e) {
        err << "input error: malformed structured file: " << e.what() << "\n";
        return kInput;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kInput;
    }
    return kUsage;
}

}  // namespace gbm::cli
