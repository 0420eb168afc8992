#include "gbm/io.hpp"

#include "../tools/cli.hpp"
#include "support.hpp"

#include <json.hpp>

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace gbm;
using namespace gbm::test;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("gbm_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Run {
    int code;
    std::string out, err;
};

Run gbm_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "gbm");
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json load_json(const std::string& path) { return json::parse(slurp(path)); }

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }
}  // namespace

TEST_CASE("io: write then read round-trips exactly") {
    TempDir tmp("io");
    Rng rng = make_rng(90, Stream::Test);
    Matrix m = gaussian(rng, 7, 4, 1e3);
    m(0, 0) = 1e-300;
    m(1, 1) = -0.1;
    m(2, 2) = 123456789.123456789;
    io::write_matrix(tmp / "m.csv", m);
    CHECK(io::read_matrix(tmp / "m.csv") == m);
    io::write_matrix(tmp / "h.tsv", m, {"a", "b", "c", "d"}, '\t');
    const io::Table t = io::read_table(tmp / "h.tsv");
    CHECK(t.header == std::vector<std::string>{"a", "b", "c", "d"});
    CHECK(t.values == m);
    const Vector v = m.col(2);
    io::write_vector(tmp / "v.csv", v, "x");
    CHECK(io::read_vector(tmp / "v.csv") == v);
}

TEST_CASE("io: parse errors name line and column") {
    TempDir tmp("ioerr");
    write_text(tmp / "bad.csv", "1,2,3\n4,oops,6\n");
    try {
        io::read_matrix(tmp / "bad.csv");
        FAIL("expected an input error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Input);
        const std::string msg = e.what();
        CHECK(msg.find("line 2") != std::string::npos);
        CHECK(msg.find("column 2") != std::string::npos);
    }
    write_text(tmp / "ragged.csv", "1,2,3\n4,5\n");
    CHECK_THROWS_AS(io::read_matrix(tmp / "ragged.csv"), Error);
    CHECK_THROWS_AS(io::read_matrix(tmp / "missing.csv"), Error);
    write_text(tmp / "a.csv", "1,2\n");
    write_text(tmp / "b.csv", "1,2\n");
    CHECK(io::file_digest(tmp / "a.csv") == io::file_digest(tmp / "b.csv"));
    CHECK(io::file_digest(tmp / "a.csv").size() == 16);
}

TEST_CASE("cli: simulate, fit, infer, evaluate") {
    TempDir tmp("pipeline");
    const auto sim = tmp / "sim";
    REQUIRE(gbm_cli({"simulate", "--scheme", "NB/Normal/Normal", "--dims", "60x20x3x2x1", "--seed", "5", "--out", sim})
                .code == 0);
    for (const char* f : {"Y.csv", "X.csv", "Z.csv", "manifest.json", "truth/truth.json", "truth/A.csv"})
        CHECK(fs::exists(fs::path(sim) / f));

    const Run fr = gbm_cli({"fit", "--counts", sim + "/Y.csv", "--row-covariates", sim + "/X.csv", "--col-covariates",
                            sim + "/Z.csv", "--latent", "1", "--out", tmp / "fit"});
    REQUIRE(fr.code == 0);
    const json res = load_json(tmp / "fit/result.json");
    CHECK(res["dims"]["K"] == 3);
    CHECK(res["dims"]["L"] == 2);
    CHECK(res["converged"].get<bool>());
    const json man = load_json(tmp / "fit/manifest.json");
    for (const char* key : {"command", "version", "seed", "config", "inputs", "outputs", "convergence", "timing"})
        CHECK(man.contains(key));
    CHECK(man["config"]["prior"]["lambda_a"] == 1.0);
    CHECK(man["config"]["prior"]["lambda_s"] == 1.0);
    CHECK(man["config"]["fit"]["max_iter"] == 50);
    CHECK(man["config"]["fit"]["epsilon"] == 0.125);

    const Run ir = gbm_cli({"infer", "--fit", tmp / "fit", "--out", tmp / "se", "--test", "B:2"});
    REQUIRE(ir.code == 0);
    for (const auto& e : fs::directory_iterator(tmp / "se")) {
        const std::string n = e.path().filename().string();
        CHECK(n != "se_D.csv");
        CHECK(n.find("omega") == std::string::npos);
    }
    const io::Table wald = io::read_table(tmp / "se/wald_B_2.csv");
    CHECK(wald.header.size() == 7);
    CHECK(wald.values.rows() == 60);
    CHECK((wald.values.col(4).array() >= 0).all());
    CHECK((wald.values.col(4).array() <= 1).all());

    const Run er = gbm_cli({"evaluate", "--fit", tmp / "fit", "--truth", sim + "/truth", "--se", tmp / "se", "--out",
                            tmp / "eval.json"});
    REQUIRE(er.code == 0);
    const json ev = load_json(tmp / "eval.json");
    CHECK(ev["relative_mse"].contains("A"));
    CHECK(!ev["coverage"].contains("D"));
    CHECK(!ev["coverage"].contains("omega"));
    CHECK(ev["coverage_excludes"][0] == "c11");
    CHECK(fs::exists(tmp / "eval.json.manifest.json"));

    const Run rr = gbm_cli({"residualize", "--fit", tmp / "fit", "--keep-x", "2", "--out", tmp / "resid.csv"});
    REQUIRE(rr.code == 0);
    const Matrix R = io::read_matrix(tmp / "resid.csv");
    CHECK(R.rows() == 60);
    CHECK(R.cols() == 20);
    CHECK(R.allFinite());

    CHECK(gbm_cli({"infer", "--fit", tmp / "fit", "--out", tmp / "se2", "--test", "Q:1"}).code == 2);
    CHECK(gbm_cli({"infer", "--fit", tmp / "fit", "--out", tmp / "se2", "--test", "B:99"}).code == 2);
}

TEST_CASE("cli: omitted covariates give intercept-only designs") {
    TempDir tmp("intercepts");
    REQUIRE(gbm_cli({"simulate", "--dims", "30x12x1x1x0", "--seed", "3", "--out", tmp / "sim"}).code == 0);
    REQUIRE(gbm_cli({"fit", "--counts", tmp / "sim/Y.csv", "--out", tmp / "fit"}).code == 0);
    const json res = load_json(tmp / "fit/result.json");
    CHECK(res["dims"]["K"] == 1);
    CHECK(res["dims"]["L"] == 1);
    CHECK(res["dims"]["M"] == 0);
    CHECK(!fs::exists(tmp / "fit/U.csv"));
}

TEST_CASE("cli: identical seeds give identical outputs and manifests differ only in timing") {
    TempDir tmp("repro");
    for (const char* d : {"a", "b"}) {
        REQUIRE(gbm_cli({"simulate", "--dims", "40x15x2x2x1", "--seed", "11", "--out", tmp / d}).code == 0);
        REQUIRE(gbm_cli({"fit", "--counts", tmp / (std::string(d) + "/Y.csv"), "--row-covariates",
                         tmp / (std::string(d) + "/X.csv"), "--latent", "1", "--out", tmp / (std::string(d) + "_fit")})
                    .code == 0);
    }
    for (const char* f : {"Y.csv", "X.csv", "truth/U.csv"}) CHECK(slurp(tmp / (std::string("a/") + f)) == slurp(tmp / (std::string("b/") + f)));
    for (const char* f : {"A.csv", "U.csv", "S.csv", "result.json"})
        CHECK(slurp(tmp / (std::string("a_fit/") + f)) == slurp(tmp / (std::string("b_fit/") + f)));
    json ma = load_json(tmp / "a_fit/manifest.json"), mb = load_json(tmp / "b_fit/manifest.json");
    ma.erase("timing");
    mb.erase("timing");
    ma["inputs"]["counts"].erase("path");
    mb["inputs"]["counts"].erase("path");
    ma["inputs"]["row_covariates"].erase("path");
    mb["inputs"]["row_covariates"].erase("path");
    CHECK(ma == mb);
    REQUIRE(gbm_cli({"simulate", "--dims", "40x15x2x2x1", "--seed", "11", "--replicate", "1", "--out", tmp / "c"}).code == 0);
    CHECK(slurp(tmp / "a/Y.csv") != slurp(tmp / "c/Y.csv"));
}

TEST_CASE("cli: usage and input errors") {
    TempDir tmp("errors");
    const Run bad = gbm_cli({"simulate", "--scheme", "NB/Normal/Weird", "--out", tmp / "x"});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("Gamma") != std::string::npos);
    CHECK(gbm_cli({"simulate", "--dims", "5x5", "--out", tmp / "x"}).code == 2);
    CHECK(gbm_cli({"frobnicate"}).code == 2);
    CHECK(gbm_cli({"fit", "--counts", tmp / "none.csv", "--out", tmp / "f"}).code == 2);
    write_text(tmp / "bad.csv", "1,2\n3,x\n");
    CHECK(gbm_cli({"fit", "--counts", tmp / "bad.csv", "--out", tmp / "f"}).code == 3);
    write_text(tmp / "neg.csv", "1,2\n3,-1\n");
    CHECK(gbm_cli({"fit", "--counts", tmp / "neg.csv", "--out", tmp / "f"}).code == 3);
}

TEST_CASE("cli: oracle size guard") {
    TempDir tmp("oracle");
    Matrix Y = Matrix::Ones(1500, 600);
    Y(0, 0) = 3;
    Y(7, 5) = 0;
    io::write_matrix(tmp / "Y.csv", Y);
    REQUIRE(gbm_cli({"fit", "--counts", tmp / "Y.csv", "--max-iter", "1", "--out", tmp / "fit"}).code == 0);
    const Run r = gbm_cli({"infer", "--fit", tmp / "fit", "--out", tmp / "se", "--oracle-full-fisher"});
    CHECK(r.code == 2);
    CHECK(!r.err.empty());
}

TEST_CASE("cli: score") {
    TempDir tmp("score");
    Matrix x(300, 2), w = Matrix::Ones(300, 2);
    x.col(0).setConstant(2.0);
    x.col(1) = Vector::LinSpaced(300, 0, 299);
    io::write_matrix(tmp / "x.csv", x, {"flat", "ramp"});
    REQUIRE(gbm_cli({"score", "--series", tmp / "x.csv", "--bandwidth", "10", "--out", tmp / "s.json"}).code == 0);
    const json s = load_json(tmp / "s.json");
    CHECK(s["series"][0]["lrse"].get<double>() < 1e-13);
    CHECK(s["series"][0]["wmad"].get<double>() < 1e-12);
    CHECK(s["series"][0]["name"] == "flat");
    CHECK(s["series"][1]["wmad"].get<double>() == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(fs::exists(tmp / "s.json.manifest.json"));
    w(3, 1) = 0;
    io::write_matrix(tmp / "w.csv", w);
    CHECK(gbm_cli({"score", "--series", tmp / "x.csv", "--weights", tmp / "w.csv", "--out", tmp / "t.json"}).code == 3);
    CHECK(gbm_cli({"score", "--series", tmp / "x.csv", "--bandwidth", "3", "--out", tmp / "t.json"}).code == 2);
}
