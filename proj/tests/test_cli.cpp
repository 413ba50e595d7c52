#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "dknn/cli.hpp"
#include "dknn/featurepack.hpp"
#include "dknn/geometry.hpp"
#include "oracle.hpp"

using namespace dknn;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path workdir(const std::string& name)
{
    const fs::path dir = fs::current_path() / "cli_work" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json model_manifest(const fs::path& p)
{
    const std::string bytes = slurp(p);
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    return nlohmann::json::parse(bytes.substr(12, len));
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text)
{
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

std::vector<std::string> generate_args(const fs::path& out, const std::string& sigma = "0.05")
{
    return {"generate", "--classes", "10", "--dim", "64", "--per-class", "500", "--sigma", sigma, "--seed", "7",
            "--out", out.string()};
}

}  // namespace

TEST_CASE("generate writes a valid, reproducible pack")
{
    const fs::path dir = workdir("generate");
    const Result r = run(generate_args(dir / "id.fpk"));
    REQUIRE(r.code == 0);
    const FeaturePack p = load_pack(dir / "id.fpk");
    CHECK_NOTHROW(p.validate());
    CHECK(p.rows() == 5000);
    CHECK(p.dim() == 64);
    CHECK(p.num_classes == 10);
    CHECK(r.err.find("n=5000") != std::string::npos);

    REQUIRE(run(generate_args(dir / "again.fpk")).code == 0);
    CHECK(slurp(dir / "id.fpk") == slurp(dir / "again.fpk"));

    const Result bad = run({"generate", "--classes", "100", "--dim", "64", "--per-class", "5", "--sigma", "0.1",
                            "--out", (dir / "bad.fpk").string()});
    CHECK(bad.code != 0);
    CHECK(bad.err.find("exceed") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "bad.fpk"));
}

TEST_CASE("fit records the principal dimension and validates flags")
{
    const fs::path dir = workdir("fit");
    REQUIRE(run(generate_args(dir / "id.fpk")).code == 0);
    const Result r = run({"fit", "--train", (dir / "id.fpk").string(), "--out", (dir / "m.dknm").string(), "--k",
                          "10", "--d-rule", "fixed:9", "--json-summary"});
    REQUIRE(r.code == 0);
    CHECK(model_manifest(dir / "m.dknm").at("d") == 9);
    const auto summary = nlohmann::json::parse(r.out);
    CHECK(summary.at("d_used") == 9);
    CHECK(summary.at("rho").get<double>() > 1.0);
    CHECK(r.err.find("sigma_r") != std::string::npos);

    const Result alpha = run({"fit", "--train", (dir / "id.fpk").string(), "--out", (dir / "x.dknm").string(),
                              "--alpha", "1.5"});
    CHECK(alpha.code != 0);
    CHECK_FALSE(alpha.err.empty());
    CHECK_FALSE(fs::exists(dir / "x.dknm"));

    const Result big_k = run({"fit", "--train", (dir / "id.fpk").string(), "--out", (dir / "x.dknm").string(),
                              "--k", "5000"});
    CHECK(big_k.code == 1);

    const Result missing = run({"fit", "--train", (dir / "nope.fpk").string(), "--out", (dir / "x.dknm").string()});
    CHECK(missing.code != 0);
}

TEST_CASE("fit with a variance rule matches the eigenvalue oracle on heavy-tailed data")
{
    const fs::path dir = workdir("heavy");
    std::mt19937_64 gen(5);
    std::student_t_distribution<double> t(2.5);
    const int n = 400, d = 12;
    FeaturePack p;
    p.features = FloatMatrix(n, d);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) p.features(i, j) = static_cast<float>(t(gen) / (1.0 + j) + (j == 0 ? 4.0 : 0.0));
    }
    save_pack(p, dir / "heavy.fpk");
    REQUIRE(run({"fit", "--train", (dir / "heavy.fpk").string(), "--out", (dir / "m.dknm").string(), "--d-rule",
                 "var:0.95", "--k", "5"})
                .code == 0);

    const Matrix z = normalize_rows(p.features_f64());
    const Matrix c = z.rowwise() - z.colwise().mean();
    const auto eig = oracle::jacobi(oracle::covariance(oracle::to_rows(c)));
    double total = 0.0;
    for (const double v : eig.values) total += v;
    std::size_t expected = 0;
    double running = 0.0;
    while (running / total < 0.95) running += eig.values[expected++];
    CHECK(model_manifest(dir / "m.dknm").at("d") == expected);
}

TEST_CASE("score writes the breakdown CSV")
{
    const fs::path dir = workdir("score");
    REQUIRE(run(generate_args(dir / "id.fpk")).code == 0);
    REQUIRE(run({"fit", "--train", (dir / "id.fpk").string(), "--out", (dir / "m.dknm").string(), "--k", "50"}).code == 0);

    const Result r = run({"score", "--model", (dir / "m.dknm").string(), "--pack", (dir / "id.fpk").string()});
    REQUIRE(r.code == 0);
    const auto rows = parse_csv(r.out);
    REQUIRE(rows.size() == 5001);
    CHECK(rows[0] == std::vector<std::string>{"row", "s_p", "s_r", "s_tilde_p", "s_tilde_r", "fused"});
    double mean_p = 0.0, mean_r = 0.0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i][0] == std::to_string(i - 1));
        mean_p += std::stod(rows[i][3]);
        mean_r += std::stod(rows[i][4]);
    }
    CHECK(std::abs(mean_p / 5000) < 0.1);
    CHECK(std::abs(mean_r / 5000) < 0.1);
    CHECK(r.err.find("mean s_tilde_p") != std::string::npos);

    REQUIRE(run({"score", "--model", (dir / "m.dknm").string(), "--pack", (dir / "id.fpk").string(), "--alpha", "0",
                 "--out", (dir / "s.csv").string()})
                .code == 0);
    const auto zero = parse_csv(slurp(dir / "s.csv"));
    for (std::size_t i = 1; i < zero.size(); ++i) CHECK(zero[i][5] == zero[i][4]);

    // A pack header declaring zero rows.
    std::string empty = encode_pack(load_pack(dir / "id.fpk"));
    for (int i = 0; i < 4; ++i) empty[8 + i] = 0;
    std::ofstream(dir / "empty.fpk", std::ios::binary) << empty.substr(0, 24);
    const Result e = run({"score", "--model", (dir / "m.dknm").string(), "--pack", (dir / "empty.fpk").string()});
    CHECK(e.code != 0);
    CHECK(e.out.empty());

    FeaturePack narrow;
    narrow.features = FloatMatrix::Ones(3, 5);
    save_pack(narrow, dir / "narrow.fpk");
    const Result mismatch = run({"score", "--model", (dir / "m.dknm").string(), "--pack", (dir / "narrow.fpk").string()});
    CHECK(mismatch.code == 1);
    CHECK(mismatch.err.find("dimension") != std::string::npos);
}

TEST_CASE("eval across methods")
{
    const fs::path dir = workdir("eval");
    REQUIRE(run({"generate", "--classes", "10", "--dim", "64", "--per-class", "200", "--sigma", "0.05", "--seed", "3",
                 "--semantic-spread", "0.3", "--out", (dir / "train.fpk").string(), "--test-out",
                 (dir / "test.fpk").string(), "--ood-out", (dir / "shift.fpk").string(), "--delta", "0.3"})
                .code == 0);
    REQUIRE(run({"generate", "--classes", "10", "--dim", "64", "--per-class", "200", "--sigma", "0.05", "--seed", "3",
                 "--out", (dir / "t2.fpk").string(), "--test-out", (dir / "t3.fpk").string(), "--ood-out",
                 (dir / "noise.fpk").string(), "--ood-kind", "gaussian_noise", "--delta", "5"})
                .code == 0);

    const Result sep = run({"eval", "--method", "dknn", "--train", (dir / "t2.fpk").string(), "--id",
                            (dir / "t3.fpk").string(), "--ood", (dir / "noise.fpk").string(), "--k", "10"});
    REQUIRE(sep.code == 0);
    const auto sep_rows = parse_csv(sep.out);
    REQUIRE(sep_rows.size() == 2);
    CHECK(sep_rows[0] == std::vector<std::string>{"method", "ood_name", "fpr95", "auroc", "n_id", "n_ood"});
    CHECK(sep_rows[1] == std::vector<std::string>{"dknn", "noise", "0", "1", "2000", "2000"});

    auto auroc_of = [&](const std::string& method) {
        const Result r = run({"eval", "--method", method, "--train", (dir / "train.fpk").string(), "--id",
                              (dir / "test.fpk").string(), "--ood", (dir / "shift.fpk").string(), "--k", "10",
                              "--d-rule", "fixed:9"});
        REQUIRE(r.code == 0);
        return std::stod(parse_csv(r.out).at(1).at(3));
    };
    const double dknn_auroc = auroc_of("dknn");
    const double knn_auroc = auroc_of("knn");
    CHECK(dknn_auroc > knn_auroc);
    CHECK(auroc_of("mahalanobis") > 0.5);

    const Result msp = run({"eval", "--method", "msp", "--id", (dir / "test.fpk").string(), "--ood",
                            (dir / "shift.fpk").string()});
    CHECK(msp.code == 1);
    CHECK(msp.err.find("missing capability") != std::string::npos);

    const Result two = run({"eval", "--method", "knn", "--train", (dir / "train.fpk").string(), "--id",
                            (dir / "test.fpk").string(), "--ood", (dir / "shift.fpk").string(), "--ood",
                            (dir / "noise.fpk").string(), "--out", (dir / "eval.csv").string(), "--k", "10"});
    REQUIRE(two.code == 0);
    CHECK(parse_csv(slurp(dir / "eval.csv")).size() == 3);

    CHECK(run({"eval", "--method", "vim", "--id", (dir / "test.fpk").string(), "--ood", (dir / "shift.fpk").string()})
              .code != 0);
    CHECK(run({"eval", "--method", "knn", "--id", (dir / "test.fpk").string(), "--ood", (dir / "shift.fpk").string()})
              .code == 1);
}

TEST_CASE("logit methods run on packs with logits")
{
    const fs::path dir = workdir("logits");
    REQUIRE(run({"generate", "--classes", "5", "--dim", "16", "--per-class", "100", "--sigma", "0.05",
                 "--logit-scale", "10", "--out", (dir / "train.fpk").string(), "--test-out",
                 (dir / "test.fpk").string(), "--ood-out", (dir / "ood.fpk").string(), "--ood-kind", "gaussian_noise",
                 "--delta", "1"})
                .code == 0);
    CHECK(load_pack(dir / "ood.fpk").has_logits());
    for (const std::string m : {"msp", "energy", "maxlogit"}) {
        const Result r = run({"eval", "--method", m, "--id", (dir / "test.fpk").string(), "--ood",
                              (dir / "ood.fpk").string(), "--temperature", "2"});
        CHECK(r.code == 0);
        CHECK(parse_csv(r.out).at(1).at(0) == m);
    }
}

TEST_CASE("spectrum")
{
    const fs::path dir = workdir("spectrum");
    REQUIRE(run(generate_args(dir / "flat.fpk", "0")).code == 0);
    const Result r = run({"spectrum", "--pack", (dir / "flat.fpk").string(), "--out", (dir / "s.csv").string()});
    REQUIRE(r.code == 0);
    const auto rows = parse_csv(slurp(dir / "s.csv"));
    REQUIRE(rows.size() == 65);
    CHECK(rows[0] == std::vector<std::string>{"index", "eigenvalue"});
    CHECK(std::stod(rows[9][1]) > 1e-3);
    for (std::size_t i = 10; i < rows.size(); ++i) CHECK(std::stod(rows[i][1]) < 1e-10);
    const auto summary = parse_csv(r.out);
    CHECK(summary[0] == std::vector<std::string>{"rho", "d_used", "within_class_trace"});
    CHECK(summary[1][1] == "9");
    CHECK(std::stod(summary[1][2]) < 1e-20);

    // Isotropic Gaussian cloud: half the spectrum carries half the energy.
    std::mt19937_64 gen(12);
    FeaturePack iso;
    iso.features = oracle::gaussian_matrix(gen, 20000, 16).cast<float>();
    save_pack(iso, dir / "iso.fpk");
    const Result ri = run({"spectrum", "--pack", (dir / "iso.fpk").string(), "--d-rule", "fixed:8", "--json-summary"});
    REQUIRE(ri.code == 0);
    const auto js = nlohmann::json::parse(ri.out);
    CHECK(std::abs(js.at("rho").get<double>() - 1.0) < 0.1);
    CHECK(js.at("within_class_trace").is_null());

    CHECK(run({"spectrum", "--pack", (dir / "missing.fpk").string()}).code != 0);
}

TEST_CASE("usage")
{
    CHECK(run({}).code != 0);
    CHECK(run({"frobnicate"}).code != 0);
    const Result help = run({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("generate") != std::string::npos);
}
