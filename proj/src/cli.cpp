#include "dknn/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dknn/baselines.hpp"
#include "dknn/error.hpp"
#include "dknn/featurepack.hpp"
#include "dknn/geometry.hpp"
#include "dknn/metrics.hpp"
#include "dknn/pipeline.hpp"
#include "dknn/synthetic.hpp"
#include "text_format.hpp"

namespace dknn::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kExitRuntime = 1;

struct GenerateOptions {
    SyntheticSpec spec;
    std::string out;
    std::string test_out;
    std::size_t test_per_class = 0;
    std::string ood_out;
    std::string ood_kind = "residual_shift";
    double delta = 0.3;
    std::optional<std::uint64_t> ood_seed;
    std::string ood_d_rule;
};

struct FitCommand {
    std::string train;
    std::string out;
    std::size_t k = kDefaultK;
    double alpha = kDefaultAlpha;
    std::string d_rule;
    bool json_summary = false;
};

struct ScoreCommand {
    std::string model;
    std::string pack;
    std::string out;
    std::optional<double> alpha;
};

struct EvalCommand {
    std::string method;
    std::string train;
    std::string model;
    std::string id;
    std::vector<std::string> ood;
    std::string out;
    std::size_t k = kDefaultK;
    double alpha = kDefaultAlpha;
    std::string d_rule;
    double temperature = 1.0;
    bool raw_knn = false;
};

struct SpectrumCommand {
    std::string pack;
    std::string out;
    std::string d_rule;
    bool json_summary = false;
};

std::optional<DimensionRule> optional_rule(const std::string& text)
{
    if (text.empty()) return std::nullopt;
    return parse_dimension_rule(text);
}

/// Writes through a temporary sibling and renames, so a failed run never leaves a partial file.
void write_file(const std::string& path, const std::function<void(std::ostream&)>& body)
{
    const fs::path target(path);
    fs::path tmp = target;
    tmp += ".partial";
    {
        std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
        if (!file) throw Error(Errc::io, "cannot open '" + path + "' for writing");
        body(file);
        file.flush();
        if (!file) throw Error(Errc::io, "failed writing '" + path + "'");
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw Error(Errc::io, "cannot move output into place at '" + path + "': " + ec.message());
}

void describe_pack(const std::string& label, const FeaturePack& pack, std::ostream& err)
{
    err << label << ": n=" << pack.rows() << " D=" << pack.dim() << " C=" << pack.num_classes
        << " labels=" << (pack.has_labels() ? "yes" : "no") << " logits=" << (pack.has_logits() ? "yes" : "no")
        << '\n';
}

ProjectionPair projection_of(const FeaturePack& pack, const DimensionRule& rule)
{
    const Matrix z = normalize_rows(pack.features_f64());
    const Vector mu = column_mean(z);
    return fit_projection(z.rowwise() - mu.transpose(), rule);
}

void cmd_generate(const GenerateOptions& opt, std::ostream& err)
{
    const FeaturePack train = generate_id(opt.spec);
    write_file(opt.out, [&](std::ostream& s) { write_pack(train, s); });
    describe_pack(opt.out, train, err);

    std::optional<FeaturePack> test;
    if (!opt.test_out.empty()) {
        SyntheticSpec spec = opt.spec;
        spec.seed = opt.spec.seed + 1;
        if (opt.test_per_class > 0) spec.per_class = opt.test_per_class;
        test = generate_id(spec);
        write_file(opt.test_out, [&](std::ostream& s) { write_pack(*test, s); });
        describe_pack(opt.test_out, *test, err);
    }

    if (!opt.ood_out.empty()) {
        const DimensionRule rule =
            opt.ood_d_rule.empty() ? default_dimension_rule(train) : parse_dimension_rule(opt.ood_d_rule);
        OodSpec ood_spec{parse_ood_kind(opt.ood_kind), opt.delta, opt.ood_seed.value_or(opt.spec.seed)};
        const FeaturePack& source = test ? *test : train;
        FeaturePack ood = generate_ood(source, projection_of(train, rule), ood_spec);
        if (opt.spec.logit_scale > 0.0) {
            ood.logits = etf_logits(ood.features_f64(), opt.spec);
            ood.num_classes = static_cast<std::uint32_t>(opt.spec.classes);
        }
        write_file(opt.ood_out, [&](std::ostream& s) { write_pack(ood, s); });
        describe_pack(opt.ood_out, ood, err);
    }
}

void cmd_fit(const FitCommand& cmd, std::ostream& out, std::ostream& err)
{
    const FeaturePack train = load_pack(cmd.train);
    FitOptions options;
    options.k = cmd.k;
    options.alpha = cmd.alpha;
    options.d_rule = optional_rule(cmd.d_rule);
    const DKnnModel model = fit(train, options);
    write_file(cmd.out, [&](std::ostream& s) { save_model(model, s); });

    const ProjectionPair& proj = model.projection();
    const CalibrationStats& cal = model.calibration();
    const auto& eig = proj.eigenvalues();
    const double rho = hegemony_ratio(std::span<const double>(eig.data(), static_cast<std::size_t>(eig.size())),
                                      proj.dim());

    for (const auto& w : model.warnings()) err << "warning: " << w << '\n';
    err << "model     " << cmd.out << '\n'
        << "n         " << model.gallery_size() << '\n'
        << "D         " << model.dim() << '\n'
        << "d_rule    " << to_string(model.d_rule()) << '\n'
        << "d_used    " << proj.dim() << '\n'
        << "rho       " << detail::format_double(rho) << '\n'
        << "k         " << model.k() << '\n'
        << "alpha     " << detail::format_double(model.alpha()) << '\n'
        << "mu_p      " << detail::format_double(cal.mu_p) << '\n'
        << "sigma_p   " << detail::format_double(cal.sigma_p) << '\n'
        << "mu_r      " << detail::format_double(cal.mu_r) << '\n'
        << "sigma_r   " << detail::format_double(cal.sigma_r) << '\n';

    if (cmd.json_summary) {
        json summary = {
            {"model", cmd.out},
            {"n", model.gallery_size()},
            {"D", model.dim()},
            {"d_rule", to_string(model.d_rule())},
            {"d_used", proj.dim()},
            {"requested_d", proj.requested_dim()},
            {"rho", std::isinf(rho) ? json("inf") : json(rho)},
            {"k", model.k()},
            {"alpha", model.alpha()},
            {"calibration",
             {{"mu_p", cal.mu_p}, {"sigma_p", cal.sigma_p}, {"mu_r", cal.mu_r}, {"sigma_r", cal.sigma_r}}},
            {"warnings", model.warnings()},
        };
        out << summary.dump() << '\n';
    }
}

void write_scores(const std::vector<ScoreBreakdown>& scores, std::ostream& s)
{
    s << "row,s_p,s_r,s_tilde_p,s_tilde_r,fused\n";
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const ScoreBreakdown& b = scores[i];
        s << i << ',' << detail::format_double(b.s_p) << ',' << detail::format_double(b.s_r) << ','
          << detail::format_double(b.s_tilde_p) << ',' << detail::format_double(b.s_tilde_r) << ','
          << detail::format_double(b.fused) << '\n';
    }
}

void cmd_score(const ScoreCommand& cmd, std::ostream& out, std::ostream& err)
{
    const DKnnModel model = load_model(fs::path(cmd.model));
    const FeaturePack pack = load_pack(cmd.pack);
    const std::vector<ScoreBreakdown> scores = score_batch(model, pack, cmd.alpha);
    if (cmd.out.empty()) {
        write_scores(scores, out);
    } else {
        write_file(cmd.out, [&](std::ostream& s) { write_scores(scores, s); });
    }

    double mean_p = 0.0, mean_r = 0.0;
    for (const auto& b : scores) {
        mean_p += b.s_tilde_p;
        mean_r += b.s_tilde_r;
    }
    const double n = static_cast<double>(scores.size());
    err << "scored " << scores.size() << " rows; mean s_tilde_p=" << detail::format_double(mean_p / n)
        << " mean s_tilde_r=" << detail::format_double(mean_r / n) << '\n';
}

std::vector<double> logit_scores(const FeaturePack& pack, const std::string& method, double temperature)
{
    if (!pack.has_logits()) {
        throw Error(Errc::capability, "method '" + method + "' needs a logits block, which this pack lacks");
    }
    const Matrix logits = pack.logits_f64();
    std::vector<double> scores(pack.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Vector row = logits.row(i).transpose();
        const std::span<const double> l(row.data(), static_cast<std::size_t>(row.size()));
        if (method == "msp") {
            scores[static_cast<std::size_t>(i)] = msp_score(l);
        } else if (method == "energy") {
            scores[static_cast<std::size_t>(i)] = energy_score(l, temperature);
        } else {
            scores[static_cast<std::size_t>(i)] = maxlogit_score(l);
        }
    }
    return scores;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

void cmd_eval(const EvalCommand& cmd, std::ostream& out, std::ostream& err)
{
    const std::string& method = cmd.method;
    const bool logit_method = method == "msp" || method == "energy" || method == "maxlogit";
    const bool needs_train = method == "knn" || method == "mahalanobis" || (method == "dknn" && cmd.model.empty());
    if (needs_train && cmd.train.empty()) {
        throw Error(Errc::invalid_argument, "method '" + method + "' needs --train" +
                                                (method == "dknn" ? " or --model" : ""));
    }

    std::function<std::vector<double>(const FeaturePack&)> scorer;
    if (method == "dknn") {
        std::optional<DKnnModel> model;
        if (!cmd.model.empty()) {
            model.emplace(load_model(fs::path(cmd.model)));
        } else {
            FitOptions options;
            options.k = cmd.k;
            options.alpha = cmd.alpha;
            options.d_rule = optional_rule(cmd.d_rule);
            model.emplace(fit(load_pack(cmd.train), options));
            for (const auto& w : model->warnings()) err << "warning: " << w << '\n';
        }
        scorer = [model = std::move(*model)](const FeaturePack& pack) {
            std::vector<double> s;
            for (const auto& b : score_batch(model, pack)) s.push_back(b.fused);
            return s;
        };
    } else if (method == "knn") {
        auto knn = std::make_shared<KnnBaseline>(load_pack(cmd.train).features_f64(), cmd.k, !cmd.raw_knn);
        scorer = [knn](const FeaturePack& pack) { return to_std(knn->score_batch(pack.features_f64())); };
    } else if (method == "mahalanobis") {
        auto maha = std::make_shared<MahalanobisModel>(mahalanobis_fit(load_pack(cmd.train)));
        scorer = [maha](const FeaturePack& pack) {
            const Matrix x = pack.features_f64();
            if (x.cols() != maha->class_means.cols()) {
                throw Error(Errc::dimension_mismatch, "pack dimension does not match the training pack");
            }
            std::vector<double> s(pack.rows());
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                s[static_cast<std::size_t>(i)] = mahalanobis_score(*maha, x.row(i).transpose());
            }
            return s;
        };
    } else if (logit_method) {
        scorer = [method, t = cmd.temperature](const FeaturePack& pack) { return logit_scores(pack, method, t); };
    } else {
        throw Error(Errc::invalid_argument, "unknown method '" + method + "'");
    }

    const std::vector<double> id_scores = scorer(load_pack(cmd.id));
    std::ostringstream table;
    table << kEvalCsvHeader << '\n';
    for (const auto& ood_path : cmd.ood) {
        const std::vector<double> ood_scores = scorer(load_pack(ood_path));
        const EvalResult result = evaluate(id_scores, ood_scores);
        table << to_csv_row(method, fs::path(ood_path).stem().string(), result) << '\n';
    }
    if (cmd.out.empty()) {
        out << table.str();
    } else {
        write_file(cmd.out, [&](std::ostream& s) { s << table.str(); });
    }
}

void cmd_spectrum(const SpectrumCommand& cmd, std::ostream& out)
{
    const FeaturePack pack = load_pack(cmd.pack);
    const DimensionRule rule = cmd.d_rule.empty() ? default_dimension_rule(pack) : parse_dimension_rule(cmd.d_rule);
    const SpectralReport report = spectral_report(pack, rule);
    if (!cmd.out.empty()) {
        write_file(cmd.out, [&](std::ostream& s) { write_spectrum_csv(report, s); });
    }
    if (cmd.json_summary) {
        json summary = {
            {"rho", std::isinf(report.rho) ? json("inf") : json(report.rho)},
            {"d_used", report.d_used},
            {"within_class_trace", report.within_class_trace ? json(*report.within_class_trace) : json(nullptr)},
        };
        out << summary.dump() << '\n';
    } else {
        write_spectrum_summary(report, out);
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Dual-space k-NN out-of-distribution detection", "dknn"};
    app.require_subcommand(1);

    GenerateOptions gen;
    auto* generate = app.add_subcommand("generate", "Generate a synthetic Neural-Collapse feature pack");
    generate->add_option("--classes", gen.spec.classes, "Class count C")->required()->check(CLI::Range(2, 1 << 20));
    generate->add_option("--dim", gen.spec.dim, "Feature dimension D")->required()->check(CLI::Range(2, 1 << 24));
    generate->add_option("--per-class", gen.spec.per_class, "Samples per class")->required()->check(CLI::PositiveNumber);
    generate->add_option("--sigma", gen.spec.sigma_in, "Within-class noise sigma_in")->required()->check(CLI::NonNegativeNumber);
    generate->add_option("--seed", gen.spec.seed, "Sampling seed");
    generate->add_option("--frame-seed", gen.spec.frame_seed, "Seed of the ETF embedding");
    generate->add_option("--anchor", gen.spec.anchor_norm, "Norm of the shared mean component")->capture_default_str()->check(CLI::NonNegativeNumber);
    generate->add_option("--semantic-spread", gen.spec.semantic_spread, "Within-class spread inside the ETF span")->check(CLI::NonNegativeNumber);
    generate->add_option("--logit-scale", gen.spec.logit_scale, "Emit ETF-head logits at this scale (0 = none)")->check(CLI::NonNegativeNumber);
    generate->add_option("--out", gen.out, "Output pack")->required();
    generate->add_option("--test-out", gen.test_out, "Also write an independent ID pack (sampling seed + 1)");
    generate->add_option("--test-per-class", gen.test_per_class, "Samples per class of the --test-out pack");
    generate->add_option("--ood-out", gen.ood_out, "Also write an OOD pack derived from the test (else training) pack");
    generate->add_option("--ood-kind", gen.ood_kind, "residual_shift | gaussian_noise")->capture_default_str();
    generate->add_option("--delta", gen.delta, "OOD shift norm or noise std")->capture_default_str();
    generate->add_option("--ood-seed", gen.ood_seed, "OOD seed (default: --seed)");
    generate->add_option("--ood-d-rule", gen.ood_d_rule, "Principal dimension rule for the residual shift");

    FitCommand fitc;
    auto* fit_cmd = app.add_subcommand("fit", "Fit a D-KNN model on a training pack");
    fit_cmd->add_option("--train", fitc.train, "Training pack")->required()->check(CLI::ExistingFile);
    fit_cmd->add_option("--out", fitc.out, "Output model")->required();
    fit_cmd->add_option("--k", fitc.k, "Neighbor rank")->capture_default_str()->check(CLI::PositiveNumber);
    fit_cmd->add_option("--alpha", fitc.alpha, "Fusion weight in [0, 1]")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    fit_cmd->add_option("--d-rule", fitc.d_rule, "fixed:N | var:F");
    fit_cmd->add_flag("--json-summary", fitc.json_summary, "Print the summary as JSON on stdout");

    ScoreCommand scorec;
    auto* score_cmd = app.add_subcommand("score", "Score a pack with a fitted model");
    score_cmd->add_option("--model", scorec.model, "Model file")->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--pack", scorec.pack, "Pack to score")->required()->check(CLI::ExistingFile);
    score_cmd->add_option("--out", scorec.out, "Output CSV (default stdout)");
    score_cmd->add_option("--alpha", scorec.alpha, "Override the fusion weight")->check(CLI::Range(0.0, 1.0));

    EvalCommand evalc;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a method on ID versus OOD packs");
    eval_cmd->add_option("--method", evalc.method, "dknn | knn | mahalanobis | msp | energy | maxlogit")
        ->required()
        ->check(CLI::IsMember({"dknn", "knn", "mahalanobis", "msp", "energy", "maxlogit"}));
    eval_cmd->add_option("--train", evalc.train, "Training pack")->check(CLI::ExistingFile);
    eval_cmd->add_option("--model", evalc.model, "Fitted D-KNN model")->check(CLI::ExistingFile);
    eval_cmd->add_option("--id", evalc.id, "ID test pack")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--ood", evalc.ood, "OOD pack (repeatable)")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--out", evalc.out, "Output CSV (default stdout)");
    eval_cmd->add_option("--k", evalc.k, "Neighbor rank")->capture_default_str()->check(CLI::PositiveNumber);
    eval_cmd->add_option("--alpha", evalc.alpha, "Fusion weight in [0, 1]")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    eval_cmd->add_option("--d-rule", evalc.d_rule, "fixed:N | var:F");
    eval_cmd->add_option("--temperature", evalc.temperature, "Energy temperature")->capture_default_str()->check(CLI::PositiveNumber);
    eval_cmd->add_flag("--knn-raw", evalc.raw_knn, "Skip L2 normalization in the knn baseline");

    SpectrumCommand specc;
    auto* spectrum_cmd = app.add_subcommand("spectrum", "Eigenspectrum and hegemony ratio of a pack");
    spectrum_cmd->add_option("--pack", specc.pack, "Pack")->required()->check(CLI::ExistingFile);
    spectrum_cmd->add_option("--out", specc.out, "Eigenvalue CSV");
    spectrum_cmd->add_option("--d-rule", specc.d_rule, "fixed:N | var:F");
    spectrum_cmd->add_flag("--json-summary", specc.json_summary, "Print the summary as JSON");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (*generate) {
            cmd_generate(gen, err);
        } else if (*fit_cmd) {
            cmd_fit(fitc, out, err);
        } else if (*score_cmd) {
            cmd_score(scorec, out, err);
        } else if (*eval_cmd) {
            cmd_eval(evalc, out, err);
        } else if (*spectrum_cmd) {
            cmd_spectrum(specc, out);
        }
    } catch (const Error& e) {
        err << "error (" << to_string(e.code()) << "): " << e.what() << '\n';
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}

}  // namespace dknn::cli
