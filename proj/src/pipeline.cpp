#include "dknn/pipeline.hpp"

#include <cmath>

#include "dknn/error.hpp"
#include "dknn/featurepack.hpp"
#include "text_format.hpp"

namespace dknn {

namespace {

constexpr std::uint32_t kMaxClassesForFixedRule = 20;
constexpr double kDefaultVarianceFraction = 0.95;

void check_alpha(double alpha)
{
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw Error(Errc::invalid_argument, "alpha must lie in [0, 1], got " + detail::format_double(alpha));
    }
}

struct MeanStd {
    double mean;
    double std;
};

// Two-pass population statistics.
MeanStd population_stats(const Vector& v)
{
    const double n = static_cast<double>(v.size());
    const double mean = v.sum() / n;
    const double var = (v.array() - mean).square().sum() / n;
    return {mean, std::sqrt(var)};
}

}  // namespace

DimensionRule default_dimension_rule(const FeaturePack& pack)
{
    if (pack.labels && pack.num_classes >= 2 && pack.num_classes <= kMaxClassesForFixedRule &&
        pack.num_classes - 1 < pack.dim()) {
        return FixedDim{pack.num_classes - 1};
    }
    return VarianceFraction{kDefaultVarianceFraction};
}

double sigma_floor(double mu, double sigma) { return std::max(sigma, 1e-8 * std::max(mu, 1.0)); }

DKnnModel::DKnnModel(Vector global_mean, ProjectionPair projection, Gallery gallery_p, Gallery gallery_r,
                     CalibrationStats calibration, std::size_t k, double alpha, DimensionRule d_rule)
    : global_mean_(std::move(global_mean)),
      projection_(std::move(projection)),
      gallery_p_(std::move(gallery_p)),
      gallery_r_(std::move(gallery_r)),
      calibration_(calibration),
      k_(k),
      alpha_(alpha),
      d_rule_(d_rule)
{
    check_alpha(alpha_);
    const std::size_t dim = static_cast<std::size_t>(global_mean_.size());
    if (projection_.ambient_dim() != dim || gallery_p_.dim() != dim || gallery_r_.dim() != dim) {
        throw Error(Errc::dimension_mismatch, "model components disagree on the feature dimension");
    }
    if (gallery_p_.size() != gallery_r_.size()) {
        throw Error(Errc::dimension_mismatch, "dual galleries must have equal row counts");
    }
    if (k_ < 1 || k_ >= gallery_p_.size()) {
        throw Error(Errc::invalid_argument, "k must lie in [1, n - 1]");
    }
    if (!(calibration_.sigma_p > 0.0) || !(calibration_.sigma_r > 0.0)) {
        throw Error(Errc::invalid_argument, "calibration sigmas must be positive");
    }
}

CalibrationStats calibrate_gallery(const Gallery& gallery_p, const Gallery& gallery_r, std::size_t k)
{
    const MeanStd p = population_stats(loo_kth_distances(gallery_p, k));
    const MeanStd r = population_stats(loo_kth_distances(gallery_r, k));

    CalibrationStats stats;
    stats.mu_p = p.mean;
    stats.raw_sigma_p = p.std;
    stats.sigma_p = sigma_floor(p.mean, p.std);
    stats.floor_engaged_p = stats.sigma_p != p.std;
    stats.mu_r = r.mean;
    stats.raw_sigma_r = r.std;
    stats.sigma_r = sigma_floor(r.mean, r.std);
    stats.floor_engaged_r = stats.sigma_r != r.std;
    return stats;
}

DKnnModel fit(const Matrix& train, const FitOptions& options)
{
    const auto n = static_cast<std::size_t>(train.rows());
    if (train.cols() < 2) throw Error(Errc::invalid_argument, "fit needs D >= 2");
    if (options.k < 1 || options.k >= n) {
        throw Error(Errc::invalid_argument, "fit needs n >= k + 1 (n=" + std::to_string(n) +
                                                ", k=" + std::to_string(options.k) + ")");
    }
    check_alpha(options.alpha);
    if (!train.allFinite()) throw Error(Errc::non_finite, "training features contain NaN or infinity");

    const DimensionRule rule = options.d_rule.value_or(VarianceFraction{kDefaultVarianceFraction});

    const Matrix z = normalize_rows(train);
    const Vector mu = column_mean(z);
    const Matrix centered = z.rowwise() - mu.transpose();
    ProjectionPair projection = fit_projection(centered, rule);

    Gallery gallery_p(retract_rows(z, mu, projection, View::principal));
    Gallery gallery_r(retract_rows(z, mu, projection, View::residual));
    const CalibrationStats calibration = calibrate_gallery(gallery_p, gallery_r, options.k);

    std::vector<std::string> warnings;
    if (projection.rank_clamped()) {
        warnings.push_back("principal dimension clamped from " + std::to_string(projection.requested_dim()) +
                           " to " + std::to_string(projection.dim()) + " (numerical rank " +
                           std::to_string(projection.numerical_rank()) + ")");
    }
    if (calibration.floor_engaged_p) warnings.emplace_back("principal-view sigma floor engaged");
    if (calibration.floor_engaged_r) warnings.emplace_back("residual-view sigma floor engaged");

    DKnnModel model(mu, std::move(projection), std::move(gallery_p), std::move(gallery_r), calibration,
                    options.k, options.alpha, rule);
    for (auto& w : warnings) model.add_warning(std::move(w));
    return model;
}

DKnnModel fit(const FeaturePack& train, const FitOptions& options)
{
    FitOptions resolved = options;
    if (!resolved.d_rule) resolved.d_rule = default_dimension_rule(train);
    return fit(train.features_f64(), resolved);
}

std::vector<ScoreBreakdown> score_batch(const DKnnModel& model, const Matrix& x, std::optional<double> alpha)
{
    const double weight = alpha.value_or(model.alpha());
    check_alpha(weight);
    if (static_cast<std::size_t>(x.cols()) != model.dim()) {
        throw Error(Errc::dimension_mismatch, "input dimension " + std::to_string(x.cols()) +
                                                  " does not match model dimension " + std::to_string(model.dim()));
    }
    if (x.rows() == 0) return {};
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        if (!x.row(i).allFinite()) throw Error(Errc::non_finite, "input row " + std::to_string(i) + " is not finite");
    }

    const Matrix z = normalize_rows(x);
    const Vector dist_p = batch_kth_distances(retract_rows(z, model.global_mean(), model.projection(), View::principal),
                                              model.gallery(View::principal), model.k());
    const Vector dist_r = batch_kth_distances(retract_rows(z, model.global_mean(), model.projection(), View::residual),
                                              model.gallery(View::residual), model.k());

    const CalibrationStats& cal = model.calibration();
    std::vector<ScoreBreakdown> out(static_cast<std::size_t>(x.rows()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        ScoreBreakdown& s = out[i];
        s.s_p = dist_p(static_cast<Eigen::Index>(i));
        s.s_r = dist_r(static_cast<Eigen::Index>(i));
        s.s_tilde_p = (s.s_p - cal.mu_p) / cal.sigma_p;
        s.s_tilde_r = (s.s_r - cal.mu_r) / cal.sigma_r;
        s.fused = weight * s.s_tilde_p + (1.0 - weight) * s.s_tilde_r;
    }
    return out;
}

std::vector<ScoreBreakdown> score_batch(const DKnnModel& model, const FeaturePack& pack, std::optional<double> alpha)
{
    return score_batch(model, pack.features_f64(), alpha);
}

ScoreBreakdown score(const DKnnModel& model, const Vector& x, std::optional<double> alpha)
{
    return score_batch(model, Matrix(x.transpose()), alpha).front();
}

}  // namespace dknn
