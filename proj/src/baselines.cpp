#include "dknn/baselines.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "dknn/error.hpp"
#include "dknn/featurepack.hpp"
#include "dknn/geometry.hpp"

namespace dknn {

namespace {

constexpr double kRelativeRidge = 1e-6;
constexpr double kAbsoluteRidge = 1e-12;

void check_logits(std::span<const double> logits)
{
    if (logits.empty()) throw Error(Errc::invalid_argument, "empty logit vector");
    for (const double v : logits) {
        if (!std::isfinite(v)) throw Error(Errc::non_finite, "logits contain NaN or infinity");
    }
}

double max_of(std::span<const double> v) { return *std::max_element(v.begin(), v.end()); }

}  // namespace

KnnBaseline::KnnBaseline(const Matrix& train, std::size_t k, bool normalize)
    : gallery_(normalize ? normalize_rows(train) : train), k_(k), normalize_(normalize)
{
    if (k_ < 1 || k_ > gallery_.size()) throw Error(Errc::invalid_argument, "KNN baseline needs 1 <= k <= n");
}

double KnnBaseline::score(const Vector& x) const
{
    return kth_distance(normalize_ ? dknn::normalize(x) : x, gallery_, k_);
}

Vector KnnBaseline::score_batch(const Matrix& x) const
{
    return batch_kth_distances(normalize_ ? normalize_rows(x) : x, gallery_, k_);
}

double knn_score(const Matrix& train, const Vector& x, std::size_t k, bool normalize)
{
    return KnnBaseline(train, k, normalize).score(x);
}

MahalanobisModel mahalanobis_fit(const Matrix& features, std::span<const std::int32_t> labels)
{
    const Eigen::Index n = features.rows();
    const Eigen::Index dim = features.cols();
    if (static_cast<std::size_t>(n) != labels.size()) {
        throw Error(Errc::dimension_mismatch, "label count does not match row count");
    }
    if (!features.allFinite()) throw Error(Errc::non_finite, "training features contain NaN or infinity");

    std::map<std::int32_t, std::vector<Eigen::Index>> members;
    for (Eigen::Index i = 0; i < n; ++i) members[labels[static_cast<std::size_t>(i)]].push_back(i);
    if (members.empty()) throw Error(Errc::invalid_argument, "Mahalanobis fit needs labelled samples");

    MahalanobisModel model;
    model.class_means.resize(static_cast<Eigen::Index>(members.size()), dim);
    Eigen::MatrixXd covariance = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::Index c = 0;
    for (const auto& [label, rows] : members) {
        if (rows.size() < 2) {
            throw Error(Errc::invalid_argument, "class " + std::to_string(label) + " has fewer than 2 samples");
        }
        Vector mean = Vector::Zero(dim);
        for (const auto i : rows) mean += features.row(i).transpose();
        mean /= static_cast<double>(rows.size());
        for (const auto i : rows) {
            const Vector diff = features.row(i).transpose() - mean;
            covariance.selfadjointView<Eigen::Lower>().rankUpdate(diff);
        }
        model.class_means.row(c++) = mean.transpose();
        model.class_ids.push_back(label);
    }
    covariance = covariance.selfadjointView<Eigen::Lower>();
    covariance /= static_cast<double>(n);

    model.regularization = std::max(kRelativeRidge * covariance.trace() / static_cast<double>(dim), kAbsoluteRidge);
    covariance.diagonal().array() += model.regularization;

    const Eigen::LLT<Eigen::MatrixXd> llt(covariance);
    if (llt.info() != Eigen::Success) {
        throw Error(Errc::degenerate, "pooled covariance is not positive definite after regularization");
    }
    Eigen::MatrixXd precision = llt.solve(Eigen::MatrixXd::Identity(dim, dim));
    model.shared_precision = 0.5 * (precision + precision.transpose());
    return model;
}

MahalanobisModel mahalanobis_fit(const FeaturePack& train)
{
    if (!train.labels) throw Error(Errc::capability, "Mahalanobis fit requires labels");
    return mahalanobis_fit(train.features_f64(), *train.labels);
}

double mahalanobis_score(const MahalanobisModel& model, const Vector& x)
{
    if (x.size() != model.class_means.cols()) {
        throw Error(Errc::dimension_mismatch, "input dimension does not match Mahalanobis model");
    }
    if (!x.allFinite()) throw Error(Errc::non_finite, "input contains NaN or infinity");
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < model.class_means.rows(); ++c) {
        const Vector diff = x - model.class_means.row(c).transpose();
        best = std::min(best, diff.dot(model.shared_precision * diff));
    }
    return best;
}

double msp_score(std::span<const double> logits)
{
    check_logits(logits);
    const double top = max_of(logits);
    double denom = 0.0;
    for (const double v : logits) denom += std::exp(v - top);
    return -1.0 / denom;
}

double energy_score(std::span<const double> logits, double temperature)
{
    check_logits(logits);
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw Error(Errc::invalid_argument, "temperature must be positive");
    }
    const double top = max_of(logits);
    double sum = 0.0;
    for (const double v : logits) sum += std::exp((v - top) / temperature);
    return -(top + temperature * std::log(sum));
}

double maxlogit_score(std::span<const double> logits)
{
    check_logits(logits);
    return -max_of(logits);
}

}  // namespace dknn
