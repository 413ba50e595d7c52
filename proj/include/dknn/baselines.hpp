#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dknn/neighbors.hpp"
#include "dknn/types.hpp"

namespace dknn {

struct FeaturePack;

// Every scorer here follows one orientation: higher means more likely out-of-distribution.

/// Plain k-th nearest neighbor distance in the raw (optionally L2-normalized) feature space.
class KnnBaseline {
public:
    KnnBaseline(const Matrix& train, std::size_t k, bool normalize = true);

    double score(const Vector& x) const;
    Vector score_batch(const Matrix& x) const;

    std::size_t k() const { return k_; }
    bool normalizes() const { return normalize_; }

private:
    Gallery gallery_;
    std::size_t k_;
    bool normalize_;
};

double knn_score(const Matrix& train, const Vector& x, std::size_t k, bool normalize = true);

struct MahalanobisModel {
    Matrix class_means;                 // one row per class present in the labels
    std::vector<std::int32_t> class_ids;  // label of each row of class_means
    Matrix shared_precision;            // inverse of the regularized pooled covariance
    double regularization = 0.0;        // epsilon added to the covariance diagonal
};

/// Pooled within-class covariance Sigma = (1/n) sum_c sum_{i in c} (z_i - mu_c)(z_i - mu_c)^T,
/// regularized by eps = 1e-6 * trace(Sigma) / D (at least 1e-12) and inverted via Cholesky.
MahalanobisModel mahalanobis_fit(const Matrix& features, std::span<const std::int32_t> labels);
MahalanobisModel mahalanobis_fit(const FeaturePack& train);

/// min over classes of (x - mu_c)^T Precision (x - mu_c).
double mahalanobis_score(const MahalanobisModel& model, const Vector& x);

/// -max softmax probability.
double msp_score(std::span<const double> logits);
/// Free energy -T log sum exp(logit / T).
double energy_score(std::span<const double> logits, double temperature = 1.0);
/// -max logit.
double maxlogit_score(std::span<const double> logits);

}  // namespace dknn
