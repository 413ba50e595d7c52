#pragma once

#include <cstddef>

#include "dknn/types.hpp"

namespace dknn {

/// Fixed reference set for exact k-th nearest neighbor queries. Immutable after
/// construction; squared row norms are cached for the screening pass.
class Gallery {
public:
    explicit Gallery(Matrix points);

    const Matrix& points() const { return points_; }
    const Vector& squared_norms() const { return squared_norms_; }
    std::size_t size() const { return static_cast<std::size_t>(points_.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(points_.cols()); }
    double max_squared_norm() const { return max_squared_norm_; }

private:
    Matrix points_;
    Vector squared_norms_;
    double max_squared_norm_ = 0.0;
};

/// k-th smallest Euclidean distance from `query` to the gallery rows (1-based k, duplicates
/// counted separately).
///
/// Candidates are screened with |q|^2 - 2 q.p + |p|^2, then every candidate inside the
/// round-off band of the screened k-th value is re-measured as a direct sum of squared
/// differences. The returned value therefore equals the k-th entry of a full sort of direct
/// distances bit for bit.
double kth_distance(const Vector& query, const Gallery& gallery, std::size_t k);

/// Same as kth_distance for gallery row `index`, with that row excluded. Requires k <= m - 1.
double kth_distance_loo(std::size_t index, const Gallery& gallery, std::size_t k);

/// One k-th distance per query row, in query order. A non-finite query row aborts the batch
/// with an error naming the row.
Vector batch_kth_distances(const Matrix& queries, const Gallery& gallery, std::size_t k);

/// kth_distance_loo for every gallery row.
Vector loo_kth_distances(const Gallery& gallery, std::size_t k);

/// Exact squared distance as a left-to-right sum of squared differences.
double direct_squared_distance(const double* a, const double* b, std::size_t dim);

}  // namespace dknn
