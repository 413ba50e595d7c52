#include "dknn/neighbors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dknn/error.hpp"

namespace dknn {

namespace {

constexpr Eigen::Index kQueryBlock = 256;
constexpr std::size_t kNoExclusion = std::numeric_limits<std::size_t>::max();

// Selects the k-th smallest distance given screened squared distances for one query.
// The band width bounds |expanded - direct| for either summation order.
double select_kth(const double* screened, const double* query, double query_sq_norm, const Gallery& gallery,
                  std::size_t k, std::size_t exclude, std::vector<double>& scratch)
{
    const std::size_t m = gallery.size();
    const std::size_t dim = gallery.dim();

    scratch.assign(screened, screened + m);
    if (exclude != kNoExclusion) scratch[exclude] = std::numeric_limits<double>::infinity();
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k - 1), scratch.end());
    const double screened_kth = scratch[k - 1];

    const double tolerance = 4.0 * static_cast<double>(dim + 4) * std::numeric_limits<double>::epsilon() *
                             (query_sq_norm + gallery.max_squared_norm());
    const double band = screened_kth + 2.0 * tolerance;

    scratch.clear();
    const double* points = gallery.points().data();
    for (std::size_t i = 0; i < m; ++i) {
        if (i == exclude || screened[i] > band) continue;
        scratch.push_back(direct_squared_distance(query, points + i * dim, dim));
    }
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k - 1), scratch.end());
    return std::sqrt(scratch[k - 1]);
}

void check_k(std::size_t k, std::size_t available, const char* what)
{
    if (k < 1 || k > available) {
        throw Error(Errc::invalid_argument, std::string(what) + ": k=" + std::to_string(k) +
                                                " must lie in [1, " + std::to_string(available) + "]");
    }
}

// Screens a block of query rows against the gallery and selects per row.
void run_block(const Matrix& queries, Eigen::Index begin, Eigen::Index count, const Gallery& gallery,
               std::size_t k, bool leave_one_out, Vector& out)
{
    const auto block = queries.middleRows(begin, count);
    Matrix screened = -2.0 * (block * gallery.points().transpose());
    const Vector query_norms = block.rowwise().squaredNorm();
    screened.colwise() += query_norms;
    screened.rowwise() += gallery.squared_norms().transpose();
    screened = screened.cwiseMax(0.0);

    std::vector<double> scratch;
    scratch.reserve(gallery.size());
    for (Eigen::Index r = 0; r < count; ++r) {
        const std::size_t row = static_cast<std::size_t>(begin + r);
        out(begin + r) = select_kth(screened.row(r).data(), block.row(r).data(), query_norms(r), gallery, k,
                                    leave_one_out ? row : kNoExclusion, scratch);
    }
}

}  // namespace

double direct_squared_distance(const double* a, const double* b, std::size_t dim)
{
    double sum = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
        const double diff = a[j] - b[j];
        sum += diff * diff;
    }
    return sum;
}

Gallery::Gallery(Matrix points) : points_(std::move(points))
{
    if (points_.rows() < 1) throw Error(Errc::invalid_argument, "gallery needs at least one point");
    if (points_.cols() < 1) throw Error(Errc::invalid_argument, "gallery points need a dimension");
    if (!points_.allFinite()) throw Error(Errc::non_finite, "gallery contains NaN or infinity");
    squared_norms_ = points_.rowwise().squaredNorm();
    max_squared_norm_ = squared_norms_.maxCoeff();
}

double kth_distance(const Vector& query, const Gallery& gallery, std::size_t k)
{
    check_k(k, gallery.size(), "kth_distance");
    if (static_cast<std::size_t>(query.size()) != gallery.dim()) {
        throw Error(Errc::dimension_mismatch, "query dimension does not match gallery");
    }
    if (!query.allFinite()) throw Error(Errc::non_finite, "query contains NaN or infinity");

    const double query_norm = query.squaredNorm();
    Vector screened = gallery.squared_norms() - 2.0 * (gallery.points() * query);
    screened = (screened.array() + query_norm).cwiseMax(0.0);
    std::vector<double> scratch;
    return select_kth(screened.data(), query.data(), query_norm, gallery, k, kNoExclusion, scratch);
}

double kth_distance_loo(std::size_t index, const Gallery& gallery, std::size_t k)
{
    if (index >= gallery.size()) throw Error(Errc::invalid_argument, "gallery index out of range");
    check_k(k, gallery.size() - 1, "kth_distance_loo");

    const Vector query = gallery.points().row(static_cast<Eigen::Index>(index)).transpose();
    const double query_norm = gallery.squared_norms()(static_cast<Eigen::Index>(index));
    Vector screened = gallery.squared_norms() - 2.0 * (gallery.points() * query);
    screened = (screened.array() + query_norm).cwiseMax(0.0);
    std::vector<double> scratch;
    return select_kth(screened.data(), query.data(), query_norm, gallery, k, index, scratch);
}

Vector batch_kth_distances(const Matrix& queries, const Gallery& gallery, std::size_t k)
{
    check_k(k, gallery.size(), "batch_kth_distances");
    if (static_cast<std::size_t>(queries.cols()) != gallery.dim()) {
        throw Error(Errc::dimension_mismatch, "query dimension does not match gallery");
    }
    for (Eigen::Index i = 0; i < queries.rows(); ++i) {
        if (!queries.row(i).allFinite()) {
            throw Error(Errc::non_finite, "query row " + std::to_string(i) + " contains NaN or infinity");
        }
    }

    Vector out(queries.rows());
    for (Eigen::Index begin = 0; begin < queries.rows(); begin += kQueryBlock) {
        run_block(queries, begin, std::min(kQueryBlock, queries.rows() - begin), gallery, k, false, out);
    }
    return out;
}

Vector loo_kth_distances(const Gallery& gallery, std::size_t k)
{
    check_k(k, gallery.size() - 1, "loo_kth_distances");
    const Matrix& points = gallery.points();
    Vector out(points.rows());
    for (Eigen::Index begin = 0; begin < points.rows(); begin += kQueryBlock) {
        run_block(points, begin, std::min(kQueryBlock, points.rows() - begin), gallery, k, true, out);
    }
    return out;
}

}  // namespace dknn
