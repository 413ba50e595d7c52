#include "dknn/geometry.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <vector>

#include "dknn/error.hpp"
#include "dknn/featurepack.hpp"
#include "text_format.hpp"

namespace dknn {

namespace {

constexpr double kNormFloor = 1e-12;
constexpr double kRankTolerance = 1e-10;
constexpr double kResidualEnergyFloor = 1e-15;

void fix_column_signs(Matrix& basis)
{
    for (Eigen::Index j = 0; j < basis.cols(); ++j) {
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < basis.rows(); ++i) {
            const double a = std::abs(basis(i, j));
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        if (basis(arg, j) < 0.0) basis.col(j) *= -1.0;
    }
}

}  // namespace

DimensionRule parse_dimension_rule(const std::string& text)
{
    const auto colon = text.find(':');
    if (colon == std::string::npos) {
        throw Error(Errc::parse, "dimension rule '" + text + "' must be fixed:N or var:F");
    }
    const std::string kind = text.substr(0, colon);
    const std::string value = text.substr(colon + 1);
    try {
        std::size_t used = 0;
        if (kind == "fixed") {
            const long long d = std::stoll(value, &used);
            if (used != value.size() || d < 1) throw std::invalid_argument("bad");
            return FixedDim{static_cast<std::size_t>(d)};
        }
        if (kind == "var") {
            const double f = std::stod(value, &used);
            if (used != value.size() || !(f > 0.0 && f < 1.0)) throw std::invalid_argument("bad");
            return VarianceFraction{f};
        }
    } catch (const std::exception&) {
        throw Error(Errc::parse, "invalid value in dimension rule '" + text + "'");
    }
    throw Error(Errc::parse, "unknown dimension rule kind '" + kind + "'");
}

std::string to_string(const DimensionRule& rule)
{
    if (const auto* fixed = std::get_if<FixedDim>(&rule)) return "fixed:" + std::to_string(fixed->dim);
    return "var:" + detail::format_double(std::get<VarianceFraction>(rule).fraction);
}

const char* to_string(View view) noexcept { return view == View::principal ? "principal" : "residual"; }

Matrix normalize_rows(const Matrix& x)
{
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double norm = x.row(i).norm();
        if (!(norm > kNormFloor)) {
            throw Error(Errc::degenerate, "row " + std::to_string(i) + " has zero norm and cannot be normalized");
        }
        out.row(i) = x.row(i) / norm;
    }
    return out;
}

Vector normalize(const Vector& x)
{
    const double norm = x.norm();
    if (!(norm > kNormFloor)) throw Error(Errc::degenerate, "zero-norm vector cannot be normalized");
    return x / norm;
}

Vector column_mean(const Matrix& x)
{
    if (x.rows() == 0) throw Error(Errc::invalid_argument, "mean of an empty matrix");
    return x.colwise().mean().transpose();
}

ProjectionPair::ProjectionPair(Matrix basis, Vector eigenvalues, std::size_t requested_dim,
                               std::size_t numerical_rank)
    : basis_(std::move(basis)),
      eigenvalues_(std::move(eigenvalues)),
      requested_dim_(requested_dim),
      numerical_rank_(numerical_rank)
{
    if (basis_.cols() < 1 || basis_.cols() > basis_.rows()) {
        throw Error(Errc::invalid_argument, "projection basis must have 1 <= d <= D columns");
    }
    if (eigenvalues_.size() != basis_.rows()) {
        throw Error(Errc::dimension_mismatch, "eigenvalue count must equal the ambient dimension");
    }
    const Matrix gram = basis_.transpose() * basis_;
    const double err = (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
    if (err > 1e-8) throw Error(Errc::invalid_argument, "projection basis is not orthonormal");
}

Matrix ProjectionPair::principal_projector() const { return basis_ * basis_.transpose(); }

Matrix ProjectionPair::residual_projector() const
{
    const auto dim = static_cast<Eigen::Index>(ambient_dim());
    return Matrix::Identity(dim, dim) - principal_projector();
}

Vector ProjectionPair::project(View view, const Vector& v) const
{
    if (static_cast<std::size_t>(v.size()) != ambient_dim()) {
        throw Error(Errc::dimension_mismatch, "vector dimension does not match projection");
    }
    Vector p = basis_ * (basis_.transpose() * v);
    if (view == View::residual) p = v - p;
    return p;
}

Matrix ProjectionPair::project_rows(View view, const Matrix& rows) const
{
    if (static_cast<std::size_t>(rows.cols()) != ambient_dim()) {
        throw Error(Errc::dimension_mismatch, "row dimension does not match projection");
    }
    Matrix p = (rows * basis_) * basis_.transpose();
    if (view == View::residual) p = rows - p;
    return p;
}

std::size_t resolve_dimension(std::span<const double> eigenvalues, const DimensionRule& rule)
{
    const std::size_t dim = eigenvalues.size();
    if (dim == 0) throw Error(Errc::invalid_argument, "empty eigenvalue spectrum");

    if (const auto* fixed = std::get_if<FixedDim>(&rule)) {
        if (fixed->dim < 1 || fixed->dim >= dim) {
            throw Error(Errc::invalid_argument, "fixed principal dimension " + std::to_string(fixed->dim) +
                                                    " outside [1, " + std::to_string(dim) + ")");
        }
        return fixed->dim;
    }

    const double fraction = std::get<VarianceFraction>(rule).fraction;
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw Error(Errc::invalid_argument, "variance fraction must lie in (0, 1)");
    }
    const double total = std::accumulate(eigenvalues.begin(), eigenvalues.end(), 0.0);
    if (!(total > 0.0)) throw Error(Errc::degenerate, "spectrum has no energy; cannot resolve a variance fraction");

    double cumulative = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        cumulative += eigenvalues[i];
        if (cumulative / total >= fraction) return i + 1;
    }
    return dim;
}

double hegemony_ratio(std::span<const double> eigenvalues, std::size_t d)
{
    if (d < 1 || d >= eigenvalues.size()) {
        throw Error(Errc::invalid_argument, "hegemony ratio needs 1 <= d < D");
    }
    const double principal = std::accumulate(eigenvalues.begin(), eigenvalues.begin() + static_cast<std::ptrdiff_t>(d), 0.0);
    const double residual = std::accumulate(eigenvalues.begin() + static_cast<std::ptrdiff_t>(d), eigenvalues.end(), 0.0);
    if (residual < kResidualEnergyFloor) return std::numeric_limits<double>::infinity();
    return principal / residual;
}

ProjectionPair fit_projection(const Matrix& centered, const DimensionRule& rule)
{
    const Eigen::Index n = centered.rows();
    const Eigen::Index dim = centered.cols();
    if (n < 2) throw Error(Errc::invalid_argument, "PCA needs at least two samples");
    if (dim < 2) throw Error(Errc::invalid_argument, "PCA needs D >= 2");
    if (!centered.allFinite()) throw Error(Errc::non_finite, "PCA input contains NaN or infinity");

    Eigen::BDCSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(centered), Eigen::ComputeThinV);
    const Eigen::VectorXd& sv = svd.singularValues();

    Vector eigenvalues = Vector::Zero(dim);
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        eigenvalues(i) = std::max(0.0, sv(i) * sv(i) / static_cast<double>(n));
    }

    const double sigma_max = sv.size() > 0 ? sv(0) : 0.0;
    std::size_t rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if (sv(i) > kRankTolerance * sigma_max && sv(i) > 0.0) ++rank;
    }

    // A variance rule is undefined on a spectrum with no energy; such data keeps one direction.
    const bool no_energy = rank == 0 && std::holds_alternative<VarianceFraction>(rule);
    if (no_energy) resolve_dimension(std::vector<double>{1.0, 0.0}, rule);
    const std::size_t requested =
        no_energy ? 1 : resolve_dimension({eigenvalues.data(), static_cast<std::size_t>(dim)}, rule);
    const std::size_t used = std::min(requested, std::max<std::size_t>(rank, 1));

    Matrix basis = svd.matrixV().leftCols(static_cast<Eigen::Index>(used));
    fix_column_signs(basis);
    return ProjectionPair(std::move(basis), std::move(eigenvalues), requested, rank);
}

Vector retract(const Vector& z, const Vector& mu, const ProjectionPair& pair, View view)
{
    if (z.size() != mu.size()) throw Error(Errc::dimension_mismatch, "retract: z and mu differ in dimension");
    if (!z.allFinite()) throw Error(Errc::non_finite, "retract: input is not finite");
    const Vector y = pair.project(view, z - mu) + mu;
    const double norm = y.norm();
    if (norm >= kNormFloor) return y / norm;
    const double mu_norm = mu.norm();
    if (mu_norm > kNormFloor) return mu / mu_norm;
    throw Error(Errc::degenerate, std::string("degenerate ") + to_string(view) + " retraction: zero-norm result");
}

Matrix retract_rows(const Matrix& z, const Vector& mu, const ProjectionPair& pair, View view)
{
    if (z.cols() != mu.size()) throw Error(Errc::dimension_mismatch, "retract: rows and mu differ in dimension");
    if (!z.allFinite()) throw Error(Errc::non_finite, "retract: input is not finite");
    const Matrix centered = z.rowwise() - mu.transpose();
    Matrix y = pair.project_rows(view, centered).rowwise() + mu.transpose();
    const double mu_norm = mu.norm();
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double norm = y.row(i).norm();
        if (norm >= kNormFloor) {
            y.row(i) /= norm;
        } else if (mu_norm > kNormFloor) {
            y.row(i) = mu.transpose() / mu_norm;
        } else {
            throw Error(Errc::degenerate, std::string("degenerate ") + to_string(view) +
                                              " retraction at row " + std::to_string(i));
        }
    }
    return y;
}

double within_class_covariance_trace(const Matrix& z, std::span<const std::int32_t> labels,
                                     std::optional<std::size_t> num_classes)
{
    if (static_cast<std::size_t>(z.rows()) != labels.size()) {
        throw Error(Errc::dimension_mismatch, "label count does not match row count");
    }
    if (labels.empty()) throw Error(Errc::invalid_argument, "within-class covariance of an empty set");

    std::int32_t max_label = 0;
    for (const auto y : labels) {
        if (y < 0) throw Error(Errc::invalid_argument, "negative class label");
        max_label = std::max(max_label, y);
    }
    const std::size_t classes = num_classes.value_or(static_cast<std::size_t>(max_label) + 1);
    if (static_cast<std::size_t>(max_label) >= classes) {
        throw Error(Errc::invalid_argument, "class label exceeds the class count");
    }

    Matrix means = Matrix::Zero(static_cast<Eigen::Index>(classes), z.cols());
    std::vector<std::size_t> counts(classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        means.row(labels[i]) += z.row(static_cast<Eigen::Index>(i));
        ++counts[static_cast<std::size_t>(labels[i])];
    }
    for (std::size_t c = 0; c < classes; ++c) {
        if (counts[c] == 0) {
            if (num_classes) throw Error(Errc::invalid_argument, "class " + std::to_string(c) + " is empty");
            continue;
        }
        means.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(counts[c]);
    }

    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        total += (z.row(static_cast<Eigen::Index>(i)) - means.row(labels[i])).squaredNorm();
    }
    return total / static_cast<double>(labels.size());
}

SpectralReport spectral_report(const FeaturePack& pack, const DimensionRule& rule)
{
    const Matrix z = normalize_rows(pack.features_f64());
    const Vector mu = column_mean(z);
    const Matrix centered = z.rowwise() - mu.transpose();
    const ProjectionPair pair = fit_projection(centered, rule);

    SpectralReport report;
    report.eigenvalues = pair.eigenvalues();
    report.d_used = pair.dim();
    report.rho = hegemony_ratio({report.eigenvalues.data(), static_cast<std::size_t>(report.eigenvalues.size())},
                                report.d_used);
    if (pack.labels) {
        report.within_class_trace = within_class_covariance_trace(z, *pack.labels);
    }
    return report;
}

void write_spectrum_csv(const SpectralReport& report, std::ostream& out)
{
    out << "index,eigenvalue\n";
    for (Eigen::Index i = 0; i < report.eigenvalues.size(); ++i) {
        out << (i + 1) << ',' << detail::format_double(report.eigenvalues(i)) << '\n';
    }
}

void write_spectrum_summary(const SpectralReport& report, std::ostream& out)
{
    out << "rho,d_used,within_class_trace\n";
    out << detail::format_double(report.rho) << ',' << report.d_used << ',';
    if (report.within_class_trace) out << detail::format_double(*report.within_class_trace);
    out << '\n';
}

}  // namespace dknn
