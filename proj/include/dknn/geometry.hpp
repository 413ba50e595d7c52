#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>

#include "dknn/types.hpp"

namespace dknn {

struct FeaturePack;

/// Keep exactly `dim` principal directions.
struct FixedDim {
    std::size_t dim;
};

/// Keep the smallest number of directions whose eigenvalues reach `fraction` of the total.
struct VarianceFraction {
    double fraction;
};

using DimensionRule = std::variant<FixedDim, VarianceFraction>;

/// Parses "fixed:N" or "var:F".
DimensionRule parse_dimension_rule(const std::string& text);
std::string to_string(const DimensionRule& rule);

enum class View { principal, residual };

const char* to_string(View view) noexcept;

/// Unit-norm rows. Throws Errc::degenerate for a row with norm <= 1e-12.
Matrix normalize_rows(const Matrix& x);
Vector normalize(const Vector& x);

Vector column_mean(const Matrix& x);

/// Principal basis V (D x d, orthonormal columns) plus the full descending eigenvalue
/// spectrum of the centered covariance. P_prin = V V^T and P_res = I - V V^T are never
/// stored; they are applied through V.
class ProjectionPair {
public:
    ProjectionPair(Matrix basis, Vector eigenvalues, std::size_t requested_dim, std::size_t numerical_rank);

    const Matrix& basis() const { return basis_; }
    const Vector& eigenvalues() const { return eigenvalues_; }
    std::size_t dim() const { return static_cast<std::size_t>(basis_.cols()); }
    std::size_t ambient_dim() const { return static_cast<std::size_t>(basis_.rows()); }

    /// d requested by the dimension rule before clamping to the numerical rank.
    std::size_t requested_dim() const { return requested_dim_; }
    std::size_t numerical_rank() const { return numerical_rank_; }
    bool rank_clamped() const { return requested_dim_ != dim(); }

    Matrix principal_projector() const;
    Matrix residual_projector() const;

    /// P_view * v for a single column vector.
    Vector project(View view, const Vector& v) const;
    /// Applies P_view to every row of `rows`.
    Matrix project_rows(View view, const Matrix& rows) const;

private:
    Matrix basis_;
    Vector eigenvalues_;
    std::size_t requested_dim_;
    std::size_t numerical_rank_;
};

/// PCA of an already-centered n x D matrix via SVD; eigenvalues are sigma_i^2 / n padded
/// with zeros to length D. Each basis column is sign-fixed so its largest-magnitude entry is
/// positive. A rule asking for more directions than the numerical rank
/// (singular values > 1e-10 * sigma_max) is clamped to max(rank, 1).
ProjectionPair fit_projection(const Matrix& centered, const DimensionRule& rule);

std::size_t resolve_dimension(std::span<const double> eigenvalues, const DimensionRule& rule);

/// Semantic hegemony ratio: principal energy over residual energy. Returns +infinity when
/// the residual energy is below 1e-15.
double hegemony_ratio(std::span<const double> eigenvalues, std::size_t d);

/// phi(P_view (z - mu) + mu). When the pre-normalization vector has norm < 1e-12 the anchor
/// direction phi(mu) is returned instead; if mu itself is ~0 this throws Errc::degenerate.
Vector retract(const Vector& z, const Vector& mu, const ProjectionPair& pair, View view);
Matrix retract_rows(const Matrix& z, const Vector& mu, const ProjectionPair& pair, View view);

/// trace(Sigma_W) with Sigma_W = sum_c sum_{z in c} (z - mu_c)(z - mu_c)^T / n.
/// With `num_classes`, every class in [0, C) must be populated.
double within_class_covariance_trace(const Matrix& z, std::span<const std::int32_t> labels,
                                     std::optional<std::size_t> num_classes = std::nullopt);

struct SpectralReport {
    Vector eigenvalues;
    double rho = 0.0;
    std::size_t d_used = 0;
    std::optional<double> within_class_trace;
};

/// Normalizes, centers and decomposes `pack`, then reports the spectrum.
SpectralReport spectral_report(const FeaturePack& pack, const DimensionRule& rule);

/// `index,eigenvalue` rows, 1-based index.
void write_spectrum_csv(const SpectralReport& report, std::ostream& out);
/// `rho,d_used,within_class_trace` header plus one value line.
void write_spectrum_summary(const SpectralReport& report, std::ostream& out);

}  // namespace dknn
