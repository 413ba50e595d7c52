#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dknn/geometry.hpp"
#include "dknn/neighbors.hpp"
#include "dknn/types.hpp"

namespace dknn {

struct FeaturePack;

/// Leave-one-out k-NN distance statistics per view. `sigma_*` is the value used for
/// standardization, after the floor max(sigma, 1e-8 * max(mu, 1)); `raw_sigma_*` is the
/// population standard deviation before flooring.
struct CalibrationStats {
    double mu_p = 0.0;
    double sigma_p = 1.0;
    double mu_r = 0.0;
    double sigma_r = 1.0;
    double raw_sigma_p = 1.0;
    double raw_sigma_r = 1.0;
    bool floor_engaged_p = false;
    bool floor_engaged_r = false;
};

struct ScoreBreakdown {
    double s_p = 0.0;
    double s_r = 0.0;
    double s_tilde_p = 0.0;
    double s_tilde_r = 0.0;
    double fused = 0.0;
};

inline constexpr std::size_t kDefaultK = 50;
inline constexpr double kDefaultAlpha = 0.5;

struct FitOptions {
    std::size_t k = kDefaultK;
    double alpha = kDefaultAlpha;
    /// Unset: FixedDim(C - 1) for labelled packs with C <= 20, VarianceFraction(0.95) otherwise.
    std::optional<DimensionRule> d_rule;
};

/// Rule used when FitOptions::d_rule is unset.
DimensionRule default_dimension_rule(const FeaturePack& pack);

double sigma_floor(double mu, double sigma);

/// Everything needed for online scoring: global mean, projection, the two retracted
/// galleries and their calibration statistics. Immutable once built; safe to score from
/// several threads.
class DKnnModel {
public:
    DKnnModel(Vector global_mean, ProjectionPair projection, Gallery gallery_p, Gallery gallery_r,
              CalibrationStats calibration, std::size_t k, double alpha, DimensionRule d_rule);

    const Vector& global_mean() const { return global_mean_; }
    const ProjectionPair& projection() const { return projection_; }
    const Gallery& gallery(View view) const { return view == View::principal ? gallery_p_ : gallery_r_; }
    const CalibrationStats& calibration() const { return calibration_; }
    std::size_t k() const { return k_; }
    double alpha() const { return alpha_; }
    const DimensionRule& d_rule() const { return d_rule_; }
    std::size_t dim() const { return static_cast<std::size_t>(global_mean_.size()); }
    std::size_t gallery_size() const { return gallery_p_.size(); }

    /// Human-readable notes produced while fitting (rank clamp, sigma floor).
    const std::vector<std::string>& warnings() const { return warnings_; }
    void add_warning(std::string message) { warnings_.push_back(std::move(message)); }

private:
    Vector global_mean_;
    ProjectionPair projection_;
    Gallery gallery_p_;
    Gallery gallery_r_;
    CalibrationStats calibration_;
    std::size_t k_;
    double alpha_;
    DimensionRule d_rule_;
    std::vector<std::string> warnings_;
};

/// Offline phase: normalize, take the mean, PCA, build the dual galleries, and calibrate
/// from leave-one-out k-th distances.
DKnnModel fit(const Matrix& train, const FitOptions& options);
DKnnModel fit(const FeaturePack& train, const FitOptions& options = {});

/// Online phase for one sample. `alpha` overrides the model's fusion weight.
ScoreBreakdown score(const DKnnModel& model, const Vector& x, std::optional<double> alpha = std::nullopt);
std::vector<ScoreBreakdown> score_batch(const DKnnModel& model, const Matrix& x,
                                        std::optional<double> alpha = std::nullopt);
std::vector<ScoreBreakdown> score_batch(const DKnnModel& model, const FeaturePack& pack,
                                        std::optional<double> alpha = std::nullopt);

/// Calibration statistics recomputed from a gallery (population std, no floor applied to
/// raw_sigma_*).
CalibrationStats calibrate_gallery(const Gallery& gallery_p, const Gallery& gallery_r, std::size_t k);

/// Model file: "DKNM" | u32 version | u32 manifest length | JSON manifest | sections.
/// Each section is a 16-byte header (4-byte tag, u32 rows, u32 cols, u32 reserved = 0)
/// followed by rows*cols little-endian float64 values, row-major.
inline constexpr std::uint32_t kModelVersion = 1;

void save_model(const DKnnModel& model, std::ostream& out);
DKnnModel load_model(std::istream& in);
void save_model(const DKnnModel& model, const std::filesystem::path& path);
DKnnModel load_model(const std::filesystem::path& path);

}  // namespace dknn
