#include "dknn/synthetic.hpp"

#include <cmath>

#include "dknn/error.hpp"
#include "dknn/rng.hpp"
#include "text_format.hpp"

namespace dknn {

namespace {

constexpr std::uint64_t kFrameStream = 0;
constexpr std::uint64_t kSampleStream = 1;
constexpr std::uint64_t kOodStream = 2;

void check_shape(std::size_t classes, std::size_t dim)
{
    if (classes < 2) throw Error(Errc::invalid_argument, "need at least 2 classes");
    if (classes > dim) {
        throw Error(Errc::invalid_argument, "classes (" + std::to_string(classes) + ") exceed dimension (" +
                                                std::to_string(dim) + ")");
    }
}

Vector standard_normal(CounterRng& rng, Eigen::Index size)
{
    Vector v(size);
    for (Eigen::Index i = 0; i < size; ++i) v(i) = rng.normal();
    return v;
}

}  // namespace

void SyntheticSpec::validate() const
{
    check_shape(classes, dim);
    if (per_class < 1) throw Error(Errc::invalid_argument, "per_class must be >= 1");
    if (!(sigma_in >= 0.0) || !std::isfinite(sigma_in)) throw Error(Errc::invalid_argument, "sigma_in must be >= 0");
    if (!(anchor_norm >= 0.0) || !std::isfinite(anchor_norm)) {
        throw Error(Errc::invalid_argument, "anchor_norm must be >= 0");
    }
    if (!(semantic_spread >= 0.0) || !std::isfinite(semantic_spread)) {
        throw Error(Errc::invalid_argument, "semantic_spread must be >= 0");
    }
    if (!(logit_scale >= 0.0) || !std::isfinite(logit_scale)) {
        throw Error(Errc::invalid_argument, "logit_scale must be >= 0");
    }
}

OodKind parse_ood_kind(const std::string& text)
{
    if (text == "residual_shift") return OodKind::residual_shift;
    if (text == "gaussian_noise") return OodKind::gaussian_noise;
    throw Error(Errc::invalid_argument, "unknown OOD kind '" + text + "'");
}

const char* to_string(OodKind kind) noexcept
{
    return kind == OodKind::residual_shift ? "residual_shift" : "gaussian_noise";
}

void OodSpec::validate() const
{
    if (!(delta > 0.0) || !std::isfinite(delta)) throw Error(Errc::invalid_argument, "delta must be > 0");
}

Matrix make_frame(std::size_t classes, std::size_t dim, std::uint64_t frame_seed)
{
    check_shape(classes, dim);
    CounterRng rng(frame_seed, kFrameStream);
    const auto rows = static_cast<Eigen::Index>(classes);
    const auto cols = static_cast<Eigen::Index>(dim);
    Matrix u(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        Vector v = standard_normal(rng, cols);
        // Two Gram-Schmidt passes keep the rows orthogonal to round-off.
        for (int pass = 0; pass < 2; ++pass) {
            for (Eigen::Index j = 0; j < i; ++j) v -= u.row(j).dot(v) * u.row(j).transpose();
        }
        const double norm = v.norm();
        if (norm < 1e-8) throw Error(Errc::degenerate, "frame construction hit a dependent row");
        u.row(i) = (v / norm).transpose();
    }
    return u;
}

Matrix make_etf_means(std::size_t classes, std::size_t dim, std::uint64_t frame_seed)
{
    const Matrix u = make_frame(classes, dim, frame_seed);
    const auto c = static_cast<Eigen::Index>(classes);
    const double cd = static_cast<double>(classes);
    const Matrix centering = Matrix::Identity(c, c) - Matrix::Constant(c, c, 1.0 / cd);
    return std::sqrt(cd / (cd - 1.0)) * centering * u;
}

FeaturePack generate_id(const SyntheticSpec& spec)
{
    spec.validate();
    const Matrix u = make_frame(spec.classes, spec.dim, spec.frame_seed);
    const auto c = static_cast<Eigen::Index>(spec.classes);
    const auto dim = static_cast<Eigen::Index>(spec.dim);
    const double cd = static_cast<double>(spec.classes);
    const Matrix centering = Matrix::Identity(c, c) - Matrix::Constant(c, c, 1.0 / cd);
    const Matrix means = std::sqrt(cd / (cd - 1.0)) * centering * u;
    const Vector anchor = u.colwise().sum().transpose() / std::sqrt(cd);

    const auto n = static_cast<Eigen::Index>(spec.classes * spec.per_class);
    Matrix x(n, dim);
    std::vector<std::int32_t> labels(static_cast<std::size_t>(n));
    CounterRng rng(spec.seed, kSampleStream);
    Eigen::Index row = 0;
    for (Eigen::Index cls = 0; cls < c; ++cls) {
        const Vector center = spec.anchor_norm * anchor + means.row(cls).transpose();
        for (std::size_t i = 0; i < spec.per_class; ++i, ++row) {
            Vector sample = center;
            if (spec.semantic_spread > 0.0) {
                Vector g = standard_normal(rng, c);
                g.array() -= g.mean();
                sample += spec.semantic_spread * (u.transpose() * g);
            }
            if (spec.sigma_in > 0.0) sample += spec.sigma_in * standard_normal(rng, dim);
            x.row(row) = sample.transpose();
            labels[static_cast<std::size_t>(row)] = static_cast<std::int32_t>(cls);
        }
    }

    FeaturePack pack;
    pack.features = x.cast<float>();
    pack.labels = std::move(labels);
    pack.num_classes = static_cast<std::uint32_t>(spec.classes);
    if (spec.logit_scale > 0.0) pack.logits = (spec.logit_scale * x * means.transpose()).cast<float>();
    pack.meta = {
        {"generator", "dknn-synthetic-id"},
        {"rng", CounterRng::kName},
        {"classes", std::to_string(spec.classes)},
        {"dim", std::to_string(spec.dim)},
        {"per_class", std::to_string(spec.per_class)},
        {"sigma_in", detail::format_double(spec.sigma_in)},
        {"seed", std::to_string(spec.seed)},
        {"frame_seed", std::to_string(spec.frame_seed)},
        {"anchor_norm", detail::format_double(spec.anchor_norm)},
        {"semantic_spread", detail::format_double(spec.semantic_spread)},
        {"logit_scale", detail::format_double(spec.logit_scale)},
    };
    return pack;
}

Matrix ood_perturbations(std::size_t n, const ProjectionPair& projection, const OodSpec& spec)
{
    spec.validate();
    const auto dim = static_cast<Eigen::Index>(projection.ambient_dim());
    if (spec.kind == OodKind::residual_shift && projection.dim() >= projection.ambient_dim()) {
        throw Error(Errc::degenerate, "residual subspace is trivial (d = D)");
    }
    CounterRng rng(spec.seed, kOodStream);
    Matrix out(static_cast<Eigen::Index>(n), dim);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        if (spec.kind == OodKind::gaussian_noise) {
            out.row(i) = spec.delta * standard_normal(rng, dim).transpose();
            continue;
        }
        for (;;) {
            Vector r = projection.project(View::residual, standard_normal(rng, dim));
            r = projection.project(View::residual, r);
            const double norm = r.norm();
            if (norm < 1e-12) continue;
            out.row(i) = (spec.delta / norm) * r.transpose();
            break;
        }
    }
    return out;
}

FeaturePack generate_ood(const FeaturePack& id_pack, const ProjectionPair& projection, const OodSpec& spec)
{
    if (id_pack.dim() != projection.ambient_dim()) {
        throw Error(Errc::dimension_mismatch, "ID pack and projection disagree on the feature dimension");
    }
    const Matrix shift = ood_perturbations(id_pack.rows(), projection, spec);
    FeaturePack pack;
    pack.features = (id_pack.features_f64() + shift).cast<float>();
    pack.meta = {
        {"generator", "dknn-synthetic-ood"},
        {"rng", CounterRng::kName},
        {"kind", to_string(spec.kind)},
        {"delta", detail::format_double(spec.delta)},
        {"seed", std::to_string(spec.seed)},
        {"principal_dim", std::to_string(projection.dim())},
    };
    for (const auto& [key, value] : id_pack.meta) pack.meta.emplace("source." + key, value);
    return pack;
}

FloatMatrix etf_logits(const Matrix& features, const SyntheticSpec& spec)
{
    if (static_cast<std::size_t>(features.cols()) != spec.dim) {
        throw Error(Errc::dimension_mismatch, "features do not match the synthetic dimension");
    }
    const Matrix means = make_etf_means(spec.classes, spec.dim, spec.frame_seed);
    return (spec.logit_scale * features * means.transpose()).cast<float>();
}

}  // namespace dknn
