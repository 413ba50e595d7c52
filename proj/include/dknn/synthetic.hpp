#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "dknn/featurepack.hpp"
#include "dknn/geometry.hpp"
#include "dknn/types.hpp"

namespace dknn {

/// Neural-Collapse style ID data. Each sample of class c is
///   anchor_norm * a + m_c + semantic_spread * (g - mean(g)) U + sigma_in * eps
/// where m_c are simplex-ETF means embedded through U (C x D, orthonormal rows drawn from
/// frame_seed), a is the unit direction of 1^T U (orthogonal to every m_c), g ~ N(0, I_C)
/// and eps ~ N(0, I_D).
struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t dim = 64;
    std::size_t per_class = 100;
    double sigma_in = 0.05;
    std::uint64_t seed = 0;
    std::uint64_t frame_seed = 0;
    double anchor_norm = 1.0;
    double semantic_spread = 0.0;
    /// When > 0, logits = logit_scale * M x with M the ETF means.
    double logit_scale = 0.0;

    void validate() const;
};

enum class OodKind { residual_shift, gaussian_noise };

OodKind parse_ood_kind(const std::string& text);
const char* to_string(OodKind kind) noexcept;

struct OodSpec {
    OodKind kind = OodKind::residual_shift;
    double delta = 0.3;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Orthonormal C x D frame from Gram-Schmidt on a seeded Gaussian matrix.
Matrix make_frame(std::size_t classes, std::size_t dim, std::uint64_t frame_seed);

/// sqrt(C / (C - 1)) (I - 11^T / C) U: unit rows with pairwise inner products -1 / (C - 1).
Matrix make_etf_means(std::size_t classes, std::size_t dim, std::uint64_t frame_seed = 0);

FeaturePack generate_id(const SyntheticSpec& spec);

/// n perturbations in double precision, one per row. residual_shift: uniform on the sphere of
/// radius delta inside the residual subspace of `projection`; gaussian_noise: delta * N(0, I_D).
Matrix ood_perturbations(std::size_t n, const ProjectionPair& projection, const OodSpec& spec);

/// id_pack rows plus ood_perturbations; labels and logits are dropped.
FeaturePack generate_ood(const FeaturePack& id_pack, const ProjectionPair& projection, const OodSpec& spec);

/// logit_scale * M x for each row, with M = make_etf_means(classes, dim, frame_seed).
FloatMatrix etf_logits(const Matrix& features, const SyntheticSpec& spec);

}  // namespace dknn
