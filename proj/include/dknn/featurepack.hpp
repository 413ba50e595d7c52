#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dknn/types.hpp"

namespace dknn {

/// Feature matrix with optional labels and logits, stored at single precision exactly as
/// it appears on disk. Downstream modules widen to double via features_f64().
///
/// Invariants (checked by validate()): n >= 1, D >= 2; labels in [0, C) with C >= 2;
/// logits have n rows and C columns; every numeric entry is finite.
struct FeaturePack {
    FloatMatrix features;
    std::optional<std::vector<std::int32_t>> labels;
    std::optional<FloatMatrix> logits;
    std::uint32_t num_classes = 0;
    std::map<std::string, std::string> meta;

    std::size_t rows() const { return static_cast<std::size_t>(features.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
    bool has_labels() const { return labels.has_value(); }
    bool has_logits() const { return logits.has_value(); }

    Matrix features_f64() const { return features.cast<double>(); }
    Matrix logits_f64() const;

    /// Throws dknn::Error on the first violated invariant.
    void validate() const;

    friend bool operator==(const FeaturePack& a, const FeaturePack& b);
};

/// Feature-pack container, little-endian:
///   0..3 "FPK1" | 4..7 version u32 | 8..11 n | 12..15 D | 16..19 C | 20 flags u8
///   (bit0 labels, bit1 logits) | 21..23 zero | n*D f32 | [n i32 labels] | [n*C f32 logits]
///   | u32 meta length | "key=value\n" lines.
inline constexpr std::uint32_t kPackVersion = 1;

void write_pack(const FeaturePack& pack, std::ostream& out);
FeaturePack read_pack(std::istream& in);

std::string encode_pack(const FeaturePack& pack);
FeaturePack decode_pack(std::string_view bytes);

void save_pack(const FeaturePack& pack, const std::filesystem::path& path);
FeaturePack load_pack(const std::filesystem::path& path);

/// Rectangular numeric CSV; with `has_label_column` the last column holds integer labels.
/// When `num_classes` is absent C is inferred as max(2, max_label + 1).
FeaturePack import_csv(std::string_view text, bool has_label_column,
                       std::optional<std::uint32_t> num_classes = std::nullopt);

}  // namespace dknn
