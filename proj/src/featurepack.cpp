#include "dknn/featurepack.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "dknn/error.hpp"

namespace dknn {

const char* to_string(Errc code) noexcept
{
    switch (code) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::bad_magic: return "bad magic";
    case Errc::truncated: return "truncated stream";
    case Errc::dimension_mismatch: return "dimension mismatch";
    case Errc::non_finite: return "non-finite value";
    case Errc::version_mismatch: return "version mismatch";
    case Errc::corrupt: return "corrupt data";
    case Errc::degenerate: return "degenerate input";
    case Errc::io: return "i/o failure";
    case Errc::parse: return "parse error";
    case Errc::capability: return "missing capability";
    }
    return "unknown";
}

namespace {

constexpr std::array<char, 4> kMagic = {'F', 'P', 'K', '1'};
constexpr std::uint8_t kFlagLabels = 0x1;
constexpr std::uint8_t kFlagLogits = 0x2;
constexpr std::size_t kHeaderSize = 24;

void put_u32(std::string& buf, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) {
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
}

void put_f32(std::string& buf, float v) { put_u32(buf, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
public:
    explicit ByteReader(std::istream& in) : in_(in) {}

    void read(char* dst, std::size_t count, const char* what)
    {
        in_.read(dst, static_cast<std::streamsize>(count));
        if (static_cast<std::size_t>(in_.gcount()) != count) {
            throw Error(Errc::truncated, std::string("feature pack truncated while reading ") + what);
        }
    }

    std::uint32_t u32(const char* what)
    {
        std::array<unsigned char, 4> b{};
        read(reinterpret_cast<char*>(b.data()), 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    // Reads `count` little-endian 32-bit words in one block.
    std::vector<std::uint32_t> words(std::size_t count, const char* what)
    {
        std::vector<unsigned char> raw(count * 4);
        read(reinterpret_cast<char*>(raw.data()), raw.size(), what);
        std::vector<std::uint32_t> out(count);
        for (std::size_t i = 0; i < count; ++i) {
            const unsigned char* b = raw.data() + 4 * i;
            out[i] = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                     (static_cast<std::uint32_t>(b[2]) << 16) |
                     (static_cast<std::uint32_t>(b[3]) << 24);
        }
        return out;
    }

private:
    std::istream& in_;
};

FloatMatrix read_float_block(ByteReader& reader, std::size_t rows, std::size_t cols, const char* what)
{
    const auto raw = reader.words(rows * cols, what);
    FloatMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    float* dst = m.data();
    for (std::size_t i = 0; i < raw.size(); ++i) {
        dst[i] = std::bit_cast<float>(raw[i]);
    }
    return m;
}

bool all_finite(const FloatMatrix& m)
{
    const float* p = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

void validate_meta(const std::map<std::string, std::string>& meta)
{
    for (const auto& [key, value] : meta) {
        if (key.empty() || key.find_first_of("=\n") != std::string::npos) {
            throw Error(Errc::invalid_argument, "metadata key '" + key + "' must be non-empty without '=' or newline");
        }
        if (value.find('\n') != std::string::npos) {
            throw Error(Errc::invalid_argument, "metadata value for '" + key + "' contains a newline");
        }
    }
}

std::map<std::string, std::string> parse_meta(const std::string& text)
{
    std::map<std::string, std::string> meta;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw Error(Errc::corrupt, "malformed metadata line '" + line + "'");
        }
        meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return meta;
}

std::string_view trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

Matrix FeaturePack::logits_f64() const
{
    if (!logits) throw Error(Errc::capability, "feature pack has no logits block");
    return logits->cast<double>();
}

void FeaturePack::validate() const
{
    if (features.rows() < 1) throw Error(Errc::dimension_mismatch, "feature pack needs n >= 1 rows");
    if (features.cols() < 2) throw Error(Errc::dimension_mismatch, "feature pack needs D >= 2 columns");
    if (!all_finite(features)) throw Error(Errc::non_finite, "feature block contains NaN or infinity");

    if (labels) {
        if (labels->size() != rows()) {
            throw Error(Errc::dimension_mismatch, "label count does not match row count");
        }
        if (num_classes < 2) throw Error(Errc::dimension_mismatch, "labelled pack needs C >= 2");
        for (std::size_t i = 0; i < labels->size(); ++i) {
            const auto y = (*labels)[i];
            if (y < 0 || static_cast<std::uint32_t>(y) >= num_classes) {
                throw Error(Errc::invalid_argument,
                            "label " + std::to_string(y) + " at row " + std::to_string(i) + " outside [0, C)");
            }
        }
    }
    if (logits) {
        if (static_cast<std::size_t>(logits->rows()) != rows()) {
            throw Error(Errc::dimension_mismatch, "logit row count does not match feature row count");
        }
        if (logits->cols() < 1 || static_cast<std::uint32_t>(logits->cols()) != num_classes) {
            throw Error(Errc::dimension_mismatch, "logit width does not match C");
        }
        if (!all_finite(*logits)) throw Error(Errc::non_finite, "logit block contains NaN or infinity");
    }
    if (!labels && !logits && num_classes != 0) {
        throw Error(Errc::dimension_mismatch, "C must be 0 when neither labels nor logits are present");
    }
    validate_meta(meta);
}

bool operator==(const FeaturePack& a, const FeaturePack& b)
{
    if (a.num_classes != b.num_classes || a.meta != b.meta || a.labels != b.labels) return false;
    if (a.features.rows() != b.features.rows() || a.features.cols() != b.features.cols()) return false;
    if (a.features != b.features) return false;
    if (a.logits.has_value() != b.logits.has_value()) return false;
    if (a.logits) {
        if (a.logits->rows() != b.logits->rows() || a.logits->cols() != b.logits->cols()) return false;
        if (*a.logits != *b.logits) return false;
    }
    return true;
}

std::string encode_pack(const FeaturePack& pack)
{
    pack.validate();
    constexpr auto kMax = std::numeric_limits<std::uint32_t>::max();
    if (pack.rows() > kMax || pack.dim() > kMax) {
        throw Error(Errc::invalid_argument, "feature pack dimensions exceed the u32 header range");
    }

    std::string buf;
    const std::size_t payload = pack.rows() * pack.dim() * 4 +
                                (pack.labels ? pack.rows() * 4 : 0) +
                                (pack.logits ? pack.rows() * pack.num_classes * 4 : 0);
    buf.reserve(kHeaderSize + payload + 64);

    buf.append(kMagic.data(), kMagic.size());
    put_u32(buf, kPackVersion);
    put_u32(buf, static_cast<std::uint32_t>(pack.rows()));
    put_u32(buf, static_cast<std::uint32_t>(pack.dim()));
    put_u32(buf, pack.num_classes);
    std::uint8_t flags = 0;
    if (pack.labels) flags |= kFlagLabels;
    if (pack.logits) flags |= kFlagLogits;
    buf.push_back(static_cast<char>(flags));
    buf.append(3, '\0');

    const float* f = pack.features.data();
    for (Eigen::Index i = 0; i < pack.features.size(); ++i) put_f32(buf, f[i]);
    if (pack.labels) {
        for (const auto y : *pack.labels) put_u32(buf, static_cast<std::uint32_t>(y));
    }
    if (pack.logits) {
        const float* l = pack.logits->data();
        for (Eigen::Index i = 0; i < pack.logits->size(); ++i) put_f32(buf, l[i]);
    }

    std::string meta;
    for (const auto& [key, value] : pack.meta) {
        meta += key;
        meta += '=';
        meta += value;
        meta += '\n';
    }
    put_u32(buf, static_cast<std::uint32_t>(meta.size()));
    buf += meta;
    return buf;
}

void write_pack(const FeaturePack& pack, std::ostream& out)
{
    const std::string bytes = encode_pack(pack);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::io, "failed to write feature pack");
}

FeaturePack read_pack(std::istream& in)
{
    ByteReader reader(in);
    std::array<char, 4> magic{};
    reader.read(magic.data(), magic.size(), "magic");
    if (magic != kMagic) throw Error(Errc::bad_magic, "not a feature pack (bad magic)");

    const std::uint32_t version = reader.u32("version");
    if (version != kPackVersion) {
        throw Error(Errc::version_mismatch, "unsupported feature pack version " + std::to_string(version));
    }
    const std::uint32_t n = reader.u32("row count");
    const std::uint32_t dim = reader.u32("dimension");
    const std::uint32_t classes = reader.u32("class count");
    std::array<char, 4> tail{};
    reader.read(tail.data(), tail.size(), "flags");
    const auto flags = static_cast<std::uint8_t>(tail[0]);
    if ((flags & ~(kFlagLabels | kFlagLogits)) != 0 || tail[1] != 0 || tail[2] != 0 || tail[3] != 0) {
        throw Error(Errc::corrupt, "feature pack header has unknown flags or non-zero padding");
    }
    if (n < 1 || dim < 2) {
        throw Error(Errc::dimension_mismatch,
                    "feature pack declares n=" + std::to_string(n) + ", D=" + std::to_string(dim));
    }
    const bool has_labels = (flags & kFlagLabels) != 0;
    const bool has_logits = (flags & kFlagLogits) != 0;
    if ((has_labels && classes < 2) || (has_logits && classes < 1)) {
        throw Error(Errc::dimension_mismatch, "feature pack declares C=" + std::to_string(classes) +
                                                  " inconsistent with its blocks");
    }

    FeaturePack pack;
    pack.num_classes = classes;
    pack.features = read_float_block(reader, n, dim, "features");
    if (has_labels) {
        const auto raw = reader.words(n, "labels");
        pack.labels.emplace(n);
        for (std::size_t i = 0; i < n; ++i) (*pack.labels)[i] = static_cast<std::int32_t>(raw[i]);
    }
    if (has_logits) pack.logits = read_float_block(reader, n, classes, "logits");

    const std::uint32_t meta_len = reader.u32("metadata length");
    std::string meta(meta_len, '\0');
    if (meta_len > 0) reader.read(meta.data(), meta_len, "metadata");
    pack.meta = parse_meta(meta);

    pack.validate();
    return pack;
}

FeaturePack decode_pack(std::string_view bytes)
{
    std::istringstream in{std::string(bytes)};
    return read_pack(in);
}

void save_pack(const FeaturePack& pack, const std::filesystem::path& path)
{
    const std::string bytes = encode_pack(pack);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::io, "failed writing '" + path.string() + "'");
}

FeaturePack load_pack(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open '" + path.string() + "'");
    return read_pack(in);
}

FeaturePack import_csv(std::string_view text, bool has_label_column, std::optional<std::uint32_t> num_classes)
{
    std::vector<std::vector<double>> rows;
    std::vector<std::int64_t> labels;
    std::size_t width = 0;
    std::size_t line_no = 0;

    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view line = trim(text.substr(pos, end - pos));
        pos = end + 1;
        ++line_no;
        if (line.empty()) continue;

        std::vector<std::string_view> cells;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            cells.push_back(trim(line.substr(start, comma == std::string_view::npos ? comma : comma - start)));
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        if (width == 0) {
            width = cells.size();
        } else if (cells.size() != width) {
            throw Error(Errc::parse, "ragged CSV: line " + std::to_string(line_no) + " has " +
                                         std::to_string(cells.size()) + " cells, expected " +
                                         std::to_string(width));
        }

        const std::size_t n_features = has_label_column ? cells.size() - 1 : cells.size();
        std::vector<double> row(n_features);
        for (std::size_t j = 0; j < n_features; ++j) {
            const auto cell = cells[j];
            const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), row[j]);
            if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
                throw Error(Errc::parse, "non-numeric CSV cell '" + std::string(cell) + "' on line " +
                                             std::to_string(line_no));
            }
        }
        if (has_label_column) {
            const auto cell = cells.back();
            std::int64_t y = 0;
            const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), y);
            if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
                throw Error(Errc::parse, "non-integer label '" + std::string(cell) + "' on line " +
                                             std::to_string(line_no));
            }
            labels.push_back(y);
        }
        rows.push_back(std::move(row));
    }

    if (rows.empty()) throw Error(Errc::parse, "CSV contains no rows");
    const std::size_t dim = rows.front().size();
    if (dim < 2) throw Error(Errc::dimension_mismatch, "CSV needs at least two feature columns");

    FeaturePack pack;
    pack.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            pack.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<float>(rows[i][j]);
        }
    }

    if (has_label_column) {
        std::int64_t max_label = 0;
        for (const auto y : labels) {
            if (y < 0) throw Error(Errc::invalid_argument, "negative label " + std::to_string(y));
            max_label = std::max(max_label, y);
        }
        const std::int64_t classes = num_classes ? static_cast<std::int64_t>(*num_classes)
                                                 : std::max<std::int64_t>(2, max_label + 1);
        if (max_label >= classes) {
            throw Error(Errc::invalid_argument, "label " + std::to_string(max_label) + " out of range for C=" +
                                                    std::to_string(classes));
        }
        pack.num_classes = static_cast<std::uint32_t>(classes);
        pack.labels.emplace(labels.begin(), labels.end());
    }
    pack.validate();
    return pack;
}

}  // namespace dknn
