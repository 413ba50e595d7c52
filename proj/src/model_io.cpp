#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "dknn/error.hpp"
#include "dknn/pipeline.hpp"

namespace dknn {

namespace {

using nlohmann::json;

constexpr std::array<char, 4> kModelMagic = {'D', 'K', 'N', 'M'};
constexpr double kUnitNormTolerance = 1e-10;

void put_u32(std::ostream& out, std::uint32_t v)
{
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    out.write(b.data(), 4);
}

void put_section(std::ostream& out, const char (&tag)[5], const double* data, std::size_t rows, std::size_t cols)
{
    out.write(tag, 4);
    put_u32(out, static_cast<std::uint32_t>(rows));
    put_u32(out, static_cast<std::uint32_t>(cols));
    put_u32(out, 0);
    std::string buf(rows * cols * 8, '\0');
    for (std::size_t i = 0; i < rows * cols; ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(data[i]);
        for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

class SectionReader {
public:
    explicit SectionReader(std::istream& in) : in_(in) {}

    void read(char* dst, std::size_t count, const std::string& what)
    {
        in_.read(dst, static_cast<std::streamsize>(count));
        if (static_cast<std::size_t>(in_.gcount()) != count) {
            throw Error(Errc::corrupt, "model file truncated while reading " + what);
        }
    }

    std::uint32_t u32(const std::string& what)
    {
        std::array<unsigned char, 4> b{};
        read(reinterpret_cast<char*>(b.data()), 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    Matrix section(const char (&tag)[5], std::size_t rows, std::size_t cols)
    {
        std::array<char, 4> got{};
        read(got.data(), 4, std::string("section tag ") + tag);
        if (std::string_view(got.data(), 4) != std::string_view(tag, 4)) {
            throw Error(Errc::corrupt, std::string("expected model section ") + tag);
        }
        const std::uint32_t r = u32(tag);
        const std::uint32_t c = u32(tag);
        const std::uint32_t reserved = u32(tag);
        if (r != rows || c != cols || reserved != 0) {
            throw Error(Errc::corrupt, std::string("model section ") + tag + " has unexpected shape " +
                                           std::to_string(r) + "x" + std::to_string(c));
        }
        std::string raw(rows * cols * 8, '\0');
        read(raw.data(), raw.size(), tag);
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        double* dst = m.data();
        for (std::size_t i = 0; i < rows * cols; ++i) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) {
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i * 8 + static_cast<std::size_t>(b)]))
                        << (8 * b);
            }
            dst[i] = std::bit_cast<double>(bits);
        }
        if (!m.allFinite()) throw Error(Errc::corrupt, std::string("model section ") + tag + " is not finite");
        return m;
    }

private:
    std::istream& in_;
};

void check_unit_rows(const Matrix& gallery, const char* name)
{
    for (Eigen::Index i = 0; i < gallery.rows(); ++i) {
        if (std::abs(gallery.row(i).norm() - 1.0) > kUnitNormTolerance) {
            throw Error(Errc::corrupt, std::string(name) + " row " + std::to_string(i) + " is not unit-norm");
        }
    }
}

}  // namespace

void save_model(const DKnnModel& model, std::ostream& out)
{
    const ProjectionPair& proj = model.projection();
    const CalibrationStats& cal = model.calibration();
    const json manifest = {
        {"format", "dknn-model"},
        {"version", kModelVersion},
        {"k", model.k()},
        {"alpha", model.alpha()},
        {"d", proj.dim()},
        {"D", model.dim()},
        {"n", model.gallery_size()},
        {"d_rule", to_string(model.d_rule())},
        {"requested_d", proj.requested_dim()},
        {"numerical_rank", proj.numerical_rank()},
        {"sigma_floor_engaged", {{"principal", cal.floor_engaged_p}, {"residual", cal.floor_engaged_r}}},
    };
    const std::string text = manifest.dump();

    out.write(kModelMagic.data(), 4);
    put_u32(out, kModelVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));

    const std::size_t dim = model.dim();
    const std::size_t n = model.gallery_size();
    put_section(out, "MEAN", model.global_mean().data(), 1, dim);
    put_section(out, "BASV", proj.basis().data(), dim, proj.dim());
    put_section(out, "EIGV", proj.eigenvalues().data(), 1, dim);
    put_section(out, "GALP", model.gallery(View::principal).points().data(), n, dim);
    put_section(out, "GALR", model.gallery(View::residual).points().data(), n, dim);
    const std::array<double, 6> calib = {cal.mu_p, cal.sigma_p, cal.mu_r, cal.sigma_r, cal.raw_sigma_p, cal.raw_sigma_r};
    put_section(out, "CALB", calib.data(), 1, calib.size());
    if (!out) throw Error(Errc::io, "failed to write model");
}

DKnnModel load_model(std::istream& in)
{
    SectionReader reader(in);
    std::array<char, 4> magic{};
    in.read(magic.data(), 4);
    if (in.gcount() != 4 || magic != kModelMagic) throw Error(Errc::bad_magic, "not a D-KNN model file");

    const std::uint32_t version = reader.u32("version");
    if (version != kModelVersion) {
        throw Error(Errc::version_mismatch, "unsupported model version " + std::to_string(version));
    }
    const std::uint32_t manifest_len = reader.u32("manifest length");
    std::string text(manifest_len, '\0');
    reader.read(text.data(), manifest_len, "manifest");

    json manifest;
    std::size_t k = 0, d = 0, dim = 0, n = 0, requested_d = 0, rank = 0;
    double alpha = 0.0;
    DimensionRule rule = FixedDim{1};
    bool floor_p = false, floor_r = false;
    try {
        manifest = json::parse(text);
        if (manifest.at("version").get<std::uint32_t>() != kModelVersion) {
            throw Error(Errc::version_mismatch, "unsupported model manifest version");
        }
        for (const char* key : {"k", "d", "D", "n", "requested_d", "numerical_rank"}) {
            if (!manifest.at(key).is_number_unsigned()) {
                throw Error(Errc::corrupt, std::string("manifest field '") + key + "' must be a non-negative integer");
            }
        }
        k = manifest.at("k").get<std::size_t>();
        alpha = manifest.at("alpha").get<double>();
        d = manifest.at("d").get<std::size_t>();
        dim = manifest.at("D").get<std::size_t>();
        n = manifest.at("n").get<std::size_t>();
        requested_d = manifest.at("requested_d").get<std::size_t>();
        rank = manifest.at("numerical_rank").get<std::size_t>();
        rule = parse_dimension_rule(manifest.at("d_rule").get<std::string>());
        floor_p = manifest.at("sigma_floor_engaged").at("principal").get<bool>();
        floor_r = manifest.at("sigma_floor_engaged").at("residual").get<bool>();
    } catch (const json::exception& e) {
        throw Error(Errc::corrupt, std::string("malformed model manifest: ") + e.what());
    } catch (const Error& e) {
        if (e.code() == Errc::version_mismatch) throw;
        throw Error(Errc::corrupt, std::string("malformed model manifest: ") + e.what());
    }
    if (dim < 2 || d < 1 || d > dim || n < 2) throw Error(Errc::corrupt, "model manifest has invalid shape");

    const Matrix mean = reader.section("MEAN", 1, dim);
    Matrix basis = reader.section("BASV", dim, d);
    const Matrix eig = reader.section("EIGV", 1, dim);
    Matrix gal_p = reader.section("GALP", n, dim);
    Matrix gal_r = reader.section("GALR", n, dim);
    const Matrix calib = reader.section("CALB", 1, 6);
    if (in.peek() != std::char_traits<char>::eof()) throw Error(Errc::corrupt, "trailing bytes after model sections");

    check_unit_rows(gal_p, "principal gallery");
    check_unit_rows(gal_r, "residual gallery");

    CalibrationStats cal;
    cal.mu_p = calib(0, 0);
    cal.sigma_p = calib(0, 1);
    cal.mu_r = calib(0, 2);
    cal.sigma_r = calib(0, 3);
    cal.raw_sigma_p = calib(0, 4);
    cal.raw_sigma_r = calib(0, 5);
    cal.floor_engaged_p = floor_p;
    cal.floor_engaged_r = floor_r;

    try {
        ProjectionPair projection(std::move(basis), eig.row(0).transpose(), requested_d, rank);
        return DKnnModel(mean.row(0).transpose(), std::move(projection), Gallery(std::move(gal_p)),
                         Gallery(std::move(gal_r)), cal, k, alpha, rule);
    } catch (const Error& e) {
        throw Error(Errc::corrupt, std::string("inconsistent model file: ") + e.what());
    }
}

void save_model(const DKnnModel& model, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot open '" + path.string() + "' for writing");
    save_model(model, out);
}

DKnnModel load_model(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open '" + path.string() + "'");
    return load_model(in);
}

}  // namespace dknn
