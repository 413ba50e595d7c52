#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "dknn/error.hpp"
#include "dknn/featurepack.hpp"

using namespace dknn;

namespace {

std::uint32_t u32_at(const std::string& bytes, std::size_t offset)
{
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    return v;
}

float f32_at(const std::string& bytes, std::size_t offset)
{
    const std::uint32_t bits = u32_at(bytes, offset);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

void put_u32(std::string& bytes, std::size_t offset, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) bytes[offset + i] = static_cast<char>((v >> (8 * i)) & 0xFF);
}

FeaturePack small_pack()
{
    FeaturePack p;
    p.features = FloatMatrix(3, 4);
    p.features << 1, 2, 3, 4, 5, 6, 7, 8, -1, 0.5f, 0.25f, 1e-3f;
    p.labels = std::vector<std::int32_t>{0, 1, 1};
    p.num_classes = 2;
    return p;
}

Errc code_of(const std::function<void()>& fn)
{
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected dknn::Error");
    return Errc::io;
}

}  // namespace

TEST_CASE("minimal pack has the documented byte layout")
{
    FeaturePack p;
    p.features = FloatMatrix(1, 2);
    p.features << 1.0f, 2.0f;
    const std::string bytes = encode_pack(p);

    REQUIRE(bytes.size() == 24 + 8 + 4);
    CHECK(bytes.substr(0, 4) == "FPK1");
    CHECK(u32_at(bytes, 4) == 1);
    CHECK(u32_at(bytes, 8) == 1);
    CHECK(u32_at(bytes, 12) == 2);
    CHECK(u32_at(bytes, 16) == 0);
    CHECK(bytes[20] == 0);
    CHECK(bytes[21] == 0);
    CHECK(bytes[22] == 0);
    CHECK(bytes[23] == 0);
    CHECK(f32_at(bytes, 24) == 1.0f);
    CHECK(f32_at(bytes, 28) == 2.0f);
    CHECK(u32_at(bytes, 32) == 0);
}

TEST_CASE("writing is deterministic")
{
    const FeaturePack p = small_pack();
    CHECK(encode_pack(p) == encode_pack(p));
}

TEST_CASE("labelled pack round-trips")
{
    const FeaturePack p = small_pack();
    const FeaturePack q = decode_pack(encode_pack(p));
    CHECK(q == p);
    REQUIRE(q.labels);
    CHECK(*q.labels == std::vector<std::int32_t>{0, 1, 1});
}

TEST_CASE("labels, logits and metadata are laid out in order")
{
    FeaturePack p = small_pack();
    p.logits = FloatMatrix(3, 2);
    p.logits.value() << 0.5f, -0.5f, 1, 2, 3, 4;
    p.meta = {{"model", "wrn"}, {"b", "2"}};
    const std::string bytes = encode_pack(p);

    CHECK(u32_at(bytes, 16) == 2);
    CHECK(static_cast<unsigned char>(bytes[20]) == 3);
    std::size_t off = 24;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 4; ++j, off += 4) CHECK(f32_at(bytes, off) == p.features(i, j));
    }
    for (int i = 0; i < 3; ++i, off += 4) CHECK(static_cast<std::int32_t>(u32_at(bytes, off)) == (*p.labels)[i]);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 2; ++j, off += 4) CHECK(f32_at(bytes, off) == (*p.logits)(i, j));
    }
    const std::uint32_t meta_len = u32_at(bytes, off);
    off += 4;
    CHECK(bytes.substr(off) == "b=2\nmodel=wrn\n");
    CHECK(meta_len == bytes.size() - off);
    CHECK(decode_pack(bytes) == p);
}

TEST_CASE("randomized packs round-trip field-wise")
{
    std::mt19937_64 gen(11);
    std::uniform_int_distribution<int> coin(0, 1);
    std::normal_distribution<float> normal(0.0f, 3.0f);
    const std::vector<std::pair<int, int>> shapes = {{1, 2}, {1, 2048}, {1000, 2}, {7, 13}, {250, 300},
                                                     {64, 2048}, {1000, 64}, {3, 5}, {500, 128}, {2, 1024}};
    for (const auto& [n, d] : shapes) {
        FeaturePack p;
        p.features = FloatMatrix(n, d);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < d; ++j) p.features(i, j) = normal(gen);
        }
        const std::uint32_t c = 2 + static_cast<std::uint32_t>(gen() % 9);
        const bool labels = coin(gen) == 1;
        const bool logits = coin(gen) == 1;
        if (labels || logits) p.num_classes = c;
        if (labels) {
            std::vector<std::int32_t> y(static_cast<std::size_t>(n));
            for (auto& v : y) v = static_cast<std::int32_t>(gen() % c);
            p.labels = y;
        }
        if (logits) {
            FloatMatrix l(n, c);
            for (int i = 0; i < n; ++i) {
                for (std::uint32_t j = 0; j < c; ++j) l(i, j) = normal(gen);
            }
            p.logits = l;
        }
        p.meta["shape"] = std::to_string(n) + "x" + std::to_string(d);
        CAPTURE(n);
        CAPTURE(d);
        const std::string bytes = encode_pack(p);
        CHECK(decode_pack(bytes) == p);
        CHECK(encode_pack(decode_pack(bytes)) == bytes);
    }
}

TEST_CASE("read errors")
{
    const std::string good = encode_pack(small_pack());

    SUBCASE("bad magic")
    {
        std::string b = good;
        b[0] = 'X';
        CHECK(code_of([&] { decode_pack(b); }) == Errc::bad_magic);
    }
    SUBCASE("n=2, D=3 with 20 payload bytes is truncated")
    {
        FeaturePack p;
        p.features = FloatMatrix::Ones(2, 3);
        const std::string b = encode_pack(p).substr(0, 24 + 20);
        CHECK(code_of([&] { decode_pack(b); }) == Errc::truncated);
    }
    SUBCASE("every strict prefix fails")
    {
        for (std::size_t len = 0; len < good.size(); ++len) {
            CAPTURE(len);
            CHECK_THROWS_AS(decode_pack(good.substr(0, len)), Error);
        }
    }
    SUBCASE("future version")
    {
        std::string b = good;
        put_u32(b, 4, 2);
        CHECK(code_of([&] { decode_pack(b); }) == Errc::version_mismatch);
    }
    SUBCASE("NaN payload")
    {
        std::string b = good;
        put_u32(b, 24, 0x7FC00000u);
        CHECK(code_of([&] { decode_pack(b); }) == Errc::non_finite);
    }
    SUBCASE("infinite payload")
    {
        std::string b = good;
        put_u32(b, 28, 0x7F800000u);
        CHECK(code_of([&] { decode_pack(b); }) == Errc::non_finite);
    }
    SUBCASE("D below 2")
    {
        std::string b = good;
        put_u32(b, 12, 1);
        CHECK(code_of([&] { decode_pack(b); }) == Errc::dimension_mismatch);
    }
    SUBCASE("unknown flag bit")
    {
        std::string b = good;
        b[20] = static_cast<char>(b[20] | 0x04);
        CHECK(code_of([&] { decode_pack(b); }) == Errc::corrupt);
    }
    SUBCASE("label out of range")
    {
        std::string b = good;
        put_u32(b, 24 + 12 * 4, 5);
        CHECK_THROWS_AS(decode_pack(b), Error);
    }
}

TEST_CASE("writer rejects invalid packs")
{
    FeaturePack p = small_pack();
    p.features(0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK(code_of([&] { encode_pack(p); }) == Errc::non_finite);

    FeaturePack q = small_pack();
    q.num_classes = 0;
    CHECK_THROWS_AS(encode_pack(q), Error);

    FeaturePack r;
    r.features = FloatMatrix::Ones(2, 2);
    r.num_classes = 3;
    CHECK(code_of([&] { encode_pack(r); }) == Errc::dimension_mismatch);
}

TEST_CASE("CSV import")
{
    SUBCASE("plain features")
    {
        const FeaturePack p = import_csv("1,2\n3,4", false);
        CHECK(p.rows() == 2);
        CHECK(p.dim() == 2);
        CHECK(p.features(1, 0) == 3.0f);
        CHECK_FALSE(p.has_labels());
    }
    SUBCASE("label column")
    {
        const FeaturePack p = import_csv("1,2,0\n3,4,1", true);
        CHECK(p.rows() == 2);
        CHECK(p.dim() == 2);
        REQUIRE(p.labels);
        CHECK(*p.labels == std::vector<std::int32_t>{0, 1});
        CHECK(p.num_classes == 2);
    }
    SUBCASE("ragged rows")
    {
        CHECK(code_of([] { import_csv("1,2\n3", false); }) == Errc::parse);
    }
    SUBCASE("non-numeric cell")
    {
        CHECK(code_of([] { import_csv("1,x\n3,4", false); }) == Errc::parse);
    }
    SUBCASE("label out of range")
    {
        CHECK(code_of([] { import_csv("1,2,0\n3,4,5", true, 3u); }) == Errc::invalid_argument);
        CHECK(code_of([] { import_csv("1,2,-1\n3,4,0", true); }) == Errc::invalid_argument);
    }
}

TEST_CASE("file round-trip")
{
    const auto path = std::filesystem::temp_directory_path() / "dknn_featurepack_roundtrip.fpk";
    const FeaturePack p = small_pack();
    save_pack(p, path);
    CHECK(load_pack(path) == p);
    std::filesystem::remove(path);
    CHECK(code_of([&] { load_pack(path); }) == Errc::io);
}
