#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>

#include "resdiff/container.hpp"

using namespace resdiff;

namespace {

std::string tmp_path(const char* stem) {
    return std::string("container_") + stem + ".rsdf";
}

std::string header_with(const std::string& arrays_json) {
    return std::string(R"({"arrays":)") + arrays_json + R"(,"dtype":"f32le"})";
}

std::string raw_container(const std::string& header, const std::string& payload,
                          const char* magic = "RSDF", std::uint16_t version = 1) {
    std::string s(magic, 4);
    s.push_back(char(version & 0xff));
    s.push_back(char(version >> 8));
    std::uint32_t hl = std::uint32_t(header.size());
    for (int i = 0; i < 4; ++i) s.push_back(char((hl >> (8 * i)) & 0xff));
    s += header;
    s += payload;
    return s;
}

std::string float_bytes(std::initializer_list<float> vs) {
    std::string s(vs.size() * 4, '\0');
    std::size_t i = 0;
    for (float v : vs) {
        std::memcpy(s.data() + i * 4, &v, 4);
        ++i;
    }
    return s;
}

}  // namespace

TEST_CASE("containers round-trip bit-exactly") {
    Container c;
    c.meta["kind"] = "scene";
    c.meta["seed"] = 12345;
    Rng rng(8);
    for (int k = 0; k < 3; ++k) {
        NamedArray a;
        a.name = "arr" + std::to_string(k);
        a.shape = {2, 3, 4 + k};
        a.values.resize(std::size_t(a.count()));
        for (float& v : a.values) v = float(rng.normal());
        c.arrays.push_back(std::move(a));
    }

    const std::string bytes = encode_container(c);
    Container back = decode_container(bytes);
    REQUIRE(back.arrays.size() == 3);
    for (int k = 0; k < 3; ++k) {
        CHECK(back.arrays[k].name == c.arrays[k].name);
        CHECK(back.arrays[k].shape == c.arrays[k].shape);
        REQUIRE(back.arrays[k].values.size() == c.arrays[k].values.size());
        CHECK(std::memcmp(back.arrays[k].values.data(), c.arrays[k].values.data(),
                          c.arrays[k].values.size() * 4) == 0);
    }
    CHECK(back.meta == c.meta);
    CHECK(encode_container(back) == bytes);

    const std::string path = tmp_path("roundtrip");
    write_container(path, c);
    Container file = read_container(path);
    CHECK(encode_container(file) == bytes);
    std::remove(path.c_str());
}

TEST_CASE("byte layout matches the documented format") {
    Container c;
    c.meta["kind"] = "test";
    c.arrays.push_back({"a", {2}, {1.5f, -2.25f}});

    const std::string header =
        R"({"arrays":[{"name":"a","offset":0,"shape":[2]}],"dtype":"f32le","kind":"test"})";
    const std::string expect = raw_container(header, float_bytes({1.5f, -2.25f}));
    CHECK(encode_container(c) == expect);

    // and the reader accepts hand-assembled bytes
    Container back = decode_container(expect);
    REQUIRE(back.arrays.size() == 1);
    CHECK(back.arrays[0].values == std::vector<float>{1.5f, -2.25f});
    CHECK(back.meta["kind"] == "test");
}

TEST_CASE("fields round-trip with channel specs") {
    Field f({{"u", "m/s", ChannelRole::state, 0.4, 2.0},
             {"Z", "dBZ", ChannelRole::synthesized, 1.0, 3.0}},
            5, 6, 2.5);
    Rng rng(4);
    for (double& v : f.data()) v = double(float(rng.normal()));  // float-valued doubles

    Container c;
    append_field(c, "fine", f);
    Container back = decode_container(encode_container(c));
    Field g = extract_field(back, "fine");
    CHECK(g.nchan() == 2);
    CHECK(g.height() == 5);
    CHECK(g.width() == 6);
    CHECK(g.spacing() == 2.5);
    CHECK(g.channels()[1].name == "Z");
    CHECK(g.channels()[1].units == "dBZ");
    CHECK(g.channels()[1].role == ChannelRole::synthesized);
    CHECK(g.channels()[0].norm_mean == 0.4);
    CHECK(g.channels()[1].norm_std == 3.0);
    CHECK(g.data() == f.data());

    CHECK_THROWS_AS(extract_field(back, "coarse"), error);
}

TEST_CASE("an empty directory is a valid zero-payload container") {
    Container c;
    c.meta["note"] = "empty";
    Container back = decode_container(encode_container(c));
    CHECK(back.arrays.empty());
    CHECK(back.meta["note"] == "empty");
}

TEST_CASE("format violations carry offset diagnostics") {
    const std::string header = header_with(R"([{"name":"a","offset":0,"shape":[2]}])");
    const std::string good = raw_container(header, float_bytes({1.0f, 2.0f}));
    CHECK_NOTHROW(decode_container(good));

    SECTION("bad magic") {
        std::string bad = good;
        bad[3] = 'X';
        CHECK_THROWS_WITH(decode_container(bad), Catch::Matchers::ContainsSubstring("offset 0"));
    }
    SECTION("unsupported version") {
        CHECK_THROWS_WITH(decode_container(raw_container(header, float_bytes({1.0f, 2.0f}),
                                                         "RSDF", 9)),
                          Catch::Matchers::ContainsSubstring("version 9"));
    }
    SECTION("truncated preamble") {
        CHECK_THROWS_AS(decode_container("RSDF"), error);
    }
    SECTION("truncated payload") {
        std::string bad = good.substr(0, good.size() - 4);
        CHECK_THROWS_WITH(decode_container(bad), Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("overlapping offsets") {
        const std::string h2 = header_with(
            R"([{"name":"a","offset":0,"shape":[2]},{"name":"b","offset":4,"shape":[1]}])");
        std::string bad = raw_container(h2, float_bytes({1.0f, 2.0f}));
        CHECK_THROWS_WITH(decode_container(bad), Catch::Matchers::ContainsSubstring("overlaps"));
    }
    SECTION("gap between arrays") {
        const std::string h2 = header_with(
            R"([{"name":"a","offset":0,"shape":[1]},{"name":"b","offset":8,"shape":[1]}])");
        std::string bad = raw_container(h2, float_bytes({1.0f, 2.0f, 3.0f}));
        CHECK_THROWS_WITH(decode_container(bad), Catch::Matchers::ContainsSubstring("gap"));
    }
    SECTION("payload not fully tiled") {
        std::string bad = raw_container(header, float_bytes({1.0f, 2.0f, 3.0f}));
        CHECK_THROWS_WITH(decode_container(bad),
                          Catch::Matchers::ContainsSubstring("not tiled exactly"));
    }
    SECTION("header is not JSON") {
        std::string bad = raw_container("{oops", "");
        CHECK_THROWS_WITH(decode_container(bad),
                          Catch::Matchers::ContainsSubstring("not valid JSON"));
    }
    SECTION("missing dtype tag") {
        std::string bad = raw_container(R"({"arrays":[]})", "");
        CHECK_THROWS_WITH(decode_container(bad), Catch::Matchers::ContainsSubstring("dtype"));
    }
}

TEST_CASE("writes reject malformed arrays") {
    Container c;
    c.arrays.push_back({"a", {2}, {1.0f, std::numeric_limits<float>::quiet_NaN()}});
    CHECK_THROWS_AS(encode_container(c), error);
    c.arrays[0] = {"a", {3}, {1.0f, 2.0f}};
    CHECK_THROWS_AS(encode_container(c), error);
    c.arrays[0] = {"", {1}, {1.0f}};
    CHECK_THROWS_AS(encode_container(c), error);

    CHECK_THROWS_AS(read_container("/nonexistent/dir/x.rsdf"), error);
}
