#include <catch2/catch_amalgamated.hpp>

#include "resdiff/field.hpp"
#include "resdiff/synth.hpp"

using namespace resdiff;

namespace {
Field make_field(int h, int w, int nchan = 1) {
    std::vector<ChannelSpec> specs;
    for (int c = 0; c < nchan; ++c) specs.push_back({"c" + std::to_string(c), "", ChannelRole::state});
    return Field(specs, h, w);
}
}  // namespace

TEST_CASE("pool_average block means") {
    Field f = make_field(2, 2);
    f.at(0, 0, 0) = 1;
    f.at(0, 0, 1) = 3;
    f.at(0, 1, 0) = 5;
    f.at(0, 1, 1) = 7;
    Field p = pool_average(f, 2);
    REQUIRE(p.height() == 1);
    REQUIRE(p.width() == 1);
    REQUIRE(p.at(0, 0, 0) == 4.0);
}

TEST_CASE("pool_average keeps constants and zeroes checkerboards") {
    Field f = make_field(8, 8);
    for (double& v : f.data()) v = 2.5;
    Field p = pool_average(f, 4);
    for (double v : p.data()) REQUIRE(v == 2.5);

    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) f.at(0, i, j) = ((i + j) % 2 == 0) ? 1.0 : -1.0;
    Field q = pool_average(f, 2);
    for (double v : q.data()) REQUIRE(v == 0.0);
}

TEST_CASE("pool_average rejects non-divisible dimensions") {
    Field f = make_field(6, 6);
    REQUIRE_THROWS_AS(pool_average(f, 4), error);
    try {
        pool_average(f, 4);
    } catch (const error& e) {
        REQUIRE(e.code() == errc::dimension);
    }
}

TEST_CASE("pool_average composes across factors") {
    Rng rng(42);
    Field f = make_field(32, 32, 2);
    for (double& v : f.data()) v = rng.normal();
    Field ab = pool_average(f, 8);
    Field a_then_b = pool_average(pool_average(f, 2), 4);
    for (std::size_t i = 0; i < ab.size(); ++i)
        REQUIRE(ab.data()[i] == Catch::Approx(a_then_b.data()[i]).epsilon(1e-12));
}

TEST_CASE("bilinear interpolation midpoint and node exactness") {
    Field f = make_field(2, 2);
    f.at(0, 0, 0) = 0;
    f.at(0, 0, 1) = 1;
    f.at(0, 1, 0) = 0;
    f.at(0, 1, 1) = 1;
    Field up = interp_bilinear(f, 2, 3);
    REQUIRE(up.at(0, 0, 0) == 0.0);
    REQUIRE(up.at(0, 0, 1) == 0.5);
    REQUIRE(up.at(0, 0, 2) == 1.0);

    Field c = make_field(4, 4);
    for (double& v : c.data()) v = 7.25;
    Field cup = interp_bilinear(c, 9, 13);
    for (double v : cup.data()) REQUIRE(v == 7.25);
}

TEST_CASE("bilinear upsample hits source nodes bit-exactly") {
    Rng rng(7);
    Field f = make_field(9, 9);
    for (double& v : f.data()) v = rng.normal();
    Field up = interp_bilinear(f, 17, 17);  // factor 2 in node spacing
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) REQUIRE(up.at(0, 2 * i, 2 * j) == f.at(0, i, j));
}

TEST_CASE("bilinear rejects tiny targets") {
    Field f = make_field(4, 4);
    REQUIRE_THROWS_AS(interp_bilinear(f, 1, 4), error);
}

TEST_CASE("field_stats moments") {
    Field f = make_field(4, 4);
    for (double& v : f.data()) v = 3.0;
    ChannelStats s = field_stats(f);
    REQUIRE(s.mean[0] == 3.0);
    REQUIRE(s.variance[0] == 0.0);
    REQUIRE(s.min[0] == 3.0);
    REQUIRE(s.max[0] == 3.0);

    Field g = make_field(1, 2);
    g.at(0, 0, 0) = 0;
    g.at(0, 0, 1) = 2;
    ChannelStats t = field_stats(g);
    REQUIRE(t.mean[0] == 1.0);
    REQUIRE(t.variance[0] == 1.0);  // population convention
}

TEST_CASE("grf realized variance matches the target over a seed ensemble") {
    double acc = 0.0;
    const int seeds = 100;
    for (int s = 0; s < seeds; ++s) {
        Field g = grf_sample(128, 128, 3.0, 1.0, 1000 + s);
        acc += field_stats(g).variance[0];
    }
    REQUIRE(acc / seeds == Catch::Approx(1.0).margin(0.05));
}

TEST_CASE("pooling preserves the spatial mean exactly") {
    Rng rng(3);
    Field f = make_field(64, 64);
    for (double& v : f.data()) v = rng.normal() + 0.7;
    double m0 = field_stats(f).mean[0];
    double m1 = field_stats(pool_average(f, 8)).mean[0];
    REQUIRE(m1 == Catch::Approx(m0).epsilon(1e-12));

    Field down_up = interp_bilinear(pool_average(f, 8), 64, 64);
    Field c = make_field(64, 64);
    for (double& v : c.data()) v = 1.25;
    Field cdu = interp_bilinear(pool_average(c, 8), 64, 64);
    double drift = std::abs(field_stats(cdu).mean[0] - 1.25) / 1.25;
    REQUIRE(drift < 1e-10);
}

TEST_CASE("interpolation preserves means of linear ramps") {
    Field f = make_field(8, 8);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) f.at(0, i, j) = 2.0 * i - 0.5 * j + 3.0;
    Field up = interp_bilinear(f, 15, 15);
    REQUIRE(field_stats(up).mean[0] == Catch::Approx(field_stats(f).mean[0]).epsilon(1e-10));
}

TEST_CASE("interpolation mean drift stays small on smooth offset fields") {
    Field g = grf_sample(16, 16, 3.0, 1.0, 99);
    for (double& v : g.data()) v += 10.0;
    double m0 = field_stats(g).mean[0];
    double m1 = field_stats(interp_bilinear(g, 128, 128)).mean[0];
    REQUIRE(std::abs(m1 - m0) / std::abs(m0) < 1e-2);
}

TEST_CASE("finite check rejects NaN") {
    Field f = make_field(2, 2);
    f.at(0, 1, 1) = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(f.require_finite(), error);
}

TEST_CASE("gaussian blur preserves constants and the mean") {
    Field f = make_field(32, 32);
    for (double& v : f.data()) v = -1.5;
    Field b = gaussian_blur(f, 2.0);
    for (double v : b.data()) REQUIRE(v == Catch::Approx(-1.5).epsilon(1e-12));

    Rng rng(5);
    for (double& v : f.data()) v = rng.normal();
    double m0 = field_stats(f).mean[0];
    Field b2 = gaussian_blur(f, 1.5, true);  // periodic wrap preserves the mean
    REQUIRE(field_stats(b2).mean[0] == Catch::Approx(m0).margin(1e-12));
}
