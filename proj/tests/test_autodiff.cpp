#include <catch2/catch_amalgamated.hpp>

#include "resdiff/tensor.hpp"

using namespace resdiff;

using DGraph = GraphT<double>;
using DTensor = TensorT<double>;

namespace {

void fill_normal(DTensor* t, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    for (double& v : t->values) v = scale * rng.normal();
}

}  // namespace

TEST_CASE("one-by-one identity kernel is the identity") {
    DGraph g;
    DTensor* x = g.input({1, 2, 3, 3});
    DTensor* w = g.param({2, 2, 1, 1});
    DTensor* b = g.param({2});
    w->values = {1, 0, 0, 1};  // identity mixing
    fill_normal(x, 3);
    DTensor* y = g.conv2d(x, w, b, 1, 0);
    g.forward();
    REQUIRE(y->shape == std::vector<int>{1, 2, 3, 3});
    for (std::size_t i = 0; i < x->values.size(); ++i) REQUIRE(y->values[i] == x->values[i]);
}

TEST_CASE("all-ones 3x3 kernel sums the neighbourhood") {
    DGraph g;
    DTensor* x = g.input({1, 1, 4, 4});
    DTensor* w = g.param({1, 1, 3, 3});
    std::fill(x->values.begin(), x->values.end(), 2.0);
    std::fill(w->values.begin(), w->values.end(), 1.0);
    DTensor* y = g.conv2d(x, w, nullptr);
    g.forward();
    REQUIRE(y->values[std::size_t(1 * 4 + 1)] == 18.0);  // interior: 9 * 2
    REQUIRE(y->values[0] == 8.0);                        // corner: 4 * 2 (zero pad)
}

TEST_CASE("strided convolution output geometry") {
    DGraph g;
    DTensor* x = g.input({1, 2, 6, 6});
    DTensor* w = g.param({3, 2, 3, 3});
    DTensor* y = g.conv2d(x, w, nullptr, 2, 1);
    REQUIRE(y->shape == std::vector<int>{1, 3, 3, 3});
    DGraph g2;
    DTensor* bad = g2.input({1, 2, 6, 6});
    DTensor* wb = g2.param({3, 3, 3, 3});
    REQUIRE_THROWS_AS(g2.conv2d(bad, wb, nullptr), error);
}

TEST_CASE("conv2d gradients match finite differences") {
    DGraph g;
    DTensor* x = g.param({2, 3, 5, 6});
    DTensor* w = g.param({4, 3, 3, 3});
    DTensor* b = g.param({4});
    DTensor* t = g.input({2, 4, 5, 6});
    fill_normal(x, 1);
    fill_normal(w, 2, 0.3);
    fill_normal(b, 3, 0.1);
    fill_normal(t, 4);
    DTensor* loss = g.mse(g.conv2d(x, w, b), t);
    REQUIRE(grad_check(g, loss, {x, w, b}, 20) < 1e-6);
}

TEST_CASE("strided and pointwise conv gradients match finite differences") {
    DGraph g;
    DTensor* x = g.param({1, 2, 6, 6});
    DTensor* w = g.param({3, 2, 3, 3});
    DTensor* t = g.input({1, 3, 3, 3});
    fill_normal(x, 5);
    fill_normal(w, 6, 0.4);
    fill_normal(t, 7);
    DTensor* loss = g.mse(g.conv2d(x, w, nullptr, 2, 1), t);
    REQUIRE(grad_check(g, loss, {x, w}, 16) < 1e-6);

    DGraph g2;
    DTensor* x2 = g2.param({2, 3, 4, 4});
    DTensor* w2 = g2.param({2, 3, 1, 1});
    DTensor* b2 = g2.param({2});
    DTensor* t2 = g2.input({2, 2, 4, 4});
    fill_normal(x2, 8);
    fill_normal(w2, 9, 0.5);
    fill_normal(b2, 10, 0.1);
    fill_normal(t2, 11);
    DTensor* loss2 = g2.mse(g2.conv2d(x2, w2, b2, 1, 0), t2);
    REQUIRE(grad_check(g2, loss2, {x2, w2, b2}, 16) < 1e-6);
}

TEST_CASE("grouped conv gradients match finite differences") {
    DGraph g;
    DTensor* x = g.param({2, 4, 5, 5});
    DTensor* w = g.param({6, 2, 3, 3});  // two groups of 2 -> 3 channels
    DTensor* b = g.param({6});
    DTensor* t = g.input({2, 6, 5, 5});
    fill_normal(x, 31);
    fill_normal(w, 32, 0.3);
    fill_normal(b, 33, 0.1);
    fill_normal(t, 34);
    DTensor* loss = g.mse(g.conv2d(x, w, b, 1, 1, 2), t);
    REQUIRE(grad_check(g, loss, {x, w, b}, 16) < 1e-6);
}

TEST_CASE("depthwise conv gradients match finite differences") {
    DGraph g;
    DTensor* x = g.param({2, 3, 6, 7});
    DTensor* w = g.param({3, 1, 3, 3});
    DTensor* b = g.param({3});
    DTensor* t = g.input({2, 3, 6, 7});
    fill_normal(x, 41);
    fill_normal(w, 42, 0.4);
    fill_normal(b, 43, 0.1);
    fill_normal(t, 44);
    DTensor* loss = g.mse(g.conv2d(x, w, b, 1, 1, 3), t);
    REQUIRE(grad_check(g, loss, {x, w, b}, 18) < 1e-6);
}

TEST_CASE("depthwise conv equals a full conv with a block-diagonal kernel") {
    DGraph g;
    DTensor* x = g.input({1, 3, 8, 8});
    DTensor* wd = g.input({3, 1, 3, 3});
    DTensor* wf = g.input({3, 3, 3, 3});
    fill_normal(x, 51);
    fill_normal(wd, 52, 0.5);
    std::fill(wf->values.begin(), wf->values.end(), 0.0);
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 9; ++k)
            wf->values[std::size_t((c * 3 + c) * 9 + k)] = wd->values[std::size_t(c * 9 + k)];
    DTensor* yd = g.conv2d(x, wd, nullptr, 1, 1, 3);
    DTensor* yf = g.conv2d(x, wf, nullptr, 1, 1);
    g.forward();
    for (std::size_t i = 0; i < yd->values.size(); ++i)
        REQUIRE(yd->values[i] == Catch::Approx(yf->values[i]).epsilon(1e-13).margin(1e-13));
}

TEST_CASE("pointwise conv equals the per-pixel linear map") {
    DGraph g;
    DTensor* x = g.input({2, 3, 4, 5});
    DTensor* w = g.input({2, 3, 1, 1});
    DTensor* b = g.input({2});
    fill_normal(x, 61);
    fill_normal(w, 62, 0.5);
    fill_normal(b, 63, 0.1);
    DTensor* y = g.conv2d(x, w, b);  // default padding for a 1x1 kernel is zero
    g.forward();
    for (int s = 0; s < 2; ++s)
        for (int o = 0; o < 2; ++o)
            for (int p = 0; p < 20; ++p) {
                double want = b->values[std::size_t(o)];
                for (int c = 0; c < 3; ++c)
                    want += w->values[std::size_t(o * 3 + c)] *
                            x->values[std::size_t((s * 3 + c) * 20 + p)];
                REQUIRE(y->values[std::size_t((s * 2 + o) * 20 + p)] ==
                        Catch::Approx(want).epsilon(1e-13).margin(1e-14));
            }
    SECTION("group counts must divide the channel counts") {
        DGraph g2;
        DTensor* x2 = g2.input({1, 4, 3, 3});
        DTensor* w2 = g2.input({4, 2, 3, 3});
        REQUIRE_THROWS_AS(g2.conv2d(x2, w2, nullptr, 1, 1, 3), error);
    }
}

TEST_CASE("linear gradients match finite differences") {
    DGraph g;
    DTensor* x = g.param({3, 7});
    DTensor* w = g.param({5, 7});
    DTensor* b = g.param({5});
    DTensor* t = g.input({3, 5});
    fill_normal(x, 21);
    fill_normal(w, 22, 0.4);
    fill_normal(b, 23, 0.1);
    fill_normal(t, 24);
    DTensor* loss = g.mse(g.linear(x, w, b), t);
    REQUIRE(grad_check(g, loss, {x, w, b}, 20) < 1e-6);
}

TEST_CASE("elementwise and shape operator gradients match finite differences") {
    DGraph g;
    DTensor* x = g.param({2, 2, 4, 4});
    DTensor* y = g.param({2, 2, 4, 4});
    DTensor* e = g.param({2, 2});
    DTensor* s = g.param({2});
    DTensor* t = g.input({2, 6, 4, 4});
    fill_normal(x, 31);
    fill_normal(y, 32);
    fill_normal(e, 33, 0.5);
    fill_normal(s, 34, 0.5);
    fill_normal(t, 35);
    for (double& v : s->values) v += 1.5;  // keep scales away from zero

    DTensor* a = g.silu(g.add(x, y));
    DTensor* sc = g.scale_rows(g.add_rowbias(a, e), s);
    DTensor* up = g.upsample2(g.avg_pool2(sc));  // same geometry back
    DTensor* merged = g.concat(up, g.silu(x));
    DTensor* loss = g.mse(g.concat(merged, g.silu(y)), t);
    REQUIRE(grad_check(g, loss, {x, y, e, s}, 16) < 1e-6);
}

TEST_CASE("weighted mse gradients match finite differences") {
    DGraph g;
    DTensor* x = g.param({3, 2, 4, 4});
    DTensor* t = g.input({3, 2, 4, 4});
    DTensor* w = g.param({3});
    fill_normal(x, 41);
    fill_normal(t, 42);
    w->values = {0.5, 2.0, 1.25};
    DTensor* loss = g.weighted_mse(x, t, w);
    REQUIRE(grad_check(g, loss, {x, w}, 20) < 1e-6);
}

TEST_CASE("loss against itself is zero with zero gradients") {
    DGraph g;
    DTensor* x = g.param({2, 6});
    fill_normal(x, 51);
    DTensor* loss = g.mse(x, x);
    g.forward();
    g.backward(loss);
    REQUIRE(loss->values[0] == 0.0);
    for (double gv : x->grad) REQUIRE(gv == 0.0);
}

TEST_CASE("stacked linear maps reproduce the analytic gradient") {
    const int n = 4, m = 3, k = 2;
    DGraph g;
    DTensor* x = g.input({1, n});
    DTensor* w1 = g.param({m, n});
    DTensor* w2 = g.param({k, m});
    DTensor* t = g.input({1, k});
    fill_normal(x, 61);
    fill_normal(w1, 62);
    fill_normal(w2, 63);
    DTensor* h = g.linear(x, w1, nullptr);
    DTensor* y = g.linear(h, w2, nullptr);
    DTensor* loss = g.mse(y, t);
    g.forward();
    g.backward(loss);

    // dL/dy = (2/k) y; dW2 = dy^T h; dW1 = (dy W2)^T x
    std::vector<double> dy(k);
    for (int i = 0; i < k; ++i) dy[std::size_t(i)] = 2.0 / k * y->values[std::size_t(i)];
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < m; ++j)
            REQUIRE(w2->grad[std::size_t(i * m + j)] ==
                    Catch::Approx(dy[std::size_t(i)] * h->values[std::size_t(j)]).margin(1e-12));
    for (int j = 0; j < m; ++j) {
        double dh = 0;
        for (int i = 0; i < k; ++i) dh += dy[std::size_t(i)] * w2->values[std::size_t(i * m + j)];
        for (int q = 0; q < n; ++q)
            REQUIRE(w1->grad[std::size_t(j * n + q)] ==
                    Catch::Approx(dh * x->values[std::size_t(q)]).margin(1e-12));
    }
}

TEST_CASE("detached leaves receive no gradient") {
    DGraph g;
    DTensor* x = g.input({2, 3});  // detached
    DTensor* w = g.param({4, 3});
    fill_normal(x, 71);
    fill_normal(w, 72);
    DTensor* t = g.input({2, 4});
    DTensor* loss = g.mse(g.linear(x, w, nullptr), t);
    g.forward();
    g.backward(loss);
    REQUIRE(x->grad.empty());
    bool any = false;
    for (double gv : w->grad) any = any || gv != 0.0;
    REQUIRE(any);
}

TEST_CASE("backward rejects non-scalar losses") {
    DGraph g;
    DTensor* x = g.param({2, 2});
    DTensor* y = g.silu(x);
    g.forward();
    REQUIRE_THROWS_AS(g.backward(y), error);
}

TEST_CASE("a corrupted backward rule is caught by the finite-difference check") {
    DGraph g;
    DTensor* x = g.param({2, 3});
    fill_normal(x, 81);
    DTensor* t = g.input({2, 3});
    fill_normal(t, 82);
    DTensor* bad = g.custom({2, 3}, {x},
        [=](DTensor* z) {
            for (std::size_t i = 0; i < z->values.size(); ++i) z->values[i] = 2.0 * x->values[i];
        },
        [=](DTensor* z) {
            for (std::size_t i = 0; i < z->values.size(); ++i) x->grad[i] += 3.0 * z->grad[i];
        });
    DTensor* loss = g.mse(bad, t);
    REQUIRE(grad_check(g, loss, {x}, 12) > 1e-2);
}

TEST_CASE("dropout masks forward and backward consistently") {
    DGraph g(99);
    DTensor* x = g.param({1, 1, 8, 8});
    fill_normal(x, 91);
    DTensor* z = g.dropout(x, 0.4);
    DTensor* t = g.input({1, 1, 8, 8});
    DTensor* loss = g.mse(z, t);
    g.set_training(true);
    g.forward();
    g.backward(loss);
    int zeros = 0;
    const double keep = 1.0 / 0.6;
    for (std::size_t i = 0; i < x->values.size(); ++i) {
        if (z->values[i] == 0.0) {
            ++zeros;
            REQUIRE(x->grad[i] == 0.0);
        } else {
            REQUIRE(z->values[i] == Catch::Approx(x->values[i] * keep).epsilon(1e-12));
        }
    }
    REQUIRE(zeros > 5);
    REQUIRE(zeros < 59);

    g.set_training(false);
    g.forward();
    for (std::size_t i = 0; i < x->values.size(); ++i) REQUIRE(z->values[i] == x->values[i]);
}

TEST_CASE("adam first step has the closed-form magnitude") {
    GraphT<double> g;
    DTensor* p = g.param({1});
    p->values[0] = 1.0;
    p->grad.assign(1, 1.0);
    AdamState<double> st;
    TrainConfig cfg;
    adam_step(g.params(), st, cfg);
    REQUIRE(p->values[0] == Catch::Approx(1.0 - 2e-4).epsilon(1e-6));
    REQUIRE(st.step == 1);
}

TEST_CASE("adam with zero gradient leaves fresh params unchanged") {
    GraphT<double> g;
    DTensor* p = g.param({3});
    p->values = {1.0, -2.0, 0.5};
    p->grad.assign(3, 0.0);
    AdamState<double> st;
    TrainConfig cfg;
    adam_step(g.params(), st, cfg);
    REQUIRE(p->values == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam trajectories are deterministic and sign-symmetric") {
    auto run = [](double flip) {
        GraphT<double> g;
        DTensor* p = g.param({4});  // zero start keeps the mirrored sums exact
        AdamState<double> st;
        TrainConfig cfg;
        Rng rng(7);
        for (int step = 0; step < 5; ++step) {
            for (double& gv : p->grad) gv = flip * rng.normal();
            adam_step(g.params(), st, cfg);
        }
        return p->values;
    };
    std::vector<double> a = run(1.0), a2 = run(1.0), b = run(-1.0);
    REQUIRE(a == a2);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == -b[i]);
}

TEST_CASE("ema update blends as specified") {
    GraphT<double> g;
    DTensor* p = g.param({2});
    p->values = {2.0, -4.0};
    std::vector<std::vector<double>> ema = {{0.0, 0.0}};
    ema_update(ema, g.params(), 0.5);
    REQUIRE(ema[0][0] == 1.0);
    REQUIRE(ema[0][1] == -2.0);
    ema_update(ema, g.params(), 1.0);
    REQUIRE(ema[0][0] == 1.0);
    ema_update(ema, g.params(), 0.0);
    REQUIRE(ema[0] == p->values);

    REQUIRE(ema_decay_from_half_life(8.0, 8) == Catch::Approx(0.5).epsilon(1e-12));
    REQUIRE(ema_decay_from_half_life(80.0, 8) == Catch::Approx(std::pow(0.5, 0.1)).epsilon(1e-12));
}

TEST_CASE("shape violations raise dimension errors") {
    DGraph g;
    DTensor* x = g.param({1, 2, 3, 3});
    DTensor* y = g.param({1, 2, 3, 4});
    REQUIRE_THROWS_AS(g.add(x, y), error);
    DTensor* odd = g.param({1, 1, 3, 3});
    REQUIRE_THROWS_AS(g.avg_pool2(odd), error);
    try {
        g.add(x, y);
    } catch (const error& e) {
        REQUIRE(e.code() == errc::dimension);
    }
}

TEST_CASE("train config validation") {
    TrainConfig bad;
    bad.beta1 = 1.5;
    REQUIRE_THROWS_AS(bad.validate(), error);
    TrainConfig ok;
    ok.validate();
}
