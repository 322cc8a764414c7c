#pragma once

#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "resdiff/core.hpp"
#include "resdiff/field.hpp"
#include "resdiff/tensor.hpp"

namespace resdiff {

enum class DenoiserMode { regression, diffusion };

/// Encoder-decoder layout. Level widths are base_width * multipliers[l]; level l
/// runs at input resolution / 2^l, so spatial sizes must divide 2^(depth-1).
struct NetSpec {
    int depth = 4;
    int base_width = 32;
    std::vector<int> multipliers = {1, 2, 2, 2};
    int c_out = 0;
    int c_cond = 0;
    int embedding_channels = 4;
    int noise_width = 64;
    int fuse_width = 16;  // narrow full-resolution stage before the head

    int width(int level) const { return base_width * multipliers[std::size_t(level)]; }

    int in_channels(DenoiserMode mode) const {
        return (mode == DenoiserMode::diffusion ? c_out : 0) + c_cond + embedding_channels;
    }

    void validate() const {
        RSD_REQUIRE(depth >= 2 && depth <= 8, parameter, "net depth out of range");
        RSD_REQUIRE(int(multipliers.size()) == depth, parameter,
                    "need one channel multiplier per level");
        for (int m : multipliers) RSD_REQUIRE(m >= 1, parameter, "channel multipliers must be >= 1");
        RSD_REQUIRE(base_width >= 1, parameter, "base width must be positive");
        RSD_REQUIRE(c_out >= 1, parameter, "need at least one target channel");
        RSD_REQUIRE(c_cond >= 0, parameter, "negative conditioning channel count");
        RSD_REQUIRE(embedding_channels == 4, parameter,
                    "positional embedding is four sin/cos channels");
        RSD_REQUIRE(noise_width >= 1, parameter, "noise embedding width must be positive");
        RSD_REQUIRE(fuse_width >= 1, parameter, "fuse width must be positive");
    }
};

/// Four static channels: sin/cos of the column angle 2*pi*j/w, then sin/cos of
/// the row angle 2*pi*i/h. One period across the domain in each direction.
inline Field positional_embedding(int h, int w) {
    Field f({{"pos_sin_x", "", ChannelRole::conditioning},
             {"pos_cos_x", "", ChannelRole::conditioning},
             {"pos_sin_y", "", ChannelRole::conditioning},
             {"pos_cos_y", "", ChannelRole::conditioning}},
            h, w);
    const double two_pi = 8.0 * std::atan(1.0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double ax = two_pi * j / w, ay = two_pi * i / h;
            f.at(0, i, j) = std::sin(ax);
            f.at(1, i, j) = std::cos(ax);
            f.at(2, i, j) = std::sin(ay);
            f.at(3, i, j) = std::cos(ay);
        }
    return f;
}

/// Noise-dependent skip weighting: D(z; sigma) = c_skip*z + c_out*F(c_in*z, c_noise).
struct EdmCoeffs {
    double c_skip, c_out, c_in, c_noise;
};

inline EdmCoeffs edm_coeffs(double sigma, double sigma_data = 1.0) {
    RSD_REQUIRE(sigma > 0.0, parameter, "noise level must be positive");
    RSD_REQUIRE(sigma_data > 0.0, parameter, "sigma_data must be positive");
    const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
    EdmCoeffs c;
    c.c_skip = d2 / (s2 + d2);
    c.c_out = sigma * sigma_data / std::sqrt(s2 + d2);
    c.c_in = 1.0 / std::sqrt(s2 + d2);
    c.c_noise = std::log(sigma) / 4.0;
    return c;
}

template <typename T>
struct WiredNetT {
    TensorT<T>* out = nullptr;
    std::vector<TensorT<T>*> params;
};

/// Network weights plus the recipe for wiring them into a computation graph.
/// The same instance serves many graphs (training batches, inference runs);
/// parameter order is fixed at build time and is the serialization order.
template <typename T>
struct DenoiserT {
    NetSpec spec;
    DenoiserMode mode = DenoiserMode::regression;
    std::vector<double> sigma_data;         // per target channel, 1.0 after normalization
    std::vector<std::string> param_names;
    std::vector<std::vector<T>> params;
    std::vector<std::vector<T>> ema;        // same layout; empty until training fills it

    long long param_count() const {
        long long n = 0;
        for (const auto& p : params) n += (long long)p.size();
        return n;
    }

    /// Appends the raw network F to g, reading xin [B, in_ch, H, W] and, in
    /// diffusion mode, cn [B, 1] (the c_noise scalars). Stored weights are
    /// copied into the created nodes; pass use_ema to wire averaged weights.
    WiredNetT<T> wire(GraphT<T>& g, TensorT<T>* xin, TensorT<T>* cn, bool trainable,
                      double dropout_rate = 0.0, bool use_ema = false) const {
        spec.validate();
        const bool diff = mode == DenoiserMode::diffusion;
        RSD_REQUIRE(xin->ndim() == 4 && xin->dim(1) == spec.in_channels(mode), dimension,
                    "network input channel count mismatch");
        RSD_REQUIRE(!diff || (cn && cn->ndim() == 2 && cn->dim(0) == xin->dim(0) &&
                              cn->dim(1) == 1),
                    dimension, "diffusion mode needs per-sample c_noise input");
        const int H = xin->dim(2), W = xin->dim(3), d = spec.depth;
        const int div = 1 << (d - 1);
        RSD_REQUIRE(H % div == 0 && W % div == 0, contract,
                    "spatial size must divide 2^(depth-1)");
        WiredNetT<T> net;
        std::size_t cursor = 0;
        auto take = [&](std::vector<int> shape) {
            RSD_REQUIRE(cursor < params.size(), state, "parameter store exhausted");
            const std::vector<T>& src =
                use_ema && !ema.empty() ? ema[cursor] : params[cursor];
            TensorT<T>* t = trainable ? g.param(std::move(shape)) : g.input(std::move(shape));
            RSD_REQUIRE((long long)src.size() == t->size(), state,
                        "stored parameter shape mismatch for " + param_names[cursor]);
            t->values = src;
            net.params.push_back(t);
            ++cursor;
            return t;
        };
        auto pw = [&](TensorT<T>* x, int o) {
            TensorT<T>* w = take({o, x->dim(1), 1, 1});
            TensorT<T>* b = take({o});
            return g.conv2d(x, w, b);
        };
        auto c3 = [&](TensorT<T>* x, int o) {
            TensorT<T>* w = take({o, x->dim(1), 3, 3});
            TensorT<T>* b = take({o});
            return g.conv2d(x, w, b);
        };

        std::vector<TensorT<T>*> skips;
        TensorT<T>* x = g.silu(c3(xin, spec.width(0)));
        skips.push_back(x);
        TensorT<T>* e0 = nullptr;
        if (diff) {
            TensorT<T>* wt = take({spec.noise_width, 1});
            TensorT<T>* bt = take({spec.noise_width});
            e0 = g.silu(g.linear(cn, wt, bt));
        }
        auto inject = [&](TensorT<T>* x) {
            if (!diff) return x;
            TensorT<T>* wl = take({x->dim(1), spec.noise_width});
            TensorT<T>* bl = take({x->dim(1)});
            return g.add_rowbias(x, g.linear(e0, wl, bl));
        };
        for (int l = 1; l < d; ++l) {
            x = g.avg_pool2(x);
            x = c3(x, x->dim(1));
            if (spec.width(l) != x->dim(1)) x = pw(x, spec.width(l));
            x = g.silu(inject(x));
            x = g.dropout(x, dropout_rate);
            if (l < d - 1) skips.push_back(x);
        }
        for (int l = d - 2; l >= 1; --l) {
            x = g.concat(g.upsample2(x), skips[std::size_t(l)]);
            const int v = l == d - 2 ? spec.width(l) : spec.width(l - 1);
            x = pw(x, v);
            x = c3(x, v);
            x = g.silu(inject(x));
            x = g.dropout(x, dropout_rate);
        }
        x = g.concat(g.upsample2(x), skips[0]);
        x = pw(x, spec.fuse_width);
        x = g.silu(c3(x, spec.fuse_width));
        net.out = pw(x, spec.c_out);
        RSD_REQUIRE(cursor == params.size(), state, "parameter store not fully consumed");
        return net;
    }

    /// Copies trained node values back into the store.
    void absorb(const std::vector<TensorT<T>*>& nodes) {
        RSD_REQUIRE(nodes.size() == params.size(), state, "parameter node count mismatch");
        for (std::size_t i = 0; i < nodes.size(); ++i) params[i] = nodes[i]->values;
    }
    void absorb_ema(const std::vector<std::vector<T>>& shadow) {
        RSD_REQUIRE(shadow.size() == params.size(), state, "EMA bank count mismatch");
        ema = shadow;
    }
};

namespace detail {

template <typename T>
void register_param(DenoiserT<T>& den, Rng& rng, const std::string& name,
                    std::vector<int> shape, bool he) {
    long long n = 1;
    for (int s : shape) n *= s;
    long long fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[std::size_t(i)];
    std::vector<T> v(std::size_t(n), T(0));
    if (he) {
        const double std = std::sqrt(2.0 / double(fan_in));
        for (auto& x : v) x = T(std * rng.normal());
    }
    den.param_names.push_back(name);
    den.params.push_back(std::move(v));
}

}  // namespace detail

/// He fan-in initialized weights in the fixed wiring order. The layout mirrors
/// wire(): stem, noise trunk, encoder blocks, decoder blocks, fusion, head.
template <typename T = float>
DenoiserT<T> build_denoiser(const NetSpec& spec, DenoiserMode mode, std::uint64_t seed) {
    spec.validate();
    DenoiserT<T> den;
    den.spec = spec;
    den.mode = mode;
    den.sigma_data.assign(std::size_t(spec.c_out), 1.0);
    Rng rng(derive_seed(seed, 41));
    const bool diff = mode == DenoiserMode::diffusion;
    const int d = spec.depth;

    auto conv = [&](const std::string& name, int o, int in, int k) {
        detail::register_param(den, rng, name + ".w", {o, in, k, k}, true);
        detail::register_param(den, rng, name + ".b", {o}, false);
    };
    auto lin = [&](const std::string& name, int o, int in) {
        detail::register_param(den, rng, name + ".w", {o, in}, true);
        detail::register_param(den, rng, name + ".b", {o}, false);
    };

    conv("stem", spec.width(0), spec.in_channels(mode), 3);
    if (diff) lin("noise.trunk", spec.noise_width, 1);
    for (int l = 1; l < d; ++l) {
        const std::string tag = "enc" + std::to_string(l);
        conv(tag + ".conv", spec.width(l - 1), spec.width(l - 1), 3);
        if (spec.width(l) != spec.width(l - 1))
            conv(tag + ".pw", spec.width(l), spec.width(l - 1), 1);
        if (diff) lin(tag + ".emb", spec.width(l), spec.noise_width);
    }
    int carry = spec.width(d - 1);
    for (int l = d - 2; l >= 1; --l) {
        const std::string tag = "dec" + std::to_string(l);
        const int v = l == d - 2 ? spec.width(l) : spec.width(l - 1);
        conv(tag + ".pw", v, carry + spec.width(l), 1);
        conv(tag + ".conv", v, v, 3);
        if (diff) lin(tag + ".emb", v, spec.noise_width);
        carry = v;
    }
    conv("fuse.pw", spec.fuse_width, carry + spec.width(0), 1);
    conv("fuse.conv", spec.fuse_width, spec.fuse_width, 3);
    conv("head", spec.c_out, spec.fuse_width, 1);
    return den;
}

/// A wired graph at fixed batch/geometry for repeated forward evaluation.
template <typename T>
struct DenoiserRunT {
    GraphT<T> g;
    TensorT<T>* xin = nullptr;
    TensorT<T>* cn = nullptr;
    TensorT<T>* out = nullptr;
    int B = 0, H = 0, W = 0, c_out = 0, c_cond_tot = 0;
};

template <typename T>
std::unique_ptr<DenoiserRunT<T>> make_run(const DenoiserT<T>& den, int B, int H, int W,
                                          bool use_ema = false) {
    auto run = std::make_unique<DenoiserRunT<T>>();
    run->B = B;
    run->H = H;
    run->W = W;
    run->c_out = den.spec.c_out;
    run->c_cond_tot = den.spec.c_cond + den.spec.embedding_channels;
    run->xin = run->g.input({B, den.spec.in_channels(den.mode), H, W});
    if (den.mode == DenoiserMode::diffusion) run->cn = run->g.input({B, 1});
    run->out = den.wire(run->g, run->xin, run->cn, false, 0.0, use_ema).out;
    return run;
}

/// Writes the conditioning block (c_cond + embedding channels, already assembled)
/// into every sample slot of the run input.
template <typename T>
void set_conditioning(DenoiserRunT<T>& run, const std::vector<T>& condpos) {
    const long long per = (long long)run.c_cond_tot * run.H * run.W;
    RSD_REQUIRE((long long)condpos.size() == per, dimension, "conditioning block size mismatch");
    const int c0 = run.xin->dim(1) - run.c_cond_tot;
    const long long stride = run.xin->size() / run.B;
    for (int s = 0; s < run.B; ++s)
        std::memcpy(run.xin->data() + s * stride + (long long)c0 * run.H * run.W,
                    condpos.data(), std::size_t(per) * sizeof(T));
}

/// Preconditioned denoiser evaluation for a batch sharing one noise level:
/// fills D = c_skip*z + c_out*F(c_in*z, c_noise, y). z and D are [B, c_out, H, W].
template <typename T>
void denoise_batch(DenoiserRunT<T>& run, const DenoiserT<T>& den, const T* z, double sigma,
                   T* D) {
    RSD_REQUIRE(den.mode == DenoiserMode::diffusion, state,
                "preconditioned evaluation needs a diffusion-mode denoiser");
    const long long hw = (long long)run.H * run.W;
    const long long zs = (long long)run.c_out * hw;
    const long long stride = run.xin->size() / run.B;
    for (int s = 0; s < run.B; ++s)
        for (int c = 0; c < run.c_out; ++c) {
            const EdmCoeffs co = edm_coeffs(sigma, den.sigma_data[std::size_t(c)]);
            const T cin = T(co.c_in);
            T* dst = run.xin->data() + s * stride + c * hw;
            const T* src = z + s * zs + c * hw;
            for (long long i = 0; i < hw; ++i) dst[i] = cin * src[i];
            run.cn->values[std::size_t(s)] = T(co.c_noise);
        }
    run.g.forward();
    for (int s = 0; s < run.B; ++s)
        for (int c = 0; c < run.c_out; ++c) {
            const EdmCoeffs co = edm_coeffs(sigma, den.sigma_data[std::size_t(c)]);
            const T cs = T(co.c_skip), co_ = T(co.c_out);
            const T* f = run.out->data() + s * zs + c * hw;
            const T* zv = z + s * zs + c * hw;
            T* dst = D + s * zs + c * hw;
            for (long long i = 0; i < hw; ++i) dst[i] = cs * zv[i] + co_ * f[i];
        }
}

/// Field-level preconditioned evaluation D(z; sigma, y). y carries the c_cond
/// conditioning channels at fine resolution; positional channels are appended
/// internally. Intended for oracle checks and single-field inspection.
template <typename T>
Field precondition(const DenoiserT<T>& den, const Field& z, double sigma, const Field& y) {
    RSD_REQUIRE(den.mode == DenoiserMode::diffusion, state,
                "precondition needs a diffusion-mode denoiser");
    RSD_REQUIRE(sigma > 0.0, parameter, "noise level must be positive");
    RSD_REQUIRE(z.nchan() == den.spec.c_out, dimension, "state channel count mismatch");
    RSD_REQUIRE(y.nchan() == den.spec.c_cond, dimension, "conditioning channel count mismatch");
    RSD_REQUIRE(y.height() == z.height() && y.width() == z.width(), dimension,
                "conditioning geometry mismatch");
    const int H = z.height(), W = z.width();
    auto run = make_run(den, 1, H, W, !den.ema.empty());
    const Field pos = positional_embedding(H, W);
    std::vector<T> condpos(std::size_t(run->c_cond_tot) * H * W);
    const std::size_t hw = std::size_t(H) * W;
    for (int c = 0; c < y.nchan(); ++c)
        for (std::size_t i = 0; i < hw; ++i) condpos[c * hw + i] = T(y.chan(c)[i]);
    for (int c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < hw; ++i)
            condpos[(std::size_t(y.nchan()) + c) * hw + i] = T(pos.chan(c)[i]);
    set_conditioning(*run, condpos);
    std::vector<T> zbuf(std::size_t(z.nchan()) * hw), dbuf(zbuf.size());
    for (std::size_t i = 0; i < zbuf.size(); ++i) zbuf[i] = T(z.data()[i]);
    denoise_batch(*run, den, zbuf.data(), sigma, dbuf.data());
    Field out = Field::like(z);
    for (std::size_t i = 0; i < dbuf.size(); ++i) out.data()[i] = double(dbuf[i]);
    out.require_finite();
    return out;
}

using Denoiser = DenoiserT<float>;
using DenoiserRun = DenoiserRunT<float>;

}  // namespace resdiff
