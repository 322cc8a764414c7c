#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "resdiff/core.hpp"
#include "resdiff/fft.hpp"
#include "resdiff/field.hpp"

namespace resdiff {

enum class Scenario { grf, vortex, front, mixed };

inline const char* scenario_name(Scenario s) {
    switch (s) {
        case Scenario::grf: return "grf";
        case Scenario::vortex: return "vortex";
        case Scenario::front: return "front";
        case Scenario::mixed: return "mixed";
    }
    return "?";
}

inline Scenario scenario_from(const std::string& s) {
    if (s == "grf") return Scenario::grf;
    if (s == "vortex") return Scenario::vortex;
    if (s == "front") return Scenario::front;
    if (s == "mixed") return Scenario::mixed;
    throw error(errc::parameter, "unknown scenario: " + s);
}

struct BiasParams {
    double blur = 0.0;      // Gaussian blur width on the coarse grid, px
    double gamma = 0.0;     // damping of deviations from the spatial mean, [0,1]
};

struct VortexParams {
    double center_row = 64.0, center_col = 64.0;
    double r_max = 12.0;    // px
    double v_max = 1.0;
    double d = 1.0;         // outer decay exponent
};

struct FrontParams {
    double angle = 0.6;     // radians, normal direction of the front line
    double width = 4.0;     // px
    double delta_t = 2.0;
    double amplitude = 1.0; // convergence amplitude of the across-front wind
};

struct ScenarioParams {
    Scenario scenario = Scenario::grf;
    int height = 128, width = 128;
    int factor = 8;
    double alpha_l = 4.0;          // large-scale spectral slope
    double alpha_s = 5.0 / 3.0;    // small-scale spectral slope
    double a = 0.3;                // stochastic amplitude
    std::uint64_t topo_seed = 777;
    double topo_alpha = 3.0;
    double topo_var = 0.25;
    double s_kmin = 8.0;           // stochastic band (cycles per domain)
    double s_kmax = 48.0;
    double z_div_scale = 6.5;      // normalizes convergence before the 1.5 power
    double z_t0 = 2.0;
    double z_exp = 1.5;
    double template_noise = 0.25;  // GRF texture added to vortex/front templates
    BiasParams bias;
    VortexParams vortex;
    FrontParams front;

    void validate() const {
        RSD_REQUIRE(alpha_l > 0 && alpha_s > 0, parameter, "spectral slopes must be positive");
        RSD_REQUIRE(a >= 0, parameter, "stochastic amplitude must be >= 0");
        RSD_REQUIRE(bias.gamma >= 0 && bias.gamma <= 1, parameter, "bias gamma must be in [0,1]");
        RSD_REQUIRE(bias.blur >= 0, parameter, "bias blur must be >= 0");
        RSD_REQUIRE(vortex.r_max >= 1, parameter, "vortex R_max must be >= 1 px");
        RSD_REQUIRE(height > 0 && width > 0, dimension, "scene geometry must be positive");
        RSD_REQUIRE(height % factor == 0 && width % factor == 0, dimension,
                    "geometry not divisible by coarsening factor");
        RSD_REQUIRE(front.width > 0, parameter, "front width must be > 0");
    }
};

struct GridScene {
    Field fine;      // u, v, T, Z
    Field coarse;    // u, v, T, aux1..aux4
    Field latent;    // resolvable component L: u, v, T (topography included in T)
    std::uint64_t seed = 0;
    ScenarioParams params;  // retained so the scene can be conditionally resampled
};

namespace detail {

/// Half-spectrum complex Gaussian draws with exact Hermitian bookkeeping for
/// the self-paired columns; E|X(k)|^2 = q(kr), ring-binned power ~ kr^(-alpha).
/// With `streamfn` the per-mode power is divided by (sin^2 tx + sin^2 ty) and
/// the variance target applies to the centered-difference gradient pair of the
/// output, not to the output itself.
struct SpectralShape {
    double alpha;
    double kmin, kmax;
    bool streamfn = false;
};

inline void spectral_sample(int h, int w, const SpectralShape& s, double variance,
                            Rng& rng, std::vector<double>& out) {
    const int wc = w / 2 + 1;
    const std::size_t n = std::size_t(h) * w;
    out.assign(n, 0.0);
    if (variance <= 0.0) return;

    auto mode_q = [&](int kr_row, int kc, double* norm_weight = nullptr) -> double {
        int ky = kr_row <= h / 2 ? kr_row : kr_row - h;
        double kr = std::sqrt(double(kc) * kc + double(ky) * ky);
        if (kr < s.kmin || kr > s.kmax) return 0.0;
        double q = std::pow(kr, -s.alpha - 1.0);
        if (norm_weight) *norm_weight = q;
        if (s.streamfn) {
            double sx = std::sin(2.0 * M_PI * kc / w), sy = std::sin(2.0 * M_PI * ky / h);
            double d2 = sx * sx + sy * sy;
            if (d2 < 1e-12) {
                if (norm_weight) *norm_weight = 0.0;
                return 0.0;
            }
            q /= d2;
        }
        return q;
    };

    // Full-spectrum normalization sum (half-spectrum entries with 0 < kc < w/2
    // stand for a mirrored pair).
    double qsum = 0.0;
    for (int kr = 0; kr < h; ++kr)
        for (int kc = 0; kc < wc; ++kc) {
            double mult = (kc == 0 || (w % 2 == 0 && kc == w / 2)) ? 1.0 : 2.0;
            double nw = 0.0;
            mode_q(kr, kc, &nw);
            qsum += mult * nw;
        }
    if (qsum <= 0.0) return;
    const double scale = variance * double(n) * double(n) / qsum;

    std::vector<std::complex<double>> spec(std::size_t(h) * wc, {0.0, 0.0});
    auto idx = [&](int kr, int kc) { return std::size_t(kr) * wc + kc; };
    for (int kr = 0; kr < h; ++kr) {
        for (int kc = 0; kc < wc; ++kc) {
            bool self_col = (kc == 0 || (w % 2 == 0 && kc == w / 2));
            int mirror = (h - kr) % h;
            if (self_col && kr > mirror) continue;  // filled by its partner below
            double q = mode_q(kr, kc) * scale;
            double g1 = rng.normal(), g2 = rng.normal();  // fixed draw order
            if (q <= 0.0) continue;
            if (self_col && kr == mirror) {
                spec[idx(kr, kc)] = {std::sqrt(q) * g1, 0.0};  // self-conjugate: real
            } else if (self_col) {
                std::complex<double> z(std::sqrt(q / 2) * g1, std::sqrt(q / 2) * g2);
                spec[idx(kr, kc)] = z;
                spec[idx(mirror, kc)] = std::conj(z);
            } else {
                spec[idx(kr, kc)] = {std::sqrt(q / 2) * g1, std::sqrt(q / 2) * g2};
            }
        }
    }
    ifft2_c2r(spec.data(), out.data(), h, w);
}

}  // namespace detail

/// Isotropic power-law Gaussian random field: radial power ~ k^(-alpha),
/// zero spatial mean, variance v in expectation. Deterministic per seed.
inline Field grf_sample(int h, int w, double alpha, double variance, std::uint64_t seed,
                        double kmin = 0.5, double kmax = 1e9) {
    RSD_REQUIRE(alpha > 0, parameter, "grf slope must be positive");
    RSD_REQUIRE(variance >= 0, parameter, "grf variance must be >= 0");
    Field f({{"g", "", ChannelRole::state}}, h, w);
    Rng rng(seed);
    std::vector<double> plane;
    detail::spectral_sample(h, w, {alpha, kmin, kmax}, variance, rng, plane);
    std::copy(plane.begin(), plane.end(), f.chan(0));
    return f;
}

/// Rankine vortex: tangential speed V_max*(r/R) inside, V_max*(R/r)^d outside.
inline Field vortex_field(int h, int w, double center_row, double center_col,
                          double r_max, double v_max, double d) {
    RSD_REQUIRE(r_max >= 1, parameter, "R_max must be >= 1 px");
    RSD_REQUIRE(v_max > 0 && d > 0, parameter, "V_max and d must be positive");
    RSD_REQUIRE(center_row >= 0 && center_row < h && center_col >= 0 && center_col < w,
                parameter, "vortex center outside grid");
    Field f({{"u", "", ChannelRole::state}, {"v", "", ChannelRole::state}}, h, w);
    double* u = f.chan(0);
    double* v = f.chan(1);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double dy = i - center_row, dx = j - center_col;
            double r = std::sqrt(dx * dx + dy * dy);
            if (r < 1e-12) continue;
            double speed = r <= r_max ? v_max * (r / r_max) : v_max * std::pow(r_max / r, d);
            u[std::size_t(i) * w + j] = -speed * dy / r;
            v[std::size_t(i) * w + j] = speed * dx / r;
        }
    return f;
}

/// Frontal template: T and across-front wind follow tanh(s/w) in the signed
/// distance s from the line; a weaker along-front shear also flips sign.
inline Field front_field(int h, int w, double angle, double width, double delta_t,
                         double amplitude) {
    RSD_REQUIRE(width > 0, parameter, "front width must be > 0");
    Field f({{"u", "", ChannelRole::state},
             {"v", "", ChannelRole::state},
             {"T", "", ChannelRole::state}}, h, w);
    double nx = std::cos(angle), ny = std::sin(angle);    // front normal
    double tx = -ny, ty = nx;                             // front tangent
    double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    double* u = f.chan(0);
    double* v = f.chan(1);
    double* T = f.chan(2);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double s = (j - cx) * nx + (i - cy) * ny;
            double t = std::tanh(s / width);
            std::size_t p = std::size_t(i) * w + j;
            T[p] = 0.5 * delta_t * t;
            double across = -amplitude * t;       // convergent at s = 0
            double along = 0.5 * amplitude * t;   // sign change across the line
            u[p] = across * nx + along * tx;
            v[p] = across * ny + along * ty;
        }
    return f;
}

namespace detail {

/// Centered differences, periodic wrap; the same stencils define both the
/// solenoidal noise construction and the Z-channel convergence.
inline void ddx(const double* f, double* out, int h, int w) {
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            out[std::size_t(i) * w + j] = 0.5 * (f[std::size_t(i) * w + (j + 1) % w] -
                                                 f[std::size_t(i) * w + (j + w - 1) % w]);
}
inline void ddy(const double* f, double* out, int h, int w) {
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            out[std::size_t(i) * w + j] = 0.5 * (f[std::size_t((i + 1) % h) * w + j] -
                                                 f[std::size_t((i + h - 1) % h) * w + j]);
}

struct StochasticDraw {
    std::vector<double> su, sv, st, sz;  // each unit variance in expectation
};

/// Small-scale components. The wind pair comes from one streamfunction using
/// the ddx/ddy stencils, so its discrete divergence vanishes identically and
/// the Z channel's convergence stays a function of the resolvable component.
inline StochasticDraw stochastic_components(const ScenarioParams& p, std::uint64_t seed) {
    const int h = p.height, w = p.width;
    StochasticDraw out;
    SpectralShape wind{p.alpha_s, p.s_kmin, p.s_kmax, true};
    Rng rng_psi(derive_seed(seed, 11));
    std::vector<double> psi;
    spectral_sample(h, w, wind, 1.0, rng_psi, psi);  // KE-normalized pair below
    out.su.resize(psi.size());
    out.sv.resize(psi.size());
    // S_u = -d(psi)/dy, S_v = +d(psi)/dx; spectrum of psi carries 1/(sin^2+sin^2)
    // so that |S_u|^2 + |S_v|^2 ring power follows k^(-alpha_s) exactly; each
    // component then has variance 1/2 in expectation. Rescale to 1.
    ddy(psi.data(), out.su.data(), h, w);
    ddx(psi.data(), out.sv.data(), h, w);
    const double rs = std::sqrt(2.0);
    for (std::size_t i = 0; i < psi.size(); ++i) {
        out.su[i] = -out.su[i] * rs;
        out.sv[i] *= rs;
    }
    SpectralShape scalar{p.alpha_s, p.s_kmin, p.s_kmax, false};
    Rng rng_t(derive_seed(seed, 12));
    spectral_sample(h, w, scalar, 1.0, rng_t, out.st);
    Rng rng_z(derive_seed(seed, 13));
    spectral_sample(h, w, scalar, 1.0, rng_z, out.sz);
    return out;
}

/// Fine state from latent + stochastic draw: u,v,T sums plus the synthesized Z.
inline Field compose_fine(const ScenarioParams& p, const Field& latent, const StochasticDraw& s) {
    const int h = p.height, w = p.width;
    const std::size_t n = std::size_t(h) * w;
    Field fine({{"u", "m/s", ChannelRole::state},
                {"v", "m/s", ChannelRole::state},
                {"T", "K", ChannelRole::state},
                {"Z", "dBZ", ChannelRole::synthesized}}, h, w);
    double* u = fine.chan(0);
    double* v = fine.chan(1);
    double* T = fine.chan(2);
    double* Z = fine.chan(3);
    const double* lu = latent.chan(0);
    const double* lv = latent.chan(1);
    const double* lt = latent.chan(2);
    for (std::size_t i = 0; i < n; ++i) {
        u[i] = lu[i] + p.a * s.su[i];
        v[i] = lv[i] + p.a * s.sv[i];
        T[i] = lt[i] + p.a * s.st[i];
    }
    std::vector<double> dx(n), dy(n);
    ddx(u, dx.data(), h, w);
    ddy(v, dy.data(), h, w);
    double tbar = 0.0;
    for (std::size_t i = 0; i < n; ++i) tbar += T[i];
    tbar /= double(n);
    for (std::size_t i = 0; i < n; ++i) {
        double conv = std::max(0.0, -(dx[i] + dy[i]) * p.z_div_scale);
        Z[i] = std::pow(conv, p.z_exp) * std::exp((T[i] - tbar) / p.z_t0) + p.a * s.sz[i];
        Z[i] = std::max(Z[i], 0.0);
    }
    return fine;
}

}  // namespace detail

/// Resolvable (large-scale) component of one scene, topography included.
inline Field synth_latent(const ScenarioParams& p, std::uint64_t seed) {
    const int h = p.height, w = p.width;
    Field latent({{"u", "m/s", ChannelRole::state},
                  {"v", "m/s", ChannelRole::state},
                  {"T", "K", ChannelRole::state}}, h, w);
    Rng jit(derive_seed(seed, 1));
    Scenario sc = p.scenario;
    if (sc == Scenario::mixed) {
        Scenario pick[3] = {Scenario::grf, Scenario::vortex, Scenario::front};
        sc = pick[jit.below(3)];
    }
    auto grf_part = [&](int tag, double var) {
        return grf_sample(h, w, p.alpha_l, var, derive_seed(seed, 100 + tag));
    };
    if (sc == Scenario::grf) {
        for (int c = 0; c < 3; ++c) {
            Field g = grf_part(c, 1.0);
            std::copy(g.chan(0), g.chan(0) + g.pixels(), latent.chan(c));
        }
    } else if (sc == Scenario::vortex) {
        VortexParams vp = p.vortex;
        vp.center_row += jit.uniform(-0.12, 0.12) * h;
        vp.center_col += jit.uniform(-0.12, 0.12) * w;
        vp.r_max *= jit.uniform(0.7, 1.4);
        vp.v_max *= jit.uniform(0.8, 1.3);
        vp.d *= jit.uniform(0.8, 1.25);
        vp.center_row = std::clamp(vp.center_row, 0.0, h - 1.0);
        vp.center_col = std::clamp(vp.center_col, 0.0, w - 1.0);
        Field vtx = vortex_field(h, w, vp.center_row, vp.center_col, vp.r_max, vp.v_max, vp.d);
        for (int c = 0; c < 2; ++c) {
            Field g = grf_part(c, p.template_noise * p.template_noise);
            const double* gp = g.chan(0);
            const double* tp = vtx.chan(c);
            double* lp = latent.chan(c);
            for (std::size_t i = 0; i < latent.pixels(); ++i) lp[i] = tp[i] + gp[i];
        }
        Field g = grf_part(2, 1.0);
        std::copy(g.chan(0), g.chan(0) + g.pixels(), latent.chan(2));
    } else {
        FrontParams fp = p.front;
        fp.angle += jit.uniform(-0.3, 0.3);
        fp.width *= jit.uniform(0.8, 1.3);
        fp.amplitude *= jit.uniform(0.8, 1.25);
        Field ft = front_field(h, w, fp.angle, fp.width, fp.delta_t, fp.amplitude);
        for (int c = 0; c < 3; ++c) {
            Field g = grf_part(c, p.template_noise * p.template_noise);
            const double* gp = g.chan(0);
            const double* tp = ft.chan(c);
            double* lp = latent.chan(c);
            for (std::size_t i = 0; i < latent.pixels(); ++i) lp[i] = tp[i] + gp[i];
        }
    }
    // fixed topography imprint on T (seeded once per dataset)
    if (p.topo_var > 0) {
        Field topo = grf_sample(h, w, p.topo_alpha, p.topo_var, derive_seed(p.topo_seed, 7));
        const double* tp = topo.chan(0);
        double* lt = latent.chan(2);
        for (std::size_t i = 0; i < latent.pixels(); ++i) lt[i] += tp[i];
    }
    return latent;
}

/// One coarse/fine training pair with known conditional structure.
inline GridScene synth_scene(const ScenarioParams& p, std::uint64_t seed) {
    p.validate();
    const int h = p.height, w = p.width;
    GridScene scene;
    scene.seed = seed;
    scene.params = p;
    scene.latent = synth_latent(p, seed);
    detail::StochasticDraw s = detail::stochastic_components(p, derive_seed(seed, 2));
    scene.fine = detail::compose_fine(p, scene.latent, s);

    // coarse u, v, T: pooled fine, then optional bias (blur + deviation damping)
    Field pooled = pool_average(scene.fine, p.factor);
    int ch = h / p.factor, cw = w / p.factor;
    Field coarse({{"u", "m/s", ChannelRole::conditioning},
                  {"v", "m/s", ChannelRole::conditioning},
                  {"T", "K", ChannelRole::conditioning},
                  {"aux_ke", "", ChannelRole::conditioning},
                  {"aux_conv", "", ChannelRole::conditioning},
                  {"aux_vort", "", ChannelRole::conditioning},
                  {"aux_t", "", ChannelRole::conditioning}}, ch, cw,
                 pooled.spacing());
    for (int c = 0; c < 3; ++c) {
        std::vector<double> tmp(pooled.chan(c), pooled.chan(c) + pooled.pixels());
        if (p.bias.blur > 0)
            detail::blur_plane(tmp.data(), coarse.chan(c), ch, cw, p.bias.blur, true);
        else
            std::copy(tmp.begin(), tmp.end(), coarse.chan(c));
        if (p.bias.gamma > 0) {
            double* cp = coarse.chan(c);
            double m = 0.0;
            for (std::size_t i = 0; i < coarse.pixels(); ++i) m += cp[i];
            m /= double(coarse.pixels());
            for (std::size_t i = 0; i < coarse.pixels(); ++i)
                cp[i] = m + (1.0 - p.bias.gamma) * (cp[i] - m);
        }
    }

    // auxiliary conditioning: smoothed functionals of the latent component
    {
        const std::size_t n = std::size_t(h) * w;
        const double* lu = scene.latent.chan(0);
        const double* lv = scene.latent.chan(1);
        const double* lt = scene.latent.chan(2);
        std::vector<double> work(n), dx(n), dy(n);
        auto pool_into = [&](const std::vector<double>& plane, double sigma, double* dst) {
            std::vector<double> sm(n);
            detail::blur_plane(plane.data(), sm.data(), h, w, sigma, true);
            for (int i = 0; i < ch; ++i)
                for (int j = 0; j < cw; ++j) {
                    double acc = 0.0;
                    for (int di = 0; di < p.factor; ++di)
                        for (int dj = 0; dj < p.factor; ++dj)
                            acc += sm[std::size_t(i * p.factor + di) * w + (j * p.factor + dj)];
                    dst[std::size_t(i) * cw + j] = acc / (double(p.factor) * p.factor);
                }
        };
        for (std::size_t i = 0; i < n; ++i) work[i] = lu[i] * lu[i] + lv[i] * lv[i];
        pool_into(work, 2.0, coarse.chan(3));
        detail::ddx(lu, dx.data(), h, w);
        detail::ddy(lv, dy.data(), h, w);
        for (std::size_t i = 0; i < n; ++i) work[i] = -(dx[i] + dy[i]) * p.z_div_scale;
        pool_into(work, 2.0, coarse.chan(4));
        detail::ddx(lv, dx.data(), h, w);
        detail::ddy(lu, dy.data(), h, w);
        for (std::size_t i = 0; i < n; ++i) work[i] = dx[i] - dy[i];
        pool_into(work, 2.0, coarse.chan(5));
        work.assign(lt, lt + n);
        pool_into(work, 4.0, coarse.chan(6));
    }
    scene.coarse = std::move(coarse);
    scene.fine.require_finite();
    scene.coarse.require_finite();
    return scene;
}

/// Ground-truth conditional ensemble: hold the latent fixed, redraw only the
/// stochastic components. This is the oracle for p(x|y).
inline EnsembleForecast conditional_resample(const GridScene& scene, int K, std::uint64_t seed) {
    RSD_REQUIRE(scene.latent.size() > 0, state, "scene is missing its latent component");
    RSD_REQUIRE(K >= 1, parameter, "ensemble size must be >= 1");
    EnsembleForecast ens;
    ens.conditioning = scene.coarse;
    ens.members.resize(K);
    ens.member_seeds.resize(K);
    for (int k = 0; k < K; ++k) {
        ens.member_seeds[k] = derive_seed(seed, 0x52530000ull + k);
        detail::StochasticDraw s = detail::stochastic_components(scene.params, ens.member_seeds[k]);
        ens.members[k] = detail::compose_fine(scene.params, scene.latent, s);
    }
    return ens;
}

}  // namespace resdiff
