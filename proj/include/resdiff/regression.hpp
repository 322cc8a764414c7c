#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <vector>

#include "resdiff/container.hpp"
#include "resdiff/dataset.hpp"
#include "resdiff/net.hpp"

namespace resdiff {

struct TrainLog {
    std::vector<double> loss;  // windowed mean training loss
    long long window = 0;      // steps per window
    long long samples = 0;
    double wall_seconds = 0.0;
};

/// Stage one: the conditional-mean network. Serving denormalizes back to
/// physical units, so downstream residuals live in physical space.
struct RegressionModel {
    Denoiser den;
    NormTable cond_norm, fine_norm;
    std::vector<std::string> cond_names;
    std::vector<ChannelSpec> out_specs;
    std::vector<double> bias;  // per-channel serving correction, normalized space
    int factor = 1;
    TrainLog log;
};

/// Reusable batched forward pass of a frozen regression net at a fixed
/// geometry. Conditioning arrives already normalized, [c_cond, h, w].
class MeanServer {
public:
    MeanServer(const RegressionModel& m, int batch, int h, int w)
        : run_(make_run(m.den, batch, h, w, !m.den.ema.empty())),
          bias_(m.bias.begin(), m.bias.end()) {
        RSD_REQUIRE(m.den.mode == DenoiserMode::regression, state,
                    "mean server needs a regression-mode denoiser");
        bias_.resize(std::size_t(run_->c_out), 0.0f);
        const Field pe = positional_embedding(h, w);
        pos_.resize(pe.size());
        for (std::size_t i = 0; i < pe.size(); ++i) pos_[i] = float(pe.data()[i]);
    }

    int batch() const { return run_->B; }

    /// conds: up to batch() pointers; out: [conds.size(), c_out, h, w].
    void predict_norm(const std::vector<const float*>& conds, float* out) {
        const int n = int(conds.size());
        RSD_REQUIRE(n >= 1 && n <= run_->B, dimension, "mean server batch overflow");
        const std::size_t hw = std::size_t(run_->H) * run_->W;
        const std::size_t c_cond = std::size_t(run_->c_cond_tot) - 4;
        const std::size_t stride = std::size_t(run_->xin->size() / run_->B);
        for (int s = 0; s < n; ++s) {
            float* dst = run_->xin->data() + s * stride;
            std::memcpy(dst, conds[std::size_t(s)], c_cond * hw * sizeof(float));
            std::memcpy(dst + c_cond * hw, pos_.data(), 4 * hw * sizeof(float));
        }
        run_->g.forward();
        const float* src = run_->out->data();
        for (int s = 0; s < n; ++s)
            for (int c = 0; c < run_->c_out; ++c) {
                const std::size_t off = (std::size_t(s) * run_->c_out + c) * hw;
                const float b = bias_[std::size_t(c)];
                for (std::size_t i = 0; i < hw; ++i) out[off + i] = src[off + i] + b;
            }
    }

private:
    std::unique_ptr<DenoiserRun> run_;
    std::vector<float> bias_;
    std::vector<float> pos_;
};

/// Minimize MSE between the network applied to normalized conditioning and
/// the normalized fine target, on random crops of the training split.
/// Per-sample draws: scene index, then row offset, then column offset.
inline RegressionModel train_regression(const Dataset& ds, const TrainConfig& cfg,
                                        std::uint64_t seed, NetSpec arch = NetSpec{}) {
    RSD_REQUIRE(!ds.train.empty(), data, "training split is empty");
    cfg.validate();
    arch.c_out = ds.c_out;
    arch.c_cond = ds.c_cond;
    const int H = ds.height, W = ds.width;
    const int cs = cfg.crop == 0 ? H : cfg.crop;
    RSD_REQUIRE(cs <= H && cs <= W, parameter, "training crop exceeds the scene size");

    const auto t0 = std::chrono::steady_clock::now();
    RegressionModel model;
    model.den = build_denoiser<float>(arch, DenoiserMode::regression, derive_seed(seed, 1));
    model.cond_norm = ds.cond_norm;
    model.fine_norm = ds.fine_norm;
    model.cond_names = ds.cond_names;
    model.out_specs = ds.out_specs;
    model.factor = ds.params.factor;

    Graph g(derive_seed(seed, 2));
    const int B = cfg.batch;
    Tensor* xin = g.input({B, arch.c_cond + arch.embedding_channels, cs, cs});
    auto wired = model.den.wire(g, xin, nullptr, true, cfg.dropout);
    Tensor* tgt = g.input({B, arch.c_out, cs, cs});
    Tensor* loss = g.mse(wired.out, tgt);
    g.set_training(true);

    Field pe = positional_embedding(H, W);
    std::vector<float> pos(pe.size());
    for (std::size_t i = 0; i < pe.size(); ++i) pos[i] = float(pe.data()[i]);

    const long long steps = (cfg.samples + B - 1) / B;
    const double decay =
        cfg.ema_decay > 0
            ? cfg.ema_decay
            : ema_decay_from_half_life(std::max(1.0, double(cfg.samples) / 8.0), B);
    AdamState<float> opt;
    std::vector<std::vector<float>> shadow;
    Rng pick(derive_seed(seed, 3));

    const std::size_t cc = std::size_t(cs) * cs;
    const std::size_t in_stride = std::size_t(arch.c_cond + arch.embedding_channels) * cc;
    const std::size_t tgt_stride = std::size_t(arch.c_out) * cc;
    model.log.window = std::max<long long>(1, steps / 40);
    double acc = 0.0;
    long long in_window = 0;
    for (long long step = 0; step < steps; ++step) {
        for (int b = 0; b < B; ++b) {
            const SceneBundle& sc = ds.train[std::size_t(pick.below(ds.train.size()))];
            const int oy = int(pick.below(std::uint64_t(H - cs + 1)));
            const int ox = int(pick.below(std::uint64_t(W - cs + 1)));
            float* xb = xin->data() + std::size_t(b) * in_stride;
            copy_crop(sc.cond.data(), ds.c_cond, H, W, oy, ox, cs, xb);
            copy_crop(pos.data(), 4, H, W, oy, ox, cs, xb + std::size_t(ds.c_cond) * cc);
            copy_crop(sc.fine.data(), ds.c_out, H, W, oy, ox, cs,
                      tgt->data() + std::size_t(b) * tgt_stride);
        }
        g.forward();
        g.backward(loss);
        adam_step(g.params(), opt, cfg);
        ema_update(shadow, g.params(), decay);
        acc += double(loss->values[0]);
        if (++in_window == model.log.window || step + 1 == steps) {
            model.log.loss.push_back(acc / double(in_window));
            acc = 0.0;
            in_window = 0;
        }
    }
    model.den.absorb(g.params());
    model.den.absorb_ema(shadow);

    // First-moment calibration of the serving weights on the training split:
    // the optimizer leaves per-channel offsets of order 1% of a standard
    // deviation that drift with the step count, and those offsets are shared
    // by held-out data, so subtracting the train-split mean residual leaves
    // only sampling noise in test residual means.
    {
        const int SB = 4;
        MeanServer srv(model, SB, H, W);
        const std::size_t hw = std::size_t(H) * W;
        std::vector<float> out(std::size_t(SB) * ds.c_out * hw);
        std::vector<double> acc(std::size_t(ds.c_out), 0.0);
        for (std::size_t s0 = 0; s0 < ds.train.size(); s0 += SB) {
            std::vector<const float*> conds;
            for (std::size_t s = s0; s < std::min(ds.train.size(), s0 + SB); ++s)
                conds.push_back(ds.train[s].cond.data());
            srv.predict_norm(conds, out.data());
            for (std::size_t k = 0; k < conds.size(); ++k)
                for (int c = 0; c < ds.c_out; ++c) {
                    const float* p = out.data() + (k * ds.c_out + std::size_t(c)) * hw;
                    const float* t = ds.train[s0 + k].fine.data() + std::size_t(c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) acc[std::size_t(c)] += double(t[i]) - double(p[i]);
                }
        }
        model.bias.resize(std::size_t(ds.c_out));
        for (int c = 0; c < ds.c_out; ++c)
            model.bias[std::size_t(c)] = acc[std::size_t(c)] / (double(ds.train.size()) * hw);
    }
    model.log.samples = steps * B;
    model.log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return model;
}

/// Deterministic conditional mean in physical units; Z comes back clipped at
/// zero through the sqrt-space inversion.
inline Field predict_mean(const RegressionModel& m, const Field& y) {
    RSD_REQUIRE(y.nchan() == int(m.cond_names.size()), contract,
                "conditioning channel count differs from the training spec");
    for (int c = 0; c < y.nchan(); ++c)
        RSD_REQUIRE(y.channels()[std::size_t(c)].name == m.cond_names[std::size_t(c)], contract,
                    "conditioning channel order differs from the training spec");
    const int th = y.height() * m.factor, tw = y.width() * m.factor;
    Field up = interp_bilinear(y, th, tw);
    const std::size_t hw = std::size_t(th) * tw;
    std::vector<float> cond(std::size_t(y.nchan()) * hw);
    for (int c = 0; c < y.nchan(); ++c) {
        const NormEntry& e = m.cond_norm.entries[std::size_t(c)];
        const double* p = up.chan(c);
        float* dst = cond.data() + std::size_t(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] = float(norm_forward(e, p[i]));
    }

    MeanServer server(m, 1, th, tw);
    std::vector<float> out(std::size_t(m.out_specs.size()) * hw);
    server.predict_norm({cond.data()}, out.data());

    Field mu(m.out_specs, th, tw, y.spacing() / double(m.factor));
    for (std::size_t c = 0; c < m.out_specs.size(); ++c) {
        const NormEntry& e = m.fine_norm.entries[c];
        const float* src = out.data() + c * hw;
        double* dst = mu.chan(int(c));
        for (std::size_t i = 0; i < hw; ++i) dst[i] = norm_inverse(e, double(src[i]));
    }
    mu.require_finite();
    return mu;
}

// ---- checkpoint plumbing -------------------------------------------------

inline nlohmann::json norm_to_json(const NormTable& t) {
    nlohmann::json j = nlohmann::json::array();
    for (const NormEntry& e : t.entries)
        j.push_back({{"name", e.name},
                     {"sqrt", e.sqrt_transform},
                     {"mean", e.mean},
                     {"std", e.std}});
    return j;
}

inline NormTable norm_from_json(const nlohmann::json& j) {
    NormTable t;
    for (const auto& e : j)
        t.entries.push_back({e.at("name").get<std::string>(), e.at("sqrt").get<bool>(),
                             e.at("mean").get<double>(), e.at("std").get<double>()});
    return t;
}

inline nlohmann::json specs_to_json(const std::vector<ChannelSpec>& specs) {
    nlohmann::json j = nlohmann::json::array();
    for (const ChannelSpec& s : specs)
        j.push_back({{"name", s.name},
                     {"units", s.units},
                     {"role", int(s.role)},
                     {"norm_mean", s.norm_mean},
                     {"norm_std", s.norm_std}});
    return j;
}

inline std::vector<ChannelSpec> specs_from_json(const nlohmann::json& j) {
    std::vector<ChannelSpec> specs;
    for (const auto& s : j)
        specs.push_back({s.at("name").get<std::string>(), s.at("units").get<std::string>(),
                         ChannelRole(s.at("role").get<int>()), s.at("norm_mean").get<double>(),
                         s.at("norm_std").get<double>()});
    return specs;
}

inline nlohmann::json log_to_json(const TrainLog& log) {
    return {{"loss", log.loss},
            {"window", log.window},
            {"samples", log.samples},
            {"wall_seconds", log.wall_seconds}};
}

inline TrainLog log_from_json(const nlohmann::json& j) {
    TrainLog log;
    log.loss = j.at("loss").get<std::vector<double>>();
    log.window = j.at("window").get<long long>();
    log.samples = j.at("samples").get<long long>();
    log.wall_seconds = j.at("wall_seconds").get<double>();
    return log;
}

inline void denoiser_to_container(Container& c, const Denoiser& den) {
    nlohmann::json net;
    net["mode"] = den.mode == DenoiserMode::regression ? "regression" : "diffusion";
    net["spec"] = {{"depth", den.spec.depth},
                   {"base_width", den.spec.base_width},
                   {"multipliers", den.spec.multipliers},
                   {"c_out", den.spec.c_out},
                   {"c_cond", den.spec.c_cond},
                   {"embedding_channels", den.spec.embedding_channels},
                   {"noise_width", den.spec.noise_width},
                   {"fuse_width", den.spec.fuse_width}};
    net["sigma_data"] = den.sigma_data;
    c.meta["net"] = std::move(net);
    for (std::size_t i = 0; i < den.params.size(); ++i)
        c.arrays.push_back(
            {"p." + den.param_names[i], {int(den.params[i].size())}, den.params[i]});
    for (std::size_t i = 0; i < den.ema.size(); ++i)
        c.arrays.push_back({"ema." + den.param_names[i], {int(den.ema[i].size())}, den.ema[i]});
}

inline Denoiser denoiser_from_container(const Container& c) {
    RSD_REQUIRE(c.meta.contains("net"), format, "container is not a model checkpoint");
    const nlohmann::json& net = c.meta["net"];
    NetSpec spec;
    const nlohmann::json& sj = net.at("spec");
    spec.depth = sj.at("depth").get<int>();
    spec.base_width = sj.at("base_width").get<int>();
    spec.multipliers = sj.at("multipliers").get<std::vector<int>>();
    spec.c_out = sj.at("c_out").get<int>();
    spec.c_cond = sj.at("c_cond").get<int>();
    spec.embedding_channels = sj.at("embedding_channels").get<int>();
    spec.noise_width = sj.at("noise_width").get<int>();
    spec.fuse_width = sj.at("fuse_width").get<int>();
    const DenoiserMode mode = net.at("mode").get<std::string>() == "regression"
                                  ? DenoiserMode::regression
                                  : DenoiserMode::diffusion;
    Denoiser den = build_denoiser<float>(spec, mode, 0);
    den.sigma_data = net.at("sigma_data").get<std::vector<double>>();
    bool any_ema = false;
    for (std::size_t i = 0; i < den.params.size(); ++i) {
        const NamedArray& a = c.array("p." + den.param_names[i]);
        RSD_REQUIRE(a.values.size() == den.params[i].size(), format,
                    "checkpoint parameter " + den.param_names[i] + " has the wrong size");
        den.params[i] = a.values;
        if (c.has("ema." + den.param_names[i])) any_ema = true;
    }
    if (any_ema) {
        den.ema.resize(den.params.size());
        for (std::size_t i = 0; i < den.params.size(); ++i) {
            const NamedArray& a = c.array("ema." + den.param_names[i]);
            RSD_REQUIRE(a.values.size() == den.params[i].size(), format,
                        "checkpoint EMA " + den.param_names[i] + " has the wrong size");
            den.ema[i] = a.values;
        }
    }
    return den;
}

inline void save_regression(const std::string& path, const RegressionModel& m) {
    Container c;
    denoiser_to_container(c, m.den);
    c.meta["model"] = {{"kind", "regression"},
                       {"factor", m.factor},
                       {"cond_norm", norm_to_json(m.cond_norm)},
                       {"fine_norm", norm_to_json(m.fine_norm)},
                       {"cond_names", m.cond_names},
                       {"out_specs", specs_to_json(m.out_specs)},
                       {"bias", m.bias},
                       {"log", log_to_json(m.log)}};
    write_container(path, c);
}

inline RegressionModel load_regression(const std::string& path) {
    Container c = read_container(path);
    RSD_REQUIRE(c.meta.contains("model") && c.meta["model"].value("kind", "") == "regression",
                format, "container is not a regression checkpoint");
    const nlohmann::json& mj = c.meta["model"];
    RegressionModel m;
    m.den = denoiser_from_container(c);
    RSD_REQUIRE(m.den.mode == DenoiserMode::regression, format,
                "checkpoint denoiser is not in regression mode");
    m.factor = mj.at("factor").get<int>();
    m.cond_norm = norm_from_json(mj.at("cond_norm"));
    m.fine_norm = norm_from_json(mj.at("fine_norm"));
    m.cond_names = mj.at("cond_names").get<std::vector<std::string>>();
    m.out_specs = specs_from_json(mj.at("out_specs"));
    m.bias = mj.at("bias").get<std::vector<double>>();
    m.log = log_from_json(mj.at("log"));
    return m;
}

}  // namespace resdiff
