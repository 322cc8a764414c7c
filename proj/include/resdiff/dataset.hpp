#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "resdiff/core.hpp"
#include "resdiff/field.hpp"
#include "resdiff/synth.hpp"

namespace resdiff {

/// Per-channel z-score parameters, fitted on the training split only.
/// Channels with a heavy zero-mode (Z) are square-root transformed first so
/// the z-score, and later sigma_data = 1, stay meaningful.
struct NormEntry {
    std::string name;
    bool sqrt_transform = false;
    double mean = 0.0;
    double std = 1.0;
};

struct NormTable {
    std::vector<NormEntry> entries;

    int index_of(const std::string& name) const {
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name) return int(i);
        return -1;
    }
    const NormEntry& entry(const std::string& name) const {
        int i = index_of(name);
        RSD_REQUIRE(i >= 0, contract, "no normalization entry for channel " + name);
        return entries[std::size_t(i)];
    }
};

inline double norm_forward(const NormEntry& e, double v) {
    if (e.sqrt_transform) v = std::sqrt(std::max(v, 0.0));
    return (v - e.mean) / e.std;
}

/// Inverse of norm_forward; the sqrt branch clips at zero before squaring,
/// which is exact on data that was non-negative to begin with.
inline double norm_inverse(const NormEntry& e, double v) {
    v = v * e.std + e.mean;
    if (e.sqrt_transform) {
        v = std::max(v, 0.0);
        v = v * v;
    }
    return v;
}

/// Pooled per-channel statistics over a set of same-layout fields.
/// Constant channels get std = 1 so normalization stays invertible.
inline NormTable fit_norm(const std::vector<Field>& fields,
                          const std::vector<std::string>& sqrt_channels = {}) {
    RSD_REQUIRE(!fields.empty(), data, "cannot fit normalization on an empty set");
    const int C = fields.front().nchan();
    NormTable table;
    for (int c = 0; c < C; ++c) {
        NormEntry e;
        e.name = fields.front().channels()[std::size_t(c)].name;
        for (const std::string& s : sqrt_channels)
            if (s == e.name) e.sqrt_transform = true;
        double sum = 0.0, sumsq = 0.0;
        long long n = 0;
        for (const Field& f : fields) {
            RSD_REQUIRE(f.nchan() == C && f.channels()[std::size_t(c)].name == e.name, contract,
                        "normalization fit over mismatched channel layouts");
            const double* p = f.chan(c);
            for (std::size_t i = 0; i < f.pixels(); ++i) {
                double v = e.sqrt_transform ? std::sqrt(std::max(p[i], 0.0)) : p[i];
                sum += v;
                sumsq += v * v;
                ++n;
            }
        }
        e.mean = sum / double(n);
        double var = sumsq / double(n) - e.mean * e.mean;
        e.std = var > 1e-24 ? std::sqrt(var) : 1.0;
        table.entries.push_back(std::move(e));
    }
    return table;
}

/// One scene reduced to what the trainers and the evaluator consume.
/// `cond` is the coarse input bilinearly upsampled to the fine grid and
/// normalized; `fine` is the normalized target (Z in sqrt space); the raw
/// copies keep physical units for metrics and baselines. `resid` stays empty
/// until the diffusion stage fills it from a trained regression model.
struct SceneBundle {
    std::uint64_t seed = 0;
    int h = 0, w = 0;    // fine grid
    int ch = 0, cw = 0;  // coarse grid
    std::vector<float> cond;        // [c_cond, h, w]
    std::vector<float> fine;        // [c_out, h, w]
    std::vector<float> fine_raw;    // [c_out, h, w]
    std::vector<float> coarse_raw;  // [c_cond, ch, cw]
    std::vector<float> resid;       // [c_out, h, w], normalized residual
};

inline Field upsample_conditioning(const Field& coarse, int th, int tw) {
    return interp_bilinear(coarse, th, tw);
}

inline SceneBundle preprocess_scene(const GridScene& scene, const NormTable& cond_norm,
                                    const NormTable& fine_norm) {
    RSD_REQUIRE(scene.fine.nchan() == int(fine_norm.entries.size()), contract,
                "fine channel count does not match the normalization table");
    RSD_REQUIRE(scene.coarse.nchan() == int(cond_norm.entries.size()), contract,
                "conditioning channel count does not match the normalization table");
    SceneBundle b;
    b.seed = scene.seed;
    b.h = scene.fine.height();
    b.w = scene.fine.width();
    b.ch = scene.coarse.height();
    b.cw = scene.coarse.width();
    const std::size_t hw = scene.fine.pixels();

    Field up = upsample_conditioning(scene.coarse, b.h, b.w);
    b.cond.resize(std::size_t(up.nchan()) * hw);
    for (int c = 0; c < up.nchan(); ++c) {
        const NormEntry& e = cond_norm.entries[std::size_t(c)];
        RSD_REQUIRE(e.name == up.channels()[std::size_t(c)].name, contract,
                    "conditioning channel order mismatch");
        const double* p = up.chan(c);
        float* dst = b.cond.data() + std::size_t(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] = float(norm_forward(e, p[i]));
    }

    b.fine.resize(std::size_t(scene.fine.nchan()) * hw);
    b.fine_raw.resize(b.fine.size());
    for (int c = 0; c < scene.fine.nchan(); ++c) {
        const NormEntry& e = fine_norm.entries[std::size_t(c)];
        RSD_REQUIRE(e.name == scene.fine.channels()[std::size_t(c)].name, contract,
                    "fine channel order mismatch");
        const double* p = scene.fine.chan(c);
        float* dst = b.fine.data() + std::size_t(c) * hw;
        float* raw = b.fine_raw.data() + std::size_t(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            dst[i] = float(norm_forward(e, p[i]));
            raw[i] = float(p[i]);
        }
    }

    b.coarse_raw.resize(std::size_t(scene.coarse.nchan()) * scene.coarse.pixels());
    for (int c = 0; c < scene.coarse.nchan(); ++c) {
        const double* p = scene.coarse.chan(c);
        float* dst = b.coarse_raw.data() + std::size_t(c) * scene.coarse.pixels();
        for (std::size_t i = 0; i < scene.coarse.pixels(); ++i) dst[i] = float(p[i]);
    }
    return b;
}

/// Training corpus: seed-disjoint train/test scene bundles plus the
/// normalization fitted on the training split.
struct Dataset {
    ScenarioParams params;
    int height = 0, width = 0;
    int c_cond = 0, c_out = 0;
    std::vector<std::string> cond_names, out_names;
    std::vector<ChannelSpec> cond_specs, out_specs;  // carry units/roles/norms
    NormTable cond_norm, fine_norm;
    std::vector<SceneBundle> train, test;
};

/// Scene seeds derive from the master seed by index, so every scene is
/// distinct and the split is disjoint by construction. Scenes are generated
/// twice (once to fit statistics, once to bundle) to keep peak memory at a
/// single scene.
inline Dataset build_dataset(const ScenarioParams& p, int n_train, int n_test,
                             std::uint64_t master_seed) {
    RSD_REQUIRE(n_train >= 1, data, "dataset needs at least one training scene");
    RSD_REQUIRE(n_test >= 0, parameter, "negative test-scene count");
    p.validate();
    Dataset ds;
    ds.params = p;
    ds.height = p.height;
    ds.width = p.width;

    auto scene_seed = [&](int i) { return derive_seed(master_seed, 0x5343u + std::uint64_t(i)); };

    {
        std::vector<Field> fine_fields, cond_fields;
        fine_fields.reserve(std::size_t(n_train));
        cond_fields.reserve(std::size_t(n_train));
        for (int i = 0; i < n_train; ++i) {
            GridScene s = synth_scene(p, scene_seed(i));
            cond_fields.push_back(upsample_conditioning(s.coarse, p.height, p.width));
            fine_fields.push_back(std::move(s.fine));
        }
        ds.fine_norm = fit_norm(fine_fields, {"Z"});
        ds.cond_norm = fit_norm(cond_fields);
    }

    for (int i = 0; i < n_train + n_test; ++i) {
        GridScene s = synth_scene(p, scene_seed(i));
        if (i == 0) {
            ds.cond_specs = s.coarse.channels();
            ds.out_specs = s.fine.channels();
        }
        SceneBundle b = preprocess_scene(s, ds.cond_norm, ds.fine_norm);
        (i < n_train ? ds.train : ds.test).push_back(std::move(b));
    }
    ds.c_cond = int(ds.cond_norm.entries.size());
    ds.c_out = int(ds.fine_norm.entries.size());
    for (const NormEntry& e : ds.cond_norm.entries) ds.cond_names.push_back(e.name);
    for (const NormEntry& e : ds.fine_norm.entries) ds.out_names.push_back(e.name);
    for (std::size_t c = 0; c < ds.cond_specs.size(); ++c) {
        ds.cond_specs[c].norm_mean = ds.cond_norm.entries[c].mean;
        ds.cond_specs[c].norm_std = ds.cond_norm.entries[c].std;
    }
    for (std::size_t c = 0; c < ds.out_specs.size(); ++c) {
        ds.out_specs[c].norm_mean = ds.fine_norm.entries[c].mean;
        ds.out_specs[c].norm_std = ds.fine_norm.entries[c].std;
    }
    return ds;
}

/// Copy a [C, cs, cs] window at (oy, ox) out of a [C, H, W] plane stack.
inline void copy_crop(const float* src, int C, int H, int W, int oy, int ox, int cs, float* dst) {
    RSD_REQUIRE(cs >= 1 && oy >= 0 && ox >= 0 && oy + cs <= H && ox + cs <= W, dimension,
                "crop window leaves the plane");
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < cs; ++i)
            std::memcpy(dst + (std::size_t(c) * cs + i) * cs,
                        src + (std::size_t(c) * H + oy + i) * W + ox,
                        std::size_t(cs) * sizeof(float));
}

}  // namespace resdiff
