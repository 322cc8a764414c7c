#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "resdiff/core.hpp"

namespace resdiff {

enum class ChannelRole { state, conditioning, synthesized };

struct ChannelSpec {
    std::string name;
    std::string units;
    ChannelRole role = ChannelRole::state;
    double norm_mean = 0.0;  // fitted on the training split
    double norm_std = 1.0;
};

/// C x H x W gridded array, row-major, channels outermost. Grid spacing is
/// abstract (pixels); values must stay finite.
class Field {
public:
    Field() = default;
    Field(std::vector<ChannelSpec> channels, int h, int w, double spacing = 1.0)
        : channels_(std::move(channels)), h_(h), w_(w), spacing_(spacing),
          data_(std::size_t(channels_.size()) * h * w, 0.0) {
        RSD_REQUIRE(h > 0 && w > 0, dimension, "field geometry must be positive");
    }

    static Field like(const Field& f) { return Field(f.channels_, f.h_, f.w_, f.spacing_); }

    int nchan() const { return int(channels_.size()); }
    int height() const { return h_; }
    int width() const { return w_; }
    double spacing() const { return spacing_; }
    std::size_t pixels() const { return std::size_t(h_) * w_; }
    std::size_t size() const { return data_.size(); }

    const std::vector<ChannelSpec>& channels() const { return channels_; }
    std::vector<ChannelSpec>& channels() { return channels_; }

    int channel_index(const std::string& name) const {
        for (int c = 0; c < nchan(); ++c)
            if (channels_[c].name == name) return c;
        return -1;
    }
    bool has_channel(const std::string& name) const { return channel_index(name) >= 0; }

    double* chan(int c) { return data_.data() + std::size_t(c) * pixels(); }
    const double* chan(int c) const { return data_.data() + std::size_t(c) * pixels(); }
    double* chan(const std::string& name) {
        int c = channel_index(name);
        RSD_REQUIRE(c >= 0, contract, "no channel named " + name);
        return chan(c);
    }
    const double* chan(const std::string& name) const {
        int c = channel_index(name);
        RSD_REQUIRE(c >= 0, contract, "no channel named " + name);
        return chan(c);
    }

    double& at(int c, int i, int j) { return data_[(std::size_t(c) * h_ + i) * w_ + j]; }
    double at(int c, int i, int j) const { return data_[(std::size_t(c) * h_ + i) * w_ + j]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    void require_finite() const {
        for (double v : data_)
            RSD_REQUIRE(std::isfinite(v), data, "non-finite value in field");
    }

private:
    std::vector<ChannelSpec> channels_;
    int h_ = 0, w_ = 0;
    double spacing_ = 1.0;
    std::vector<double> data_;
};

struct ChannelStats {
    std::vector<double> mean, variance, min, max;
    std::size_t pixel_count = 0;
};

/// K sampled fine fields for one conditioning input.
struct EnsembleForecast {
    std::vector<Field> members;
    Field conditioning;
    std::vector<std::uint64_t> member_seeds;

    int size() const { return int(members.size()); }

    Field member_mean() const {
        RSD_REQUIRE(!members.empty(), contract, "empty ensemble");
        Field m = Field::like(members[0]);
        for (const Field& f : members)
            for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] += f.data()[i];
        for (double& v : m.data()) v /= double(members.size());
        return m;
    }
};

/// Block-average coarsening; output spacing scales by the factor.
inline Field pool_average(const Field& f, int factor) {
    RSD_REQUIRE(factor >= 1, parameter, "pool factor must be >= 1");
    RSD_REQUIRE(f.height() % factor == 0 && f.width() % factor == 0, dimension,
                "field dimensions not divisible by pool factor");
    int oh = f.height() / factor, ow = f.width() / factor;
    Field out(f.channels(), oh, ow, f.spacing() * factor);
    const double inv = 1.0 / (double(factor) * factor);
    for (int c = 0; c < f.nchan(); ++c) {
        const double* src = f.chan(c);
        double* dst = out.chan(c);
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) {
                double s = 0.0;
                for (int di = 0; di < factor; ++di)
                    for (int dj = 0; dj < factor; ++dj)
                        s += src[std::size_t(i * factor + di) * f.width() + (j * factor + dj)];
                dst[std::size_t(i) * ow + j] = s * inv;
            }
    }
    return out;
}

/// Corner-aligned bilinear resampling; exact at source nodes.
inline Field interp_bilinear(const Field& f, int th, int tw) {
    RSD_REQUIRE(th >= 2 && tw >= 2, dimension, "bilinear target must be at least 2x2");
    Field out(f.channels(), th, tw, f.spacing() * double(f.height() - 1) / double(th - 1));
    int sh = f.height(), sw = f.width();
    std::vector<int> r0(th), c0(tw);
    std::vector<double> rf(th), cf(tw);
    for (int i = 0; i < th; ++i) {
        if (sh == 1) { r0[i] = 0; rf[i] = 0.0; continue; }
        long long num = (long long)i * (sh - 1);
        r0[i] = int(num / (th - 1));
        rf[i] = double(num % (th - 1)) / double(th - 1);
        if (r0[i] >= sh - 1) { r0[i] = sh - 2; rf[i] = 1.0; }
    }
    for (int j = 0; j < tw; ++j) {
        if (sw == 1) { c0[j] = 0; cf[j] = 0.0; continue; }
        long long num = (long long)j * (sw - 1);
        c0[j] = int(num / (tw - 1));
        cf[j] = double(num % (tw - 1)) / double(tw - 1);
        if (c0[j] >= sw - 1) { c0[j] = sw - 2; cf[j] = 1.0; }
    }
    for (int c = 0; c < f.nchan(); ++c) {
        const double* src = f.chan(c);
        double* dst = out.chan(c);
        for (int i = 0; i < th; ++i) {
            int i0 = r0[i], i1 = (sh == 1) ? 0 : i0 + 1;
            double fy = rf[i];
            for (int j = 0; j < tw; ++j) {
                int j0 = c0[j], j1 = (sw == 1) ? 0 : j0 + 1;
                double fx = cf[j];
                double v00 = src[std::size_t(i0) * sw + j0], v01 = src[std::size_t(i0) * sw + j1];
                double v10 = src[std::size_t(i1) * sw + j0], v11 = src[std::size_t(i1) * sw + j1];
                dst[std::size_t(i) * tw + j] =
                    (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
            }
        }
    }
    return out;
}

/// Per-channel moments; population variance (divide by pixel count).
inline ChannelStats field_stats(const Field& f) {
    RSD_REQUIRE(f.size() > 0, contract, "field_stats on empty field");
    ChannelStats st;
    st.pixel_count = f.pixels();
    for (int c = 0; c < f.nchan(); ++c) {
        const double* p = f.chan(c);
        std::size_t n = f.pixels();
        double s = 0.0, lo = p[0], hi = p[0];
        for (std::size_t i = 0; i < n; ++i) {
            s += p[i];
            lo = std::min(lo, p[i]);
            hi = std::max(hi, p[i]);
        }
        double m = s / double(n), v = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = p[i] - m;
            v += d * d;
        }
        st.mean.push_back(m);
        st.variance.push_back(v / double(n));
        st.min.push_back(lo);
        st.max.push_back(hi);
    }
    return st;
}

namespace detail {
inline std::vector<double> gauss_kernel(double sigma) {
    int r = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * r + 1);
    double s = 0.0;
    for (int i = -r; i <= r; ++i) s += (k[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma)));
    for (double& v : k) v /= s;
    return k;
}

/// Separable Gaussian blur on one plane. Periodic wrap or edge clamp.
inline void blur_plane(const double* src, double* dst, int h, int w, double sigma, bool periodic) {
    if (sigma <= 0.0) {
        std::copy(src, src + std::size_t(h) * w, dst);
        return;
    }
    auto k = gauss_kernel(sigma);
    int r = int(k.size() / 2);
    std::vector<double> tmp(std::size_t(h) * w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double s = 0.0;
            for (int d = -r; d <= r; ++d) {
                int jj = j + d;
                if (periodic) jj = ((jj % w) + w) % w;
                else jj = std::clamp(jj, 0, w - 1);
                s += k[d + r] * src[std::size_t(i) * w + jj];
            }
            tmp[std::size_t(i) * w + j] = s;
        }
    for (int j = 0; j < w; ++j)
        for (int i = 0; i < h; ++i) {
            double s = 0.0;
            for (int d = -r; d <= r; ++d) {
                int ii = i + d;
                if (periodic) ii = ((ii % h) + h) % h;
                else ii = std::clamp(ii, 0, h - 1);
                s += k[d + r] * tmp[std::size_t(ii) * w + j];
            }
            dst[std::size_t(i) * w + j] = s;
        }
}
}  // namespace detail

inline Field gaussian_blur(const Field& f, double sigma, bool periodic = true) {
    Field out = Field::like(f);
    for (int c = 0; c < f.nchan(); ++c)
        detail::blur_plane(f.chan(c), out.chan(c), f.height(), f.width(), sigma, periodic);
    return out;
}

}  // namespace resdiff
