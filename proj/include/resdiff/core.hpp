#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace resdiff {

/// Error taxonomy; `category()` strings are stable and machine-parseable.
enum class errc { dimension, parameter, contract, data, state, format, io, config };

class error : public std::runtime_error {
public:
    error(errc c, const std::string& msg) : std::runtime_error(msg), code_(c) {}
    errc code() const { return code_; }
    const char* category() const {
        switch (code_) {
            case errc::dimension: return "dimension";
            case errc::parameter: return "parameter";
            case errc::contract: return "contract";
            case errc::data: return "data";
            case errc::state: return "state";
            case errc::format: return "format";
            case errc::io: return "io";
            case errc::config: return "config";
        }
        return "unknown";
    }
private:
    errc code_;
};

#define RSD_REQUIRE(cond, kind, msg) \
    do { if (!(cond)) throw ::resdiff::error(::resdiff::errc::kind, msg); } while (0)

/// splitmix64: seed scrambler used to derive independent substreams.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Derive a child seed from (master, tag); tags keep substreams disjoint.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
    return splitmix64(master ^ splitmix64(tag + 0x632be59bd9b4e019ull));
}

/// Deterministic RNG. Gaussians use plain Box-Muller (two engine draws per
/// normal, no cached state) so streams are reproducible across refactors.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    double uniform() {  // [0, 1)
        return double(eng_() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t below(std::uint64_t n) {  // unbiased-enough for n << 2^64
        return eng_() % n;
    }

    double normal() {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Bulk Gaussian fill; pairs share the Box-Muller radius (fast path).
    template <class T>
    void normal_fill(T* out, std::size_t n) {
        std::size_t i = 0;
        for (; i + 1 < n; i += 2) {
            double u1 = 0.0;
            do { u1 = uniform(); } while (u1 <= 0.0);
            double u2 = uniform();
            double r = std::sqrt(-2.0 * std::log(u1));
            double t = 6.283185307179586476925286766559 * u2;
            out[i] = T(r * std::cos(t));
            out[i + 1] = T(r * std::sin(t));
        }
        if (i < n) out[i] = T(normal());
    }

private:
    std::mt19937_64 eng_;
};

/// FNV-1a 64-bit; used for output-hash reporting and determinism checks.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Pairwise (cascade) sum: order-stable, threading-independent reductions.
inline double pairwise_sum(const double* x, std::size_t n) {
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[i];
        return s;
    }
    std::size_t h = n / 2;
    return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

inline double pairwise_sum(const std::vector<double>& x) { return pairwise_sum(x.data(), x.size()); }

}  // namespace resdiff
