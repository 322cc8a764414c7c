#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <string>
#include <vector>

#include "resdiff/core.hpp"
#include "resdiff/fft.hpp"
#include "resdiff/field.hpp"

namespace resdiff {

/// Energy-form CRPS with the 1/(2K^2) convention; equals the CDF-integral
/// definition for the empirical forecast distribution. K=1 reduces to |x-obs|.
inline double crps_ensemble(const double* members, int k, double obs) {
    RSD_REQUIRE(k >= 1, contract, "crps needs at least one member");
    if (k == 1) return std::abs(members[0] - obs);
    std::vector<double> x(members, members + k);
    std::sort(x.begin(), x.end());
    double t1 = 0.0, pair = 0.0;
    for (int i = 0; i < k; ++i) {
        t1 += std::abs(x[i] - obs);
        pair += double(2 * (i + 1) - k - 1) * x[i];  // = sum_{i<j} (x_j - x_i)
    }
    return t1 / k - pair / (double(k) * k);
}

inline double crps_ensemble(const std::vector<double>& members, double obs) {
    return crps_ensemble(members.data(), int(members.size()), obs);
}

struct DeterministicScores {
    std::vector<double> mae, rmse;  // per channel
};

inline DeterministicScores deterministic_scores(const Field& pred, const Field& truth) {
    RSD_REQUIRE(pred.nchan() == truth.nchan() && pred.height() == truth.height() &&
                pred.width() == truth.width(), contract, "score geometry mismatch");
    DeterministicScores s;
    for (int c = 0; c < pred.nchan(); ++c) {
        const double* p = pred.chan(c);
        const double* t = truth.chan(c);
        double ae = 0.0, se = 0.0;
        for (std::size_t i = 0; i < pred.pixels(); ++i) {
            double d = p[i] - t[i];
            ae += std::abs(d);
            se += d * d;
        }
        s.mae.push_back(ae / double(pred.pixels()));
        s.rmse.push_back(std::sqrt(se / double(pred.pixels())));
    }
    return s;
}

namespace detail {

/// Regularized upper incomplete gamma Q(a, x): series + continued fraction.
inline double igamma_q(double a, double x) {
    if (x < 0 || a <= 0) return 1.0;
    if (x == 0) return 1.0;
    double lg = std::lgamma(a);
    if (x < a + 1.0) {  // lower series, Q = 1 - P
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-15) break;
        }
        return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
    }
    double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, hh = d;  // Lentz
    for (int i = 1; i <= 500; ++i) {
        double an = -double(i) * (double(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        double del = d * c;
        hh *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - lg) * hh;
}

}  // namespace detail

/// Survival function of the chi-square distribution with k degrees of freedom.
inline double chi2_sf(double x, int dof) { return detail::igamma_q(0.5 * dof, 0.5 * x); }

/// Rank-histogram accumulator: K+1 bins, ties broken uniformly with a seeded
/// stream so results are reproducible.
class RankHistogram {
public:
    explicit RankHistogram(int k, std::uint64_t tie_seed = 0)
        : k_(k), counts_(k + 1, 0), rng_(tie_seed) {
        RSD_REQUIRE(k >= 1, contract, "rank histogram needs K >= 1");
    }

    void add(const double* members, double obs) {
        int below = 0, ties = 0;
        for (int i = 0; i < k_; ++i) {
            if (members[i] < obs) ++below;
            else if (members[i] == obs) ++ties;
        }
        int rank = below + (ties > 0 ? int(rng_.below(std::uint64_t(ties) + 1)) : 0);
        ++counts_[rank];
    }

    const std::vector<long long>& counts() const { return counts_; }
    long long total() const { return std::accumulate(counts_.begin(), counts_.end(), 0ll); }

    double chi2() const {
        double n = double(total());
        RSD_REQUIRE(n > 0, contract, "empty rank histogram");
        double e = n / double(k_ + 1), s = 0.0;
        for (long long c : counts_) {
            double d = double(c) - e;
            s += d * d / e;
        }
        return s;
    }
    /// p-value of the flatness chi-square test (dof = K).
    double p_value() const { return chi2_sf(chi2(), k_); }

private:
    int k_;
    std::vector<long long> counts_;
    Rng rng_;
};

/// Counts of observation ranks over all pixels of aligned ensembles.
inline std::vector<long long> rank_histogram(const std::vector<EnsembleForecast>& ensembles,
                                             const std::vector<Field>& observations,
                                             std::uint64_t tie_seed = 0) {
    RSD_REQUIRE(!ensembles.empty() && ensembles.size() == observations.size(), contract,
                "rank_histogram needs aligned ensembles and observations");
    int k = ensembles[0].size();
    RankHistogram h(k, tie_seed);
    std::vector<double> mem(k);
    for (std::size_t e = 0; e < ensembles.size(); ++e) {
        const EnsembleForecast& ens = ensembles[e];
        RSD_REQUIRE(ens.size() == k, contract, "inconsistent ensemble size");
        const Field& obs = observations[e];
        for (int c = 0; c < obs.nchan(); ++c)
            for (std::size_t i = 0; i < obs.pixels(); ++i) {
                for (int m = 0; m < k; ++m) mem[m] = ens.members[m].chan(c)[i];
                h.add(mem.data(), obs.chan(c)[i]);
            }
    }
    return h.counts();
}

struct SpreadErrorResult {
    std::vector<double> spread, rmse;  // per bin
    std::vector<long long> count;
    double slope = 0.0;
};

/// Binned spread vs error with the sqrt((K+1)/K) spread inflation; slope from
/// a count-weighted least-squares line through the bin points.
class SpreadErrorAccumulator {
public:
    explicit SpreadErrorAccumulator(int k) : k_(k) {
        RSD_REQUIRE(k >= 2, contract, "spread-error needs K >= 2");
    }

    void add(const double* members, double obs) {
        double m = 0.0;
        for (int i = 0; i < k_; ++i) m += members[i];
        m /= k_;
        double v = 0.0;
        for (int i = 0; i < k_; ++i) {
            double d = members[i] - m;
            v += d * d;
        }
        v /= (k_ - 1);
        double spread = std::sqrt(v * (double(k_) + 1.0) / double(k_));
        double err = obs - m;
        pairs_.push_back({spread, err * err});
    }

    SpreadErrorResult result(int n_bins = 20) const {
        RSD_REQUIRE(!pairs_.empty(), contract, "no spread-error samples");
        std::vector<std::pair<double, double>> p = pairs_;
        std::sort(p.begin(), p.end());
        SpreadErrorResult r;
        std::size_t n = p.size();
        for (int b = 0; b < n_bins; ++b) {
            std::size_t lo = n * std::size_t(b) / n_bins, hi = n * std::size_t(b + 1) / n_bins;
            if (hi <= lo) continue;
            double ms = 0.0, me = 0.0;
            for (std::size_t i = lo; i < hi; ++i) {
                ms += p[i].first;
                me += p[i].second;
            }
            r.spread.push_back(ms / double(hi - lo));
            r.rmse.push_back(std::sqrt(me / double(hi - lo)));
            r.count.push_back(static_cast<long long>(hi - lo));
        }
        double wsum = 0.0, xm = 0.0, ym = 0.0;
        for (std::size_t i = 0; i < r.spread.size(); ++i) {
            wsum += double(r.count[i]);
            xm += double(r.count[i]) * r.spread[i];
            ym += double(r.count[i]) * r.rmse[i];
        }
        xm /= wsum;
        ym /= wsum;
        double sxx = 0.0, sxy = 0.0;
        for (std::size_t i = 0; i < r.spread.size(); ++i) {
            double wx = r.spread[i] - xm;
            sxx += double(r.count[i]) * wx * wx;
            sxy += double(r.count[i]) * wx * (r.rmse[i] - ym);
        }
        r.slope = sxx > 0 ? sxy / sxx : 0.0;
        return r;
    }

private:
    int k_;
    std::vector<std::pair<double, double>> pairs_;
};

inline SpreadErrorResult spread_error(const std::vector<EnsembleForecast>& ensembles,
                                      const std::vector<Field>& observations, int n_bins = 20) {
    RSD_REQUIRE(!ensembles.empty() && ensembles.size() == observations.size(), contract,
                "spread_error needs aligned inputs");
    int k = ensembles[0].size();
    SpreadErrorAccumulator acc(k);
    std::vector<double> mem(k);
    for (std::size_t e = 0; e < ensembles.size(); ++e) {
        const Field& obs = observations[e];
        for (int c = 0; c < obs.nchan(); ++c)
            for (std::size_t i = 0; i < obs.pixels(); ++i) {
                for (int m = 0; m < k; ++m) mem[m] = ensembles[e].members[m].chan(c)[i];
                acc.add(mem.data(), obs.chan(c)[i]);
            }
    }
    return acc.result(n_bins);
}

struct SpectrumResult {
    std::vector<double> wavenumber;   // bin centers (integer radial wavenumber)
    std::vector<double> power;        // per-bin total; sum over bins k>=1 equals spatial variance
    std::vector<double> mean_power;   // azimuthal average (power / mode count): flat for white noise
    std::vector<double> mode_count;   // Fourier modes landing in each bin
    double slope = 0.0;               // fitted over [fit_lo, fit_hi] on the total-power column
    int fit_lo = 0, fit_hi = 0;
};

namespace detail {
inline void fit_loglog_slope(SpectrumResult& r, int lo, int hi, bool on_mean = false) {
    r.fit_lo = lo;
    r.fit_hi = hi;
    const std::vector<double>& col = on_mean ? r.mean_power : r.power;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (int k = lo; k <= hi && k < int(col.size()); ++k) {
        if (col[k] <= 0) continue;
        double x = std::log(double(k)), y = std::log(col[k]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++n;
    }
    r.slope = n >= 2 ? (n * sxy - sx * sy) / (n * sxx - sx * sx) : 0.0;
}
}  // namespace detail

/// Isotropic power spectrum: 2-D DFT power binned by rounded |k|; bin 0 holds
/// the squared mean, bins k>=1 sum to the spatial variance.
inline SpectrumResult radial_psd(const Field& f, int channel, int fit_lo = 2, int fit_hi = 0) {
    RSD_REQUIRE(f.height() == f.width(), dimension, "radial_psd requires a square field");
    RSD_REQUIRE(channel >= 0 && channel < f.nchan(), contract, "bad channel index");
    const int n = f.height();
    const int wc = n / 2 + 1;
    std::vector<std::complex<double>> spec(std::size_t(n) * wc);
    fft2_r2c(f.chan(channel), spec.data(), n, n);
    int nbins = int(std::round(std::sqrt(2.0) * (n / 2))) + 1;
    SpectrumResult r;
    r.wavenumber.resize(nbins);
    r.power.assign(nbins, 0.0);
    r.mean_power.assign(nbins, 0.0);
    r.mode_count.assign(nbins, 0.0);
    for (int b = 0; b < nbins; ++b) r.wavenumber[b] = b;
    const double norm = 1.0 / (double(n) * n * double(n) * n);
    for (int kr = 0; kr < n; ++kr) {
        int ky = kr <= n / 2 ? kr : kr - n;
        for (int kc = 0; kc < wc; ++kc) {
            double mult = (kc == 0 || (n % 2 == 0 && kc == n / 2)) ? 1.0 : 2.0;
            double kabs = std::sqrt(double(kc) * kc + double(ky) * ky);
            int bin = int(std::lround(kabs));
            double p = std::norm(spec[std::size_t(kr) * wc + kc]) * norm * mult;
            if (bin < nbins) {
                r.power[bin] += p;
                r.mode_count[bin] += mult;
            }
        }
    }
    for (int b = 0; b < nbins; ++b)
        if (r.mode_count[b] > 0) r.mean_power[b] = r.power[b] / r.mode_count[b];
    if (fit_hi <= 0) fit_hi = n / 2 - 1;
    detail::fit_loglog_slope(r, fit_lo, fit_hi);
    return r;
}

/// Kinetic-energy spectrum 0.5*(psd_u + psd_v).
inline SpectrumResult ke_spectrum(const Field& u, const Field& v, int fit_lo = 2, int fit_hi = 0) {
    RSD_REQUIRE(u.height() == v.height() && u.width() == v.width(), contract,
                "ke_spectrum geometry mismatch");
    SpectrumResult a = radial_psd(u, 0, fit_lo, fit_hi);
    SpectrumResult b = radial_psd(v, 0, fit_lo, fit_hi);
    for (std::size_t i = 0; i < a.power.size(); ++i) {
        a.power[i] = 0.5 * (a.power[i] + b.power[i]);
        a.mean_power[i] = 0.5 * (a.mean_power[i] + b.mean_power[i]);
    }
    detail::fit_loglog_slope(a, a.fit_lo, a.fit_hi);
    return a;
}

struct PdfHistogram {
    std::vector<double> edges;        // bins+1 edges
    std::vector<double> density;      // sum(density * width) = 1
    std::vector<double> log_density;  // where density > 0, else NaN
};

inline PdfHistogram pdf_histogram(const std::vector<double>& values, int bins,
                                  bool log_scale = false, double lo = 0.0, double hi = 0.0) {
    RSD_REQUIRE(!values.empty(), contract, "pdf_histogram on empty data");
    RSD_REQUIRE(bins >= 2, parameter, "pdf_histogram needs >= 2 bins");
    if (lo >= hi) {
        lo = *std::min_element(values.begin(), values.end());
        hi = *std::max_element(values.begin(), values.end());
        if (hi <= lo) hi = lo + 1.0;
    }
    PdfHistogram h;
    h.edges.resize(bins + 1);
    for (int b = 0; b <= bins; ++b) h.edges[b] = lo + (hi - lo) * b / bins;
    std::vector<long long> counts(bins, 0);
    long long total = 0;
    for (double v : values) {
        if (v < lo || v > hi) continue;
        int b = std::min(bins - 1, int((v - lo) / (hi - lo) * bins));
        ++counts[b];
        ++total;
    }
    RSD_REQUIRE(total > 0, data, "pdf_histogram: no values in range");
    double width = (hi - lo) / bins;
    h.density.resize(bins);
    for (int b = 0; b < bins; ++b) h.density[b] = double(counts[b]) / (double(total) * width);
    if (log_scale) {
        h.log_density.resize(bins);
        for (int b = 0; b < bins; ++b)
            h.log_density[b] = h.density[b] > 0 ? std::log(h.density[b])
                                                : std::numeric_limits<double>::quiet_NaN();
    }
    return h;
}

/// Table-shaped skill summary over aligned cases.
struct SkillReport {
    std::vector<std::string> channel;
    std::vector<double> crps, mae_ensemble_mean, rmse_ensemble_mean, mae_baseline, rmse_baseline;
    std::vector<double> crps_halfwidth, mae_halfwidth;  // 95% over cases
    std::size_t cases = 0;
    std::size_t pixels_per_case = 0;
    // per-case channel means, for bootstrap resampling: [case][channel]
    std::vector<std::vector<double>> case_crps, case_mae_mean, case_mae_reg, case_mae_baseline;
};

/// Aggregate CRPS / ensemble-mean MAE / baseline MAE per channel. `reg_preds`
/// (optional) adds a deterministic-regression column to the per-case tables.
inline SkillReport skill_report(const std::vector<EnsembleForecast>& ensembles,
                                const std::vector<Field>& truths,
                                const std::vector<Field>& baseline_preds,
                                const std::vector<Field>* reg_preds = nullptr) {
    RSD_REQUIRE(!ensembles.empty(), contract, "skill_report: no cases");
    RSD_REQUIRE(ensembles.size() == truths.size() && truths.size() == baseline_preds.size(),
                contract, "skill_report: misaligned cases");
    const int nc = truths[0].nchan();
    const int k = ensembles[0].size();
    SkillReport rep;
    rep.cases = ensembles.size();
    rep.pixels_per_case = truths[0].pixels();
    for (int c = 0; c < nc; ++c) rep.channel.push_back(truths[0].channels()[c].name);
    rep.case_crps.assign(rep.cases, std::vector<double>(nc, 0.0));
    rep.case_mae_mean.assign(rep.cases, std::vector<double>(nc, 0.0));
    rep.case_mae_baseline.assign(rep.cases, std::vector<double>(nc, 0.0));
    if (reg_preds) rep.case_mae_reg.assign(rep.cases, std::vector<double>(nc, 0.0));

    std::vector<double> mem(k);
    std::vector<double> se_mean(nc, 0.0), se_base(nc, 0.0);
    for (std::size_t e = 0; e < ensembles.size(); ++e) {
        const EnsembleForecast& ens = ensembles[e];
        RSD_REQUIRE(ens.size() == k, contract, "skill_report: inconsistent K");
        const Field& tr = truths[e];
        Field mean = ens.member_mean();
        for (int c = 0; c < nc; ++c) {
            double crps_sum = 0.0, ae_mean = 0.0, ae_base = 0.0, ae_reg = 0.0;
            double se_m = 0.0, se_b = 0.0;
            const double* t = tr.chan(c);
            const double* m = mean.chan(c);
            const double* b = baseline_preds[e].chan(c);
            const double* rg = reg_preds ? (*reg_preds)[e].chan(c) : nullptr;
            for (std::size_t i = 0; i < tr.pixels(); ++i) {
                for (int j = 0; j < k; ++j) mem[j] = ens.members[j].chan(c)[i];
                crps_sum += crps_ensemble(mem.data(), k, t[i]);
                double dm = m[i] - t[i], db = b[i] - t[i];
                ae_mean += std::abs(dm);
                ae_base += std::abs(db);
                se_m += dm * dm;
                se_b += db * db;
                if (rg) ae_reg += std::abs(rg[i] - t[i]);
            }
            double np = double(tr.pixels());
            rep.case_crps[e][c] = crps_sum / np;
            rep.case_mae_mean[e][c] = ae_mean / np;
            rep.case_mae_baseline[e][c] = ae_base / np;
            if (rg) rep.case_mae_reg[e][c] = ae_reg / np;
            se_mean[c] += se_m;
            se_base[c] += se_b;
        }
    }
    auto mean_and_halfwidth = [&](const std::vector<std::vector<double>>& per_case, int c,
                                  double& mean, double& hw) {
        double s = 0.0;
        for (std::size_t e = 0; e < per_case.size(); ++e) s += per_case[e][c];
        mean = s / double(per_case.size());
        double v = 0.0;
        for (std::size_t e = 0; e < per_case.size(); ++e) {
            double d = per_case[e][c] - mean;
            v += d * d;
        }
        std::size_t n = per_case.size();
        hw = n > 1 ? 1.96 * std::sqrt(v / double(n - 1) / double(n)) : 0.0;
    };
    for (int c = 0; c < nc; ++c) {
        double m, hw;
        mean_and_halfwidth(rep.case_crps, c, m, hw);
        rep.crps.push_back(m);
        rep.crps_halfwidth.push_back(hw);
        mean_and_halfwidth(rep.case_mae_mean, c, m, hw);
        rep.mae_ensemble_mean.push_back(m);
        rep.mae_halfwidth.push_back(hw);
        mean_and_halfwidth(rep.case_mae_baseline, c, m, hw);
        rep.mae_baseline.push_back(m);
        double npx = double(rep.cases) * double(rep.pixels_per_case);
        rep.rmse_ensemble_mean.push_back(std::sqrt(se_mean[c] / npx));
        rep.rmse_baseline.push_back(std::sqrt(se_base[c] / npx));
    }
    return rep;
}

/// One-sided bootstrap over cases: fraction of resampled means of
/// (lhs - rhs) that land above zero. Small values support lhs <= rhs.
inline double bootstrap_exceedance(const std::vector<double>& lhs, const std::vector<double>& rhs,
                                   int replicates, std::uint64_t seed) {
    RSD_REQUIRE(lhs.size() == rhs.size() && !lhs.empty(), contract, "bootstrap: misaligned");
    Rng rng(seed);
    std::size_t n = lhs.size();
    int above = 0;
    for (int r = 0; r < replicates; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t j = rng.below(n);
            s += lhs[j] - rhs[j];
        }
        if (s / double(n) > 0.0) ++above;
    }
    return double(above) / double(replicates);
}

}  // namespace resdiff
