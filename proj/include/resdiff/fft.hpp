#pragma once

#include <complex>
#include <cstring>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "resdiff/core.hpp"

namespace resdiff {

namespace detail {
inline std::mutex& fftw_plan_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

/// Forward 2-D real-to-complex DFT. `out` has h x (w/2+1) entries, unnormalized.
inline void fft2_r2c(const double* in, std::complex<double>* out, int h, int w) {
    RSD_REQUIRE(h > 0 && w > 0, dimension, "fft geometry must be positive");
    std::vector<double> buf(in, in + std::size_t(h) * w);
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        plan = fftw_plan_dft_r2c_2d(h, w, buf.data(), reinterpret_cast<fftw_complex*>(out),
                                    FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    fftw_destroy_plan(plan);
}

/// Inverse 2-D complex-to-real DFT from a half spectrum; normalized by 1/(h*w).
inline void ifft2_c2r(const std::complex<double>* in, double* out, int h, int w) {
    RSD_REQUIRE(h > 0 && w > 0, dimension, "fft geometry must be positive");
    std::size_t nc = std::size_t(h) * (w / 2 + 1);
    std::vector<std::complex<double>> buf(in, in + nc);  // c2r destroys its input
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        plan = fftw_plan_dft_c2r_2d(h, w, reinterpret_cast<fftw_complex*>(buf.data()), out,
                                    FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        fftw_destroy_plan(plan);
    }
    double inv = 1.0 / (double(h) * w);
    for (std::size_t i = 0; i < std::size_t(h) * w; ++i) out[i] *= inv;
}

}  // namespace resdiff
