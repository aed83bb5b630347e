#include "fft_util.hpp"

#include "clicktok/errors.hpp"

#include <fftw3.h>

#include <cstring>
#include <map>
#include <mutex>

namespace clicktok {

namespace {

struct plan_pair {
    fftw_plan fwd = nullptr;
    fftw_plan inv = nullptr;
    double * real_buf = nullptr;
    fftw_complex * cplx_buf = nullptr;
    int n = 0;
};

std::mutex g_fft_mu;
std::map<int, plan_pair> g_plans;

plan_pair & get_plans(int n) {
    auto it = g_plans.find(n);
    if (it != g_plans.end()) return it->second;

    plan_pair p;
    p.n = n;
    p.real_buf = fftw_alloc_real(n);
    p.cplx_buf = fftw_alloc_complex(n / 2 + 1);
    p.fwd = fftw_plan_dft_r2c_1d(n, p.real_buf, p.cplx_buf, FFTW_ESTIMATE);
    p.inv = fftw_plan_dft_c2r_1d(n, p.cplx_buf, p.real_buf, FFTW_ESTIMATE);
    if (!p.fwd || !p.inv) {
        throw numeric_error("fftw plan creation failed for n=" + std::to_string(n));
    }
    return g_plans.emplace(n, p).first->second;
}

} // namespace

std::vector<std::complex<double>> rfft(const double * x, int n) {
    if (n < 2) throw numeric_error("rfft: transform length must be >= 2");
    std::lock_guard<std::mutex> lk(g_fft_mu);
    plan_pair & p = get_plans(n);
    std::memcpy(p.real_buf, x, sizeof(double) * n);
    fftw_execute(p.fwd);
    std::vector<std::complex<double>> out(n / 2 + 1);
    for (int i = 0; i < n / 2 + 1; ++i) {
        out[i] = {p.cplx_buf[i][0], p.cplx_buf[i][1]};
    }
    return out;
}

void irfft(const std::complex<double> * spec, int n, double * out) {
    if (n < 2) throw numeric_error("irfft: transform length must be >= 2");
    std::lock_guard<std::mutex> lk(g_fft_mu);
    plan_pair & p = get_plans(n);
    for (int i = 0; i < n / 2 + 1; ++i) {
        p.cplx_buf[i][0] = spec[i].real();
        p.cplx_buf[i][1] = spec[i].imag();
    }
    fftw_execute(p.inv);
    const double scale = 1.0 / n;
    for (int i = 0; i < n; ++i) out[i] = p.real_buf[i] * scale;
}

} // namespace clicktok
