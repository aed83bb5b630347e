#pragma once

#include <complex>
#include <vector>

namespace clicktok {

// Thin wrappers over FFTW with an internal per-size plan cache. Calls are
// serialized by a mutex, so they are safe from any thread.

// forward real-to-complex, n/2+1 bins
std::vector<std::complex<double>> rfft(const double * x, int n);

// inverse complex-to-real, normalized by 1/n; expects n/2+1 bins
void irfft(const std::complex<double> * spec, int n, double * out);

} // namespace clicktok
