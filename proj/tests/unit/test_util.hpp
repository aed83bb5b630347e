#pragma once

#include "clicktok/audio.hpp"
#include "clicktok/rng.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testutil {

inline clicktok::waveform sine(double freq_hz, int sr, double seconds, double amp = 1.0) {
    clicktok::waveform w;
    w.sample_rate = sr;
    const int64_t n = (int64_t) std::llround(seconds * sr);
    w.samples.resize(n);
    for (int64_t i = 0; i < n; ++i) {
        w.samples[i] = amp * std::sin(2.0 * M_PI * freq_hz * i / sr);
    }
    return w;
}

inline clicktok::waveform white_noise(int sr, double seconds, uint64_t seed, double amp = 1.0) {
    clicktok::waveform w;
    w.sample_rate = sr;
    w.samples.resize((int64_t) std::llround(seconds * sr));
    clicktok::rng r(seed);
    for (double & s : w.samples) s = amp * r.uniform(-1.0, 1.0);
    return w;
}

inline double rms(const clicktok::waveform & w) {
    double acc = 0.0;
    for (double s : w.samples) acc += s * s;
    return std::sqrt(acc / std::max<int64_t>(1, w.size()));
}

// unique scratch directory under the system temp dir, removed on destruction
struct temp_dir {
    std::filesystem::path path;

    explicit temp_dir(const std::string & tag) {
        path = std::filesystem::temp_directory_path() /
               (tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~temp_dir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
    std::string file(const std::string & name) const { return (path / name).string(); }

  private:
    static int & counter() {
        static int c = 0;
        return c;
    }
};

} // namespace testutil
