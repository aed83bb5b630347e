#include "clicktok/audio.hpp"

#include "clicktok/errors.hpp"
#include "fft_util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace clicktok {

namespace {

double sinc(double x) {
    if (std::abs(x) < 1e-12) return 1.0;
    double px = M_PI * x;
    return std::sin(px) / px;
}

// periodic Hann; sums to a constant under hop = len/2^k overlap
std::vector<double> hann_window(int len) {
    std::vector<double> w(len);
    for (int i = 0; i < len; ++i) {
        w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / len));
    }
    return w;
}

} // namespace

waveform resample(const waveform & w, int target_hz) {
    if (target_hz <= 0) throw config_error("resample: target rate must be positive");
    if (w.sample_rate <= 0) throw data_error("resample: input has no sample rate");
    if (target_hz == w.sample_rate) return w;

    const int64_t n_in = w.size();
    const int64_t n_out = (n_in * target_hz + w.sample_rate / 2) / w.sample_rate;

    // kernel half-width in input samples; widened when downsampling so the
    // transition band stays below the output Nyquist
    const double rate_ratio = (double) target_hz / w.sample_rate;
    const double cutoff = 0.5 * std::min(1.0, rate_ratio); // cycles per input sample
    const int base_taps = 48;
    const int half_width = (int) std::ceil(base_taps * std::max(1.0, 1.0 / rate_ratio));

    waveform out;
    out.sample_rate = target_hz;
    out.samples.resize(n_out);

    const double * x = w.samples.data();
    for (int64_t i = 0; i < n_out; ++i) {
        // center position in input samples, kept rational to avoid drift
        const int64_t num = i * w.sample_rate;
        const int64_t base = num / target_hz;
        const double frac = (double) (num % target_hz) / target_hz;

        double acc = 0.0;
        for (int64_t k = base - half_width + 1; k <= base + half_width; ++k) {
            if (k < 0 || k >= n_in) continue;
            const double u = (double) (k - base) - frac;
            const double win_arg = u / half_width;
            if (win_arg <= -1.0 || win_arg >= 1.0) continue;
            const double win = 0.5 * (1.0 + std::cos(M_PI * win_arg));
            acc += x[k] * 2.0 * cutoff * sinc(2.0 * cutoff * u) * win;
        }
        out.samples[i] = acc;
    }
    return out;
}

waveform normalize(const waveform & w) {
    const int64_t n = w.size();
    if (n < 2) throw data_error("normalize: need at least 2 samples");

    double mean = 0.0;
    for (double x : w.samples) mean += x;
    mean /= n;

    double var = 0.0;
    for (double x : w.samples) var += (x - mean) * (x - mean);
    var /= n; // population variance

    if (var < 1e-15 * std::max(1.0, mean * mean)) {
        throw data_error("normalize: degenerate signal (zero variance)");
    }

    const double inv_sd = 1.0 / std::sqrt(var);
    waveform out;
    out.sample_rate = w.sample_rate;
    out.samples.resize(n);
    for (int64_t i = 0; i < n; ++i) out.samples[i] = (w.samples[i] - mean) * inv_sd;
    return out;
}

spectrogram stft(const waveform & w, int window_len, int hop) {
    if (window_len < 2) throw config_error("stft: window shorter than 2");
    if (hop <= 0) throw config_error("stft: hop must be positive");
    if (window_len > w.size()) throw data_error("stft: window longer than signal");

    const int64_t m = 1 + (w.size() - window_len) / hop;
    const std::vector<double> win = hann_window(window_len);

    spectrogram s;
    s.window_len = window_len;
    s.hop = hop;
    s.sample_rate = w.sample_rate;
    s.num_frames = m;
    s.data.resize(m * (int64_t) s.bins());

    std::vector<double> frame(window_len);
    for (int64_t t = 0; t < m; ++t) {
        const double * src = w.samples.data() + t * hop;
        for (int i = 0; i < window_len; ++i) frame[i] = src[i] * win[i];
        auto spec = rfft(frame.data(), window_len);
        std::copy(spec.begin(), spec.end(), s.data.begin() + t * s.bins());
    }
    return s;
}

waveform istft(const spectrogram & s) {
    if (s.window_len < 2 || s.hop <= 0) throw config_error("istft: bad geometry");
    if (s.hop > s.window_len / 2) throw config_error("istft: COLA violated (hop > window/2)");

    const int64_t n = s.num_frames > 0 ? (s.num_frames - 1) * s.hop + s.window_len : 0;
    const std::vector<double> win = hann_window(s.window_len);

    waveform out;
    out.sample_rate = s.sample_rate;
    out.samples.assign(n, 0.0);
    std::vector<double> wsum(n, 0.0);

    std::vector<double> frame(s.window_len);
    for (int64_t t = 0; t < s.num_frames; ++t) {
        irfft(s.data.data() + t * s.bins(), s.window_len, frame.data());
        double * dst = out.samples.data() + t * s.hop;
        double * den = wsum.data() + t * s.hop;
        for (int i = 0; i < s.window_len; ++i) {
            dst[i] += frame[i] * win[i];
            den[i] += win[i] * win[i];
        }
    }
    for (int64_t i = 0; i < n; ++i) {
        if (wsum[i] > 1e-12) out.samples[i] /= wsum[i];
    }
    return out;
}

noise_profile estimate_noise_profile(const waveform & w,
                                     const std::vector<std::pair<int64_t, int64_t>> & exclusion,
                                     int window_len, int hop) {
    spectrogram s = stft(w, window_len, hop);
    const int bins = s.bins();

    noise_profile p;
    p.window_len = window_len;
    p.hop = hop;
    p.sample_rate = w.sample_rate;
    p.magnitude.assign(bins, 0.0);

    int64_t used = 0;
    for (int64_t t = 0; t < s.num_frames; ++t) {
        const int64_t lo = t * hop;
        const int64_t hi = lo + window_len;
        bool excluded = false;
        for (auto & [a, b] : exclusion) {
            if (lo < b && a < hi) { // frame intersects an excluded range
                excluded = true;
                break;
            }
        }
        if (excluded) continue;
        for (int f = 0; f < bins; ++f) p.magnitude[f] += std::abs(s.at(f, t));
        ++used;
    }
    if (used == 0) throw data_error("estimate_noise_profile: no usable frames outside exclusions");
    for (double & m : p.magnitude) m /= used;
    return p;
}

waveform spectral_subtract(const waveform & w, const noise_profile & p, double floor_frac) {
    if (floor_frac < 0.0 || floor_frac > 1.0) throw config_error("spectral_subtract: floor must be in [0,1]");
    if ((int) p.magnitude.size() != p.window_len / 2 + 1) {
        throw config_error("spectral_subtract: profile geometry mismatch");
    }
    if (p.sample_rate != w.sample_rate) {
        throw config_error("spectral_subtract: profile sample rate mismatch");
    }

    spectrogram s = stft(w, p.window_len, p.hop);
    const int bins = s.bins();
    for (int64_t t = 0; t < s.num_frames; ++t) {
        for (int f = 0; f < bins; ++f) {
            std::complex<double> & c = s.at(f, t);
            const double mag = std::abs(c);
            const double target = std::max(mag - p.magnitude[f], floor_frac * mag);
            if (mag > 1e-300) {
                c *= target / mag;
            } else {
                c = 0.0;
            }
        }
    }
    waveform y = istft(s);
    y.samples.resize(w.size(), 0.0); // trim/pad to the input length
    return y;
}

std::vector<int64_t> detect_onsets(const waveform & w, int frame, int hop, double threshold) {
    if (frame < 32) throw config_error("detect_onsets: frame must be >= 32");
    if (hop <= 0) throw config_error("detect_onsets: hop must be positive");
    if (w.size() < frame) return {};

    spectrogram s = stft(w, frame, hop);
    const int bins = s.bins();
    const int64_t m = s.num_frames;

    // half-wave-rectified spectral flux
    std::vector<double> flux(m, 0.0);
    for (int64_t t = 1; t < m; ++t) {
        double acc = 0.0;
        for (int f = 0; f < bins; ++f) {
            const double d = std::abs(s.at(f, t)) - std::abs(s.at(f, t - 1));
            if (d > 0.0) acc += d;
        }
        flux[t] = acc;
    }

    // rolling median, centered window of 9
    const int64_t half = 4;
    std::vector<double> med(m, 0.0);
    std::vector<double> buf;
    for (int64_t t = 0; t < m; ++t) {
        const int64_t lo = std::max<int64_t>(0, t - half);
        const int64_t hi = std::min(m - 1, t + half);
        buf.assign(flux.begin() + lo, flux.begin() + hi + 1);
        std::nth_element(buf.begin(), buf.begin() + buf.size() / 2, buf.end());
        med[t] = buf[buf.size() / 2];
    }

    std::vector<int64_t> onsets;
    int64_t last = -2;
    for (int64_t t = 1; t < m; ++t) {
        if (flux[t] <= 1e-12) continue;
        if (flux[t] <= threshold * med[t]) continue;
        const double prev = flux[t - 1];
        const double next = t + 1 < m ? flux[t + 1] : 0.0;
        if (!(flux[t] >= prev && flux[t] > next)) continue; // plateau resolves to its last frame
        if (t - last < 2) continue;                         // refractory gap of >= 1 frame
        last = t;
        int64_t pos = t * hop + frame / 2;
        if (pos >= w.size()) pos = w.size() - 1;
        onsets.push_back(pos);
    }
    return onsets;
}

} // namespace clicktok
