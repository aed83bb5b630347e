#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace clicktok {

// Mono sample buffer. Samples are dimensionless amplitudes, nominally in
// [-1, 1]; sample_rate is Hz.
struct waveform {
    std::vector<double> samples;
    int sample_rate = 0;

    int64_t size() const { return (int64_t) samples.size(); }
    double duration_s() const { return sample_rate > 0 ? (double) size() / sample_rate : 0.0; }
};

// Complex STFT frames, frame-major: bin f of frame m lives at [m*bins() + f].
struct spectrogram {
    std::vector<std::complex<double>> data;
    int window_len = 0;
    int hop = 0;
    int sample_rate = 0;
    int64_t num_frames = 0;

    int bins() const { return window_len / 2 + 1; }
    std::complex<double> & at(int bin, int64_t frame) { return data[frame * bins() + bin]; }
    const std::complex<double> & at(int bin, int64_t frame) const { return data[frame * bins() + bin]; }
};

// Mean magnitude spectrum of noise-only frames, matched to one STFT geometry.
struct noise_profile {
    std::vector<double> magnitude;
    int window_len = 0;
    int hop = 0;
    int sample_rate = 0;
};

enum class wav_encoding { pcm16, float32 };

// PCM WAV (16-bit int LE or 32-bit float). Multichannel input is averaged
// to mono.
waveform load_wav(const std::string & path);
void save_wav(const std::string & path, const waveform & w, wav_encoding enc = wav_encoding::float32);

// Band-limited (windowed-sinc) rate conversion. Same-rate input is returned
// unchanged.
waveform resample(const waveform & w, int target_hz);

// Zero mean, unit (population) variance. Constant input is an error.
waveform normalize(const waveform & w);

// Hann-windowed STFT; frames = 1 + floor((len - window_len)/hop).
spectrogram stft(const waveform & w, int window_len, int hop);

// Weighted overlap-add inverse; requires hop <= window_len/2 (COLA).
waveform istft(const spectrogram & s);

// Mean |STFT| over frames lying wholly outside every [start,end) sample range.
noise_profile estimate_noise_profile(const waveform & w,
                                     const std::vector<std::pair<int64_t, int64_t>> & exclusion,
                                     int window_len, int hop);

// Per frame: magnitude -> max(|X| - profile, floor_frac*|X|), phase kept.
// Output is trimmed/padded back to the input length.
waveform spectral_subtract(const waveform & w, const noise_profile & p, double floor_frac);

// Half-wave-rectified spectral flux peaks above threshold x rolling median.
// Returns ascending sample indices; may be empty.
std::vector<int64_t> detect_onsets(const waveform & w, int frame, int hop, double threshold);

} // namespace clicktok
