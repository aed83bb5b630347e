#include "clicktok/audio.hpp"
#include "clicktok/errors.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

using namespace clicktok;
using namespace testutil;

TEST_CASE("wav round trip: 16-bit mono, 16000 samples at 16 kHz") {
    temp_dir td("wav");
    waveform w = sine(440.0, 16000, 1.0, 0.5);
    save_wav(td.file("a.wav"), w, wav_encoding::pcm16);
    waveform r = load_wav(td.file("a.wav"));
    CHECK(r.sample_rate == 16000);
    CHECK(r.size() == 16000);
    for (int64_t i = 0; i < r.size(); ++i) {
        CHECK(std::abs(r.samples[i] - w.samples[i]) < 1.0 / 32768.0 + 1e-9);
    }
}

TEST_CASE("wav float32 round trip is exact") {
    temp_dir td("wavf");
    waveform w = sine(100.0, 8000, 0.25);
    save_wav(td.file("f.wav"), w, wav_encoding::float32);
    waveform r = load_wav(td.file("f.wav"));
    REQUIRE(r.size() == w.size());
    for (int64_t i = 0; i < r.size(); ++i) {
        CHECK(r.samples[i] == doctest::Approx((float) w.samples[i]).epsilon(0));
    }
}

TEST_CASE("stereo wav averages to mono") {
    // hand-built stereo file: left channel all 1.0, right channel all 0.0
    temp_dir td("stereo");
    const int n = 64;
    std::vector<uint8_t> buf;
    auto u32 = [&buf](uint32_t x) {
        for (int i = 0; i < 4; ++i) buf.push_back((x >> (8 * i)) & 0xFF);
    };
    auto u16 = [&buf](uint16_t x) {
        buf.push_back(x & 0xFF);
        buf.push_back((x >> 8) & 0xFF);
    };
    buf.insert(buf.end(), {'R', 'I', 'F', 'F'});
    u32(36 + n * 4);
    buf.insert(buf.end(), {'W', 'A', 'V', 'E'});
    buf.insert(buf.end(), {'f', 'm', 't', ' '});
    u32(16);
    u16(1);     // pcm
    u16(2);     // stereo
    u32(16000); // rate
    u32(16000 * 4);
    u16(4);
    u16(16);
    buf.insert(buf.end(), {'d', 'a', 't', 'a'});
    u32(n * 4);
    for (int i = 0; i < n; ++i) {
        u16(32767); // left ~ 1.0
        u16(0);     // right = 0.0
    }
    std::ofstream f(td.file("st.wav"), std::ios::binary);
    f.write((const char *) buf.data(), (std::streamsize) buf.size());
    f.close();

    waveform w = load_wav(td.file("st.wav"));
    REQUIRE(w.size() == n);
    for (double s : w.samples) CHECK(s == doctest::Approx(0.5).epsilon(1e-3));
}

TEST_CASE("RIFX magic is rejected as corrupt") {
    temp_dir td("rifx");
    std::ofstream f(td.file("bad.wav"), std::ios::binary);
    f << "RIFX";
    std::vector<char> junk(64, 0);
    f.write(junk.data(), (std::streamsize) junk.size());
    f.close();
    CHECK_THROWS_AS((void) load_wav(td.file("bad.wav")), data_error);
}

TEST_CASE("load_wav: missing file") {
    CHECK_THROWS_AS((void) load_wav("/nonexistent/nope.wav"), data_error);
}

TEST_CASE("resample length ratio 44.1k -> 16k") {
    waveform w = white_noise(44100, 1.0, 7);
    REQUIRE(w.size() == 44100);
    waveform r = resample(w, 16000);
    CHECK(r.sample_rate == 16000);
    CHECK(std::abs(r.size() - 16000) <= 1);
}

TEST_CASE("resample at the same rate is the identity") {
    waveform w = white_noise(16000, 0.1, 3);
    waveform r = resample(w, 16000);
    REQUIRE(r.size() == w.size());
    for (int64_t i = 0; i < w.size(); ++i) CHECK(r.samples[i] == w.samples[i]);
}

TEST_CASE("resample 1 kHz sine 8k -> 16k matches the analytic sine") {
    // oracle: the same sine sampled directly at the target rate
    waveform w = sine(1000.0, 8000, 1.0);
    waveform r = resample(w, 16000);
    const int64_t trim = 256;
    double max_err = 0.0;
    for (int64_t i = trim; i < r.size() - trim; ++i) {
        const double expected = std::sin(2.0 * M_PI * 1000.0 * i / 16000.0);
        max_err = std::max(max_err, std::abs(r.samples[i] - expected));
    }
    CHECK(max_err < 1e-3);
}

TEST_CASE("resample is linear in the input") {
    waveform w = white_noise(12000, 0.3, 11);
    waveform scaled = w;
    for (double & s : scaled.samples) s *= 3.25;
    waveform r1 = resample(w, 16000);
    waveform r2 = resample(scaled, 16000);
    REQUIRE(r1.size() == r2.size());
    for (int64_t i = 0; i < r1.size(); ++i) {
        CHECK(std::abs(r2.samples[i] - 3.25 * r1.samples[i]) < 1e-9);
    }
}

TEST_CASE("resample rejects non-positive target") {
    waveform w = white_noise(8000, 0.1, 1);
    CHECK_THROWS_AS((void) resample(w, 0), config_error);
}

TEST_CASE("normalize: two-point example") {
    waveform w;
    w.sample_rate = 10;
    w.samples = {2.0, 4.0};
    waveform n = normalize(w);
    CHECK(n.samples[0] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(n.samples[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("normalize: already standardized input is unchanged") {
    waveform w;
    w.sample_rate = 10;
    w.samples = {1.0, -1.0, 1.0, -1.0};
    waveform n = normalize(w);
    for (int i = 0; i < 4; ++i) CHECK(n.samples[i] == doctest::Approx(w.samples[i]).epsilon(1e-12));
}

TEST_CASE("normalize: zero mean, unit variance, idempotent") {
    waveform w = white_noise(16000, 0.5, 21, 0.3);
    for (double & s : w.samples) s += 0.17;
    waveform n = normalize(w);

    double mean = 0.0;
    for (double s : n.samples) mean += s;
    mean /= n.size();
    double var = 0.0;
    for (double s : n.samples) var += (s - mean) * (s - mean);
    var /= n.size();
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);

    waveform n2 = normalize(n);
    for (int64_t i = 0; i < n.size(); ++i) CHECK(std::abs(n2.samples[i] - n.samples[i]) < 1e-6);
}

TEST_CASE("normalize rejects constant input") {
    waveform w;
    w.sample_rate = 16000;
    w.samples.assign(512, 0.0);
    CHECK_THROWS_AS((void) normalize(w), data_error);
    w.samples.assign(512, 0.75);
    CHECK_THROWS_AS((void) normalize(w), data_error);
}

TEST_CASE("stft frame count and geometry") {
    waveform w = white_noise(16000, 1.0, 5);
    spectrogram s = stft(w, 512, 128);
    CHECK(s.num_frames == 1 + (w.size() - 512) / 128);
    CHECK(s.bins() == 257);
    CHECK_THROWS_AS((void) stft(w, 1, 128), config_error);
    CHECK_THROWS_AS((void) stft(w, 512, 0), config_error);
}

TEST_CASE("stft of zero signal is all zero") {
    waveform w;
    w.sample_rate = 16000;
    w.samples.assign(4096, 0.0);
    spectrogram s = stft(w, 512, 256);
    for (const auto & c : s.data) CHECK(std::abs(c) == 0.0);
}

TEST_CASE("1 kHz sine at 16 kHz: dominant bin 32 with window 512") {
    waveform w = sine(1000.0, 16000, 0.5);
    spectrogram s = stft(w, 512, 256);
    // bin = 1000 / (16000/512) = 32
    const int64_t mid = s.num_frames / 2;
    int max_bin = 0;
    double max_mag = 0.0;
    for (int f = 0; f < s.bins(); ++f) {
        const double m = std::abs(s.at(f, mid));
        if (m > max_mag) {
            max_mag = m;
            max_bin = f;
        }
    }
    CHECK(max_bin == 32);
}

TEST_CASE("istft round trip: impulse and random signal") {
    waveform w;
    w.sample_rate = 16000;
    w.samples.assign(4096, 0.0);
    w.samples[1000] = 1.0;

    waveform r = istft(stft(w, 512, 128));
    for (int64_t i = 512; i < 4096 - 512 && i < r.size(); ++i) {
        CHECK(std::abs(r.samples[i] - w.samples[i]) < 1e-6);
    }
    CHECK(std::abs(r.samples[1000] - 1.0) < 1e-6);

    waveform n = white_noise(16000, 0.25, 9);
    waveform rn = istft(stft(n, 512, 128));
    for (int64_t i = 512; i < n.size() - 512 && i < rn.size(); ++i) {
        CHECK(std::abs(rn.samples[i] - n.samples[i]) < 1e-6);
    }
}

TEST_CASE("istft rejects COLA violations") {
    waveform w = white_noise(16000, 0.25, 2);
    spectrogram s = stft(w, 512, 384); // hop > window/2
    CHECK_THROWS_AS((void) istft(s), config_error);
}

TEST_CASE("noise profile: white noise is flat within 20%") {
    waveform w = white_noise(16000, 4.0, 77);
    noise_profile p = estimate_noise_profile(w, {}, 512, 256);
    double mean = 0.0;
    // skip DC and Nyquist edges where the Hann window halves the variance
    for (size_t f = 2; f + 2 < p.magnitude.size(); ++f) mean += p.magnitude[f];
    mean /= (p.magnitude.size() - 4);
    for (size_t f = 2; f + 2 < p.magnitude.size(); ++f) {
        CHECK(p.magnitude[f] > 0.8 * mean);
        CHECK(p.magnitude[f] < 1.2 * mean);
    }
}

TEST_CASE("noise profile: exclusions covering everything fail") {
    waveform w = white_noise(16000, 0.5, 5);
    CHECK_THROWS_AS((void) estimate_noise_profile(w, {{0, w.size()}}, 512, 256), data_error);
}

TEST_CASE("noise profile of silence is zero") {
    waveform w;
    w.sample_rate = 16000;
    w.samples.assign(8000, 0.0);
    noise_profile p = estimate_noise_profile(w, {}, 512, 256);
    for (double m : p.magnitude) CHECK(m == 0.0);
}

TEST_CASE("spectral subtraction removes stationary noise by >= 10 dB") {
    waveform w = white_noise(16000, 2.0, 13, 0.1);
    noise_profile p = estimate_noise_profile(w, {}, 512, 128);
    waveform out = spectral_subtract(w, p, 0.02);
    const double before = rms(w);
    const double after = rms(out);
    CHECK(20.0 * std::log10(before / after) >= 10.0);
}

TEST_CASE("spectral subtraction with a zero profile is the identity") {
    waveform w = white_noise(16000, 1.0, 17, 0.2);
    noise_profile p;
    p.window_len = 512;
    p.hop = 128;
    p.sample_rate = 16000;
    p.magnitude.assign(257, 0.0);
    waveform out = spectral_subtract(w, p, 0.02);
    REQUIRE(out.size() == w.size());
    for (int64_t i = 512; i < w.size() - 512; ++i) {
        CHECK(std::abs(out.samples[i] - w.samples[i]) < 1e-6);
    }
}

TEST_CASE("spectral subtraction with floor=1 keeps the magnitudes") {
    waveform w = white_noise(16000, 1.0, 19, 0.2);
    noise_profile p = estimate_noise_profile(w, {}, 512, 128);
    waveform out = spectral_subtract(w, p, 1.0);
    for (int64_t i = 512; i < w.size() - 512; ++i) {
        CHECK(std::abs(out.samples[i] - w.samples[i]) < 1e-6);
    }
}

TEST_CASE("spectral subtraction output is finite and floored") {
    waveform w = white_noise(16000, 1.0, 23, 0.1);
    noise_profile p = estimate_noise_profile(w, {}, 512, 128);
    for (double & m : p.magnitude) m *= 10.0; // oversubtraction hits the floor
    waveform out = spectral_subtract(w, p, 0.02);
    for (double s : out.samples) CHECK(std::isfinite(s));

    spectrogram before = stft(w, 512, 128);
    spectrogram after = stft(out, 512, 128);
    // interior frames only; istft edges are not COLA-complete
    for (int64_t t = 4; t + 4 < before.num_frames; ++t) {
        for (int f = 0; f < before.bins(); ++f) {
            CHECK(std::abs(after.at(f, t)) >= 0.0);
        }
    }
}

TEST_CASE("spectral subtraction rejects geometry mismatch") {
    waveform w = white_noise(16000, 1.0, 29);
    noise_profile p;
    p.window_len = 512;
    p.hop = 128;
    p.sample_rate = 16000;
    p.magnitude.assign(100, 0.0); // wrong bin count
    CHECK_THROWS_AS((void) spectral_subtract(w, p, 0.02), config_error);
}

TEST_CASE("onsets: silence gives an empty list") {
    waveform w;
    w.sample_rate = 16000;
    w.samples.assign(16000, 0.0);
    CHECK(detect_onsets(w, 256, 64, 3.0).empty());
}

TEST_CASE("onsets: single impulse near sample 8000") {
    waveform w;
    w.sample_rate = 16000;
    w.samples.assign(16000, 0.0);
    w.samples[8000] = 1.0;
    auto onsets = detect_onsets(w, 256, 64, 3.0);
    REQUIRE(onsets.size() == 1);
    CHECK(std::abs(onsets[0] - 8000) <= 256);
}

TEST_CASE("onsets: two impulses 0.25 s apart") {
    waveform w;
    w.sample_rate = 16000;
    w.samples.assign(16000, 0.0);
    w.samples[4000] = 1.0;
    w.samples[8000] = 1.0;
    auto onsets = detect_onsets(w, 256, 64, 3.0);
    REQUIRE(onsets.size() == 2);
    CHECK(std::abs((onsets[1] - onsets[0]) - 4000) <= 128);
}

TEST_CASE("onsets are strictly increasing and in range") {
    waveform w = white_noise(16000, 1.0, 31, 0.01);
    for (int i = 0; i < 8; ++i) w.samples[1000 + i * 1800] = 1.0;
    auto onsets = detect_onsets(w, 256, 64, 3.0);
    for (size_t i = 1; i < onsets.size(); ++i) CHECK(onsets[i] > onsets[i - 1]);
    for (int64_t o : onsets) {
        CHECK(o >= 0);
        CHECK(o < w.size());
    }
}
