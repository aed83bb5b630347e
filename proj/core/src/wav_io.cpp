#include "clicktok/audio.hpp"
#include "clicktok/errors.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <vector>

namespace clicktok {

namespace {

uint32_t rd_u32(const uint8_t * p) {
    return (uint32_t) p[0] | ((uint32_t) p[1] << 8) | ((uint32_t) p[2] << 16) | ((uint32_t) p[3] << 24);
}

uint16_t rd_u16(const uint8_t * p) {
    return (uint16_t) (p[0] | (p[1] << 8));
}

void wr_u32(std::vector<uint8_t> & v, uint32_t x) {
    v.push_back(x & 0xFF);
    v.push_back((x >> 8) & 0xFF);
    v.push_back((x >> 16) & 0xFF);
    v.push_back((x >> 24) & 0xFF);
}

void wr_u16(std::vector<uint8_t> & v, uint16_t x) {
    v.push_back(x & 0xFF);
    v.push_back((x >> 8) & 0xFF);
}

} // namespace

waveform load_wav(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("load_wav: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 12) throw data_error("load_wav: truncated header in " + path);
    if (std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
        throw data_error("load_wav: corrupt header (not RIFF/WAVE) in " + path);
    }

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    bool have_fmt = false;
    const uint8_t * data_ptr = nullptr;
    uint32_t data_len = 0;

    size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const uint8_t * ch = buf.data() + pos;
        uint32_t chunk_len = rd_u32(ch + 4);
        const uint8_t * body = ch + 8;
        if (pos + 8 + chunk_len > buf.size()) {
            // tolerate a final data chunk whose declared size overruns by
            // clamping to what is actually present
            if (std::memcmp(ch, "data", 4) == 0) {
                chunk_len = (uint32_t) (buf.size() - pos - 8);
            } else {
                throw data_error("load_wav: truncated chunk in " + path);
            }
        }
        if (std::memcmp(ch, "fmt ", 4) == 0) {
            if (chunk_len < 16) throw data_error("load_wav: short fmt chunk in " + path);
            format = rd_u16(body);
            channels = rd_u16(body + 2);
            rate = rd_u32(body + 4);
            bits = rd_u16(body + 14);
            have_fmt = true;
        } else if (std::memcmp(ch, "data", 4) == 0) {
            data_ptr = body;
            data_len = chunk_len;
        }
        pos += 8 + chunk_len + (chunk_len & 1); // chunks are word-aligned
    }

    if (!have_fmt || data_ptr == nullptr) throw data_error("load_wav: missing fmt/data chunk in " + path);
    if (channels == 0 || rate == 0) throw data_error("load_wav: corrupt fmt chunk in " + path);

    bool pcm16 = (format == 1 && bits == 16);
    bool f32 = (format == 3 && bits == 32);
    if (!pcm16 && !f32) {
        throw data_error("load_wav: unsupported encoding (format=" + std::to_string(format) +
                         ", bits=" + std::to_string(bits) + ") in " + path);
    }

    int bytes_per_sample = bits / 8;
    int64_t total = data_len / (bytes_per_sample * channels);

    waveform w;
    w.sample_rate = (int) rate;
    w.samples.resize(total);
    const double inv_channels = 1.0 / channels;
    for (int64_t i = 0; i < total; ++i) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
            const uint8_t * s = data_ptr + (i * channels + c) * bytes_per_sample;
            if (pcm16) {
                int16_t v = (int16_t) rd_u16(s);
                acc += v / 32768.0;
            } else {
                uint32_t u = rd_u32(s);
                float v;
                std::memcpy(&v, &u, 4);
                acc += v;
            }
        }
        w.samples[i] = acc * inv_channels;
    }
    return w;
}

void save_wav(const std::string & path, const waveform & w, wav_encoding enc) {
    if (w.sample_rate <= 0) throw data_error("save_wav: invalid sample rate");
    const int bytes = enc == wav_encoding::pcm16 ? 2 : 4;
    const uint16_t format = enc == wav_encoding::pcm16 ? 1 : 3;
    const uint32_t data_len = (uint32_t) (w.samples.size() * bytes);

    std::vector<uint8_t> out;
    out.reserve(44 + data_len);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    wr_u32(out, 36 + data_len);
    out.insert(out.end(), {'W', 'A', 'V', 'E'});
    out.insert(out.end(), {'f', 'm', 't', ' '});
    wr_u32(out, 16);
    wr_u16(out, format);
    wr_u16(out, 1); // mono
    wr_u32(out, (uint32_t) w.sample_rate);
    wr_u32(out, (uint32_t) (w.sample_rate * bytes));
    wr_u16(out, (uint16_t) bytes);
    wr_u16(out, (uint16_t) (bytes * 8));
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    wr_u32(out, data_len);

    for (double x : w.samples) {
        if (enc == wav_encoding::pcm16) {
            double v = x * 32768.0;
            if (v > 32767.0) v = 32767.0;
            if (v < -32768.0) v = -32768.0;
            int16_t s = (int16_t) std::lrint(v);
            wr_u16(out, (uint16_t) s);
        } else {
            float v = (float) x;
            uint32_t u;
            std::memcpy(&u, &v, 4);
            wr_u32(out, u);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("save_wav: cannot open " + path + " for writing");
    f.write((const char *) out.data(), (std::streamsize) out.size());
    if (!f) throw data_error("save_wav: write failed for " + path);
}

} // namespace clicktok
