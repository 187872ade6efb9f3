#pragma once

// Minimal RIFF/WAVE reader and writer. Accepts mono PCM16 or float32;
// anything else is rejected with a message naming the file.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "fea.hpp"

namespace vcstar {

struct Waveform {
    int sample_rate = 0;
    std::vector<float> samples;  // mono, [-1, 1]
    double duration_seconds() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

inline Waveform wav_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto fail = [&](const std::string& why) { throw IoError(path + ": " + why); };
    if (bytes.size() < 44 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
        fail("not a RIFF/WAVE file");
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    size_t data_off = 0, data_len = 0;
    size_t pos = 12;
    bool have_fmt = false;
    while (pos + 8 <= bytes.size()) {
        std::string id = bytes.substr(pos, 4);
        uint32_t len = detail::get_u32le(p + pos + 4);
        size_t body = pos + 8;
        if (body + len > bytes.size()) fail("truncated chunk '" + id + "'");
        if (id == "fmt ") {
            if (len < 16) fail("fmt chunk too short");
            format = static_cast<uint16_t>(p[body] | (p[body + 1] << 8));
            channels = static_cast<uint16_t>(p[body + 2] | (p[body + 3] << 8));
            rate = detail::get_u32le(p + body + 4);
            bits = static_cast<uint16_t>(p[body + 14] | (p[body + 15] << 8));
            have_fmt = true;
        } else if (id == "data") {
            data_off = body;
            data_len = len;
        }
        pos = body + len + (len & 1);
    }
    if (!have_fmt || data_off == 0) fail("missing fmt or data chunk");
    if (channels != 1)
        fail("expected mono audio, got " + std::to_string(channels) + " channels");
    Waveform w;
    w.sample_rate = static_cast<int>(rate);
    if (format == 1 && bits == 16) {
        size_t n = data_len / 2;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            int16_t s = static_cast<int16_t>(p[data_off + 2 * i] | (p[data_off + 2 * i + 1] << 8));
            w.samples[i] = static_cast<float>(s) / 32768.0f;
        }
    } else if (format == 3 && bits == 32) {
        size_t n = data_len / 4;
        w.samples.resize(n);
        std::memcpy(w.samples.data(), bytes.data() + data_off, n * sizeof(float));
        for (float v : w.samples)
            if (!std::isfinite(v)) fail("non-finite sample in float data");
    } else {
        fail("unsupported format (want PCM16 or float32), format tag " + std::to_string(format) +
             " with " + std::to_string(bits) + " bits");
    }
    return w;
}

inline void wav_write(const std::string& path, const Waveform& w) {
    if (w.sample_rate <= 0) throw ConfigError("wav_write: sample rate must be positive");
    std::string out;
    uint32_t data_len = static_cast<uint32_t>(w.samples.size() * 2);
    out += "RIFF";
    detail::put_u32le(out, 36 + data_len);
    out += "WAVEfmt ";
    detail::put_u32le(out, 16);
    out.push_back(1); out.push_back(0);                       // PCM
    out.push_back(1); out.push_back(0);                       // mono
    detail::put_u32le(out, static_cast<uint32_t>(w.sample_rate));
    detail::put_u32le(out, static_cast<uint32_t>(w.sample_rate) * 2);  // byte rate
    out.push_back(2); out.push_back(0);                       // block align
    out.push_back(16); out.push_back(0);                      // bits
    out += "data";
    detail::put_u32le(out, data_len);
    for (float v : w.samples) {
        float c = std::min(1.0f, std::max(-1.0f, v));
        int s = static_cast<int>(std::lrint(c * 32767.0f));
        out.push_back(static_cast<char>(s & 0xff));
        out.push_back(static_cast<char>((s >> 8) & 0xff));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write: " + path);
}

}  // namespace vcstar
