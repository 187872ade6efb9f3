#pragma once

// Bundled synthetic dataset: four pseudo-speakers, each a pulse-train
// excitation shaped by speaker-specific formants and pitch statistics.
// Deterministic given the seed, so the whole acceptance path is
// self-contained with no external corpus.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "dsp.hpp"
#include "wav.hpp"

namespace vcstar {

struct ToySpeakerProfile {
    std::string name;
    double mean_f0;          // Hz
    double logf0_swing;      // vibrato depth in nats
    double formants[3];      // center frequencies, Hz
    double bandwidths[3];    // Hz
    double tilt;             // spectral tilt strength
};

inline std::vector<ToySpeakerProfile> toy_speaker_profiles() {
    return {
        {"spk_a", 110.0, 0.12, {420.0, 1100.0, 2400.0}, {90.0, 140.0, 220.0}, 1.2},
        {"spk_b", 150.0, 0.16, {600.0, 1500.0, 2700.0}, {110.0, 160.0, 240.0}, 0.8},
        {"spk_c", 200.0, 0.10, {350.0, 1900.0, 3100.0}, {80.0, 170.0, 260.0}, 1.6},
        {"spk_d", 260.0, 0.14, {700.0, 1300.0, 3500.0}, {120.0, 150.0, 280.0}, 0.5},
    };
}

namespace detail {

inline std::vector<float> toy_utterance(const ToySpeakerProfile& sp, double seconds, int sr,
                                        Pcg32& rng) {
    int n = static_cast<int>(seconds * sr);
    std::vector<float> excitation(static_cast<size_t>(n), 0.0f);

    // voiced stretches separated by short unvoiced gaps; low per-frame
    // entropy keeps the feature sequences on a smooth low-dimensional
    // manifold per speaker
    double t = 0.0;
    double phase = rng.next_double() * 2.0 * M_PI;
    double wobble_rate = 0.4 + 0.4 * rng.next_double();  // Hz
    int pos = 0;
    while (pos < n) {
        int voiced_len = static_cast<int>((0.5 + 0.5 * rng.next_double()) * sr);
        int gap_len = static_cast<int>((0.06 + 0.06 * rng.next_double()) * sr);
        int end = std::min(n, pos + voiced_len);
        double cursor = pos;
        while (cursor < end) {
            t = cursor / sr;
            double lf0 = std::log(sp.mean_f0) +
                         sp.logf0_swing * std::sin(2.0 * M_PI * wobble_rate * t + phase) +
                         0.005 * (rng.next_double() - 0.5);
            double f0 = std::exp(lf0);
            int idx = static_cast<int>(cursor);
            if (idx >= 0 && idx < n)
                excitation[static_cast<size_t>(idx)] = 1.0f + 0.02f * static_cast<float>(rng.next_double() - 0.5);
            cursor += sr / f0;
        }
        pos = end;
        for (int i = pos; i < std::min(n, pos + gap_len); ++i)
            excitation[static_cast<size_t>(i)] = 0.015f * static_cast<float>(rng.next_double() - 0.5);
        pos += gap_len;
    }
    for (auto& v : excitation) v += 0.0005f * static_cast<float>(rng.next_double() - 0.5);

    // shape with slowly wandering formants
    const int fft = 1024, hop = 110;
    auto window = hann_window(fft);
    Spectrogram spgm = stft(excitation, fft, hop, window);
    int bins = spgm.bins();
    double drift_phase = rng.next_double() * 2.0 * M_PI;
    for (int f = 0; f < spgm.frames; ++f) {
        double ft = static_cast<double>(f) * hop / sr;
        for (int b = 0; b < bins; ++b) {
            double freq = 0.5 * sr * b / (bins - 1);
            double env = 1e-3;
            for (int k = 0; k < 3; ++k) {
                double center = sp.formants[k] * (1.0 + 0.015 * std::sin(2.0 * M_PI * 0.25 * ft + drift_phase + k));
                double d = (freq - center) / sp.bandwidths[k];
                env += 1.0 / (1.0 + d * d);
            }
            env *= std::exp(-sp.tilt * freq / 4000.0);
            auto& v = spgm.values[static_cast<size_t>(f) * bins + b];
            v *= static_cast<float>(env);
        }
    }
    auto wave = istft(spgm, window);
    float peak = 1e-6f;
    for (float v : wave) peak = std::max(peak, std::abs(v));
    for (auto& v : wave) v *= 0.7f / peak;
    return wave;
}

}  // namespace detail

struct ToyDatasetOptions {
    int speakers = 4;
    int utterances_per_speaker = 10;
    double seconds_per_utterance = 4.0;
    int sample_rate = 22050;
    uint64_t seed = 7;
};

// Writes <dir>/<speaker>/uttNN.wav for each speaker; returns utterance count.
inline int make_toy_dataset(const std::string& dir, const ToyDatasetOptions& opt = {}) {
    auto profiles = toy_speaker_profiles();
    if (opt.speakers < 1 || opt.speakers > static_cast<int>(profiles.size()))
        throw ConfigError("make_toy_dataset: speaker count must be 1.." +
                          std::to_string(profiles.size()));
    int written = 0;
    for (int s = 0; s < opt.speakers; ++s) {
        std::filesystem::create_directories(std::filesystem::path(dir) / profiles[static_cast<size_t>(s)].name);
        for (int u = 0; u < opt.utterances_per_speaker; ++u) {
            Pcg32 rng(opt.seed + static_cast<uint64_t>(s) * 1000 + static_cast<uint64_t>(u));
            auto wave = detail::toy_utterance(profiles[static_cast<size_t>(s)], opt.seconds_per_utterance,
                                              opt.sample_rate, rng);
            char name[32];
            std::snprintf(name, sizeof(name), "utt%02d.wav", u);
            Waveform w;
            w.sample_rate = opt.sample_rate;
            w.samples = wave;
            wav_write((std::filesystem::path(dir) / profiles[static_cast<size_t>(s)].name / name).string(), w);
            ++written;
        }
    }
    return written;
}

}  // namespace vcstar
