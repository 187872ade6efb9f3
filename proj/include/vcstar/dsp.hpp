#pragma once

// Speech analysis and resynthesis front end: Hann-window STFT, cepstral
// envelope smoothing, warped-cepstral coefficients, autocorrelation pitch,
// log-F0 statistics matching and spectral-gain filtering. Stands in for a
// full vocoder analyzer; externally extracted features can be ingested
// through the FEA1 path instead.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "fea.hpp"

namespace vcstar {

struct DspConfig {
    int sample_rate = 22050;
    int fft_size = 1024;
    int hop = 110;  // ~5 ms at 22050 Hz
    int mcep_order = 36;
    double alpha = 0.455;  // all-pass warp factor for this rate
    int lifter_order = 48;
    double f0_floor = 70.0;
    double f0_ceil = 400.0;
    double voicing_threshold = 0.30;
};

struct FeatureSequence {
    int q = 0;
    int n = 0;
    std::vector<float> values;  // row-major: q rows, n columns

    float at(int row, int col) const { return values[static_cast<size_t>(row) * n + col]; }
    float& at(int row, int col) { return values[static_cast<size_t>(row) * n + col]; }

    FeaMatrix to_fea(FeaKind kind) const {
        return FeaMatrix{static_cast<uint32_t>(q), static_cast<uint32_t>(n), kind, values};
    }
    static FeatureSequence from_fea(const FeaMatrix& m) {
        return FeatureSequence{static_cast<int>(m.q), static_cast<int>(m.n), m.values};
    }
};

struct F0Stats {
    double mean_logf0 = 0.0;  // nats
    double std_logf0 = 0.0;   // nats, population convention
    int64_t voiced_frame_count = 0;
};

struct Spectrogram {
    int fft_size = 0;
    int hop = 0;
    int frames = 0;
    int64_t signal_length = 0;  // original sample count, for resynthesis
    std::vector<std::complex<float>> values;  // frames x bins, row-major

    int bins() const { return fft_size / 2 + 1; }
    std::complex<float> at(int frame, int bin) const {
        return values[static_cast<size_t>(frame) * bins() + bin];
    }
};

struct UtteranceAnalysis {
    int sample_rate = 0;
    int hop = 0;
    int frames = 0;
    Spectrogram stft;
    std::vector<float> envelope;            // frames x bins, strictly positive
    std::vector<double> f0;                 // Hz per frame, 0 = unvoiced
    std::vector<float> aperiodicity_proxy;  // frames x ap_bands, carried through unmodified
    int ap_bands = 0;

    int bins() const { return stft.bins(); }
};

// ---------------------------------------------------------------------------
// FFT (iterative radix-2, double precision)

namespace detail {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    int n = static_cast<int>(a.size());
    if (!is_pow2(n)) throw ConfigError("fft: size must be a power of two");
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[static_cast<size_t>(i)], a[static_cast<size_t>(j)]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * M_PI / len * (inverse ? 1.0 : -1.0);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (int i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (int j = 0; j < len / 2; ++j) {
                auto u = a[static_cast<size_t>(i + j)];
                auto v = a[static_cast<size_t>(i + j + len / 2)] * w;
                a[static_cast<size_t>(i + j)] = u + v;
                a[static_cast<size_t>(i + j + len / 2)] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& v : a) v /= static_cast<double>(n);
}

inline std::vector<double> hann_window(int n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) w[static_cast<size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / n));
    return w;
}

}  // namespace detail

// The overlap-add check: the squared-window overlap sum must stay bounded
// away from zero over the analysis grid, otherwise reconstruction divides
// by (near) zero somewhere.
inline void check_overlap_add(const std::vector<double>& window, int hop) {
    int n = static_cast<int>(window.size());
    if (hop < 1) throw ConfigError("stft: hop must be >= 1");
    if (hop > n) throw ConfigError("stft: hop " + std::to_string(hop) +
                                   " exceeds window length " + std::to_string(n) +
                                   " (overlap-add condition violated)");
    int span = 8 * hop + 2 * n;
    std::vector<double> den(static_cast<size_t>(span), 0.0);
    for (int k = 0; k * hop < span; ++k)
        for (int i = 0; i < n; ++i) {
            int pos = k * hop + i;
            if (pos < span) den[static_cast<size_t>(pos)] += window[static_cast<size_t>(i)] * window[static_cast<size_t>(i)];
        }
    double mx = 0.0, mn = 1e300;
    for (int i = n; i < span - n; ++i) {
        mx = std::max(mx, den[static_cast<size_t>(i)]);
        mn = std::min(mn, den[static_cast<size_t>(i)]);
    }
    if (!(mn > 1e-6 * mx))
        throw ConfigError("stft: window/hop pair violates the overlap-add condition");
}

// Centered STFT: frame k is the windowed block around sample k*hop.
// Frame count is floor(len/hop)+1.
inline Spectrogram stft(const std::vector<float>& wave, int fft_size, int hop,
                        const std::vector<double>& window) {
    if (!detail::is_pow2(fft_size)) throw ConfigError("stft: fft_size must be a power of two");
    if (static_cast<int>(window.size()) != fft_size)
        throw ConfigError("stft: window length must equal fft_size");
    check_overlap_add(window, hop);
    Spectrogram sp;
    sp.fft_size = fft_size;
    sp.hop = hop;
    sp.signal_length = static_cast<int64_t>(wave.size());
    sp.frames = static_cast<int>(wave.size() / static_cast<size_t>(hop)) + 1;
    int bins = sp.bins();
    sp.values.assign(static_cast<size_t>(sp.frames) * bins, {0.0f, 0.0f});
    int64_t len = static_cast<int64_t>(wave.size());
    parallel_for(sp.frames, [&](int64_t f0_, int64_t f1_) {
        std::vector<std::complex<double>> buf(static_cast<size_t>(fft_size));
        for (int64_t f = f0_; f < f1_; ++f) {
            int64_t start = f * hop - fft_size / 2;
            for (int i = 0; i < fft_size; ++i) {
                int64_t idx = start + i;
                double s = (idx >= 0 && idx < len) ? wave[static_cast<size_t>(idx)] : 0.0;
                buf[static_cast<size_t>(i)] = s * window[static_cast<size_t>(i)];
            }
            detail::fft_inplace(buf, false);
            for (int b = 0; b < bins; ++b)
                sp.values[static_cast<size_t>(f) * bins + b] = {
                    static_cast<float>(buf[static_cast<size_t>(b)].real()),
                    static_cast<float>(buf[static_cast<size_t>(b)].imag())};
        }
    });
    return sp;
}

// Weighted overlap-add inverse. Exact (up to rounding) wherever the window
// overlap covers the signal; the first/last half-frame carry edge error.
inline std::vector<float> istft(const Spectrogram& sp, const std::vector<double>& window,
                                int64_t out_len = -1) {
    if (static_cast<int>(window.size()) != sp.fft_size)
        throw ConfigError("istft: window length must equal fft_size");
    check_overlap_add(window, sp.hop);
    if (out_len < 0) out_len = sp.signal_length;
    int fft_size = sp.fft_size;
    int bins = sp.bins();
    int64_t acc_len = static_cast<int64_t>(sp.frames - 1) * sp.hop + fft_size;
    std::vector<double> num(static_cast<size_t>(acc_len), 0.0);
    std::vector<double> den(static_cast<size_t>(acc_len), 0.0);
    std::vector<std::complex<double>> buf(static_cast<size_t>(fft_size));
    int64_t offset = fft_size / 2;  // centered frames start at -fft/2
    for (int f = 0; f < sp.frames; ++f) {
        for (int b = 0; b < bins; ++b) {
            std::complex<float> v = sp.values[static_cast<size_t>(f) * bins + b];
            buf[static_cast<size_t>(b)] = {v.real(), v.imag()};
        }
        for (int b = bins; b < fft_size; ++b) buf[static_cast<size_t>(b)] = std::conj(buf[static_cast<size_t>(fft_size - b)]);
        detail::fft_inplace(buf, true);
        int64_t start = static_cast<int64_t>(f) * sp.hop - fft_size / 2 + offset;
        for (int i = 0; i < fft_size; ++i) {
            int64_t pos = start + i;
            if (pos < 0 || pos >= acc_len) continue;
            double w = window[static_cast<size_t>(i)];
            num[static_cast<size_t>(pos)] += buf[static_cast<size_t>(i)].real() * w;
            den[static_cast<size_t>(pos)] += w * w;
        }
    }
    std::vector<float> out(static_cast<size_t>(out_len), 0.0f);
    for (int64_t i = 0; i < out_len; ++i) {
        int64_t pos = i + offset;
        if (pos >= acc_len) break;
        double d = den[static_cast<size_t>(pos)];
        out[static_cast<size_t>(i)] = d > 1e-12 ? static_cast<float>(num[static_cast<size_t>(pos)] / d) : 0.0f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cepstral-liftered spectral envelope of one magnitude frame.

inline std::vector<double> spectral_envelope(const std::vector<double>& mag_frame,
                                             int lifter_order) {
    int bins = static_cast<int>(mag_frame.size());
    if (bins < 2) throw ConfigError("spectral_envelope: frame too short");
    if (lifter_order < 1) throw ConfigError("spectral_envelope: lifter_order must be >= 1");
    double peak = 0.0;
    for (double v : mag_frame) {
        if (v < 0.0) throw NumericError("spectral_envelope: negative magnitude");
        peak = std::max(peak, v);
    }
    double floor_v = 1e-10 * std::max(peak, 1e-10);
    std::vector<double> env(static_cast<size_t>(bins), floor_v);
    if (peak == 0.0) return env;  // all-zero frame -> floor-valued envelope

    int n = 2 * (bins - 1);
    std::vector<double> logm(static_cast<size_t>(bins));
    for (int i = 0; i < bins; ++i) logm[static_cast<size_t>(i)] = std::log(std::max(mag_frame[static_cast<size_t>(i)], floor_v));
    // real cepstrum of the symmetric log spectrum, kept up to lifter_order
    int order = std::min(lifter_order, bins - 1);
    std::vector<double> ceps(static_cast<size_t>(order) + 1, 0.0);
    for (int q = 0; q <= order; ++q) {
        double acc = 0.5 * (logm[0] + (q % 2 == 0 ? logm[static_cast<size_t>(bins - 1)]
                                                  : -logm[static_cast<size_t>(bins - 1)]));
        for (int i = 1; i < bins - 1; ++i) acc += logm[static_cast<size_t>(i)] * std::cos(2.0 * M_PI * q * i / n);
        ceps[static_cast<size_t>(q)] = 2.0 * acc / n;
    }
    for (int i = 0; i < bins; ++i) {
        double acc = ceps[0];
        for (int q = 1; q <= order; ++q) acc += 2.0 * ceps[static_cast<size_t>(q)] * std::cos(2.0 * M_PI * q * i / n);
        env[static_cast<size_t>(i)] = std::max(std::exp(acc), floor_v);
    }
    return env;
}

// ---------------------------------------------------------------------------
// Warped-cepstral analysis: least-squares fit of the log envelope on the
// first `order` cosines of the all-pass-warped frequency axis. Synthesis is
// the transpose path H(w) = exp(sum_m c_m cos(m * warp(w))), so re-analysis
// of a synthesized envelope is an exact projection.

class MelBasis {
public:
    MelBasis(int fft_size, int order, double alpha) : fft_size_(fft_size), order_(order), alpha_(alpha) {
        int bins = fft_size / 2 + 1;
        if (order < 1 || order >= bins) throw ConfigError("mcep: order must satisfy 1 <= order < fft_size/2");
        if (alpha < 0.0 || alpha >= 1.0) throw ConfigError("mcep: alpha must lie in [0, 1)");
        basis_.assign(static_cast<size_t>(bins) * order, 0.0);
        for (int k = 0; k < bins; ++k) {
            double omega = M_PI * k / (bins - 1);
            double warped = omega + 2.0 * std::atan2(alpha * std::sin(omega), 1.0 - alpha * std::cos(omega));
            for (int m = 0; m < order; ++m) basis_[static_cast<size_t>(k) * order + m] = std::cos(m * warped);
        }
        // Cholesky factor of the (order x order) Gram matrix
        std::vector<double> gram(static_cast<size_t>(order) * order, 0.0);
        for (int i = 0; i < order; ++i)
            for (int j = i; j < order; ++j) {
                double acc = 0.0;
                for (int k = 0; k < bins; ++k)
                    acc += basis_[static_cast<size_t>(k) * order + i] * basis_[static_cast<size_t>(k) * order + j];
                gram[static_cast<size_t>(i) * order + j] = acc;
                gram[static_cast<size_t>(j) * order + i] = acc;
            }
        chol_ = gram;
        for (int i = 0; i < order; ++i) {
            for (int j = 0; j < i; ++j) {
                double s = chol_[static_cast<size_t>(i) * order + j];
                for (int k = 0; k < j; ++k)
                    s -= chol_[static_cast<size_t>(i) * order + k] * chol_[static_cast<size_t>(j) * order + k];
                chol_[static_cast<size_t>(i) * order + j] = s / chol_[static_cast<size_t>(j) * order + j];
            }
            double s = chol_[static_cast<size_t>(i) * order + i];
            for (int k = 0; k < i; ++k) {
                double l = chol_[static_cast<size_t>(i) * order + k];
                s -= l * l;
            }
            if (s <= 0.0) throw NumericError("mcep: basis Gram matrix is not positive definite");
            chol_[static_cast<size_t>(i) * order + i] = std::sqrt(s);
        }
    }

    int order() const { return order_; }
    int fft_size() const { return fft_size_; }
    double alpha() const { return alpha_; }
    int bins() const { return fft_size_ / 2 + 1; }

    std::vector<double> mcep_from_envelope(const std::vector<double>& envelope) const {
        int bins_n = bins();
        if (static_cast<int>(envelope.size()) != bins_n)
            throw ShapeError("mcep: envelope length must be fft_size/2+1");
        std::vector<double> rhs(static_cast<size_t>(order_), 0.0);
        for (int k = 0; k < bins_n; ++k) {
            double e = envelope[static_cast<size_t>(k)];
            if (!(e > 0.0)) throw NumericError("mcep: envelope must be strictly positive");
            double lv = std::log(e);
            for (int m = 0; m < order_; ++m) rhs[static_cast<size_t>(m)] += basis_[static_cast<size_t>(k) * order_ + m] * lv;
        }
        // solve L L^T c = rhs
        for (int i = 0; i < order_; ++i) {
            double s = rhs[static_cast<size_t>(i)];
            for (int k = 0; k < i; ++k) s -= chol_[static_cast<size_t>(i) * order_ + k] * rhs[static_cast<size_t>(k)];
            rhs[static_cast<size_t>(i)] = s / chol_[static_cast<size_t>(i) * order_ + i];
        }
        for (int i = order_ - 1; i >= 0; --i) {
            double s = rhs[static_cast<size_t>(i)];
            for (int k = i + 1; k < order_; ++k) s -= chol_[static_cast<size_t>(k) * order_ + i] * rhs[static_cast<size_t>(k)];
            rhs[static_cast<size_t>(i)] = s / chol_[static_cast<size_t>(i) * order_ + i];
        }
        return rhs;
    }

    std::vector<double> envelope_from_mcep(const std::vector<double>& mcc) const {
        if (static_cast<int>(mcc.size()) != order_)
            throw ShapeError("mcep: coefficient count must equal order");
        int bins_n = bins();
        std::vector<double> env(static_cast<size_t>(bins_n));
        for (int k = 0; k < bins_n; ++k) {
            double acc = 0.0;
            for (int m = 0; m < order_; ++m) acc += mcc[static_cast<size_t>(m)] * basis_[static_cast<size_t>(k) * order_ + m];
            env[static_cast<size_t>(k)] = std::exp(acc);
        }
        return env;
    }

private:
    int fft_size_;
    int order_;
    double alpha_;
    std::vector<double> basis_;  // bins x order
    std::vector<double> chol_;   // order x order, lower triangle
};

// ---------------------------------------------------------------------------
// Autocorrelation pitch tracking on the centered STFT frame grid.

inline std::vector<double> f0_estimate(const std::vector<float>& wave, int sample_rate, int hop,
                                       double f0_floor, double f0_ceil, int window_length = 1024,
                                       double voicing_threshold = 0.30) {
    if (!(f0_floor < f0_ceil && f0_ceil < sample_rate / 2.0))
        throw ConfigError("f0_estimate: need f0_floor < f0_ceil < sample_rate/2");
    int frames = static_cast<int>(wave.size() / static_cast<size_t>(hop)) + 1;
    std::vector<double> f0(static_cast<size_t>(frames), 0.0);
    int tau_min = std::max(2, static_cast<int>(std::floor(sample_rate / f0_ceil)));
    int tau_max = std::min(window_length - 2, static_cast<int>(std::ceil(sample_rate / f0_floor)));
    if (tau_min >= tau_max) throw ConfigError("f0_estimate: pitch range empty for this window");
    int64_t len = static_cast<int64_t>(wave.size());
    parallel_for(frames, [&](int64_t fr0, int64_t fr1) {
        std::vector<double> x(static_cast<size_t>(window_length));
        std::vector<double> r(static_cast<size_t>(tau_max) + 2, 0.0);
        for (int64_t f = fr0; f < fr1; ++f) {
            int64_t start = f * hop - window_length / 2;
            double mean = 0.0;
            for (int i = 0; i < window_length; ++i) {
                int64_t idx = start + i;
                x[static_cast<size_t>(i)] = (idx >= 0 && idx < len) ? wave[static_cast<size_t>(idx)] : 0.0;
                mean += x[static_cast<size_t>(i)];
            }
            mean /= window_length;
            double energy = 0.0;
            for (auto& v : x) {
                v -= mean;
                energy += v * v;
            }
            if (energy / window_length < 1e-8) continue;  // silence

            for (int tau = tau_min - 1; tau <= tau_max + 1; ++tau) {
                double num = 0.0, e0 = 0.0, e1 = 0.0;
                for (int i = 0; i + tau < window_length; ++i) {
                    num += x[static_cast<size_t>(i)] * x[static_cast<size_t>(i + tau)];
                    e0 += x[static_cast<size_t>(i)] * x[static_cast<size_t>(i)];
                    e1 += x[static_cast<size_t>(i + tau)] * x[static_cast<size_t>(i + tau)];
                }
                r[static_cast<size_t>(tau)] = (e0 > 0 && e1 > 0) ? num / std::sqrt(e0 * e1) : 0.0;
            }
            double r_best = 0.0;
            for (int tau = tau_min; tau <= tau_max; ++tau) r_best = std::max(r_best, r[static_cast<size_t>(tau)]);
            if (r_best < voicing_threshold) continue;
            // earliest local peak close to the global best avoids octave-down errors
            int chosen = -1;
            for (int tau = tau_min; tau <= tau_max; ++tau) {
                if (r[static_cast<size_t>(tau)] >= 0.85 * r_best &&
                    r[static_cast<size_t>(tau)] >= r[static_cast<size_t>(tau) - 1] &&
                    r[static_cast<size_t>(tau)] >= r[static_cast<size_t>(tau) + 1]) {
                    chosen = tau;
                    break;
                }
            }
            if (chosen < 0) continue;
            double y0 = r[static_cast<size_t>(chosen) - 1], y1 = r[static_cast<size_t>(chosen)], y2 = r[static_cast<size_t>(chosen) + 1];
            double denom = y0 - 2.0 * y1 + y2;
            double shift = std::abs(denom) > 1e-12 ? 0.5 * (y0 - y2) / denom : 0.0;
            shift = std::min(0.5, std::max(-0.5, shift));
            f0[static_cast<size_t>(f)] = sample_rate / (chosen + shift);
        }
    });
    return f0;
}

// ---------------------------------------------------------------------------
// Log-F0 statistics (population convention) and the Gaussian-normalized
// log-F0 transform.

inline F0Stats logf0_stats(const std::vector<std::vector<double>>& contours) {
    double sum = 0.0;
    int64_t count = 0;
    for (const auto& c : contours)
        for (double v : c)
            if (v > 0.0) {
                sum += std::log(v);
                ++count;
            }
    if (count < 2) throw NumericError("logf0_stats: need at least 2 voiced frames");
    double mean = sum / static_cast<double>(count);
    double var = 0.0;
    for (const auto& c : contours)
        for (double v : c)
            if (v > 0.0) {
                double d = std::log(v) - mean;
                var += d * d;
            }
    var /= static_cast<double>(count);
    if (!(var > 0.0)) throw NumericError("logf0_stats: zero log-F0 variance (constant contour)");
    return F0Stats{mean, std::sqrt(var), count};
}

inline std::vector<double> convert_f0(const std::vector<double>& contour, const F0Stats& src,
                                      const F0Stats& tgt) {
    if (!(src.std_logf0 > 0.0)) throw NumericError("convert_f0: source std must be positive");
    std::vector<double> out(contour.size(), 0.0);
    double ratio = tgt.std_logf0 / src.std_logf0;
    for (size_t i = 0; i < contour.size(); ++i) {
        if (contour[i] <= 0.0) continue;  // unvoiced stays unvoiced
        double lf = std::log(contour[i]);
        out[i] = std::exp((lf - src.mean_logf0) * ratio + tgt.mean_logf0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spectral gain filtering

inline std::vector<double> spectral_gain(const std::vector<double>& converted_env,
                                         const std::vector<double>& reference_env,
                                         double gain_floor = 1e-3, double gain_ceil = 1e3) {
    if (converted_env.size() != reference_env.size())
        throw ShapeError("spectral_gain: envelope lengths differ");
    std::vector<double> gain(converted_env.size());
    for (size_t i = 0; i < gain.size(); ++i) {
        if (!(converted_env[i] > 0.0) || !(reference_env[i] > 0.0))
            throw NumericError("spectral_gain: envelopes must be strictly positive");
        gain[i] = std::min(gain_ceil, std::max(gain_floor, converted_env[i] / reference_env[i]));
    }
    return gain;
}

// Multiply each STFT frame by its gain (preserving phase), then overlap-add.
inline std::vector<float> apply_gain_resynthesize(const UtteranceAnalysis& analysis,
                                                  const std::vector<double>& gains,
                                                  const std::vector<double>& window) {
    int bins = analysis.bins();
    if (static_cast<int64_t>(gains.size()) != static_cast<int64_t>(analysis.frames) * bins)
        throw ShapeError("apply_gain_resynthesize: gain matrix must be frames x bins");
    Spectrogram scaled = analysis.stft;
    for (int f = 0; f < analysis.frames; ++f)
        for (int b = 0; b < bins; ++b) {
            auto& v = scaled.values[static_cast<size_t>(f) * bins + b];
            v *= static_cast<float>(gains[static_cast<size_t>(f) * bins + b]);
        }
    return istft(scaled, window);
}

// ---------------------------------------------------------------------------
// Full analysis path: wave -> stft + envelope + MCC + F0.

struct AnalyzedUtterance {
    UtteranceAnalysis analysis;
    FeatureSequence mcc;  // mcep_order x frames
};

inline AnalyzedUtterance analyze_utterance(const std::vector<float>& wave, const DspConfig& cfg) {
    AnalyzedUtterance out;
    auto window = detail::hann_window(cfg.fft_size);
    out.analysis.sample_rate = cfg.sample_rate;
    out.analysis.hop = cfg.hop;
    out.analysis.stft = stft(wave, cfg.fft_size, cfg.hop, window);
    out.analysis.frames = out.analysis.stft.frames;
    int bins = out.analysis.bins();
    int frames = out.analysis.frames;

    MelBasis basis(cfg.fft_size, cfg.mcep_order, cfg.alpha);
    out.analysis.envelope.assign(static_cast<size_t>(frames) * bins, 0.0f);
    out.mcc.q = cfg.mcep_order;
    out.mcc.n = frames;
    out.mcc.values.assign(static_cast<size_t>(cfg.mcep_order) * frames, 0.0f);

    parallel_for(frames, [&](int64_t fr0, int64_t fr1) {
        std::vector<double> mag(static_cast<size_t>(bins));
        for (int64_t f = fr0; f < fr1; ++f) {
            for (int b = 0; b < bins; ++b) mag[static_cast<size_t>(b)] = std::abs(out.analysis.stft.at(static_cast<int>(f), b));
            auto env = spectral_envelope(mag, cfg.lifter_order);
            auto mcc = basis.mcep_from_envelope(env);
            for (int b = 0; b < bins; ++b)
                out.analysis.envelope[static_cast<size_t>(f) * bins + b] = static_cast<float>(env[static_cast<size_t>(b)]);
            for (int m = 0; m < cfg.mcep_order; ++m) out.mcc.at(m, static_cast<int>(f)) = static_cast<float>(mcc[static_cast<size_t>(m)]);
        }
    });

    out.analysis.f0 = f0_estimate(wave, cfg.sample_rate, cfg.hop, cfg.f0_floor, cfg.f0_ceil,
                                  cfg.fft_size, cfg.voicing_threshold);
    if (static_cast<int>(out.analysis.f0.size()) != frames)
        throw Error("analyze_utterance: f0 frame count mismatch");
    out.analysis.ap_bands = 0;
    return out;
}

}  // namespace vcstar
