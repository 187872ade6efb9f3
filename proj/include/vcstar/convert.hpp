#pragma once

// Conversion: analyze -> normalize -> G(x, target) -> denormalize ->
// spectral-gain filter against a reference envelope -> resynthesize with the
// input's phase. F0 moves by the log-Gaussian normalized transform. Also
// the objective evaluation report (classifier accuracy, D score, cycle and
// identity MCD over every ordered speaker pair).

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pipeline.hpp"

namespace vcstar {

enum class ConversionMode { Direct, GainReference };

struct ConversionRequest {
    std::optional<Waveform> wave;                 // either audio ...
    std::optional<FeatureSequence> features;      // ... or a 36xN MCC matrix
    std::vector<double> f0;                       // required with `features`
    int target_attribute = -1;
    std::optional<int> source_attribute;
    ConversionMode mode = ConversionMode::Direct;
};

struct ConversionResult {
    bool has_wave = false;
    Waveform wave;
    FeatureSequence converted_mcc;  // Q x N
    std::vector<double> converted_f0;
    F0Stats source_f0_stats;  // the stats actually used (bundle's or per-utterance)
};

// The generator application is injectable so conversion can be exercised
// with a stub (e.g. the identity map) independently of training.
using GeneratorFn = std::function<Tensor(const Tensor& view, const AttributeLabel& label)>;

inline GeneratorFn bundle_generator(ModelBundle& bundle) {
    return [&bundle](const Tensor& view, const AttributeLabel& label) {
        std::vector<AttributeLabel> labels{label};
        return generator_forward(view, labels, bundle.gen, bundle.arch, false);
    };
}

inline ConversionResult convert_utterance(const ConversionRequest& req, ModelBundle& bundle,
                                          GeneratorFn generator = nullptr) {
    int k = static_cast<int>(bundle.speakers.size());
    if (req.target_attribute < 0 || req.target_attribute >= k)
        throw ConfigError("convert: unknown target attribute index " +
                          std::to_string(req.target_attribute));
    if (req.source_attribute && (*req.source_attribute < 0 || *req.source_attribute >= k))
        throw ConfigError("convert: unknown source attribute index");
    if (req.mode == ConversionMode::GainReference && !req.source_attribute)
        throw ConfigError("convert: gain-reference mode requires the source attribute");
    if (!generator) generator = bundle_generator(bundle);

    // assemble input features
    FeatureSequence mcc;
    std::vector<double> f0;
    std::optional<AnalyzedUtterance> analyzed;
    if (req.wave) {
        if (req.wave->sample_rate != bundle.dsp.sample_rate)
            throw ConfigError("convert: sample rate " + std::to_string(req.wave->sample_rate) +
                              " does not match the model's " + std::to_string(bundle.dsp.sample_rate));
        analyzed = analyze_utterance(req.wave->samples, bundle.dsp);
        mcc = analyzed->mcc;
        f0 = analyzed->analysis.f0;
    } else if (req.features) {
        mcc = *req.features;
        f0 = req.f0;
        if (static_cast<int>(f0.size()) != mcc.n)
            throw ShapeError("convert: F0 contour length must match the feature frames");
        if (mcc.q != bundle.dsp.mcep_order)
            throw ShapeError("convert: feature dimension does not match the model");
    } else {
        throw ConfigError("convert: neither audio nor features supplied");
    }
    if (mcc.n < bundle.arch.min_length())
        throw ShapeError("convert: input length " + std::to_string(mcc.n) +
                         " below generator minimum " + std::to_string(bundle.arch.min_length()));

    Tensor view = features_to_net_input(mcc, bundle.norm);
    Tensor converted_view = generator(view, AttributeLabel::single(k, req.target_attribute));
    ConversionResult result;
    result.converted_mcc = net_output_to_features(converted_view, mcc, bundle.norm);

    FeatureSequence reference;
    if (req.mode == ConversionMode::GainReference) {
        Tensor ref_view = generator(view, AttributeLabel::single(k, *req.source_attribute));
        reference = net_output_to_features(ref_view, mcc, bundle.norm);
    } else {
        reference = mcc;
    }

    // converted F0: source statistics from the bundle when the source
    // attribute is known, otherwise estimated from this utterance
    if (req.source_attribute) {
        result.source_f0_stats = bundle.speakers[static_cast<size_t>(*req.source_attribute)].f0;
    } else {
        result.source_f0_stats = logf0_stats({f0});
    }
    result.converted_f0 =
        convert_f0(f0, result.source_f0_stats, bundle.speakers[static_cast<size_t>(req.target_attribute)].f0);

    // spectral-gain filtering and resynthesis (audio inputs only)
    if (analyzed) {
        MelBasis basis(bundle.dsp.fft_size, bundle.dsp.mcep_order, bundle.dsp.alpha);
        int frames = mcc.n, bins = bundle.dsp.fft_size / 2 + 1;
        std::vector<double> gains(static_cast<size_t>(frames) * bins);
        parallel_for(frames, [&](int64_t f0_, int64_t f1_) {
            std::vector<double> cvec(static_cast<size_t>(mcc.q)), rvec(static_cast<size_t>(mcc.q));
            for (int64_t f = f0_; f < f1_; ++f) {
                for (int d = 0; d < mcc.q; ++d) {
                    cvec[static_cast<size_t>(d)] = result.converted_mcc.at(d, static_cast<int>(f));
                    rvec[static_cast<size_t>(d)] = reference.at(d, static_cast<int>(f));
                }
                auto env_conv = basis.envelope_from_mcep(cvec);
                auto env_ref = basis.envelope_from_mcep(rvec);
                auto g = spectral_gain(env_conv, env_ref);
                std::copy(g.begin(), g.end(), gains.begin() + f * bins);
            }
        });
        auto window = detail::hann_window(bundle.dsp.fft_size);
        result.wave.sample_rate = bundle.dsp.sample_rate;
        result.wave.samples = apply_gain_resynthesize(analyzed->analysis, gains, window);
        result.has_wave = true;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Mel-cepstral distortion in dB: mean over frames of
// (10/ln 10) * sqrt(2 * sum_m (x_m - y_m)^2) over the selected rows.

inline double mcd(const FeatureSequence& x, const FeatureSequence& y, int dim_lo, int dim_hi) {
    if (x.n != y.n) throw ShapeError("mcd: frame counts differ (caller must align)");
    if (x.q != y.q) throw ShapeError("mcd: dimensions differ");
    if (dim_lo < 0 || dim_hi >= x.q || dim_lo > dim_hi) throw ConfigError("mcd: bad dim range");
    if (x.n == 0) return 0.0;
    double total = 0.0;
    for (int t = 0; t < x.n; ++t) {
        double acc = 0.0;
        for (int d = dim_lo; d <= dim_hi; ++d) {
            double diff = static_cast<double>(x.at(d, t)) - y.at(d, t);
            acc += diff * diff;
        }
        total += (10.0 / std::log(10.0)) * std::sqrt(2.0 * acc);
    }
    return total / x.n;
}

// ---------------------------------------------------------------------------
// Objective evaluation over all ordered speaker pairs.

struct PairReport {
    std::string source, target;
    int utterances = 0;
    double cls_accuracy = 0.0;  // converted features classified as the target
    double mean_d_score = 0.0;  // geometric-mean patch probability under D
    double cyc_mcd = 0.0;       // G(G(x,tgt),src) vs x
    double id_mcd = 0.0;        // G(x,src) vs x
};

struct EvalReport {
    std::vector<PairReport> pairs;
    std::map<std::string, double> baseline_cls_accuracy;  // real eval features
    double baseline_overall = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["pairs"] = nlohmann::json::array();
        for (const auto& p : pairs)
            j["pairs"].push_back({{"source", p.source},
                                  {"target", p.target},
                                  {"utterances", p.utterances},
                                  {"cls_accuracy", p.cls_accuracy},
                                  {"mean_d_score", p.mean_d_score},
                                  {"cyc_mcd", p.cyc_mcd},
                                  {"id_mcd", p.id_mcd}});
        j["baseline_cls_accuracy"] = baseline_cls_accuracy;
        j["baseline_overall"] = baseline_overall;
        return j;
    }
};

// Aggregate (product-pooled) classifier decision for one normalized view.
inline int classify_view(ModelBundle& bundle, const Tensor& view) {
    auto out = classifier_forward(view, bundle.cls, bundle.arch, false);
    const auto& lp = out.class_log_prob.value();
    int best = 0;
    for (int j = 1; j < bundle.arch.num_classes; ++j)
        if (lp[static_cast<size_t>(j)] > lp[static_cast<size_t>(best)]) best = j;
    return best;
}

inline EvalReport eval_conversion(ModelBundle& bundle, const FeatureStore& store,
                                  GeneratorFn generator = nullptr) {
    if (!generator) generator = bundle_generator(bundle);
    int k = bundle.arch.num_classes;
    EvalReport report;

    // baseline: real eval features
    std::map<std::string, std::pair<int, int>> base_counts;  // speaker -> (hits, total)
    for (size_t idx : store.eval_indices) {
        const auto& utt = store.utterances[idx];
        Tensor view = features_to_net_input(utt.mcc, bundle.norm);
        int decided = classify_view(bundle, view);
        auto& c = base_counts[utt.speaker];
        c.first += (decided == utt.attribute) ? 1 : 0;
        c.second += 1;
    }
    int bh = 0, bt = 0;
    for (auto& [name, c] : base_counts) {
        report.baseline_cls_accuracy[name] = c.second ? static_cast<double>(c.first) / c.second : 0.0;
        bh += c.first;
        bt += c.second;
    }
    report.baseline_overall = bt ? static_cast<double>(bh) / bt : 0.0;

    for (int src = 0; src < k; ++src) {
        for (int tgt = 0; tgt < k; ++tgt) {
            if (src == tgt) continue;
            PairReport pr;
            pr.source = bundle.speakers[static_cast<size_t>(src)].name;
            pr.target = bundle.speakers[static_cast<size_t>(tgt)].name;
            double d_acc = 0.0, cyc_acc = 0.0, id_acc = 0.0;
            int hits = 0;
            for (size_t idx : store.eval_indices) {
                const auto& utt = store.utterances[idx];
                if (utt.attribute != src) continue;
                Tensor view = features_to_net_input(utt.mcc, bundle.norm);
                AttributeLabel tgt_label = AttributeLabel::single(k, tgt);
                AttributeLabel src_label = AttributeLabel::single(k, src);
                Tensor conv = generator(view, tgt_label);
                if (classify_view(bundle, conv) == tgt) ++hits;
                auto dout = discriminator_forward(conv, {tgt_label}, bundle.dis, bundle.arch, false);
                double mean_lp = 0.0;
                for (float v : dout.patch_log_probs.value()) mean_lp += v;
                mean_lp /= static_cast<double>(dout.patch_log_probs.numel());
                d_acc += std::exp(mean_lp);
                Tensor cycled = generator(conv, src_label);
                FeatureSequence cyc36 = net_output_to_features(cycled, utt.mcc, bundle.norm);
                cyc_acc += mcd(utt.mcc, cyc36, 1, utt.mcc.q - 1);
                Tensor idv = generator(view, src_label);
                FeatureSequence id36 = net_output_to_features(idv, utt.mcc, bundle.norm);
                id_acc += mcd(utt.mcc, id36, 1, utt.mcc.q - 1);
                pr.utterances += 1;
            }
            if (pr.utterances > 0) {
                pr.cls_accuracy = static_cast<double>(hits) / pr.utterances;
                pr.mean_d_score = d_acc / pr.utterances;
                pr.cyc_mcd = cyc_acc / pr.utterances;
                pr.id_mcd = id_acc / pr.utterances;
            }
            report.pairs.push_back(std::move(pr));
        }
    }
    return report;
}

}  // namespace vcstar
