#pragma once

// Dataset ingestion, feature normalization, minibatch sampling, the
// three-network training loop and checkpointing.

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "bundle.hpp"
#include "losses.hpp"
#include "wav.hpp"

namespace vcstar {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset manifest

struct ManifestUtterance {
    std::string stem;
    std::string wav_path;   // empty when the FEA1 override is used
    std::string mcc_path;   // FEA1 override inputs
    std::string f0_path;
    bool eval_split = false;
};

struct ManifestSpeaker {
    std::string id;
    int attribute_index = 0;
    std::vector<ManifestUtterance> utterances;
};

struct DatasetManifest {
    std::vector<ManifestSpeaker> speakers;

    bool operator==(const DatasetManifest&) const = default;
};

inline bool operator==(const ManifestUtterance& a, const ManifestUtterance& b) {
    return a.stem == b.stem && a.wav_path == b.wav_path && a.mcc_path == b.mcc_path &&
           a.f0_path == b.f0_path && a.eval_split == b.eval_split;
}
inline bool operator==(const ManifestSpeaker& a, const ManifestSpeaker& b) {
    return a.id == b.id && a.attribute_index == b.attribute_index && a.utterances == b.utterances;
}

// One subdirectory per speaker. FEA1 pairs (<stem>.mcc.fea1 + <stem>.f0.fea1)
// override WAV files of the same stem. Split comes from an eval.lst sidecar
// when present, otherwise every fifth utterance goes to the eval split.
inline DatasetManifest scan_dataset(const std::string& root) {
    if (!fs::exists(root)) throw IoError("dataset directory not found: " + root);
    if (!fs::is_directory(root)) throw IoError("not a directory: " + root);
    DatasetManifest m;
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path().filename().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw ConfigError("no speakers found in " + root);
    for (size_t i = 0; i + 1 < dirs.size(); ++i)
        if (dirs[i] == dirs[i + 1]) throw ConfigError("duplicate speaker id: " + dirs[i]);

    for (size_t si = 0; si < dirs.size(); ++si) {
        ManifestSpeaker sp;
        sp.id = dirs[si];
        sp.attribute_index = static_cast<int>(si);
        fs::path sdir = fs::path(root) / sp.id;

        std::map<std::string, ManifestUtterance> by_stem;
        for (const auto& e : fs::directory_iterator(sdir)) {
            if (!e.is_regular_file()) continue;
            std::string fname = e.path().filename().string();
            auto ends_with = [&](const std::string& suffix) {
                return fname.size() > suffix.size() &&
                       fname.compare(fname.size() - suffix.size(), suffix.size(), suffix) == 0;
            };
            if (ends_with(".mcc.fea1")) {
                std::string stem = fname.substr(0, fname.size() - 9);
                by_stem[stem].stem = stem;
                by_stem[stem].mcc_path = e.path().string();
            } else if (ends_with(".f0.fea1")) {
                std::string stem = fname.substr(0, fname.size() - 8);
                by_stem[stem].stem = stem;
                by_stem[stem].f0_path = e.path().string();
            } else if (ends_with(".wav")) {
                std::string stem = fname.substr(0, fname.size() - 4);
                by_stem[stem].stem = stem;
                by_stem[stem].wav_path = e.path().string();
            }
        }
        for (auto& [stem, utt] : by_stem) {
            bool has_fea = !utt.mcc_path.empty() || !utt.f0_path.empty();
            if (has_fea && (utt.mcc_path.empty() || utt.f0_path.empty()))
                throw ConfigError("incomplete FEA1 pair for " + (sdir / stem).string());
            if (has_fea) utt.wav_path.clear();  // override takes precedence
            sp.utterances.push_back(utt);
        }
        if (sp.utterances.empty())
            throw ConfigError("speaker directory has no utterances: " + sdir.string());

        std::set<std::string> eval_stems;
        fs::path lst = sdir / "eval.lst";
        if (fs::exists(lst)) {
            std::ifstream f(lst);
            std::string line;
            while (std::getline(f, line)) {
                while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
                if (!line.empty()) eval_stems.insert(line);
            }
            for (auto& u : sp.utterances) u.eval_split = eval_stems.count(u.stem) > 0;
        } else {
            for (size_t ui = 0; ui < sp.utterances.size(); ++ui)
                sp.utterances[ui].eval_split = (ui % 5 == 4);
        }
        bool any_train = false;
        for (const auto& u : sp.utterances) any_train |= !u.eval_split;
        if (!any_train)
            throw ConfigError("speaker " + sp.id + " has no training utterances");
        m.speakers.push_back(std::move(sp));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Feature extraction and cache

struct CachedUtterance {
    std::string speaker;
    std::string stem;
    int attribute = 0;
    bool eval_split = false;
    FeatureSequence mcc;      // mcep_order x N
    std::vector<double> f0;   // N
};

struct FeatureStore {
    std::vector<std::string> speakers;  // index == attribute index
    std::vector<CachedUtterance> utterances;
    std::vector<F0Stats> f0_stats;  // per speaker, train split only
    NormStats norm;                 // train split only
    std::vector<size_t> train_indices;
    std::vector<size_t> eval_indices;

    int num_speakers() const { return static_cast<int>(speakers.size()); }
};

namespace detail {

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline uint64_t file_hash(const std::string& path, uint64_t h) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a(bytes.data(), bytes.size(), h);
}

inline uint64_t dsp_config_hash(const DspConfig& cfg) {
    nlohmann::json j = cfg;
    std::string s = j.dump();
    return fnv1a(s.data(), s.size());
}

}  // namespace detail

// Analyzes (or ingests) every utterance, caching features under
// <cache>/<speaker>/<stem>.mcc.fea1 and .f0.fea1 with a content-hash
// sidecar. Up-to-date entries are loaded, not recomputed. Normalization and
// per-speaker F0 statistics come from the train split only.
inline FeatureStore extract_and_cache(const DatasetManifest& manifest, const DspConfig& cfg,
                                      const std::string& cache_dir,
                                      size_t* extractions_performed = nullptr) {
    FeatureStore store;
    uint64_t cfg_hash = detail::dsp_config_hash(cfg);
    size_t performed = 0;

    for (const auto& sp : manifest.speakers) {
        store.speakers.push_back(sp.id);
        fs::create_directories(fs::path(cache_dir) / sp.id);
        for (const auto& utt : sp.utterances) {
            fs::path base = fs::path(cache_dir) / sp.id / utt.stem;
            std::string mcc_path = base.string() + ".mcc.fea1";
            std::string f0_path = base.string() + ".f0.fea1";
            std::string meta_path = base.string() + ".meta.json";

            uint64_t src_hash = cfg_hash;
            if (!utt.wav_path.empty()) {
                src_hash = detail::file_hash(utt.wav_path, src_hash);
            } else {
                src_hash = detail::file_hash(utt.mcc_path, src_hash);
                src_hash = detail::file_hash(utt.f0_path, src_hash);
            }

            bool cached = false;
            if (fs::exists(meta_path) && fs::exists(mcc_path) && fs::exists(f0_path)) {
                try {
                    std::ifstream mf(meta_path);
                    auto meta = nlohmann::json::parse(mf);
                    cached = meta.at("hash").get<std::string>() == std::to_string(src_hash);
                } catch (...) {
                    cached = false;
                }
            }

            CachedUtterance cu;
            cu.speaker = sp.id;
            cu.stem = utt.stem;
            cu.attribute = sp.attribute_index;
            cu.eval_split = utt.eval_split;

            if (!cached) {
                ++performed;
                if (!utt.wav_path.empty()) {
                    Waveform w = wav_read(utt.wav_path);
                    if (w.sample_rate != cfg.sample_rate)
                        throw ConfigError(utt.wav_path + ": sample rate " +
                                          std::to_string(w.sample_rate) + " does not match config " +
                                          std::to_string(cfg.sample_rate));
                    auto analyzed = analyze_utterance(w.samples, cfg);
                    cu.mcc = analyzed.mcc;
                    cu.f0 = analyzed.analysis.f0;
                } else {
                    // FEA1 override: ingest bit-exactly, skip analysis
                    FeaMatrix mcc = fea_read(utt.mcc_path);
                    FeaMatrix f0m = fea_read(utt.f0_path);
                    if (mcc.kind != FeaKind::Mcc)
                        throw ConfigError(utt.mcc_path + ": expected kind 0 (MCC)");
                    if (f0m.kind != FeaKind::F0) throw ConfigError(utt.f0_path + ": expected kind 1 (F0)");
                    if (static_cast<int>(mcc.q) != cfg.mcep_order)
                        throw ConfigError(utt.mcc_path + ": " + std::to_string(mcc.q) +
                                          " coefficients, config wants " + std::to_string(cfg.mcep_order));
                    if (f0m.q != 1 || f0m.n != mcc.n)
                        throw ConfigError(utt.f0_path + ": F0 must be 1 x N with N matching the MCC file");
                    cu.mcc = FeatureSequence::from_fea(mcc);
                    cu.f0.assign(f0m.values.begin(), f0m.values.end());
                }
                fea_write(mcc_path, cu.mcc.to_fea(FeaKind::Mcc));
                FeaMatrix f0m;
                f0m.q = 1;
                f0m.n = static_cast<uint32_t>(cu.f0.size());
                f0m.kind = FeaKind::F0;
                f0m.values.assign(cu.f0.begin(), cu.f0.end());
                fea_write(f0_path, f0m);
                nlohmann::json meta{{"hash", std::to_string(src_hash)},
                                    {"frames", cu.mcc.n},
                                    {"speaker", sp.id}};
                std::ofstream mf(meta_path, std::ios::trunc);
                mf << meta.dump(2) << "\n";
            } else {
                cu.mcc = FeatureSequence::from_fea(fea_read(mcc_path));
                FeaMatrix f0m = fea_read(f0_path);
                cu.f0.assign(f0m.values.begin(), f0m.values.end());
            }
            store.utterances.push_back(std::move(cu));
        }
    }

    for (size_t i = 0; i < store.utterances.size(); ++i)
        (store.utterances[i].eval_split ? store.eval_indices : store.train_indices).push_back(i);
    if (store.train_indices.empty()) throw ConfigError("no training utterances in store");

    // per-speaker F0 statistics, train split only
    for (int s = 0; s < store.num_speakers(); ++s) {
        std::vector<std::vector<double>> contours;
        for (size_t i : store.train_indices)
            if (store.utterances[i].attribute == s) contours.push_back(store.utterances[i].f0);
        store.f0_stats.push_back(logf0_stats(contours));
    }

    // global per-dimension normalization, train split only
    int q = store.utterances[store.train_indices[0]].mcc.q;
    std::vector<double> sum(static_cast<size_t>(q), 0.0), sumsq(static_cast<size_t>(q), 0.0);
    int64_t frames = 0;
    for (size_t i : store.train_indices) {
        const auto& mcc = store.utterances[i].mcc;
        if (mcc.q != q) throw ConfigError("inconsistent MCC dimension across utterances");
        for (int d = 0; d < q; ++d)
            for (int t = 0; t < mcc.n; ++t) {
                double v = mcc.at(d, t);
                sum[static_cast<size_t>(d)] += v;
                sumsq[static_cast<size_t>(d)] += v * v;
            }
        frames += mcc.n;
    }
    store.norm.mean.resize(static_cast<size_t>(q));
    store.norm.std.resize(static_cast<size_t>(q));
    for (int d = 0; d < q; ++d) {
        double m = sum[static_cast<size_t>(d)] / static_cast<double>(frames);
        double var = sumsq[static_cast<size_t>(d)] / static_cast<double>(frames) - m * m;
        store.norm.mean[static_cast<size_t>(d)] = static_cast<float>(m);
        store.norm.std[static_cast<size_t>(d)] = static_cast<float>(std::max(std::sqrt(std::max(var, 0.0)), 1e-6));
    }
    if (extractions_performed) *extractions_performed = performed;
    return store;
}

// ---------------------------------------------------------------------------
// Normalization between 36-row MCC space and the (Q-1)-row network view.
// Row 0 (energy) bypasses the networks entirely.

inline void normalized_view_into(const FeatureSequence& mcc, const NormStats& norm, float* dst,
                                 int start_frame, int crop) {
    int q = mcc.q;
    for (int d = 1; d < q; ++d) {
        float m = norm.mean[static_cast<size_t>(d)];
        float s = norm.std[static_cast<size_t>(d)];
        for (int t = 0; t < crop; ++t) {
            int src = start_frame + t;
            // reflect-pad short sequences
            int n = mcc.n;
            if (n == 1) src = 0;
            else {
                int period = 2 * n - 2;
                src = ((src % period) + period) % period;
                if (src >= n) src = period - src;
            }
            dst[static_cast<size_t>(d - 1) * crop + t] = (mcc.at(d, src) - m) / s;
        }
    }
}

inline Tensor features_to_net_input(const FeatureSequence& mcc, const NormStats& norm) {
    Tensor x = Tensor::zeros({1, 1, mcc.q - 1, mcc.n});
    normalized_view_into(mcc, norm, x.mutable_value().data(), 0, mcc.n);
    return x;
}

// Reassembles a full Q-row sequence: passthrough energy row + denormalized
// network output rows.
inline FeatureSequence net_output_to_features(const Tensor& y, const FeatureSequence& original,
                                              const NormStats& norm) {
    if (y.ndim() != 4 || y.dim(0) != 1 || y.dim(1) != 1)
        throw ShapeError("net_output_to_features: expected [1,1,Q-1,N]");
    int qm1 = y.dim(2), n = y.dim(3);
    if (qm1 + 1 != original.q || n != original.n)
        throw ShapeError("net_output_to_features: shape mismatch with original sequence");
    FeatureSequence out;
    out.q = original.q;
    out.n = n;
    out.values.assign(static_cast<size_t>(out.q) * n, 0.0f);
    for (int t = 0; t < n; ++t) out.at(0, t) = original.at(0, t);
    for (int d = 1; d < out.q; ++d) {
        float m = norm.mean[static_cast<size_t>(d)];
        float s = norm.std[static_cast<size_t>(d)];
        for (int t = 0; t < n; ++t)
            out.at(d, t) = y.value()[static_cast<size_t>(d - 1) * n + t] * s + m;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Minibatch sampling: uniform utterance, uniform crop start, uniform target.

struct Minibatch {
    Tensor x;  // [B, 1, Q-1, crop], normalized
    std::vector<int> src_attr;
    std::vector<int> tgt_attr;
    std::vector<AttributeLabel> src_labels;
    std::vector<AttributeLabel> tgt_labels;
};

inline Minibatch sample_minibatch(const FeatureStore& store, int batch_size, int crop_frames,
                                  Pcg32& rng) {
    if (store.train_indices.empty()) throw ConfigError("sample_minibatch: empty store");
    if (batch_size < 1 || crop_frames < 1)
        throw ConfigError("sample_minibatch: batch and crop must be >= 1");
    int k = store.num_speakers();
    int qm1 = store.utterances[store.train_indices[0]].mcc.q - 1;
    Minibatch mb;
    mb.x = Tensor::zeros({batch_size, 1, qm1, crop_frames});
    for (int b = 0; b < batch_size; ++b) {
        size_t idx = store.train_indices[rng.next_below(static_cast<uint32_t>(store.train_indices.size()))];
        const auto& utt = store.utterances[idx];
        int max_start = std::max(0, utt.mcc.n - crop_frames);
        int start = max_start > 0 ? static_cast<int>(rng.next_below(static_cast<uint32_t>(max_start + 1))) : 0;
        normalized_view_into(utt.mcc, store.norm,
                             mb.x.mutable_value().data() +
                                 static_cast<size_t>(b) * qm1 * crop_frames,
                             start, crop_frames);
        int tgt = static_cast<int>(rng.next_below(static_cast<uint32_t>(k)));
        mb.src_attr.push_back(utt.attribute);
        mb.tgt_attr.push_back(tgt);
        mb.src_labels.push_back(AttributeLabel::single(k, utt.attribute));
        mb.tgt_labels.push_back(AttributeLabel::single(k, tgt));
    }
    return mb;
}

// ---------------------------------------------------------------------------
// One training iteration: D step, C step (real features only), G step with
// cycle and scheduled identity passes.

inline std::map<std::string, double> train_step(ModelBundle& bundle, TrainerState& trainer,
                                                const Minibatch& batch, const LossWeights& weights,
                                                const AdamConfig& cfg_g, const AdamConfig& cfg_d,
                                                const AdamConfig& cfg_c, int64_t step) {
    weights.validate();
    auto g_params = trainable_tensors(bundle.gen);
    auto d_params = trainable_tensors(bundle.dis);
    auto c_params = trainable_tensors(bundle.cls);

    Tensor fake = generator_forward(batch.x, batch.tgt_labels, bundle.gen, bundle.arch, true);

    // --- discriminator update
    auto d_real = discriminator_forward(batch.x, batch.src_labels, bundle.dis, bundle.arch, true);
    Tensor fake_detached = fake.detach();
    auto d_fake = discriminator_forward(fake_detached, batch.tgt_labels, bundle.dis, bundle.arch, true);
    Tensor log_d_real = sum_per_sample(clamp_log_probs(d_real.patch_log_probs));
    Tensor log_d_fake = sum_per_sample(clamp_log_probs(d_fake.patch_log_probs));
    Tensor log1m_fake = log_one_minus_from_log_d(log_d_fake);
    Tensor loss_d = total_d(adv_loss_d(log_d_real, log_d_fake, log1m_fake));
    zero_grads(d_params);
    loss_d.backward();
    adam_step(d_params, trainer.opt_d, cfg_d);

    // --- classifier update (real features, true labels)
    auto c_real = classifier_forward(batch.x, bundle.cls, bundle.arch, true);
    Tensor c_agg = sum_spatial(clamp_log_probs(c_real.segment_log_probs));
    Tensor loss_c = total_c(cls_loss_c(select_class_log_prob(c_agg, batch.src_attr)));
    zero_grads(c_params);
    loss_c.backward();
    adam_step(c_params, trainer.opt_c, cfg_c);

    // --- generator update against the refreshed D and C
    auto d_on_fake = discriminator_forward(fake, batch.tgt_labels, bundle.dis, bundle.arch, true);
    Tensor adv_g = adv_loss_g(sum_per_sample(clamp_log_probs(d_on_fake.patch_log_probs)));
    auto c_on_fake = classifier_forward(fake, bundle.cls, bundle.arch, true);
    Tensor cls_g = cls_loss_g(
        select_class_log_prob(sum_spatial(clamp_log_probs(c_on_fake.segment_log_probs)), batch.tgt_attr));
    Tensor cycled = generator_forward(fake, batch.src_labels, bundle.gen, bundle.arch, true);
    Tensor cyc = cyc_loss(batch.x, cycled, weights.rho);
    float lambda_id_now = weights.effective_lambda_id(step);
    Tensor id = lambda_id_now > 0.0f
                    ? id_loss(batch.x,
                              generator_forward(batch.x, batch.src_labels, bundle.gen, bundle.arch, true),
                              weights.rho)
                    : Tensor::scalar(0.0f);
    Tensor loss_g = total_g(adv_g, cls_g, cyc, id, weights, lambda_id_now);

    if (!loss_g.all_finite() || !loss_d.all_finite() || !loss_c.all_finite()) {
        std::string culprit = loss_g.find_non_finite();
        if (culprit.empty()) culprit = loss_d.find_non_finite();
        if (culprit.empty()) culprit = loss_c.find_non_finite();
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           " (offending tensor: " + culprit + ")");
    }

    zero_grads(g_params);
    loss_g.backward();
    adam_step(g_params, trainer.opt_g, cfg_g);

    return {{"adv_d", loss_d.item()}, {"adv_g", adv_g.item()}, {"cls_c", loss_c.item()},
            {"cls_g", cls_g.item()},  {"cyc", cyc.item()},     {"id", id.item()},
            {"total_g", loss_g.item()}};
}

// ---------------------------------------------------------------------------
// Training driver

struct TrainConfig {
    uint64_t seed = 0;
    int batch_size = 8;
    int crop_frames = 128;
    int64_t iterations = 5000;
    int64_t checkpoint_interval = 1000;
    AdamConfig adam_g{2e-4f, 0.5f, 0.999f, 1e-8f};
    AdamConfig adam_d{1e-4f, 0.5f, 0.999f, 1e-8f};
    AdamConfig adam_c{1e-4f, 0.5f, 0.999f, 1e-8f};
    LossWeights weights{};
    DspConfig dsp{};
    ArchSpec arch{};  // label/class/feature dims are overwritten from the data
    std::string data_dir;
    std::string cache_dir = "cache";
    std::string out_dir = "run";
};

inline void to_json(nlohmann::json& j, const AdamConfig& a) {
    j = {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"epsilon", a.epsilon}};
}
inline void from_json(const nlohmann::json& j, AdamConfig& a) {
    j.at("lr").get_to(a.lr);
    j.at("beta1").get_to(a.beta1);
    j.at("beta2").get_to(a.beta2);
    j.at("epsilon").get_to(a.epsilon);
}
inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"lambda_cls", w.lambda_cls}, {"lambda_cyc", w.lambda_cyc}, {"lambda_id", w.lambda_id},
         {"rho", w.rho},               {"id_decay_iters", w.id_decay_iters}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w) {
    j.at("lambda_cls").get_to(w.lambda_cls);
    j.at("lambda_cyc").get_to(w.lambda_cyc);
    j.at("lambda_id").get_to(w.lambda_id);
    j.at("rho").get_to(w.rho);
    j.at("id_decay_iters").get_to(w.id_decay_iters);
}
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"seed", c.seed},
         {"batch_size", c.batch_size},
         {"crop_frames", c.crop_frames},
         {"iterations", c.iterations},
         {"checkpoint_interval", c.checkpoint_interval},
         {"adam_g", c.adam_g},
         {"adam_d", c.adam_d},
         {"adam_c", c.adam_c},
         {"weights", c.weights},
         {"dsp", c.dsp},
         {"arch", c.arch},
         {"data_dir", c.data_dir},
         {"cache_dir", c.cache_dir},
         {"out_dir", c.out_dir}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("crop_frames")) j.at("crop_frames").get_to(c.crop_frames);
    if (j.contains("iterations")) j.at("iterations").get_to(c.iterations);
    if (j.contains("checkpoint_interval")) j.at("checkpoint_interval").get_to(c.checkpoint_interval);
    if (j.contains("adam_g")) j.at("adam_g").get_to(c.adam_g);
    if (j.contains("adam_d")) j.at("adam_d").get_to(c.adam_d);
    if (j.contains("adam_c")) j.at("adam_c").get_to(c.adam_c);
    if (j.contains("weights")) j.at("weights").get_to(c.weights);
    if (j.contains("dsp")) j.at("dsp").get_to(c.dsp);
    if (j.contains("arch")) j.at("arch").get_to(c.arch);
    if (j.contains("data_dir")) j.at("data_dir").get_to(c.data_dir);
    if (j.contains("cache_dir")) j.at("cache_dir").get_to(c.cache_dir);
    if (j.contains("out_dir")) j.at("out_dir").get_to(c.out_dir);
}

struct TrainResult {
    ModelBundle bundle;
    TrainerState trainer;
    std::string final_checkpoint;
};

using ProgressFn = std::function<void(int64_t, const std::map<std::string, double>&)>;

namespace detail {

inline std::string checkpoint_name(const std::string& dir, int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%07lld.vcck", static_cast<long long>(step));
    return (fs::path(dir) / buf).string();
}

}  // namespace detail

// Runs (or resumes) training. Checkpoints land in cfg.out_dir every
// checkpoint_interval steps plus a final one; metrics append to metrics.csv.
inline TrainResult train(const FeatureStore& store, TrainConfig cfg,
                         const std::string& resume_path = "", const ProgressFn& progress = {}) {
    if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    fs::create_directories(cfg.out_dir);

    TrainResult result;
    if (!resume_path.empty()) {
        result.bundle = load_checkpoint(resume_path, &result.trainer);
        if (!result.trainer.present)
            throw ConfigError("checkpoint has no trainer state, cannot resume: " + resume_path);
    } else {
        cfg.arch.label_dim = store.num_speakers();
        cfg.arch.num_classes = store.num_speakers();
        cfg.arch.feature_dim = cfg.dsp.mcep_order - 1;
        cfg.arch.validate();
        if (cfg.crop_frames < cfg.arch.min_length())
            throw ConfigError("train: crop_frames below the generator minimum length");
        Pcg32 init_rng(cfg.seed);
        result.bundle.arch = cfg.arch;
        result.bundle.dsp = cfg.dsp;
        result.bundle.gen = init_generator(cfg.arch, init_rng);
        result.bundle.dis = init_discriminator(cfg.arch, init_rng);
        result.bundle.cls = init_classifier(cfg.arch, init_rng);
        result.bundle.norm = store.norm;
        for (int s = 0; s < store.num_speakers(); ++s)
            result.bundle.speakers.push_back(SpeakerInfo{store.speakers[static_cast<size_t>(s)],
                                                         store.f0_stats[static_cast<size_t>(s)]});
        result.bundle.step = 0;
        auto gp = trainable_tensors(result.bundle.gen);
        auto dp = trainable_tensors(result.bundle.dis);
        auto cp = trainable_tensors(result.bundle.cls);
        result.trainer.opt_g = AdamState::for_params(gp);
        result.trainer.opt_d = AdamState::for_params(dp);
        result.trainer.opt_c = AdamState::for_params(cp);
        result.trainer.rng = Pcg32(cfg.seed, 1);
        result.trainer.present = true;
    }

    std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
    bool write_header = !fs::exists(metrics_path) || fs::file_size(metrics_path) == 0;
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw IoError("cannot open metrics file: " + metrics_path);
    if (write_header) metrics << "step,adv_d,adv_g,cls_c,cls_g,cyc,id,total_g\n";

    for (int64_t step = result.bundle.step; step < cfg.iterations; ++step) {
        Minibatch batch = sample_minibatch(store, cfg.batch_size, cfg.crop_frames, result.trainer.rng);
        auto m = train_step(result.bundle, result.trainer, batch, cfg.weights, cfg.adam_g,
                            cfg.adam_d, cfg.adam_c, step);
        result.bundle.step = step + 1;
        metrics << step << ',' << m["adv_d"] << ',' << m["adv_g"] << ',' << m["cls_c"] << ','
                << m["cls_g"] << ',' << m["cyc"] << ',' << m["id"] << ',' << m["total_g"] << '\n';
        metrics.flush();
        if (progress) progress(step, m);
        if (cfg.checkpoint_interval > 0 && result.bundle.step % cfg.checkpoint_interval == 0 &&
            result.bundle.step < cfg.iterations)
            save_checkpoint(detail::checkpoint_name(cfg.out_dir, result.bundle.step), result.bundle,
                            &result.trainer);
    }
    result.final_checkpoint = detail::checkpoint_name(cfg.out_dir, result.bundle.step);
    save_checkpoint(result.final_checkpoint, result.bundle, &result.trainer);
    return result;
}

}  // namespace vcstar
