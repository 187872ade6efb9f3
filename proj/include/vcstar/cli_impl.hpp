#pragma once

// Subcommands: extract | train | convert | eval | selftest.
// Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
// Stdout is line-oriented and stable-ordered; metrics go to files.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "convert.hpp"
#include "pipeline.hpp"
#include "selftest.hpp"
#include "toydata.hpp"

namespace vcstar {

namespace cli {

namespace fs = std::filesystem;

inline TrainConfig load_train_config(const std::string& path) {
    TrainConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error in ") + path + ": " + e.what());
    }
    j.get_to(cfg);
    return cfg;
}

inline int cmd_extract(const std::string& data_dir, const std::string& cache_dir,
                       const std::string& config_path) {
    TrainConfig cfg = load_train_config(config_path);
    DatasetManifest manifest = scan_dataset(data_dir);
    size_t performed = 0;
    FeatureStore store = extract_and_cache(manifest, cfg.dsp, cache_dir, &performed);
    std::printf("speakers: %d\n", store.num_speakers());
    std::printf("utterances: %zu\n", store.utterances.size());
    std::printf("extracted: %zu\n", performed);
    std::printf("cached: %zu\n", store.utterances.size() - performed);
    return 0;
}

inline int cmd_train(const std::string& config_path, uint64_t* seed_override,
                     int64_t* iterations_override, const std::string& data_override,
                     const std::string& cache_override, const std::string& out_override,
                     const std::string& resume) {
    TrainConfig cfg = load_train_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (iterations_override) cfg.iterations = *iterations_override;
    if (!data_override.empty()) cfg.data_dir = data_override;
    if (!cache_override.empty()) cfg.cache_dir = cache_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (cfg.data_dir.empty()) throw ConfigError("no dataset directory (use --data or the config file)");

    DatasetManifest manifest = scan_dataset(cfg.data_dir);
    FeatureStore store = extract_and_cache(manifest, cfg.dsp, cfg.cache_dir);

    fs::create_directories(cfg.out_dir);
    {  // every run logs the fully resolved configuration
        nlohmann::json j = cfg;
        std::ofstream f(fs::path(cfg.out_dir) / "config_resolved.json", std::ios::trunc);
        f << j.dump(2) << "\n";
    }
    std::printf("training: %lld iterations, %d speakers\n",
                static_cast<long long>(cfg.iterations), store.num_speakers());
    TrainResult result = train(store, cfg, resume, [](int64_t step, const std::map<std::string, double>& m) {
        if ((step + 1) % 100 == 0)
            std::printf("step %lld total_g %.4f adv_d %.4f cls_c %.4f cyc %.4f\n",
                        static_cast<long long>(step + 1), m.at("total_g"), m.at("adv_d"),
                        m.at("cls_c"), m.at("cyc"));
    });
    std::printf("final checkpoint: %s\n", result.final_checkpoint.c_str());
    return 0;
}

inline int cmd_convert(const std::string& checkpoint, const std::string& input,
                       const std::string& output, const std::string& target,
                       const std::string& source, const std::string& mode) {
    ModelBundle bundle = load_checkpoint(checkpoint);
    ConversionRequest req;
    req.target_attribute = bundle.speaker_index(target);
    if (!source.empty()) req.source_attribute = bundle.speaker_index(source);
    if (mode == "gain-reference")
        req.mode = ConversionMode::GainReference;
    else if (mode == "direct")
        req.mode = ConversionMode::Direct;
    else
        throw ConfigError("mode must be 'direct' or 'gain-reference'");

    auto ends_with = [&](const std::string& s, const std::string& suffix) {
        return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(input, ".mcc.fea1")) {
        req.features = FeatureSequence::from_fea(fea_read(input));
        std::string f0_path = input.substr(0, input.size() - 9) + ".f0.fea1";
        FeaMatrix f0m = fea_read(f0_path);
        req.f0.assign(f0m.values.begin(), f0m.values.end());
    } else {
        req.wave = wav_read(input);
    }

    ConversionResult res = convert_utterance(req, bundle);

    std::string stem = output;
    if (ends_with(stem, ".wav")) stem = stem.substr(0, stem.size() - 4);
    if (res.has_wave) {
        wav_write(stem + ".wav", res.wave);
        std::printf("wrote %s.wav\n", stem.c_str());
    }
    fea_write(stem + ".mcc.fea1", res.converted_mcc.to_fea(FeaKind::Mcc));
    FeaMatrix f0m;
    f0m.q = 1;
    f0m.n = static_cast<uint32_t>(res.converted_f0.size());
    f0m.kind = FeaKind::F0;
    f0m.values.assign(res.converted_f0.begin(), res.converted_f0.end());
    fea_write(stem + ".f0.fea1", f0m);
    std::printf("wrote %s.mcc.fea1\n", stem.c_str());
    std::printf("wrote %s.f0.fea1\n", stem.c_str());

    nlohmann::json meta{{"checkpoint", checkpoint},
                        {"input", input},
                        {"target", target},
                        {"source", source.empty() ? nlohmann::json() : nlohmann::json(source)},
                        {"mode", mode},
                        {"source_f0_mean_log", res.source_f0_stats.mean_logf0},
                        {"source_f0_std_log", res.source_f0_stats.std_logf0},
                        {"frames", res.converted_mcc.n}};
    std::ofstream mf(stem + ".json", std::ios::trunc);
    mf << meta.dump(2) << "\n";
    std::printf("wrote %s.json\n", stem.c_str());
    return 0;
}

inline int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
                    const std::string& cache_dir, const std::string& report_path) {
    ModelBundle bundle = load_checkpoint(checkpoint);
    DatasetManifest manifest = scan_dataset(data_dir);
    FeatureStore store = extract_and_cache(manifest, bundle.dsp, cache_dir);
    if (static_cast<int>(bundle.speakers.size()) != store.num_speakers())
        throw ConfigError("checkpoint speaker count does not match the dataset");
    EvalReport report = eval_conversion(bundle, store);
    nlohmann::json j = report.to_json();
    std::ofstream f(report_path, std::ios::trunc);
    if (!f) throw IoError("cannot write report: " + report_path);
    f << j.dump(2) << "\n";
    for (const auto& p : report.pairs)
        std::printf("%s->%s cls_acc %.3f d_score %.3f cyc_mcd %.2f id_mcd %.2f\n", p.source.c_str(),
                    p.target.c_str(), p.cls_accuracy, p.mean_d_score, p.cyc_mcd, p.id_mcd);
    std::printf("baseline real-feature accuracy: %.3f\n", report.baseline_overall);
    std::printf("report: %s\n", report_path.c_str());
    return 0;
}

inline int cmd_selftest(const std::string& make_toy_dir, uint64_t seed) {
    if (!make_toy_dir.empty()) {
        ToyDatasetOptions opt;
        opt.seed = seed;
        int n = make_toy_dataset(make_toy_dir, opt);
        std::printf("toy dataset: %d utterances, %d speakers at %s\n", n, opt.speakers,
                    make_toy_dir.c_str());
        return 0;
    }
    std::vector<SuiteResult> suites;
    suites.push_back(gradient_op_suite(seed));
    suites.push_back(gradient_network_suite(seed));
    suites.push_back(loss_identity_suite());
    bool all_ok = true;
    for (const auto& s : suites) {
        std::printf("%s: %d/%d passed\n", s.name.c_str(), s.checked - s.failed, s.checked);
        all_ok = all_ok && s.ok();
    }
    std::printf("selftest: %s\n", all_ok ? "ok" : "FAILED");
    return all_ok ? 0 : 1;
}

}  // namespace cli

inline int cli_main(int argc, char** argv) {
    // FEA1 and checkpoint payloads assume little-endian f32 hosts
    {
        uint32_t probe = 1;
        if (*reinterpret_cast<unsigned char*>(&probe) != 1) {
            std::fprintf(stderr, "error: big-endian hosts are not supported\n");
            return 1;
        }
    }

    CLI::App app{"non-parallel many-to-many voice conversion toolkit"};
    app.require_subcommand(1);

    auto* extract = app.add_subcommand("extract", "analyze a dataset into the feature cache");
    std::string ex_data, ex_cache, ex_config;
    extract->add_option("dataset", ex_data, "dataset root (one subdirectory per speaker)")->required();
    extract->add_option("--cache", ex_cache, "feature cache directory")->required();
    extract->add_option("--config", ex_config, "JSON config file");

    auto* train_cmd = app.add_subcommand("train", "train generator, discriminator and classifier");
    std::string tr_config, tr_data, tr_cache, tr_out, tr_resume;
    uint64_t tr_seed = 0;
    int64_t tr_iters = 0;
    bool tr_seed_set = false, tr_iters_set = false;
    train_cmd->add_option("--config", tr_config, "JSON config file");
    train_cmd->add_option("--seed", tr_seed, "PRNG seed override")->each([&](const std::string&) { tr_seed_set = true; });
    train_cmd->add_option("--iterations", tr_iters, "iteration count override")->each([&](const std::string&) { tr_iters_set = true; });
    train_cmd->add_option("--data", tr_data, "dataset root");
    train_cmd->add_option("--cache", tr_cache, "feature cache directory");
    train_cmd->add_option("--out", tr_out, "run output directory");
    train_cmd->add_option("--resume", tr_resume, "checkpoint to resume from");

    auto* convert_cmd = app.add_subcommand("convert", "convert one utterance to a target attribute");
    std::string cv_ckpt, cv_in, cv_out, cv_target, cv_source, cv_mode = "direct";
    convert_cmd->add_option("input", cv_in, "input WAV (or .mcc.fea1 with sibling .f0.fea1)")->required();
    convert_cmd->add_option("output", cv_out, "output path stem or .wav path")->required();
    convert_cmd->add_option("--checkpoint", cv_ckpt, "trained checkpoint")->required();
    convert_cmd->add_option("--target", cv_target, "target attribute (speaker) name")->required();
    convert_cmd->add_option("--source", cv_source, "source attribute name, if known");
    convert_cmd->add_option("--mode", cv_mode, "direct | gain-reference");

    auto* eval_cmd = app.add_subcommand("eval", "objective evaluation over all speaker pairs");
    std::string ev_ckpt, ev_data, ev_cache, ev_report = "report.json";
    eval_cmd->add_option("dataset", ev_data, "dataset root")->required();
    eval_cmd->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
    eval_cmd->add_option("--cache", ev_cache, "feature cache directory")->required();
    eval_cmd->add_option("--report", ev_report, "output report path");

    auto* selftest_cmd = app.add_subcommand("selftest", "run gradient-check and loss-identity suites");
    std::string st_make_toy;
    uint64_t st_seed = 0;
    selftest_cmd->add_option("--make-toy", st_make_toy, "write the bundled synthetic dataset here");
    selftest_cmd->add_option("--seed", st_seed, "suite seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*extract) return cli::cmd_extract(ex_data, ex_cache, ex_config);
        if (*train_cmd)
            return cli::cmd_train(tr_config, tr_seed_set ? &tr_seed : nullptr,
                                  tr_iters_set ? &tr_iters : nullptr, tr_data, tr_cache, tr_out,
                                  tr_resume);
        if (*convert_cmd) return cli::cmd_convert(cv_ckpt, cv_in, cv_out, cv_target, cv_source, cv_mode);
        if (*eval_cmd) return cli::cmd_eval(ev_ckpt, ev_data, ev_cache, ev_report);
        if (*selftest_cmd) return cli::cmd_selftest(st_make_toy, st_seed);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

}  // namespace vcstar
