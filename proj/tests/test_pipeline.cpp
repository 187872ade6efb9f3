#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "vcstar/pipeline.hpp"
#include "vcstar/toydata.hpp"

using namespace vcstar;
namespace fs = std::filesystem;

namespace {

struct ToyFixture {
    fs::path root;
    fs::path cache;
    DatasetManifest manifest;
    FeatureStore store;
    DspConfig dsp;

    ToyFixture() {
        root = fs::temp_directory_path() / "vcstar_toy_unit";
        cache = fs::temp_directory_path() / "vcstar_toy_unit_cache";
        if (!fs::exists(root / "spk_d")) {
            fs::remove_all(root);
            ToyDatasetOptions opt;
            opt.utterances_per_speaker = 5;
            opt.seconds_per_utterance = 2.5;
            make_toy_dataset(root.string(), opt);
        }
        manifest = scan_dataset(root.string());
        store = extract_and_cache(manifest, dsp, cache.string());
    }
};

ToyFixture& fixture() {
    static ToyFixture f;
    return f;
}

ArchSpec tiny_arch() {
    ArchSpec a;
    a.gen_encoder = {{8, 3, 9, 1, 1}, {12, 4, 8, 2, 2}, {16, 4, 8, 2, 2}};
    a.gen_decoder = {{12, 4, 8, 2, 2}, {8, 4, 8, 2, 2}};
    a.gen_output = {1, 3, 9, 1, 1};
    a.dis_layers = {{8, 3, 9, 2, 2}, {8, 3, 9, 2, 2}};
    a.cls_layers = {{8, 3, 9, 2, 2}, {8, 3, 9, 2, 2}};
    return a;
}

TrainConfig tiny_train_config(const fs::path& out_dir) {
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.batch_size = 2;
    cfg.crop_frames = 16;
    cfg.iterations = 4;
    cfg.checkpoint_interval = 2;
    cfg.arch = tiny_arch();
    cfg.weights.id_decay_iters = 0;
    cfg.out_dir = out_dir.string();
    return cfg;
}

}  // namespace

TEST_CASE("scan_dataset finds 4 speakers with dense attribute indices") {
    auto& f = fixture();
    REQUIRE(f.manifest.speakers.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(f.manifest.speakers[i].attribute_index == static_cast<int>(i));
        CHECK(f.manifest.speakers[i].utterances.size() == 5);
    }
    CHECK(f.manifest.speakers[0].id == "spk_a");
    CHECK(f.manifest.speakers[3].id == "spk_d");
}

TEST_CASE("scan_dataset is deterministic") {
    auto& f = fixture();
    DatasetManifest again = scan_dataset(f.root.string());
    CHECK(again == f.manifest);
}

TEST_CASE("scan_dataset error paths") {
    CHECK_THROWS_AS(scan_dataset("/nonexistent/vcstar/path"), IoError);

    auto empty_root = fs::temp_directory_path() / "vcstar_empty_root";
    fs::create_directories(empty_root);
    CHECK_THROWS_AS(scan_dataset(empty_root.string()), ConfigError);

    auto empty_spk = fs::temp_directory_path() / "vcstar_empty_spk";
    fs::create_directories(empty_spk / "spk_x");
    CHECK_THROWS_AS(scan_dataset(empty_spk.string()), ConfigError);
    fs::remove_all(empty_root);
    fs::remove_all(empty_spk);
}

TEST_CASE("toy dataset generation is deterministic") {
    auto dir_a = fs::temp_directory_path() / "vcstar_toy_det_a";
    auto dir_b = fs::temp_directory_path() / "vcstar_toy_det_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    ToyDatasetOptions opt;
    opt.speakers = 2;
    opt.utterances_per_speaker = 1;
    opt.seconds_per_utterance = 1.0;
    make_toy_dataset(dir_a.string(), opt);
    make_toy_dataset(dir_b.string(), opt);
    for (const auto& e : fs::recursive_directory_iterator(dir_a)) {
        if (!e.is_regular_file()) continue;
        auto rel = fs::relative(e.path(), dir_a);
        std::ifstream fa(e.path(), std::ios::binary), fb(dir_b / rel, std::ios::binary);
        std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        CHECK(ba == bb);
    }
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("extraction caches by content hash: second pass does zero work") {
    auto& f = fixture();
    size_t performed = 0;
    FeatureStore again = extract_and_cache(f.manifest, f.dsp, f.cache.string(), &performed);
    CHECK(performed == 0);
    CHECK(again.norm.mean == f.store.norm.mean);
    CHECK(again.norm.std == f.store.norm.std);
    REQUIRE(again.utterances.size() == f.store.utterances.size());
    for (size_t i = 0; i < again.utterances.size(); ++i)
        CHECK(again.utterances[i].mcc.values == f.store.utterances[i].mcc.values);
}

TEST_CASE("cache layout follows <cache>/<speaker>/<utt>.mcc.fea1") {
    auto& f = fixture();
    CHECK(fs::exists(f.cache / "spk_a" / "utt00.mcc.fea1"));
    CHECK(fs::exists(f.cache / "spk_a" / "utt00.f0.fea1"));
}

TEST_CASE("FEA1 override bypasses analysis and is byte-identical on re-read") {
    auto root = fs::temp_directory_path() / "vcstar_fea_override";
    auto cache = fs::temp_directory_path() / "vcstar_fea_override_cache";
    fs::remove_all(root);
    fs::remove_all(cache);
    fs::create_directories(root / "spk_x");
    fs::create_directories(root / "spk_y");

    Pcg32 rng(3);
    DspConfig dsp;
    auto write_pair = [&](const fs::path& dir, const std::string& stem, double f0_base) {
        FeaMatrix mcc;
        mcc.q = static_cast<uint32_t>(dsp.mcep_order);
        mcc.n = 50;
        mcc.kind = FeaKind::Mcc;
        mcc.values.resize(static_cast<size_t>(mcc.q) * mcc.n);
        for (auto& v : mcc.values) v = rng.uniform(-1.0f, 1.0f);
        fea_write((dir / (stem + ".mcc.fea1")).string(), mcc);
        FeaMatrix f0;
        f0.q = 1;
        f0.n = 50;
        f0.kind = FeaKind::F0;
        f0.values.resize(50);
        for (size_t i = 0; i < 50; ++i)
            f0.values[i] = (i % 4 == 0) ? 0.0f : static_cast<float>(f0_base) + rng.uniform(-5.0f, 5.0f);
        fea_write((dir / (stem + ".f0.fea1")).string(), f0);
        return fea_encode(mcc);
    };
    for (int u = 0; u < 3; ++u) write_pair(root / "spk_x", "u" + std::to_string(u), 120.0);
    std::string y0_bytes;
    for (int u = 0; u < 3; ++u) {
        auto b = write_pair(root / "spk_y", "u" + std::to_string(u), 220.0);
        if (u == 0) y0_bytes = b;
    }

    auto manifest = scan_dataset(root.string());
    size_t performed = 0;
    FeatureStore store = extract_and_cache(manifest, dsp, cache.string(), &performed);
    CHECK(performed == 6);
    // cached copy is bit-exact against the source FEA1
    std::ifstream cf(cache / "spk_y" / "u0.mcc.fea1", std::ios::binary);
    std::string cached((std::istreambuf_iterator<char>(cf)), std::istreambuf_iterator<char>());
    CHECK(cached == y0_bytes);
    CHECK(store.utterances.size() == 6);
    fs::remove_all(root);
    fs::remove_all(cache);
}

TEST_CASE("eval utterances never influence normalization or F0 stats") {
    auto& f = fixture();
    DatasetManifest train_only = f.manifest;
    for (auto& sp : train_only.speakers) {
        std::vector<ManifestUtterance> keep;
        for (auto& u : sp.utterances)
            if (!u.eval_split) keep.push_back(u);
        sp.utterances = keep;
    }
    auto cache2 = fs::temp_directory_path() / "vcstar_toy_unit_cache_trainonly";
    FeatureStore store2 = extract_and_cache(train_only, f.dsp, cache2.string());
    CHECK(store2.norm.mean == f.store.norm.mean);
    CHECK(store2.norm.std == f.store.norm.std);
    REQUIRE(store2.f0_stats.size() == f.store.f0_stats.size());
    for (size_t i = 0; i < store2.f0_stats.size(); ++i) {
        CHECK(store2.f0_stats[i].mean_logf0 == f.store.f0_stats[i].mean_logf0);
        CHECK(store2.f0_stats[i].std_logf0 == f.store.f0_stats[i].std_logf0);
    }
}

TEST_CASE("normalization round trip is the identity within 1e-6") {
    auto& f = fixture();
    const auto& utt = f.store.utterances[0];
    Tensor view = features_to_net_input(utt.mcc, f.store.norm);
    FeatureSequence back = net_output_to_features(view, utt.mcc, f.store.norm);
    REQUIRE(back.q == utt.mcc.q);
    REQUIRE(back.n == utt.mcc.n);
    for (int d = 0; d < back.q; ++d)
        for (int t = 0; t < back.n; ++t) {
            float scale = std::max(1.0f, std::abs(utt.mcc.at(d, t)));
            CHECK(std::abs(back.at(d, t) - utt.mcc.at(d, t)) / scale < 1e-6f);
        }
}

TEST_CASE("minibatch with crop equal to utterance length is the full sequence") {
    auto& f = fixture();
    FeatureStore one;
    one.speakers = {"spk_a"};
    one.utterances = {f.store.utterances[0]};
    one.utterances[0].eval_split = false;
    one.train_indices = {0};
    one.norm = f.store.norm;
    one.f0_stats = {f.store.f0_stats[0]};
    int n = one.utterances[0].mcc.n;
    Pcg32 rng(5);
    Minibatch mb = sample_minibatch(one, 1, n, rng);
    Tensor full = features_to_net_input(one.utterances[0].mcc, one.norm);
    CHECK(mb.x.value() == full.value());
}

TEST_CASE("minibatch sampling is deterministic per seed") {
    auto& f = fixture();
    Pcg32 a(9), b(9), c(10);
    Minibatch ma = sample_minibatch(f.store, 4, 32, a);
    Minibatch mb = sample_minibatch(f.store, 4, 32, b);
    Minibatch mc = sample_minibatch(f.store, 4, 32, c);
    CHECK(ma.x.value() == mb.x.value());
    CHECK(ma.tgt_attr == mb.tgt_attr);
    CHECK((ma.x.value() != mc.x.value() || ma.tgt_attr != mc.tgt_attr));
}

TEST_CASE("target attributes are sampled uniformly (3-sigma check)") {
    auto& f = fixture();
    Pcg32 rng(11);
    const int draws = 10000;
    std::vector<int> counts(4, 0);
    for (int i = 0; i < draws / 4; ++i) {
        Minibatch mb = sample_minibatch(f.store, 4, 8, rng);
        for (int t : mb.tgt_attr) counts[static_cast<size_t>(t)] += 1;
    }
    double expect = draws / 4.0;
    double sigma = std::sqrt(draws * 0.25 * 0.75);
    for (int k = 0; k < 4; ++k) CHECK(std::abs(counts[static_cast<size_t>(k)] - expect) < 3.0 * sigma);
}

TEST_CASE("reflection padding covers utterances shorter than the crop") {
    FeatureStore s;
    s.speakers = {"only"};
    CachedUtterance u;
    u.speaker = "only";
    u.attribute = 0;
    u.mcc.q = 3;
    u.mcc.n = 4;
    u.mcc.values = {0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8};  // rows: c0, d1, d2
    u.f0 = {100, 100, 100, 100};
    s.utterances = {u};
    s.train_indices = {0};
    s.norm.mean = {0, 0, 0};
    s.norm.std = {1, 1, 1};
    Pcg32 rng(13);
    Minibatch mb = sample_minibatch(s, 1, 8, rng);
    // row d1 = [1,2,3,4] reflected: 1 2 3 4 3 2 1 2
    const float* row = mb.x.value().data();
    float expect[8] = {1, 2, 3, 4, 3, 2, 1, 2};
    for (int t = 0; t < 8; ++t) CHECK(row[t] == doctest::Approx(expect[t]));
}

TEST_CASE("train_step emits exactly the documented metric keys") {
    auto& f = fixture();
    TrainConfig cfg = tiny_train_config(fs::temp_directory_path() / "vcstar_run_keys");
    cfg.arch.label_dim = 4;
    cfg.arch.num_classes = 4;
    cfg.arch.feature_dim = 35;
    ModelBundle bundle;
    Pcg32 init_rng(cfg.seed);
    bundle.arch = cfg.arch;
    bundle.dsp = cfg.dsp;
    bundle.gen = init_generator(cfg.arch, init_rng);
    bundle.dis = init_discriminator(cfg.arch, init_rng);
    bundle.cls = init_classifier(cfg.arch, init_rng);
    bundle.norm = f.store.norm;
    for (int s = 0; s < 4; ++s)
        bundle.speakers.push_back({f.store.speakers[static_cast<size_t>(s)], f.store.f0_stats[static_cast<size_t>(s)]});
    TrainerState ts;
    ts.opt_g = AdamState::for_params(trainable_tensors(bundle.gen));
    ts.opt_d = AdamState::for_params(trainable_tensors(bundle.dis));
    ts.opt_c = AdamState::for_params(trainable_tensors(bundle.cls));
    ts.rng = Pcg32(1, 1);
    ts.present = true;
    Minibatch batch = sample_minibatch(f.store, 2, 16, ts.rng);
    auto m = train_step(bundle, ts, batch, cfg.weights, cfg.adam_g, cfg.adam_d, cfg.adam_c, 0);
    std::set<std::string> keys;
    for (auto& [k, v] : m) keys.insert(k);
    CHECK(keys == std::set<std::string>{"adv_d", "adv_g", "cls_c", "cls_g", "cyc", "id", "total_g"});
    for (auto& [k, v] : m) CHECK(std::isfinite(v));
}

TEST_CASE("training is deterministic: identical seeds give identical metric traces") {
    auto& f = fixture();
    auto run = [&](const std::string& tag) {
        TrainConfig cfg = tiny_train_config(fs::temp_directory_path() / tag);
        fs::remove_all(cfg.out_dir);
        std::vector<double> trace;
        TrainResult r = train(f.store, cfg, "", [&](int64_t, const std::map<std::string, double>& m) {
            trace.push_back(m.at("total_g"));
        });
        return std::make_pair(trace, r.bundle.gen.w_out.value());
    };
    auto a = run("vcstar_run_det_a");
    auto b = run("vcstar_run_det_b");
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);  // bitwise-identical parameters
}

TEST_CASE("iterations=0 writes the initial checkpoint only") {
    auto& f = fixture();
    TrainConfig cfg = tiny_train_config(fs::temp_directory_path() / "vcstar_run_zero");
    fs::remove_all(cfg.out_dir);
    cfg.iterations = 0;
    TrainResult r = train(f.store, cfg);
    int count = 0;
    for (const auto& e : fs::directory_iterator(cfg.out_dir))
        if (e.path().extension() == ".vcck") ++count;
    CHECK(count == 1);
    CHECK(fs::exists(r.final_checkpoint));
    CHECK(r.bundle.step == 0);
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
    auto& f = fixture();
    TrainConfig cfg = tiny_train_config(fs::temp_directory_path() / "vcstar_run_ckpt");
    fs::remove_all(cfg.out_dir);
    cfg.iterations = 2;
    TrainResult r = train(f.store, cfg);
    TrainerState ts;
    ModelBundle loaded = load_checkpoint(r.final_checkpoint, &ts);
    REQUIRE(ts.present);
    std::string copy = r.final_checkpoint + ".copy";
    save_checkpoint(copy, loaded, &ts);
    std::ifstream fa(r.final_checkpoint, std::ios::binary), fb(copy, std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);
    CHECK(ba.size() > 0);
}

TEST_CASE("resume from a checkpoint continues the exact trajectory") {
    auto& f = fixture();
    TrainConfig straight_cfg = tiny_train_config(fs::temp_directory_path() / "vcstar_run_straight");
    fs::remove_all(straight_cfg.out_dir);
    TrainResult straight = train(f.store, straight_cfg);  // 4 iterations

    TrainConfig resume_cfg = tiny_train_config(fs::temp_directory_path() / "vcstar_run_resume");
    fs::remove_all(resume_cfg.out_dir);
    TrainResult first_half = train(f.store, [&] {
        TrainConfig c = resume_cfg;
        c.iterations = 2;
        return c;
    }());
    TrainResult resumed = train(f.store, resume_cfg, first_half.final_checkpoint);

    CHECK(resumed.bundle.step == straight.bundle.step);
    auto sp = trainable_tensors(straight.bundle.gen);
    auto rp = trainable_tensors(resumed.bundle.gen);
    REQUIRE(sp.size() == rp.size());
    for (size_t i = 0; i < sp.size(); ++i) CHECK(sp[i].value() == rp[i].value());
    auto sd = trainable_tensors(straight.bundle.dis);
    auto rd = trainable_tensors(resumed.bundle.dis);
    for (size_t i = 0; i < sd.size(); ++i) CHECK(sd[i].value() == rd[i].value());
}

TEST_CASE("with lambdas zero and frozen D, a G step decreases adv_loss_g on the same batch") {
    auto& f = fixture();
    ArchSpec arch = tiny_arch();
    arch.label_dim = 4;
    arch.num_classes = 4;
    arch.feature_dim = 35;
    Pcg32 rng(21);
    GeneratorParams gen = init_generator(arch, rng);
    DiscriminatorParams dis = init_discriminator(arch, rng);
    Pcg32 srng(22);
    Minibatch batch = sample_minibatch(f.store, 2, 16, srng);

    auto eval_loss = [&]() {
        Tensor fake = generator_forward(batch.x, batch.tgt_labels, gen, arch, true);
        auto dout = discriminator_forward(fake, batch.tgt_labels, dis, arch, false);
        return adv_loss_g(sum_per_sample(clamp_log_probs(dout.patch_log_probs)));
    };
    double before = eval_loss().item();
    Tensor loss = eval_loss();
    auto params = trainable_tensors(gen);
    zero_grads(params);
    loss.backward();
    AdamConfig cfg;
    cfg.lr = 5e-4f;
    AdamState st = AdamState::for_params(params);
    adam_step(params, st, cfg);
    double after = eval_loss().item();
    CHECK(after < before);
}

TEST_CASE("classifier reaches 80 percent held-out accuracy within 2000 steps") {
    auto& f = fixture();
    ArchSpec arch;  // full-size classifier stack
    arch.label_dim = 4;
    arch.num_classes = 4;
    arch.feature_dim = 35;
    Pcg32 rng(31);
    ClassifierParams cls = init_classifier(arch, rng);
    auto params = [&] {
        std::vector<Tensor> out;
        visit_params(cls, "C", [&](const std::string&, Tensor& t) { out.push_back(t); });
        return out;
    }();
    AdamState st = AdamState::for_params(params);
    AdamConfig cfg;
    cfg.lr = 1e-4f;
    Pcg32 srng(32);
    for (int step = 0; step < 2000; ++step) {
        Minibatch batch = sample_minibatch(f.store, 4, 24, srng);
        auto out = classifier_forward(batch.x, cls, arch, true);
        Tensor agg = sum_spatial(clamp_log_probs(out.segment_log_probs));
        Tensor loss = cls_loss_c(select_class_log_prob(agg, batch.src_attr));
        zero_grads(params);
        loss.backward();
        adam_step(params, st, cfg);
    }
    // held-out segment accuracy on eval crops
    int hits = 0, total = 0;
    for (size_t idx : f.store.eval_indices) {
        const auto& utt = f.store.utterances[idx];
        Tensor view = features_to_net_input(utt.mcc, f.store.norm);
        auto out = classifier_forward(view, cls, arch, false);
        const auto& lp = out.class_log_prob.value();
        int best = 0;
        for (int j = 1; j < 4; ++j)
            if (lp[static_cast<size_t>(j)] > lp[static_cast<size_t>(best)]) best = j;
        hits += (best == utt.attribute) ? 1 : 0;
        total += 1;
    }
    REQUIRE(total > 0);
    CHECK(static_cast<double>(hits) / total >= 0.8);
}
