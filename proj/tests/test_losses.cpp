#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "vcstar/adam.hpp"
#include "vcstar/losses.hpp"
#include "vcstar/models.hpp"

using namespace vcstar;

namespace {

Tensor log_probs_of(std::vector<float> probs) {
    for (auto& p : probs) p = std::log(p);
    return Tensor::from_data({static_cast<int>(probs.size())}, probs);
}

}  // namespace

TEST_CASE("adv_loss_d at D=0.5 on real and fake equals 2 ln 2") {
    Tensor log_real = log_probs_of({0.5f});
    Tensor log_fake = log_probs_of({0.5f});
    Tensor log1m = log_one_minus_from_log_d(log_fake);
    Tensor loss = adv_loss_d(log_real, log_fake, log1m);
    CHECK(loss.item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("adv_loss_d goes to zero for a perfect discriminator") {
    for (float eps : {1e-3f, 1e-5f}) {
        Tensor log_real = log_probs_of({1.0f - eps});
        Tensor log_fake = log_probs_of({eps});
        Tensor loss = adv_loss_d(log_real, log_fake, log_one_minus_from_log_d(log_fake));
        CHECK(loss.item() < 2.5f * eps * 2.0f + 1e-4f);
        CHECK(loss.item() >= 0.0f);
    }
}

TEST_CASE("adv_loss_d matches the direct scalar formula on random probabilities") {
    Pcg32 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        float pr = 0.01f + 0.98f * static_cast<float>(rng.next_double());
        float pf = 0.01f + 0.98f * static_cast<float>(rng.next_double());
        Tensor loss = adv_loss_d(log_probs_of({pr}), log_probs_of({pf}),
                                 log_one_minus_from_log_d(log_probs_of({pf})));
        double expect = -(std::log(pr) + std::log(1.0 - pf));
        CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("adv_loss_d rejects positive log-probabilities") {
    Tensor bad = Tensor::from_data({1}, {0.5f});
    Tensor ok = log_probs_of({0.5f});
    CHECK_THROWS_AS(adv_loss_d(bad, ok, ok), NumericError);
}

TEST_CASE("adv_loss_g values") {
    CHECK(adv_loss_g(log_probs_of({1.0f})).item() == doctest::Approx(0.0));
    CHECK(adv_loss_g(log_probs_of({0.5f})).item() == doctest::Approx(std::log(2.0)));
    CHECK(adv_loss_g(log_probs_of({0.1f})).item() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
}

TEST_CASE("cls losses: uniform four-class single segment gives ln 4") {
    Tensor logp = log_probs_of({0.25f, 0.25f});
    CHECK(cls_loss_c(logp).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(cls_loss_g(logp).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(cls_loss_c(log_probs_of({1.0f})).item() == doctest::Approx(0.0));
}

TEST_CASE("cls loss under product pooling: S uniform segments give S ln 4") {
    int segments = 24;
    float agg = static_cast<float>(segments) * std::log(0.25f);
    Tensor logp = Tensor::from_data({2}, {agg, agg});
    CHECK(cls_loss_c(logp).item() ==
          doctest::Approx(segments * std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("cyc_loss and id_loss basics") {
    Pcg32 rng(7);
    Tensor x = Tensor::uniform({2, 1, 3, 5}, -1.0f, 1.0f, rng);
    CHECK(cyc_loss(x, x, 1.0f).item() == doctest::Approx(0.0));
    CHECK(id_loss(x, x, 1.0f).item() == doctest::Approx(0.0));

    // uniform offset delta over E elements: loss = E * delta (batch 1)
    Tensor a = Tensor::zeros({1, 1, 4, 5});
    Tensor b = Tensor::filled({1, 1, 4, 5}, 0.3f);
    CHECK(cyc_loss(a, b, 1.0f).item() == doctest::Approx(20.0 * 0.3).epsilon(1e-6));
    CHECK(id_loss(a, b, 1.0f).item() == doctest::Approx(20.0 * 0.3).epsilon(1e-6));
}

TEST_CASE("cyc_loss is invariant to batch permutation") {
    Pcg32 rng(11);
    Tensor x = Tensor::uniform({3, 1, 2, 4}, -1.0f, 1.0f, rng);
    Tensor y = Tensor::uniform({3, 1, 2, 4}, -1.0f, 1.0f, rng);
    // permute batch order of both
    auto permute = [](const Tensor& t) {
        Tensor out = Tensor::zeros(t.shape());
        int64_t inner = t.numel() / t.dim(0);
        int perm[3] = {2, 0, 1};
        for (int b = 0; b < 3; ++b)
            for (int64_t i = 0; i < inner; ++i)
                out.mutable_value()[static_cast<size_t>(perm[b] * inner + i)] =
                    t.value()[static_cast<size_t>(b * inner + i)];
        return out;
    };
    CHECK(cyc_loss(x, y, 1.0f).item() ==
          doctest::Approx(cyc_loss(permute(x), permute(y), 1.0f).item()).epsilon(1e-6));
}

TEST_CASE("total objectives compose affinely") {
    LossWeights w;
    w.lambda_cls = 1.0f;
    w.lambda_cyc = 10.0f;
    w.lambda_id = 5.0f;
    Tensor adv = Tensor::scalar(1.0f), cls = Tensor::scalar(2.0f), cyc = Tensor::scalar(3.0f),
           id = Tensor::scalar(4.0f);
    CHECK(total_g(adv, cls, cyc, id, w, w.lambda_id).item() ==
          doctest::Approx(1.0 + 2.0 + 30.0 + 20.0));

    w.lambda_cls = w.lambda_cyc = w.lambda_id = 0.0f;
    CHECK(total_g(adv, cls, cyc, id, w, 0.0f).item() == doctest::Approx(1.0));

    CHECK(total_d(Tensor::scalar(7.5f)).item() == doctest::Approx(7.5));
    CHECK(total_c(Tensor::scalar(2.5f)).item() == doctest::Approx(2.5));
}

TEST_CASE("total_g is affine in each lambda with the component as coefficient") {
    Pcg32 rng(13);
    Tensor adv = Tensor::scalar(0.9f), cls = Tensor::scalar(1.7f), cyc = Tensor::scalar(0.4f),
           id = Tensor::scalar(2.2f);
    LossWeights w;
    for (float l : {0.0f, 1.0f, 3.5f}) {
        w.lambda_cyc = l;
        float base = total_g(adv, cls, cyc, id, w, w.lambda_id).item();
        w.lambda_cyc = l + 1.0f;
        float bump = total_g(adv, cls, cyc, id, w, w.lambda_id).item();
        CHECK(bump - base == doctest::Approx(cyc.item()).epsilon(1e-5));
    }
}

TEST_CASE("identity-loss schedule switches off after id_decay_iters") {
    LossWeights w;
    w.lambda_id = 5.0f;
    w.id_decay_iters = 100;
    CHECK(w.effective_lambda_id(0) == 5.0f);
    CHECK(w.effective_lambda_id(99) == 5.0f);
    CHECK(w.effective_lambda_id(100) == 0.0f);
    w.id_decay_iters = 0;  // constant schedule
    CHECK(w.effective_lambda_id(1000000) == 5.0f);
}

TEST_CASE("nonnegativity of the StarGAN losses on random inputs") {
    Pcg32 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        int b = 1 + static_cast<int>(rng.next_below(4));
        std::vector<float> lr(static_cast<size_t>(b)), lf(static_cast<size_t>(b)), lp(static_cast<size_t>(b));
        for (int i = 0; i < b; ++i) {
            lr[static_cast<size_t>(i)] = std::log(std::max(1e-30, rng.next_double()));
            lf[static_cast<size_t>(i)] = std::log(std::max(1e-30, rng.next_double()));
            lp[static_cast<size_t>(i)] = std::log(std::max(1e-30, rng.next_double()));
        }
        Tensor tlr = clamp_log_probs(Tensor::from_data({b}, lr));
        Tensor tlf = clamp_log_probs(Tensor::from_data({b}, lf));
        Tensor tlp = clamp_log_probs(Tensor::from_data({b}, lp));
        CHECK(adv_loss_d(tlr, tlf, log_one_minus_from_log_d(tlf)).item() >= 0.0f);
        CHECK(adv_loss_g(tlf).item() >= 0.0f);
        CHECK(cls_loss_c(tlp).item() >= 0.0f);
        Tensor x = Tensor::uniform({b, 3}, -1.0f, 1.0f, rng);
        Tensor y = Tensor::uniform({b, 3}, -1.0f, 1.0f, rng);
        CHECK(cyc_loss(x, y, 1.0f).item() >= 0.0f);
    }
}

TEST_CASE("zero-sum structure: fake terms of D and G come from one tensor") {
    Pcg32 rng(19);
    for (int trial = 0; trial < 10; ++trial) {
        float p = 0.05f + 0.9f * static_cast<float>(rng.next_double());
        Tensor log_fake = log_probs_of({p});
        Tensor g_term = adv_loss_g(log_fake);
        Tensor d_fake_term = -mean(log_one_minus_from_log_d(log_fake));
        CHECK(g_term.item() == doctest::Approx(-std::log(p)).epsilon(1e-6));
        CHECK(d_fake_term.item() == doctest::Approx(-std::log(1.0 - p)).epsilon(1e-6));
    }
}

TEST_CASE("one adv_loss_g step on G strictly increases mean log D(fake)") {
    ArchSpec arch;
    arch.feature_dim = 8;
    arch.label_dim = 2;
    arch.num_classes = 2;
    arch.gen_encoder = {{4, 3, 3, 1, 1}, {6, 4, 4, 2, 2}};
    arch.gen_decoder = {{4, 4, 4, 2, 2}};
    arch.gen_output = {1, 3, 3, 1, 1};
    arch.dis_layers = {{4, 3, 3, 2, 2}, {4, 3, 3, 2, 2}};
    arch.cls_layers = arch.dis_layers;
    Pcg32 rng(23);
    GeneratorParams g = init_generator(arch, rng);
    DiscriminatorParams d = init_discriminator(arch, rng);
    Tensor x = Tensor::uniform({2, 1, 8, 16}, -1.0f, 1.0f, rng);
    std::vector<AttributeLabel> labels(2, AttributeLabel::single(2, 1));

    auto mean_log_d = [&](bool track) {
        Tensor fake = generator_forward(x, labels, g, arch, track);
        auto dout = discriminator_forward(fake, labels, d, arch, false);
        return mean(clamp_log_probs(dout.patch_log_probs));
    };

    double before = mean_log_d(true).item();
    Tensor fake = generator_forward(x, labels, g, arch, true);
    auto dout = discriminator_forward(fake, labels, d, arch, false);
    Tensor loss = adv_loss_g(sum_per_sample(clamp_log_probs(dout.patch_log_probs)));
    std::vector<Tensor> params;
    visit_params(g, [&](const std::string&, Tensor& t) { params.push_back(t); });
    zero_grads(params);
    loss.backward();
    AdamConfig cfg;
    cfg.lr = 1e-3f;
    AdamState st = AdamState::for_params(params);
    adam_step(params, st, cfg);
    double after = mean_log_d(true).item();
    CHECK(after > before);
}

TEST_CASE("cyclegan reference losses: neutral discriminators and identity generators") {
    Pcg32 rng(29);
    Tensor x = Tensor::uniform({2, 1, 3, 4}, -1.0f, 1.0f, rng);
    Tensor y = Tensor::uniform({2, 1, 3, 4}, -1.0f, 1.0f, rng);
    std::vector<double> half{0.5, 0.5};
    auto t = cyclegan_losses(half, half, half, half, x, x, y, y, x, y, 10.0f, 5.0f);
    CHECK(t.i_d == doctest::Approx(2.0 * 2.0 * std::log(2.0)).epsilon(1e-9));
    CHECK(t.cyc == doctest::Approx(0.0));
    CHECK(t.id == doctest::Approx(0.0));
    CHECK(t.i_gf == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-9));
}

TEST_CASE("cyclegan losses clamp perfect fooling instead of diverging") {
    Pcg32 rng(31);
    Tensor x = Tensor::uniform({1, 1, 2, 2}, -1.0f, 1.0f, rng);
    std::vector<double> ones{1.0};
    std::vector<double> real{0.8};
    auto t = cyclegan_losses(real, ones, real, ones, x, x, x, x, x, x, 1.0f, 1.0f);
    CHECK(std::isfinite(t.adv_g));
    CHECK(t.adv_g == doctest::Approx(std::log(static_cast<double>(kProbEps))).epsilon(1e-6));
    CHECK(std::isfinite(t.i_d));
}

TEST_CASE("cyclegan losses match a direct formula evaluation on a random instance") {
    Pcg32 rng(37);
    auto rand_probs = [&](int n) {
        std::vector<double> p(static_cast<size_t>(n));
        for (auto& v : p) v = 0.02 + 0.96 * rng.next_double();
        return p;
    };
    auto dyr = rand_probs(3), dyf = rand_probs(3), dxr = rand_probs(3), dxf = rand_probs(3);
    Tensor x = Tensor::uniform({3, 1, 2, 3}, -1.0f, 1.0f, rng);
    Tensor fgx = Tensor::uniform({3, 1, 2, 3}, -1.0f, 1.0f, rng);
    Tensor y = Tensor::uniform({3, 1, 2, 3}, -1.0f, 1.0f, rng);
    Tensor gfy = Tensor::uniform({3, 1, 2, 3}, -1.0f, 1.0f, rng);
    Tensor fx = Tensor::uniform({3, 1, 2, 3}, -1.0f, 1.0f, rng);
    Tensor gy = Tensor::uniform({3, 1, 2, 3}, -1.0f, 1.0f, rng);
    float lc = 7.0f, li = 2.0f;
    auto t = cyclegan_losses(dyr, dyf, dxr, dxf, x, fgx, y, gfy, fx, gy, lc, li);

    auto ml = [](const std::vector<double>& v, bool one_minus) {
        double a = 0.0;
        for (double p : v) a += std::log(one_minus ? 1.0 - p : p);
        return a / static_cast<double>(v.size());
    };
    auto l1 = [](const Tensor& a, const Tensor& b) {
        double acc = 0.0;
        for (size_t i = 0; i < a.value().size(); ++i)
            acc += std::abs(static_cast<double>(a.value()[i]) - b.value()[i]);
        return acc / a.dim(0);
    };
    double cyc = l1(fgx, x) + l1(gfy, y);
    double id = l1(fx, x) + l1(gy, y);
    double i_gf = ml(dyf, true) + ml(dxf, true) + lc * cyc + li * id;
    double i_d = (-ml(dyr, false) - ml(dyf, true)) + (-ml(dxr, false) - ml(dxf, true));
    CHECK(t.i_gf == doctest::Approx(i_gf).epsilon(1e-6));
    CHECK(t.i_d == doctest::Approx(i_d).epsilon(1e-6));
}
