#pragma once

// Self-contained verification suites: central finite-difference gradient
// checks over every differentiable op and over full (toy-sized) networks,
// plus exact loss-identity checks. Used by the `selftest` subcommand and by
// the acceptance suite.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "convert.hpp"

namespace vcstar {

struct SuiteResult {
    std::string name;
    int checked = 0;
    int failed = 0;
    bool ok() const { return failed == 0 && checked > 0; }
};

namespace detail {

struct GradCheckStats {
    int checked = 0;
    int failed = 0;
};

// Central finite differences vs analytic gradients for one parameter tensor.
inline void fd_check_tensor(Tensor& param, const std::function<Tensor()>& forward,
                            GradCheckStats& stats, float h = 1e-3f, float rel_tol = 1e-3f,
                            float abs_tol = 5e-4f) {
    Tensor loss = forward();
    param.zero_grad();
    loss.backward();
    std::vector<float> analytic = param.grad();
    auto& vals = param.mutable_value();
    for (size_t i = 0; i < vals.size(); ++i) {
        float keep = vals[i];
        vals[i] = keep + h;
        double fp = forward().item();
        vals[i] = keep - h;
        double fm = forward().item();
        vals[i] = keep;
        double fd = (fp - fm) / (2.0 * h);
        double err = std::abs(analytic[i] - fd);
        double denom = std::max(std::abs(static_cast<double>(analytic[i])), std::abs(fd));
        stats.checked += 1;
        if (err > std::max(static_cast<double>(rel_tol) * denom, static_cast<double>(abs_tol)))
            stats.failed += 1;
    }
}

inline Tensor rand_t(const Shape& s, Pcg32& rng, float scale = 1.0f, bool req = false) {
    Tensor t = Tensor::zeros(s, req);
    for (auto& v : t.mutable_value()) v = rng.uniform(-scale, scale);
    return t;
}

inline ArchSpec selftest_arch() {
    ArchSpec a;
    a.feature_dim = 8;
    a.label_dim = 2;
    a.num_classes = 2;
    a.gen_encoder = {{4, 3, 3, 1, 1}, {6, 4, 4, 2, 2}};
    a.gen_decoder = {{4, 4, 4, 2, 2}};
    a.gen_output = {1, 3, 3, 1, 1};
    a.dis_layers = {{4, 3, 3, 2, 2}, {4, 3, 3, 2, 2}};
    a.cls_layers = {{4, 3, 3, 2, 2}, {4, 3, 3, 2, 2}};
    return a;
}

}  // namespace detail

// Per-op finite-difference checks on small random tensors.
inline SuiteResult gradient_op_suite(uint64_t seed) {
    SuiteResult res{"gradient-ops"};
    detail::GradCheckStats st;
    Pcg32 rng(seed);

    {  // conv2d w.r.t. input, weight, bias
        Tensor x = detail::rand_t({2, 2, 5, 6}, rng, 1.0f, true);
        Tensor w = detail::rand_t({3, 2, 3, 3}, rng, 0.5f, true);
        Tensor b = detail::rand_t({3}, rng, 0.1f, true);
        Tensor coeffs = detail::rand_t({2, 3, 3, 3}, rng);
        auto fwd = [&]() { return sum(conv2d(x, w, b, {2, 2}, {1, 1}) * coeffs); };
        for (Tensor* p : {&x, &w, &b}) detail::fd_check_tensor(*p, fwd, st);
    }
    {  // conv2d_transposed
        Tensor x = detail::rand_t({1, 3, 3, 4}, rng, 1.0f, true);
        Tensor w = detail::rand_t({3, 2, 3, 3}, rng, 0.5f, true);
        Tensor b = detail::rand_t({2}, rng, 0.1f, true);
        Tensor coeffs;
        auto fwd = [&]() {
            Tensor y = conv2d_transposed(x, w, b, {2, 2}, {1, 1}, {1, 1});
            if (!coeffs.defined()) {
                Pcg32 r2(seed + 1);
                coeffs = detail::rand_t(y.shape(), r2);
            }
            return sum(y * coeffs);
        };
        for (Tensor* p : {&x, &w, &b}) detail::fd_check_tensor(*p, fwd, st);
    }
    {  // batch_norm (train mode) and glu
        Tensor x = detail::rand_t({2, 2, 4, 4}, rng, 1.0f, true);
        Tensor gamma = Tensor::filled({2}, 1.2f, true);
        Tensor beta = detail::rand_t({2}, rng, 0.2f, true);
        Tensor gate = detail::rand_t({2, 2, 4, 4}, rng, 1.0f, true);
        Tensor coeffs = detail::rand_t({2, 2, 4, 4}, rng);
        auto fwd = [&]() {
            RunningStats rs{std::vector<float>(2, 0.0f), std::vector<float>(2, 1.0f)};
            Tensor y = batch_norm(x, gamma, beta, rs, true, 0.1f, 1e-5f);
            return sum(glu(y, gate) * coeffs);
        };
        for (Tensor* p : {&x, &gamma, &beta, &gate}) detail::fd_check_tensor(*p, fwd, st);
    }
    {  // softmax / log_softmax / sigmoid / log_sigmoid
        Tensor x = detail::rand_t({1, 4, 2, 2}, rng, 2.0f, true);
        Tensor coeffs = detail::rand_t({1, 4, 2, 2}, rng);
        auto fwd1 = [&]() { return sum(softmax_channels(x) * coeffs); };
        detail::fd_check_tensor(x, fwd1, st);
        auto fwd2 = [&]() { return sum(log_softmax_channels(x) * coeffs); };
        detail::fd_check_tensor(x, fwd2, st);
        auto fwd3 = [&]() { return sum(sigmoid(x) * coeffs); };
        detail::fd_check_tensor(x, fwd3, st);
        auto fwd4 = [&]() { return sum(log_sigmoid(x) * coeffs); };
        detail::fd_check_tensor(x, fwd4, st);
    }
    {  // lp_loss at rho = 2 (smooth) and log1mexp
        Tensor a = detail::rand_t({2, 6}, rng, 1.0f, true);
        Tensor b = detail::rand_t({2, 6}, rng, 1.0f, true);
        auto fwd = [&]() { return lp_loss(a, b, 2.0f); };
        for (Tensor* p : {&a, &b}) detail::fd_check_tensor(*p, fwd, st);

        Tensor l = detail::rand_t({5}, rng, 1.0f, true);
        for (auto& v : l.mutable_value()) v = -0.2f - std::abs(v);
        Tensor coeffs = detail::rand_t({5}, rng);
        auto fwd2 = [&]() { return sum(log1mexp(l) * coeffs); };
        detail::fd_check_tensor(l, fwd2, st);
    }
    res.checked = st.checked;
    res.failed = st.failed;
    return res;
}

// Finite differences through the full G, D and C networks at toy sizes.
inline SuiteResult gradient_network_suite(uint64_t seed) {
    SuiteResult res{"gradient-networks"};
    detail::GradCheckStats st;
    ArchSpec arch = detail::selftest_arch();
    Pcg32 rng(seed);
    std::vector<AttributeLabel> labels{AttributeLabel::single(2, static_cast<int>(seed % 2))};
    Tensor x = detail::rand_t({1, 1, arch.feature_dim, 8}, rng);

    {
        GeneratorParams g = init_generator(arch, rng);
        Tensor coeffs = detail::rand_t({1, 1, arch.feature_dim, 8}, rng);
        auto fwd = [&]() { return sum(generator_forward(x, labels, g, arch, true) * coeffs); };
        std::vector<Tensor> params;
        visit_params(g, [&](const std::string&, Tensor& t) { params.push_back(t); });
        for (auto& p : params) detail::fd_check_tensor(p, fwd, st, 1e-2f, 1e-3f, 2e-3f);
    }
    {
        DiscriminatorParams d = init_discriminator(arch, rng);
        auto fwd = [&]() {
            auto out = discriminator_forward(x, labels, d, arch, true);
            return mean(out.patch_log_probs);
        };
        std::vector<Tensor> params;
        visit_params(d, "D", [&](const std::string&, Tensor& t) { params.push_back(t); });
        for (auto& p : params) detail::fd_check_tensor(p, fwd, st, 1e-2f, 1e-3f, 2e-3f);
    }
    {
        ClassifierParams c = init_classifier(arch, rng);
        auto fwd = [&]() {
            auto out = classifier_forward(x, c, arch, true);
            return mean(select_class_log_prob(out.class_log_prob, {0}));
        };
        std::vector<Tensor> params;
        visit_params(c, "C", [&](const std::string&, Tensor& t) { params.push_back(t); });
        for (auto& p : params) detail::fd_check_tensor(p, fwd, st, 1e-2f, 1e-3f, 2e-3f);
    }
    res.checked = st.checked;
    res.failed = st.failed;
    return res;
}

// Exact loss identities.
inline SuiteResult loss_identity_suite() {
    SuiteResult res{"loss-identities"};
    auto expect = [&](bool cond) {
        res.checked += 1;
        if (!cond) res.failed += 1;
    };
    auto logp = [](std::vector<float> ps) {
        for (auto& p : ps) p = std::log(p);
        return Tensor::from_data({static_cast<int>(ps.size())}, ps);
    };

    Tensor half = logp({0.5f});
    expect(std::abs(adv_loss_d(half, half, log_one_minus_from_log_d(half)).item() -
                    2.0f * std::log(2.0f)) < 1e-6f);
    expect(std::abs(adv_loss_g(logp({0.5f})).item() - std::log(2.0f)) < 1e-6f);
    expect(std::abs(adv_loss_g(logp({0.1f})).item() - std::log(10.0f)) < 1e-5f);
    expect(std::abs(cls_loss_c(logp({0.25f})).item() - std::log(4.0f)) < 1e-6f);

    Pcg32 rng(3);
    Tensor x = detail::rand_t({2, 1, 4, 4}, rng);
    expect(cyc_loss(x, x, 1.0f).item() == 0.0f);
    expect(id_loss(x, x, 1.0f).item() == 0.0f);

    LossWeights w;
    w.lambda_cls = 1.0f;
    w.lambda_cyc = 10.0f;
    w.lambda_id = 5.0f;
    float total = total_g(Tensor::scalar(1.0f), Tensor::scalar(2.0f), Tensor::scalar(3.0f),
                          Tensor::scalar(4.0f), w, w.lambda_id)
                      .item();
    expect(std::abs(total - 53.0f) < 1e-5f);
    expect(total_d(Tensor::scalar(1.25f)).item() == 1.25f);
    expect(total_c(Tensor::scalar(0.75f)).item() == 0.75f);

    // softmax normalization and the conv adjoint identity round out the suite
    Tensor logits = detail::rand_t({2, 4, 3, 3}, rng, 3.0f);
    Tensor sm = softmax_channels(logits);
    double worst = 0.0;
    for (int b = 0; b < 2; ++b)
        for (int p = 0; p < 9; ++p) {
            double s = 0.0;
            for (int k = 0; k < 4; ++k) s += sm.value()[(static_cast<size_t>(b) * 4 + k) * 9 + p];
            worst = std::max(worst, std::abs(s - 1.0));
        }
    expect(worst < 1e-6);

    Tensor cx = detail::rand_t({1, 2, 6, 6}, rng);
    Tensor cw = detail::rand_t({3, 2, 3, 3}, rng);
    Tensor cy = conv2d(cx, cw, Tensor(), {2, 2}, {1, 1});
    Tensor probe = detail::rand_t(cy.shape(), rng);
    Tensor back = conv2d_transposed(probe, cw, Tensor(), {2, 2}, {1, 1}, {1, 1});
    double lhs = 0.0, rhs = 0.0;
    for (size_t i = 0; i < cy.value().size(); ++i) lhs += static_cast<double>(cy.value()[i]) * probe.value()[i];
    for (size_t i = 0; i < cx.value().size(); ++i) rhs += static_cast<double>(cx.value()[i]) * back.value()[i];
    expect(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(lhs)));

    return res;
}

}  // namespace vcstar
