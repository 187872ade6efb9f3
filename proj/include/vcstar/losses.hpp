#pragma once

// Training objectives. The GAN losses consume per-sample log-probabilities
// (log D and log p_C aggregates, already product-pooled in the log domain).
// Probabilities are clamped into [eps, 1-eps] before any log is taken, at
// the level where individual probabilities exist (per patch / per segment).

#include <cmath>
#include <vector>

#include "tensor.hpp"

namespace vcstar {

constexpr float kProbEps = 1e-7f;

inline float log_prob_floor() { return std::log(kProbEps); }
inline float log_prob_ceil() { return std::log1p(-kProbEps); }

struct LossWeights {
    float lambda_cls = 1.0f;
    float lambda_cyc = 10.0f;
    float lambda_id = 5.0f;
    float rho = 1.0f;
    int64_t id_decay_iters = 10000;  // <= 0 keeps lambda_id constant forever

    void validate() const {
        if (lambda_cls < 0 || lambda_cyc < 0 || lambda_id < 0)
            throw ConfigError("LossWeights: lambdas must be nonnegative");
        if (rho < 1.0f) throw ConfigError("LossWeights: rho must be >= 1");
    }

    float effective_lambda_id(int64_t step) const {
        if (id_decay_iters <= 0) return lambda_id;
        return step < id_decay_iters ? lambda_id : 0.0f;
    }
};

// Elementwise clamp of per-patch / per-segment log-probabilities.
inline Tensor clamp_log_probs(const Tensor& log_probs) {
    return clamp(log_probs, log_prob_floor(), log_prob_ceil());
}

// Scalar probability -> clamped log, for callers holding plain probabilities.
inline double log_from_probability(double p) {
    double c = std::min(1.0 - static_cast<double>(kProbEps),
                        std::max(static_cast<double>(kProbEps), p));
    return std::log(c);
}

namespace detail {

inline void require_log_probs(const Tensor& t, const char* who) {
    for (float v : t.value())
        if (v > 1e-6f)
            throw NumericError(std::string(who) + ": inputs must be log-probabilities (<= 0)");
}

}  // namespace detail

// Eq.-10 style discriminator loss: -E[log D(y,c)] - E[log(1 - D(G(x,c),c))].
// log_d_fake is accepted alongside the precomputed log(1-D) so both terms of
// the zero-sum pair provably come from one forward pass.
inline Tensor adv_loss_d(const Tensor& log_d_real, const Tensor& log_d_fake,
                         const Tensor& log1m_fake) {
    detail::require_log_probs(log_d_real, "adv_loss_d");
    detail::require_log_probs(log_d_fake, "adv_loss_d");
    detail::require_log_probs(log1m_fake, "adv_loss_d");
    return -(mean(log_d_real) + mean(log1m_fake));
}

// log(1 - D) from log D, stable in the log domain.
inline Tensor log_one_minus_from_log_d(const Tensor& log_d) {
    detail::require_log_probs(log_d, "log_one_minus_from_log_d");
    return log1mexp(clamp(log_d, -1e30f, log_prob_ceil()));
}

// Eq.-11 non-saturating generator loss: -E[log D(G(x,c),c)].
inline Tensor adv_loss_g(const Tensor& log_d_fake) {
    detail::require_log_probs(log_d_fake, "adv_loss_g");
    return -mean(log_d_fake);
}

// Eqs. 12-13: negative mean log-probability of the true / target class.
inline Tensor cls_loss_c(const Tensor& log_p_true) {
    detail::require_log_probs(log_p_true, "cls_loss_c");
    return -mean(log_p_true);
}

inline Tensor cls_loss_g(const Tensor& log_p_target) {
    detail::require_log_probs(log_p_target, "cls_loss_g");
    return -mean(log_p_target);
}

// Eq. 14 / Eq. 15.
inline Tensor cyc_loss(const Tensor& x, const Tensor& x_cycled, float rho) {
    return lp_loss(x_cycled, x, rho);
}

inline Tensor id_loss(const Tensor& x, const Tensor& x_id, float rho) {
    return lp_loss(x_id, x, rho);
}

// Eqs. 16-18.
inline Tensor total_g(const Tensor& adv_g, const Tensor& cls_g, const Tensor& cyc,
                      const Tensor& id, const LossWeights& w, float lambda_id_now) {
    w.validate();
    return adv_g + cls_g * w.lambda_cls + cyc * w.lambda_cyc + id * lambda_id_now;
}

inline Tensor total_d(const Tensor& adv_d) { return adv_d; }
inline Tensor total_c(const Tensor& cls_c) { return cls_c; }

// ---------------------------------------------------------------------------
// CycleGAN reference losses (two generators G: X->Y, F: Y->X and two
// discriminators). These are plain calculators over probabilities and
// feature tensors; the full two-generator training pipeline is not built.

struct CycleGanTerms {
    double adv_d_y = 0.0;  // discriminator loss on domain Y
    double adv_g = 0.0;    // saturating generator term, E[log(1 - D_Y(G(x)))]
    double adv_d_x = 0.0;
    double adv_f = 0.0;
    double cyc = 0.0;
    double id = 0.0;
    double i_gf = 0.0;
    double i_d = 0.0;
};

inline CycleGanTerms cyclegan_losses(const std::vector<double>& d_y_real,
                                     const std::vector<double>& d_y_fake,
                                     const std::vector<double>& d_x_real,
                                     const std::vector<double>& d_x_fake, const Tensor& x,
                                     const Tensor& fgx, const Tensor& y, const Tensor& gfy,
                                     const Tensor& fx, const Tensor& gy, float lambda_cyc,
                                     float lambda_id) {
    if (d_y_real.empty() || d_y_fake.empty() || d_x_real.empty() || d_x_fake.empty())
        throw ConfigError("cyclegan_losses: empty probability batches");
    auto mean_log = [](const std::vector<double>& ps) {
        double acc = 0.0;
        for (double p : ps) acc += log_from_probability(p);
        return acc / static_cast<double>(ps.size());
    };
    auto mean_log1m = [](const std::vector<double>& ps) {
        double acc = 0.0;
        for (double p : ps) acc += log_from_probability(1.0 - p);
        return acc / static_cast<double>(ps.size());
    };
    CycleGanTerms t;
    t.adv_d_y = -mean_log(d_y_real) - mean_log1m(d_y_fake);
    t.adv_g = mean_log1m(d_y_fake);
    t.adv_d_x = -mean_log(d_x_real) - mean_log1m(d_x_fake);
    t.adv_f = mean_log1m(d_x_fake);
    t.cyc = lp_loss(fgx, x, 1.0f).item() + lp_loss(gfy, y, 1.0f).item();
    t.id = lp_loss(fx, x, 1.0f).item() + lp_loss(gy, y, 1.0f).item();
    t.i_gf = t.adv_g + t.adv_f + lambda_cyc * t.cyc + lambda_id * t.id;
    t.i_d = t.adv_d_x + t.adv_d_y;
    return t;
}

}  // namespace vcstar
