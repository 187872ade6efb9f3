#pragma once

// The three networks: label-conditioned generator G (gated-CNN
// encoder/decoder), real/fake discriminator D (patch probabilities pooled by
// product) and domain classifier C (per-segment distributions pooled by
// product). All fully convolutional; sequence length is arbitrary.

#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace vcstar {

// ---------------------------------------------------------------------------
// Attribute labels: concatenation of one-hot category vectors.

struct AttributeLabel {
    std::vector<std::vector<float>> categories;

    static AttributeLabel single(int class_count, int index) {
        if (index < 0 || index >= class_count)
            throw ConfigError("AttributeLabel: class index out of range");
        AttributeLabel l;
        l.categories.emplace_back(static_cast<size_t>(class_count), 0.0f);
        l.categories.back()[static_cast<size_t>(index)] = 1.0f;
        return l;
    }

    int dim() const {
        int d = 0;
        for (const auto& c : categories) d += static_cast<int>(c.size());
        return d;
    }

    std::vector<float> flat() const {
        std::vector<float> out;
        for (const auto& c : categories) out.insert(out.end(), c.begin(), c.end());
        return out;
    }

    void validate() const {
        if (categories.empty()) throw ConfigError("AttributeLabel: no categories");
        for (const auto& c : categories) {
            float s = 0.0f;
            for (float v : c) {
                if (v != 0.0f && v != 1.0f)
                    throw ConfigError("AttributeLabel: entries must be 0 or 1");
                s += v;
            }
            if (s != 1.0f) throw ConfigError("AttributeLabel: each category must sum to exactly 1");
        }
    }
};

// Constant [dim, Q, N] tensor; channel k is the plane c[k].
inline Tensor tile_label(const AttributeLabel& c, int q, int n) {
    if (q < 1 || n < 1) throw ConfigError("tile_label: Q and N must be >= 1");
    c.validate();
    auto flat = c.flat();
    Tensor t = Tensor::zeros({static_cast<int>(flat.size()), q, n});
    auto& v = t.mutable_value();
    int64_t plane = static_cast<int64_t>(q) * n;
    for (size_t k = 0; k < flat.size(); ++k)
        std::fill(v.begin() + static_cast<int64_t>(k) * plane,
                  v.begin() + static_cast<int64_t>(k + 1) * plane, flat[k]);
    return t;
}

// Batched variant: [B, dim, Q, N].
inline Tensor tile_labels(const std::vector<AttributeLabel>& cs, int q, int n) {
    if (cs.empty()) throw ConfigError("tile_labels: empty batch");
    int d = cs[0].dim();
    Tensor t = Tensor::zeros({static_cast<int>(cs.size()), d, q, n});
    auto& v = t.mutable_value();
    int64_t plane = static_cast<int64_t>(q) * n;
    for (size_t b = 0; b < cs.size(); ++b) {
        if (cs[b].dim() != d) throw ShapeError("tile_labels: inconsistent label dimensions");
        cs[b].validate();
        auto flat = cs[b].flat();
        for (size_t k = 0; k < flat.size(); ++k) {
            int64_t off = (static_cast<int64_t>(b) * d + static_cast<int64_t>(k)) * plane;
            std::fill(v.begin() + off, v.begin() + off + plane, flat[k]);
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Architecture description (serialized as JSON into checkpoints)

struct ConvSpec {
    int out_channels = 0;
    int kh = 0, kw = 0;
    int sh = 1, sw = 1;
};

inline void to_json(nlohmann::json& j, const ConvSpec& c) {
    j = {{"out", c.out_channels}, {"kh", c.kh}, {"kw", c.kw}, {"sh", c.sh}, {"sw", c.sw}};
}
inline void from_json(const nlohmann::json& j, ConvSpec& c) {
    j.at("out").get_to(c.out_channels);
    j.at("kh").get_to(c.kh);
    j.at("kw").get_to(c.kw);
    j.at("sh").get_to(c.sh);
    j.at("sw").get_to(c.sw);
}

struct ArchSpec {
    int feature_dim = 35;  // rows the networks see (energy row excluded upstream)
    int label_dim = 4;
    int num_classes = 4;
    std::vector<ConvSpec> gen_encoder{{32, 3, 9, 1, 1}, {64, 4, 8, 2, 2}, {128, 4, 8, 2, 2}};
    std::vector<ConvSpec> gen_decoder{{64, 4, 8, 2, 2}, {32, 4, 8, 2, 2}};
    ConvSpec gen_output{1, 3, 9, 1, 1};
    std::vector<ConvSpec> dis_layers{{32, 3, 9, 2, 2}, {32, 3, 9, 2, 2}, {32, 3, 9, 2, 2}, {32, 3, 9, 2, 2}};
    std::vector<ConvSpec> cls_layers{{32, 3, 9, 2, 2}, {32, 3, 9, 2, 2}, {32, 3, 9, 2, 2}, {32, 3, 9, 2, 2}};
    float bn_momentum = 0.1f;
    float bn_epsilon = 1e-5f;

    // Minimum admissible sequence length: the product of encoder time strides.
    int min_length() const {
        int p = 1;
        for (const auto& l : gen_encoder) p *= l.sw;
        return p;
    }

    void validate() const {
        if (feature_dim < 1 || label_dim < 1 || num_classes < 1)
            throw ConfigError("ArchSpec: dimensions must be positive");
        if (gen_encoder.size() != gen_decoder.size() + 1)
            throw ConfigError("ArchSpec: decoder must mirror all but the first encoder layer");
        auto check_layers = [](const std::vector<ConvSpec>& ls, const char* who) {
            if (ls.empty()) throw ConfigError(std::string("ArchSpec: ") + who + " has no layers");
            for (const auto& l : ls)
                if (l.out_channels < 1 || l.kh < 1 || l.kw < 1 || l.sh < 1 || l.sw < 1)
                    throw ConfigError(std::string("ArchSpec: bad layer in ") + who);
        };
        check_layers(gen_encoder, "gen_encoder");
        check_layers(gen_decoder, "gen_decoder");
        check_layers(dis_layers, "dis_layers");
        check_layers(cls_layers, "cls_layers");
        if (gen_output.out_channels != 1) throw ConfigError("ArchSpec: generator must emit 1 channel");
    }
};

inline void to_json(nlohmann::json& j, const ArchSpec& a) {
    j = {{"feature_dim", a.feature_dim},
         {"label_dim", a.label_dim},
         {"num_classes", a.num_classes},
         {"gen_encoder", a.gen_encoder},
         {"gen_decoder", a.gen_decoder},
         {"gen_output", a.gen_output},
         {"dis_layers", a.dis_layers},
         {"cls_layers", a.cls_layers},
         {"bn_momentum", a.bn_momentum},
         {"bn_epsilon", a.bn_epsilon}};
}
inline void from_json(const nlohmann::json& j, ArchSpec& a) {
    j.at("feature_dim").get_to(a.feature_dim);
    j.at("label_dim").get_to(a.label_dim);
    j.at("num_classes").get_to(a.num_classes);
    j.at("gen_encoder").get_to(a.gen_encoder);
    j.at("gen_decoder").get_to(a.gen_decoder);
    j.at("gen_output").get_to(a.gen_output);
    j.at("dis_layers").get_to(a.dis_layers);
    j.at("cls_layers").get_to(a.cls_layers);
    j.at("bn_momentum").get_to(a.bn_momentum);
    j.at("bn_epsilon").get_to(a.bn_epsilon);
}

// ---------------------------------------------------------------------------
// Parameter containers

struct BatchNormParams {
    Tensor gamma;
    Tensor beta;
    RunningStats running;
};

// The linear path (W,b) and the gate path (V,d) are stored stacked along
// the convolution's output-channel axis, so one convolution feeds both GLU
// paths. w_linear()/w_gate() expose the two halves.
struct GatedConvParams {
    Tensor w_stack;  // conv: [2C, Cin, kh, kw]; transposed conv: [Cbig, 2C, kh, kw]
    Tensor b_stack;  // [2C]
    bool transposed = false;
    BatchNormParams bn_lin, bn_gate;

    int out_channels() const { return b_stack.dim(0) / 2; }

    Tensor w_linear() const {
        int c = out_channels();
        return transposed ? slice_channels(w_stack, 0, c)
                          : detail_slice_rows(w_stack, 0, c);
    }
    Tensor w_gate() const {
        int c = out_channels();
        return transposed ? slice_channels(w_stack, c, 2 * c)
                          : detail_slice_rows(w_stack, c, 2 * c);
    }

private:
    static Tensor detail_slice_rows(const Tensor& w, int r0, int r1) {
        int rows = w.dim(0);
        int64_t inner = w.numel() / rows;
        Shape s = w.shape();
        s[0] = r1 - r0;
        std::vector<float> vals(
            w.value().begin() + static_cast<int64_t>(r0) * inner,
            w.value().begin() + static_cast<int64_t>(r1) * inner);
        return Tensor::from_data(s, std::move(vals));
    }
};

struct GeneratorParams {
    std::vector<GatedConvParams> encoder;
    std::vector<GatedConvParams> decoder;
    Tensor w_out, b_out;
};

struct PatchNetParams {  // shared shape of D and C
    std::vector<GatedConvParams> layers;
    Tensor w_head, b_head;
};

using DiscriminatorParams = PatchNetParams;
using ClassifierParams = PatchNetParams;

// Per-tensor visitor; the order defines the checkpoint block order.
template <typename Fn>
void visit_gated(const std::string& prefix, GatedConvParams& p, Fn&& fn) {
    fn(prefix + ".w_stack", p.w_stack);
    fn(prefix + ".b_stack", p.b_stack);
    fn(prefix + ".bn_lin.gamma", p.bn_lin.gamma);
    fn(prefix + ".bn_lin.beta", p.bn_lin.beta);
    fn(prefix + ".bn_gate.gamma", p.bn_gate.gamma);
    fn(prefix + ".bn_gate.beta", p.bn_gate.beta);
}

template <typename Fn>
void visit_params(GeneratorParams& g, Fn&& fn) {
    for (size_t i = 0; i < g.encoder.size(); ++i) visit_gated("G.enc" + std::to_string(i), g.encoder[i], fn);
    for (size_t i = 0; i < g.decoder.size(); ++i) visit_gated("G.dec" + std::to_string(i), g.decoder[i], fn);
    fn("G.out.w", g.w_out);
    fn("G.out.b", g.b_out);
}

template <typename Fn>
void visit_params(PatchNetParams& d, const std::string& tag, Fn&& fn) {
    for (size_t i = 0; i < d.layers.size(); ++i) visit_gated(tag + ".layer" + std::to_string(i), d.layers[i], fn);
    fn(tag + ".head.w", d.w_head);
    fn(tag + ".head.b", d.b_head);
}

template <typename Fn>
void visit_running(GeneratorParams& g, Fn&& fn) {
    for (size_t i = 0; i < g.encoder.size(); ++i) {
        fn("G.enc" + std::to_string(i) + ".bn_lin", g.encoder[i].bn_lin.running);
        fn("G.enc" + std::to_string(i) + ".bn_gate", g.encoder[i].bn_gate.running);
    }
    for (size_t i = 0; i < g.decoder.size(); ++i) {
        fn("G.dec" + std::to_string(i) + ".bn_lin", g.decoder[i].bn_lin.running);
        fn("G.dec" + std::to_string(i) + ".bn_gate", g.decoder[i].bn_gate.running);
    }
}

template <typename Fn>
void visit_running(PatchNetParams& d, const std::string& tag, Fn&& fn) {
    for (size_t i = 0; i < d.layers.size(); ++i) {
        fn(tag + ".layer" + std::to_string(i) + ".bn_lin", d.layers[i].bn_lin.running);
        fn(tag + ".layer" + std::to_string(i) + ".bn_gate", d.layers[i].bn_gate.running);
    }
}

template <typename P>
std::vector<Tensor> trainable_tensors(P& params) {
    std::vector<Tensor> out;
    if constexpr (std::is_same_v<P, GeneratorParams>)
        visit_params(params, [&](const std::string&, Tensor& t) { out.push_back(t); });
    else
        visit_params(params, "N", [&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

// ---------------------------------------------------------------------------
// Initialization: fan-in-scaled uniform, deterministic given seed.

namespace detail {

inline Tensor fanin_uniform(const Shape& shape, int fan_in, Pcg32& rng) {
    float limit = std::sqrt(3.0f / static_cast<float>(fan_in));
    return Tensor::uniform(shape, -limit, limit, rng, true);
}

inline GatedConvParams init_gated(int cin, const ConvSpec& spec, Pcg32& rng) {
    GatedConvParams p;
    int fan_in = cin * spec.kh * spec.kw;
    p.w_stack = fanin_uniform({2 * spec.out_channels, cin, spec.kh, spec.kw}, fan_in, rng);
    p.b_stack = Tensor::zeros({2 * spec.out_channels}, true);
    p.transposed = false;
    for (auto* bn : {&p.bn_lin, &p.bn_gate}) {
        bn->gamma = Tensor::filled({spec.out_channels}, 1.0f, true);
        bn->beta = Tensor::zeros({spec.out_channels}, true);
        bn->running.mean.assign(static_cast<size_t>(spec.out_channels), 0.0f);
        bn->running.var.assign(static_cast<size_t>(spec.out_channels), 1.0f);
    }
    return p;
}

// Transposed-conv weight layout is [big side, 2*Cout, kh, kw]; the effective
// fan-in per output position is big_side * kh * kw / (sh * sw).
inline GatedConvParams init_gated_transposed(int cbig, const ConvSpec& spec, Pcg32& rng) {
    GatedConvParams p;
    int fan_in = cbig * spec.kh * spec.kw / (spec.sh * spec.sw);
    if (fan_in < 1) fan_in = 1;
    p.w_stack = fanin_uniform({cbig, 2 * spec.out_channels, spec.kh, spec.kw}, fan_in, rng);
    p.b_stack = Tensor::zeros({2 * spec.out_channels}, true);
    p.transposed = true;
    for (auto* bn : {&p.bn_lin, &p.bn_gate}) {
        bn->gamma = Tensor::filled({spec.out_channels}, 1.0f, true);
        bn->beta = Tensor::zeros({spec.out_channels}, true);
        bn->running.mean.assign(static_cast<size_t>(spec.out_channels), 0.0f);
        bn->running.var.assign(static_cast<size_t>(spec.out_channels), 1.0f);
    }
    return p;
}

}  // namespace detail

inline GeneratorParams init_generator(const ArchSpec& arch, Pcg32& rng) {
    arch.validate();
    GeneratorParams g;
    int cin = 1;
    for (const auto& l : arch.gen_encoder) {
        g.encoder.push_back(detail::init_gated(cin, l, rng));
        cin = l.out_channels;
    }
    for (const auto& l : arch.gen_decoder) {
        g.decoder.push_back(detail::init_gated_transposed(cin + arch.label_dim, l, rng));
        cin = l.out_channels;
    }
    int fan_in = (cin + arch.label_dim) * arch.gen_output.kh * arch.gen_output.kw;
    g.w_out = detail::fanin_uniform(
        {arch.gen_output.out_channels, cin + arch.label_dim, arch.gen_output.kh, arch.gen_output.kw},
        fan_in, rng);
    g.b_out = Tensor::zeros({arch.gen_output.out_channels}, true);
    return g;
}

inline DiscriminatorParams init_discriminator(const ArchSpec& arch, Pcg32& rng) {
    arch.validate();
    DiscriminatorParams d;
    int cin = 1;
    for (const auto& l : arch.dis_layers) {
        d.layers.push_back(detail::init_gated(cin + arch.label_dim, l, rng));
        cin = l.out_channels;
    }
    d.w_head = detail::fanin_uniform({1, cin + arch.label_dim, 1, 1}, cin + arch.label_dim, rng);
    d.b_head = Tensor::zeros({1}, true);
    return d;
}

inline ClassifierParams init_classifier(const ArchSpec& arch, Pcg32& rng) {
    arch.validate();
    ClassifierParams c;
    int cin = 1;
    for (const auto& l : arch.cls_layers) {
        c.layers.push_back(detail::init_gated(cin, l, rng));
        cin = l.out_channels;
    }
    c.w_head = detail::fanin_uniform({arch.num_classes, cin, 1, 1}, cin, rng);
    c.b_head = Tensor::zeros({arch.num_classes}, true);
    return c;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace detail {

inline std::pair<int, int> same_pad(const ConvSpec& l) { return {l.kh / 2, l.kw / 2}; }

// Both GLU paths share one convolution over the stacked weights; the result
// is split back into the linear and gate halves.
inline Tensor gated_conv(const Tensor& x, GatedConvParams& p, const ConvSpec& spec,
                         const ArchSpec& arch, bool train) {
    auto pad = same_pad(spec);
    Tensor both = conv2d(x, p.w_stack, p.b_stack, {spec.sh, spec.sw}, pad);
    Tensor lin = slice_channels(both, 0, spec.out_channels);
    Tensor gate = slice_channels(both, spec.out_channels, 2 * spec.out_channels);
    lin = batch_norm(lin, p.bn_lin.gamma, p.bn_lin.beta, p.bn_lin.running, train, arch.bn_momentum,
                     arch.bn_epsilon);
    gate = batch_norm(gate, p.bn_gate.gamma, p.bn_gate.beta, p.bn_gate.running, train,
                      arch.bn_momentum, arch.bn_epsilon);
    return glu(lin, gate);
}

inline std::pair<int, int> deconv_output_padding(const ConvSpec& spec, std::pair<int, int> pad,
                                                 int in_h, int in_w, int target_h, int target_w) {
    int oph = target_h - ((in_h - 1) * spec.sh - 2 * pad.first + spec.kh);
    int opw = target_w - ((in_w - 1) * spec.sw - 2 * pad.second + spec.kw);
    if (oph < 0 || oph >= spec.sh || opw < 0 || opw >= spec.sw)
        throw ShapeError("decoder cannot reach target shape " + std::to_string(target_h) + "x" +
                         std::to_string(target_w) + " from " + std::to_string(in_h) + "x" +
                         std::to_string(in_w));
    return {oph, opw};
}

inline Tensor gated_deconv(const Tensor& x, GatedConvParams& p, const ConvSpec& spec,
                           const ArchSpec& arch, bool train, int target_h, int target_w) {
    auto pad = same_pad(spec);
    auto opad = deconv_output_padding(spec, pad, x.dim(2), x.dim(3), target_h, target_w);
    Tensor both = conv2d_transposed(x, p.w_stack, p.b_stack, {spec.sh, spec.sw}, pad, opad);
    Tensor lin = slice_channels(both, 0, spec.out_channels);
    Tensor gate = slice_channels(both, spec.out_channels, 2 * spec.out_channels);
    lin = batch_norm(lin, p.bn_lin.gamma, p.bn_lin.beta, p.bn_lin.running, train, arch.bn_momentum,
                     arch.bn_epsilon);
    gate = batch_norm(gate, p.bn_gate.gamma, p.bn_gate.beta, p.bn_gate.running, train,
                      arch.bn_momentum, arch.bn_epsilon);
    return glu(lin, gate);
}

inline void check_net_input(const Tensor& x, const ArchSpec& arch, int min_len, const char* who) {
    if (x.ndim() != 4 || x.dim(1) != 1)
        throw ShapeError(std::string(who) + ": expected [B,1,Q,N] input, got " + shape_str(x.shape()));
    if (x.dim(2) != arch.feature_dim)
        throw ShapeError(std::string(who) + ": feature height " + std::to_string(x.dim(2)) +
                         " does not match configured " + std::to_string(arch.feature_dim));
    if (x.dim(3) < min_len)
        throw ShapeError(std::string(who) + ": sequence length " + std::to_string(x.dim(3)) +
                         " below minimum " + std::to_string(min_len));
}

inline void check_labels(const std::vector<AttributeLabel>& labels, const Tensor& x,
                         const ArchSpec& arch, const char* who) {
    if (static_cast<int>(labels.size()) != x.dim(0))
        throw ShapeError(std::string(who) + ": label batch size mismatch");
    for (const auto& l : labels)
        if (l.dim() != arch.label_dim)
            throw ShapeError(std::string(who) + ": label dimension " + std::to_string(l.dim()) +
                             " does not match configured " + std::to_string(arch.label_dim));
}

}  // namespace detail

// Encoder half of G; records per-layer input shapes so the decoder can
// mirror them exactly for any sequence length.
inline Tensor generator_encode(const Tensor& x, GeneratorParams& params, const ArchSpec& arch,
                               bool train, std::vector<std::pair<int, int>>* shapes_out = nullptr) {
    detail::check_net_input(x, arch, arch.min_length(), "generator");
    Tensor h = x;
    for (size_t i = 0; i < arch.gen_encoder.size(); ++i) {
        if (shapes_out) shapes_out->emplace_back(h.dim(2), h.dim(3));
        h = detail::gated_conv(h, params.encoder[i], arch.gen_encoder[i], arch, train);
    }
    return h;
}

// Decoder half: the target attribute is tiled and concatenated at every
// layer input, including the final linear projection.
inline Tensor generator_decode(const Tensor& latent, const std::vector<AttributeLabel>& labels,
                               GeneratorParams& params, const ArchSpec& arch, bool train,
                               const std::vector<std::pair<int, int>>& enc_shapes) {
    Tensor h = latent;
    detail::check_labels(labels, latent, arch, "generator_decode");
    for (size_t i = 0; i < arch.gen_decoder.size(); ++i) {
        auto target = enc_shapes[enc_shapes.size() - 1 - i];
        Tensor tiled = tile_labels(labels, h.dim(2), h.dim(3));
        h = detail::gated_deconv(concat_channels(h, tiled), params.decoder[i], arch.gen_decoder[i],
                                 arch, train, target.first, target.second);
    }
    Tensor tiled = tile_labels(labels, h.dim(2), h.dim(3));
    auto pad = detail::same_pad(arch.gen_output);
    return conv2d(concat_channels(h, tiled), params.w_out, params.b_out,
                  {arch.gen_output.sh, arch.gen_output.sw}, pad);
}

inline Tensor generator_forward(const Tensor& x, const std::vector<AttributeLabel>& labels,
                                GeneratorParams& params, const ArchSpec& arch, bool train) {
    detail::check_labels(labels, x, arch, "generator");
    std::vector<std::pair<int, int>> shapes;
    Tensor latent = generator_encode(x, params, arch, train, &shapes);
    Tensor y = generator_decode(latent, labels, params, arch, train, shapes);
    if (y.dim(2) != x.dim(2) || y.dim(3) != x.dim(3))
        throw ShapeError("generator: output shape does not match input");
    return y;
}

struct DiscriminatorOutput {
    Tensor patch_logits;     // [B,1,h,w]
    Tensor patch_log_probs;  // [B,1,h,w], log sigmoid of logits
    Tensor log_d;            // [B], sum of patch log-probs (log of the product)
};

inline DiscriminatorOutput discriminator_forward(const Tensor& y,
                                                 const std::vector<AttributeLabel>& labels,
                                                 DiscriminatorParams& params, const ArchSpec& arch,
                                                 bool train) {
    detail::check_net_input(y, arch, 1, "discriminator");
    detail::check_labels(labels, y, arch, "discriminator");
    Tensor h = y;
    for (size_t i = 0; i < arch.dis_layers.size(); ++i) {
        Tensor tiled = tile_labels(labels, h.dim(2), h.dim(3));
        h = detail::gated_conv(concat_channels(h, tiled), params.layers[i], arch.dis_layers[i],
                               arch, train);
    }
    Tensor tiled = tile_labels(labels, h.dim(2), h.dim(3));
    DiscriminatorOutput out;
    out.patch_logits = conv2d(concat_channels(h, tiled), params.w_head, params.b_head, {1, 1}, {0, 0});
    out.patch_log_probs = log_sigmoid(out.patch_logits);
    out.log_d = sum_per_sample(out.patch_log_probs);
    return out;
}

struct ClassifierOutput {
    Tensor segment_log_probs;  // [B,K,h,w], per-segment log distributions
    Tensor class_log_prob;     // [B,K], sum over segments (log of the product)
    std::vector<std::vector<double>> renormalized;  // [B][K], product distribution renormalized
};

inline ClassifierOutput classifier_forward(const Tensor& y, ClassifierParams& params,
                                           const ArchSpec& arch, bool train) {
    detail::check_net_input(y, arch, 1, "classifier");
    Tensor h = y;
    for (size_t i = 0; i < arch.cls_layers.size(); ++i)
        h = detail::gated_conv(h, params.layers[i], arch.cls_layers[i], arch, train);
    Tensor logits = conv2d(h, params.w_head, params.b_head, {1, 1}, {0, 0});
    ClassifierOutput out;
    out.segment_log_probs = log_softmax_channels(logits);
    out.class_log_prob = sum_spatial(out.segment_log_probs);
    int b = out.class_log_prob.dim(0), k = out.class_log_prob.dim(1);
    out.renormalized.assign(static_cast<size_t>(b), std::vector<double>(static_cast<size_t>(k), 0.0));
    for (int i = 0; i < b; ++i) {
        double mx = -1e300;
        for (int j = 0; j < k; ++j)
            mx = std::max(mx, static_cast<double>(out.class_log_prob.value()[static_cast<size_t>(i) * k + j]));
        double z = 0.0;
        for (int j = 0; j < k; ++j)
            z += std::exp(static_cast<double>(out.class_log_prob.value()[static_cast<size_t>(i) * k + j]) - mx);
        for (int j = 0; j < k; ++j)
            out.renormalized[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                std::exp(static_cast<double>(out.class_log_prob.value()[static_cast<size_t>(i) * k + j]) - mx) / z;
    }
    return out;
}

// log p_C(class_b | y_b) per sample, differentiable: one-hot mask + sum.
inline Tensor select_class_log_prob(const Tensor& class_log_prob, const std::vector<int>& classes) {
    if (class_log_prob.ndim() != 2) throw ShapeError("select_class_log_prob: expected [B,K]");
    int b = class_log_prob.dim(0), k = class_log_prob.dim(1);
    if (static_cast<int>(classes.size()) != b)
        throw ShapeError("select_class_log_prob: class index batch mismatch");
    Tensor mask = Tensor::zeros({b, k});
    for (int i = 0; i < b; ++i) {
        if (classes[static_cast<size_t>(i)] < 0 || classes[static_cast<size_t>(i)] >= k)
            throw ConfigError("select_class_log_prob: class index out of range");
        mask.mutable_value()[static_cast<size_t>(i) * k + classes[static_cast<size_t>(i)]] = 1.0f;
    }
    return sum_per_sample(class_log_prob * mask);
}

}  // namespace vcstar
