#pragma once

// Versioned checkpoint container. Layout:
//   magic "VCCK", u32 version,
//   u32 header_len, JSON header (architecture, dsp config, speaker schema,
//     step, rng state; integers and strings only),
//   then named blocks: u32 name_len, name, u32 ndim, u32 dims[], f32 data.
// All float payloads live in raw little-endian blocks so save -> load ->
// save is byte-identical.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "adam.hpp"
#include "dsp.hpp"
#include "models.hpp"

namespace vcstar {

struct NormStats {
    std::vector<float> mean;  // per MCC dimension, rows 0..Q-1
    std::vector<float> std;   // floored at 1e-6
};

struct SpeakerInfo {
    std::string name;
    F0Stats f0;
};

struct ModelBundle {
    ArchSpec arch;
    DspConfig dsp;
    GeneratorParams gen;
    DiscriminatorParams dis;
    ClassifierParams cls;
    NormStats norm;
    std::vector<SpeakerInfo> speakers;
    int64_t step = 0;

    int speaker_index(const std::string& name) const {
        for (size_t i = 0; i < speakers.size(); ++i)
            if (speakers[i].name == name) return static_cast<int>(i);
        throw ConfigError("unknown attribute: " + name);
    }
};

// Optimizer and sampler state carried alongside the bundle while training,
// so a resumed run continues the exact same trajectory.
struct TrainerState {
    AdamState opt_g, opt_d, opt_c;
    Pcg32 rng;
    bool present = false;
};

inline void to_json(nlohmann::json& j, const DspConfig& c) {
    j = {{"sample_rate", c.sample_rate}, {"fft_size", c.fft_size},     {"hop", c.hop},
         {"mcep_order", c.mcep_order},   {"alpha", c.alpha},           {"lifter_order", c.lifter_order},
         {"f0_floor", c.f0_floor},       {"f0_ceil", c.f0_ceil},       {"voicing_threshold", c.voicing_threshold}};
}
inline void from_json(const nlohmann::json& j, DspConfig& c) {
    j.at("sample_rate").get_to(c.sample_rate);
    j.at("fft_size").get_to(c.fft_size);
    j.at("hop").get_to(c.hop);
    j.at("mcep_order").get_to(c.mcep_order);
    j.at("alpha").get_to(c.alpha);
    j.at("lifter_order").get_to(c.lifter_order);
    j.at("f0_floor").get_to(c.f0_floor);
    j.at("f0_ceil").get_to(c.f0_ceil);
    j.at("voicing_threshold").get_to(c.voicing_threshold);
}

namespace detail {

struct BlockWriter {
    std::string& out;
    void write(const std::string& name, const std::vector<uint32_t>& dims, const float* data) {
        put_u32le(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_u32le(out, static_cast<uint32_t>(dims.size()));
        size_t n = 1;
        for (uint32_t d : dims) {
            put_u32le(out, d);
            n *= d;
        }
        size_t head = out.size();
        out.resize(head + n * sizeof(float));
        std::memcpy(out.data() + head, data, n * sizeof(float));
    }
    void write_tensor(const std::string& name, const Tensor& t) {
        std::vector<uint32_t> dims;
        for (int d : t.shape()) dims.push_back(static_cast<uint32_t>(d));
        write(name, dims, t.value().data());
    }
    void write_vec(const std::string& name, const std::vector<float>& v) {
        write(name, {static_cast<uint32_t>(v.size())}, v.data());
    }
};

struct BlockReader {
    const std::string& bytes;
    size_t pos;
    std::map<std::string, std::pair<std::vector<uint32_t>, std::vector<float>>> blocks;

    explicit BlockReader(const std::string& b, size_t start) : bytes(b), pos(start) {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
        while (pos + 8 <= bytes.size()) {
            uint32_t name_len = get_u32le(p + pos);
            pos += 4;
            std::string name = bytes.substr(pos, name_len);
            pos += name_len;
            uint32_t ndim = get_u32le(p + pos);
            pos += 4;
            std::vector<uint32_t> dims;
            size_t n = 1;
            for (uint32_t i = 0; i < ndim; ++i) {
                dims.push_back(get_u32le(p + pos));
                pos += 4;
                n *= dims.back();
            }
            if (pos + n * sizeof(float) > bytes.size())
                throw IoError("checkpoint: truncated block " + name);
            std::vector<float> data(n);
            std::memcpy(data.data(), bytes.data() + pos, n * sizeof(float));
            pos += n * sizeof(float);
            blocks[name] = {std::move(dims), std::move(data)};
        }
    }

    const std::vector<float>& vec(const std::string& name) {
        auto it = blocks.find(name);
        if (it == blocks.end()) throw IoError("checkpoint: missing block " + name);
        return it->second.second;
    }

    void into_tensor(const std::string& name, Tensor& t) {
        const auto& v = vec(name);
        if (static_cast<int64_t>(v.size()) != t.numel())
            throw IoError("checkpoint: block " + name + " has wrong size");
        std::copy(v.begin(), v.end(), t.mutable_value().begin());
    }
};

inline void write_adam(BlockWriter& w, const std::string& tag, const AdamState& st) {
    for (size_t i = 0; i < st.first_moment.size(); ++i) {
        w.write_vec(tag + ".m" + std::to_string(i), st.first_moment[i]);
        w.write_vec(tag + ".v" + std::to_string(i), st.second_moment[i]);
    }
}

inline void read_adam(BlockReader& r, const std::string& tag, AdamState& st,
                      const std::vector<Tensor>& params) {
    st.first_moment.clear();
    st.second_moment.clear();
    for (size_t i = 0; i < params.size(); ++i) {
        st.first_moment.push_back(r.vec(tag + ".m" + std::to_string(i)));
        st.second_moment.push_back(r.vec(tag + ".v" + std::to_string(i)));
        if (st.first_moment.back().size() != static_cast<size_t>(params[i].numel()))
            throw IoError("checkpoint: optimizer state mismatch at " + tag);
    }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, ModelBundle& bundle,
                            const TrainerState* trainer = nullptr) {
    nlohmann::json header;
    header["format_version"] = 1;
    header["arch"] = bundle.arch;
    header["dsp"] = bundle.dsp;
    header["step"] = bundle.step;
    std::vector<std::string> names;
    for (const auto& s : bundle.speakers) names.push_back(s.name);
    header["speakers"] = names;
    header["has_trainer_state"] = trainer != nullptr && trainer->present;
    if (trainer && trainer->present) {
        header["rng_state"] = std::to_string(trainer->rng.state());
        header["rng_inc"] = std::to_string(trainer->rng.inc());
        header["adam_steps"] = {trainer->opt_g.step_count, trainer->opt_d.step_count,
                                trainer->opt_c.step_count};
    }

    std::string out;
    out += "VCCK";
    detail::put_u32le(out, 1);
    std::string hj = header.dump();
    detail::put_u32le(out, static_cast<uint32_t>(hj.size()));
    out += hj;

    detail::BlockWriter w{out};
    visit_params(bundle.gen, [&](const std::string& n, Tensor& t) { w.write_tensor(n, t); });
    visit_params(bundle.dis, "D", [&](const std::string& n, Tensor& t) { w.write_tensor(n, t); });
    visit_params(bundle.cls, "C", [&](const std::string& n, Tensor& t) { w.write_tensor(n, t); });
    visit_running(bundle.gen, [&](const std::string& n, RunningStats& rs) {
        w.write_vec(n + ".rmean", rs.mean);
        w.write_vec(n + ".rvar", rs.var);
    });
    visit_running(bundle.dis, "D", [&](const std::string& n, RunningStats& rs) {
        w.write_vec(n + ".rmean", rs.mean);
        w.write_vec(n + ".rvar", rs.var);
    });
    visit_running(bundle.cls, "C", [&](const std::string& n, RunningStats& rs) {
        w.write_vec(n + ".rmean", rs.mean);
        w.write_vec(n + ".rvar", rs.var);
    });
    w.write_vec("norm.mean", bundle.norm.mean);
    w.write_vec("norm.std", bundle.norm.std);
    std::vector<float> f0blob;
    for (const auto& s : bundle.speakers) {
        f0blob.push_back(static_cast<float>(s.f0.mean_logf0));
        f0blob.push_back(static_cast<float>(s.f0.std_logf0));
        f0blob.push_back(static_cast<float>(s.f0.voiced_frame_count));
    }
    w.write("f0stats", {static_cast<uint32_t>(bundle.speakers.size()), 3},
            f0blob.empty() ? nullptr : f0blob.data());
    if (trainer && trainer->present) {
        detail::write_adam(w, "adam.G", trainer->opt_g);
        detail::write_adam(w, "adam.D", trainer->opt_d);
        detail::write_adam(w, "adam.C", trainer->opt_c);
    }

    // atomic publish: an interrupted run never leaves a half-written file
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("short write: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline ModelBundle load_checkpoint(const std::string& path, TrainerState* trainer = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || bytes.compare(0, 4, "VCCK") != 0)
        throw IoError("not a checkpoint file: " + path);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
    uint32_t version = detail::get_u32le(p + 4);
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    uint32_t hlen = detail::get_u32le(p + 8);
    if (12 + static_cast<size_t>(hlen) > bytes.size()) throw IoError("truncated checkpoint header");
    nlohmann::json header = nlohmann::json::parse(bytes.substr(12, hlen));

    ModelBundle b;
    b.arch = header.at("arch").get<ArchSpec>();
    b.dsp = header.at("dsp").get<DspConfig>();
    b.step = header.at("step").get<int64_t>();
    // parameter tensors are rebuilt at the right shapes, then overwritten
    Pcg32 scratch(0);
    b.gen = init_generator(b.arch, scratch);
    b.dis = init_discriminator(b.arch, scratch);
    b.cls = init_classifier(b.arch, scratch);

    detail::BlockReader r(bytes, 12 + hlen);
    visit_params(b.gen, [&](const std::string& n, Tensor& t) { r.into_tensor(n, t); });
    visit_params(b.dis, "D", [&](const std::string& n, Tensor& t) { r.into_tensor(n, t); });
    visit_params(b.cls, "C", [&](const std::string& n, Tensor& t) { r.into_tensor(n, t); });
    auto read_rs = [&](const std::string& n, RunningStats& rs) {
        rs.mean = r.vec(n + ".rmean");
        rs.var = r.vec(n + ".rvar");
    };
    visit_running(b.gen, read_rs);
    visit_running(b.dis, "D", read_rs);
    visit_running(b.cls, "C", read_rs);
    b.norm.mean = r.vec("norm.mean");
    b.norm.std = r.vec("norm.std");
    const auto& f0blob = r.vec("f0stats");
    auto names = header.at("speakers").get<std::vector<std::string>>();
    if (f0blob.size() != names.size() * 3) throw IoError("checkpoint: f0stats size mismatch");
    for (size_t i = 0; i < names.size(); ++i)
        b.speakers.push_back(SpeakerInfo{
            names[i], F0Stats{f0blob[i * 3], f0blob[i * 3 + 1],
                              static_cast<int64_t>(f0blob[i * 3 + 2])}});

    if (trainer) {
        trainer->present = header.at("has_trainer_state").get<bool>();
        if (trainer->present) {
            uint64_t state = std::stoull(header.at("rng_state").get<std::string>());
            uint64_t inc = std::stoull(header.at("rng_inc").get<std::string>());
            trainer->rng.set_raw(state, inc);
            auto steps = header.at("adam_steps").get<std::vector<int64_t>>();
            auto gp = trainable_tensors(b.gen);
            auto dp = trainable_tensors(b.dis);
            auto cp = trainable_tensors(b.cls);
            detail::read_adam(r, "adam.G", trainer->opt_g, gp);
            detail::read_adam(r, "adam.D", trainer->opt_d, dp);
            detail::read_adam(r, "adam.C", trainer->opt_c, cp);
            trainer->opt_g.step_count = steps.at(0);
            trainer->opt_d.step_count = steps.at(1);
            trainer->opt_c.step_count = steps.at(2);
        }
    }
    return b;
}

}  // namespace vcstar
