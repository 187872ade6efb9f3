#pragma once

// FEA1 feature interchange format. Bit-exact contract:
//   4-byte magic "FEA1", little-endian u32 Q, u32 N, u8 kind,
//   then Q*N little-endian f32, row-major.
// kind: 0 = MCC, 1 = F0, 2 = envelope.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace vcstar {

enum class FeaKind : uint8_t { Mcc = 0, F0 = 1, Envelope = 2 };

struct FeaMatrix {
    uint32_t q = 0;
    uint32_t n = 0;
    FeaKind kind = FeaKind::Mcc;
    std::vector<float> values;  // row-major, q rows of n columns

    float at(uint32_t row, uint32_t col) const { return values[static_cast<size_t>(row) * n + col]; }
    float& at(uint32_t row, uint32_t col) { return values[static_cast<size_t>(row) * n + col]; }
};

namespace detail {

inline void put_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string fea_encode(const FeaMatrix& m) {
    if (m.values.size() != static_cast<size_t>(m.q) * m.n)
        throw ShapeError("fea_encode: value count does not match Q*N");
    std::string out;
    out.reserve(13 + m.values.size() * 4);
    out += "FEA1";
    detail::put_u32le(out, m.q);
    detail::put_u32le(out, m.n);
    out.push_back(static_cast<char>(m.kind));
    // assumes little-endian f32 host layout, checked at startup in the CLI
    size_t payload = m.values.size() * sizeof(float);
    size_t head = out.size();
    out.resize(head + payload);
    std::memcpy(out.data() + head, m.values.data(), payload);
    return out;
}

inline FeaMatrix fea_decode(const std::string& bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 13 || bytes.compare(0, 4, "FEA1") != 0)
        throw IoError("not a FEA1 file: " + origin);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
    FeaMatrix m;
    m.q = detail::get_u32le(p + 4);
    m.n = detail::get_u32le(p + 8);
    uint8_t kind = p[12];
    if (kind > 2) throw IoError("FEA1 kind byte out of range in " + origin);
    m.kind = static_cast<FeaKind>(kind);
    size_t expect = 13 + static_cast<size_t>(m.q) * m.n * sizeof(float);
    if (bytes.size() != expect)
        throw IoError("FEA1 payload size mismatch in " + origin + ": expected " +
                      std::to_string(expect) + " bytes, got " + std::to_string(bytes.size()));
    m.values.resize(static_cast<size_t>(m.q) * m.n);
    std::memcpy(m.values.data(), bytes.data() + 13, m.values.size() * sizeof(float));
    return m;
}

inline void fea_write(const std::string& path, const FeaMatrix& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    std::string bytes = fea_encode(m);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write: " + path);
}

inline FeaMatrix fea_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fea_decode(bytes, path);
}

}  // namespace vcstar
