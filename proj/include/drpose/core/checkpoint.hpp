#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "drpose/core/nn.hpp"

namespace drpose {

// DRPK parameter checkpoint:
//   magic "DRPK" | u16 version | u32 tensor count |
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims..., f32 data (LE)
// A descriptor string travels as the reserved tensor "__meta__" whose f32
// elements hold the UTF-8 bytes (exact in f32, keeps the container uniform).

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}
template <typename U>
void put_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    for (size_t i = 0; i < sizeof(U); ++i) buf[i] = (unsigned char)((v >> (8 * i)) & 0xff);
    put_bytes(os, buf, sizeof(U));
}
inline void put_f32(std::ostream& os, float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    put_le<uint32_t>(os, u);
}

template <typename U>
U get_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= U(buf[i]) << (8 * i);
    return v;
}
inline float get_f32(std::istream& is) {
    uint32_t u = get_le<uint32_t>(is);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

} // namespace detail

inline constexpr uint16_t kDrpkVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

inline void save_drpk(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("save_drpk: cannot open " + path);
    detail::put_bytes(os, "DRPK", 4);
    detail::put_le<uint16_t>(os, kDrpkVersion);
    detail::put_le<uint32_t>(os, uint32_t(tensors.size()));
    for (const auto& t : tensors) {
        detail::put_le<uint32_t>(os, uint32_t(t.name.size()));
        detail::put_bytes(os, t.name.data(), t.name.size());
        detail::put_le<uint32_t>(os, uint32_t(t.shape.size()));
        for (size_t d : t.shape) detail::put_le<uint64_t>(os, uint64_t(d));
        for (float f : t.data) detail::put_f32(os, f);
    }
    if (!os) throw IoError("save_drpk: write failure on " + path);
}

inline std::vector<NamedTensor> load_drpk(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_drpk: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DRPK", 4) != 0) throw IoError("load_drpk: bad magic in " + path);
    const uint16_t version = detail::get_le<uint16_t>(is);
    if (version != kDrpkVersion) throw IoError("load_drpk: unsupported version in " + path);
    const uint32_t count = detail::get_le<uint32_t>(is);
    std::vector<NamedTensor> out(count);
    for (auto& t : out) {
        const uint32_t name_len = detail::get_le<uint32_t>(is);
        t.name.resize(name_len);
        is.read(t.name.data(), name_len);
        const uint32_t rank = detail::get_le<uint32_t>(is);
        t.shape.resize(rank);
        size_t n = 1;
        for (auto& d : t.shape) {
            d = size_t(detail::get_le<uint64_t>(is));
            n *= d;
        }
        t.data.resize(n);
        for (auto& f : t.data) f = detail::get_f32(is);
        if (!is) throw IoError("load_drpk: truncated file " + path);
    }
    return out;
}

/// Save a parameter store; `meta` (when non-empty) is embedded as "__meta__".
template <typename T>
void save_params(const std::string& path, const ParamStore<T>& params, const std::string& meta = "") {
    std::vector<NamedTensor> tensors;
    if (!meta.empty()) {
        NamedTensor m;
        m.name = "__meta__";
        m.shape = {meta.size()};
        m.data.reserve(meta.size());
        for (unsigned char c : meta) m.data.push_back(float(c));
        tensors.push_back(std::move(m));
    }
    for (const auto& [name, p] : params) {
        NamedTensor t;
        t.name = name;
        t.shape = p.shape;
        t.data.assign(p.ptr(), p.ptr() + p.size());
        tensors.push_back(std::move(t));
    }
    save_drpk(path, tensors);
}

/// Load values into an existing store (shapes must match); returns the
/// embedded meta string (empty if absent).
template <typename T>
std::string load_params(const std::string& path, ParamStore<T>& params) {
    std::string meta;
    size_t loaded = 0;
    for (const auto& t : load_drpk(path)) {
        if (t.name == "__meta__") {
            meta.reserve(t.data.size());
            for (float f : t.data) meta.push_back(char((unsigned char)(f)));
            continue;
        }
        Array<T>& p = params.get(t.name);
        if (p.shape != t.shape)
            throw IoError("load_params: shape mismatch for " + t.name + ": file " + shape_str(t.shape) +
                          " vs model " + shape_str(p.shape));
        for (size_t i = 0; i < t.data.size(); ++i) p[i] = T(t.data[i]);
        ++loaded;
    }
    if (loaded != params.size()) throw IoError("load_params: tensor count mismatch in " + path);
    return meta;
}

} // namespace drpose
