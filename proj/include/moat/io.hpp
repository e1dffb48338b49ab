#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "moat/model.hpp"
#include "moat/rng.hpp"

namespace moat {

// Human-readable model config document (strict JSON subset).
ModelConfig parse_config(const std::string& text);
std::string emit_config(const ModelConfig& cfg);
ModelConfig load_config_file(const std::string& path);

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint layout, little-endian throughout:
//   magic "MOAT", u32 version, u64 tensor count,
//   per tensor: u32 name length, name bytes, u8 dtype (0=f32, 1=f64),
//               u8 rank, u64 dims[rank], raw scalars,
//   trailing u64 FNV-1a checksum over all preceding bytes.
// Tensors are every model state tensor (trainable parameters plus BN running
// statistics), sorted by name.
namespace ckpt {

inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<uint8_t>& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
inline uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}
inline uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

constexpr uint32_t kVersion = 1;

template <typename T>
constexpr uint8_t dtype_tag() {
    return sizeof(T) == 4 ? 0 : 1;
}

}  // namespace ckpt

template <typename T>
std::vector<uint8_t> serialize_checkpoint(const Model<T>& model) {
    std::vector<const Param<T>*> params;
    for (const auto& p : model.params().all()) params.push_back(p.get());
    std::sort(params.begin(), params.end(),
              [](const Param<T>* a, const Param<T>* b) { return a->name < b->name; });

    std::vector<uint8_t> buf;
    buf.push_back('M'); buf.push_back('O'); buf.push_back('A'); buf.push_back('T');
    ckpt::put_u32(buf, ckpt::kVersion);
    ckpt::put_u64(buf, params.size());
    for (const Param<T>* p : params) {
        ckpt::put_u32(buf, static_cast<uint32_t>(p->name.size()));
        buf.insert(buf.end(), p->name.begin(), p->name.end());
        buf.push_back(ckpt::dtype_tag<T>());
        const Shape& s = p->value().shape();
        buf.push_back(static_cast<uint8_t>(s.size()));
        for (int64_t d : s) ckpt::put_u64(buf, static_cast<uint64_t>(d));
        for (int64_t i = 0; i < p->value().numel(); ++i) {
            T v = p->value()[i];
            if constexpr (sizeof(T) == 4) {
                uint32_t bits;
                std::memcpy(&bits, &v, 4);
                ckpt::put_u32(buf, bits);
            } else {
                uint64_t bits;
                std::memcpy(&bits, &v, 8);
                ckpt::put_u64(buf, bits);
            }
        }
    }
    ckpt::put_u64(buf, fnv1a64(buf.data(), buf.size()));
    return buf;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
    std::vector<uint8_t> buf = serialize_checkpoint(model);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError("short write to " + path);
}

struct LoadReport {
    std::vector<std::string> applied;
    std::vector<std::string> dropped;  // file tensors intentionally absent from the model
};

// Validates the whole file (including the checksum) before touching the
// model, so a bad file never leaves a partially mutated model behind.
template <typename T>
LoadReport load_checkpoint(Model<T>& model, const std::string& path, bool allow_drop_rel_bias = false) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 24 || std::memcmp(buf.data(), "MOAT", 4) != 0)
        throw CheckpointError(path + ": not a MOAT checkpoint");
    if (ckpt::get_u32(buf.data() + 4) != ckpt::kVersion)
        throw CheckpointError(path + ": unsupported format version");
    uint64_t want = ckpt::get_u64(buf.data() + buf.size() - 8);
    uint64_t got = fnv1a64(buf.data(), buf.size() - 8);
    if (want != got) throw CheckpointError(path + ": checksum mismatch (truncated or corrupt file)");

    struct Entry {
        std::string name;
        uint8_t dtype;
        Shape shape;
        size_t data_off;
    };
    std::vector<Entry> entries;
    size_t pos = 8;
    uint64_t count = ckpt::get_u64(buf.data() + pos);
    pos += 8;
    size_t end = buf.size() - 8;
    auto need = [&](size_t n) {
        if (pos + n > end) throw CheckpointError(path + ": truncated tensor records");
    };
    for (uint64_t t = 0; t < count; ++t) {
        need(4);
        uint32_t nlen = ckpt::get_u32(buf.data() + pos);
        pos += 4;
        need(nlen + 2);
        Entry e;
        e.name.assign(reinterpret_cast<const char*>(buf.data() + pos), nlen);
        pos += nlen;
        e.dtype = buf[pos++];
        uint8_t rank = buf[pos++];
        if (e.dtype > 1) throw CheckpointError(path + ": unknown dtype tag for " + e.name);
        if (rank > 4) throw CheckpointError(path + ": bad rank for " + e.name);
        need(static_cast<size_t>(rank) * 8);
        int64_t numel = 1;
        for (int r = 0; r < rank; ++r) {
            int64_t d = static_cast<int64_t>(ckpt::get_u64(buf.data() + pos));
            pos += 8;
            e.shape.push_back(d);
            numel *= d;
        }
        size_t bytes = static_cast<size_t>(numel) * (e.dtype == 0 ? 4 : 8);
        need(bytes);
        e.data_off = pos;
        pos += bytes;
        entries.push_back(std::move(e));
    }
    if (pos != end) throw CheckpointError(path + ": trailing bytes after tensor records");

    // resolve every entry before mutating anything
    LoadReport rep;
    std::vector<std::pair<const Entry*, Param<T>*>> plan;
    for (const Entry& e : entries) {
        Param<T>* p = model.params().find(e.name);
        if (!p) {
            bool is_rel = e.name.size() >= 8 && e.name.substr(e.name.size() - 8) == "rel_bias";
            if (allow_drop_rel_bias && is_rel) {
                rep.dropped.push_back(e.name);
                continue;
            }
            throw CheckpointError(path + ": tensor " + e.name + " not present in the model");
        }
        if (p->value().shape() != e.shape)
            throw CheckpointError(path + ": shape mismatch for " + e.name + ": file " +
                                  shape_str(e.shape) + " vs model " + shape_str(p->value().shape()));
        plan.emplace_back(&e, p);
    }
    for (const auto& p : model.params().all()) {
        bool found = false;
        for (const Entry& e : entries)
            if (e.name == p->name) { found = true; break; }
        if (!found) throw CheckpointError(path + ": model parameter " + p->name + " missing from file");
    }

    for (auto& [e, p] : plan) {
        const uint8_t* d = buf.data() + e->data_off;
        for (int64_t i = 0; i < p->value().numel(); ++i) {
            if (e->dtype == 0) {
                uint32_t bits = ckpt::get_u32(d + i * 4);
                float v;
                std::memcpy(&v, &bits, 4);
                p->value()[i] = static_cast<T>(v);
            } else {
                uint64_t bits = ckpt::get_u64(d + i * 8);
                double v;
                std::memcpy(&v, &bits, 8);
                p->value()[i] = static_cast<T>(v);
            }
        }
        rep.applied.push_back(e->name);
    }
    return rep;
}

}  // namespace moat
