#pragma once

// Checkpoint layout, all integers little-endian:
//
//   "L3PRUNE1"                                  8-byte magic
//   u32 config_len, config_len bytes            ModelConfig::to_text()
//   repeated until the trailer:
//     u32 name_len, name bytes
//     u32 rank, rank x u64 dims
//     product(dims) x f64
//   u32 crc32                                   over every preceding byte

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "l3prune/error.hpp"
#include "l3prune/model.hpp"

namespace l3p {

inline constexpr std::string_view kCheckpointMagic = "L3PRUNE1";

namespace detail {

inline std::uint32_t crc32_of(std::string_view bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
public:
    void raw(std::string_view s) { buf_.append(s); }
    void u32(std::uint32_t v) { le(v, 4); }
    void u64(std::uint64_t v) { le(v, 8); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
    std::string& bytes() { return buf_; }

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string_view bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    std::string_view raw(std::size_t n, const char* what) {
        need(n, what);
        std::string_view s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(le(4, what)); }
    std::uint64_t u64(const char* what) { return le(8, what); }
    double f64(const char* what) { return std::bit_cast<double>(le(8, what)); }
    bool done() const { return pos_ == end_; }

private:
    void need(std::size_t n, const char* what) {
        if (n > end_ - pos_) throw TruncatedError(what);
    }
    std::uint64_t le(int n, const char* what) {
        need(static_cast<std::size_t>(n), what);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::string_view bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Transformer& model) {
    detail::ByteWriter w;
    w.raw(kCheckpointMagic);
    const std::string cfg = model.config.to_text();
    w.u32(static_cast<std::uint32_t>(cfg.size()));
    w.raw(cfg);
    for (const auto& [name, t] : model.named_parameters()) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.raw(name);
        w.u32(static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) w.u64(d);
        for (double x : t->data()) w.f64(x);
    }
    w.u32(detail::crc32_of(w.bytes()));
    return std::move(w.bytes());
}

inline Transformer deserialize_checkpoint(std::string_view bytes) {
    if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
        throw BadMagicError();
    }
    if (bytes.size() < kCheckpointMagic.size() + 8) throw TruncatedError("file shorter than header");
    const std::size_t body_end = bytes.size() - 4;
    detail::ByteReader r(bytes, body_end);
    r.raw(kCheckpointMagic.size(), "magic");
    const std::uint32_t cfg_len = r.u32("config length");
    const ModelConfig config = ModelConfig::from_text(r.raw(cfg_len, "config text"));

    std::map<std::string, Tensor> tensors;
    while (!r.done()) {
        const std::uint32_t name_len = r.u32("tensor name length");
        std::string name(r.raw(name_len, "tensor name"));
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank > 8) throw TruncatedError("implausible rank for tensor " + name);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.u64("tensor dims"));
        const std::size_t n = shape_size(shape);
        if (n > (body_end) / 8) throw TruncatedError("payload of tensor " + name);
        std::vector<double> data(n);
        for (double& x : data) x = r.f64("tensor payload");
        tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    }

    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) {
        stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[body_end + i])) << (8 * i);
    }
    if (stored != detail::crc32_of(bytes.substr(0, body_end))) throw ChecksumError();

    config.validate();
    Transformer m;
    m.config = config;
    m.layers.resize(config.n_layers);
    const auto expected = parameter_shapes(config);
    auto slots = m.named_parameters();
    if (tensors.size() != expected.size()) {
        throw FormatError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, config implies " +
                          std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        auto it = tensors.find(expected[i].first);
        if (it == tensors.end()) throw FormatError("checkpoint missing tensor " + expected[i].first);
        if (it->second.shape() != expected[i].second) {
            throw FormatError("tensor " + expected[i].first + " has shape " + shape_str(it->second.shape()) +
                              ", expected " + shape_str(expected[i].second));
        }
        *slots[i].second = std::move(it->second);
    }
    return m;
}

inline void save_checkpoint(const Transformer& model, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + path.string());
}

inline Transformer load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace l3p
