#pragma once

#include <array>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cprompt/tensor.hpp"

// Binary container used by every on-disk artifact (backbone cache, experiment
// checkpoints). Layout, all little-endian:
//
//   bytes 0..3   magic "CPRK"
//   bytes 4..7   container version (u32)
//   bytes 8..15  payload size in bytes (u64)
//   ...          payload
//   last 8       FNV-1a 64 hash of the payload
//
// Payload contents are written through ByteWriter in a fixed field order; the
// same order read back gives a byte-identical re-serialization.

namespace cprompt {

inline constexpr std::uint32_t kContainerVersion = 1;

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

class ByteWriter {
public:
    void put_u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

    void put_u32(std::uint32_t v) { put_raw(&v, sizeof v); }
    void put_u64(std::uint64_t v) { put_raw(&v, sizeof v); }
    void put_i32(std::int32_t v) { put_raw(&v, sizeof v); }
    void put_i64(std::int64_t v) { put_raw(&v, sizeof v); }
    void put_f64(double v) { put_raw(&v, sizeof v); }

    void put_string(const std::string& s) {
        put_u64(s.size());
        buf_.append(s);
    }

    template <std::floating_point T>
    void put_scalar(T v) {
        put_raw(&v, sizeof v);
    }

    template <std::floating_point T>
    void put_span(const T* p, std::size_t n) {
        put_raw(p, n * sizeof(T));
    }

    template <std::floating_point T>
    void put_tensor(const Tensor<T>& t) {
        put_u32(static_cast<std::uint32_t>(t.ndim()));
        for (int d : t.shape()) put_i32(d);
        put_u8(t.requires_grad() ? 1 : 0);
        put_span(t.data(), static_cast<std::size_t>(t.numel()));
    }

    const std::string& bytes() const { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    void put_raw(const void* p, std::size_t n) {
        buf_.append(static_cast<const char*>(p), n);
    }

    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}

    std::uint8_t get_u8() { return static_cast<std::uint8_t>(take(1)[0]); }
    std::uint32_t get_u32() { return get_raw<std::uint32_t>(); }
    std::uint64_t get_u64() { return get_raw<std::uint64_t>(); }
    std::int32_t get_i32() { return get_raw<std::int32_t>(); }
    std::int64_t get_i64() { return get_raw<std::int64_t>(); }
    double get_f64() { return get_raw<double>(); }

    std::string get_string() {
        const auto n = get_u64();
        return std::string(take(n), n);
    }

    template <std::floating_point T>
    T get_scalar() {
        return get_raw<T>();
    }

    template <std::floating_point T>
    std::vector<T> get_span(std::size_t n) {
        std::vector<T> out(n);
        std::memcpy(out.data(), take(n * sizeof(T)), n * sizeof(T));
        return out;
    }

    template <std::floating_point T>
    Tensor<T> get_tensor() {
        const auto nd = get_u32();
        if (nd == 0 || nd > 8) throw std::runtime_error("container: corrupt tensor rank");
        std::vector<int> shape(nd);
        std::int64_t numel = 1;
        for (auto& d : shape) {
            d = get_i32();
            if (d <= 0) throw std::runtime_error("container: corrupt tensor shape");
            numel *= d;
        }
        const bool rg = get_u8() != 0;
        auto data = get_span<T>(static_cast<std::size_t>(numel));
        Tensor<T> t(std::move(shape), std::move(data));
        t.set_requires_grad(rg);
        return t;
    }

    bool exhausted() const { return pos_ == buf_.size(); }

private:
    const char* take(std::size_t n) {
        if (pos_ + n > buf_.size()) throw std::runtime_error("container: truncated payload");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    template <typename V>
    V get_raw() {
        V v;
        std::memcpy(&v, take(sizeof v), sizeof v);
        return v;
    }

    std::string buf_;
    std::size_t pos_ = 0;
};

inline void write_container(const std::filesystem::path& path, const std::string& payload) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("container: cannot open for write: " + path.string());
    out.write("CPRK", 4);
    const std::uint32_t ver = kContainerVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof ver);
    const std::uint64_t size = payload.size();
    out.write(reinterpret_cast<const char*>(&size), sizeof size);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    const std::uint64_t hash = fnv1a(payload.data(), payload.size());
    out.write(reinterpret_cast<const char*>(&hash), sizeof hash);
    if (!out) throw std::runtime_error("container: write failed: " + path.string());
}

inline std::string read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("container: cannot open: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "CPRK")
        throw std::runtime_error("container: bad magic in " + path.string());
    std::uint32_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), sizeof ver);
    if (!in || ver != kContainerVersion)
        throw std::runtime_error("container: unsupported container version in " + path.string());
    std::uint64_t size = 0;
    in.read(reinterpret_cast<char*>(&size), sizeof size);
    if (!in) throw std::runtime_error("container: truncated header in " + path.string());
    std::string payload(size, '\0');
    in.read(payload.data(), static_cast<std::streamsize>(size));
    std::uint64_t hash = 0;
    in.read(reinterpret_cast<char*>(&hash), sizeof hash);
    if (!in) throw std::runtime_error("container: truncated file: " + path.string());
    if (fnv1a(payload.data(), payload.size()) != hash)
        throw std::runtime_error("container: content hash mismatch (corrupt file): " + path.string());
    return payload;
}

}  // namespace cprompt
