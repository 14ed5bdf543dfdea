// Dense row-major double tensor, the carrier for images, features, parameters
// and gradients, plus the NTSR file container and 8-bit pixmap export.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "invis/common.hpp"
#include "invis/rng.hpp"

namespace invis {

struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s, double fill = 0.0)
        : shape(std::move(s)), data(numel_of(shape), fill) {}
    Tensor(std::initializer_list<size_t> s, double fill = 0.0)
        : shape(s), data(numel_of(shape), fill) {}

    static size_t numel_of(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t e : s) {
            if (e == 0) fail(ErrorCategory::shape, "tensor extent must be positive");
            n *= e;
        }
        return n;
    }

    size_t numel() const { return data.size(); }
    size_t rank() const { return shape.size(); }
    size_t dim(size_t i) const { return shape.at(i); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // Flat accessors; the hot paths index manually for speed.
    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    // [C,H,W] accessors used throughout the image pipeline.
    double& at3(size_t c, size_t y, size_t x) {
        return data[(c * shape[1] + y) * shape[2] + x];
    }
    double at3(size_t c, size_t y, size_t x) const {
        return data[(c * shape[1] + y) * shape[2] + x];
    }
    double& at2(size_t y, size_t x) { return data[y * shape[1] + x]; }
    double at2(size_t y, size_t x) const { return data[y * shape[1] + x]; }

    double scalar() const {
        if (numel() != 1) fail(ErrorCategory::shape, "scalar() on non-scalar tensor");
        return data[0];
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double min_value() const { return *std::min_element(data.begin(), data.end()); }
    double max_value() const { return *std::max_element(data.begin(), data.end()); }
    double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }
    double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }

    Tensor& fill(double v) {
        std::fill(data.begin(), data.end(), v);
        return *this;
    }

    static Tensor full(std::vector<size_t> s, double v) { return Tensor(std::move(s), v); }
    static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s), 0.0); }

    static Tensor randn(std::vector<size_t> s, Rng& rng, double mean = 0.0, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (double& v : t.data) v = rng.normal(mean, stddev);
        return t;
    }
    static Tensor rand_uniform(std::vector<size_t> s, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(s));
        for (double& v : t.data) v = rng.uniform(lo, hi);
        return t;
    }
};

inline std::string shape_string(const std::vector<size_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// NTSR container: magic "NTSR", u32 format version, u32 rank, u64 extents,
// then raw little-endian doubles. Authoritative storage for checkpoints,
// samples and feature dumps.
// ---------------------------------------------------------------------------

namespace detail {
constexpr uint32_t kNtsrVersion = 1;

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline uint32_t get_u32(const unsigned char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}
inline uint64_t get_u64(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}
inline uint64_t double_bits(double d) {
    uint64_t b;
    std::memcpy(&b, &d, 8);
    return b;
}
inline double bits_double(uint64_t b) {
    double d;
    std::memcpy(&d, &b, 8);
    return d;
}
}  // namespace detail

inline std::string ntsr_encode(const Tensor& t) {
    std::string out;
    out.reserve(12 + 8 * t.rank() + 8 * t.numel());
    out += "NTSR";
    detail::put_u32(out, detail::kNtsrVersion);
    detail::put_u32(out, static_cast<uint32_t>(t.rank()));
    for (size_t e : t.shape) detail::put_u64(out, e);
    for (double v : t.data) detail::put_u64(out, detail::double_bits(v));
    return out;
}

inline void ntsr_save(const Tensor& t, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorCategory::io, "cannot open for write: " + path);
    std::string bytes = ntsr_encode(t);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail(ErrorCategory::io, "short write: " + path);
}

inline Tensor ntsr_decode(const std::string& bytes, const std::string& origin = "<memory>") {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 12 || std::memcmp(p, "NTSR", 4) != 0)
        fail(ErrorCategory::io, "not an NTSR file: " + origin);
    uint32_t version = detail::get_u32(p + 4);
    if (version != detail::kNtsrVersion)
        fail(ErrorCategory::io, "unsupported NTSR version " + std::to_string(version) + ": " + origin);
    uint32_t rank = detail::get_u32(p + 8);
    size_t off = 12;
    if (bytes.size() < off + 8ull * rank) fail(ErrorCategory::io, "truncated NTSR header: " + origin);
    std::vector<size_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<size_t>(detail::get_u64(p + off));
        off += 8;
    }
    Tensor t(shape);
    if (bytes.size() != off + 8ull * t.numel())
        fail(ErrorCategory::io, "NTSR payload size mismatch: " + origin);
    for (size_t i = 0; i < t.numel(); ++i) {
        t.data[i] = detail::bits_double(detail::get_u64(p + off));
        off += 8;
    }
    return t;
}

inline Tensor ntsr_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCategory::io, "cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return ntsr_decode(bytes, path);
}

// ---------------------------------------------------------------------------
// 8-bit portable pixmaps, for eyeballing generated samples and score maps.
// [3,H,W] -> PPM (P6), [1,H,W] or [H,W] -> PGM (P5). Values clamped to [0,1].
// ---------------------------------------------------------------------------

inline uint8_t to_byte(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

inline void pixmap_save(const Tensor& img, const std::string& path) {
    size_t C, H, W;
    if (img.rank() == 3) {
        C = img.shape[0];
        H = img.shape[1];
        W = img.shape[2];
    } else if (img.rank() == 2) {
        C = 1;
        H = img.shape[0];
        W = img.shape[1];
    } else {
        fail(ErrorCategory::shape, "pixmap_save expects rank 2 or 3, got " + shape_string(img.shape));
    }
    if (C != 1 && C != 3)
        fail(ErrorCategory::shape, "pixmap_save expects 1 or 3 channels, got " + std::to_string(C));
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorCategory::io, "cannot open for write: " + path);
    f << (C == 3 ? "P6\n" : "P5\n") << W << " " << H << "\n255\n";
    std::string row;
    row.reserve(W * C);
    for (size_t y = 0; y < H; ++y) {
        row.clear();
        for (size_t x = 0; x < W; ++x)
            for (size_t c = 0; c < C; ++c)
                row.push_back(static_cast<char>(to_byte(img.data[(c * H + y) * W + x])));
        f.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
}

}  // namespace invis
