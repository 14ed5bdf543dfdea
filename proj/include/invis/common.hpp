// Error type and small shared utilities used across the library.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace invis {

// Coarse failure categories; the CLI prints these as a machine-parsable
// one-liner ("error(<category>): ...") and maps them to nonzero exit codes.
enum class ErrorCategory {
    usage,       // bad command line
    config,      // bad config key/value
    io,          // file missing/unreadable/unwritable
    shape,       // tensor/image dimension mismatch
    numeric,     // non-finite values, divergence
    degenerate,  // mathematically degenerate input (rank-deficient, empty)
    dependency,  // pipeline stage artifact missing
    internal,
};

inline const char* to_string(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::usage: return "usage";
        case ErrorCategory::config: return "config";
        case ErrorCategory::io: return "io";
        case ErrorCategory::shape: return "shape";
        case ErrorCategory::numeric: return "numeric";
        case ErrorCategory::degenerate: return "degenerate";
        case ErrorCategory::dependency: return "dependency";
        case ErrorCategory::internal: return "internal";
    }
    return "internal";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCategory cat, const std::string& msg)
        : std::runtime_error(msg), category(cat) {}
    ErrorCategory category;
};

[[noreturn]] inline void fail(ErrorCategory cat, const std::string& msg) {
    throw Error(cat, msg);
}

// FNV-1a, used to derive per-stage RNG streams from (seed, label).
inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the xor; good avalanche for stream splitting
    uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace invis
