#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

// Shared plumbing: error taxonomy, deterministic RNG, small format helpers.
// Everything downstream assumes little-endian storage for binary formats.

static_assert(std::endian::native == std::endian::little,
              "binary file formats are little-endian");

namespace iseg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape disagreement between tensors / masks.
struct DimensionError : Error {
    using Error::Error;
};

// A precondition of an operation was violated (non-scalar loss, empty box, ...).
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration value or model/checkpoint structure mismatch.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed input file; carries the byte offset where parsing stopped.
struct ParseError : Error {
    ParseError(const std::string& msg, std::uint64_t offset)
        : Error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::uint64_t byte_offset = 0;
};

struct IoError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

// Deterministic splitmix64 generator. All stochastic choices in the project go
// through this class so results are reproducible across platforms and runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds
        next_u64();
        next_u64();
    }

    static Rng from(std::uint64_t seed, std::uint64_t stream) {
        Rng r(seed);
        r.state_ ^= 0x9e3779b97f4a7c15ull * (stream + 1);
        r.next_u64();
        return r;
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    int uniform_int(int lo, int hi) {
        if (hi <= lo) return lo;
        std::uint64_t span = std::uint64_t(hi - lo) + 1;
        return lo + int(next_u64() % span);
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = std::size_t(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices drawn from [0, n), order randomized
    std::vector<int> sample_indices(int n, int k) {
        std::vector<int> pool(static_cast<std::size_t>(n), 0);
        for (int i = 0; i < n; ++i) pool[std::size_t(i)] = i;
        shuffle(pool);
        if (k < n) pool.resize(std::size_t(k));
        return pool;
    }

private:
    std::uint64_t state_;
};

// printf-style helpers; all numeric text output funnels through these so the
// same value always serializes to the same bytes.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string format_float(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline std::string format_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

}  // namespace iseg
