#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace simflow {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based stream derivation: the seed of stream (tag, index) depends
/// only on the root seed, so any stage or step can be regenerated alone.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag, std::uint64_t index = 0) {
    return splitmix64(splitmix64(splitmix64(root) ^ tag) + index);
}

/// Stream tags. Values are arbitrary but fixed forever (they feed file hashes).
namespace stream {
inline constexpr std::uint64_t init = 0x11;
inline constexpr std::uint64_t prior = 0x21;
inline constexpr std::uint64_t noise = 0x22;
inline constexpr std::uint64_t train = 0x31;
inline constexpr std::uint64_t selfcond = 0x32;
inline constexpr std::uint64_t finetune = 0x33;
inline constexpr std::uint64_t sample = 0x41;
inline constexpr std::uint64_t mcmc = 0x51;
inline constexpr std::uint64_t metric = 0x61;
inline constexpr std::uint64_t observation = 0x71;
} // namespace stream

class rng {
public:
    explicit rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on the open interval (0, 1).
    double uniform_open() {
        double u;
        do u = uniform();
        while (u == 0.0);
        return u;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() { return normal_(engine_); }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

    std::vector<double> normals(std::size_t n) {
        std::vector<double> out(n);
        for (auto& v : out) v = normal();
        return out;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_;
};

} // namespace simflow
