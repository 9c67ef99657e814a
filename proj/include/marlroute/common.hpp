#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace marl {

// Thrown on malformed network/config files; carries line/field context.
class LoadError : public std::runtime_error {
public:
    explicit LoadError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A router returned a road outside NH(r_c), or similar contract breach.
// Never masked: aborts the run with exit code 3.
class ProtocolViolation : public std::runtime_error {
public:
    explicit ProtocolViolation(const std::string& msg) : std::runtime_error(msg) {}
};

class NoPathError : public std::runtime_error {
public:
    explicit NoPathError(const std::string& msg) : std::runtime_error(msg) {}
};

class EncodingCollision : public std::runtime_error {
public:
    explicit EncodingCollision(const std::string& msg) : std::runtime_error(msg) {}
};

class HubConnectivityError : public std::runtime_error {
public:
    explicit HubConnectivityError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent, reproducible RNG streams derived from a master seed.
inline uint64_t derive_seed(uint64_t master, uint64_t stream, uint64_t index) {
    return splitmix64(splitmix64(master ^ (stream * 0xd6e8feb86659fd93ULL)) + index);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        return static_cast<int>(std::uniform_int_distribution<uint64_t>(0, n - 1)(eng_));
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(eng_);
    }

    bool bernoulli(double p) {
        if (p <= 0.0) return false;
        if (p >= 1.0) return true;
        return uniform() < p;
    }

    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
};

}  // namespace marl
