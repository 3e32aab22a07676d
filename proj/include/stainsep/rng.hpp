// Seed handling: every run has one root seed, consumers get independent
// streams derived with splitmix64 so adding a consumer never shifts the
// others.
#pragma once

#include <cstdint>
#include <random>

namespace stainsep {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t consumer) {
    return splitmix64(root ^ splitmix64(consumer));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(gen_);
    }

    int uniform_int(int lo, int hi) {  // inclusive
        return std::uniform_int_distribution<int>(lo, hi)(gen_);
    }

    std::mt19937_64& gen() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace stainsep
