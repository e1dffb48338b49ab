#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>

#include "moat/tensor.hpp"

namespace moat {

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// All randomness flows from one seed fanned into named streams, so e.g. the
// stochastic-depth draws do not perturb the data order.
class RngHub {
public:
    explicit RngHub(uint64_t seed = 0) : seed_(seed) {}

    uint64_t seed() const { return seed_; }

    std::mt19937_64& stream(const std::string& name) {
        auto it = streams_.find(name);
        if (it == streams_.end()) {
            uint64_t s = fnv1a64(name, seed_ ^ 0x9e3779b97f4a7c15ull);
            it = streams_.emplace(name, std::mt19937_64(s)).first;
        }
        return it->second;
    }

private:
    uint64_t seed_;
    std::unordered_map<std::string, std::mt19937_64> streams_;
};

template <typename T>
T uniform(std::mt19937_64& g, T lo, T hi) {
    std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
    return static_cast<T>(d(g));
}

template <typename T>
T normal(std::mt19937_64& g, T mean = 0, T stddev = 1) {
    std::normal_distribution<double> d(static_cast<double>(mean), static_cast<double>(stddev));
    return static_cast<T>(d(g));
}

// Truncated normal: resample until within two standard deviations.
template <typename T>
void fill_trunc_normal(Tensor<T>& t, std::mt19937_64& g, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v = d(g);
        while (std::abs(v) > 2.0 * stddev) v = d(g);
        t[i] = static_cast<T>(v);
    }
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& g, T lo, T hi) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform<T>(g, lo, hi);
}

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& g, T mean = 0, T stddev = 1) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal<T>(g, mean, stddev);
}

}  // namespace moat
