#ifndef PKUS_RANDOM_HPP
#define PKUS_RANDOM_HPP

#include "pkus/linalg.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace pkus {

/// Seeded normal/uniform source for weights, data and test fixtures.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Independent stream derived from (seed, label).
    Rng(std::uint64_t seed, std::string_view label) : engine_(mix(seed, label)) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    std::uint64_t next_u64() { return engine_(); }

    Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
        Mat m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = stddev * normal();
        }
        return m;
    }

    Vec normal_vector(Eigen::Index n, double stddev = 1.0) {
        Vec v(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            v[i] = stddev * normal();
        }
        return v;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    static std::uint64_t mix(std::uint64_t seed, std::string_view label) {
        // FNV-1a over the label, folded into the seed with a splitmix64 finalizer.
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : label) {
            h = (h ^ static_cast<std::uint8_t>(c)) * 0x100000001b3ull;
        }
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace pkus

#endif  // PKUS_RANDOM_HPP
