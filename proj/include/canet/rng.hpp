#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace canet {

// Single seeded source for every stochastic draw (patch sampling, weight
// init, shuffling). State is serializable so a resumed run continues the
// same stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    void reseed(std::uint64_t seed) { engine_.seed(seed); }

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    // Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

    std::mt19937_64& engine() { return engine_; }

    std::string state() const;
    void restore(const std::string& state);

private:
    std::mt19937_64 engine_;
};

// Process-wide generator used by the CLI entry points.
Rng& global_rng();

// Reseeds the process-wide generator. All library code paths that draw
// randomness take an Rng& explicitly, so this is the only global state.
void set_global_determinism(std::uint64_t seed);

}  // namespace canet
