#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace dt {

// Deterministic random stream. The engine is std::mt19937_64 (fully specified
// by the standard); the real-valued draws are derived here rather than through
// <random> distributions, whose algorithms are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    // Standard normal (Box-Muller, no cached second value).
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

    std::string state() const;
    void set_state(const std::string& s);

private:
    std::mt19937_64 engine_;
};

}  // namespace dt
