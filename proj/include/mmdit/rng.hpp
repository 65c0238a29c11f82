#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace mmdit {

// Counter-based generator: the value of draw n depends only on (seed, n),
// never on call interleaving, so streams can be split and replayed freely.
class CounterRng {
public:
    CounterRng() = default;
    explicit CounterRng(uint64_t seed, uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

    uint64_t next_u64() { return mix(seed_, counter_++); }

    // uniform in (0, 1]; never 0 so log() below is safe
    double uniform() {
        uint64_t u = next_u64() >> 11;  // 53 bits
        return (static_cast<double>(u) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // derive an independent stream, e.g. per training step or per label
    CounterRng derive(uint64_t stream) const { return CounterRng(mix(seed_, mix(stream, 0x9e3779b97f4a7c15ull))); }
    CounterRng derive(std::string_view label) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : label) {
            h ^= static_cast<uint8_t>(c);
            h *= 0x100000001b3ull;
        }
        return derive(h);
    }

    static uint64_t mix(uint64_t a, uint64_t b) {
        // splitmix64 on the combined words
        uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace mmdit
