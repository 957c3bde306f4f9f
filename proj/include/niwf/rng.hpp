#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace niwf {

// Counter-based deterministic generator (splitmix64 finalizer over seed + counter).
// State is exactly (seed, counter), so serialization and replay are trivial and
// identical draw sequences reproduce bit-identical 32-bit values across runs.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    static Rng restore(uint64_t seed, uint64_t counter) {
        Rng r(seed);
        r.counter_ = counter;
        return r;
    }

    // Independent stream derived from this seed and a label; starts at counter 0.
    Rng split(std::string_view stream) const {
        uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a 64
        for (char c : stream) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return Rng(mix(seed_ ^ h));
    }
    Rng split(uint64_t salt) const { return Rng(mix(seed_ ^ mix(salt + 0x9e3779b97f4a7c15ULL))); }

    uint64_t next_u64() {
        ++counter_;
        return mix(seed_ + 0x9e3779b97f4a7c15ULL * counter_);
    }

    // Uniform in [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform_float(float lo, float hi) {
        return static_cast<float>(lo + (static_cast<double>(hi) - lo) * uniform());
    }

    // Standard normal via Box-Muller; two draws per value, no cached state.
    float normal_float() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
        double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        return static_cast<float>(r * std::cos(2.0 * 3.14159265358979323846 * u2));
    }

    // Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return n <= 1 ? 0 : next_u64() % n; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }

private:
    static uint64_t mix(uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace niwf
