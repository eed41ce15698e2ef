#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>

namespace qdpd {

// Counter-based generator: output i depends only on (key, i), so any stream
// replays bit-exactly regardless of thread schedule. Streams are derived by
// mixing a label or index into the key.
class Rng {
  public:
    explicit Rng(uint64_t seed, uint64_t stream_id = 0)
        : key_(mix64(seed ^ 0x9e3779b97f4a7c15ull) ^ mix64(stream_id + 0x6a09e667f3bcc909ull)) {}

    Rng stream(uint64_t substream) const { return Rng(key_, substream * 2 + 1); }

    Rng stream(std::string_view name) const {
        uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (char c : name) {
            h ^= static_cast<uint8_t>(c);
            h *= 1099511628211ull;
        }
        return Rng(key_, h);
    }

    uint64_t next_u64() { return mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ull); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    // Box-Muller, no cached spare: each call consumes exactly two uniforms.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(6.283185307179586477 * u2);
    }

    void fill_normal(std::span<float> out, double scale = 1.0) {
        for (float& v : out) v = static_cast<float>(scale * normal());
    }

    void fill_uniform(std::span<float> out, double lo, double hi) {
        for (float& v : out) v = static_cast<float>(uniform(lo, hi));
    }

  private:
    static uint64_t mix64(uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return x;
    }

    uint64_t key_;
    uint64_t counter_ = 0;
};

}  // namespace qdpd
