#pragma once

#include <cstdint>

namespace gtrans {

// Splittable counter-based generator. Every consumer derives its own stream
// with split(), so the values drawn by one module never depend on how many
// draws another module made. Output is a SplitMix64-style bijective mix of
// (key, counter).
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ull))), counter_(0) {}

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Uniform in [0, 1) with 53 random bits.
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [-bound, bound).
    double next_symmetric(double bound) { return (2.0 * next_uniform() - 1.0) * bound; }

    // Uniform in [0, n); n must be positive. Multiply-shift keeps the bias
    // far below anything a desk-scale draw count could surface.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Derives an independent stream; does not advance this generator.
    Rng split(std::uint64_t salt) const {
        Rng child(0);
        child.key_ = mix(key_ ^ mix(salt + 0x632be59bd9b4e019ull));
        child.counter_ = 0;
        return child;
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }
    void restore(std::uint64_t key, std::uint64_t counter) {
        key_ = key;
        counter_ = counter;
    }

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

  private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

// Stable 64-bit FNV-1a over a string, used to salt per-parameter streams.
inline std::uint64_t hash_name(const char* s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (; *s; ++s) {
        h ^= static_cast<unsigned char>(*s);
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace gtrans
