#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace fuse::num {

// std::mt19937_64's output sequence is fixed by the standard; the std
// distributions are not, so every conversion below is done by hand.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    /// Independent stream derived from this seed and a stream label.
    Rng split(std::string_view stream) const { return Rng(mix(seed_ ^ fnv1a(stream))); }
    Rng split(std::uint64_t stream) const { return Rng(mix(seed_ + 0x9e3779b97f4a7c15ULL * (stream + 1))); }

    std::uint64_t next_u64() { return engine_(); }

    /// Textual engine state; restore() resumes the exact draw sequence.
    std::string state() const {
        std::ostringstream os;
        os << seed_ << ' ' << engine_;
        return os.str();
    }
    void restore(const std::string& s) {
        std::istringstream is(s);
        if (!(is >> seed_ >> engine_)) throw std::invalid_argument("Rng: malformed state");
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling keeps the result unbiased and portable.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do v = engine_();
        while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller (no cached second value, so draws stay stateless).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    static constexpr std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

template <typename T>
void shuffle(T& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace fuse::num
