// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>

namespace linedet {

/// Counter-based pseudo-random generator (splitmix64 finalizer over a
/// seed + draw counter). The full state is two 64-bit integers, so it
/// serializes trivially and produces the same sequence on every platform.
/// Never uses <random> distributions, whose output is implementation-defined.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

    static Rng from_state(std::uint64_t seed, std::uint64_t counter) {
        Rng r(seed);
        r.counter_ = counter;
        return r;
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64() {
        std::uint64_t z = seed_ + (++counter_) * 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1), 53 random mantissa bits.
    double real01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * real01(); }

    /// Uniform integer in [lo, hi], both ends inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi < lo) throw std::invalid_argument("Rng::uniform_int: hi < lo");
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit range
        const auto wide = static_cast<unsigned __int128>(next_u64()) * span;
        return lo + static_cast<std::int64_t>(wide >> 64);
    }

    bool bernoulli(double p) { return real01() < p; }

    /// Derives an independent stream, e.g. one per dataset sample or per
    /// minibatch image, so parallel consumers stay reproducible.
    Rng fork(std::uint64_t stream) {
        std::uint64_t z = next_u64() ^ (stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        return Rng(z ^ (z >> 31));
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

}  // namespace linedet
