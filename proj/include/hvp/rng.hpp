#pragma once

#include <cmath>
#include <cstdint>

#include "hvp/tensor.hpp"

namespace hvp {

// Counter-based random stream: stateless hash of (seed, stream, counter).
// Rollouts split one seed into independent streams per noise role, so a
// guided and an unguided rollout with the same seed consume identical step
// noise even when one of them skips the control stream entirely.
class NoiseStream {
  public:
    // Roles used by rollouts. Keeping them centralized makes the shared-noise
    // reduction tests possible.
    enum Role : std::uint64_t { kInitNoise = 0, kControlNoise = 1, kStepNoise = 2, kData = 3, kInit = 4 };

    NoiseStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    double uniform() {  // in (0,1)
        std::uint64_t z = mix(seed_ ^ rotl(stream_, 17), counter_++);
        // 53-bit mantissa, strictly inside (0,1)
        return (static_cast<double>(z >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Tensor normal_vec(std::size_t d) {
        Tensor t = Tensor::zeros({d});
        for (std::size_t i = 0; i < d; ++i) t.v[i] = normal();
        return t;
    }

    std::uint64_t uniform_u64() { return mix(seed_ ^ rotl(stream_, 17), counter_++); }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    // splitmix64-style finalizer over a combined key
    static std::uint64_t mix(std::uint64_t key, std::uint64_t ctr) {
        std::uint64_t z = key + 0x9e3779b97f4a7c15ULL * (ctr + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace hvp
