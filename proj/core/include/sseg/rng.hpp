#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

namespace sseg {

/// Self-contained xoshiro256++ generator. Used everywhere instead of the
/// standard distributions so that streams are identical across platforms
/// and can be serialized into checkpoints.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();

    /// Uniform in [0, 1).
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Standard normal via Box-Muller (two uniforms per pair, cached).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_int(std::uint64_t n);

    std::array<std::uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<std::uint64_t, 4>& s) {
        s_ = s;
        has_cached_ = false;
    }

private:
    std::array<std::uint64_t, 4> s_{};
    bool has_cached_ = false;
    double cached_ = 0.0;
};

/// Fisher-Yates shuffle driven by our generator (std::shuffle is not
/// reproducible across standard libraries).
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(i)));
        std::swap(v[i - 1], v[j]);
    }
}

/// Deterministic derivation of sub-stream seeds, e.g.
/// derive_seed(cfg.seed, {kStreamAugment, epoch, index}).
std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path);

// Stream tags for derive_seed. Values are arbitrary but frozen.
inline constexpr std::uint64_t kStreamInit = 0x01;
inline constexpr std::uint64_t kStreamShuffle = 0x02;
inline constexpr std::uint64_t kStreamAugment = 0x03;
inline constexpr std::uint64_t kStreamPseudoMask = 0x04;
inline constexpr std::uint64_t kStreamSynth = 0x05;

}  // namespace sseg
