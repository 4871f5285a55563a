#include "tacq/rng.hpp"

#include <cmath>

namespace tacq {

namespace {

// splitmix64 finalizer; bijective on 64-bit words.
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

uint64_t Rng::next_u64() {
    ++counter_;
    return mix64(seed_ + kGamma * counter_);
}

double Rng::uniform() {
    // 53 mantissa bits -> [0,1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0,1] so the log is finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = kTwoPi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

uint64_t Rng::child_seed(uint64_t stream) const {
    return mix64(seed_ ^ (0xD1B54A32D192ED03ULL + kGamma * (stream + 1)));
}

Rng Rng::child(const std::string& label) const {
    // FNV-1a over the label picks the stream id.
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return child(h);
}

Tensor Rng::randn(std::vector<size_t> shape) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = normal();
    return t;
}

uint64_t Rng::uniform_index(uint64_t n) {
    // Rejection-free modulo is fine here: n is tiny relative to 2^64.
    return next_u64() % n;
}

Tensor randn(Rng& rng, std::vector<size_t> shape) { return rng.randn(std::move(shape)); }

}  // namespace tacq
