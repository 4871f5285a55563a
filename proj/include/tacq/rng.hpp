#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tacq/tensor.hpp"

namespace tacq {

/// Counter-based pseudo-random generator: output i is a pure function of
/// (seed, i), so streams are reproducible across runs and platforms and a
/// generator can be rebuilt from its seed alone. Gaussian samples come from
/// Box-Muller over the uniform stream. A generator has a single owner;
/// parallel work should derive independent children via child()/child_seed().
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64();
    /// Uniform in [0,1).
    double uniform();
    /// Standard normal sample.
    double normal();

    /// Independent child stream; deterministic in (seed, stream).
    Rng child(uint64_t stream) const { return Rng(child_seed(stream)); }
    Rng child(const std::string& label) const;
    uint64_t child_seed(uint64_t stream) const;

    /// Tensor of i.i.d. standard normal samples.
    Tensor randn(std::vector<size_t> shape);
    /// Uniform integer in [0, n).
    uint64_t uniform_index(uint64_t n);

private:
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// randn as a free operation (spec surface); equivalent to rng.randn(shape).
Tensor randn(Rng& rng, std::vector<size_t> shape);

}  // namespace tacq
