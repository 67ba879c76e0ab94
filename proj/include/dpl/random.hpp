#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include <ATen/core/Generator.h>

namespace dpl {

// SplitMix64 finalizer; used for seed derivation and the hash embedder.
std::uint64_t splitmix64(std::uint64_t x);

// Independent stream seed from (root, stream, index). Every random draw in
// the toolkit flows from the run's root seed through this function.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream, std::uint64_t index = 0);

using Rng = std::mt19937_64;

at::Generator make_torch_generator(std::uint64_t seed);

// Uniform integer in [lo, hi] without relying on std::uniform_int_distribution,
// whose output differs between standard library implementations.
int uniform_int(Rng& rng, int lo, int hi);

// Uniform double in [0, 1) with 53 random bits.
double uniform_unit(Rng& rng);

// Standard normal via Box-Muller on uniform_unit draws.
double standard_normal(Rng& rng);

// Fisher-Yates over uniform_int.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

// Stream tags for derive_seed.
enum class SeedStream : std::uint64_t {
  kInit = 1,
  kShuffle = 2,
  kAugment = 3,
  kMaskSampling = 4,
  kSynthetic = 5,
  kEvaluation = 6,
  kPerturbation = 7,
};

inline std::uint64_t derive_seed(std::uint64_t root, SeedStream stream, std::uint64_t index = 0) {
  return derive_seed(root, static_cast<std::uint64_t>(stream), index);
}

}  // namespace dpl
