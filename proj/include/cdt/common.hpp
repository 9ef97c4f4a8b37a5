#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace cdt {

// Error taxonomy. The CLI maps these to exit codes:
// ConfigError -> 2, IoError -> 3, everything below -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// Derives an independent sub-stream seed from (seed, stream) via a
// splitmix64 round, so that e.g. data generation, k-means and probe
// training never share a generator state.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace cdt
