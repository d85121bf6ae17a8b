#include "fseb/rng.hpp"

namespace fseb {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream, std::uint64_t counter) {
  return splitmix64(splitmix64(splitmix64(root) ^ stream) + counter);
}

std::uint64_t derive_seed(std::uint64_t root, Stream stream, std::uint64_t counter) {
  return derive_seed(root, static_cast<std::uint64_t>(stream), counter);
}

}  // namespace fseb
