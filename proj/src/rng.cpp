#include "arra/rng.hpp"

#include <cmath>

namespace arra::num {

namespace {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

uint64_t Rng::hash_name(std::string_view name) {
  // FNV-1a 64
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

uint64_t Rng::bits(std::string_view stream) {
  auto it = counters_.find(std::string(stream));
  uint64_t counter = 0;
  if (it == counters_.end()) {
    counters_.emplace(std::string(stream), 1);
  } else {
    counter = it->second;
    it->second = counter + 1;
  }
  return splitmix64(splitmix64(seed_ ^ hash_name(stream)) + counter);
}

double Rng::uniform(std::string_view stream) {
  return static_cast<double>(bits(stream) >> 11) * 0x1.0p-53;
}

double Rng::normal(std::string_view stream) {
  // Box-Muller; the sine branch is discarded so one call = two ticks.
  double u1 = 1.0 - uniform(stream);  // (0, 1]
  double u2 = uniform(stream);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int64_t Rng::uniform_int(std::string_view stream, int64_t n) {
  if (n <= 0) throw NumericalError("uniform_int: n must be positive, got " + std::to_string(n));
  unsigned __int128 wide = static_cast<unsigned __int128>(bits(stream)) * static_cast<unsigned __int128>(n);
  return static_cast<int64_t>(wide >> 64);
}

}  // namespace arra::num
