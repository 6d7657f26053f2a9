#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "arra/error.hpp"

namespace arra::num {

// Counter-based generator with independent named streams. A draw depends only
// on (run seed, stream name, per-stream counter), so two runs that differ in
// one configuration axis still see identical draws at every shared site, and
// resumption only needs the counters.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  uint64_t bits(std::string_view stream);
  double uniform(std::string_view stream);   // [0, 1)
  double normal(std::string_view stream);    // N(0, 1); consumes two counter ticks
  int64_t uniform_int(std::string_view stream, int64_t n);  // [0, n)

  uint64_t seed() const { return seed_; }
  const std::map<std::string, uint64_t>& counters() const { return counters_; }
  void set_counter(const std::string& stream, uint64_t value) { counters_[stream] = value; }

  static uint64_t hash_name(std::string_view name);

 private:
  uint64_t seed_;
  std::map<std::string, uint64_t> counters_;
};

}  // namespace arra::num
