#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "arra/tensor.hpp"

namespace arra::num {

// Checkpoint container. Layout:
//
//   8 bytes   magic "ARRACON1"
//   u32 LE    index length
//   index     UTF-8 JSON {"meta": {...}, "entries": [{"name", "dtype",
//             "shape", "offset", "bytes"}, ...], "payload_crc32": N}
//   payload   entries concatenated in index order; each entry is
//             u32 LE header length, UTF-8 JSON header {"name", "dtype",
//             "shape"}, then raw row-major little-endian values
//             (4 bytes each for f32, 8 for f64)
//
// `offset` is relative to the payload start, `bytes` is the full entry size
// including its header. The CRC covers the whole payload, so a truncated or
// bit-flipped file fails closed with IntegrityError instead of loading
// garbage weights.
struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::string> order;
  std::map<std::string, Tensor> tensors;

  void add(const std::string& name, const Tensor& t);
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  const Tensor& at(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);
};

}  // namespace arra::num
