#include "arra/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "arra/error.hpp"

namespace arra::num {

namespace {

constexpr char kMagic[8] = {'A', 'R', 'R', 'A', 'C', 'O', 'N', '1'};

void put_u32le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t get_u32le(const std::string& buf, size_t pos) {
  return static_cast<uint32_t>(static_cast<unsigned char>(buf[pos])) |
         static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + 1])) << 8 |
         static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + 2])) << 16 |
         static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + 3])) << 24;
}

void put_f32le(std::string& out, float v) { put_u32le(out, std::bit_cast<uint32_t>(v)); }

void put_f64le(std::string& out, double v) {
  const uint64_t bits = std::bit_cast<uint64_t>(v);
  put_u32le(out, static_cast<uint32_t>(bits & 0xFFFFFFFFu));
  put_u32le(out, static_cast<uint32_t>(bits >> 32));
}

float get_f32le(const std::string& buf, size_t pos) { return std::bit_cast<float>(get_u32le(buf, pos)); }

double get_f64le(const std::string& buf, size_t pos) {
  const uint64_t bits = static_cast<uint64_t>(get_u32le(buf, pos)) |
                        static_cast<uint64_t>(get_u32le(buf, pos + 4)) << 32;
  return std::bit_cast<double>(bits);
}

Dtype parse_dtype(const std::string& s, const std::filesystem::path& path) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw IntegrityError(path.string() + ": unknown dtype '" + s + "'");
}

}  // namespace

void Container::add(const std::string& name, const Tensor& t) {
  if (!t.defined()) throw IntegrityError("container: undefined tensor '" + name + "'");
  if (tensors.count(name)) throw IntegrityError("container: duplicate tensor '" + name + "'");
  order.push_back(name);
  tensors.emplace(name, t.detach());
}

const Tensor& Container::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw IntegrityError("container: no tensor named '" + name + "'");
  return it->second;
}

void Container::save(const std::filesystem::path& path) const {
  std::string payload;
  nlohmann::json entries = nlohmann::json::array();
  for (const std::string& name : order) {
    const Tensor& t = tensors.at(name);
    nlohmann::json header = {{"name", name}, {"dtype", dtype_name(t.dtype())}, {"shape", t.shape()}};
    const std::string header_str = header.dump();
    const size_t offset = payload.size();
    put_u32le(payload, static_cast<uint32_t>(header_str.size()));
    payload += header_str;
    if (t.dtype() == Dtype::f32)
      for (double v : t.data()) put_f32le(payload, static_cast<float>(v));
    else
      for (double v : t.data()) put_f64le(payload, v);
    entries.push_back({{"name", name},
                       {"dtype", dtype_name(t.dtype())},
                       {"shape", t.shape()},
                       {"offset", offset},
                       {"bytes", payload.size() - offset}});
  }

  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
  nlohmann::json index = {{"meta", meta}, {"entries", entries}, {"payload_crc32", crc}};
  const std::string index_str = index.dump();

  std::string blob;
  blob.append(kMagic, sizeof(kMagic));
  put_u32le(blob, static_cast<uint32_t>(index_str.size()));
  blob += index_str;
  blob += payload;

  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IntegrityError("container: cannot write " + tmp.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IntegrityError("container: short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("container: cannot open " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (blob.size() < sizeof(kMagic) + 4 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0)
    throw IntegrityError("container: " + path.string() + " is not a checkpoint container");
  const uint32_t index_len = get_u32le(blob, sizeof(kMagic));
  const size_t payload_start = sizeof(kMagic) + 4 + index_len;
  if (blob.size() < payload_start) throw IntegrityError("container: truncated index in " + path.string());

  nlohmann::json index;
  try {
    index = nlohmann::json::parse(blob.substr(sizeof(kMagic) + 4, index_len));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("container: bad index in " + path.string() + ": " + e.what());
  }

  const std::string payload = blob.substr(payload_start);
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
  if (crc != index.at("payload_crc32").get<uint32_t>())
    throw IntegrityError("container: checksum mismatch in " + path.string());

  Container c;
  c.meta = index.value("meta", nlohmann::json::object());
  for (const auto& entry : index.at("entries")) {
    const std::string name = entry.at("name").get<std::string>();
    const Dtype dtype = parse_dtype(entry.at("dtype").get<std::string>(), path);
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const size_t offset = entry.at("offset").get<size_t>();
    const size_t bytes = entry.at("bytes").get<size_t>();
    if (offset + bytes > payload.size()) throw IntegrityError("container: truncated entry '" + name + "'");

    const uint32_t header_len = get_u32le(payload, offset);
    const size_t data_pos = offset + 4 + header_len;
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(payload.substr(offset + 4, header_len));
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityError("container: bad header for '" + name + "': " + e.what());
    }
    if (header.at("name") != name || header.at("shape").get<std::vector<int64_t>>() != shape ||
        parse_dtype(header.at("dtype").get<std::string>(), path) != dtype)
      throw IntegrityError("container: index disagrees with entry header for '" + name + "'");

    int64_t numel = 1;
    for (int64_t s : shape) numel *= s;
    const size_t width = dtype == Dtype::f32 ? 4 : 8;
    if (data_pos + static_cast<size_t>(numel) * width != offset + bytes)
      throw IntegrityError("container: size mismatch for '" + name + "'");

    std::vector<double> values(static_cast<size_t>(numel));
    for (int64_t i = 0; i < numel; ++i)
      values[static_cast<size_t>(i)] = dtype == Dtype::f32
                                           ? static_cast<double>(get_f32le(payload, data_pos + i * width))
                                           : get_f64le(payload, data_pos + i * width);
    c.order.push_back(name);
    c.tensors.emplace(name, Tensor::from_data(shape, std::move(values), dtype));
  }
  return c;
}

}  // namespace arra::num
