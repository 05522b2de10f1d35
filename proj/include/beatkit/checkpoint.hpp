#pragma once

// Parameter checkpoint file ("BTCK"):
//   magic "BTCK" | version u32 | count u64 |
//   per array: name length u32 | UTF-8 name | rank u32 | dims u64[rank] | f64 payload
// All integers and floats little-endian.

#include <string>
#include <utility>
#include <vector>

#include "beatkit/binary_io.hpp"
#include "beatkit/tensor.hpp"

namespace beatkit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline std::string encode_checkpoint(const std::vector<NamedArray>& arrays) {
  io::ByteWriter w;
  w.bytes("BTCK");
  w.u32(kCheckpointVersion);
  w.u64(arrays.size());
  for (const NamedArray& a : arrays) {
    if (numel(a.shape) != a.values.size()) throw ShapeError("checkpoint array '" + a.name + "' has inconsistent shape");
    w.u32(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name);
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (std::size_t d : a.shape) w.u64(d);
    for (double v : a.values) w.f64(v);
  }
  return w.data();
}

inline std::vector<NamedArray> decode_checkpoint(io::ByteReader r) {
  r.expect_magic("BTCK");
  if (const auto version = r.u32(); version != kCheckpointVersion)
    throw DataError(r.origin() + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t count = r.u64();
  std::vector<NamedArray> arrays;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(r.u64());
    const std::size_t n = numel(a.shape);
    if (n * 8 > r.remaining()) throw DataError(r.origin() + ": truncated array '" + a.name + "'");
    a.values.resize(n);
    for (double& v : a.values) v = r.f64();
    arrays.push_back(std::move(a));
  }
  if (!r.at_end()) throw DataError(r.origin() + ": trailing bytes after checkpoint");
  return arrays;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  io::ByteWriter w;
  w.bytes(encode_checkpoint(arrays));
  w.save(path);
}

inline std::vector<NamedArray> load_checkpoint(const std::string& path) {
  return decode_checkpoint(io::ByteReader::from_file(path));
}

inline NamedArray to_named_array(std::string name, const Tensor& t) {
  return {std::move(name), t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

}  // namespace beatkit
