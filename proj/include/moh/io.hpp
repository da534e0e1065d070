#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moh/numcore/tensor.hpp"

namespace moh::io {

/// Named-array container:
///   8-byte magic "MOHARR01", u64 little-endian header length, JSON header,
///   then raw little-endian array data at the offsets listed in the header.
/// Header: {"format_version": V, "meta": {...}, "arrays": [{"name", "dtype",
/// "shape", "offset", "nbytes"}, ...]}; offsets are relative to the data start.
struct Array {
  std::string dtype;  // "f32", "f64" or "u64"
  nc::Shape shape;
  std::vector<std::uint8_t> bytes;

  static Array f32(const nc::Shape& shape, const std::vector<float>& v);
  static Array f64(const nc::Shape& shape, const std::vector<double>& v);
  static Array u64(const nc::Shape& shape, const std::vector<std::uint64_t>& v);

  std::vector<float> as_f32() const;
  std::vector<double> as_f64() const;
  std::vector<std::uint64_t> as_u64() const;
  /// Reads f32 or f64 data as double.
  nc::Tensor<double> tensor() const;
};

struct ArrayFile {
  int format_version = 1;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Array> arrays;

  const Array& at(const std::string& name) const;
};

void save(const std::filesystem::path& path, const ArrayFile& file);
/// Throws RuntimeFailure on I/O or format problems, ConfigError if the
/// version differs from `expected_version` (when non-negative).
ArrayFile load(const std::filesystem::path& path, int expected_version = -1);

}  // namespace moh::io
