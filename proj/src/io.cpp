#include "moh/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "moh/errors.hpp"

namespace moh::io {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'H', 'A', 'R', 'R', '0', '1'};

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <typename V>
Array pack(const char* dtype, const nc::Shape& shape, const std::vector<V>& v) {
  if (nc::numel(shape) != v.size()) {
    throw nc::DimensionError(std::string("array of ") + std::to_string(v.size()) + " values for shape " +
                             nc::to_string(shape));
  }
  Array a;
  a.dtype = dtype;
  a.shape = shape;
  a.bytes.resize(v.size() * sizeof(V));
  std::memcpy(a.bytes.data(), v.data(), a.bytes.size());
  return a;
}

template <typename V>
std::vector<V> unpack(const Array& a, const char* dtype) {
  if (a.dtype != dtype) throw ConfigError("array has dtype " + a.dtype + ", expected " + dtype);
  std::vector<V> v(a.bytes.size() / sizeof(V));
  std::memcpy(v.data(), a.bytes.data(), v.size() * sizeof(V));
  return v;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64" || dtype == "u64") return 8;
  throw RuntimeFailure("unknown dtype '" + dtype + "'");
}

}  // namespace

Array Array::f32(const nc::Shape& shape, const std::vector<float>& v) { return pack("f32", shape, v); }
Array Array::f64(const nc::Shape& shape, const std::vector<double>& v) { return pack("f64", shape, v); }
Array Array::u64(const nc::Shape& shape, const std::vector<std::uint64_t>& v) { return pack("u64", shape, v); }
std::vector<float> Array::as_f32() const { return unpack<float>(*this, "f32"); }
std::vector<double> Array::as_f64() const { return unpack<double>(*this, "f64"); }
std::vector<std::uint64_t> Array::as_u64() const { return unpack<std::uint64_t>(*this, "u64"); }

nc::Tensor<double> Array::tensor() const {
  nc::Tensor<double> t(shape);
  if (dtype == "f64") {
    const auto v = as_f64();
    t.data.assign(v.begin(), v.end());
  } else {
    const auto v = as_f32();
    for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = v[i];
  }
  return t;
}

const Array& ArrayFile::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw ConfigError("missing array '" + name + "'");
  return it->second;
}

void save(const std::filesystem::path& path, const ArrayFile& file) {
  nlohmann::json header;
  header["format_version"] = file.format_version;
  header["meta"] = file.meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, a] : file.arrays) {
    header["arrays"].push_back(
        {{"name", name}, {"dtype", a.dtype}, {"shape", a.shape}, {"offset", offset}, {"nbytes", a.bytes.size()}});
    offset += a.bytes.size();
  }
  const std::string h = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  const std::uint64_t len = h.size();
  os.write(kMagic, sizeof(kMagic));
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, a] : file.arrays)
    os.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
  if (!os) throw RuntimeFailure("short write to " + path.string());
}

ArrayFile load(const std::filesystem::path& path, int expected_version) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("cannot open " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  is.read(magic, sizeof(magic));
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw RuntimeFailure(path.string() + " is not an array container");
  }
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  if (!is) throw RuntimeFailure("truncated header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure("bad header in " + path.string() + ": " + e.what());
  }
  ArrayFile f;
  if (!header.contains("format_version")) throw RuntimeFailure(path.string() + " has no format version");
  f.format_version = header["format_version"].get<int>();
  if (expected_version >= 0 && f.format_version != expected_version) {
    throw ConfigError(path.string() + " has format version " + std::to_string(f.format_version) + ", expected " +
                      std::to_string(expected_version));
  }
  f.meta = header.value("meta", nlohmann::json::object());
  const std::streamoff data_start = is.tellg();
  for (const auto& e : header["arrays"]) {
    Array a;
    a.dtype = e["dtype"].get<std::string>();
    a.shape = e["shape"].get<nc::Shape>();
    const auto nbytes = e["nbytes"].get<std::uint64_t>();
    if (nbytes != nc::numel(a.shape) * dtype_size(a.dtype)) {
      throw RuntimeFailure("array '" + e["name"].get<std::string>() + "' size does not match its shape");
    }
    a.bytes.resize(nbytes);
    is.seekg(data_start + static_cast<std::streamoff>(e["offset"].get<std::uint64_t>()));
    is.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (!is) throw RuntimeFailure("truncated data in " + path.string());
    f.arrays.emplace(e["name"].get<std::string>(), std::move(a));
  }
  return f;
}

}  // namespace moh::io
