#include "gmoe/data/container.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "gmoe/error.hpp"

namespace gmoe {

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

namespace {

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f64") return 8;
  if (dtype == "f32") return 4;
  if (dtype == "i32") return 4;
  throw IoError("container: unknown dtype '" + dtype + "'");
}

void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

}  // namespace

std::vector<double> ContainerArray::as_f64() const {
  if (dtype != "f64") throw IoError("container array is not f64");
  std::vector<double> out(elems());
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

std::vector<float> ContainerArray::as_f32() const {
  if (dtype != "f32") throw IoError("container array is not f32");
  std::vector<float> out(elems());
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

std::vector<std::int32_t> ContainerArray::as_i32() const {
  if (dtype != "i32") throw IoError("container array is not i32");
  std::vector<std::int32_t> out(elems());
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

ContainerWriter::ContainerWriter(std::string magic8) : magic_(std::move(magic8)) {
  if (magic_.size() != 8) throw IoError("container magic must be 8 bytes");
  meta_ = nlohmann::json::object();
}

void ContainerWriter::add_raw(const std::string& name, const std::string& dtype,
                              std::vector<std::size_t> shape, const void* data,
                              std::size_t elem_size) {
  ContainerArray arr;
  arr.dtype = dtype;
  arr.shape = std::move(shape);
  arr.bytes.resize(arr.elems() * elem_size);
  std::memcpy(arr.bytes.data(), data, arr.bytes.size());
  arrays_.emplace_back(name, std::move(arr));
}

void ContainerWriter::add_f64(const std::string& name,
                              std::vector<std::size_t> shape,
                              const double* data) {
  add_raw(name, "f64", std::move(shape), data, 8);
}

void ContainerWriter::add_f32(const std::string& name,
                              std::vector<std::size_t> shape,
                              const float* data) {
  add_raw(name, "f32", std::move(shape), data, 4);
}

void ContainerWriter::add_i32(const std::string& name,
                              std::vector<std::size_t> shape,
                              const std::int32_t* data) {
  add_raw(name, "i32", std::move(shape), data, 4);
}

void ContainerWriter::write(const std::filesystem::path& path) const {
  // Directory offsets depend on the header length; the header contains the
  // offsets. Fix by computing the header with zero offsets first, then
  // patching with the real data start (the header length must not change, so
  // offsets are written as fixed-width strings... simpler: two passes where
  // the second pass reuses the first pass's length).
  nlohmann::json header;
  header["meta"] = meta_;
  auto directory = nlohmann::json::array();
  std::size_t rel = 0;
  for (const auto& [name, arr] : arrays_) {
    directory.push_back({{"name", name},
                         {"dtype", arr.dtype},
                         {"shape", arr.shape},
                         {"offset", rel}});
    rel += arr.bytes.size();
  }
  header["arrays"] = directory;

  // Offsets are relative in the json; the absolute data start follows from
  // the header length, so rewrite them as absolute now that it is known.
  std::string hs = header.dump();
  std::size_t data_start = 8 + 4 + hs.size();
  for (auto& e : header["arrays"])
    e["offset"] = e["offset"].get<std::size_t>() + data_start;
  std::string hs2 = header.dump();
  // Absolute offsets can be longer than relative ones; recompute until the
  // length stabilizes (at most a few iterations).
  while (hs2.size() != hs.size()) {
    hs = hs2;
    data_start = 8 + 4 + hs.size();
    std::size_t r = 0;
    for (auto& e : header["arrays"]) {
      e["offset"] = r + data_start;
      r += dtype_size(e["dtype"].get<std::string>()) *
           [&] {
             std::size_t n = 1;
             for (auto d : e["shape"]) n *= d.get<std::size_t>();
             return n;
           }();
    }
    hs2 = header.dump();
  }

  std::string blob;
  blob.reserve(data_start + rel + 4);
  blob += magic_;
  put_u32le(blob, static_cast<std::uint32_t>(hs2.size()));
  blob += hs2;
  for (const auto& [name, arr] : arrays_)
    blob.append(reinterpret_cast<const char*>(arr.bytes.data()),
                arr.bytes.size());
  put_u32le(blob, crc32(blob.data(), blob.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("short write: " + path.string());
}

namespace {

std::string read_verified(const std::filesystem::path& path,
                          const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (blob.size() < 16) throw IoError("truncated container: " + path.string());
  if (blob.compare(0, 8, expected_magic) != 0)
    throw IoError("bad magic in " + path.string() + ": expected '" +
                  expected_magic + "'");
  const std::uint32_t stored = get_u32le(
      reinterpret_cast<const unsigned char*>(blob.data() + blob.size() - 4));
  const std::uint32_t computed = crc32(blob.data(), blob.size() - 4);
  if (stored != computed)
    throw IoError("checksum mismatch in " + path.string());
  return blob;
}

}  // namespace

nlohmann::json Container::read_meta(const std::filesystem::path& path,
                                    const std::string& expected_magic) {
  const std::string blob = read_verified(path, expected_magic);
  const std::uint32_t hlen =
      get_u32le(reinterpret_cast<const unsigned char*>(blob.data() + 8));
  if (12 + hlen + 4 > blob.size())
    throw IoError("truncated header in " + path.string());
  return nlohmann::json::parse(blob.substr(12, hlen)).at("meta");
}

Container Container::read(const std::filesystem::path& path,
                          const std::string& expected_magic) {
  const std::string blob = read_verified(path, expected_magic);
  const std::uint32_t hlen =
      get_u32le(reinterpret_cast<const unsigned char*>(blob.data() + 8));
  if (12 + hlen + 4 > blob.size())
    throw IoError("truncated header in " + path.string());
  const nlohmann::json header = nlohmann::json::parse(blob.substr(12, hlen));

  Container c;
  c.meta = header.at("meta");
  for (const auto& e : header.at("arrays")) {
    ContainerArray arr;
    arr.dtype = e.at("dtype").get<std::string>();
    arr.shape = e.at("shape").get<std::vector<std::size_t>>();
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t nbytes = arr.elems() * dtype_size(arr.dtype);
    if (off + nbytes + 4 > blob.size())
      throw IoError("array '" + e.at("name").get<std::string>() +
                    "' truncated in " + path.string());
    arr.bytes.resize(nbytes);
    std::memcpy(arr.bytes.data(), blob.data() + off, nbytes);
    c.arrays.emplace(e.at("name").get<std::string>(), std::move(arr));
  }
  return c;
}

const ContainerArray& Container::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw IoError("container has no array '" + name + "'");
  return it->second;
}

}  // namespace gmoe
