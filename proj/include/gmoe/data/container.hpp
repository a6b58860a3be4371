#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

// Binary array container shared by dataset (GMDS0001) and checkpoint
// (GMCK0001) files:
//
//   magic[8] | u32le header_len | header json | raw little-endian arrays
//   | u32le crc32 of everything before it
//
// The header carries free-form metadata plus an array directory of
// name/dtype/shape/byte-offset (absolute file offsets).

namespace gmoe {

std::uint32_t crc32(const void* data, std::size_t len,
                    std::uint32_t seed = 0);

struct ContainerArray {
  std::string dtype;  // "f64" | "f32" | "i32"
  std::vector<std::size_t> shape;
  std::vector<std::byte> bytes;

  std::size_t elems() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  std::vector<double> as_f64() const;
  std::vector<float> as_f32() const;
  std::vector<std::int32_t> as_i32() const;
};

class ContainerWriter {
 public:
  explicit ContainerWriter(std::string magic8);

  nlohmann::json& meta() { return meta_; }

  void add_f64(const std::string& name, std::vector<std::size_t> shape,
               const double* data);
  void add_f32(const std::string& name, std::vector<std::size_t> shape,
               const float* data);
  void add_i32(const std::string& name, std::vector<std::size_t> shape,
               const std::int32_t* data);

  void write(const std::filesystem::path& path) const;

 private:
  void add_raw(const std::string& name, const std::string& dtype,
               std::vector<std::size_t> shape, const void* data,
               std::size_t elem_size);

  std::string magic_;
  nlohmann::json meta_;
  std::vector<std::pair<std::string, ContainerArray>> arrays_;
};

struct Container {
  nlohmann::json meta;
  std::map<std::string, ContainerArray> arrays;

  const ContainerArray& at(const std::string& name) const;
  bool has(const std::string& name) const { return arrays.count(name) > 0; }

  static Container read(const std::filesystem::path& path,
                        const std::string& expected_magic);
  // Reads just the header json (still checksum-verified).
  static nlohmann::json read_meta(const std::filesystem::path& path,
                                  const std::string& expected_magic);
};

inline constexpr const char* kDatasetMagic = "GMDS0001";
inline constexpr const char* kCheckpointMagic = "GMCK0001";

}  // namespace gmoe
