#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

namespace gmoe {

// Hex SHA-1 of a buffer.
std::string sha1_hex(const void* data, std::size_t len);
std::string sha1_hex(const std::string& s);

// Git-style blob hash of a file: sha1("blob <len>\0" + contents).
std::string git_blob_hash(const std::filesystem::path& file);

}  // namespace gmoe
