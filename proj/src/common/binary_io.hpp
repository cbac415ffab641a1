#pragma once

// Little-endian byte packing and atomic file replacement shared by the
// dataset and checkpoint writers.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

namespace combo::detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

/// Writes to `path`.tmp then renames over `path`.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace combo::detail
