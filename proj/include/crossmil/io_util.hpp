#pragma once

#include "crossmil/core.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace crossmil {

// Raw little-endian array I/O for arithmetic element types.
template <typename T>
void write_le_array(const std::filesystem::path& path, std::span<const T> values) {
  static_assert(std::is_arithmetic_v<T>);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    std::vector<char> buf(values.size_bytes());
    std::memcpy(buf.data(), values.data(), buf.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      char* p = buf.data() + i * sizeof(T);
      std::reverse(p, p + sizeof(T));
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw DataError("I/O failure writing " + path.string());
}

template <typename T>
void read_le_array(const std::filesystem::path& path, std::span<T> values) {
  static_assert(std::is_arithmetic_v<T>);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != values.size_bytes())
    throw DataError(path.string() + ": expected " + std::to_string(values.size_bytes()) +
                    " bytes, found " + std::to_string(size));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(size));
  if (!in) throw DataError("I/O failure reading " + path.string());
  if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
    for (auto& v : values) {
      auto* p = reinterpret_cast<char*>(&v);
      std::reverse(p, p + sizeof(T));
    }
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace crossmil
