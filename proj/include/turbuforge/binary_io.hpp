#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace turbuforge::bin {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("binary read: unexpected end of file");
  return v;
}

inline void put_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  char buf[4] = {};
  is.read(buf, 4);
  if (!is || std::string_view(buf, 4) != magic) {
    throw std::runtime_error("binary read: missing '" + std::string(magic) + "' header");
  }
}

template <typename Range>
void put_f32(std::ostream& os, const Range& values) {
  for (double v : values) put<float>(os, static_cast<float>(v));
}

inline std::vector<double> get_f32(std::istream& is, std::size_t count) {
  std::vector<float> tmp(count);
  is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!is) throw std::runtime_error("binary read: truncated float block");
  return {tmp.begin(), tmp.end()};
}

}  // namespace turbuforge::bin
