#pragma once

// Little-endian primitives shared by the EVT1, FLO1 and CKPT1 codecs.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace evflow::detail {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>(v >> 24)};
  os.write(b, 4);
}

inline void put_i16(std::ostream& os, std::int16_t v) { put_u16(os, static_cast<std::uint16_t>(v)); }

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline void read_exact(std::istream& is, unsigned char* dst, std::size_t n, const char* what) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw FormatError(std::string("truncated input while reading ") + what);
}

inline std::uint8_t get_u8(std::istream& is, const char* what) {
  unsigned char b;
  read_exact(is, &b, 1, what);
  return b;
}

inline std::uint16_t get_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  read_exact(is, b, 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, b, 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::int16_t get_i16(std::istream& is, const char* what) {
  return static_cast<std::int16_t>(get_u16(is, what));
}

inline float get_f32(std::istream& is, const char* what) {
  const std::uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void expect_magic(std::istream& is, const char* magic, std::size_t len) {
  char buf[8] = {};
  is.read(buf, static_cast<std::streamsize>(len));
  if (static_cast<std::size_t>(is.gcount()) != len || std::memcmp(buf, magic, len) != 0)
    throw FormatError(std::string("bad magic, expected ") + std::string(magic, len));
}

}  // namespace evflow::detail
