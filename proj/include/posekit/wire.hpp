#ifndef POSEKIT_WIRE_HPP
#define POSEKIT_WIRE_HPP

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "posekit/error.hpp"

// Little-endian primitives for the binary checkpoint formats.

namespace posekit::wire {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("truncated " + what);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline void put_f32(std::ostream& os, double v) {
  const float f = float(v);
  uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(os, u);
}

inline double get_f32(std::istream& is, const std::string& what) {
  const uint32_t u = get_u32(is, what);
  float f;
  std::memcpy(&f, &u, 4);
  return double(f);
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& path) {
  char got[4];
  is.read(got, 4);
  if (!is || std::memcmp(got, magic, 4) != 0) throw FormatError(path + ": bad magic");
}

}  // namespace posekit::wire

#endif
