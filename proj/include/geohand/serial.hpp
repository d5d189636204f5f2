#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian binary IO helpers shared by the dataset and checkpoint formats.

namespace geohand::serial {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("serial: write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n))
    throw std::runtime_error("serial: unexpected end of stream");
}

inline void write_u8(std::ostream& os, uint8_t v) { write_bytes(os, &v, 1); }

inline uint8_t read_u8(std::istream& is) {
  uint8_t v = 0;
  read_bytes(is, &v, 1);
  return v;
}

inline void write_u32(std::ostream& os, uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  write_bytes(os, b, 4);
}

inline uint32_t read_u32(std::istream& is) {
  uint8_t b[4];
  read_bytes(is, b, 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void write_u64(std::ostream& os, uint64_t v) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  write_bytes(os, b, 8);
}

inline uint64_t read_u64(std::istream& is) {
  uint8_t b[8];
  read_bytes(is, b, 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

inline float read_f32(std::istream& is) {
  uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

inline void write_f64(std::ostream& os, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  write_u64(os, u);
}

inline double read_f64(std::istream& is) {
  uint64_t u = read_u64(is);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  if (!s.empty()) write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
  uint32_t n = read_u32(is);
  std::string s(n, '\0');
  if (n) read_bytes(is, s.data(), n);
  return s;
}

inline void write_f64_array(std::ostream& os, const std::vector<double>& v) {
  for (double x : v) write_f64(os, x);
}

inline void read_f64_array(std::istream& is, std::vector<double>& v, size_t n) {
  v.resize(n);
  for (size_t i = 0; i < n; ++i) v[i] = read_f64(is);
}

}  // namespace geohand::serial
