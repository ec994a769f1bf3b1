#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dllab/common.hpp"

namespace dllab {

// CRC-32 (IEEE 802.3 polynomial, reflected), byte-at-a-time table driven.
class Crc32 {
 public:
  void update(const void* data, size_t n) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint32_t c = state_;
    for (size_t i = 0; i < n; ++i) c = table()[(c ^ p[i]) & 0xffu] ^ (c >> 8);
    state_ = c;
  }

  uint32_t value() const { return state_ ^ 0xffffffffu; }

 private:
  static const std::array<uint32_t, 256>& table() {
    static const std::array<uint32_t, 256> t = [] {
      std::array<uint32_t, 256> out{};
      for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int j = 0; j < 8; ++j) c = (c & 1u) ? 0xedb88320u ^ (c >> 1) : (c >> 1);
        out[i] = c;
      }
      return out;
    }();
    return t;
  }

  uint32_t state_ = 0xffffffffu;
};

// Little-endian append-only byte buffer.
class ByteWriter {
 public:
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { le(v); }
  void u64(uint64_t v) { le(v); }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    le(bits);
  }
  void f64_array(const double* p, size_t n) {
    for (size_t i = 0; i < n; ++i) f64(p[i]);
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }

  std::vector<uint8_t> bytes;

 private:
  template <class T>
  void le(T v) {
    for (size_t i = 0; i < sizeof(T); ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
};

class ByteReader {
 public:
  ByteReader(const uint8_t* p, size_t n, std::string origin)
      : p_(p), n_(n), origin_(std::move(origin)) {}

  uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  uint32_t u32() { return le<uint32_t>(); }
  uint64_t u64() { return le<uint64_t>(); }
  double f64() {
    uint64_t bits = le<uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  void f64_array(double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = f64();
  }
  size_t pos() const { return pos_; }
  size_t remaining() const { return n_ - pos_; }

  void need(size_t n) {
    if (pos_ + n > n_) throw FormatError("truncated file: " + origin_);
  }

 private:
  template <class T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  const uint8_t* p_;
  size_t n_;
  size_t pos_ = 0;
  std::string origin_;
};

inline void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
}

inline std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw Error("cannot open: " + path.string());
  auto n = static_cast<size_t>(f.tellg());
  f.seekg(0);
  std::vector<uint8_t> bytes(n);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (!f) throw Error("read failed: " + path.string());
  return bytes;
}

// Framed binary files share one convention: a 4-byte magic, a payload, and a
// trailing CRC-32 over every byte between magic and checksum.
inline void write_framed(const std::filesystem::path& path, const char magic[4],
                         const ByteWriter& payload) {
  ByteWriter out;
  out.raw(magic, 4);
  out.raw(payload.bytes.data(), payload.bytes.size());
  Crc32 crc;
  crc.update(payload.bytes.data(), payload.bytes.size());
  out.u32(crc.value());
  write_file(path, out.bytes);
}

inline std::vector<uint8_t> read_framed(const std::filesystem::path& path, const char magic[4]) {
  std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), magic, 4) != 0) {
    throw FormatError("bad magic in " + path.string());
  }
  size_t payload_len = bytes.size() - 8;
  Crc32 crc;
  crc.update(bytes.data() + 4, payload_len);
  uint32_t stored = 0;
  for (size_t i = 0; i < 4; ++i) stored |= static_cast<uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (crc.value() != stored) throw FormatError("checksum mismatch in " + path.string());
  return std::vector<uint8_t>(bytes.begin() + 4, bytes.end() - 4);
}

}  // namespace dllab
