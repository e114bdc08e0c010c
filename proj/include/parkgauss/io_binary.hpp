#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "parkgauss/common.hpp"

namespace parkgauss {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts are unsupported");

class BinaryWriter {
public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot open file for writing: " + path);
  }

  void magic(const char tag[4]) { out_.write(tag, 4); }
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }

  void f32_array(const double* v, size_t n) {
    buf32_.resize(n);
    for (size_t i = 0; i < n; ++i) buf32_[i] = static_cast<float>(v[i]);
    raw(buf32_.data(), n * 4);
  }
  void f64_array(const double* v, size_t n) { raw(v, n * 8); }

  void close() {
    out_.close();
    if (!out_) throw DataError("write failed: " + path_);
  }

private:
  void raw(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw DataError("write failed: " + path_);
  }

  std::string path_;
  std::ofstream out_;
  std::vector<float> buf32_;
};

class BinaryReader {
public:
  explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw DataError("cannot open file: " + path);
  }

  void expect_magic(const char tag[4], const std::string& what) {
    char got[4] = {};
    raw(got, 4);
    if (std::memcmp(got, tag, 4) != 0)
      throw DataError("bad magic in " + what + " file: " + path_);
  }

  uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
  uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
  uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
  float f32() { float v; raw(&v, 4); return v; }
  double f64() { double v; raw(&v, 8); return v; }

  void f32_array(double* v, size_t n) {
    buf32_.resize(n);
    raw(buf32_.data(), n * 4);
    for (size_t i = 0; i < n; ++i) v[i] = static_cast<double>(buf32_[i]);
  }
  void f64_array(double* v, size_t n) { raw(v, n * 8); }

  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

private:
  void raw(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw DataError("truncated file: " + path_);
  }

  std::string path_;
  std::ifstream in_;
  std::vector<float> buf32_;
};

}  // namespace parkgauss
