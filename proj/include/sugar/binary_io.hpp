#pragma once

// Little-endian readers/writers shared by every binary format in the
// project. Reads report the byte offset of the failure.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "sugar/errors.hpp"

namespace sugar::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void magic(const char (&tag)[5]) { bytes(tag, 4); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void i32(std::int32_t v) { bytes(&v, sizeof v); }
  void f32(float v) { bytes(&v, sizeof v); }
  void string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint64_t offset() const { return offset_; }

  void bytes(void* data, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(std::string("truncated input while reading ") + what, offset_ + static_cast<std::uint64_t>(in_.gcount()));
    }
    offset_ += n;
  }
  void expect_magic(const char (&tag)[5]) {
    char got[4];
    const auto at = offset_;
    bytes(got, 4, "magic");
    if (std::memcmp(got, tag, 4) != 0) throw FormatError(std::string("bad magic, expected ") + tag, at);
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, sizeof v, what);
    return v;
  }
  std::int32_t i32(const char* what) {
    std::int32_t v;
    bytes(&v, sizeof v, what);
    return v;
  }
  std::string string(const char* what, std::uint32_t max_len = 1u << 24) {
    const auto at = offset_;
    const auto n = u32(what);
    if (n > max_len) throw FormatError(std::string("implausible length for ") + what, at);
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
  void floats(float* dst, std::size_t n, const char* what) { bytes(dst, n * sizeof(float), what); }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace sugar::io
