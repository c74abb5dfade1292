#pragma once

// Little-endian primitives for the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace lnerf::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, non_finite, malformed };

  FormatError(Kind kind, std::uint64_t offset, const std::string& what)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), kind_(kind), offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::uint64_t offset_;
};

template <class T>
void write_le(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

/// Reads one value; throws truncated with the current offset on short read.
template <class T>
T read_le(std::istream& is, const char* what) {
  const auto offset = static_cast<std::uint64_t>(is.tellg());
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError(FormatError::Kind::truncated, offset, std::string("truncated payload reading ") + what);
  }
  return value;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4] = {};
  is.read(got, 4);
  if (is.gcount() != 4) throw FormatError(FormatError::Kind::truncated, 0, "file shorter than magic");
  if (std::memcmp(got, magic, 4) != 0) {
    throw FormatError(FormatError::Kind::bad_magic, 0,
                      std::string("bad magic '") + std::string(got, 4) + "', expected '" + magic + "'");
  }
}

}  // namespace lnerf::io
