#pragma once

// Little-endian encoding helpers and whole-file I/O shared by the file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cae/error.hpp"

namespace cae::bytes {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::io, "read error on " + path.string());
  return buf;
}

// Writes via a sibling temporary and renames, so readers never see a partial file.
inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& buf) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    if (!out) fail(ErrorKind::io, "write error on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::io, "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

template <typename T>
T byteswap(T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  std::memcpy(&v, b, sizeof(T));
  return v;
}

// Reads a T stored in the given byte order at p.
template <typename T>
T load(const unsigned char* p, bool little = true) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (little != (std::endian::native == std::endian::little)) v = byteswap(v);
  return v;
}

template <typename T>
void append_le(std::vector<unsigned char>& out, T v) {
  if constexpr (std::endian::native != std::endian::little) v = byteswap(v);
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const unsigned char* p, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace cae::bytes
