#pragma once

// Writes minimal single-file NIfTI-1 images for reader tests.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

namespace fixture {

struct NiftiSpec {
  std::int16_t dims[4] = {3, 4, 4, 4};  // dim[0..3]
  std::int16_t datatype = 16;
  float vox_offset = 352;
  float slope = 0;
  float inter = 0;
  const char* magic = "n+1";
  bool big_endian = false;
};

template <typename T>
void put(std::vector<unsigned char>& buf, std::size_t at, T v, bool big) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if (big)
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  if (buf.size() < at + sizeof(T)) buf.resize(at + sizeof(T));
  std::memcpy(buf.data() + at, b, sizeof(T));
}

// `payload` is in file order (x fastest), already encoded as `T`.
template <typename T>
void write_nifti(const std::filesystem::path& path, const NiftiSpec& s, const std::vector<T>& payload,
                 std::size_t drop_tail = 0) {
  std::vector<unsigned char> buf(348, 0);
  put<std::int32_t>(buf, 0, 348, s.big_endian);
  for (int i = 0; i < 4; ++i) put<std::int16_t>(buf, 40 + 2 * i, s.dims[i], s.big_endian);
  for (int i = 4; i < 8; ++i) put<std::int16_t>(buf, 40 + 2 * i, 1, s.big_endian);
  put<std::int16_t>(buf, 70, s.datatype, s.big_endian);
  put<std::int16_t>(buf, 72, std::int16_t(8 * sizeof(T)), s.big_endian);
  put<float>(buf, 108, s.vox_offset, s.big_endian);
  put<float>(buf, 112, s.slope, s.big_endian);
  put<float>(buf, 116, s.inter, s.big_endian);
  std::memcpy(buf.data() + 344, s.magic, 4);
  buf.resize(std::size_t(s.vox_offset), 0);
  for (const T& v : payload) put<T>(buf, buf.size(), v, s.big_endian);
  buf.resize(buf.size() - drop_tail);
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(buf.data()),
                                              std::streamsize(buf.size()));
}

}  // namespace fixture
