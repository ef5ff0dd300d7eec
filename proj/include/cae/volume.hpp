#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cae/tensor.hpp"

namespace cae {

enum class Axis { x = 0, y = 1, z = 2 };

char axis_name(Axis a);
Axis parse_axis(char c);

// Which variant of a subject a volume is. At most one rotation and one
// translation, applied rotation first.
struct AugmentTag {
  std::optional<Axis> rotation_axis;
  double degrees = 0;
  std::optional<Axis> shift_axis;
  int shift = 0;

  bool original() const { return !rotation_axis && !shift_axis; }
  // "orig", "rx-10", "tz+5", "ry+5_tx-5".
  std::string str() const;
  static AugmentTag parse(const std::string& s);

  friend bool operator==(const AugmentTag&, const AugmentTag&) = default;
};

struct Volume {
  Tensor<float> data;  // (X x Y x Z), intensities in [0, 255]
  std::string source_id;
  std::optional<int> label;
  AugmentTag tag;

  const Shape& shape() const { return data.shape(); }
};

// Uncompressed single-file NIfTI-1 (.nii). Datatypes uint8, int16 and
// float32, either byte order. Intensities are scaled by scl_slope/scl_inter
// when the slope is nonzero, then clamped to [0, 255].
Volume load_nifti(const std::filesystem::path& path);

// RVOL: "RVOL1\0", three u32 LE extents, u8 dtype (1 = f32), f32 LE payload in
// row-major (X, Y, Z) order.
Volume read_rvol(const std::filesystem::path& path);
void write_rvol(const Volume& v, const std::filesystem::path& path);

// By extension: .nii -> NIfTI, anything else -> RVOL.
Volume load_volume(const std::filesystem::path& path);

Volume crop_center(const Volume& v, std::size_t target);
// Trilinear resampling about the volume center ((n - 1) / 2 per axis), zero
// outside. Positive angles turn the first remaining axis toward the second
// (y->z for X, z->x for Y, x->y for Z).
Volume rotate(const Volume& v, Axis axis, double degrees);
Volume translate(const Volume& v, Axis axis, int voxels);
Volume downsample2x(const Volume& v);

struct AugmentConfig {
  std::vector<double> angles{-10, -5, 5, 10};
  std::vector<int> offsets{-5, 5};

  // (1 + 3a)(1 + 3t) variants per volume.
  std::size_t variants() const;
};

// Tags in generation order; the first is always the original.
std::vector<AugmentTag> augment_tags(const AugmentConfig& cfg);
Volume apply_tag(const Volume& v, const AugmentTag& tag);
std::vector<Volume> augment(const Volume& v, const AugmentConfig& cfg = {});

enum class PhantomClass { a = 0, b = 1 };

// Smooth brain-like volume: bright ellipsoid shell around textured tissue with
// a dark central cavity. Class b has the larger cavity.
Volume gen_phantom(std::uint64_t seed, PhantomClass cls, std::size_t size);

struct ManifestRow {
  std::string path;  // may carry "#<tag>" for an on-the-fly augmented variant
  std::optional<int> label;
  std::string group;
  std::string split;

  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

// CSV with header path,label,group,split.
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestRow>& rows, const std::filesystem::path& path);

// Rows for every augmented variant: path#tag, label/group/split kept.
std::vector<ManifestRow> expand_manifest(const std::vector<ManifestRow>& rows,
                                         const AugmentConfig& cfg);
// Row count after expansion, without building the rows.
std::size_t expanded_count(std::size_t rows, const AugmentConfig& cfg);

// Loads a manifest entry, applying the "#tag" suffix if present. Relative
// paths resolve against `base`.
Volume load_entry(const ManifestRow& row, const std::filesystem::path& base);

}  // namespace cae
