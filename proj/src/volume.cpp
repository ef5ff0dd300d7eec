#include "cae/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "byte_io.hpp"
#include "cae/random.hpp"

namespace cae {

char axis_name(Axis a) { return "xyz"[int(a)]; }

Axis parse_axis(char c) {
  switch (c) {
    case 'x': case 'X': return Axis::x;
    case 'y': case 'Y': return Axis::y;
    case 'z': case 'Z': return Axis::z;
  }
  fail(ErrorKind::invalid_argument, std::string("axis must be x, y or z, got '") + c + "'");
}

namespace {

std::string signed_number(double v) {
  std::ostringstream s;
  s << (v < 0 ? '-' : '+') << std::abs(v);
  return s.str();
}

float clamp255(double v) {
  if (!(v > 0)) return 0.0f;  // also maps NaN to 0
  return v >= 255.0 ? 255.0f : float(v);
}

Volume with_data(const Volume& like, Tensor<float> data) {
  Volume out{std::move(data), like.source_id, like.label, like.tag};
  return out;
}

void check_3d(const Volume& v, const char* what) {
  if (v.data.rank() != 3)
    fail(ErrorKind::bad_dimensions, std::string(what) + ": volume must be 3D, got " +
                                        shape_string(v.data.shape()));
}

}  // namespace

std::string AugmentTag::str() const {
  if (original()) return "orig";
  std::string s;
  if (rotation_axis) s += std::string("r") + axis_name(*rotation_axis) + signed_number(degrees);
  if (shift_axis) {
    if (!s.empty()) s += '_';
    s += std::string("t") + axis_name(*shift_axis) + signed_number(shift);
  }
  return s;
}

AugmentTag AugmentTag::parse(const std::string& s) {
  AugmentTag tag;
  if (s == "orig" || s.empty()) return tag;
  std::stringstream in(s);
  std::string part;
  auto bad = [&] { fail(ErrorKind::invalid_argument, "malformed augmentation tag '" + s + "'"); };
  while (std::getline(in, part, '_')) {
    if (part.size() < 4 || (part[2] != '+' && part[2] != '-')) bad();
    const Axis axis = parse_axis(part[1]);
    std::size_t used = 0;
    double value = 0;
    try {
      value = std::stod(part.substr(2), &used);
    } catch (const std::exception&) {
      bad();
    }
    if (used != part.size() - 2) bad();
    if (part[0] == 'r' && !tag.rotation_axis && !tag.shift_axis) {
      tag.rotation_axis = axis;
      tag.degrees = value;
    } else if (part[0] == 't' && !tag.shift_axis && value == std::floor(value)) {
      tag.shift_axis = axis;
      tag.shift = int(value);
    } else {
      bad();
    }
  }
  return tag;
}

// ---------------------------------------------------------------- NIfTI-1

Volume load_nifti(const std::filesystem::path& path) {
  const auto buf = bytes::read_file(path);
  const std::string name = path.string();
  if (buf.size() < 348) fail(ErrorKind::truncated, name + ": shorter than a NIfTI-1 header");
  const unsigned char* h = buf.data();

  bool little = true;
  if (bytes::load<std::int32_t>(h, true) != 348) {
    little = false;
    if (bytes::load<std::int32_t>(h, false) != 348)
      fail(ErrorKind::bad_magic, name + ": sizeof_hdr is not 348");
  }
  const std::string magic(reinterpret_cast<const char*>(h + 344), 4);
  if (magic == std::string("ni1\0", 4))
    fail(ErrorKind::unsupported_format, name + ": two-file NIfTI (.hdr/.img) is not supported");
  if (magic != std::string("n+1\0", 4)) fail(ErrorKind::bad_magic, name + ": magic is not n+1");

  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = bytes::load<std::int16_t>(h + 40 + 2 * i, little);
  if (dim[0] != 3)
    fail(ErrorKind::bad_dimensions, name + ": expected 3 dimensions, header says " +
                                        std::to_string(dim[0]));
  for (int i = 1; i <= 3; ++i)
    if (dim[i] <= 0) fail(ErrorKind::bad_dimensions, name + ": non-positive extent in dim");

  const auto datatype = bytes::load<std::int16_t>(h + 70, little);
  std::size_t width;
  switch (datatype) {
    case 2: width = 1; break;
    case 4: width = 2; break;
    case 16: width = 4; break;
    default:
      fail(ErrorKind::unsupported_datatype,
           name + ": datatype " + std::to_string(datatype) + " (supported: 2 uint8, 4 int16, 16 float32)");
  }
  const float vox_offset = bytes::load<float>(h + 108, little);
  const float slope = bytes::load<float>(h + 112, little);
  const float inter = bytes::load<float>(h + 116, little);
  if (!(vox_offset >= 348.0f)) fail(ErrorKind::bad_dimensions, name + ": vox_offset before end of header");

  const std::size_t nx = std::size_t(dim[1]), ny = std::size_t(dim[2]), nz = std::size_t(dim[3]);
  const std::size_t count = nx * ny * nz;
  const auto offset = static_cast<std::size_t>(vox_offset);
  if (buf.size() < offset + count * width)
    fail(ErrorKind::truncated, name + ": payload has " + std::to_string(buf.size() - std::min(buf.size(), offset)) +
                                   " bytes, expected " + std::to_string(count * width));

  const bool scaled = slope != 0.0f && std::isfinite(slope);
  Volume v;
  v.data = Tensor<float>({nx, ny, nz});
  v.source_id = path.stem().string();
  const unsigned char* p = buf.data() + offset;
  // File order has x fastest.
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x, p += width) {
        double raw;
        if (datatype == 2) raw = *p;
        else if (datatype == 4) raw = bytes::load<std::int16_t>(p, little);
        else raw = bytes::load<float>(p, little);
        if (scaled) raw = raw * slope + inter;
        v.data[(x * ny + y) * nz + z] = clamp255(raw);
      }
  return v;
}

// ---------------------------------------------------------------- RVOL

namespace {
constexpr unsigned char kRvolMagic[6] = {'R', 'V', 'O', 'L', '1', '\0'};
constexpr std::size_t kRvolHeader = 6 + 12 + 1;
}  // namespace

Volume read_rvol(const std::filesystem::path& path) {
  const auto buf = bytes::read_file(path);
  const std::string name = path.string();
  if (buf.size() < 6 || !std::equal(kRvolMagic, kRvolMagic + 6, buf.begin()))
    fail(ErrorKind::bad_magic, name + ": not an RVOL file");
  if (buf.size() < kRvolHeader) fail(ErrorKind::truncated, name + ": header cut short");
  Shape shape(3);
  for (int i = 0; i < 3; ++i) {
    shape[i] = bytes::load<std::uint32_t>(buf.data() + 6 + 4 * i);
    if (shape[i] == 0) fail(ErrorKind::bad_dimensions, name + ": zero extent");
  }
  if (buf[18] != 1)
    fail(ErrorKind::unsupported_datatype, name + ": dtype code " + std::to_string(buf[18]) + " (only 1 = f32)");
  const std::size_t count = element_count(shape);
  if (buf.size() != kRvolHeader + 4 * count)
    fail(buf.size() < kRvolHeader + 4 * count ? ErrorKind::truncated : ErrorKind::inconsistent,
         name + ": payload is " + std::to_string(buf.size() - kRvolHeader) + " bytes, extents need " +
             std::to_string(4 * count));
  Volume v;
  v.data = Tensor<float>(shape);
  for (std::size_t i = 0; i < count; ++i) v.data[i] = bytes::load<float>(buf.data() + kRvolHeader + 4 * i);
  v.source_id = path.stem().string();
  return v;
}

void write_rvol(const Volume& v, const std::filesystem::path& path) {
  check_3d(v, "write_rvol");
  std::vector<unsigned char> buf(kRvolMagic, kRvolMagic + 6);
  buf.reserve(kRvolHeader + 4 * v.data.size());
  for (auto e : v.data.shape()) bytes::append_le(buf, std::uint32_t(e));
  buf.push_back(1);
  for (float f : v.data.data()) bytes::append_le(buf, f);
  bytes::write_file(path, buf);
}

Volume load_volume(const std::filesystem::path& path) {
  return path.extension() == ".nii" ? load_nifti(path) : read_rvol(path);
}

// ---------------------------------------------------------------- transforms

Volume crop_center(const Volume& v, std::size_t target) {
  check_3d(v, "crop_center");
  const auto& s = v.shape();
  for (auto e : s)
    if (e < target)
      fail(ErrorKind::invalid_argument, "crop_center: extent " + std::to_string(e) +
                                            " is smaller than target " + std::to_string(target));
  const std::size_t ox = (s[0] - target) / 2, oy = (s[1] - target) / 2, oz = (s[2] - target) / 2;
  Tensor<float> out({target, target, target});
  for (std::size_t x = 0; x < target; ++x)
    for (std::size_t y = 0; y < target; ++y) {
      const float* src = v.data.raw() + ((x + ox) * s[1] + (y + oy)) * s[2] + oz;
      std::copy(src, src + target, out.raw() + (x * target + y) * target);
    }
  return with_data(v, std::move(out));
}

Volume rotate(const Volume& v, Axis axis, double degrees) {
  check_3d(v, "rotate");
  if (degrees == 0.0) return v;
  const auto& s = v.shape();
  // (a, b) is the rotated plane; c the fixed axis.
  const int a = (int(axis) + 1) % 3, b = (int(axis) + 2) % 3;
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t), sn = std::sin(t);
  const double ca = (double(s[a]) - 1) / 2, cb = (double(s[b]) - 1) / 2;
  const long n[3] = {long(s[0]), long(s[1]), long(s[2])};
  auto at = [&](long i, long j, long k) -> double {
    if (i < 0 || j < 0 || k < 0 || i >= n[0] || j >= n[1] || k >= n[2]) return 0.0;
    return v.data[(std::size_t(i) * s[1] + std::size_t(j)) * s[2] + std::size_t(k)];
  };
  Tensor<float> out(s);
  #pragma omp parallel for schedule(static)
  for (long x = 0; x < n[0]; ++x)
    for (long y = 0; y < n[1]; ++y)
      for (long z = 0; z < n[2]; ++z) {
        double p[3] = {double(x), double(y), double(z)};
        // Inverse map: sample the source at R(-t) applied to the output position.
        const double da = p[a] - ca, db = p[b] - cb;
        p[a] = ca + cs * da + sn * db;
        p[b] = cb - sn * da + cs * db;
        long i0[3];
        double f[3];
        for (int d = 0; d < 3; ++d) {
          const double fl = std::floor(p[d]);
          i0[d] = long(fl);
          f[d] = p[d] - fl;
        }
        double acc = 0;
        for (int corner = 0; corner < 8; ++corner) {
          double w = 1;
          long idx[3];
          for (int d = 0; d < 3; ++d) {
            const int up = (corner >> (2 - d)) & 1;
            w *= up ? f[d] : 1 - f[d];
            idx[d] = i0[d] + up;
          }
          if (w != 0) acc += w * at(idx[0], idx[1], idx[2]);
        }
        out[(std::size_t(x) * s[1] + std::size_t(y)) * s[2] + std::size_t(z)] = clamp255(acc);
      }
  return with_data(v, std::move(out));
}

Volume translate(const Volume& v, Axis axis, int voxels) {
  check_3d(v, "translate");
  const auto& s = v.shape();
  const int d = int(axis);
  if (std::size_t(std::abs(voxels)) >= s[d])
    fail(ErrorKind::invalid_argument, "translate: shift " + std::to_string(voxels) +
                                          " is not smaller than extent " + std::to_string(s[d]));
  if (voxels == 0) return v;
  Tensor<float> out(s);
  for (std::size_t x = 0; x < s[0]; ++x)
    for (std::size_t y = 0; y < s[1]; ++y)
      for (std::size_t z = 0; z < s[2]; ++z) {
        long src[3] = {long(x), long(y), long(z)};
        src[d] -= voxels;
        if (src[d] < 0 || src[d] >= long(s[d])) continue;
        out[(x * s[1] + y) * s[2] + z] =
            v.data[(std::size_t(src[0]) * s[1] + std::size_t(src[1])) * s[2] + std::size_t(src[2])];
      }
  return with_data(v, std::move(out));
}

Volume downsample2x(const Volume& v) {
  check_3d(v, "downsample2x");
  const auto& s = v.shape();
  for (auto e : s)
    if (e % 2) fail(ErrorKind::invalid_argument, "downsample2x: odd extent in " + shape_string(s));
  const Shape o{s[0] / 2, s[1] / 2, s[2] / 2};
  Tensor<float> out(o);
  for (std::size_t x = 0; x < o[0]; ++x)
    for (std::size_t y = 0; y < o[1]; ++y)
      for (std::size_t z = 0; z < o[2]; ++z) {
        double acc = 0;
        for (std::size_t dx = 0; dx < 2; ++dx)
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dz = 0; dz < 2; ++dz)
              acc += v.data[((2 * x + dx) * s[1] + 2 * y + dy) * s[2] + 2 * z + dz];
        out[(x * o[1] + y) * o[2] + z] = clamp255(acc / 8);
      }
  return with_data(v, std::move(out));
}

// ---------------------------------------------------------------- augmentation

std::size_t AugmentConfig::variants() const { return (1 + 3 * angles.size()) * (1 + 3 * offsets.size()); }

std::vector<AugmentTag> augment_tags(const AugmentConfig& cfg) {
  std::vector<AugmentTag> rotations{AugmentTag{}};
  for (int a = 0; a < 3; ++a)
    for (double deg : cfg.angles) {
      AugmentTag t;
      t.rotation_axis = Axis(a);
      t.degrees = deg;
      rotations.push_back(t);
    }
  std::vector<AugmentTag> out;
  for (const auto& r : rotations) {
    out.push_back(r);
    for (int a = 0; a < 3; ++a)
      for (int off : cfg.offsets) {
        AugmentTag t = r;
        t.shift_axis = Axis(a);
        t.shift = off;
        out.push_back(t);
      }
  }
  return out;
}

Volume apply_tag(const Volume& v, const AugmentTag& tag) {
  Volume out = tag.rotation_axis ? rotate(v, *tag.rotation_axis, tag.degrees) : v;
  if (tag.shift_axis) out = translate(out, *tag.shift_axis, tag.shift);
  out.tag = tag;
  return out;
}

std::vector<Volume> augment(const Volume& v, const AugmentConfig& cfg) {
  const auto tags = augment_tags(cfg);
  std::vector<Volume> out(tags.size());
  #pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < tags.size(); ++i) out[i] = apply_tag(v, tags[i]);
  return out;
}

// ---------------------------------------------------------------- phantoms

namespace {

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

// Value noise: random lattice values blended with smoothstep weights.
class ValueNoise {
 public:
  ValueNoise(Rng& rng, std::size_t cells) : n_(cells + 2), values_(n_ * n_ * n_) {
    for (auto& v : values_) v = rng.uniform(-1.0, 1.0);
  }
  // Coordinates in [0, cells].
  double operator()(double x, double y, double z) const {
    const double p[3] = {x, y, z};
    std::size_t i[3];
    double w[3];
    for (int d = 0; d < 3; ++d) {
      const double c = std::clamp(p[d], 0.0, double(n_ - 2) - 1e-9);
      i[d] = std::size_t(c);
      const double f = c - double(i[d]);
      w[d] = f * f * (3 - 2 * f);
    }
    double acc = 0;
    for (int corner = 0; corner < 8; ++corner) {
      double weight = 1;
      std::size_t idx[3];
      for (int d = 0; d < 3; ++d) {
        const int up = (corner >> (2 - d)) & 1;
        weight *= up ? w[d] : 1 - w[d];
        idx[d] = i[d] + std::size_t(up);
      }
      acc += weight * values_[(idx[0] * n_ + idx[1]) * n_ + idx[2]];
    }
    return acc;
  }

 private:
  std::size_t n_;
  std::vector<double> values_;
};

}  // namespace

Volume gen_phantom(std::uint64_t seed, PhantomClass cls, std::size_t size) {
  if (size < 16) fail(ErrorKind::invalid_argument, "gen_phantom: size must be at least 16");
  Rng rng = Rng::derive(seed, std::uint64_t(cls));
  double radius[3], center[3];
  for (int d = 0; d < 3; ++d) {
    radius[d] = rng.uniform(0.76, 0.84);
    center[d] = rng.uniform(-0.04, 0.04);
  }
  const double shell = rng.uniform(0.16, 0.2);  // cortex thickness in normalized radius
  const double cortex = rng.uniform(190, 215);
  const double tissue = rng.uniform(115, 135);
  const double cavity_value = rng.uniform(20, 35);
  const double cavity = (cls == PhantomClass::a ? 0.25 : 0.5) + rng.uniform(-0.03, 0.03);
  const double edge = 0.14;
  ValueNoise coarse(rng, 3), fine(rng, 6);

  Tensor<float> out({size, size, size});
  const double half = double(size) / 2;
  for (std::size_t x = 0; x < size; ++x)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t z = 0; z < size; ++z) {
        const double u[3] = {(double(x) + 0.5) / half - 1, (double(y) + 0.5) / half - 1,
                             (double(z) + 0.5) / half - 1};
        double r2 = 0;
        for (int d = 0; d < 3; ++d) {
          const double q = (u[d] - center[d]) / radius[d];
          r2 += q * q;
        }
        const double r = std::sqrt(r2);
        const double t[3] = {(u[0] + 1) / 2, (u[1] + 1) / 2, (u[2] + 1) / 2};
        const double texture = 18 * coarse(3 * t[0], 3 * t[1], 3 * t[2]) +
                               6 * fine(6 * t[0], 6 * t[1], 6 * t[2]);
        const double inside = 1 - smoothstep(1 - edge, 1 + edge, r);
        const double in_cortex = smoothstep(1 - shell - edge, 1 - shell + edge, r);
        const double in_cavity = 1 - smoothstep(cavity - edge, cavity + edge, r);
        double value = tissue + texture;
        value += in_cortex * (cortex - value);
        value += in_cavity * (cavity_value - value);
        out[(x * size + y) * size + z] = clamp255(inside * value);
      }
  Volume v{std::move(out), "phantom-" + std::to_string(seed) + (cls == PhantomClass::a ? "a" : "b"),
           int(cls), {}};
  return v;
}

// ---------------------------------------------------------------- manifests

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream in(line);
  std::string field;
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void check_field(const std::string& s, const char* what) {
  if (s.find_first_of(",\n\r") != std::string::npos)
    fail(ErrorKind::invalid_argument, std::string("manifest ") + what + " contains a comma or newline: " + s);
}

}  // namespace

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || (line != "path,label,group,split" && line != "path,label,group,split\r"))
    fail(ErrorKind::bad_magic, path.string() + ": manifest header must be path,label,group,split");
  std::vector<ManifestRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (f.size() != 4)
      fail(ErrorKind::inconsistent, path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    ManifestRow row{f[0], std::nullopt, f[2], f[3]};
    if (!f[1].empty()) {
      try {
        row.label = std::stoi(f[1]);
      } catch (const std::exception&) {
        fail(ErrorKind::inconsistent, path.string() + ":" + std::to_string(line_no) + ": bad label '" + f[1] + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_manifest(const std::vector<ManifestRow>& rows, const std::filesystem::path& path) {
  std::string text = "path,label,group,split\n";
  for (const auto& r : rows) {
    check_field(r.path, "path");
    check_field(r.group, "group");
    check_field(r.split, "split");
    text += r.path + ',' + (r.label ? std::to_string(*r.label) : "") + ',' + r.group + ',' + r.split + '\n';
  }
  bytes::write_file(path, std::vector<unsigned char>(text.begin(), text.end()));
}

std::size_t expanded_count(std::size_t rows, const AugmentConfig& cfg) { return rows * cfg.variants(); }

std::vector<ManifestRow> expand_manifest(const std::vector<ManifestRow>& rows, const AugmentConfig& cfg) {
  const auto tags = augment_tags(cfg);
  std::vector<ManifestRow> out;
  out.reserve(expanded_count(rows.size(), cfg));
  for (const auto& r : rows)
    for (const auto& t : tags) {
      ManifestRow e = r;
      e.path += "#" + t.str();
      out.push_back(std::move(e));
    }
  return out;
}

Volume load_entry(const ManifestRow& row, const std::filesystem::path& base) {
  std::string file = row.path;
  AugmentTag tag;
  if (auto hash = file.find('#'); hash != std::string::npos) {
    tag = AugmentTag::parse(file.substr(hash + 1));
    file.resize(hash);
  }
  std::filesystem::path p(file);
  if (p.is_relative()) p = base / p;
  Volume v = load_volume(p);
  v.label = row.label;
  return tag.original() ? v : apply_tag(v, tag);
}

}  // namespace cae
