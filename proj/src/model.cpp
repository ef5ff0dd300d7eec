#include "cae/model.hpp"

#include <cmath>

#include "cae/random.hpp"

namespace cae {

const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::staged1: return "staged1";
    case ModelKind::staged2: return "staged2";
    case ModelKind::joint: return "joint";
    case ModelKind::cae3d: return "3d";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "staged1") return ModelKind::staged1;
  if (name == "staged2") return ModelKind::staged2;
  if (name == "joint") return ModelKind::joint;
  if (name == "3d" || name == "cae3d") return ModelKind::cae3d;
  fail(ErrorKind::invalid_argument, "unknown model kind '" + name + "' (staged1|staged2|joint|3d)");
}

ArchitectureDescriptor ArchitectureDescriptor::defaults(ModelKind kind, std::size_t size,
                                                        std::size_t embedding) {
  ArchitectureDescriptor d;
  d.kind = kind;
  d.size = size;
  d.embedding = embedding;
  d.frame_embedding = embedding;
  d.channels = kind == ModelKind::cae3d ? std::vector<std::size_t>{8, 16, 32}
                                        : std::vector<std::size_t>{16, 32};
  if (kind == ModelKind::joint) d.frame_channels = {16, 32};
  return d;
}

namespace {

std::size_t pow2(std::size_t n) { return std::size_t(1) << n; }

void check_channels(const std::vector<std::size_t>& channels, const char* what) {
  if (channels.empty()) fail(ErrorKind::invalid_argument, std::string(what) + " must not be empty");
  for (auto c : channels)
    if (c == 0) fail(ErrorKind::invalid_argument, std::string(what) + " entries must be positive");
}

}  // namespace

void ArchitectureDescriptor::validate() const {
  if (embedding == 0) fail(ErrorKind::invalid_argument, "embedding width must be positive");
  if (kernel == 0 || kernel % 2 == 0)
    fail(ErrorKind::invalid_argument, "kernel size must be odd, got " + std::to_string(kernel));
  check_channels(channels, "channels");
  const auto& frame = kind == ModelKind::joint ? frame_channels : channels;
  switch (kind) {
    case ModelKind::staged1:
    case ModelKind::joint:
      if (kind == ModelKind::joint) check_channels(frame_channels, "frame_channels");
      if (size < pow2(frame.size()) || size % pow2(frame.size()) != 0)
        fail(ErrorKind::invalid_argument,
             "size " + std::to_string(size) + " must be a positive multiple of " +
                 std::to_string(pow2(frame.size())) + " (one halving per frame pooling stage)");
      if (kind == ModelKind::joint && frame_embedding == 0)
        fail(ErrorKind::invalid_argument, "frame embedding width must be positive");
      break;
    case ModelKind::staged2:
      if (size == 0 || frame_embedding == 0)
        fail(ErrorKind::invalid_argument, "staged2 input must be non-empty");
      break;
    case ModelKind::cae3d:
      if (size < 8) fail(ErrorKind::invalid_argument, "cae3d size must be at least 8");
      break;
  }
}

Shape ArchitectureDescriptor::sample_shape() const {
  switch (kind) {
    case ModelKind::staged1: return {1, size, size};
    case ModelKind::staged2: return {1, size, frame_embedding};
    case ModelKind::joint:
    case ModelKind::cae3d: return {1, size, size, size};
  }
  return {};
}

template <typename Real>
std::size_t ModelGraph<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters) n += t.size();
  return n;
}

template <typename Real>
Var<Real> Binding<Real>::operator[](const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) fail(ErrorKind::inconsistent, "model has no parameter '" + name + "'");
  return it->second;
}

template <typename Real>
std::vector<Var<Real>> Binding<Real>::all() const {
  std::vector<Var<Real>> out;
  for (const auto& [name, v] : vars) out.push_back(v);
  return out;
}

template <typename Real>
Binding<Real> bind(Tape<Real>& tape, ModelGraph<Real>& model) {
  Binding<Real> b;
  b.model = &model;
  for (const auto& [name, t] : model.parameters) b.vars.emplace(name, tape.leaf(t));
  return b;
}

namespace {

// One conv autoencoder: conv-BN-ReLU-pool stages, a dense ReLU bottleneck, and the
// mirrored decoder. `scale` maps raw inputs to unit range and back.
struct AeSpec {
  std::string prefix;
  std::vector<std::size_t> spatial;
  std::vector<std::size_t> channels;
  std::size_t kernel;
  std::size_t embedding;
  double scale;

  std::vector<std::size_t> pooled() const {
    auto p = spatial;
    for (std::size_t i = 0; i < channels.size(); ++i)
      for (auto& e : p) e = (e + 1) / 2;
    return p;
  }
  std::size_t flat() const { return channels.back() * element_count(pooled()); }
  std::size_t in_channels(std::size_t layer) const { return layer == 0 ? 1 : channels[layer - 1]; }
  Shape kernel_shape(std::size_t layer) const {
    Shape s{channels[layer], in_channels(layer)};
    for (std::size_t d = 0; d < spatial.size(); ++d) s.push_back(kernel);
    return s;
  }
};

AeSpec main_spec(const ArchitectureDescriptor& d) {
  const std::size_t S = d.size;
  switch (d.kind) {
    case ModelKind::staged1: return {"", {S, S}, d.channels, d.kernel, d.embedding, 255.0};
    case ModelKind::staged2:
      return {"", {S, d.frame_embedding}, d.channels, d.kernel, d.embedding, 1.0};
    case ModelKind::joint:
      return {"brain.", {S, d.frame_embedding}, d.channels, d.kernel, d.embedding, 1.0};
    case ModelKind::cae3d: return {"", {S, S, S}, d.channels, d.kernel, d.embedding, 255.0};
  }
  return {};
}

AeSpec frame_spec(const ArchitectureDescriptor& d) {
  return {"frame.", {d.size, d.size}, d.frame_channels, d.kernel, d.frame_embedding, 255.0};
}

std::string idx(const char* stem, std::size_t i) { return stem + std::to_string(i); }

// (name, shape, fan_in) in a fixed order; fan_in 0 marks BN (gamma 1, beta 0)
// and bias (0) tensors.
struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in;
  bool ones = false;
};

void add_bn(std::vector<ParamSpec>& out, const std::string& name, std::size_t channels) {
  out.push_back({name + ".gamma", {channels}, 0, true});
  out.push_back({name + ".beta", {channels}, 0});
}

std::vector<ParamSpec> param_specs(const AeSpec& s) {
  std::vector<ParamSpec> out;
  const std::size_t taps = element_count(Shape(s.spatial.size(), s.kernel));
  const std::string& p = s.prefix;
  for (std::size_t i = 0; i < s.channels.size(); ++i) {
    out.push_back({p + idx("enc.conv", i) + ".kernel", s.kernel_shape(i), s.in_channels(i) * taps});
    add_bn(out, p + idx("enc.bn", i), s.channels[i]);
  }
  out.push_back({p + "enc.dense.weight", {s.flat(), s.embedding}, s.flat()});
  out.push_back({p + "enc.dense.bias", {s.embedding}, 0});
  out.push_back({p + "dec.dense.weight", {s.embedding, s.flat()}, s.embedding});
  out.push_back({p + "dec.dense.bias", {s.flat()}, 0});
  for (std::size_t i = s.channels.size(); i-- > 0;) {
    out.push_back({p + idx("dec.deconv", i) + ".kernel", s.kernel_shape(i), s.channels[i] * taps});
    if (i > 0) add_bn(out, p + idx("dec.bn", i), s.in_channels(i));
  }
  out.push_back({p + "dec.deconv0.bias", {1}, 0});
  return out;
}

std::vector<AeSpec> specs_of(const ArchitectureDescriptor& d) {
  if (d.kind == ModelKind::joint) return {frame_spec(d), main_spec(d)};
  return {main_spec(d)};
}

template <typename Real>
Var<Real> bn_relu(const Binding<Real>& b, const std::string& name, Var<Real> x, Mode mode) {
  auto& state = b.model->batchnorm.at(name);
  return relu(batchnorm(x, b[name + ".gamma"], b[name + ".beta"], state, mode));
}

template <typename Real>
Var<Real> encode_ae(const Binding<Real>& b, const AeSpec& s, Var<Real> x, Mode mode,
                    std::vector<std::shared_ptr<const PoolSwitches>>& switches) {
  const std::string& p = s.prefix;
  const std::size_t n = x.shape()[0];
  Var<Real> h = s.scale != 1.0 ? scale(x, Real(1.0 / s.scale)) : x;
  for (std::size_t i = 0; i < s.channels.size(); ++i) {
    h = conv(h, b[p + idx("enc.conv", i) + ".kernel"], std::nullopt, ConvGeometry{});
    h = bn_relu(b, p + idx("enc.bn", i), h, mode);
    auto pooled = maxpool(h);
    switches.push_back(pooled.switches);
    h = pooled.values;
  }
  h = dense(reshape(h, {n, s.flat()}), b[p + "enc.dense.weight"], b[p + "enc.dense.bias"]);
  return relu(h);
}

template <typename Real>
Var<Real> decode_ae(const Binding<Real>& b, const AeSpec& s, Var<Real> z, Mode mode,
                    const std::vector<std::shared_ptr<const PoolSwitches>>& switches) {
  const std::string& p = s.prefix;
  if (switches.size() != s.channels.size())
    fail(ErrorKind::invalid_argument, "decode: expected " + std::to_string(s.channels.size()) +
                                          " pooling switch records, got " +
                                          std::to_string(switches.size()));
  if (z.shape().size() != 2 || z.shape()[1] != s.embedding)
    fail(ErrorKind::shape, "decode: embedding " + shape_string(z.shape()) + " does not have width " +
                               std::to_string(s.embedding));
  const std::size_t n = z.shape()[0];
  Var<Real> h = relu(dense(z, b[p + "dec.dense.weight"], b[p + "dec.dense.bias"]));
  Shape grid{n, s.channels.back()};
  for (auto e : s.pooled()) grid.push_back(e);
  h = reshape(h, grid);
  for (std::size_t i = s.channels.size(); i-- > 0;) {
    h = unpool(h, switches[i]);
    if (i > 0) {
      h = deconv(h, b[p + idx("dec.deconv", i) + ".kernel"], std::nullopt, ConvGeometry{});
      h = bn_relu(b, p + idx("dec.bn", i), h, mode);
    } else {
      h = deconv(h, b[p + "dec.deconv0.kernel"], b[p + "dec.deconv0.bias"], ConvGeometry{});
    }
  }
  return s.scale != 1.0 ? scale(h, Real(s.scale)) : h;
}

void check_input(const ArchitectureDescriptor& d, const Shape& x) {
  const Shape want = d.sample_shape();
  Shape got(x.begin() + (x.empty() ? 0 : 1), x.end());
  if (x.size() != want.size() + 1 || got != want) {
    Shape full{0};
    full.insert(full.end(), want.begin(), want.end());
    std::string w = shape_string(full);
    w.replace(1, 1, "N");
    fail(ErrorKind::shape, std::string(to_string(d.kind)) + " model expects input " + w +
                               ", got " + shape_string(x));
  }
}

// Volume batch (N x 1 x S x S x S) to frames (N*S x 1 x S x S), frame index
// along the third volume axis.
template <typename Real>
Var<Real> to_frames(Var<Real> x, std::size_t S) {
  const std::size_t n = x.shape()[0];
  return reshape(permute(reshape(x, {n, S, S, S}), {0, 3, 1, 2}), {n * S, 1, S, S});
}

template <typename Real>
Var<Real> from_frames(Var<Real> f, std::size_t n, std::size_t S) {
  return reshape(permute(reshape(f, {n, S, S, S}), {0, 2, 3, 1}), {n, 1, S, S, S});
}

// Frame encoder -> stacked codes -> brain encoder. `frames` and `brain` may be
// bindings of two separate graphs or both the joint graph.
template <typename Real>
Encoded<Real> composite_encode(const Binding<Real>& frames, const AeSpec& fs,
                               const Binding<Real>& brain, const AeSpec& bs, Var<Real> x,
                               Mode mode) {
  const std::size_t n = x.shape()[0], S = fs.spatial[0];
  Encoded<Real> out;
  out.switches.batch = n;
  auto codes = encode_ae(frames, fs, to_frames(x, S), mode, out.switches.frame);
  auto stacked = reshape(codes, {n, 1, S, fs.embedding});
  out.embedding = encode_ae(brain, bs, stacked, mode, out.switches.main);
  return out;
}

template <typename Real>
Var<Real> composite_decode(const Binding<Real>& frames, const AeSpec& fs,
                           const Binding<Real>& brain, const AeSpec& bs, Var<Real> z,
                           const SwitchContext& sw, Mode mode) {
  const std::size_t n = z.shape()[0], S = fs.spatial[0];
  auto stacked = decode_ae(brain, bs, z, mode, sw.main);
  auto codes = reshape(stacked, {n * S, fs.embedding});
  return from_frames(decode_ae(frames, fs, codes, mode, sw.frame), n, S);
}

}  // namespace

template <typename Real>
Encoded<Real> encode(const Binding<Real>& b, Var<Real> x, Mode mode) {
  const auto& d = b.model->descriptor;
  check_input(d, x.shape());
  if (d.kind == ModelKind::joint) return composite_encode(b, frame_spec(d), b, main_spec(d), x, mode);
  Encoded<Real> out;
  out.switches.batch = x.shape()[0];
  out.embedding = encode_ae(b, main_spec(d), x, mode, out.switches.main);
  return out;
}

template <typename Real>
Var<Real> decode(const Binding<Real>& b, Var<Real> embedding, const SwitchContext& switches,
                 Mode mode) {
  const auto& d = b.model->descriptor;
  if (d.kind == ModelKind::joint) {
    if (switches.frame.empty())
      fail(ErrorKind::invalid_argument, "decode: joint model needs frame switches");
    return composite_decode(b, frame_spec(d), b, main_spec(d), embedding, switches, mode);
  }
  return decode_ae(b, main_spec(d), embedding, mode, switches.main);
}

template <typename Real>
Forward<Real> forward(const Binding<Real>& b, Var<Real> x, Mode mode) {
  auto enc = encode(b, x, mode);
  return {enc.embedding, decode(b, enc.embedding, enc.switches, mode)};
}

template <typename Real>
ModelGraph<Real> build(const ArchitectureDescriptor& descriptor, std::uint64_t seed) {
  descriptor.validate();
  ModelGraph<Real> m;
  m.descriptor = descriptor;
  Rng rng(seed);
  for (const auto& spec : specs_of(descriptor)) {
    for (const auto& p : param_specs(spec)) {
      Tensor<Real> t(p.shape, p.ones ? Real(1) : Real(0));
      if (p.fan_in > 0) {
        const double bound = std::sqrt(6.0 / double(p.fan_in));
        for (auto& v : t.data()) v = Real(rng.uniform(-bound, bound));
      }
      if (p.ones) {
        const std::string bn = p.name.substr(0, p.name.size() - std::string(".gamma").size());
        m.batchnorm.emplace(bn, BatchNormState<Real>::identity(p.shape[0]));
      }
      m.parameters.emplace(p.name, std::move(t));
    }
  }
  return m;
}

template <typename Real>
Tensor<Real> reconstruct(ModelGraph<Real>& model, const Tensor<Real>& batch) {
  Tape<Real> tape(false);
  auto b = bind(tape, model);
  return forward(b, tape.leaf(batch), Mode::infer).reconstruction.value();
}

template <typename Real>
Tensor<Real> embed(ModelGraph<Real>& model, const Tensor<Real>& batch) {
  Tape<Real> tape(false);
  auto b = bind(tape, model);
  return encode(b, tape.leaf(batch), Mode::infer).embedding.value();
}

namespace {

void check_volume(const ArchitectureDescriptor& d, const Shape& v) {
  if (v != Shape{d.size, d.size, d.size})
    fail(ErrorKind::shape, "volume " + shape_string(v) + " does not match model size " +
                               std::to_string(d.size));
}

void require_kind(const ArchitectureDescriptor& d, ModelKind kind, const char* what) {
  if (d.kind != kind)
    fail(ErrorKind::invalid_argument, std::string(what) + " needs a " + to_string(kind) +
                                          " model, got " + to_string(d.kind));
}

}  // namespace

template <typename Real>
Tensor<Real> frames_of(const Tensor<Real>& volume) {
  const std::size_t S = volume.extent(0);
  const std::size_t axes[] = {2, 0, 1};
  return permuted(volume, axes).reshaped({S, 1, S, S});
}

template <typename Real>
Tensor<Real> encode_frames(ModelGraph<Real>& staged1, const Tensor<Real>& volume) {
  require_kind(staged1.descriptor, ModelKind::staged1, "encode_frames");
  check_volume(staged1.descriptor, volume.shape());
  return embed(staged1, frames_of(volume));
}

template <typename Real>
Tensor<Real> encode_volume(ModelGraph<Real>& staged1, ModelGraph<Real>& staged2,
                           const Tensor<Real>& volume) {
  require_kind(staged2.descriptor, ModelKind::staged2, "staged encode");
  const auto codes = encode_frames(staged1, volume);
  const std::size_t S = codes.extent(0), E1 = codes.extent(1);
  auto e = embed(staged2, codes.reshaped({1, 1, S, E1}));
  return std::move(e).reshaped({e.size()});
}

template <typename Real>
Tensor<Real> encode_volume(ModelGraph<Real>& model, const Tensor<Real>& volume) {
  const auto& d = model.descriptor;
  if (d.kind != ModelKind::joint && d.kind != ModelKind::cae3d)
    fail(ErrorKind::invalid_argument,
         std::string("whole-volume encode of a ") + to_string(d.kind) +
             " model needs the staged pair (staged1 + staged2)");
  check_volume(d, volume.shape());
  const std::size_t S = d.size;
  auto e = embed(model, volume.reshaped({1, 1, S, S, S}));
  return std::move(e).reshaped({e.size()});
}

namespace {

void check_pair(const ArchitectureDescriptor& d1, const ArchitectureDescriptor& d2) {
  require_kind(d1, ModelKind::staged1, "staged pair (first)");
  require_kind(d2, ModelKind::staged2, "staged pair (second)");
  if (d2.frame_embedding != d1.embedding)
    fail(ErrorKind::invalid_argument,
         "staged2 input width " + std::to_string(d2.frame_embedding) +
             " does not match staged1 embedding width " + std::to_string(d1.embedding));
  if (d2.size != d1.size)
    fail(ErrorKind::invalid_argument, "staged2 rows " + std::to_string(d2.size) +
                                          " do not match staged1 frame count " +
                                          std::to_string(d1.size));
  if (d1.kernel != d2.kernel)
    fail(ErrorKind::invalid_argument, "staged1 and staged2 kernel sizes differ");
}

}  // namespace

template <typename Real>
Tensor<Real> staged_composition(ModelGraph<Real>& staged1, ModelGraph<Real>& staged2,
                                const Tensor<Real>& volumes) {
  check_pair(staged1.descriptor, staged2.descriptor);
  auto joint_d = ArchitectureDescriptor::defaults(ModelKind::joint, staged1.descriptor.size);
  joint_d.kernel = staged1.descriptor.kernel;
  check_input(joint_d, volumes.shape());
  Tape<Real> tape(false);
  auto b1 = bind(tape, staged1);
  auto b2 = bind(tape, staged2);
  auto fs = main_spec(staged1.descriptor);
  auto bs = main_spec(staged2.descriptor);
  auto x = tape.leaf(volumes);
  auto enc = composite_encode(b1, fs, b2, bs, x, Mode::infer);
  return composite_decode(b1, fs, b2, bs, enc.embedding, enc.switches, Mode::infer).value();
}

template <typename Real>
ModelGraph<Real> merge_staged(const ModelGraph<Real>& staged1, const ModelGraph<Real>& staged2) {
  check_pair(staged1.descriptor, staged2.descriptor);
  ModelGraph<Real> joint;
  auto& d = joint.descriptor;
  d.kind = ModelKind::joint;
  d.size = staged1.descriptor.size;
  d.embedding = staged2.descriptor.embedding;
  d.frame_embedding = staged1.descriptor.embedding;
  d.channels = staged2.descriptor.channels;
  d.frame_channels = staged1.descriptor.channels;
  d.kernel = staged1.descriptor.kernel;
  d.validate();
  for (const auto& [name, t] : staged1.parameters) joint.parameters.emplace("frame." + name, t);
  for (const auto& [name, s] : staged1.batchnorm) joint.batchnorm.emplace("frame." + name, s);
  for (const auto& [name, t] : staged2.parameters) joint.parameters.emplace("brain." + name, t);
  for (const auto& [name, s] : staged2.batchnorm) joint.batchnorm.emplace("brain." + name, s);
  return joint;
}

#define CAE_INSTANTIATE_MODEL(Real)                                                            \
  template struct ModelGraph<Real>;                                                             \
  template struct Binding<Real>;                                                                \
  template Binding<Real> bind<Real>(Tape<Real>&, ModelGraph<Real>&);                            \
  template Encoded<Real> encode<Real>(const Binding<Real>&, Var<Real>, Mode);                   \
  template Var<Real> decode<Real>(const Binding<Real>&, Var<Real>, const SwitchContext&, Mode); \
  template Forward<Real> forward<Real>(const Binding<Real>&, Var<Real>, Mode);                  \
  template ModelGraph<Real> build<Real>(const ArchitectureDescriptor&, std::uint64_t);          \
  template Tensor<Real> reconstruct<Real>(ModelGraph<Real>&, const Tensor<Real>&);              \
  template Tensor<Real> embed<Real>(ModelGraph<Real>&, const Tensor<Real>&);                    \
  template Tensor<Real> frames_of<Real>(const Tensor<Real>&);                                   \
  template Tensor<Real> encode_frames<Real>(ModelGraph<Real>&, const Tensor<Real>&);            \
  template Tensor<Real> encode_volume<Real>(ModelGraph<Real>&, ModelGraph<Real>&,               \
                                            const Tensor<Real>&);                               \
  template Tensor<Real> encode_volume<Real>(ModelGraph<Real>&, const Tensor<Real>&);            \
  template Tensor<Real> staged_composition<Real>(ModelGraph<Real>&, ModelGraph<Real>&,          \
                                                 const Tensor<Real>&);                          \
  template ModelGraph<Real> merge_staged<Real>(const ModelGraph<Real>&, const ModelGraph<Real>&);

CAE_INSTANTIATE_MODEL(float)
CAE_INSTANTIATE_MODEL(double)

}  // namespace cae
