#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cae/layers.hpp"

namespace cae {

enum class ModelKind { staged1, staged2, joint, cae3d };

const char* to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);  // staged1|staged2|joint|3d

struct ArchitectureDescriptor {
  ModelKind kind = ModelKind::staged1;
  std::size_t size = 100;             // S: frame / volume extent per axis
  std::size_t embedding = 50;         // E: width of the model's own bottleneck
  std::size_t frame_embedding = 50;   // staged2 and joint: width of the per-frame codes
  std::vector<std::size_t> channels;  // conv channels of the model's own encoder
  std::vector<std::size_t> frame_channels;  // joint only: the frame encoder's channels
  std::size_t kernel = 3;

  static ArchitectureDescriptor defaults(ModelKind kind, std::size_t size = 100,
                                         std::size_t embedding = 50);

  // Throws invalid_argument naming the violated constraint.
  void validate() const;

  // Shape of one sample as fed to forward(), without the batch axis.
  Shape sample_shape() const;

  friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&) = default;
};

template <typename Real>
struct ModelGraph {
  ArchitectureDescriptor descriptor;
  std::map<std::string, Tensor<Real>> parameters;
  std::map<std::string, BatchNormState<Real>> batchnorm;

  std::size_t parameter_count() const;

  template <typename Other>
  ModelGraph<Other> cast() const {
    ModelGraph<Other> out;
    out.descriptor = descriptor;
    for (const auto& [name, t] : parameters) out.parameters.emplace(name, t.template cast<Other>());
    for (const auto& [name, s] : batchnorm)
      out.batchnorm.emplace(name, BatchNormState<Other>{s.running_mean.template cast<Other>(),
                                                        s.running_var.template cast<Other>(),
                                                        Other(s.momentum), Other(s.epsilon)});
    return out;
  }
};

// Parameters placed on a tape. Batch-norm state stays in the model and is
// updated in train mode.
template <typename Real>
struct Binding {
  ModelGraph<Real>* model = nullptr;
  std::map<std::string, Var<Real>> vars;

  Var<Real> operator[](const std::string& name) const;
  std::vector<Var<Real>> all() const;
};

template <typename Real>
Binding<Real> bind(Tape<Real>& tape, ModelGraph<Real>& model);

// Switches recorded by the encoder; the decoder needs them to unpool.
struct SwitchContext {
  std::vector<std::shared_ptr<const PoolSwitches>> frame;  // joint only
  std::vector<std::shared_ptr<const PoolSwitches>> main;
  std::size_t batch = 0;
};

template <typename Real>
struct Encoded {
  Var<Real> embedding;  // (batch x E), post-activation
  SwitchContext switches;
};

// Input layouts (batch axis first):
//   staged1  (N x 1 x S x S)      one frame per sample
//   staged2  (N x 1 x S x E1)     stacked frame codes
//   joint    (N x 1 x S x S x S)  volume
//   cae3d    (N x 1 x S x S x S)  volume
// Inputs are on the raw intensity scale; outputs are returned on the same scale.
template <typename Real>
Encoded<Real> encode(const Binding<Real>& b, Var<Real> x, Mode mode);
template <typename Real>
Var<Real> decode(const Binding<Real>& b, Var<Real> embedding, const SwitchContext& switches,
                 Mode mode);

template <typename Real>
struct Forward {
  Var<Real> embedding;
  Var<Real> reconstruction;
};

template <typename Real>
Forward<Real> forward(const Binding<Real>& b, Var<Real> x, Mode mode);

// Deterministic He-uniform initialization from `seed`.
template <typename Real>
ModelGraph<Real> build(const ArchitectureDescriptor& descriptor, std::uint64_t seed);

// Inference-mode conveniences over plain tensors.
template <typename Real>
Tensor<Real> reconstruct(ModelGraph<Real>& model, const Tensor<Real>& batch);
template <typename Real>
Tensor<Real> embed(ModelGraph<Real>& model, const Tensor<Real>& batch);

// Volume tensor (S x S x S), frames along the third axis, to a staged1 batch
// (S x 1 x S x S): row i is frame v[:, :, i].
template <typename Real>
Tensor<Real> frames_of(const Tensor<Real>& volume);

// (S x E1): row i is the staged1 code of frame i.
template <typename Real>
Tensor<Real> encode_frames(ModelGraph<Real>& staged1, const Tensor<Real>& volume);

// Whole-volume embedding. Staged models need both halves; joint and cae3d
// take a single graph.
template <typename Real>
Tensor<Real> encode_volume(ModelGraph<Real>& staged1, ModelGraph<Real>& staged2,
                           const Tensor<Real>& volume);
template <typename Real>
Tensor<Real> encode_volume(ModelGraph<Real>& model, const Tensor<Real>& volume);

// Volume batch (N x 1 x S x S x S) through staged1 encode, staged2
// autoencode and staged1 decode, with frame switches from the staged1 encoder.
template <typename Real>
Tensor<Real> staged_composition(ModelGraph<Real>& staged1, ModelGraph<Real>& staged2,
                                const Tensor<Real>& volumes);

// Joint graph with copies of both parameter sets (frame.* and brain.*).
template <typename Real>
ModelGraph<Real> merge_staged(const ModelGraph<Real>& staged1, const ModelGraph<Real>& staged2);

}  // namespace cae
