#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cae/model.hpp"
#include "cae/volume.hpp"

namespace cae {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";
  std::uint64_t seed = 0;
  double validation_fraction = 0.2;
  std::size_t checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  std::filesystem::path checkpoint_path;

  void validate() const;
};

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<float>> m, v;
};

// One Adam update of every parameter from gradients keyed by name.
void adam_step(ModelGraph<float>& model, AdamState& state,
               const std::map<std::string, Tensor<float>>& grads, double learning_rate);

struct EpochRecord {
  std::size_t epoch;
  double train_mse;
  double val_mse;
};

struct TrainHistory {
  double initial_val_mse = 0;  // before any update (epoch 0)
  std::vector<EpochRecord> epochs;
};

// CSV with header epoch,train_mse,val_mse; epoch 0 carries the initial
// validation MSE and an empty train column.
void write_history_csv(const TrainHistory& h, const std::filesystem::path& path);

// Mean squared reconstruction error over `samples` in inference mode, on the
// samples' own scale.
double evaluate_mse(ModelGraph<float>& model, const std::vector<Tensor<float>>& samples,
                    std::size_t batch_size);

// Loss of one train-mode step on a fixed batch, without updating anything
// except batch-norm running statistics.
double batch_loss(ModelGraph<float>& model, const Tensor<float>& batch);

// Stacks single samples into a (N x sample...) batch.
Tensor<float> stack(const std::vector<Tensor<float>>& samples, std::span<const std::size_t> which);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch Adam on reconstruction MSE. Each sample has the model's
// sample_shape(). Batch order per epoch is a seeded permutation; a trailing
// batch of one joins the previous batch. A non-finite loss aborts with the
// last finite loss and the batch index.
TrainHistory train(ModelGraph<float>& model, AdamState& optimizer,
                   const std::vector<Tensor<float>>& train_samples,
                   const std::vector<Tensor<float>>& val_samples, const TrainConfig& cfg,
                   const EpochCallback& on_epoch = {});

// Model inputs built from volumes: frames for staged1, staged1 code matrices
// for staged2 (needs `staged1`), whole volumes otherwise.
std::vector<Tensor<float>> samples_for(const ArchitectureDescriptor& d,
                                       const std::vector<Volume>& volumes,
                                       ModelGraph<float>* staged1 = nullptr);

// Population variance of every element of the samples.
double sample_variance(const std::vector<Tensor<float>>& samples);

}  // namespace cae
