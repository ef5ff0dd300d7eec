#include "cae/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "byte_io.hpp"
#include "cae/checkpoint.hpp"
#include "cae/random.hpp"

namespace cae {

void TrainConfig::validate() const {
  if (batch_size < 2)
    fail(ErrorKind::invalid_argument, "batch size must be at least 2 (batch norm), got " +
                                          std::to_string(batch_size));
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    fail(ErrorKind::invalid_argument, "validation fraction must be in [0, 1)");
  if (!(learning_rate > 0.0)) fail(ErrorKind::invalid_argument, "learning rate must be positive");
  if (optimizer != "adam")
    fail(ErrorKind::invalid_argument, "unknown optimizer '" + optimizer + "' (only adam)");
}

void adam_step(ModelGraph<float>& model, AdamState& state,
               const std::map<std::string, Tensor<float>>& grads, double learning_rate) {
  ++state.step;
  const double c1 = 1 - std::pow(state.beta1, double(state.step));
  const double c2 = 1 - std::pow(state.beta2, double(state.step));
  for (auto& [name, p] : model.parameters) {
    const auto& g = grads.at(name);
    auto& m = state.m.try_emplace(name, Tensor<float>::zeros_like(p)).first->second;
    auto& v = state.v.try_emplace(name, Tensor<float>::zeros_like(p)).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = state.beta1 * m[i] + (1 - state.beta1) * gi;
      const double vi = state.beta2 * v[i] + (1 - state.beta2) * gi * gi;
      m[i] = float(mi);
      v[i] = float(vi);
      p[i] = float(double(p[i]) - learning_rate * (mi / c1) / (std::sqrt(vi / c2) + state.epsilon));
    }
  }
}

void write_history_csv(const TrainHistory& h, const std::filesystem::path& path) {
  std::string text = "epoch,train_mse,val_mse\n";
  char line[128];
  std::snprintf(line, sizeof line, "0,,%.9g\n", h.initial_val_mse);
  text += line;
  for (const auto& e : h.epochs) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", e.epoch, e.train_mse, e.val_mse);
    text += line;
  }
  bytes::write_file(path, std::vector<unsigned char>(text.begin(), text.end()));
}

Tensor<float> stack(const std::vector<Tensor<float>>& samples, std::span<const std::size_t> which) {
  if (which.empty()) fail(ErrorKind::invalid_argument, "stack: empty batch");
  const Shape& one = samples.at(which[0]).shape();
  Shape shape{which.size()};
  shape.insert(shape.end(), one.begin(), one.end());
  Tensor<float> out(shape);
  const std::size_t n = element_count(one);
  for (std::size_t i = 0; i < which.size(); ++i) {
    const auto& s = samples.at(which[i]);
    if (s.shape() != one)
      fail(ErrorKind::shape, "stack: sample " + shape_string(s.shape()) + " differs from " + shape_string(one));
    std::copy(s.raw(), s.raw() + n, out.raw() + i * n);
  }
  return out;
}

double evaluate_mse(ModelGraph<float>& model, const std::vector<Tensor<float>>& samples,
                    std::size_t batch_size) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  std::size_t count = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = stack(samples, idx);
    const auto out = reconstruct(model, batch);
    total += mse(out, batch) * double(batch.size());
    count += batch.size();
  }
  return total / double(count);
}

double batch_loss(ModelGraph<float>& model, const Tensor<float>& batch) {
  Tape<float> tape(false);
  auto b = bind(tape, model);
  auto x = tape.leaf(batch);
  return double(mse(forward(b, x, Mode::train).reconstruction, x).value()[0]);
}

namespace {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch,
                                                    std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, epoch);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch)
    out.emplace_back(order.begin() + long(start), order.begin() + long(std::min(n, start + batch)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

void save_progress(const ModelGraph<float>& model, const AdamState& opt, const TrainConfig& cfg,
                   std::size_t epoch, double best) {
  Checkpoint c{model, opt, {}};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", best);
  c.metadata["epoch"] = std::to_string(epoch);
  c.metadata["best_val_mse"] = buf;
  c.metadata["seed"] = std::to_string(cfg.seed);
  save_checkpoint(c, cfg.checkpoint_path);
}

}  // namespace

TrainHistory train(ModelGraph<float>& model, AdamState& optimizer,
                   const std::vector<Tensor<float>>& train_samples,
                   const std::vector<Tensor<float>>& val_samples, const TrainConfig& cfg,
                   const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_samples.size() < 2)
    fail(ErrorKind::invalid_argument, "training needs at least 2 samples, got " +
                                          std::to_string(train_samples.size()));
  const Shape want = model.descriptor.sample_shape();
  for (const auto* set : {&train_samples, &val_samples})
    for (const auto& s : *set)
      if (s.shape() != want)
        fail(ErrorKind::shape, "sample " + shape_string(s.shape()) + " does not match model input " +
                                   shape_string(want));

  TrainHistory history;
  history.initial_val_mse = evaluate_mse(model, val_samples, cfg.batch_size);
  double best = history.initial_val_mse;
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  std::size_t global_batch = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0;
    std::size_t loss_items = 0;
    for (const auto& which : epoch_batches(train_samples.size(), cfg.batch_size, cfg.seed, epoch)) {
      const auto batch = stack(train_samples, which);
      Tape<float> tape;
      auto b = bind(tape, model);
      auto x = tape.leaf(batch);
      auto loss = mse(forward(b, x, Mode::train).reconstruction, x);
      const double value = double(loss.value()[0]);
      if (!std::isfinite(value)) {
        char msg[160];
        std::snprintf(msg, sizeof msg,
                      "non-finite training loss at epoch %zu, batch %zu (last finite loss %.9g)",
                      epoch, global_batch, last_finite);
        fail(ErrorKind::numeric, msg);
      }
      last_finite = value;
      const auto params = b.all();
      auto grads = tape.grad(loss, params);
      std::map<std::string, Tensor<float>> named;
      std::size_t i = 0;
      for (const auto& [name, var] : b.vars) named.emplace(name, std::move(grads[i++]));
      adam_step(model, optimizer, named, cfg.learning_rate);
      loss_sum += value * double(which.size());
      loss_items += which.size();
      ++global_batch;
    }
    EpochRecord rec{epoch, loss_sum / double(loss_items), evaluate_mse(model, val_samples, cfg.batch_size)};
    if (rec.val_mse < best || std::isnan(best)) best = rec.val_mse;
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (!cfg.checkpoint_path.empty() &&
        ((cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0) || epoch == cfg.epochs))
      save_progress(model, optimizer, cfg, epoch, best);
  }
  return history;
}

std::vector<Tensor<float>> samples_for(const ArchitectureDescriptor& d,
                                       const std::vector<Volume>& volumes,
                                       ModelGraph<float>* staged1) {
  std::vector<Tensor<float>> out;
  const std::size_t S = d.size;
  for (const auto& v : volumes) {
    if (v.shape() != Shape{S, S, S})
      fail(ErrorKind::shape, "volume " + v.source_id + " is " + shape_string(v.shape()) +
                                 ", model size is " + std::to_string(S));
    switch (d.kind) {
      case ModelKind::staged1: {
        const auto frames = frames_of(v.data);
        for (std::size_t k = 0; k < S; ++k)
          out.emplace_back(Shape{1, S, S},
                           std::vector<float>(frames.raw() + k * S * S, frames.raw() + (k + 1) * S * S));
        break;
      }
      case ModelKind::staged2: {
        if (!staged1) fail(ErrorKind::invalid_argument, "staged2 samples need the trained staged1 model");
        auto codes = encode_frames(*staged1, v.data);
        if (codes.extent(1) != d.frame_embedding)
          fail(ErrorKind::inconsistent, "staged1 embedding width does not match staged2 input width");
        out.push_back(std::move(codes).reshaped({1, S, d.frame_embedding}));
        break;
      }
      case ModelKind::joint:
      case ModelKind::cae3d: out.push_back(v.data.reshaped({1, S, S, S})); break;
    }
  }
  return out;
}

double sample_variance(const std::vector<Tensor<float>>& samples) {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& s : samples)
    for (float f : s.data()) {
      sum += f;
      sq += double(f) * f;
      ++n;
    }
  if (n == 0) return 0;
  const double mean = sum / double(n);
  return sq / double(n) - mean * mean;
}

}  // namespace cae
