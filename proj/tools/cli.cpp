#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

#include "cae/checkpoint.hpp"
#include "cae/eval.hpp"
#include "cae/random.hpp"
#include "cae/saliency.hpp"
#include "cae/split.hpp"
#include "cae/trainer.hpp"
#include "cae/volume.hpp"

namespace cae::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

struct Context {
  std::ostream& out;
  std::ostream& err;
  CLI::App* command = nullptr;
  int threads = 0;
  std::string data_dir;  // empty: $CAE_DATA_DIR, then the manifest's directory

  void log(const std::string& line) const { err << "[" << command->get_name() << "] " << line << "\n"; }
};

std::string fmt(double v, const char* f = "%.9g") {
  char buf[40];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Base directory for relative manifest paths.
fs::path data_base(const Context& ctx, const fs::path& manifest) {
  if (!ctx.data_dir.empty()) return ctx.data_dir;
  if (const char* env = std::getenv("CAE_DATA_DIR"); env && *env) return env;
  return manifest.parent_path();
}

// Input rows from --manifest or bare --input paths.
std::pair<std::vector<ManifestRow>, fs::path> gather(const Context& ctx, const std::string& manifest,
                                                     const std::vector<std::string>& inputs) {
  if (!manifest.empty() && !inputs.empty())
    fail(ErrorKind::invalid_argument, "give either --manifest or --input, not both");
  if (!manifest.empty()) return {read_manifest(manifest), data_base(ctx, manifest)};
  if (inputs.empty()) fail(ErrorKind::invalid_argument, "no inputs: pass --manifest or --input");
  std::vector<ManifestRow> rows;
  for (const auto& p : inputs) rows.push_back({p, std::nullopt, fs::path(p).stem().string(), ""});
  return {rows, fs::path()};
}

std::string stem_of(const ManifestRow& row) {
  std::string file = row.path;
  std::string tag;
  if (auto h = file.find('#'); h != std::string::npos) {
    tag = "_" + file.substr(h + 1);
    file.resize(h);
  }
  return fs::path(file).stem().string() + tag;
}

// Every option of the running command with its effective value.
void write_resolved_config(const Context& ctx, const fs::path& dir, const json& extra = {}) {
  json j;
  j["command"] = ctx.command->get_name();
  j["version"] = kVersion;
  j["threads"] = ctx.threads;
  const char* env = std::getenv("CAE_DATA_DIR");
  j["data_dir"] = !ctx.data_dir.empty() ? ctx.data_dir : (env ? env : "");
  json opts = json::object();
  for (const CLI::Option* o : ctx.command->get_options()) {
    const std::string name = o->get_single_name();
    if (name == "help" || name.empty()) continue;
    if (o->get_type_size() == 0) {
      opts[name] = o->count() > 0;
    } else if (o->get_expected_max() > 1) {
      opts[name] = o->count() ? json(o->results()) : json(o->get_default_str());
    } else {
      opts[name] = o->count() ? o->results().back() : o->get_default_str();
    }
  }
  j["options"] = opts;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  const fs::path path = (dir.empty() ? fs::path(".") : dir) / (ctx.command->get_name() + ".config.json");
  fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << "\n";
}

fs::path dir_of(const std::string& file) {
  const auto p = fs::path(file).parent_path();
  return p.empty() ? fs::path(".") : p;
}

// A model, or the staged pair, ready to encode whole volumes.
struct Models {
  ModelGraph<float> main;
  std::optional<ModelGraph<float>> staged2;

  ModelKind kind() const { return main.descriptor.kind; }
  std::string label() const { return staged2 ? "staged" : to_string(kind()); }
  std::size_t size() const { return main.descriptor.size; }
  std::size_t embedding() const { return staged2 ? staged2->descriptor.embedding : main.descriptor.embedding; }

  Tensor<float> encode(const Tensor<float>& volume) {
    return staged2 ? encode_volume(main, *staged2, volume) : encode_volume(main, volume);
  }
};

Models load_models(const std::string& checkpoint, const std::string& staged2) {
  Models m{load_checkpoint(checkpoint).model, std::nullopt};
  if (!staged2.empty()) {
    if (m.kind() != ModelKind::staged1)
      fail(ErrorKind::invalid_argument, "--staged2 goes with a staged1 --checkpoint, got " +
                                            std::string(to_string(m.kind())));
    m.staged2 = load_checkpoint(staged2).model;
  } else if (m.kind() == ModelKind::staged1 || m.kind() == ModelKind::staged2) {
    fail(ErrorKind::invalid_argument, "whole-volume use of a staged model needs --checkpoint <staged1> --staged2 <staged2>");
  }
  return m;
}

Models untrained_models(const std::string& kind, std::size_t size, std::size_t embedding, std::uint64_t seed) {
  if (kind == "staged") {
    auto d1 = ArchitectureDescriptor::defaults(ModelKind::staged1, size, embedding);
    auto d2 = ArchitectureDescriptor::defaults(ModelKind::staged2, size, embedding);
    d2.frame_embedding = embedding;
    return {build<float>(d1, seed), build<float>(d2, seed + 1)};
  }
  auto d = ArchitectureDescriptor::defaults(parse_model_kind(kind), size, embedding);
  d.frame_embedding = embedding;
  return {build<float>(d, seed), std::nullopt};
}

void check_volume(const Models& m, const Volume& v, const std::string& id) {
  const std::size_t S = m.size();
  if (v.shape() != Shape{S, S, S})
    fail(ErrorKind::inconsistent, id + " is " + shape_string(v.shape()) + " but the model takes " +
                                      shape_string(Shape{S, S, S}));
}

// --- commands --------------------------------------------------------------

struct PrepArgs {
  std::vector<std::string> inputs;
  std::string manifest, output_dir;
  std::size_t crop = 200;
  bool no_downsample = false;
};

void cmd_prep(const Context& ctx, const PrepArgs& a) {
  auto [rows, base] = gather(ctx, a.manifest, a.inputs);
  std::vector<ManifestRow> out_rows;
  for (const auto& row : rows) {
    Volume v = load_entry(row, base);
    v = crop_center(v, a.crop);
    if (!a.no_downsample) v = downsample2x(v);
    const std::string name = stem_of(row) + ".rvol";
    write_rvol(v, fs::path(a.output_dir) / name);
    out_rows.push_back({name, row.label, row.group, row.split});
    ctx.log(row.path + " -> " + name + " " + shape_string(v.shape()));
  }
  write_manifest(out_rows, fs::path(a.output_dir) / "manifest.csv");
  write_resolved_config(ctx, a.output_dir);
  ctx.out << out_rows.size() << " volumes written to " << a.output_dir << "\n";
}

struct AugmentArgs {
  std::vector<std::string> inputs;
  std::string manifest, output_dir;
  bool on_the_fly = false;
};

void cmd_augment(const Context& ctx, const AugmentArgs& a) {
  auto [rows, base] = gather(ctx, a.manifest, a.inputs);
  const AugmentConfig cfg;
  std::vector<ManifestRow> out_rows;
  if (a.on_the_fly) {
    // Entries keep pointing at the originals; the tag is applied at load time.
    for (auto& r : rows)
      if (fs::path(r.path).is_relative() && !base.empty()) r.path = (base / r.path).string();
    out_rows = expand_manifest(rows, cfg);
  } else {
    const auto tags = augment_tags(cfg);
    for (const auto& row : rows) {
      const Volume v = load_entry(row, base);
      for (const auto& tag : tags) {
        const std::string name = stem_of(row) + "_" + tag.str() + ".rvol";
        write_rvol(apply_tag(v, tag), fs::path(a.output_dir) / name);
        out_rows.push_back({name, row.label, row.group.empty() ? stem_of(row) : row.group, row.split});
      }
      ctx.log(row.path + ": " + std::to_string(tags.size()) + " variants");
    }
  }
  write_manifest(out_rows, fs::path(a.output_dir) / "manifest.csv");
  write_resolved_config(ctx, a.output_dir);
  ctx.out << out_rows.size() << (a.on_the_fly ? " manifest entries" : " volumes") << " written to "
          << a.output_dir << "\n";
}

struct PhantomArgs {
  std::size_t per_class = 64, size = 32;
  std::uint64_t seed = 0;
  std::string output_dir;
};

void cmd_phantom_gen(const Context& ctx, const PhantomArgs& a) {
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < 2 * a.per_class; ++i) {
    const auto cls = i % 2 ? PhantomClass::b : PhantomClass::a;
    const std::uint64_t seed = Rng::derive(a.seed, i).next();
    Volume v = gen_phantom(seed, cls, a.size);
    char name[64];
    std::snprintf(name, sizeof name, "phantom_%04zu_%c.rvol", i, cls == PhantomClass::a ? 'a' : 'b');
    write_rvol(v, fs::path(a.output_dir) / name);
    rows.push_back({name, int(cls), fs::path(name).stem().string(), ""});
  }
  write_manifest(rows, fs::path(a.output_dir) / "manifest.csv");
  write_resolved_config(ctx, a.output_dir);
  ctx.out << rows.size() << " phantoms written to " << a.output_dir << "\n";
}

struct TrainArgs {
  std::string model, manifest, output, history, staged1, staged2;
  std::size_t embedding = 50;
  std::vector<std::size_t> channels;
  TrainConfig cfg;
};

void cmd_train(const Context& ctx, TrainArgs a) {
  const ModelKind kind = parse_model_kind(a.model);
  const auto rows = read_manifest(a.manifest);
  const fs::path base = data_base(ctx, a.manifest);

  std::vector<ManifestRow> usable;
  for (const auto& r : rows)
    if (r.split != "test") usable.push_back(r);
  if (usable.size() < 2) fail(ErrorKind::invalid_argument, "manifest has fewer than 2 training rows");
  std::vector<bool> is_val(usable.size(), false);
  const bool marked = std::any_of(usable.begin(), usable.end(), [](const auto& r) { return r.split == "val"; });
  if (marked) {
    for (std::size_t i = 0; i < usable.size(); ++i) is_val[i] = usable[i].split == "val";
  } else if (a.cfg.validation_fraction > 0) {
    std::vector<std::string> groups;
    for (const auto& r : usable) groups.push_back(r.group.empty() ? r.path : r.group);
    is_val = group_split(groups, a.cfg.validation_fraction, a.cfg.seed);
  }
  std::vector<Volume> train_vols, val_vols;
  for (std::size_t i = 0; i < usable.size(); ++i)
    (is_val[i] ? val_vols : train_vols).push_back(load_entry(usable[i], base));
  const std::size_t S = train_vols.at(0).shape().at(0);
  ctx.log(std::to_string(train_vols.size()) + " training and " + std::to_string(val_vols.size()) +
          " validation volumes of size " + std::to_string(S));

  ModelGraph<float> model;
  std::optional<ModelGraph<float>> s1;
  switch (kind) {
    case ModelKind::staged1:
    case ModelKind::cae3d: {
      auto d = ArchitectureDescriptor::defaults(kind, S, a.embedding);
      if (!a.channels.empty()) d.channels = a.channels;
      model = build<float>(d, a.cfg.seed);
      break;
    }
    case ModelKind::staged2: {
      if (a.staged1.empty()) fail(ErrorKind::invalid_argument, "staged2 training needs --staged1 <checkpoint>");
      s1 = load_checkpoint(a.staged1).model;
      if (s1->descriptor.kind != ModelKind::staged1)
        fail(ErrorKind::invalid_argument, "--staged1 checkpoint holds a " + std::string(to_string(s1->descriptor.kind)) + " model");
      auto d = ArchitectureDescriptor::defaults(kind, s1->descriptor.size, a.embedding);
      d.frame_embedding = s1->descriptor.embedding;
      if (!a.channels.empty()) d.channels = a.channels;
      model = build<float>(d, a.cfg.seed);
      break;
    }
    case ModelKind::joint: {
      if (a.staged1.empty() || a.staged2.empty())
        fail(ErrorKind::invalid_argument, "joint training starts from --staged1 and --staged2 checkpoints");
      model = merge_staged(load_checkpoint(a.staged1).model, load_checkpoint(a.staged2).model);
      break;
    }
  }
  const auto train_samples = samples_for(model.descriptor, train_vols, s1 ? &*s1 : nullptr);
  const auto val_samples = samples_for(model.descriptor, val_vols, s1 ? &*s1 : nullptr);
  ctx.log(std::string(to_string(kind)) + " model with " + std::to_string(model.parameter_count()) +
          " parameters, " + std::to_string(train_samples.size()) + " training samples");

  if (a.cfg.checkpoint_every > 0) a.cfg.checkpoint_path = a.output;
  AdamState opt;
  const auto history = train(model, opt, train_samples, val_samples, a.cfg, [&](const EpochRecord& r) {
    ctx.log("epoch " + std::to_string(r.epoch) + " train_mse=" + fmt(r.train_mse) + " val_mse=" + fmt(r.val_mse));
  });
  Checkpoint c{model, opt, {}};
  c.metadata["epoch"] = std::to_string(a.cfg.epochs);
  c.metadata["seed"] = std::to_string(a.cfg.seed);
  c.metadata["initial_val_mse"] = fmt(history.initial_val_mse, "%.17g");
  if (!history.epochs.empty()) c.metadata["final_val_mse"] = fmt(history.epochs.back().val_mse, "%.17g");
  c.metadata["manifest"] = a.manifest;
  save_checkpoint(c, a.output);
  write_history_csv(history, a.history.empty() ? a.output + ".history.csv" : a.history);
  write_resolved_config(ctx, dir_of(a.output), {{"model_kind", to_string(kind)}, {"size", model.descriptor.size}});
  ctx.out << "checkpoint " << a.output << " initial_val_mse " << fmt(history.initial_val_mse);
  if (!history.epochs.empty()) ctx.out << " final_val_mse " << fmt(history.epochs.back().val_mse);
  ctx.out << "\n";
}

struct MergeArgs {
  std::string staged1, staged2, output;
};

void cmd_merge(const Context& ctx, const MergeArgs& a) {
  auto j = merge_staged(load_checkpoint(a.staged1).model, load_checkpoint(a.staged2).model);
  save_checkpoint({j, std::nullopt, {{"staged1", a.staged1}, {"staged2", a.staged2}}}, a.output);
  write_resolved_config(ctx, dir_of(a.output));
  ctx.out << "joint checkpoint " << a.output << " (" << j.parameter_count() << " parameters)\n";
}

struct EncodeArgs {
  std::string checkpoint, staged2, manifest, output;
  std::vector<std::string> inputs;
};

void cmd_encode(const Context& ctx, const EncodeArgs& a) {
  Models m = load_models(a.checkpoint, a.staged2);
  auto [rows, base] = gather(ctx, a.manifest, a.inputs);
  std::string text = "id";
  for (std::size_t k = 0; k < m.embedding(); ++k) text += ",e" + std::to_string(k);
  text += "\n";
  for (const auto& row : rows) {
    const Volume v = load_entry(row, base);
    check_volume(m, v, row.path);
    const auto e = m.encode(v.data);
    text += row.path;
    for (float x : e.data()) text += "," + fmt(double(x));
    text += "\n";
  }
  fs::create_directories(dir_of(a.output));
  std::ofstream(a.output, std::ios::binary) << text;
  write_resolved_config(ctx, dir_of(a.output), {{"model", m.label()}});
  ctx.out << rows.size() << " embeddings of width " << m.embedding() << " written to " << a.output << "\n";
}

struct ReconstructArgs {
  std::string checkpoint, staged2, input, output;
};

void cmd_reconstruct(const Context& ctx, const ReconstructArgs& a) {
  const Volume v = load_volume(a.input);
  auto main = load_checkpoint(a.checkpoint).model;
  const std::size_t S = main.descriptor.size;
  Tensor<float> out;
  if (!a.staged2.empty()) {
    auto s2 = load_checkpoint(a.staged2).model;
    Models m{main, std::nullopt};
    check_volume(m, v, a.input);
    out = staged_composition(main, s2, v.data.reshaped({1, 1, S, S, S}));
  } else if (main.descriptor.kind == ModelKind::staged1) {
    // Frame by frame, reassembled along Z.
    if (v.shape() != Shape{S, S, S})
      fail(ErrorKind::inconsistent, a.input + " is " + shape_string(v.shape()) + ", model frames are " +
                                        std::to_string(S) + "x" + std::to_string(S));
    const auto frames = reconstruct(main, frames_of(v.data));
    out = Tensor<float>({S, S, S});
    for (std::size_t z = 0; z < S; ++z)
      for (std::size_t x = 0; x < S; ++x)
        for (std::size_t y = 0; y < S; ++y) out.at({x, y, z}) = frames.at({z, 0, x, y});
  } else if (main.descriptor.kind == ModelKind::staged2) {
    fail(ErrorKind::invalid_argument, "a staged2 checkpoint reconstructs volumes only with its staged1: pass the staged1 as --checkpoint and this one as --staged2");
  } else {
    Models m{main, std::nullopt};
    check_volume(m, v, a.input);
    out = reconstruct(main, v.data.reshaped({1, 1, S, S, S}));
  }
  out = std::move(out).reshaped({S, S, S});
  const double err = mse(out, v.data);
  Volume r{out, v.source_id + "-reconstruction", v.label, v.tag};
  write_rvol(r, a.output);
  write_resolved_config(ctx, dir_of(a.output), {{"mse", err}});
  ctx.out << "mse " << fmt(err) << "\n";
}

struct SaliencyArgs {
  std::string checkpoint, staged2, input, output_dir;
  std::vector<std::size_t> nodes{0}, frames;
  std::size_t per_row = 5;
};

void cmd_saliency(const Context& ctx, const SaliencyArgs& a) {
  Models m = load_models(a.checkpoint, a.staged2);
  const Volume v = load_volume(a.input);
  check_volume(m, v, a.input);
  const auto frames = a.frames.empty() ? evenly_spaced(m.size(), std::min<std::size_t>(5, m.size())) : a.frames;
  for (auto node : a.nodes) {
    const auto map = m.staged2 ? saliency(m.main, *m.staged2, v.data, node) : saliency(m.main, v.data, node);
    const std::string stem = "saliency_node" + std::to_string(node);
    export_frames(map, frames, fs::path(a.output_dir) / (stem + ".pgm"), a.per_row);
    write_rvol(Volume{map.values, stem, std::nullopt, {}}, fs::path(a.output_dir) / (stem + ".rvol"));
    ctx.log("node " + std::to_string(node) + " -> " + stem + ".pgm");
  }
  write_resolved_config(ctx, a.output_dir, {{"model", m.label()}});
  ctx.out << a.nodes.size() << " saliency maps written to " << a.output_dir << "\n";
}

struct EvalArgs {
  std::string embeddings, manifest, features, output, task = "task", feature_set = "CAE", classifier = "both";
  std::vector<std::uint64_t> seeds{0};
  double test_fraction = 0.2;
  bool shuffle_labels = false;
};

// Embedding CSV joined with the manifest's labels and groups by id == path.
FeatureTable join_embeddings(const std::string& embeddings, const std::string& manifest,
                             const std::string& name) {
  const auto rows = read_manifest(manifest);
  std::map<std::string, const ManifestRow*> by_path;
  for (const auto& r : rows) by_path[r.path] = &r;
  std::ifstream in(embeddings);
  if (!in) fail(ErrorKind::io, "cannot read " + embeddings);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.empty() || header[0] != "id") fail(ErrorKind::inconsistent, embeddings + ": first column must be id");
  FeatureTable t;
  t.name = name;
  t.feature_names.assign(header.begin() + 1, header.end());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, cell;
    std::getline(ss, id, ',');
    auto it = by_path.find(id);
    if (it == by_path.end()) fail(ErrorKind::inconsistent, embeddings + ": id " + id + " is not in " + manifest);
    if (!it->second->label) fail(ErrorKind::inconsistent, manifest + ": row " + id + " has no label");
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    t.rows.push_back(std::move(row));
    t.labels.push_back(*it->second->label);
    t.groups.push_back(it->second->group.empty() ? id : it->second->group);
  }
  t.validate();
  return t;
}

void cmd_eval(const Context& ctx, const EvalArgs& a) {
  FeatureTable t;
  if (!a.features.empty()) {
    if (!a.embeddings.empty()) fail(ErrorKind::invalid_argument, "give either --features or --embeddings");
    t = read_feature_table(a.features, a.feature_set);
  } else {
    if (a.embeddings.empty() || a.manifest.empty())
      fail(ErrorKind::invalid_argument, "eval needs --features, or --embeddings with --manifest for labels");
    t = join_embeddings(a.embeddings, a.manifest, a.feature_set);
  }
  std::vector<Classifier> classifiers;
  if (a.classifier == "both") classifiers = {Classifier::logreg, Classifier::random_forest};
  else classifiers = {parse_classifier(a.classifier)};
  for (auto seed : a.seeds) {
    FeatureTable run = t;
    if (a.shuffle_labels) {
      Rng rng = Rng::derive(seed, 0x5eed);
      rng.shuffle(run.labels.begin(), run.labels.end());
    }
    for (auto c : classifiers) {
      const auto r = run_eval(run, c, seed, a.task, a.test_fraction);
      append_report(r, a.output);
      ctx.out << r.task << " " << r.feature_set << " " << to_string(c) << " seed " << seed << " auroc "
              << fmt(r.auroc, "%.4f") << " (train " << r.train_size << ", test " << r.test_size << ")\n";
    }
  }
  write_resolved_config(ctx, dir_of(a.output), {{"rows", t.size()}, {"features", t.width()}});
}

struct BenchArgs {
  std::string checkpoint, staged2, untrained, manifest, output;
  std::vector<std::string> inputs;
  std::size_t size = 100, embedding = 50, count = 3;
  std::uint64_t seed = 0;
};

void cmd_bench(const Context& ctx, const BenchArgs& a) {
  Models m = !a.untrained.empty() ? untrained_models(a.untrained, a.size, a.embedding, a.seed)
                                  : load_models(a.checkpoint, a.staged2);
  std::vector<Volume> vols;
  if (!a.manifest.empty() || !a.inputs.empty()) {
    auto [rows, base] = gather(ctx, a.manifest, a.inputs);
    for (const auto& r : rows) vols.push_back(load_entry(r, base));
  } else {
    for (std::size_t i = 0; i < a.count; ++i)
      vols.push_back(gen_phantom(a.seed + i, i % 2 ? PhantomClass::b : PhantomClass::a, m.size()));
  }
  for (std::size_t i = 0; i < vols.size(); ++i) check_volume(m, vols[i], "volume " + std::to_string(i));
  m.encode(vols[0].data);  // warm-up, not timed
  std::vector<double> secs;
  for (const auto& v : vols) {
    const auto t0 = std::chrono::steady_clock::now();
    m.encode(v.data);
    secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  double mean = 0, var = 0;
  for (double s : secs) mean += s / double(secs.size());
  for (double s : secs) var += (s - mean) * (s - mean) / double(std::max<std::size_t>(secs.size() - 1, 1));
  const std::string row = m.label() + "," + std::to_string(m.size()) + "," + std::to_string(secs.size()) + "," +
                          fmt(mean, "%.6f") + "," + fmt(std::sqrt(var), "%.6f") + "," + std::to_string(ctx.threads);
  ctx.out << "model,size,volumes,mean_seconds_per_volume,stddev_seconds,threads\n" << row << "\n";
  if (!a.output.empty()) {
    const bool fresh = !fs::exists(a.output);
    fs::create_directories(dir_of(a.output));
    std::ofstream f(a.output, std::ios::app);
    if (fresh) f << "model,size,volumes,mean_seconds_per_volume,stddev_seconds,threads\n";
    f << row << "\n";
    write_resolved_config(ctx, dir_of(a.output));
  }
}

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return usage;
    case ErrorKind::numeric: return numeric_failure;
    default: return data_error;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Convolutional autoencoders for brain volumes: data prep, training, encoding and evaluation", "cae"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "TOML file with option values (flags take precedence)");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  Context ctx{out, err, nullptr, 0, {}};
  app.add_option("--threads", ctx.threads, "worker threads (0 = all available; 1 = serial, deterministic)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--data-dir", ctx.data_dir, "base for relative manifest paths (default $CAE_DATA_DIR, then the manifest's directory)");

  std::function<void()> action;
  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->option_defaults()->always_capture_default();
    return s;
  };

  PrepArgs prep;
  {
    auto* s = sub("prep", "crop and downsample NIfTI/RVOL volumes to RVOL");
    s->add_option("--input", prep.inputs, "volume files");
    s->add_option("--manifest", prep.manifest, "manifest of input volumes");
    s->add_option("--output-dir", prep.output_dir)->required();
    s->add_option("--crop", prep.crop, "central cube edge")->check(CLI::PositiveNumber);
    s->add_flag("--no-downsample", prep.no_downsample, "skip the 2x downsampling");
    s->callback([&] { action = [&] { cmd_prep(ctx, prep); }; });
  }
  AugmentArgs aug;
  {
    auto* s = sub("augment", "91 rotated/translated variants per volume");
    s->add_option("--input", aug.inputs, "volume files");
    s->add_option("--manifest", aug.manifest, "manifest of input volumes");
    s->add_option("--output-dir", aug.output_dir)->required();
    s->add_flag("--on-the-fly", aug.on_the_fly, "write manifest entries (path#tag) instead of volumes");
    s->callback([&] { action = [&] { cmd_augment(ctx, aug); }; });
  }
  PhantomArgs ph;
  {
    auto* s = sub("phantom-gen", "synthetic two-class phantom volumes");
    s->add_option("--per-class", ph.per_class)->check(CLI::PositiveNumber);
    s->add_option("--size", ph.size)->check(CLI::Range(16, 1024));
    s->add_option("--seed", ph.seed);
    s->add_option("--output-dir", ph.output_dir)->required();
    s->callback([&] { action = [&] { cmd_phantom_gen(ctx, ph); }; });
  }
  TrainArgs tr;
  {
    auto* s = sub("train", "train one model on a manifest");
    s->add_option("--model", tr.model, "staged1 | staged2 | joint | 3d")->required();
    s->add_option("--manifest", tr.manifest)->required();
    s->add_option("--output", tr.output, "checkpoint path")->required();
    s->add_option("--history", tr.history, "loss CSV (default <output>.history.csv)");
    s->add_option("--staged1", tr.staged1, "staged1 checkpoint (staged2, joint)");
    s->add_option("--staged2", tr.staged2, "staged2 checkpoint (joint)");
    s->add_option("--embedding", tr.embedding, "bottleneck width")->check(CLI::PositiveNumber);
    s->add_option("--channels", tr.channels, "encoder channels, e.g. 16,32")->delimiter(',');
    s->add_option("--epochs", tr.cfg.epochs);
    s->add_option("--batch-size", tr.cfg.batch_size);
    s->add_option("--lr", tr.cfg.learning_rate);
    s->add_option("--optimizer", tr.cfg.optimizer);
    s->add_option("--seed", tr.cfg.seed);
    s->add_option("--validation-fraction", tr.cfg.validation_fraction);
    s->add_option("--checkpoint-every", tr.cfg.checkpoint_every, "epochs between checkpoints (0 = end only)");
    s->callback([&] { action = [&] { cmd_train(ctx, tr); }; });
  }
  MergeArgs mg;
  {
    auto* s = sub("merge-staged", "combine staged1 and staged2 checkpoints into a joint model");
    s->add_option("--staged1", mg.staged1)->required();
    s->add_option("--staged2", mg.staged2)->required();
    s->add_option("--output", mg.output)->required();
    s->callback([&] { action = [&] { cmd_merge(ctx, mg); }; });
  }
  EncodeArgs enc;
  {
    auto* s = sub("encode", "embedding CSV, one row per volume");
    s->add_option("--checkpoint", enc.checkpoint, "joint or 3d model, or staged1 with --staged2")->required();
    s->add_option("--staged2", enc.staged2);
    s->add_option("--manifest", enc.manifest);
    s->add_option("--input", enc.inputs);
    s->add_option("--output", enc.output)->required();
    s->callback([&] { action = [&] { cmd_encode(ctx, enc); }; });
  }
  ReconstructArgs rec;
  {
    auto* s = sub("reconstruct", "reconstruct a volume and report its MSE");
    s->add_option("--checkpoint", rec.checkpoint)->required();
    s->add_option("--staged2", rec.staged2);
    s->add_option("--input", rec.input)->required();
    s->add_option("--output", rec.output)->required();
    s->callback([&] { action = [&] { cmd_reconstruct(ctx, rec); }; });
  }
  SaliencyArgs sal;
  {
    auto* s = sub("saliency", "gradient saliency maps of embedding nodes");
    s->add_option("--checkpoint", sal.checkpoint)->required();
    s->add_option("--staged2", sal.staged2);
    s->add_option("--input", sal.input)->required();
    s->add_option("--nodes", sal.nodes)->delimiter(',');
    s->add_option("--frames", sal.frames, "Z indices to export (default: 5 evenly spaced)")->delimiter(',');
    s->add_option("--per-row", sal.per_row)->check(CLI::PositiveNumber);
    s->add_option("--output-dir", sal.output_dir)->required();
    s->callback([&] { action = [&] { cmd_saliency(ctx, sal); }; });
  }
  EvalArgs ev;
  {
    auto* s = sub("eval", "logistic regression / random forest AUROC on embeddings");
    s->add_option("--embeddings", ev.embeddings, "CSV from encode");
    s->add_option("--manifest", ev.manifest, "labels and groups for the embedding ids");
    s->add_option("--features", ev.features, "feature table CSV (features, label, group)");
    s->add_option("--classifier", ev.classifier, "logreg | rf | both");
    s->add_option("--seeds", ev.seeds, "split seeds")->delimiter(',');
    s->add_option("--task", ev.task);
    s->add_option("--feature-set", ev.feature_set);
    s->add_option("--test-fraction", ev.test_fraction);
    s->add_flag("--shuffle-labels", ev.shuffle_labels, "permutation control");
    s->add_option("--output", ev.output, "report CSV (rows are appended)")->required();
    s->callback([&] { action = [&] { cmd_eval(ctx, ev); }; });
  }
  BenchArgs bench;
  {
    auto* s = sub("bench-encode", "wall-clock seconds per encoded volume");
    s->add_option("--checkpoint", bench.checkpoint);
    s->add_option("--staged2", bench.staged2);
    s->add_option("--untrained", bench.untrained, "staged | joint | 3d: randomly initialized model");
    s->add_option("--size", bench.size, "volume size for --untrained");
    s->add_option("--embedding", bench.embedding, "bottleneck width for --untrained");
    s->add_option("--count", bench.count, "phantoms to time when no inputs are given")->check(CLI::PositiveNumber);
    s->add_option("--seed", bench.seed);
    s->add_option("--manifest", bench.manifest);
    s->add_option("--input", bench.inputs);
    s->add_option("--output", bench.output, "CSV to append the report row to");
    s->callback([&] { action = [&] { cmd_bench(ctx, bench); }; });
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  }
  ctx.command = app.get_subcommands().at(0);
#ifdef _OPENMP
  if (ctx.threads > 0) omp_set_num_threads(ctx.threads);
  if (ctx.threads == 0) ctx.threads = omp_get_max_threads();
#else
  ctx.threads = 1;
#endif
  try {
    action();
    return ok;
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return data_error;
  }
}

}  // namespace cae::cli
