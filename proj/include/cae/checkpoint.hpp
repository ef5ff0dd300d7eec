#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "cae/model.hpp"
#include "cae/trainer.hpp"

namespace cae {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelGraph<float> model;
  std::optional<AdamState> optimizer;
  std::map<std::string, std::string> metadata;  // epoch, best_val_mse, seed, ...
};

// Text manifest (magic line, version, descriptor, metadata, tensor table,
// checksums) terminated by "end\n", then raw little-endian float32 payloads in
// table order.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);

// Errors: bad_magic, version_mismatch (checked before anything else in the
// header), integrity (checksum), truncated (payload shorter than the table),
// inconsistent (tensor names/shapes disagree with the descriptor).
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cae
