#pragma once

#include <filesystem>
#include <vector>

#include "abus/model.hpp"

namespace abus {

// Binary checkpoint: magic "UNETCKPT", u32 version, the model config as
// JSON text, then each named array as (name, rank, u64 dims, little-endian
// float32 values). Round trips are bit-exact.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

// Config stored in a checkpoint, without materialising the weights.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace abus
