#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pointdif/config.hpp"
#include "pointdif/training.hpp"

namespace pointdif {

// Layout (little-endian):
//   "PDCK" | u32 version | u32 meta_len | meta (key = value text)
//   | u32 entry_count | entries: u16 name_len, name, u8 dtype, u32 rows, u32 cols
//   | payloads in entry order | u32 crc32 of every preceding byte
// The metadata carries the full run configuration (model dims, schedule,
// guidance mode) plus the optimizer step, epoch and rng state.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class TensorDtype : std::uint8_t { f32 = 1, f64 = 2 };

struct Checkpoint {
  Config config;
  TrainState state;
};

// f64 payloads keep a resumed run bit-identical; f32 halves the file for
// inference-only export.
void save_checkpoint(const TrainState& state, const Config& config,
                     const std::filesystem::path& path, TensorDtype dtype = TensorDtype::f64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies the model tensors of a checkpoint into an existing model. Every
// tensor name and shape must match; the error names the first offender.
void load_weights(Model& model, const std::filesystem::path& path);

// Order-sensitive checksum over all parameter values of the given groups.
std::uint32_t weights_checksum(const Model& model, const std::vector<ParamGroup>& groups);

}  // namespace pointdif
