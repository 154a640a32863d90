#pragma once

// Checkpoint container:
//   "ASRCKPT1\n"
//   <header byte length>\n
//   <JSON header: config, tensor manifest {name, shape, offset}, fingerprints, step, vocab map>
//   raw little-endian f32 tensor data in manifest order
// Offsets are in bytes from the start of the data section.

#include <filesystem>
#include <string>

#include "speechrl/lm_core.hpp"

namespace speechrl {

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(std::string_view text);

void save_checkpoint(const std::filesystem::path& path, const PolicyCheckpoint& ckpt);
PolicyCheckpoint load_checkpoint(const std::filesystem::path& path);

// Fingerprint over config, parameters and attached fingerprints.
std::uint64_t checkpoint_fingerprint(const PolicyCheckpoint& ckpt);

}  // namespace speechrl
