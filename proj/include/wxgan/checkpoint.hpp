#pragma once

// Checkpoint container: one file holding a JSON header and raw little-endian
// f32 blocks.
//
//   [u64 LE: header byte count][header JSON][block 0][block 1]...
//
// The header records format version, config fingerprint, progress counters,
// named RNG engine states, and for every block its name, shape, and byte
// offset into the data section. Blocks cover model parameters, batchnorm
// running statistics, and optimizer moments, all addressed by name, so a
// reload restores training state exactly (bit-for-bit values).

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wxgan/tensor.hpp"

namespace wxgan {

struct CheckpointState {
  int format_version = 1;
  uint64_t config_hash = 0;
  int64_t epoch = 0;  // completed epochs
  int64_t step = 0;   // completed optimization steps (one D + one G phase each)
  std::map<std::string, std::string> rng;       // named engine states
  std::map<std::string, int64_t> counters;      // e.g. per-optimizer step counts
};

void save_checkpoint(const std::string& path, const CheckpointState& st,
                     const std::vector<std::pair<std::string, Tensor*>>& blocks);

// Fills every requested tensor from its same-named block (exact shape match
// required -> DataError). When `expect_hash` is nonzero it must equal the
// stored config hash -> ConfigError. `allow_extra` permits blocks in the file
// that the caller did not request (e.g. optimizer moments when only the model
// is being loaded for sampling); otherwise the block sets must match exactly.
CheckpointState load_checkpoint(const std::string& path, uint64_t expect_hash,
                                const std::vector<std::pair<std::string, Tensor*>>& blocks,
                                bool allow_extra = false);

}  // namespace wxgan
