#pragma once

// Dataset pipeline: raw grid/mask records on disk, manifest with window
// addressing and normalization statistics, toy-data generator, and a
// deterministic batch iterator.
//
// On-disk record format (all little-endian, row-major):
//   <id>.grid.f32  raw f32, frame order T, C, H, W
//   <id>.mask.u8   raw u8 in {0,1}, frame order T, K, H, W
// A directory of records carries a `dataset.json` descriptor (shapes, class
// names, optional file list); `manifest.json` is the built manifest.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wxgan/common.hpp"
#include "wxgan/tensor.hpp"

namespace wxgan {

struct GridSequence {
  Tensor values;  // (T,C,H,W)
  double time_step_hours = 6.0;
};

struct EventMaskSequence {
  Tensor values;  // (T,K,H,W), entries in {0,1}
  std::vector<std::string> class_names;
};

struct SourceFile {
  std::string id;  // relative to the dataset directory, without extension
  int64_t frames = 0;
};

struct DatasetManifest {
  int format_version = 1;
  int window_T = 0;
  int stride = 0;
  int C = 0, K = 0, H = 0, W = 0;
  double time_step_hours = 6.0;
  std::vector<std::string> class_names;
  std::vector<double> mean, stddev;  // per grid channel, over all frames
  std::vector<SourceFile> files;
  std::string dir;  // base directory of the raw files (not serialized)
  int64_t record_count = 0;

  int64_t total_frames() const {
    int64_t n = 0;
    for (const auto& f : files) n += f.frames;
    return n;
  }
};

// Scans `raw_dir` (descriptor + record files), computes per-channel statistics
// over all frames, and enumerates floor((N_frames - window_T)/stride) + 1
// windows over the concatenated frame stream.
DatasetManifest build_manifest(const std::string& raw_dir, int window_T, int stride);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// Window `index` over the concatenated frames: grid z-scored per channel with
// manifest statistics, mask raw binary.
std::pair<GridSequence, EventMaskSequence> read_window(const DatasetManifest& m, int64_t index);

// Inverse of read_window's normalization; trailing dims of `values` must be
// (C,H,W), any leading dims allowed.
void denormalize_grid(const DatasetManifest& m, Tensor& values);

struct ToyGenConfig {
  int H = 16, W = 16, T = 8, K = 1;
  int sequences = 512;
  double blob_radius = 3.0;  // half-peak radius, pixels
  double blob_speed = 1.0;   // pixels per step
  double noise_level = 0.05;
  uint64_t seed = 1;

  void validate() const;  // throws ConfigError
};

// One Gaussian blob per class channel, constant velocity, reflecting walls;
// channel k's mask is exactly (grid_k >= 0.5) on the stored f32 values, so the
// conditioning signal is consistent by construction. Writes records, the
// descriptor, and manifest.json (window_T = stride = cfg.T) into out_dir.
DatasetManifest make_toy_dataset(const ToyGenConfig& cfg, const std::string& out_dir);

// Writes (grid, mask) pairs as one record each plus the dataset descriptor,
// then builds and saves manifest.json with window_T = stride = T (one window
// per record). Grids must hold stored (physical) units, not z-scores; the
// manifest statistics are recomputed from the written files. Class names are
// taken from the first mask (or synthesized when empty).
DatasetManifest write_sequence_dataset(const std::string& out_dir, const std::vector<GridSequence>& grids,
                                       const std::vector<EventMaskSequence>& masks);

struct Batch {
  Tensor grid;  // (B,T,C,H,W) normalized
  Tensor mask;  // (B,T,K,H,W)
};

// Deterministic epoch iteration: the permutation is a pure function of
// (shuffle_seed, epoch); the final short batch is dropped.
class BatchIter {
 public:
  BatchIter(const DatasetManifest& m, int batch_size, uint64_t shuffle_seed);

  int64_t batches_per_epoch() const { return m_->record_count / batch_; }
  int batch_size() const { return batch_; }

  std::vector<int64_t> epoch_order(int64_t epoch) const;
  Batch get(int64_t epoch, int64_t batch_idx) const;

 private:
  const DatasetManifest* m_;
  int batch_ = 0;
  uint64_t seed_ = 0;
};

}  // namespace wxgan
