#pragma once

// Run configuration: a UTF-8 JSON file covering the model shape, the transport
// loss, the optimizers, and the training schedule. Frame geometry (C, K, H, W,
// T) is never part of the file — it is taken from the dataset manifest when a
// model is built, so the two can not disagree.
//
// Unknown keys are rejected: a typo must fail loudly rather than silently fall
// back to a default. config_hash() fingerprints the canonical form of the
// effective config (defaults filled in); checkpoints embed it so a resume with
// a different config is refused.

#include <cstdint>
#include <string>

#include "wxgan/cot_loss.hpp"
#include "wxgan/data.hpp"
#include "wxgan/gan_core.hpp"

namespace wxgan {

struct OptimSettings {
  double lr_g = 1e-4;
  double lr_d = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct TrainConfig {
  // model shape, minus everything the dataset manifest dictates
  GanSpec model;
  SinkhornConfig sinkhorn;
  double martingale_weight = 1.0;
  OptimSettings optim;

  int epochs = 300;
  int batch_size = 8;
  int checkpoint_every = 50;  // epochs between checkpoints
  uint64_t seed = 1;
  std::string dataset;  // manifest path, or a directory containing manifest.json
  std::string out_dir = "run";

  void validate() const;  // throws ConfigError
};

// Parse/serialize. from-JSON fills omitted fields with defaults and throws
// ConfigError on unknown keys or out-of-range values.
TrainConfig train_config_from_json_text(const std::string& text, const std::string& origin);
std::string train_config_to_json_text(const TrainConfig& cfg);
TrainConfig load_train_config(const std::string& path);

// FNV-1a over the canonical (key-sorted, defaults-filled) JSON dump.
uint64_t config_hash(const TrainConfig& cfg);

// Toy dataset generation config, same conventions.
ToyGenConfig toy_config_from_json_text(const std::string& text, const std::string& origin);
ToyGenConfig load_toy_config(const std::string& path);

// Copies dataset geometry into the model spec: generator emits manifest-shaped
// frames, the encoder consumes manifest-shaped masks.
void apply_dataset_geometry(GanSpec& spec, const DatasetManifest& m);

}  // namespace wxgan
