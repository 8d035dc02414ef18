#pragma once

// Training loop: alternating discriminator/generator AdamW steps over the
// four-batch transport objective, with deterministic data order, checkpoint
// cadence, and per-step metrics.
//
// Each optimization step consumes two real batches (batch indices 2s and 2s+1
// of the epoch permutation) and one pair of z draws shared by both phases:
//   D phase: generator and encoder run frozen (their subgraph carries no
//            gradient), discriminators minimize weighted_penalty - mixed_div;
//   G phase: discriminators run frozen, encoder+generator minimize mixed_div;
//            batchnorm running statistics update once, here.
// The whole trajectory is a pure function of (config, dataset, seed) for a
// fixed binary: every random draw comes from owned, snapshot-able engines.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "wxgan/checkpoint.hpp"
#include "wxgan/config.hpp"
#include "wxgan/cot_loss.hpp"
#include "wxgan/optim.hpp"

namespace wxgan {

struct StepMetrics {
  int64_t epoch = 0;  // epoch the step belongs to
  int64_t step = 0;   // global step index, 0-based
  double gen_loss = 0;
  double disc_loss = 0;
  double mixed_div = 0;  // generator-phase mixed divergence
  double penalty = 0;    // martingale penalty on the real batches
  double wall_ms = 0;    // wall time; excluded from determinism comparisons
};

struct EvalMetrics {
  // mixed transport divergence generated-vs-real on the data cost alone
  // (lambda forced to 0 so the number does not depend on discriminator state)
  double mixed_div = 0;
  double fid_gap_gen = 0;   // mean intensity inside masks minus outside, generated
  double fid_gap_real = 0;  // same gap on the real data
  double mask_swap_rate = 0;  // fraction of sequences changed (L2 > 0) by swapped context
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  // Continue from a checkpoint written under the same config (hash-checked).
  void resume(const std::string& ckpt_path);

  // Runs the remaining epochs. Writes ckpt-<epoch>.ckpt into out_dir at the
  // configured cadence and final.ckpt at the end; calls on_step after every
  // step. A non-finite value aborts with the last cadence checkpoint intact.
  void train(const std::function<void(const StepMetrics&)>& on_step);

  // One full optimization step on the given real batches; exposed for tests.
  StepMetrics step_once(const Batch& b1, const Batch& b2, int64_t epoch);

  void save(const std::string& path);

  int64_t steps_per_epoch() const { return steps_per_epoch_; }
  int64_t completed_epochs() const { return epoch_; }
  int64_t completed_steps() const { return step_; }
  uint64_t hash() const { return hash_; }
  GanModel& model() { return gan_; }
  const DatasetManifest& manifest() const { return manifest_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  std::vector<std::pair<std::string, Tensor*>> block_table();

  TrainConfig cfg_;
  DatasetManifest manifest_;
  GanModel gan_;
  AdamW opt_g_, opt_d_;
  Rng z_rng_;
  std::optional<BatchIter> iter_;
  uint64_t hash_ = 0;
  int64_t steps_per_epoch_ = 0;
  int64_t epoch_ = 0;  // completed epochs
  int64_t step_ = 0;   // completed steps
};

// Resolves a dataset argument: a manifest file path is used as-is, a
// directory is expected to contain manifest.json.
std::string resolve_manifest_path(const std::string& dataset);

// One metrics-log record (JSON object, no trailing newline). Wall time is
// intentionally excluded so the log is a pure function of (config, seeds):
// two identical runs must produce byte-identical files.
std::string metrics_json_line(const StepMetrics& m);

// Evaluation over `batches` pairs of held-out batches: discriminator-free
// mixed divergence, conditional fidelity gaps, and mask-swap sensitivity.
// Deterministic given (model state, data, seed); model state is not touched.
EvalMetrics evaluate(GanModel& gan, const DatasetManifest& data, const SinkhornConfig& base_cfg,
                     int batches, int batch_size, uint64_t seed);

// Mean in-mask minus out-of-mask intensity accumulator used by evaluate();
// exposed so tests can pin the real-vs-real identity. Channel c pairs with
// mask class c % K. Values (B,T,C,H,W), masks (B,T,K,H,W) in {0,1}.
void accumulate_fidelity(const Tensor& values, const Tensor& masks, double& in_sum, double& out_sum,
                         int64_t& in_count, int64_t& out_count);

}  // namespace wxgan
