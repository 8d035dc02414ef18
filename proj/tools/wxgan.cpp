// Command-line front end for the conditional spatio-temporal GAN pipeline:
// toy-data generation, training, sampling, evaluation, and montage rendering.
//
// Exit codes (stable): 0 success, 2 configuration error (bad flags, bad
// config file, checkpoint/config mismatch), 3 data error (missing or corrupt
// dataset/checkpoint/image source), 4 numeric failure (non-finite values).
//
// The WXGAN_THREADS environment variable caps worker threads; results are
// identical for every thread count (each output element is computed by a
// single thread with a fixed summation order).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "wxgan/checkpoint.hpp"
#include "wxgan/config.hpp"
#include "wxgan/data.hpp"
#include "wxgan/render.hpp"
#include "wxgan/train.hpp"

namespace fs = std::filesystem;
using namespace wxgan;

namespace {

struct SeedOpt {
  uint64_t value = 0;
  bool set = false;
};

void add_seed(CLI::App* cmd, SeedOpt& seed, const char* what) {
  cmd->add_option_function<uint64_t>(
         "--seed", [&seed](uint64_t v) { seed.value = v; seed.set = true; }, what);
}

int cmd_gen_toy(const std::string& config_path, const SeedOpt& seed, const std::string& out) {
  ToyGenConfig cfg = load_toy_config(config_path);
  if (seed.set) cfg.seed = seed.value;
  DatasetManifest m = make_toy_dataset(cfg, out);
  std::printf("wrote %lld records to %s\n", (long long)m.files.size(), out.c_str());
  std::printf("windows: %lld (window_T=%d, stride=%d), grid %dx%dx%d, %d mask class%s\n",
              (long long)m.record_count, m.window_T, m.stride, m.C, m.H, m.W, m.K, m.K == 1 ? "" : "es");
  for (int c = 0; c < m.C; ++c)
    std::printf("channel %d: mean=%.6f stddev=%.6f\n", c, m.mean[size_t(c)], m.stddev[size_t(c)]);
  return 0;
}

int cmd_train(const std::string& config_path, const SeedOpt& seed, const std::string& out,
              const std::string& resume) {
  TrainConfig cfg = load_train_config(config_path);
  if (seed.set) cfg.seed = seed.value;
  if (!out.empty()) cfg.out_dir = out;

  Trainer tr(cfg);
  if (!resume.empty()) {
    tr.resume(resume);
    std::fprintf(stderr, "resumed from %s at epoch %lld\n", resume.c_str(), (long long)tr.completed_epochs());
  }

  fs::create_directories(cfg.out_dir);
  // append so a resumed run extends the same log rather than erasing history
  std::ofstream log(fs::path(cfg.out_dir) / "metrics.jsonl", std::ios::app);
  if (!log) throw DataError("cannot open metrics log in " + cfg.out_dir);

  const int64_t per_epoch = tr.steps_per_epoch();
  double epoch_ms = 0;
  tr.train([&](const StepMetrics& m) {
    log << metrics_json_line(m) << "\n";
    epoch_ms += m.wall_ms;
    if (m.step % per_epoch == per_epoch - 1) {
      std::fprintf(stderr, "epoch %lld/%d  gen=%.6f disc=%.6f mixed=%.6f penalty=%.6f  (%.1f ms/step)\n",
                   (long long)m.epoch + 1, cfg.epochs, m.gen_loss, m.disc_loss, m.mixed_div, m.penalty,
                   epoch_ms / double(per_epoch));
      epoch_ms = 0;
      log.flush();
    }
  });
  if (!log) throw DataError("failed writing metrics log in " + cfg.out_dir);
  std::printf("trained %lld epochs (%lld steps); final checkpoint: %s\n", (long long)tr.completed_epochs(),
              (long long)tr.completed_steps(), (fs::path(cfg.out_dir) / "final.ckpt").string().c_str());
  return 0;
}

int cmd_sample(const std::string& config_path, const std::string& ckpt, const std::string& mask_src,
               int64_t count, const SeedOpt& seed, const std::string& out) {
  TrainConfig cfg = load_train_config(config_path);
  Trainer tr(cfg);  // builds the model against the training dataset's geometry
  tr.resume(ckpt);

  DatasetManifest mm = load_manifest(resolve_manifest_path(mask_src));
  const GanSpec& spec = tr.model().spec();
  if (mm.K != spec.encoder.K)
    throw ConfigError("mask source has " + std::to_string(mm.K) + " classes, model expects " +
                      std::to_string(spec.encoder.K));
  if (mm.H != spec.gen.H || mm.W != spec.gen.W)
    throw ConfigError("mask source frames are " + std::to_string(mm.H) + "x" + std::to_string(mm.W) +
                      ", model expects " + std::to_string(spec.gen.H) + "x" + std::to_string(spec.gen.W));
  if (count < 1 || count > mm.record_count)
    throw ConfigError("count must be in [1, " + std::to_string(mm.record_count) + "] (windows available)");

  const int T = mm.window_T, K = mm.K, H = mm.H, W = mm.W, C = spec.gen.C;
  Rng zr(seed.set ? seed.value : 1);
  std::vector<GridSequence> grids;
  std::vector<EventMaskSequence> masks;
  for (int64_t i = 0; i < count; ++i) {
    auto [real, mask] = read_window(mm, i);
    (void)real;  // only the conditioning masks are consumed
    Tensor mb = mask.values;
    mb.shape = {1, T, K, H, W};

    Tape t;
    int ctx = tr.model().encoder.encode(t, t.leaf(mb), kEvalMode);
    Tensor z = tr.model().sample_z(zr, 1, T);
    int y = tr.model().gen.generate(t, t.leaf(z), pool_context(t, ctx, spec.gen_pool), kEvalMode);

    Tensor gen = t.val(y);  // copy out; generated values live in z-score space
    gen.shape = {T, C, H, W};
    denormalize_grid(tr.manifest(), gen);  // back to the training data's stored units
    grids.push_back(GridSequence{std::move(gen), mm.time_step_hours});
    masks.push_back(std::move(mask));
  }

  DatasetManifest written = write_sequence_dataset(out, grids, masks);
  std::printf("wrote %lld generated sequences to %s\n", (long long)written.record_count, out.c_str());
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt, const std::string& data,
             int64_t batches, const SeedOpt& seed) {
  TrainConfig cfg = load_train_config(config_path);
  Trainer tr(cfg);
  if (!ckpt.empty()) tr.resume(ckpt);

  DatasetManifest dm = data.empty() ? tr.manifest() : load_manifest(resolve_manifest_path(data));
  EvalMetrics m = evaluate(tr.model(), dm, cfg.sinkhorn, batches, cfg.batch_size,
                           seed.set ? seed.value : 1);
  nlohmann::json j;
  j["mixed_div"] = m.mixed_div;
  j["fid_gap_gen"] = m.fid_gap_gen;
  j["fid_gap_real"] = m.fid_gap_real;
  j["mask_swap_rate"] = m.mask_swap_rate;
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

int cmd_render(const std::string& config_path, const std::string& out) {
  RenderSpec spec = load_render_spec(config_path);
  if (!out.empty()) spec.out = out;
  render_to_file(spec);
  std::printf("wrote %s\n", spec.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conditional spatio-temporal GAN pipeline"};
  app.require_subcommand(1);

  std::string config_path, out, resume, ckpt, mask_src, data;
  SeedOpt seed;
  int64_t count = 1, batches = 4;

  CLI::App* gen_toy = app.add_subcommand("gen-toy", "generate a toy blob dataset");
  gen_toy->add_option("--config", config_path, "toy dataset config (JSON)")->required();
  gen_toy->add_option("--out", out, "output dataset directory")->required();
  add_seed(gen_toy, seed, "override the config's seed");

  CLI::App* train = app.add_subcommand("train", "train from a config");
  train->add_option("--config", config_path, "training config (JSON)")->required();
  train->add_option("--out", out, "override the config's output directory");
  train->add_option("--resume", resume, "checkpoint to continue from");
  add_seed(train, seed, "override the config's seed");

  CLI::App* sample = app.add_subcommand("sample", "generate sequences conditioned on stored masks");
  sample->add_option("--config", config_path, "training config (JSON)")->required();
  sample->add_option("--ckpt", ckpt, "model checkpoint")->required();
  sample->add_option("--masks", mask_src, "dataset supplying conditioning masks")->required();
  sample->add_option("--count", count, "sequences to generate (default 1)");
  sample->add_option("--out", out, "output dataset directory")->required();
  add_seed(sample, seed, "noise seed (default 1)");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint against real data");
  eval_cmd->add_option("--config", config_path, "training config (JSON)")->required();
  eval_cmd->add_option("--ckpt", ckpt, "model checkpoint (omit to evaluate the fresh init)");
  eval_cmd->add_option("--data", data, "dataset to compare against (default: the config's dataset)");
  eval_cmd->add_option("--batches", batches, "evaluation batch pairs (default 4)");
  add_seed(eval_cmd, seed, "evaluation seed (default 1)");

  CLI::App* render = app.add_subcommand("render", "render a montage from a render spec");
  render->add_option("--config", config_path, "render spec (JSON)")->required();
  render->add_option("--out", out, "override the output path given in the render config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // bad usage is a configuration error
  }

  try {
    if (gen_toy->parsed()) return cmd_gen_toy(config_path, seed, out);
    if (train->parsed()) return cmd_train(config_path, seed, out, resume);
    if (sample->parsed()) return cmd_sample(config_path, ckpt, mask_src, count, seed, out);
    if (eval_cmd->parsed()) return cmd_eval(config_path, ckpt, data, batches, seed);
    if (render->parsed()) return cmd_render(config_path, out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
