#include "wxgan/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "json.hpp"

namespace fs = std::filesystem;

namespace wxgan {

std::string resolve_manifest_path(const std::string& dataset) {
  if (fs::is_directory(dataset)) return (fs::path(dataset) / "manifest.json").string();
  return dataset;
}

std::string metrics_json_line(const StepMetrics& m) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["step"] = m.step;
  j["gen_loss"] = m.gen_loss;
  j["disc_loss"] = m.disc_loss;
  j["mixed_div"] = m.mixed_div;
  j["penalty"] = m.penalty;
  return j.dump();  // keys serialize sorted, doubles round-trip exactly
}

Trainer::Trainer(const TrainConfig& cfg) : cfg_(cfg), z_rng_(derive_seed(cfg.seed, 2)) {
  cfg_.validate();
  manifest_ = load_manifest(resolve_manifest_path(cfg_.dataset));
  apply_dataset_geometry(cfg_.model, manifest_);
  gan_.init(cfg_.model, derive_seed(cfg_.seed, 1));
  iter_.emplace(manifest_, cfg_.batch_size, derive_seed(cfg_.seed, 3));

  AdamWConfig og;
  og.lr = cfg_.optim.lr_g;
  og.beta1 = cfg_.optim.beta1;
  og.beta2 = cfg_.optim.beta2;
  og.eps = cfg_.optim.eps;
  og.weight_decay = cfg_.optim.weight_decay;
  AdamWConfig od = og;
  od.lr = cfg_.optim.lr_d;
  opt_g_.init(gan_.params_g(), og);
  opt_d_.init(gan_.params_d(), od);

  hash_ = config_hash(cfg_);
  steps_per_epoch_ = iter_->batches_per_epoch() / 2;  // two real batches per step
  if (steps_per_epoch_ < 1)
    throw ConfigError("dataset provides fewer than two batches of " + std::to_string(cfg_.batch_size) +
                      " per epoch; nothing to train on");
}

std::vector<std::pair<std::string, Tensor*>> Trainer::block_table() {
  std::vector<std::pair<std::string, Tensor*>> blocks;
  for (Parameter* p : gan_.params_all()) blocks.emplace_back(p->name, &p->value);
  for (auto& [name, tensor] : gan_.buffers()) blocks.emplace_back(name, tensor);
  opt_g_.collect_state(blocks);
  opt_d_.collect_state(blocks);
  return blocks;
}

void Trainer::save(const std::string& path) {
  fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  CheckpointState st;
  st.config_hash = hash_;
  st.epoch = epoch_;
  st.step = step_;
  st.rng["z"] = z_rng_.state();
  st.counters["opt_g_steps"] = opt_g_.step_count();
  st.counters["opt_d_steps"] = opt_d_.step_count();
  save_checkpoint(path, st, block_table());
}

void Trainer::resume(const std::string& ckpt_path) {
  CheckpointState st = load_checkpoint(ckpt_path, hash_, block_table(), /*allow_extra=*/false);
  auto rng_it = st.rng.find("z");
  if (rng_it == st.rng.end()) throw DataError("checkpoint " + ckpt_path + " lacks the z RNG state");
  auto cg = st.counters.find("opt_g_steps");
  auto cd = st.counters.find("opt_d_steps");
  if (cg == st.counters.end() || cd == st.counters.end())
    throw DataError("checkpoint " + ckpt_path + " lacks optimizer step counters");
  epoch_ = st.epoch;
  step_ = st.step;
  z_rng_.set_state(rng_it->second);
  opt_g_.set_step_count(cg->second);
  opt_d_.set_step_count(cd->second);
}

StepMetrics Trainer::step_once(const Batch& b1, const Batch& b2, int64_t epoch) {
  auto t0 = std::chrono::steady_clock::now();
  int B = cfg_.batch_size, T = manifest_.window_T;
  // one z pair per step, shared by both phases
  Tensor z1 = gan_.sample_z(z_rng_, B, T), z2 = gan_.sample_z(z_rng_, B, T);

  StepMetrics m;
  m.epoch = epoch;
  m.step = step_;

  {  // discriminator phase: the generative path runs frozen, so the fakes
     // need no explicit detach -- their subgraph carries no gradient
    Tape t;
    FwdMode frozen{false, true, false};
    int ctx1 = gan_.encoder.encode(t, t.leaf(b1.mask), frozen);
    int ctx2 = gan_.encoder.encode(t, t.leaf(b2.mask), frozen);
    int y1 = gan_.gen.generate(t, t.leaf(z1), pool_context(t, ctx1, gan_.spec().gen_pool), frozen);
    int y2 = gan_.gen.generate(t, t.leaf(z2), pool_context(t, ctx2, gan_.spec().gen_pool), frozen);
    cot::CotBatchNodes nodes{t.leaf(b1.grid), t.leaf(b2.grid), y1, y2, ctx1, ctx2};
    cot::CotLossParts parts = cot::discriminator_loss(t, gan_, nodes, cfg_.sinkhorn, cfg_.martingale_weight);
    opt_d_.zero_grad();
    t.backward(parts.loss);
    t.collect_param_grads();
    opt_d_.step();
    m.disc_loss = double(t.val(parts.loss).at(0));
  }
  {  // generator phase: discriminators frozen, encoder trains with the
     // generator; batchnorm running statistics update once per step, here
    Tape t;
    FwdMode train{true, true, true};
    int ctx1 = gan_.encoder.encode(t, t.leaf(b1.mask), train);
    int ctx2 = gan_.encoder.encode(t, t.leaf(b2.mask), train);
    int y1 = gan_.gen.generate(t, t.leaf(z1), pool_context(t, ctx1, gan_.spec().gen_pool), train);
    int y2 = gan_.gen.generate(t, t.leaf(z2), pool_context(t, ctx2, gan_.spec().gen_pool), train);
    cot::CotBatchNodes nodes{t.leaf(b1.grid), t.leaf(b2.grid), y1, y2, ctx1, ctx2};
    cot::CotLossParts parts = cot::generator_loss(t, gan_, nodes, cfg_.sinkhorn);
    opt_g_.zero_grad();
    t.backward(parts.loss);
    t.collect_param_grads();
    opt_g_.step();
    m.gen_loss = double(t.val(parts.loss).at(0));
    m.mixed_div = double(t.val(parts.mixed_div).at(0));
    m.penalty = double(t.val(parts.penalty).at(0));
  }

  auto t1 = std::chrono::steady_clock::now();
  m.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return m;
}

void Trainer::train(const std::function<void(const StepMetrics&)>& on_step) {
  fs::create_directories(cfg_.out_dir);
  try {
    while (epoch_ < cfg_.epochs) {
      for (int64_t s = 0; s < steps_per_epoch_; ++s) {
        Batch b1 = iter_->get(epoch_, 2 * s);
        Batch b2 = iter_->get(epoch_, 2 * s + 1);
        StepMetrics m = step_once(b1, b2, epoch_);
        ++step_;  // exactly one metrics record per counted step
        if (on_step) on_step(m);
      }
      ++epoch_;
      if (epoch_ % cfg_.checkpoint_every == 0 && epoch_ < cfg_.epochs)
        save((fs::path(cfg_.out_dir) / ("ckpt-" + std::to_string(epoch_) + ".ckpt")).string());
    }
  } catch (const NumericError& e) {
    // leave the last cadence checkpoint as the surviving state
    std::fprintf(stderr, "training aborted at epoch %lld, step %lld: %s\n",
                 static_cast<long long>(epoch_), static_cast<long long>(step_), e.what());
    throw;
  }
  save((fs::path(cfg_.out_dir) / "final.ckpt").string());
}

// ---------------------------------------------------------------- evaluation

void accumulate_fidelity(const Tensor& values, const Tensor& masks, double& in_sum, double& out_sum,
                         int64_t& in_count, int64_t& out_count) {
  if (values.ndim() != 5 || masks.ndim() != 5) throw ShapeError("accumulate_fidelity: wants (B,T,C,H,W)");
  int B = values.dim(0), T = values.dim(1), C = values.dim(2), H = values.dim(3), W = values.dim(4);
  int K = masks.dim(2);
  if (masks.dim(0) != B || masks.dim(1) != T || masks.dim(3) != H || masks.dim(4) != W)
    throw ShapeError("accumulate_fidelity: mask shape does not match values");
  const float* v = values.ptr();
  const float* mk = masks.ptr();
  int64_t hw = int64_t(H) * W;
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < C; ++c) {
        const float* vp = v + (((int64_t(b) * T + t) * C + c) * hw);
        const float* mp = mk + (((int64_t(b) * T + t) * K + c % K) * hw);
        for (int64_t i = 0; i < hw; ++i) {
          if (mp[i] >= 0.5f) {
            in_sum += double(vp[i]);
            ++in_count;
          } else {
            out_sum += double(vp[i]);
            ++out_count;
          }
        }
      }
}

namespace {

// row b of the result is row (b+1) mod B of the input
Tensor rotate_sequences(const Tensor& x) {
  Tensor out(x.shape);
  int B = x.dim(0);
  int64_t row = x.numel() / B;
  for (int b = 0; b < B; ++b)
    std::memcpy(out.ptr() + int64_t(b) * row, x.ptr() + (int64_t(b + 1) % B) * row, size_t(row) * 4);
  return out;
}

double finish_gap(double in_sum, double out_sum, int64_t in_count, int64_t out_count) {
  if (in_count == 0 || out_count == 0)
    throw DataError("fidelity gap undefined: a mask side is empty over the evaluation set");
  return in_sum / double(in_count) - out_sum / double(out_count);
}

}  // namespace

EvalMetrics evaluate(GanModel& gan, const DatasetManifest& data, const SinkhornConfig& base_cfg,
                     int batches, int batch_size, uint64_t seed) {
  BatchIter it(data, batch_size, derive_seed(seed, 1));
  Rng zrng(derive_seed(seed, 2));
  int64_t pairs = it.batches_per_epoch() / 2;
  int64_t steps = std::min<int64_t>(batches, pairs);
  if (steps < 1) throw ConfigError("evaluate: dataset provides fewer than two batches");

  SinkhornConfig cfg = base_cfg;
  cfg.lambda = 0.0;  // data-cost-only divergence: comparable across checkpoints

  double div_sum = 0;
  double in_g = 0, out_g = 0, in_r = 0, out_r = 0;
  int64_t cin_g = 0, cout_g = 0, cin_r = 0, cout_r = 0;
  int64_t swapped = 0, total = 0;

  int T = data.window_T;
  for (int64_t s = 0; s < steps; ++s) {
    Batch b1 = it.get(0, 2 * s);
    Batch b2 = it.get(0, 2 * s + 1);
    Tensor z1 = gan.sample_z(zrng, batch_size, T);
    Tensor z2 = gan.sample_z(zrng, batch_size, T);
    Tensor rot_mask = rotate_sequences(b1.mask);

    Tape t;
    int ctx1 = gan.encoder.encode(t, t.leaf(b1.mask), kEvalMode);
    int ctx2 = gan.encoder.encode(t, t.leaf(b2.mask), kEvalMode);
    int ctxr = gan.encoder.encode(t, t.leaf(rot_mask), kEvalMode);
    int y1 = gan.gen.generate(t, t.leaf(z1), pool_context(t, ctx1, gan.spec().gen_pool), kEvalMode);
    int y2 = gan.gen.generate(t, t.leaf(z2), pool_context(t, ctx2, gan.spec().gen_pool), kEvalMode);
    int yr = gan.gen.generate(t, t.leaf(z1), pool_context(t, ctxr, gan.spec().gen_pool), kEvalMode);
    int x1 = t.leaf(b1.grid);
    int x2 = t.leaf(b2.grid);
    auto plain = [&](int node) { return cot::SeqFeats{cot::flatten_seq(t, node), -1, -1}; };
    int div = cot::mixed_divergence(t, plain(x1), plain(x2), plain(y1), plain(y2), cfg);

    // all tape reads happen after the last op so no reference can dangle
    div_sum += double(t.val(div).at(0));
    accumulate_fidelity(t.val(y1), b1.mask, in_g, out_g, cin_g, cout_g);
    accumulate_fidelity(t.val(y2), b2.mask, in_g, out_g, cin_g, cout_g);
    accumulate_fidelity(b1.grid, b1.mask, in_r, out_r, cin_r, cout_r);
    accumulate_fidelity(b2.grid, b2.mask, in_r, out_r, cin_r, cout_r);

    const Tensor& v1 = t.val(y1);
    const Tensor& vr = t.val(yr);
    int64_t row = v1.numel() / batch_size;
    for (int b = 0; b < batch_size; ++b) {
      bool changed = false;
      for (int64_t i = 0; i < row && !changed; ++i)
        changed = v1.at(int64_t(b) * row + i) != vr.at(int64_t(b) * row + i);
      swapped += changed ? 1 : 0;
      ++total;
    }
  }

  EvalMetrics em;
  em.mixed_div = div_sum / double(steps);
  em.fid_gap_gen = finish_gap(in_g, out_g, cin_g, cout_g);
  em.fid_gap_real = finish_gap(in_r, out_r, cin_r, cout_r);
  em.mask_swap_rate = double(swapped) / double(total);
  return em;
}

}  // namespace wxgan
