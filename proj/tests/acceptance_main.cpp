// Acceptance gate: every primary requirement is exercised at its stated
// tolerance and reported as one [PASS]/[FAIL] line. Exit code is the number
// of failed criteria. Pass criterion numbers as arguments to run a subset
// (default: all seven).
//
//   1  gradient fidelity (per layer type and the full composed objective)
//   2  entropic transport solver correctness
//   3  causality of every sequence module + martingale penalty null case
//   4  decoupled weight decay semantics of the optimizer
//   5  conditional training on the toy dataset (the long run)
//   6  reproducibility and checkpoint persistence
//   7  montage renderer contract

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "testutil.hpp"
#include "wxgan/config.hpp"
#include "wxgan/cot_loss.hpp"
#include "wxgan/data.hpp"
#include "wxgan/optim.hpp"
#include "wxgan/render.hpp"
#include "wxgan/train.hpp"

using namespace wxgan;
using testutil::FdReport;
using testutil::random_tensor;
namespace fs = std::filesystem;

#ifndef WXGAN_BIN
#error "WXGAN_BIN must point at the CLI binary"
#endif

namespace {

// ---------------------------------------------------------------- scaffolding

struct Outcome {
  bool pass = true;
  std::string detail;
};

struct Check {
  bool ok = true;
  std::string fails;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      if (!fails.empty()) fails += "; ";
      fails += what;
    }
  }
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("wxgan_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor random_binary(std::vector<int> shape, Rng& rng, double p = 0.2) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform() < p ? 1.0f : 0.0f;
  return t;
}

// the model used by the gradient, causality, and reproducibility criteria:
// small enough that finite differences over every parameter stay fast
GanSpec tiny_gan_spec() {
  GanSpec s;
  s.encoder.K = 1;
  s.encoder.conv_channels = {2, 3, 3};
  s.encoder.lstm1_hidden = 3;
  s.encoder.d_c = 2;
  s.gen.d_z = 2;
  s.gen.d_c = 2;
  s.gen.C = 1;
  s.gen.H = 8;
  s.gen.W = 8;
  s.gen.lstm_hidden = 3;
  s.gen.seed_channels = 2;
  s.gen.mid_channels = 2;
  s.disc.C = 1;
  s.disc.d_c = 2;
  s.disc.conv_channels = {2, 3};
  s.disc.lstm_hidden = 3;
  s.disc.J = 2;
  return s;
}

// the model used by the training criterion: sized so 300 epochs over 512
// sequences of 16x16x8 frames finish comfortably inside the time budget
GanSpec small_gan_spec() {
  GanSpec s;
  s.encoder.K = 1;
  s.encoder.conv_channels = {4, 6, 8};
  s.encoder.lstm1_hidden = 8;
  s.encoder.d_c = 8;
  s.gen.d_z = 8;
  s.gen.d_c = 8;
  s.gen.C = 1;
  s.gen.H = 16;
  s.gen.W = 16;
  s.gen.lstm_hidden = 12;
  s.gen.seed_channels = 6;
  s.gen.mid_channels = 6;
  s.disc.C = 1;
  s.disc.d_c = 8;
  s.disc.conv_channels = {4, 8};
  s.disc.lstm_hidden = 8;
  s.disc.J = 8;
  return s;
}

int64_t param_count(GanModel& g) {
  int64_t n = 0;
  for (Parameter* p : g.params_all()) n += p->value.numel();
  return n;
}

// ------------------------------------------------- criterion 1: gradients

struct WorstCase {
  std::string name;
  double max_rel = -1.0;
};

void merge_report(Check& c, WorstCase& worst, const std::string& name, const FdReport& r) {
  c.expect(r.coords > 0, name + ": no coordinates checked");
  c.expect(r.q95 <= 1e-3, fmt("%s: 95th-percentile rel err %.2e > 1e-3", name.c_str(), r.q95));
  c.expect(r.max_rel <= 1e-2, fmt("%s: max rel err %.2e > 1e-2", name.c_str(), r.max_rel));
  if (r.max_rel > worst.max_rel) worst = {name, r.max_rel};
}

Outcome c1_gradient_fidelity() {
  auto start = std::chrono::steady_clock::now();
  Check c;
  WorstCase worst;

  auto sqloss = [](TapeT<double>& t, int y) { return ops::sum_all(t, ops::mul(t, y, y)); };

  {  // strided, padded convolution: parameters and input
    Rng rng(101);
    Conv2d conv;
    conv.init("c", rng, 3, 2, 3, 2, 1);
    TensorT<double> x = random_tensor<double>({2, 2, 8, 8}, rng);
    auto build = [&](TapeT<double>& t) { return sqloss(t, conv.fwd(t, t.leaf(x), true)); };
    merge_report(c, worst, "conv2d params", testutil::fd_check_params(build, {&conv.w, &conv.b}, 1e-4));
    auto build_in = [&](TapeT<double>& t, const std::vector<TensorT<double>>& ins, bool ng) {
      return sqloss(t, conv.fwd(t, t.leaf(ins[0], ng), false));
    };
    merge_report(c, worst, "conv2d input", testutil::fd_check_inputs(build_in, {x}, 1e-4));
  }
  {  // stride-2 transposed convolution: parameters and input
    Rng rng(102);
    ConvTranspose2d dc;
    dc.init("d", rng, 3, 2, 4, 2, 1);
    TensorT<double> x = random_tensor<double>({2, 3, 4, 4}, rng);
    auto build = [&](TapeT<double>& t) { return sqloss(t, dc.fwd(t, t.leaf(x), true)); };
    merge_report(c, worst, "conv2d_transpose params", testutil::fd_check_params(build, {&dc.w, &dc.b}, 1e-4));
    auto build_in = [&](TapeT<double>& t, const std::vector<TensorT<double>>& ins, bool ng) {
      return sqloss(t, dc.fwd(t, t.leaf(ins[0], ng), false));
    };
    merge_report(c, worst, "conv2d_transpose input", testutil::fd_check_inputs(build_in, {x}, 1e-4));
  }
  {  // batch normalization on batch statistics
    Rng rng(103);
    BatchNorm bn;
    bn.init("b", 3);
    // move the affine away from the (1, 0) init so its gradients are generic
    for (int64_t i = 0; i < 3; ++i) {
      bn.gamma.value.at(i) = float(0.5 + 0.3 * double(i));
      bn.beta.value.at(i) = float(0.1 * double(i) - 0.1);
    }
    TensorT<double> x = random_tensor<double>({4, 3, 3, 3}, rng);
    auto build = [&](TapeT<double>& t) { return sqloss(t, bn.fwd(t, t.leaf(x), true, true, false)); };
    merge_report(c, worst, "batchnorm params", testutil::fd_check_params(build, {&bn.gamma, &bn.beta}, 1e-4));
    auto build_in = [&](TapeT<double>& t, const std::vector<TensorT<double>>& ins, bool ng) {
      return sqloss(t, bn.fwd(t, t.leaf(ins[0], ng), false, true, false));
    };
    merge_report(c, worst, "batchnorm input", testutil::fd_check_inputs(build_in, {x}, 1e-4));
  }
  {  // linear projection
    Rng rng(104);
    Linear lin;
    lin.init("l", rng, 5, 4);
    TensorT<double> x = random_tensor<double>({3, 5}, rng);
    auto build = [&](TapeT<double>& t) { return sqloss(t, lin.fwd(t, t.leaf(x), true)); };
    merge_report(c, worst, "linear params", testutil::fd_check_params(build, {&lin.w, &lin.b}, 1e-4));
    auto build_in = [&](TapeT<double>& t, const std::vector<TensorT<double>>& ins, bool ng) {
      return sqloss(t, lin.fwd(t, t.leaf(ins[0], ng), false));
    };
    merge_report(c, worst, "linear input", testutil::fd_check_inputs(build_in, {x}, 1e-4));
  }
  {  // recurrent cell unrolled over a short sequence
    Rng rng(105);
    LSTM lstm;
    lstm.init("r", rng, 3, 4);
    TensorT<double> x = random_tensor<double>({2, 4, 3}, rng);
    std::vector<Parameter*> ps;
    lstm.collect(ps);
    auto build = [&](TapeT<double>& t) { return sqloss(t, lstm.seq(t, t.leaf(x), true)); };
    merge_report(c, worst, "lstm params", testutil::fd_check_params(build, ps, 1e-4));
    auto build_in = [&](TapeT<double>& t, const std::vector<TensorT<double>>& ins, bool ng) {
      return sqloss(t, lstm.seq(t, t.leaf(ins[0], ng), false));
    };
    merge_report(c, worst, "lstm input", testutil::fd_check_inputs(build_in, {x}, 1e-4));
  }

  // full composition: masks -> context -> generated frames -> mixed transport
  // divergence, differentiated by each side's parameters in turn. Central
  // differences need a smooth neighborhood, so seeds are scanned for the
  // largest margin around the kinked activations and the step sized below it.
  GanSpec spec = tiny_gan_spec();
  GanModel gan;
  int64_t n_params = 0;
  SinkhornConfig cfg;
  cfg.eps = 0.5;
  cfg.iters = 8;
  {
    TensorT<double> x1, x2, mask1, mask2, z1, z2;
    auto build = [&](TapeT<double>& t) {
      FwdMode m{true, true, false};
      int ctx1 = gan.encoder.encode(t, t.leaf(mask1), m);
      int ctx2 = gan.encoder.encode(t, t.leaf(mask2), m);
      int y = gan.gen.generate(t, t.leaf(z1), pool_context(t, ctx1, ContextPool::kLast), m);
      int yp = gan.gen.generate(t, t.leaf(z2), pool_context(t, ctx2, ContextPool::kLast), m);
      cot::CotBatchNodes b{t.leaf(x1), t.leaf(x2), y, yp, ctx1, ctx2};
      return cot::generator_loss(t, gan, b, cfg).loss;
    };
    auto setup = [&](uint64_t cand) {
      gan.init(spec, cand);
      Rng rng(cand + 4000);
      x1 = random_tensor<double>({2, 4, 1, 8, 8}, rng);
      x2 = random_tensor<double>({2, 4, 1, 8, 8}, rng);
      mask1 = random_binary({2, 4, 1, 8, 8}, rng).cast<double>();
      mask2 = random_binary({2, 4, 1, 8, 8}, rng).cast<double>();
      z1 = gan.sample_z(rng, 2, 4).cast<double>();
      z2 = gan.sample_z(rng, 2, 4).cast<double>();
    };
    uint64_t best_seed = 330;
    double best_margin = -1;
    for (uint64_t cand = 330; cand < 390; ++cand) {
      setup(cand);
      TapeT<double> probe;
      (void)build(probe);
      double margin = testutil::kink_margin(probe);
      if (margin > best_margin) {
        best_margin = margin;
        best_seed = cand;
      }
    }
    setup(best_seed);
    n_params = param_count(gan);
    c.expect(n_params <= 2000, fmt("composition model has %lld parameters > 2000", (long long)n_params));
    c.expect(best_margin > 2.5e-6, fmt("kink margin %.2e too small for finite differences", best_margin));
    double h = std::clamp(best_margin / 25.0, 1e-7, 1e-4);
    merge_report(c, worst, "generator-phase composition", testutil::fd_check_params(build, gan.params_g(), h));
  }
  {
    TensorT<double> x1, x2, y1, y2, ctx1, ctx2;
    auto build = [&](TapeT<double>& t) {
      cot::CotBatchNodes b{t.leaf(x1), t.leaf(x2), t.leaf(y1), t.leaf(y2), t.leaf(ctx1), t.leaf(ctx2)};
      return cot::discriminator_loss(t, gan, b, cfg, 0.7).loss;
    };
    auto setup = [&](uint64_t cand) {
      gan.init(spec, cand);
      Rng rng(cand + 5000);
      x1 = random_tensor<double>({2, 4, 1, 8, 8}, rng);
      x2 = random_tensor<double>({2, 4, 1, 8, 8}, rng);
      y1 = random_tensor<double>({2, 4, 1, 8, 8}, rng);
      y2 = random_tensor<double>({2, 4, 1, 8, 8}, rng);
      ctx1 = random_tensor<double>({2, 4, 2}, rng);
      ctx2 = random_tensor<double>({2, 4, 2}, rng);
    };
    uint64_t best_seed = 430;
    double best_margin = -1;
    for (uint64_t cand = 430; cand < 490; ++cand) {
      setup(cand);
      TapeT<double> probe;
      (void)build(probe);
      double margin = testutil::kink_margin(probe);
      if (margin > best_margin) {
        best_margin = margin;
        best_seed = cand;
      }
    }
    setup(best_seed);
    c.expect(best_margin > 2.5e-6, fmt("kink margin %.2e too small for finite differences", best_margin));
    double h = std::clamp(best_margin / 25.0, 1e-7, 1e-4);
    merge_report(c, worst, "discriminator-phase composition",
                 testutil::fd_check_params(build, gan.params_d(), h));
  }

  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  c.expect(secs <= 300.0, fmt("runtime %.0f s exceeds the 5 minute budget", secs));
  return {c.ok, c.ok ? fmt("worst max rel err %.2e (%s); %lld composition params", worst.max_rel,
                           worst.name.c_str(), (long long)n_params)
                     : c.fails};
}

// ------------------------------------------- criterion 2: transport solver

// kernel-domain fixed point in long double against uniform marginals:
// independent arithmetic (explicit scalings, no log-sum-exp), iterated far
// past convergence
double sinkhorn_oracle(const std::vector<double>& c, int m, int n, double eps, int iters) {
  std::vector<long double> K(size_t(m) * n, 0.0L), u(size_t(m), 1.0L), v(size_t(n), 1.0L / n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) K[size_t(i) * n + j] = std::exp((long double)(-c[size_t(i) * n + j] / eps));
  for (int it = 0; it < iters; ++it) {
    for (int i = 0; i < m; ++i) {
      long double s = 0.0L;
      for (int j = 0; j < n; ++j) s += K[size_t(i) * n + j] * v[j];
      u[i] = (1.0L / m) / s;
    }
    for (int j = 0; j < n; ++j) {
      long double s = 0.0L;
      for (int i = 0; i < m; ++i) s += K[size_t(i) * n + j] * u[i];
      v[j] = (1.0L / n) / s;
    }
  }
  long double val = 0.0L;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) val += u[i] * K[size_t(i) * n + j] * v[j] * (long double)c[size_t(i) * n + j];
  return double(val);
}

Outcome c2_sinkhorn() {
  Check c;
  double worst_marginal = 0, worst_value = 0;

  {  // implied coupling spreads mass uniformly
    Rng rng(306);
    SinkhornConfig cfg;
    cfg.eps = 0.5;
    cfg.iters = 1000;
    TapeT<double> t;
    int cost = t.leaf(random_tensor<double>({8, 8}, rng, 0.0, 2.0));
    int p = cot::sinkhorn_plan(t, cost, cfg);
    const auto& pv = t.val(p);
    for (int i = 0; i < 8; ++i) {
      double row = 0.0, col = 0.0;
      for (int j = 0; j < 8; ++j) {
        row += pv.at(int64_t(i) * 8 + j);
        col += pv.at(int64_t(j) * 8 + i);
      }
      worst_marginal = std::max({worst_marginal, std::abs(row - 0.125), std::abs(col - 0.125)});
    }
    c.expect(worst_marginal <= 1e-6, fmt("marginal deviates from uniform by %.2e > 1e-6", worst_marginal));
  }

  {  // value against the independent high-precision fixed point
    Rng rng(307);
    SinkhornConfig cfg;
    cfg.eps = 0.5;
    cfg.iters = 1000;
    for (int rep = 0; rep < 3; ++rep) {
      TensorT<double> cost = random_tensor<double>({3, 3}, rng, 0.0, 2.0);
      TapeT<double> t;
      int v = cot::sinkhorn_value(t, t.leaf(cost), cfg);
      std::vector<double> cv(cost.data.begin(), cost.data.end());
      double want = sinkhorn_oracle(cv, 3, 3, cfg.eps, 20000);
      worst_value = std::max(worst_value, std::abs(double(t.val(v).at(0)) - want));
    }
    c.expect(worst_value <= 1e-6, fmt("3x3 value off the fixed-point oracle by %.2e > 1e-6", worst_value));
  }

  {  // a batch against itself cancels exactly, in production precision
    Rng rng(308);
    SinkhornConfig cfg;
    cfg.eps = 0.5;
    cfg.iters = 50;
    Tensor data = random_tensor<float>({3, 4, 5}, rng);
    Tensor hf = random_tensor<float>({3, 4, 2}, rng);
    Tensor mf = random_tensor<float>({3, 4, 2}, rng);
    Tape t;
    auto feats = [&]() { return cot::SeqFeats{t.leaf(data), t.leaf(hf), t.leaf(mf)}; };
    int d = cot::mixed_divergence(t, feats(), feats(), feats(), feats(), cfg);
    c.expect(double(t.val(d).at(0)) == 0.0,
             fmt("self-divergence is %.3e, not exactly 0", double(t.val(d).at(0))));
  }

  return {c.ok, c.ok ? fmt("worst marginal err %.1e, worst 3x3 value err %.1e, self-divergence exactly 0",
                           worst_marginal, worst_value)
                     : c.fails};
}

// ------------------------------------------------- criterion 3: causality

// bitwise comparison of the leading timesteps of two (N,T,...) tensors
int prefix_mismatches(const Tensor& a, const Tensor& b, int N, int T, int upto) {
  int64_t frame = a.numel() / (int64_t(N) * T);
  int bad = 0;
  for (int n = 0; n < N; ++n)
    for (int ts = 0; ts <= upto; ++ts)
      for (int64_t i = 0; i < frame; ++i) {
        int64_t at = (int64_t(n) * T + ts) * frame + i;
        if (a.at(at) != b.at(at)) ++bad;
      }
  return bad;
}

Outcome c3_causality() {
  Check c;
  GanSpec spec = tiny_gan_spec();
  GanModel gan;
  gan.init(spec, 77);
  Rng rng(78);
  const int N = 2, T = 6;

  {  // encoder: future mask frames never touch past embeddings
    Tensor mask = random_binary({N, T, 1, 8, 8}, rng);
    Tape t;
    int e = gan.encoder.encode(t, t.leaf(mask), kEvalMode);
    Tensor base = t.val(e);
    for (int cut = 0; cut < T - 1; ++cut) {
      Tensor mm = mask;
      int64_t frame = 64;
      for (int n = 0; n < N; ++n)
        for (int ts = cut + 1; ts < T; ++ts)
          for (int64_t i = 0; i < frame; ++i) {
            int64_t at = (int64_t(n) * T + ts) * frame + i;
            mm.at(at) = 1.0f - mm.at(at);  // flip every future pixel
          }
      Tape tm;
      int em = gan.encoder.encode(tm, tm.leaf(mm), kEvalMode);
      c.expect(prefix_mismatches(base, tm.val(em), N, T, cut) == 0,
               fmt("encoder: cut %d leaks into the past", cut));
    }
  }
  {  // generator: future noise never touches past frames
    Tensor z = gan.sample_z(rng, N, T);
    Tensor ctx = random_tensor<float>({N, 2}, rng);
    Tape t;
    int y = gan.gen.generate(t, t.leaf(z), t.leaf(ctx), kEvalMode);
    Tensor base = t.val(y);
    for (int cut = 0; cut < T - 1; ++cut) {
      Tensor zm = z;
      for (int n = 0; n < N; ++n)
        for (int ts = cut + 1; ts < T; ++ts)
          for (int d = 0; d < 2; ++d) zm.at((int64_t(n) * T + ts) * 2 + d) += 3.0f;
      Tape tm;
      int ym = gan.gen.generate(tm, tm.leaf(zm), tm.leaf(ctx), kEvalMode);
      c.expect(prefix_mismatches(base, tm.val(ym), N, T, cut) == 0,
               fmt("generator: cut %d leaks into the past", cut));
    }
  }
  for (auto [disc, name] : {std::pair<SeqDiscriminator*, const char*>{&gan.disc_h, "h"},
                            std::pair<SeqDiscriminator*, const char*>{&gan.disc_m, "M"}}) {
    // discriminators: future data frames and future context rows never touch
    // past features
    Tensor x = random_tensor<float>({N, T, 1, 8, 8}, rng);
    Tensor ctx = random_tensor<float>({N, T, 2}, rng);
    Tape t;
    int f = disc->embed(t, t.leaf(x), t.leaf(ctx), false);
    Tensor base = t.val(f);
    for (int cut = 0; cut < T - 1; ++cut) {
      Tensor xm = x;
      Tensor cm = ctx;
      for (int n = 0; n < N; ++n)
        for (int ts = cut + 1; ts < T; ++ts) {
          for (int64_t i = 0; i < 64; ++i) xm.at((int64_t(n) * T + ts) * 64 + i) += 2.0f;
          for (int d = 0; d < 2; ++d) cm.at((int64_t(n) * T + ts) * 2 + d) -= 1.5f;
        }
      Tape tm;
      int fm = disc->embed(tm, tm.leaf(xm), tm.leaf(cm), false);
      c.expect(prefix_mismatches(base, tm.val(fm), N, T, cut) == 0,
               fmt("discriminator %s: cut %d leaks into the past", name, cut));
    }
  }
  {  // a time-constant feature sequence is a perfect martingale
    Tensor m({3, 5, 2});
    Rng r2(79);
    for (int n = 0; n < 3; ++n)
      for (int j = 0; j < 2; ++j) {
        float v = float(r2.uniform(-2.0, 2.0));
        for (int ts = 0; ts < 5; ++ts) m.at((int64_t(n) * 5 + ts) * 2 + j) = v;
      }
    Tape t;
    int pen = cot::martingale_penalty(t, t.leaf(m));
    c.expect(double(t.val(pen).at(0)) == 0.0, "martingale penalty nonzero for a time-constant sequence");
  }

  return {c.ok, c.ok ? "encoder, generator, both discriminators exact under future mutations; "
                       "constant-sequence penalty exactly 0"
                     : c.fails};
}

// ------------------------------------------------- criterion 4: optimizer

Outcome c4_adamw() {
  Check c;

  {  // zero gradient, positive decay: exactly theta * (1 - lr*w), nothing else
    Parameter p("p", Tensor({3}, {0.7f, -1.3f, 2.5f}));
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    AdamW opt;
    opt.init({&p}, cfg);
    opt.step();
    for (int64_t i = 0; i < 3; ++i) {
      float want = float(double(Tensor({3}, {0.7f, -1.3f, 2.5f}).at(i)) * (1.0 - 0.1 * 0.5));
      c.expect(p.value.at(i) == want, fmt("decay-only step not exact at coordinate %lld", (long long)i));
    }
    opt.step();  // decay keeps acting without gradient signal
    c.expect(std::abs(p.value.at(0)) < 0.7f * 0.95f * 0.96f, "second decay-only step did not shrink");
  }
  {  // zero gradient, zero decay: parameters unchanged
    Parameter p("p", Tensor({2}, {1.5f, -0.25f}));
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt;
    opt.init({&p}, cfg);
    opt.step();
    c.expect(p.value.at(0) == 1.5f && p.value.at(1) == -0.25f, "null update moved the parameters");
  }
  double err = 0;
  {  // single step against a by-hand evaluation of the update formulas
    Parameter p("p", Tensor({1}, {1.0f}));
    p.grad.at(0) = 0.5f;
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.0;
    AdamW opt;
    opt.init({&p}, cfg);
    opt.step();
    double m = 0.9 * 0.0 + 0.1 * 0.5;                     // first moment
    double v = 0.999 * 0.0 + 0.001 * 0.25;                // second moment
    double mh = m / (1.0 - 0.9), vh = v / (1.0 - 0.999);  // bias corrections
    double want = 1.0 - 0.1 * mh / (std::sqrt(vh) + 1e-8);
    err = std::abs(double(p.value.at(0)) - want);
    c.expect(err <= 1e-6, fmt("hand-computed step off by %.2e > 1e-6", err));
  }

  return {c.ok, c.ok ? fmt("decay factor bit-exact; hand-computed step off by %.1e", err) : c.fails};
}

// ------------------------------------------- criterion 5: toy conditioning

Outcome c5_toy_training() {
  auto start = std::chrono::steady_clock::now();
  Check c;
  auto root = fresh_dir("c5");

  ToyGenConfig tg;
  tg.H = 16;
  tg.W = 16;
  tg.T = 8;
  tg.K = 1;
  tg.sequences = 512;
  tg.blob_radius = 3.0;
  tg.seed = 1;
  DatasetManifest train_m = make_toy_dataset(tg, (root / "train").string());
  ToyGenConfig hg = tg;
  hg.sequences = 64;
  hg.seed = 2;  // held-out draw from the same process
  DatasetManifest held = make_toy_dataset(hg, (root / "heldout").string());
  // score held-out batches in the training data's normalization so they live
  // in the same units as the generator's output
  held.mean = train_m.mean;
  held.stddev = train_m.stddev;

  TrainConfig cfg;
  cfg.model = small_gan_spec();
  cfg.epochs = 300;
  cfg.batch_size = 8;
  cfg.checkpoint_every = 100;
  cfg.seed = 1;
  cfg.dataset = (root / "train").string();
  cfg.out_dir = (root / "run").string();

  Trainer tr(cfg);
  const int64_t eval_batches = 4, eval_seed = 99;
  EvalMetrics init = evaluate(tr.model(), held, cfg.sinkhorn, eval_batches, cfg.batch_size, eval_seed);
  std::fprintf(stderr, "  [c5] init: div=%.4f gap_gen=%.4f gap_real=%.4f swap=%.2f (%lld params)\n",
               init.mixed_div, init.fid_gap_gen, init.fid_gap_real, init.mask_swap_rate,
               (long long)param_count(tr.model()));

  const int64_t per_epoch = tr.steps_per_epoch();
  double epoch_ms = 0;
  tr.train([&](const StepMetrics& m) {
    epoch_ms += m.wall_ms;
    if (m.step % per_epoch == per_epoch - 1) {
      if ((m.epoch + 1) % 25 == 0)
        std::fprintf(stderr, "  [c5] epoch %lld/300  gen=%.4f disc=%.4f pen=%.4f  (%.0f ms/step)\n",
                     (long long)m.epoch + 1, m.gen_loss, m.disc_loss, m.penalty, epoch_ms / double(per_epoch));
      epoch_ms = 0;
    }
  });

  EvalMetrics fin = evaluate(tr.model(), held, cfg.sinkhorn, eval_batches, cfg.batch_size, eval_seed);
  double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  std::fprintf(stderr, "  [c5] final: div=%.4f gap_gen=%.4f gap_real=%.4f swap=%.2f (%.1f min)\n",
               fin.mixed_div, fin.fid_gap_gen, fin.fid_gap_real, fin.mask_swap_rate, minutes);

  c.expect(fin.fid_gap_real > 0, "real-data fidelity gap not positive");
  c.expect(fin.fid_gap_gen >= 0.5 * fin.fid_gap_real,
           fmt("conditional fidelity gap %.4f below half the real gap %.4f", fin.fid_gap_gen,
               fin.fid_gap_real));
  c.expect(fin.mask_swap_rate >= 0.99,
           fmt("mask-swap sensitivity %.3f below 0.99", fin.mask_swap_rate));
  c.expect(fin.mixed_div <= 0.5 * init.mixed_div,
           fmt("held-out divergence %.4f above half its initial value %.4f", fin.mixed_div, init.mixed_div));
  c.expect(minutes <= 30.0, fmt("runtime %.1f min exceeds the 30 minute budget", minutes));

  return {c.ok, fmt("div %.4f -> %.4f (ratio %.3f), gap gen/real %.4f/%.4f (ratio %.3f), "
                    "swap %.3f, %.1f min%s%s",
                    init.mixed_div, fin.mixed_div, fin.mixed_div / init.mixed_div, fin.fid_gap_gen,
                    fin.fid_gap_real, fin.fid_gap_gen / fin.fid_gap_real, fin.mask_swap_rate, minutes,
                    c.ok ? "" : "; ", c.ok ? "" : c.fails.c_str())};
}

// -------------------------------- criterion 6: reproducibility, persistence

TrainConfig mini_config(const fs::path& data_dir, const fs::path& out_dir) {
  TrainConfig cfg;
  cfg.model = tiny_gan_spec();
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.checkpoint_every = 10;
  cfg.seed = 11;
  cfg.dataset = data_dir.string();
  cfg.out_dir = out_dir.string();
  cfg.sinkhorn.eps = 0.5;
  cfg.sinkhorn.iters = 20;
  return cfg;
}

// forward fingerprint: encode a fixed mask, generate from fixed noise, in
// evaluation mode so nothing mutates
Tensor fingerprint(GanModel& gan) {
  const GanSpec& s = gan.spec();
  Tensor mask({2, 4, s.encoder.K, s.gen.H, s.gen.W});
  for (int64_t i = 0; i < mask.numel(); ++i) mask.at(i) = (i % 7 == 0) ? 1.0f : 0.0f;
  Rng zr(99);
  Tensor z = gan.sample_z(zr, 2, 4);
  Tape t;
  int ctx = gan.encoder.encode(t, t.leaf(mask), kEvalMode);
  int y = gan.gen.generate(t, t.leaf(z), pool_context(t, ctx, s.gen_pool), kEvalMode);
  return t.val(y);
}

Outcome c6_reproducibility() {
  Check c;
  auto root = fresh_dir("c6");
  ToyGenConfig tg;
  tg.H = 8;
  tg.W = 8;
  tg.T = 4;
  tg.K = 1;
  tg.sequences = 32;
  tg.blob_radius = 2.0;
  tg.seed = 5;
  make_toy_dataset(tg, (root / "data").string());

  // identical config + seed, independent trainers: byte-identical logs
  std::vector<std::string> log_a, log_b;
  {
    Trainer tr(mini_config(root / "data", root / "run_a"));
    tr.train([&](const StepMetrics& m) { log_a.push_back(metrics_json_line(m)); });
  }
  {
    Trainer tr(mini_config(root / "data", root / "run_b"));
    tr.train([&](const StepMetrics& m) { log_b.push_back(metrics_json_line(m)); });
  }
  c.expect(log_a.size() == 12 && log_a.size() == log_b.size(),
           fmt("expected 12 log records per run, got %zu and %zu", log_a.size(), log_b.size()));
  int diff = 0;
  for (size_t i = 0; i < std::min(log_a.size(), log_b.size()); ++i)
    if (log_a[i] != log_b[i]) ++diff;
  c.expect(diff == 0, fmt("%d of %zu metric records differ between identical runs", diff, log_a.size()));

  // checkpoint round trip: forward outputs reproduce bit-exactly
  Tensor before;
  {
    Trainer tr(mini_config(root / "data", root / "run_c"));
    tr.train(nullptr);
    before = fingerprint(tr.model());
  }
  {
    Trainer tr(mini_config(root / "data", root / "run_d"));
    Tensor fresh = fingerprint(tr.model());
    bool differs = false;
    for (int64_t i = 0; i < fresh.numel(); ++i)
      if (fresh.at(i) != before.at(i)) differs = true;
    c.expect(differs, "trained and freshly initialized models coincide (fingerprint has no power)");
    tr.resume((root / "run_c" / "final.ckpt").string());
    Tensor after = fingerprint(tr.model());
    int bad = 0;
    for (int64_t i = 0; i < after.numel(); ++i)
      if (after.at(i) != before.at(i)) ++bad;
    c.expect(bad == 0, fmt("%d of %lld forward outputs differ after checkpoint reload", bad,
                           (long long)after.numel()));
  }

  return {c.ok, c.ok ? fmt("3-epoch logs byte-identical (%zu records); reloaded forward bit-exact",
                           log_a.size())
                     : c.fails};
}

// ------------------------------------------------- criterion 7: renderer

Outcome c7_render() {
  Check c;
  auto root = fresh_dir("c7");

  ToyGenConfig tg;
  tg.H = 16;
  tg.W = 16;
  tg.T = 10;
  tg.K = 1;
  tg.sequences = 3;
  tg.blob_radius = 3.0;
  tg.seed = 11;
  DatasetManifest dm = make_toy_dataset(tg, (root / "data").string());

  // conditionally generated sequences for the generated rows, stored in the
  // dataset format the renderer reads
  {
    GanSpec spec = small_gan_spec();
    apply_dataset_geometry(spec, dm);
    GanModel gan;
    gan.init(spec, 3);
    Rng zr(4);
    std::vector<GridSequence> grids;
    std::vector<EventMaskSequence> masks;
    for (int64_t i = 0; i < 2; ++i) {
      auto [real, mask] = read_window(dm, i);
      (void)real;
      Tensor mb = mask.values;
      mb.shape = {1, tg.T, tg.K, tg.H, tg.W};
      Tape t;
      int ctx = gan.encoder.encode(t, t.leaf(mb), kEvalMode);
      Tensor z = gan.sample_z(zr, 1, tg.T);
      int y = gan.gen.generate(t, t.leaf(z), pool_context(t, ctx, spec.gen_pool), kEvalMode);
      Tensor gen = t.val(y);
      gen.shape = {tg.T, 1, tg.H, tg.W};
      denormalize_grid(dm, gen);
      grids.push_back(GridSequence{std::move(gen), dm.time_step_hours});
      masks.push_back(std::move(mask));
    }
    write_sequence_dataset((root / "gen").string(), grids, masks);
  }

  // event-mask row, then a real and a generated row per window: five rows of
  // ten 16x16 tiles with one-pixel separators
  auto row = [&](const char* label, const char* source, const char* dataset, int window) {
    return fmt(R"({"label": "%s", "source": "%s", "dataset": "%s", "window": %d, "channel": 0, "lo": 0, "hi": 1})",
               label, source, (root / dataset).string().c_str(), window);
  };
  std::string spec_json = std::string("{\n  \"timesteps\": 10,\n  \"out\": \"") +
                          (root / "montage.pgm").string() + "\",\n  \"rows\": [\n    " +
                          row("event mask", "mask", "data", 0) + ",\n    " + row("real", "real", "data", 0) +
                          ",\n    " + row("generated", "generated", "gen", 0) + ",\n    " +
                          row("real", "real", "data", 1) + ",\n    " + row("generated", "generated", "gen", 1) +
                          "\n  ]\n}\n";
  std::ofstream(root / "render.json") << spec_json;

  // the layout arithmetic, through the library call
  RenderSpec spec = load_render_spec((root / "render.json").string());
  Image img = render_from_spec(spec);
  c.expect(img.h == 84, fmt("montage height %d != 5*16 + 4 separators = 84", img.h));
  c.expect(img.w == 169, fmt("montage width %d != 10*16 + 9 separators = 169", img.w));

  // and through the command-line tool into an image file
  std::string cmd = std::string(WXGAN_BIN) + " render --config " + (root / "render.json").string() + " > " +
                    (root / "out.txt").string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  c.expect(rc != -1 && WEXITSTATUS(rc) == 0, "render command failed");
  std::ifstream in(root / "montage.pgm", std::ios::binary);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "P5\n169 84\n255\n";
  c.expect(bytes.size() == header.size() + size_t(84) * 169,
           fmt("image file holds %zu bytes, expected %zu", bytes.size(), header.size() + size_t(84) * 169));
  c.expect(bytes.size() >= header.size() && std::string(bytes.begin(), bytes.begin() + long(header.size())) == header,
           "image header is not the expected 169x84 grayscale declaration");

  // row structure: the first row reproduces the stored event mask as pure
  // black/white tiles
  if (c.ok) {
    auto [g0, m0] = read_window(dm, 0);
    (void)g0;
    int bad = 0;
    for (int t = 0; t < 10; ++t)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          float v = m0.values.at((int64_t(t) * 16 + y) * 16 + x);
          uint8_t want = v >= 0.5f ? 255 : 0;
          if (bytes[header.size() + size_t(y) * 169 + size_t(t * 17 + x)] != want) ++bad;
        }
    c.expect(bad == 0, fmt("%d mask-row pixels disagree with the stored mask", bad));
  }

  return {c.ok, c.ok ? "mask/real/generated rows over 10 steps render as exactly 169x84 with a binary mask row"
                     : c.fails};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int num;
    const char* name;
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> all = {
      {1, "gradient fidelity", c1_gradient_fidelity},
      {2, "transport solver", c2_sinkhorn},
      {3, "causality", c3_causality},
      {4, "decoupled weight decay", c4_adamw},
      {5, "toy conditional training", c5_toy_training},
      {6, "reproducibility and persistence", c6_reproducibility},
      {7, "render contract", c7_render},
  };

  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));

  int failures = 0, ran = 0;
  for (const Criterion& cr : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), cr.num) == wanted.end()) continue;
    ++ran;
    auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = cr.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("unhandled exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %d (%s): %s  [%.1f s]\n", o.pass ? "PASS" : "FAIL", cr.num, cr.name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  std::printf("acceptance: %d of %d criteria passed\n", ran - failures, ran);
  return failures;
}
