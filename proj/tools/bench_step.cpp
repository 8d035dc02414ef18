// Times one full adversarial training step (discriminator phase + generator
// phase, forward and backward, optimizer updates) at a given model scale so
// training budgets can be chosen from measurements instead of guesses.

#include <chrono>
#include <cstdio>
#include <string>

#include "wxgan/cot_loss.hpp"
#include "wxgan/optim.hpp"

using namespace wxgan;

namespace {

GanSpec scaled_spec(int enc1, int enc2, int enc3, int d_c, int dz, int lstm, int seed_ch, int mid, int disc1,
                    int disc2, int disc_lstm, int J) {
  GanSpec s;
  s.encoder.K = 1;
  s.encoder.conv_channels = {enc1, enc2, enc3};
  s.encoder.lstm1_hidden = d_c;
  s.encoder.d_c = d_c;
  s.gen.d_z = dz;
  s.gen.d_c = d_c;
  s.gen.C = 1;
  s.gen.H = 16;
  s.gen.W = 16;
  s.gen.lstm_hidden = lstm;
  s.gen.seed_channels = seed_ch;
  s.gen.mid_channels = mid;
  s.disc.C = 1;
  s.disc.d_c = d_c;
  s.disc.conv_channels = {disc1, disc2};
  s.disc.lstm_hidden = disc_lstm;
  s.disc.J = J;
  return s;
}

int count_params(GanModel& g) {
  int64_t n = 0;
  for (Parameter* p : g.params_all()) n += p->value.numel();
  return int(n);
}

double bench(GanModel& gan, int B, int T, int steps) {
  SinkhornConfig scfg;  // defaults: eps 0.1, 100 iterations, lambda 1
  AdamW opt_g, opt_d;
  opt_g.init(gan.params_g(), AdamWConfig{});
  opt_d.init(gan.params_d(), AdamWConfig{});
  Rng rng(1);

  auto mk_data = [&](float lo, float hi) {
    Tensor x({B, T, 1, 16, 16});
    for (int64_t i = 0; i < x.numel(); ++i) x.at(i) = float(rng.uniform(lo, hi));
    return x;
  };
  auto mk_mask = [&]() {
    Tensor m({B, T, 1, 16, 16});
    for (int64_t i = 0; i < m.numel(); ++i) m.at(i) = rng.uniform() < 0.2 ? 1.0f : 0.0f;
    return m;
  };
  Tensor x1 = mk_data(-1, 1), x2 = mk_data(-1, 1), mask1 = mk_mask(), mask2 = mk_mask();

  auto t0 = std::chrono::steady_clock::now();
  for (int s = 0; s < steps; ++s) {
    Tensor z1 = gan.sample_z(rng, B, T), z2 = gan.sample_z(rng, B, T);

    {  // discriminator phase: generator and encoder constant
      Tape t;
      FwdMode frozen{false, true, false};
      int ctx1 = gan.encoder.encode(t, t.leaf(mask1), frozen);
      int ctx2 = gan.encoder.encode(t, t.leaf(mask2), frozen);
      int y1 = gan.gen.generate(t, t.leaf(z1), pool_context(t, ctx1, gan.spec().gen_pool), frozen);
      int y2 = gan.gen.generate(t, t.leaf(z2), pool_context(t, ctx2, gan.spec().gen_pool), frozen);
      cot::CotBatchNodes b{t.leaf(x1), t.leaf(x2), y1, y2, ctx1, ctx2};
      auto parts = cot::discriminator_loss(t, gan, b, scfg, 1.0);
      opt_d.zero_grad();
      t.backward(parts.loss);
      t.collect_param_grads();
      opt_d.step();
    }
    {  // generator phase: discriminators constant, encoder trainable
      Tape t;
      FwdMode train{true, true, true};
      int ctx1 = gan.encoder.encode(t, t.leaf(mask1), train);
      int ctx2 = gan.encoder.encode(t, t.leaf(mask2), train);
      int y1 = gan.gen.generate(t, t.leaf(z1), pool_context(t, ctx1, gan.spec().gen_pool), train);
      int y2 = gan.gen.generate(t, t.leaf(z2), pool_context(t, ctx2, gan.spec().gen_pool), train);
      cot::CotBatchNodes b{t.leaf(x1), t.leaf(x2), y1, y2, ctx1, ctx2};
      auto parts = cot::generator_loss(t, gan, b, scfg);
      opt_g.zero_grad();
      t.backward(parts.loss);
      t.collect_param_grads();
      opt_g.step();
    }
  }
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / steps;
}

}  // namespace

void breakdown(GanModel& gan, int B, int T, int reps) {
  Rng rng(2);
  Tensor x({B, T, 1, 16, 16});
  for (int64_t i = 0; i < x.numel(); ++i) x.at(i) = float(rng.uniform(-1, 1));
  Tensor mask({B, T, 1, 16, 16});
  for (int64_t i = 0; i < mask.numel(); ++i) mask.at(i) = rng.uniform() < 0.2 ? 1.0f : 0.0f;
  Tensor z = gan.sample_z(rng, B, T);
  SinkhornConfig scfg;

  auto time_it = [&](const char* name, auto fn) {
    auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) fn();
    auto t1 = std::chrono::steady_clock::now();
    std::printf("  %-34s %8.2f ms\n", name, std::chrono::duration<double, std::milli>(t1 - t0).count() / reps);
  };

  time_it("encode fwd", [&] {
    Tape t;
    gan.encoder.encode(t, t.leaf(mask), kEvalMode);
  });
  time_it("generate fwd", [&] {
    Tape t;
    Tensor c({B, gan.spec().gen.d_c});
    gan.gen.generate(t, t.leaf(z), t.leaf(c), kEvalMode);
  });
  time_it("disc embed fwd", [&] {
    Tape t;
    Tensor ctx({B, T, gan.spec().encoder.d_c});
    gan.disc_h.embed(t, t.leaf(x), t.leaf(ctx), false);
  });
  time_it("disc embed fwd+bwd", [&] {
    Tape t;
    Tensor ctx({B, T, gan.spec().encoder.d_c});
    int f = gan.disc_h.embed(t, t.leaf(x), t.leaf(ctx), true);
    int loss = ops::sum_all(t, ops::mul(t, f, f));
    t.backward(loss);
  });
  time_it("generate fwd+bwd", [&] {
    Tape t;
    Tensor c({B, gan.spec().gen.d_c});
    int y = gan.gen.generate(t, t.leaf(z), t.leaf(c), FwdMode{true, true, false});
    int loss = ops::sum_all(t, ops::mul(t, y, y));
    t.backward(loss);
  });
  time_it("sinkhorn 100 iters on 8x8", [&] {
    Tape t;
    Rng r2(3);
    Tensor c({8, 8});
    for (int64_t i = 0; i < 64; ++i) c.at(i) = float(r2.uniform(0.0, 2.0));
    cot::sinkhorn_value(t, t.leaf(c), scfg);
  });
}

int main(int argc, char** argv) {
  if (argc > 1 && std::string(argv[1]) == "breakdown") {
    GanModel gan;
    gan.init(scaled_spec(4, 6, 8, 8, 8, 12, 6, 6, 4, 8, 8, 8), 7);
    std::printf("component timings at the small scale (B=8, T=8, 16x16):\n");
    breakdown(gan, 8, 8, argc > 2 ? std::atoi(argv[2]) : 10);
    return 0;
  }
  int steps = argc > 1 ? std::atoi(argv[1]) : 10;
  struct Cand {
    const char* name;
    GanSpec spec;
  };
  Cand cands[] = {
      {"small  (enc 4/6/8 d_c 8, gen lstm 12 seed 6 mid 6, disc 4/8 J 8)",
       scaled_spec(4, 6, 8, 8, 8, 12, 6, 6, 4, 8, 8, 8)},
      {"medium (enc 6/8/12 d_c 8, gen lstm 16 seed 8 mid 8, disc 4/8 J 8)",
       scaled_spec(6, 8, 12, 8, 8, 16, 8, 8, 4, 8, 8, 8)},
      {"larger (enc 8/12/16 d_c 12, gen lstm 24 seed 12 mid 12, disc 6/12 J 12)",
       scaled_spec(8, 12, 16, 12, 12, 24, 12, 12, 6, 12, 12, 12)},
  };
  for (auto& c : cands) {
    GanModel gan;
    gan.init(c.spec, 7);
    double ms = bench(gan, 8, 8, steps);
    double total_min = ms * 32 * 300 / 60000.0;  // 512 sequences, batch 8 -> 32 steps/epoch, 300 epochs
    std::printf("%-70s params=%6d  %8.1f ms/step  -> %6.1f min for 300 toy epochs\n", c.name, count_params(gan),
                ms, total_min);
  }
  return 0;
}
