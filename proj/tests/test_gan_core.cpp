#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "testutil.hpp"
#include "wxgan/gan_core.hpp"

using namespace wxgan;
using testutil::random_tensor;

namespace {

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

Tensor random_binary(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform() < 0.2 ? 1.0f : 0.0f;
  return t;
}

}  // namespace

TEST_CASE("generate: deterministic, correctly shaped, and accepted by both embeddings") {
  GanModel gan;
  gan.init(tiny_gan_spec(), 60);
  Rng rng(61);
  Tensor z = gan.sample_z(rng, 3, 4);
  Tensor c = random_tensor<float>({3, 2}, rng);

  Tape t1, t2;
  int y1 = gan.gen.generate(t1, t1.leaf(z), t1.leaf(c), kEvalMode);
  int y2 = gan.gen.generate(t2, t2.leaf(z), t2.leaf(c), kEvalMode);
  CHECK(t1.val(y1).shape == std::vector<int>{3, 4, 1, 8, 8});
  for (int64_t i = 0; i < t1.val(y1).numel(); ++i) REQUIRE(t1.val(y1).at(i) == t2.val(y2).at(i));

  // shape round-trip into h and M without reshaping
  Tensor ctx = random_tensor<float>({3, 4, 2}, rng);
  int fh = gan.disc_h.embed(t1, y1, t1.leaf(ctx), false);
  int fm = gan.disc_m.embed(t1, y1, t1.leaf(ctx), false);
  CHECK(t1.val(fh).shape == std::vector<int>{3, 4, 2});
  CHECK(t1.val(fm).shape == std::vector<int>{3, 4, 2});
}

TEST_CASE("generate: causal in z, sensitive to the context") {
  GanModel gan;
  gan.init(tiny_gan_spec(), 62);
  Rng rng(63);
  int N = 2, T = 5;
  Tensor z = gan.sample_z(rng, N, T);
  Tensor c = random_tensor<float>({N, 2}, rng);

  Tape t;
  int y = gan.gen.generate(t, t.leaf(z), t.leaf(c), kEvalMode);
  int64_t frame = t.val(y).numel() / (N * T);

  for (int cut = 0; cut < T - 1; ++cut) {
    Tensor zm = z;
    for (int n = 0; n < N; ++n)
      for (int ts = cut + 1; ts < T; ++ts)
        for (int d = 0; d < 2; ++d) zm.at((int64_t(n) * T + ts) * 2 + d) += 3.0f;
    Tape tm;
    int ym = gan.gen.generate(tm, tm.leaf(zm), tm.leaf(c), kEvalMode);
    for (int n = 0; n < N; ++n) {
      for (int ts = 0; ts <= cut; ++ts)
        for (int64_t i = 0; i < frame; ++i) {
          int64_t at = (int64_t(n) * T + ts) * frame + i;
          REQUIRE(tm.val(ym).at(at) == t.val(y).at(at));
        }
      // and the mutated suffix actually changes somewhere
      bool changed = false;
      for (int ts = cut + 1; ts < T && !changed; ++ts)
        for (int64_t i = 0; i < frame; ++i)
          if (tm.val(ym).at((int64_t(n) * T + ts) * frame + i) !=
              t.val(y).at((int64_t(n) * T + ts) * frame + i)) {
            changed = true;
            break;
          }
      CHECK(changed);
    }
  }

  // zeroing the context moves the output
  Tape tz;
  int yz = gan.gen.generate(tz, tz.leaf(z), tz.leaf(Tensor({N, 2})), kEvalMode);
  double dist = 0;
  for (int64_t i = 0; i < t.val(y).numel(); ++i) {
    double d = double(t.val(y).at(i)) - double(tz.val(yz).at(i));
    dist += d * d;
  }
  CHECK(dist > 0);
}

TEST_CASE("context separates generated outputs pair by pair") {
  GanModel gan;
  gan.init(tiny_gan_spec(), 64);
  Rng rng(65);
  int pairs = 40, positive = 0;
  Tensor z = gan.sample_z(rng, 1, 3);
  for (int p = 0; p < pairs; ++p) {
    Tensor ca = random_tensor<float>({1, 2}, rng);
    Tensor cb = random_tensor<float>({1, 2}, rng);
    Tape ta, tb;
    int ya = gan.gen.generate(ta, ta.leaf(z), ta.leaf(ca), kEvalMode);
    int yb = gan.gen.generate(tb, tb.leaf(z), tb.leaf(cb), kEvalMode);
    double dist = 0;
    for (int64_t i = 0; i < ta.val(ya).numel(); ++i) {
      double d = double(ta.val(ya).at(i)) - double(tb.val(yb).at(i));
      dist += d * d;
    }
    if (dist > 0) ++positive;
  }
  CHECK(positive == pairs);
}

TEST_CASE("discriminators: zero parameters embed everything to zero") {
  GanModel gan;
  gan.init(tiny_gan_spec(), 66);
  std::vector<Parameter*> dp = gan.params_d();
  for (Parameter* p : dp) p->value.fill(0.0f);
  Rng rng(67);
  Tape t;
  int x = t.leaf(random_tensor<float>({2, 3, 1, 8, 8}, rng));
  int ctx = t.leaf(random_tensor<float>({2, 3, 2}, rng));
  int fh = gan.disc_h.embed(t, x, ctx, false);
  int fm = gan.disc_m.embed(t, x, ctx, false);
  for (int64_t i = 0; i < t.val(fh).numel(); ++i) CHECK(t.val(fh).at(i) == 0.0f);
  for (int64_t i = 0; i < t.val(fm).numel(); ++i) CHECK(t.val(fm).at(i) == 0.0f);
}

TEST_CASE("discriminators: causal in x, equivariant under batch permutation, context-sensitive") {
  GanModel gan;
  gan.init(tiny_gan_spec(), 68);
  Rng rng(69);
  int N = 2, T = 5;
  Tensor x = random_tensor<float>({N, T, 1, 8, 8}, rng);
  Tensor ctx = random_tensor<float>({N, T, 2}, rng);
  Tape t;
  int f = gan.disc_h.embed(t, t.leaf(x), t.leaf(ctx), false);
  int64_t frame_in = x.numel() / (N * T);
  int64_t frame_out = t.val(f).numel() / (N * T);

  for (int cut = 0; cut < T - 1; ++cut) {
    Tensor xm = x;
    for (int n = 0; n < N; ++n)
      for (int ts = cut + 1; ts < T; ++ts)
        for (int64_t i = 0; i < frame_in; ++i) xm.at((int64_t(n) * T + ts) * frame_in + i) += 1.5f;
    Tape tm;
    int fmut = gan.disc_h.embed(tm, tm.leaf(xm), tm.leaf(ctx), false);
    for (int n = 0; n < N; ++n)
      for (int ts = 0; ts <= cut; ++ts)
        for (int64_t i = 0; i < frame_out; ++i) {
          int64_t at = (int64_t(n) * T + ts) * frame_out + i;
          REQUIRE(tm.val(fmut).at(at) == t.val(f).at(at));
        }
  }

  // swap the two batch items (data and context together)
  Tensor xs = x, cs = ctx;
  int64_t item_x = x.numel() / N, item_c = ctx.numel() / N;
  for (int64_t i = 0; i < item_x; ++i) {
    xs.at(i) = x.at(item_x + i);
    xs.at(item_x + i) = x.at(i);
  }
  for (int64_t i = 0; i < item_c; ++i) {
    cs.at(i) = ctx.at(item_c + i);
    cs.at(item_c + i) = ctx.at(i);
  }
  Tape tp;
  int fp = gan.disc_h.embed(tp, tp.leaf(xs), tp.leaf(cs), false);
  int64_t item_f = t.val(f).numel() / N;
  for (int64_t i = 0; i < item_f; ++i) {
    CHECK(tp.val(fp).at(i) == t.val(f).at(item_f + i));
    CHECK(tp.val(fp).at(item_f + i) == t.val(f).at(i));
  }

  // zeroed context changes the features
  Tape tz;
  int fz = gan.disc_h.embed(tz, tz.leaf(x), tz.leaf(Tensor({N, T, 2})), false);
  double dist = 0;
  for (int64_t i = 0; i < t.val(f).numel(); ++i) {
    double d = double(t.val(f).at(i)) - double(tz.val(fz).at(i));
    dist += d * d;
  }
  CHECK(dist > 0);
}

TEST_CASE("h and M are parameter-disjoint; generator and discriminator sides too") {
  GanModel gan;
  gan.init(tiny_gan_spec(), 70);
  std::vector<Parameter*> hp, mp;
  gan.disc_h.collect(hp);
  gan.disc_m.collect(mp);
  std::set<Parameter*> hs(hp.begin(), hp.end());
  for (Parameter* p : mp) CHECK(hs.count(p) == 0);

  auto g = gan.params_g();
  auto d = gan.params_d();
  std::set<Parameter*> gs(g.begin(), g.end());
  CHECK(gs.size() == g.size());
  for (Parameter* p : d) CHECK(gs.count(p) == 0);

  // an unconditioned M drops the context channels
  GanSpec s2 = tiny_gan_spec();
  s2.condition_m = false;
  GanModel gan2;
  gan2.init(s2, 71);
  CHECK(!gan2.disc_m.conditioned());
  CHECK(gan2.disc_h.conditioned());
}

TEST_CASE("generator rejects spatial dims not divisible by 4") {
  GeneratorSpec gs;
  gs.H = 10;
  gs.W = 16;
  Generator g;
  Rng rng(72);
  CHECK_THROWS_AS(g.init("g", rng, gs), ConfigError);
}

TEST_CASE("fd: encoder-to-generator composition") {
  GanSpec s = tiny_gan_spec();
  GanModel gan;
  TensorT<double> mask, z;
  auto build = [&](TapeT<double>& t) {
    FwdMode m{true, true, false};
    int c = gan.encoder.encode(t, t.leaf(mask), m);
    int y = gan.gen.generate(t, t.leaf(z), pool_context(t, c, ContextPool::kLast), m);
    return ops::sum_all(t, ops::mul(t, y, y));
  };

  // pick the init/data seed whose forward keeps leaky_relu inputs farthest
  // from the kink, then size the FD step so the perturbation interval stays
  // inside that smooth region
  uint64_t best_seed = 73;
  double best_margin = -1;
  auto setup = [&](uint64_t cand) {
    gan.init(s, cand);
    Rng rng(cand + 1000);
    mask = random_binary({2, 3, 1, 8, 8}, rng).cast<double>();
    z = gan.sample_z(rng, 2, 3).cast<double>();
  };
  for (uint64_t cand = 73; cand < 133; ++cand) {
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
  REQUIRE(best_margin > 5e-4);
  double h = std::clamp(best_margin / 25.0, 1e-6, 1e-4);

  auto r = testutil::fd_check_params(build, gan.params_g(), h);
  CHECK(r.coords > 0);
  CHECK(r.q95 <= 1e-3);
  CHECK(r.max_rel <= 1e-2);
}

TEST_CASE("fd: discriminator embedding") {
  GanModel gan;
  gan.init(tiny_gan_spec(), 75);
  Rng rng(76);
  TensorT<double> x = random_tensor<double>({2, 3, 1, 8, 8}, rng);
  TensorT<double> ctx = random_tensor<double>({2, 3, 2}, rng);
  std::vector<Parameter*> params;
  gan.disc_h.collect(params);
  auto build = [&](TapeT<double>& t) {
    int f = gan.disc_h.embed(t, t.leaf(x), t.leaf(ctx), true);
    return ops::sum_all(t, ops::mul(t, f, f));
  };
  auto r = testutil::fd_check_params(build, params);
  CHECK(r.coords > 0);
  CHECK(r.q95 <= 1e-3);
  CHECK(r.max_rel <= 1e-2);
}
