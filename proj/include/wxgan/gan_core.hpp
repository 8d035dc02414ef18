#pragma once

// Conditioned generator and the dual sequence discriminators h and M.
//
// Generator: per-timestep [z_t, pooled c] through an LSTM, hidden state
// projected to a (H/4, W/4) seed map, two stride-2 transposed convolutions
// (batchnorm + leaky ReLU each), then a 1x1 convolution, tanh, and a learned
// per-channel affine so outputs can span the z-scored data range.
//
// Discriminators: per-frame conv stack (deliberately without batchnorm: batch
// statistics would couple timesteps and break causality of the transport cost
// during training), global average pool, LSTM, and a linear head emitting a
// J-dimensional feature per timestep. Conditioning enters as spatially
// broadcast context channels.

#include <string>
#include <utility>
#include <vector>

#include "wxgan/layers.hpp"
#include "wxgan/mask_encoder.hpp"

namespace wxgan {

struct GeneratorSpec {
  int d_z = 32;
  int d_c = 64;
  int C = 1, H = 16, W = 16;  // output frame shape; H, W divisible by 4
  int lstm_hidden = 64;
  int seed_channels = 16;  // channels of the projected (H/4, W/4) seed map
  int mid_channels = 8;    // channels between the two deconv stages
  double lrelu_slope = 0.2;
};

class Generator {
 public:
  void init(const std::string& name, Rng& rng, const GeneratorSpec& spec) {
    spec_ = spec;
    if (spec.H % 4 != 0 || spec.W % 4 != 0)
      throw ConfigError("generator: H and W must be divisible by 4 (two 2x upsampling stages)");
    if (spec.d_z < 1 || spec.d_c < 1 || spec.C < 1) throw ConfigError("generator: bad spec");
    int sh = spec.H / 4, sw = spec.W / 4;
    lstm_.init(name + ".lstm", rng, spec.d_z + spec.d_c, spec.lstm_hidden);
    seed_proj_.init(name + ".seed", rng, spec.lstm_hidden, spec.seed_channels * sh * sw);
    deconv1_.init(name + ".deconv1", rng, spec.seed_channels, spec.mid_channels, 4, 2, 1);
    bn1_.init(name + ".bn1", spec.mid_channels);
    deconv2_.init(name + ".deconv2", rng, spec.mid_channels, spec.mid_channels, 4, 2, 1);
    bn2_.init(name + ".bn2", spec.mid_channels);
    head_.init(name + ".head", rng, spec.C, spec.mid_channels, 1, 1, 0);
    out_scale_ = Parameter(name + ".out_scale", const_init({spec.C}, 1.0f));
    out_shift_ = Parameter(name + ".out_shift", const_init({spec.C}, 0.0f));
  }

  const GeneratorSpec& spec() const { return spec_; }

  // z (N,T,d_z), pooled context (N,d_c) -> frames (N,T,C,H,W); frame t sees
  // z_1..z_t only (LSTM rollout; everything after it is frame-local)
  template <class S>
  int generate(TapeT<S>& t, int z, int c_pooled, const FwdMode& m) {
    const auto& zs = t.val(z).shape;
    const auto& cs = t.val(c_pooled).shape;
    if (zs.size() != 3 || zs[2] != spec_.d_z) throw ShapeError("generate: z must be (N,T,d_z)");
    if (cs.size() != 2 || cs[0] != zs[0] || cs[1] != spec_.d_c)
      throw ShapeError("generate: context must be (N,d_c)");
    int N = zs[0], T = zs[1];
    int sh = spec_.H / 4, sw = spec_.W / 4;

    int cseq = ops::broadcast_time(t, c_pooled, T);  // (N,T,d_c)
    int zc = ops::reshape(
        t, ops::concat_feat(t, ops::reshape(t, z, {N * T, spec_.d_z}), ops::reshape(t, cseq, {N * T, spec_.d_c})),
        {N, T, spec_.d_z + spec_.d_c});

    int hseq = lstm_.seq(t, zc, m.train_params);  // (N,T,LH)
    int x = ops::reshape(t, hseq, {N * T, spec_.lstm_hidden});
    x = seed_proj_.fwd(t, x, m.train_params);
    x = ops::reshape(t, x, {N * T, spec_.seed_channels, sh, sw});

    x = deconv1_.fwd(t, x, m.train_params);
    x = bn1_.fwd(t, x, m.train_params, m.train_stats, m.update_running);
    x = ops::leaky_relu(t, x, spec_.lrelu_slope);
    x = deconv2_.fwd(t, x, m.train_params);
    x = bn2_.fwd(t, x, m.train_params, m.train_stats, m.update_running);
    x = ops::leaky_relu(t, x, spec_.lrelu_slope);
    x = head_.fwd(t, x, m.train_params);
    x = ops::tanh_(t, x);
    // z-scored targets are unbounded; a learned per-channel affine lets the
    // bounded tanh cover their range
    x = ops::channel_affine(t, x, t.param(out_scale_, m.train_params), t.param(out_shift_, m.train_params));
    return ops::reshape(t, x, {N, T, spec_.C, spec_.H, spec_.W});
  }

  void collect(std::vector<Parameter*>& out) {
    lstm_.collect(out);
    seed_proj_.collect(out);
    deconv1_.collect(out);
    bn1_.collect(out);
    deconv2_.collect(out);
    bn2_.collect(out);
    head_.collect(out);
    out.push_back(&out_scale_);
    out.push_back(&out_shift_);
  }
  void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) {
    bn1_.collect_buffers(out);
    bn2_.collect_buffers(out);
  }

 private:
  GeneratorSpec spec_;
  LSTM lstm_;
  Linear seed_proj_;
  ConvTranspose2d deconv1_, deconv2_;
  BatchNorm bn1_, bn2_;
  Conv2d head_;
  Parameter out_scale_, out_shift_;
};

struct DiscriminatorSpec {
  int C = 1;      // data channels
  int d_c = 64;   // context width when conditioned, 0 to disable
  std::vector<int> conv_channels = {16, 32};
  int lstm_hidden = 32;
  int J = 16;  // per-timestep feature dimension
  double lrelu_slope = 0.2;
};

class SeqDiscriminator {
 public:
  void init(const std::string& name, Rng& rng, const DiscriminatorSpec& spec) {
    spec_ = spec;
    if (spec.C < 1 || spec.J < 1 || spec.d_c < 0) throw ConfigError("discriminator: bad spec");
    if (spec.conv_channels.empty()) throw ConfigError("discriminator: needs at least one conv stage");
    int in = spec.C + spec.d_c;
    convs_.resize(spec.conv_channels.size());
    for (size_t s = 0; s < convs_.size(); ++s) {
      convs_[s].init(name + ".conv" + std::to_string(s), rng, spec.conv_channels[s], in, 3, 2, 1);
      in = spec.conv_channels[s];
    }
    lstm_.init(name + ".lstm", rng, in, spec.lstm_hidden);
    head_.init(name + ".head", rng, spec.lstm_hidden, spec.J);
  }

  const DiscriminatorSpec& spec() const { return spec_; }
  bool conditioned() const { return spec_.d_c > 0; }

  // x (N,T,C,H,W), ctx (N,T,d_c) ignored when unconditioned -> (N,T,J)
  template <class S>
  int embed(TapeT<S>& t, int x, int ctx, bool train_params) {
    const auto& sh = t.val(x).shape;
    if (sh.size() != 5 || sh[2] != spec_.C) throw ShapeError("discriminator: input must be (N,T,C,H,W)");
    int N = sh[0], T = sh[1], H = sh[3], W = sh[4];

    int f = ops::reshape(t, x, {N * T, spec_.C, H, W});
    if (conditioned()) {
      const auto& cs = t.val(ctx).shape;
      if (cs.size() != 3 || cs[0] != N || cs[1] != T || cs[2] != spec_.d_c)
        throw ShapeError("discriminator: context must be (N,T,d_c)");
      int cmap = ops::broadcast_vec_to_map(t, ops::reshape(t, ctx, {N * T, spec_.d_c}), H, W);
      f = ops::concat_channels(t, f, cmap);
    }
    for (auto& conv : convs_) {
      f = conv.fwd(t, f, train_params);
      f = ops::leaky_relu(t, f, spec_.lrelu_slope);
    }
    f = ops::global_avg_pool(t, f);
    f = ops::reshape(t, f, {N, T, t.val(f).dim(1)});
    f = lstm_.seq(t, f, train_params);
    f = ops::reshape(t, f, {N * T, spec_.lstm_hidden});
    f = head_.fwd(t, f, train_params);
    return ops::reshape(t, f, {N, T, spec_.J});
  }

  void collect(std::vector<Parameter*>& out) {
    for (auto& c : convs_) c.collect(out);
    lstm_.collect(out);
    head_.collect(out);
  }

 private:
  DiscriminatorSpec spec_;
  std::vector<Conv2d> convs_;
  LSTM lstm_;
  Linear head_;
};

// The full model: encoder, generator, and the parameter-disjoint h/M pair.
struct GanSpec {
  MaskEncoderSpec encoder;
  GeneratorSpec gen;
  DiscriminatorSpec disc;  // shared shape spec for h and M
  bool condition_m = true;
  ContextPool gen_pool = ContextPool::kLast;
};

class GanModel {
 public:
  void init(const GanSpec& spec, uint64_t seed) {
    spec_ = spec;
    if (spec.gen.d_c != spec.encoder.d_c) throw ConfigError("gan: generator d_c must match encoder d_c");
    if (spec.disc.d_c != 0 && spec.disc.d_c != spec.encoder.d_c)
      throw ConfigError("gan: discriminator d_c must match encoder d_c");
    Rng re(derive_seed(seed, 1)), rg(derive_seed(seed, 2)), rh(derive_seed(seed, 3)),
        rm(derive_seed(seed, 4));
    encoder.init("encoder", re, spec.encoder);
    gen.init("gen", rg, spec.gen);
    disc_h.init("disc_h", rh, spec.disc);
    DiscriminatorSpec mspec = spec.disc;
    if (!spec.condition_m) mspec.d_c = 0;
    disc_m.init("disc_m", rm, mspec);
  }

  const GanSpec& spec() const { return spec_; }

  Tensor sample_z(Rng& rng, int N, int T) const {
    Tensor z({N, T, spec_.gen.d_z});
    for (int64_t i = 0; i < z.numel(); ++i) z.at(i) = float(rng.normal());
    return z;
  }

  // generator-side parameters: the encoder trains with the generator (the
  // context is part of the generative path; the discriminators treat it as
  // given)
  std::vector<Parameter*> params_g() {
    std::vector<Parameter*> p;
    encoder.collect(p);
    gen.collect(p);
    return p;
  }
  std::vector<Parameter*> params_d() {
    std::vector<Parameter*> p;
    disc_h.collect(p);
    disc_m.collect(p);
    return p;
  }
  std::vector<Parameter*> params_all() {
    auto p = params_g();
    auto d = params_d();
    p.insert(p.end(), d.begin(), d.end());
    return p;
  }
  std::vector<std::pair<std::string, Tensor*>> buffers() {
    std::vector<std::pair<std::string, Tensor*>> b;
    encoder.collect_buffers(b);
    gen.collect_buffers(b);
    return b;
  }

  MaskEncoder encoder;
  Generator gen;
  SeqDiscriminator disc_h, disc_m;

 private:
  GanSpec spec_;
};

}  // namespace wxgan
