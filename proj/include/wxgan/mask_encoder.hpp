#pragma once

// Context encoder: per-frame conv stack over event masks, global average
// pool, then a two-layer LSTM with batch normalization between the layers.
// The embedding at time t depends only on mask frames <= t (the conv stage is
// frame-local, the LSTMs scan forward), which the causality tests pin down.

#include <string>
#include <utility>
#include <vector>

#include "wxgan/layers.hpp"

namespace wxgan {

// phase flags threaded through every forward: which side's parameters are
// trainable this phase, whether batchnorm uses batch statistics, and whether
// running statistics get updated (once per optimization step)
struct FwdMode {
  bool train_params = false;
  bool train_stats = false;
  bool update_running = false;
};

inline constexpr FwdMode kEvalMode{};

struct MaskEncoderSpec {
  int K = 1;
  std::vector<int> conv_channels = {16, 32, 64};  // three strided stages
  int lstm1_hidden = 64;
  int d_c = 64;
  double lrelu_slope = 0.2;
};

class MaskEncoder {
 public:
  void init(const std::string& name, Rng& rng, const MaskEncoderSpec& spec) {
    spec_ = spec;
    if (spec.K < 1 || spec.d_c < 1 || spec.lstm1_hidden < 1)
      throw ConfigError("mask encoder: K, d_c, lstm1_hidden must be positive");
    if (spec.conv_channels.size() != 3) throw ConfigError("mask encoder: expected three conv stages");
    int in = spec.K;
    for (size_t s = 0; s < 3; ++s) {
      int out = spec_.conv_channels[s];
      if (out < 1) throw ConfigError("mask encoder: conv channels must be positive");
      conv_[s].init(name + ".conv" + std::to_string(s), rng, out, in, 3, 2, 1);
      bn_[s].init(name + ".bn" + std::to_string(s), out);
      in = out;
    }
    lstm1_.init(name + ".lstm1", rng, in, spec.lstm1_hidden);
    bn_mid_.init(name + ".bn_mid", spec.lstm1_hidden);
    lstm2_.init(name + ".lstm2", rng, spec.lstm1_hidden, spec.d_c);
  }

  const MaskEncoderSpec& spec() const { return spec_; }

  // mask (N,T,K,H,W) -> context embedding (N,T,d_c)
  template <class S>
  int encode(TapeT<S>& t, int mask, const FwdMode& m) {
    const auto& sh = t.val(mask).shape;
    if (sh.size() != 5 || sh[2] != spec_.K) throw ShapeError("mask encoder: input must be (N,T,K,H,W)");
    int N = sh[0], T = sh[1];

    // frames are independent through the conv stack: fold time into the batch
    int x = ops::reshape(t, mask, {N * T, spec_.K, sh[3], sh[4]});
    for (size_t s = 0; s < 3; ++s) {
      x = conv_[s].fwd(t, x, m.train_params);
      x = bn_[s].fwd(t, x, m.train_params, m.train_stats, m.update_running);
      x = ops::leaky_relu(t, x, spec_.lrelu_slope);
    }
    x = ops::global_avg_pool(t, x);  // (N*T, F)
    x = ops::reshape(t, x, {N, T, spec_.conv_channels[2]});

    x = lstm1_.seq(t, x, m.train_params);  // (N,T,H1)
    // normalization over the (N*T) axis, per feature
    x = ops::reshape(t, x, {N * T, spec_.lstm1_hidden});
    x = bn_mid_.fwd(t, x, m.train_params, m.train_stats, m.update_running);
    x = ops::reshape(t, x, {N, T, spec_.lstm1_hidden});
    return lstm2_.seq(t, x, m.train_params);  // (N,T,d_c)
  }

  void collect(std::vector<Parameter*>& out) {
    for (auto& c : conv_) c.collect(out);
    for (auto& b : bn_) b.collect(out);
    lstm1_.collect(out);
    bn_mid_.collect(out);
    lstm2_.collect(out);
  }
  void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) {
    for (auto& b : bn_) b.collect_buffers(out);
    bn_mid_.collect_buffers(out);
  }

 private:
  MaskEncoderSpec spec_;
  Conv2d conv_[3];
  BatchNorm bn_[3];
  LSTM lstm1_, lstm2_;
  BatchNorm bn_mid_;
};

enum class ContextPool { kLast, kMean };

// (N,T,d_c) -> (N,d_c)
template <class S>
int pool_context(TapeT<S>& t, int c, ContextPool mode) {
  const auto& sh = t.val(c).shape;
  if (sh.size() != 3) throw ShapeError("pool_context: input must be (N,T,d_c)");
  return mode == ContextPool::kLast ? ops::select_time(t, c, sh[1] - 1) : ops::mean_time(t, c);
}

}  // namespace wxgan
