#pragma once

// Parameter-owning layers. Each forward builds tape nodes; `train_params`
// picks whether this phase treats the weights as trainable leaves (an
// alternating GAN step only optimizes one side at a time, but gradients still
// flow through the frozen side's operations).

#include <string>
#include <vector>

#include "wxgan/autodiff.hpp"
#include "wxgan/common.hpp"
#include "wxgan/tensor.hpp"

namespace wxgan {

inline Tensor uniform_init(Rng& rng, std::vector<int> shape, int fan_in) {
  Tensor t(std::move(shape));
  double s = std::sqrt(1.0 / double(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = float(rng.uniform(-s, s));
  return t;
}

inline Tensor const_init(std::vector<int> shape, float v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

struct Conv2d {
  Parameter w, b;
  int stride = 1, pad = 0;

  void init(const std::string& name, Rng& rng, int co, int ci, int k, int stride_, int pad_) {
    stride = stride_;
    pad = pad_;
    w = Parameter(name + ".w", uniform_init(rng, {co, ci, k, k}, ci * k * k));
    b = Parameter(name + ".b", const_init({co}, 0.0f));
  }

  template <class S>
  int fwd(TapeT<S>& t, int x, bool train_params) {
    return ops::conv2d(t, x, t.param(w, train_params), t.param(b, train_params), stride, pad);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct ConvTranspose2d {
  Parameter w, b;
  int stride = 1, pad = 0;

  void init(const std::string& name, Rng& rng, int ci, int co, int k, int stride_, int pad_) {
    stride = stride_;
    pad = pad_;
    w = Parameter(name + ".w", uniform_init(rng, {ci, co, k, k}, ci * k * k));
    b = Parameter(name + ".b", const_init({co}, 0.0f));
  }

  template <class S>
  int fwd(TapeT<S>& t, int x, bool train_params) {
    return ops::conv2d_transpose(t, x, t.param(w, train_params), t.param(b, train_params), stride, pad);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct BatchNorm {
  Parameter gamma, beta;
  ops::BatchNormState state;
  double eps = 1e-5;
  double momentum = 0.1;

  void init(const std::string& name, int c) {
    gamma = Parameter(name + ".gamma", const_init({c}, 1.0f));
    beta = Parameter(name + ".beta", const_init({c}, 0.0f));
    state.running_mean = const_init({c}, 0.0f);
    state.running_var = const_init({c}, 1.0f);
  }

  template <class S>
  int fwd(TapeT<S>& t, int x, bool train_params, bool train_stats, bool update_running) {
    return ops::batchnorm(t, x, t.param(gamma, train_params), t.param(beta, train_params), &state,
                          train_stats, update_running, eps, momentum);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void collect_buffers(std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(gamma.name + ".running_mean", &state.running_mean);
    out.emplace_back(gamma.name + ".running_var", &state.running_var);
  }
};

struct Linear {
  Parameter w, b;  // w is (in,out)

  void init(const std::string& name, Rng& rng, int in, int out) {
    w = Parameter(name + ".w", uniform_init(rng, {in, out}, in));
    b = Parameter(name + ".b", const_init({out}, 0.0f));
  }

  template <class S>
  int fwd(TapeT<S>& t, int x, bool train_params) {
    return ops::add_rowvec(t, ops::matmul(t, x, t.param(w, train_params)), t.param(b, train_params));
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Single LSTM layer. Gate blocks all have shape (input+hidden, hidden) plus a
// hidden-size bias; the step computes
//   i,f,o = sigmoid([x,h]Wg + bg), g = tanh([x,h]Wg + bg)
//   c' = f*c + i*g, h' = o*tanh(c')
struct LSTM {
  Parameter wi, wf, wo, wg, bi, bf, bo, bg;
  int input_size = 0, hidden = 0;

  void init(const std::string& name, Rng& rng, int in, int hid) {
    input_size = in;
    hidden = hid;
    int fan = in + hid;
    wi = Parameter(name + ".wi", uniform_init(rng, {fan, hid}, fan));
    wf = Parameter(name + ".wf", uniform_init(rng, {fan, hid}, fan));
    wo = Parameter(name + ".wo", uniform_init(rng, {fan, hid}, fan));
    wg = Parameter(name + ".wg", uniform_init(rng, {fan, hid}, fan));
    bi = Parameter(name + ".bi", const_init({hid}, 0.0f));
    bf = Parameter(name + ".bf", const_init({hid}, 0.0f));
    bo = Parameter(name + ".bo", const_init({hid}, 0.0f));
    bg = Parameter(name + ".bg", const_init({hid}, 0.0f));
  }

  template <class S>
  std::pair<int, int> step(TapeT<S>& t, int x_t, int h, int c, bool train_params) {
    int xc = ops::concat_feat(t, x_t, h);
    auto gate = [&](Parameter& w, Parameter& b) {
      return ops::add_rowvec(t, ops::matmul(t, xc, t.param(w, train_params)), t.param(b, train_params));
    };
    int ig = ops::sigmoid(t, gate(wi, bi));
    int fg = ops::sigmoid(t, gate(wf, bf));
    int og = ops::sigmoid(t, gate(wo, bo));
    int gg = ops::tanh_(t, gate(wg, bg));
    int c2 = ops::add(t, ops::mul(t, fg, c), ops::mul(t, ig, gg));
    int h2 = ops::mul(t, og, ops::tanh_(t, c2));
    return {h2, c2};
  }

  // x: (N,T,input) -> (N,T,hidden); zero initial state
  template <class S>
  int seq(TapeT<S>& t, int x, bool train_params) {
    const auto& vx = t.val(x);
    if (vx.ndim() != 3 || vx.dim(2) != input_size) throw ShapeError("lstm: input shape");
    int N = vx.dim(0), T = vx.dim(1);
    int h = t.leaf(TensorT<S>({N, hidden}), false, "lstm_h0");
    int c = t.leaf(TensorT<S>({N, hidden}), false, "lstm_c0");
    std::vector<int> hs;
    hs.reserve(size_t(T));
    for (int ts = 0; ts < T; ++ts) {
      auto [h2, c2] = step(t, ops::select_time(t, x, ts), h, c, train_params);
      h = h2;
      c = c2;
      hs.push_back(h);
    }
    return ops::stack_time(t, hs);
  }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&wi, &wf, &wo, &wg, &bi, &bf, &bo, &bg}) out.push_back(p);
  }
};

}  // namespace wxgan
