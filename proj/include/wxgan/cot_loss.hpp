#pragma once

// Causal-transport adversarial objective.
//
// The transport cost between two batches of sequences is the per-dimension
// normalized squared distance plus a causality term: increments of the M
// features of the source batch contracted against the h features of the
// target batch over all but the last timestep. The entropically regularized
// transport value is computed by unrolled log-domain Sinkhorn iterations —
// gradients flow through every iteration rather than via an envelope
// shortcut, so the whole objective is checkable by finite differences.
//
// Four batches (two real, two generated) are combined into the mixed
// divergence W(x,y) + W(x',y') - W(x,x') - W(y,y'). The generator descends on
// it; the discriminator pair ascends on it minus a martingale penalty that
// keeps the batch-mean increments of M near zero on real data.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "wxgan/autodiff.hpp"
#include "wxgan/gan_core.hpp"

namespace wxgan {

struct SinkhornConfig {
  double eps = 0.1;     // entropic regularization (the base cost is normalized by T*D)
  int iters = 100;      // unrolled alternating potential updates
  double lambda = 1.0;  // weight of the causality term in the transport cost

  void validate() const {
    if (!(eps > 0.0)) throw ConfigError("sinkhorn: eps must be > 0");
    if (iters < 1) throw ConfigError("sinkhorn: iteration count must be >= 1");
    if (lambda < 0.0) throw ConfigError("sinkhorn: causality weight must be >= 0");
  }
};

namespace cot {

// x (Bx,T,D), y (By,T,D) -> (Bx,By); entry (i,j) = sum_t ||x_i,t - y_j,t||^2.
template <class S>
int base_cost(TapeT<S>& t, int x, int y) {
  // dims copied out before any push: pushes may reallocate the tape's nodes
  std::vector<int> xs = t.val(x).shape, ys = t.val(y).shape;
  if (xs.size() != 3 || ys.size() != 3 || xs[1] != ys[1] || xs[2] != ys[2])
    throw ShapeError("base_cost: wants (B,T,D) batches with matching T and D, got " + shape_str(xs) + " vs " +
                     shape_str(ys));
  int xf = ops::reshape(t, x, {xs[0], xs[1] * xs[2]});
  int yf = ops::reshape(t, y, {ys[0], ys[1] * ys[2]});
  return ops::pairwise_sqdist(t, xf, yf);
}

// Adds the causality term to a cost matrix:
//   C[i,j] += lambda * sum_{j'} sum_{t<T} h_y[j,t,j'] * dm_x[i,t,j']
// where dm_x holds the T-1 forward increments of the source batch's M
// features and h_y the target batch's h features (only the first T-1 steps
// of h enter, so the term never looks at a feature ahead of its increment).
template <class S>
int causal_cost(TapeT<S>& t, int c_base, int h_y, int dm_x, double lambda) {
  std::vector<int> cs = t.val(c_base).shape, hs = t.val(h_y).shape, ds = t.val(dm_x).shape;
  if (cs.size() != 2) throw ShapeError("causal_cost: cost must be a matrix, got " + shape_str(cs));
  if (hs.size() != 3 || ds.size() != 3 || hs[2] != ds[2] || hs[1] != ds[1] + 1)
    throw ShapeError("causal_cost: wants h (B,T,J) and increments (B,T-1,J), got " + shape_str(hs) + " vs " +
                     shape_str(ds));
  if (cs[0] != ds[0] || cs[1] != hs[0])
    throw ShapeError("causal_cost: cost " + shape_str(cs) + " does not pair increments " + shape_str(ds) +
                     " with features " + shape_str(hs));
  if (lambda == 0.0) return c_base;
  int steps = ds[1], J = ds[2];
  int hm = ops::reshape(t, ops::slice_time_prefix(t, h_y, steps), {hs[0], steps * J});
  int dm = ops::reshape(t, dm_x, {ds[0], steps * J});
  int term = ops::matmul_nt(t, dm, hm);
  return ops::add(t, c_base, ops::mul_scalar(t, term, lambda));
}

// Entropic transport plan between uniform marginals: L alternating log-domain
// potential updates (row update first, both potentials start at zero), then
// P[i,j] = exp((f_i + g_j - C[i,j]) / eps) / (m*n). Returned as a tape node so
// callers can inspect marginals or contract it against the cost.
template <class S>
int sinkhorn_plan(TapeT<S>& t, int c, const SinkhornConfig& cfg) {
  cfg.validate();
  const auto& vc = t.val(c);
  if (vc.ndim() != 2) throw ShapeError("sinkhorn: cost must be a matrix, got " + shape_str(vc.shape));
  if (!vc.all_finite()) throw NumericError("sinkhorn: non-finite cost matrix");
  int m = vc.dim(0), n = vc.dim(1);
  const double logm = std::log(double(m)), logn = std::log(double(n));

  int cn = ops::mul_scalar(t, c, -1.0 / cfg.eps);  // -C/eps
  TensorT<S> zero_n({n});
  zero_n.fill(S(0));
  // potentials are tracked divided by eps: phi = f/eps (rows), psi = g/eps (cols)
  int psi = t.leaf(zero_n);
  int phi = -1;
  for (int it = 0; it < cfg.iters; ++it) {
    phi = ops::mul_scalar(t, ops::lse_rows(t, ops::add_scalar(t, ops::add_rowvec(t, cn, psi), -logn)), -1.0);
    psi = ops::mul_scalar(t, ops::lse_cols(t, ops::add_scalar(t, ops::add_colvec(t, cn, phi), -logm)), -1.0);
  }
  int logp = ops::add_colvec(t, ops::add_rowvec(t, cn, psi), phi);
  return ops::mul_scalar(t, ops::exp_(t, logp), 1.0 / (double(m) * double(n)));
}

// Regularized transport value <P, C> under the plan above.
template <class S>
int sinkhorn_value(TapeT<S>& t, int c, const SinkhornConfig& cfg) {
  int p = sinkhorn_plan(t, c, cfg);
  return ops::sum_all(t, ops::mul(t, p, c));
}

// Full causal transport value between a source and a target batch:
// base cost normalized by T*D, plus the causality term built from the
// source's M increments and the target's h features. m_src / h_dst may be -1
// when lambda == 0 (they are never touched). Sequences of a single timestep
// have no increments, so the causality term vanishes for them.
template <class S>
int causal_transport_value(TapeT<S>& t, int x_src, int m_src, int y_dst, int h_dst, const SinkhornConfig& cfg) {
  double T = t.val(x_src).dim(1), D = t.val(x_src).dim(2);
  int c = base_cost(t, x_src, y_dst);
  c = ops::mul_scalar(t, c, 1.0 / (T * D));
  if (cfg.lambda != 0.0 && t.val(m_src).dim(1) > 1) {
    int dm = ops::time_diff(t, m_src);
    c = causal_cost(t, c, h_dst, dm, cfg.lambda);
  }
  return sinkhorn_value(t, c, cfg);
}

// One batch of sequences with its per-timestep discriminator features.
struct SeqFeats {
  int data;  // (B,T,D)
  int h;     // (B,T,J), target-side features; -1 allowed when lambda == 0
  int m;     // (B,T,J), source-side features; -1 allowed when lambda == 0
};

// W(x,y) + W(x',y') - W(x,x') - W(y,y'), each W a causal transport value.
// Calling it with four value-identical batches yields exactly zero: all four
// terms run the same arithmetic on the same numbers.
template <class S>
int mixed_divergence(TapeT<S>& t, const SeqFeats& x, const SeqFeats& xp, const SeqFeats& y, const SeqFeats& yp,
                     const SinkhornConfig& cfg) {
  int B = t.val(x.data).dim(0);
  for (const auto* f : {&xp, &y, &yp})
    if (t.val(f->data).dim(0) != B)
      throw ShapeError("mixed_divergence: all four batches must have equal size");
  int wxy = causal_transport_value(t, x.data, x.m, y.data, y.h, cfg);
  int wxpyp = causal_transport_value(t, xp.data, xp.m, yp.data, yp.h, cfg);
  int wxxp = causal_transport_value(t, x.data, x.m, xp.data, xp.h, cfg);
  int wyyp = causal_transport_value(t, y.data, y.m, yp.data, yp.h, cfg);
  return ops::sub(t, ops::add(t, wxy, wxpyp), ops::add(t, wxxp, wyyp));
}

// sum_{j'} sum_{t<T} | mean over the batch of dM[.,t,j'] |. Zero exactly when
// M behaves as a martingale in batch mean; always >= 0.
template <class S>
int martingale_penalty(TapeT<S>& t, int m_feats) {
  std::vector<int> ms = t.val(m_feats).shape;
  if (ms.size() != 3) throw ShapeError("martingale_penalty: wants (N,T,J), got " + shape_str(ms));
  if (ms[0] < 2) throw ConfigError("martingale_penalty: batch size must be >= 2");
  if (ms[1] < 2) {  // single timestep: no increments to penalize
    TensorT<S> z({1});
    z.fill(S(0));
    return t.leaf(z);
  }
  int dm = ops::time_diff(t, m_feats);  // (N,T-1,J)
  int flat = ops::reshape(t, dm, {ms[0], (ms[1] - 1) * ms[2]});
  return ops::sum_all(t, ops::abs_(t, ops::mean_axis0(t, flat)));
}

// ------------------------------------------------------- model-level losses

// Tape nodes for one optimization step: two real batches, two generated
// batches, and the per-timestep context encoded from each real batch's event
// masks. Fakes generated under ctx1 pair with x, fakes under ctx2 with x'.
struct CotBatchNodes {
  int x, xp;      // real data, (B,T,C,H,W)
  int y, yp;      // generated data, (B,T,C,H,W)
  int ctx1, ctx2; // per-timestep context, (B,T,d_c)
};

struct CotLossParts {
  int loss;       // the node the owning phase optimizes
  int mixed_div;  // mixed divergence (reported by both phases)
  int penalty;    // martingale penalty on real batches (reported by both phases)
};

template <class S>
int flatten_seq(TapeT<S>& t, int a) {
  const auto& sh = t.val(a).shape;
  if (sh.size() < 3) throw ShapeError("flatten_seq: wants (B,T,...), got " + shape_str(sh));
  if (sh.size() == 3) return a;
  int d = 1;
  for (size_t i = 2; i < sh.size(); ++i) d *= sh[i];
  return ops::reshape(t, a, {sh[0], sh[1], d});
}

// Embeds all four batches with both discriminators (each batch under its own
// real-mask context) and assembles the mixed divergence plus the martingale
// penalty, the latter averaged over the two real batches.
template <class S>
std::pair<int, int> mixed_and_penalty(TapeT<S>& t, GanModel& g, const CotBatchNodes& b, const SinkhornConfig& cfg,
                                      bool disc_trainable) {
  auto feats = [&](int data, int ctx) {
    return SeqFeats{flatten_seq(t, data), g.disc_h.embed(t, data, ctx, disc_trainable),
                    g.disc_m.embed(t, data, ctx, disc_trainable)};
  };
  SeqFeats fx = feats(b.x, b.ctx1);
  SeqFeats fxp = feats(b.xp, b.ctx2);
  SeqFeats fy = feats(b.y, b.ctx1);
  SeqFeats fyp = feats(b.yp, b.ctx2);
  int mixed = mixed_divergence(t, fx, fxp, fy, fyp, cfg);
  int pen = ops::mul_scalar(t, ops::add(t, martingale_penalty(t, fx.m), martingale_penalty(t, fxp.m)), 0.5);
  return {mixed, pen};
}

// Generator phase: minimize the mixed divergence. Discriminator parameters
// enter as constants; the penalty depends only on real data and is returned
// for reporting, not optimization (folding it in would push the encoder to
// maximize M's drift).
template <class S>
CotLossParts generator_loss(TapeT<S>& t, GanModel& g, const CotBatchNodes& b, const SinkhornConfig& cfg) {
  auto [mixed, pen] = mixed_and_penalty(t, g, b, cfg, /*disc_trainable=*/false);
  return {mixed, mixed, pen};
}

// Discriminator phase: maximize mixed divergence minus the weighted penalty,
// expressed as a loss to minimize.
template <class S>
CotLossParts discriminator_loss(TapeT<S>& t, GanModel& g, const CotBatchNodes& b, const SinkhornConfig& cfg,
                                double martingale_weight) {
  auto [mixed, pen] = mixed_and_penalty(t, g, b, cfg, /*disc_trainable=*/true);
  int loss = ops::sub(t, ops::mul_scalar(t, pen, martingale_weight), mixed);
  return {loss, mixed, pen};
}

}  // namespace cot
}  // namespace wxgan
