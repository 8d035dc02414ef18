#pragma once

// Reverse-mode tape. A forward pass pushes nodes in topological order; each
// node carries its value and a closure that scatters the node's gradient into
// its inputs' gradients. backward() walks creation order in reverse from a
// scalar loss. Closures capture node ids only: the node vector may reallocate
// while the graph grows.
//
// Accumulations inside kernels run in double regardless of S; storage stays S.
// Every forward value is checked finite when pushed and every gradient before
// use, so a non-finite intermediate reports the first offending operation.

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wxgan/common.hpp"
#include "wxgan/tensor.hpp"

namespace wxgan {

template <class S>
class TapeT {
 public:
  using BackwardFn = std::function<void(TapeT&, int self)>;

  struct Node {
    TensorT<S> value;
    TensorT<S> grad;
    BackwardFn backward;
    bool needs_grad = false;
    const char* op = "leaf";
  };

  int size() const { return int(nodes_.size()); }

  void reset() {
    nodes_.clear();
    bindings_.clear();
    bound_.clear();
  }

  const TensorT<S>& val(int id) const { return nodes_[size_t(id)].value; }
  TensorT<S>& grad(int id) { return nodes_[size_t(id)].grad; }
  bool needs(int id) const { return nodes_[size_t(id)].needs_grad; }
  const char* op_name(int id) const { return nodes_[size_t(id)].op; }

  int leaf(TensorT<S> v, bool needs_grad = false, const char* name = "leaf") {
    return push(std::move(v), needs_grad, name, nullptr);
  }

  // Binds a float-storage Parameter. Repeat binds on one tape reuse the node,
  // so gradient contributions from every use accumulate once per parameter.
  int param(Parameter& p, bool trainable = true) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    int id = push(p.value.template cast<S>(), trainable, "param", nullptr);
    bound_.emplace(&p, id);
    if (trainable) bindings_.emplace_back(id, &p);
    return id;
  }

  int push(TensorT<S> value, bool needs_grad, const char* op, BackwardFn bwd) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value from op '") + op + "'");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.op = op;
    if (needs_grad) n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  // root must be scalar; seeds d(root)/d(root) = 1
  void backward(int root) {
    if (val(root).numel() != 1) throw ShapeError("backward: root must be a scalar");
    for (size_t i = 0; i <= size_t(root); ++i) {
      Node& n = nodes_[i];
      if (n.needs_grad) n.grad = TensorT<S>(n.value.shape);
    }
    grad(root).at(0) = S(1);
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[size_t(id)];
      if (!n.needs_grad || !n.backward) continue;
      if (!n.grad.all_finite())
        throw NumericError(std::string("non-finite gradient at op '") + n.op + "'");
      n.backward(*this, id);
    }
  }

  // adds tape gradients back into bound Parameters (cast to float storage)
  void collect_param_grads() {
    for (auto& [id, p] : bindings_) {
      const TensorT<S>& g = nodes_[size_t(id)].grad;
      if (g.numel() == 0) continue;  // backward never reached this binding
      for (int64_t i = 0; i < g.numel(); ++i) p->grad.at(i) += float(g.at(i));
    }
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::pair<int, Parameter*>> bindings_;
  std::unordered_map<Parameter*, int> bound_;
};

using Tape = TapeT<float>;

namespace ops {

// ---------------------------------------------------------------- elementwise

template <class S>
int add(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  if (!va.same_shape(t.val(b))) throw ShapeError("add: shape mismatch");
  TensorT<S> out(va.shape);
  const auto& vb = t.val(b);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = va.at(i) + vb.at(i);
  return t.push(std::move(out), t.needs(a) || t.needs(b), "add", [a, b](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += g.at(i);
    if (tp.needs(b))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(b).at(i) += g.at(i);
  });
}

template <class S>
int sub(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  if (!va.same_shape(t.val(b))) throw ShapeError("sub: shape mismatch");
  TensorT<S> out(va.shape);
  const auto& vb = t.val(b);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = va.at(i) - vb.at(i);
  return t.push(std::move(out), t.needs(a) || t.needs(b), "sub", [a, b](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += g.at(i);
    if (tp.needs(b))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(b).at(i) -= g.at(i);
  });
}

template <class S>
int mul(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  if (!va.same_shape(t.val(b))) throw ShapeError("mul: shape mismatch");
  TensorT<S> out(va.shape);
  const auto& vb = t.val(b);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = va.at(i) * vb.at(i);
  return t.push(std::move(out), t.needs(a) || t.needs(b), "mul", [a, b](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += g.at(i) * tp.val(b).at(i);
    if (tp.needs(b))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(b).at(i) += g.at(i) * tp.val(a).at(i);
  });
}

template <class S>
int add_scalar(TapeT<S>& t, int a, double c) {
  TensorT<S> out(t.val(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = t.val(a).at(i) + S(c);
  return t.push(std::move(out), t.needs(a), "add_scalar", [a](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += g.at(i);
  });
}

template <class S>
int mul_scalar(TapeT<S>& t, int a, double c) {
  TensorT<S> out(t.val(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = S(double(t.val(a).at(i)) * c);
  return t.push(std::move(out), t.needs(a), "mul_scalar", [a, c](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += S(double(g.at(i)) * c);
  });
}

template <class S>
int sigmoid(TapeT<S>& t, int a) {
  TensorT<S> out(t.val(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = S(1.0 / (1.0 + std::exp(-double(t.val(a).at(i)))));
  return t.push(std::move(out), t.needs(a), "sigmoid", [a](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    const auto& o = tp.val(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += g.at(i) * o.at(i) * (S(1) - o.at(i));
  });
}

template <class S>
int tanh_(TapeT<S>& t, int a) {
  TensorT<S> out(t.val(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = S(std::tanh(double(t.val(a).at(i))));
  return t.push(std::move(out), t.needs(a), "tanh", [a](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    const auto& o = tp.val(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += g.at(i) * (S(1) - o.at(i) * o.at(i));
  });
}

template <class S>
int leaky_relu(TapeT<S>& t, int a, double slope = 0.2) {
  TensorT<S> out(t.val(a).shape);
  const auto& va = t.val(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = va.at(i) > S(0) ? va.at(i) : S(double(va.at(i)) * slope);
  return t.push(std::move(out), t.needs(a), "leaky_relu", [a, slope](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    const auto& v = tp.val(a);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i)
        tp.grad(a).at(i) += v.at(i) > S(0) ? g.at(i) : S(double(g.at(i)) * slope);
  });
}

template <class S>
int exp_(TapeT<S>& t, int a) {
  TensorT<S> out(t.val(a).shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = S(std::exp(double(t.val(a).at(i))));
  return t.push(std::move(out), t.needs(a), "exp", [a](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    const auto& o = tp.val(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += g.at(i) * o.at(i);
  });
}

// |x|; subgradient 0 at x = 0
template <class S>
int abs_(TapeT<S>& t, int a) {
  TensorT<S> out(t.val(a).shape);
  const auto& va = t.val(a);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = va.at(i) < S(0) ? -va.at(i) : va.at(i);
  return t.push(std::move(out), t.needs(a), "abs", [a](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    const auto& v = tp.val(a);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) {
        S s = v.at(i) > S(0) ? S(1) : (v.at(i) < S(0) ? S(-1) : S(0));
        tp.grad(a).at(i) += g.at(i) * s;
      }
  });
}

// ------------------------------------------------------------------- reshape

template <class S>
int reshape(TapeT<S>& t, int a, std::vector<int> shape) {
  if (TensorT<S>::numel_of(shape) != t.val(a).numel()) throw ShapeError("reshape: element count mismatch");
  TensorT<S> out(std::move(shape), t.val(a).data);
  return t.push(std::move(out), t.needs(a), "reshape", [a](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(a).at(i) += g.at(i);
  });
}

// ------------------------------------------------------------------- matmul

template <class S>
int matmul(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  const auto& vb = t.val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0)) throw ShapeError("matmul: incompatible");
  int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  TensorT<S> out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      const S* pa = va.ptr() + int64_t(i) * k;
      const S* pb = vb.ptr() + j;
      for (int kk = 0; kk < k; ++kk) acc += double(pa[kk]) * double(pb[int64_t(kk) * n]);
      out.at(int64_t(i) * n + j) = S(acc);
    }
  return t.push(std::move(out), t.needs(a) || t.needs(b), "matmul", [a, b, m, k, n](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      const auto& vb2 = tp.val(b);
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += double(g.at(int64_t(i) * n + j)) * double(vb2.at(int64_t(kk) * n + j));
          ga.at(int64_t(i) * k + kk) += S(acc);
        }
    }
    if (tp.needs(b)) {
      auto& gb = tp.grad(b);
      const auto& va2 = tp.val(a);
      for (int kk = 0; kk < k; ++kk)
        for (int j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += double(va2.at(int64_t(i) * k + kk)) * double(g.at(int64_t(i) * n + j));
          gb.at(int64_t(kk) * n + j) += S(acc);
        }
    }
  });
}

// A (m,k) times B (n,k) transposed -> (m,n); entry (i,j) = sum_k A[i,k]*B[j,k].
template <class S>
int matmul_nt(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  const auto& vb = t.val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(1)) throw ShapeError("matmul_nt: incompatible");
  int m = va.dim(0), k = va.dim(1), n = vb.dim(0);
  TensorT<S> out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      const S* pa = va.ptr() + int64_t(i) * k;
      const S* pb = vb.ptr() + int64_t(j) * k;
      for (int kk = 0; kk < k; ++kk) acc += double(pa[kk]) * double(pb[kk]);
      out.at(int64_t(i) * n + j) = S(acc);
    }
  return t.push(std::move(out), t.needs(a) || t.needs(b), "matmul_nt", [a, b, m, k, n](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      const auto& vb2 = tp.val(b);
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += double(g.at(int64_t(i) * n + j)) * double(vb2.at(int64_t(j) * k + kk));
          ga.at(int64_t(i) * k + kk) += S(acc);
        }
    }
    if (tp.needs(b)) {
      auto& gb = tp.grad(b);
      const auto& va2 = tp.val(a);
      for (int j = 0; j < n; ++j)
        for (int kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += double(g.at(int64_t(i) * n + j)) * double(va2.at(int64_t(i) * k + kk));
          gb.at(int64_t(j) * k + kk) += S(acc);
        }
    }
  });
}

// ------------------------------------------------------- broadcast additions

template <class S>
int add_rowvec(TapeT<S>& t, int m, int v) {
  const auto& vm = t.val(m);
  const auto& vv = t.val(v);
  if (vm.ndim() != 2 || vv.ndim() != 1 || vv.dim(0) != vm.dim(1)) throw ShapeError("add_rowvec: incompatible");
  int r = vm.dim(0), c = vm.dim(1);
  TensorT<S> out(vm.shape);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(int64_t(i) * c + j) = vm.at(int64_t(i) * c + j) + vv.at(j);
  return t.push(std::move(out), t.needs(m) || t.needs(v), "add_rowvec", [m, v, r, c](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(m))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(m).at(i) += g.at(i);
    if (tp.needs(v)) {
      auto& gv = tp.grad(v);
      for (int j = 0; j < c; ++j) {
        double acc = 0.0;
        for (int i = 0; i < r; ++i) acc += double(g.at(int64_t(i) * c + j));
        gv.at(j) += S(acc);
      }
    }
  });
}

template <class S>
int add_colvec(TapeT<S>& t, int m, int u) {
  const auto& vm = t.val(m);
  const auto& vu = t.val(u);
  if (vm.ndim() != 2 || vu.ndim() != 1 || vu.dim(0) != vm.dim(0)) throw ShapeError("add_colvec: incompatible");
  int r = vm.dim(0), c = vm.dim(1);
  TensorT<S> out(vm.shape);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(int64_t(i) * c + j) = vm.at(int64_t(i) * c + j) + vu.at(i);
  return t.push(std::move(out), t.needs(m) || t.needs(u), "add_colvec", [m, u, r, c](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(m))
      for (int64_t i = 0; i < g.numel(); ++i) tp.grad(m).at(i) += g.at(i);
    if (tp.needs(u)) {
      auto& gu = tp.grad(u);
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) acc += double(g.at(int64_t(i) * c + j));
        gu.at(i) += S(acc);
      }
    }
  });
}

// -------------------------------------------------------------- reductions

template <class S>
int sum_all(TapeT<S>& t, int a) {
  double acc = 0.0;
  for (int64_t i = 0; i < t.val(a).numel(); ++i) acc += double(t.val(a).at(i));
  TensorT<S> out({1});
  out.at(0) = S(acc);
  return t.push(std::move(out), t.needs(a), "sum_all", [a](TapeT<S>& tp, int self) {
    S g = tp.grad(self).at(0);
    if (tp.needs(a))
      for (int64_t i = 0; i < tp.grad(a).numel(); ++i) tp.grad(a).at(i) += g;
  });
}

template <class S>
int mean_all(TapeT<S>& t, int a) {
  int64_t n = t.val(a).numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += double(t.val(a).at(i));
  TensorT<S> out({1});
  out.at(0) = S(acc / double(n));
  return t.push(std::move(out), t.needs(a), "mean_all", [a, n](TapeT<S>& tp, int self) {
    S g = S(double(tp.grad(self).at(0)) / double(n));
    if (tp.needs(a))
      for (int64_t i = 0; i < tp.grad(a).numel(); ++i) tp.grad(a).at(i) += g;
  });
}

// mean over the leading axis: (N, rest...) -> (rest...)
template <class S>
int mean_axis0(TapeT<S>& t, int a) {
  const auto& va = t.val(a);
  if (va.ndim() < 2) throw ShapeError("mean_axis0: needs at least 2 dims");
  int n = va.dim(0);
  int64_t rest = va.numel() / n;
  std::vector<int> shp(va.shape.begin() + 1, va.shape.end());
  TensorT<S> out(shp);
  for (int64_t j = 0; j < rest; ++j) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += double(va.at(int64_t(i) * rest + j));
    out.at(j) = S(acc / double(n));
  }
  return t.push(std::move(out), t.needs(a), "mean_axis0", [a, n, rest](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int i = 0; i < n; ++i)
        for (int64_t j = 0; j < rest; ++j) ga.at(int64_t(i) * rest + j) += S(double(g.at(j)) / double(n));
    }
  });
}

// --------------------------------------------------------------- logsumexp

template <class S>
int lse_rows(TapeT<S>& t, int a) {
  const auto& va = t.val(a);
  if (va.ndim() != 2) throw ShapeError("lse_rows: needs matrix");
  int r = va.dim(0), c = va.dim(1);
  TensorT<S> out({r});
  for (int i = 0; i < r; ++i) {
    const S* p = va.ptr() + int64_t(i) * c;
    double mx = double(p[0]);
    for (int j = 1; j < c; ++j) mx = std::max(mx, double(p[j]));
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += std::exp(double(p[j]) - mx);
    out.at(i) = S(mx + std::log(acc));
  }
  return t.push(std::move(out), t.needs(a), "lse_rows", [a, r, c](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    const auto& o = tp.val(self);
    const auto& v = tp.val(a);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          ga.at(int64_t(i) * c + j) += S(double(g.at(i)) * std::exp(double(v.at(int64_t(i) * c + j)) - double(o.at(i))));
    }
  });
}

template <class S>
int lse_cols(TapeT<S>& t, int a) {
  const auto& va = t.val(a);
  if (va.ndim() != 2) throw ShapeError("lse_cols: needs matrix");
  int r = va.dim(0), c = va.dim(1);
  TensorT<S> out({c});
  for (int j = 0; j < c; ++j) {
    double mx = double(va.at(j));
    for (int i = 1; i < r; ++i) mx = std::max(mx, double(va.at(int64_t(i) * c + j)));
    double acc = 0.0;
    for (int i = 0; i < r; ++i) acc += std::exp(double(va.at(int64_t(i) * c + j)) - mx);
    out.at(j) = S(mx + std::log(acc));
  }
  return t.push(std::move(out), t.needs(a), "lse_cols", [a, r, c](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    const auto& o = tp.val(self);
    const auto& v = tp.val(a);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          ga.at(int64_t(i) * c + j) += S(double(g.at(j)) * std::exp(double(v.at(int64_t(i) * c + j)) - double(o.at(j))));
    }
  });
}

// ------------------------------------------------------- sequence plumbing

// (N,T,F) -> (N,F) at step tstep
template <class S>
int select_time(TapeT<S>& t, int a, int tstep) {
  const auto& va = t.val(a);
  if (va.ndim() != 3) throw ShapeError("select_time: needs (N,T,F)");
  int N = va.dim(0), T = va.dim(1), F = va.dim(2);
  if (tstep < 0 || tstep >= T) throw ShapeError("select_time: index out of range");
  TensorT<S> out({N, F});
  for (int nn = 0; nn < N; ++nn)
    for (int f = 0; f < F; ++f) out.at(int64_t(nn) * F + f) = va.at((int64_t(nn) * T + tstep) * F + f);
  return t.push(std::move(out), t.needs(a), "select_time", [a, tstep](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      int N = tp.val(a).dim(0), T = tp.val(a).dim(1), F = tp.val(a).dim(2);
      for (int nn = 0; nn < N; ++nn)
        for (int f = 0; f < F; ++f) ga.at((int64_t(nn) * T + tstep) * F + f) += g.at(int64_t(nn) * F + f);
    }
  });
}

// T tensors of (N,F) -> (N,T,F)
template <class S>
int stack_time(TapeT<S>& t, const std::vector<int>& steps) {
  if (steps.empty()) throw ShapeError("stack_time: empty");
  const auto& v0 = t.val(steps[0]);
  if (v0.ndim() != 2) throw ShapeError("stack_time: steps must be (N,F)");
  int N = v0.dim(0), F = v0.dim(1), T = int(steps.size());
  TensorT<S> out({N, T, F});
  bool ng = false;
  for (int ts = 0; ts < T; ++ts) {
    const auto& v = t.val(steps[size_t(ts)]);
    require_shape(v, {N, F}, "stack_time");
    ng = ng || t.needs(steps[size_t(ts)]);
    for (int nn = 0; nn < N; ++nn)
      for (int f = 0; f < F; ++f) out.at((int64_t(nn) * T + ts) * F + f) = v.at(int64_t(nn) * F + f);
  }
  std::vector<int> ids = steps;
  return t.push(std::move(out), ng, "stack_time", [ids, N, T, F](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    for (int ts = 0; ts < T; ++ts) {
      int src = ids[size_t(ts)];
      if (!tp.needs(src)) continue;
      auto& gs = tp.grad(src);
      for (int nn = 0; nn < N; ++nn)
        for (int f = 0; f < F; ++f) gs.at(int64_t(nn) * F + f) += g.at((int64_t(nn) * T + ts) * F + f);
    }
  });
}

// (N,F) -> (N,T,F), replicated along a new time axis
template <class S>
int broadcast_time(TapeT<S>& t, int a, int T) {
  const auto& va = t.val(a);
  if (va.ndim() != 2) throw ShapeError("broadcast_time: needs (N,F)");
  int N = va.dim(0), F = va.dim(1);
  TensorT<S> out({N, T, F});
  for (int nn = 0; nn < N; ++nn)
    for (int ts = 0; ts < T; ++ts)
      for (int f = 0; f < F; ++f) out.at((int64_t(nn) * T + ts) * F + f) = va.at(int64_t(nn) * F + f);
  return t.push(std::move(out), t.needs(a), "broadcast_time", [a, N, T, F](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int nn = 0; nn < N; ++nn)
        for (int f = 0; f < F; ++f) {
          double acc = 0.0;
          for (int ts = 0; ts < T; ++ts) acc += double(g.at((int64_t(nn) * T + ts) * F + f));
          ga.at(int64_t(nn) * F + f) += S(acc);
        }
    }
  });
}

// (N,T,F) -> (N,F), mean over time
template <class S>
int mean_time(TapeT<S>& t, int a) {
  const auto& va = t.val(a);
  if (va.ndim() != 3) throw ShapeError("mean_time: needs (N,T,F)");
  int N = va.dim(0), T = va.dim(1), F = va.dim(2);
  TensorT<S> out({N, F});
  for (int nn = 0; nn < N; ++nn)
    for (int f = 0; f < F; ++f) {
      double acc = 0.0;
      for (int ts = 0; ts < T; ++ts) acc += double(va.at((int64_t(nn) * T + ts) * F + f));
      out.at(int64_t(nn) * F + f) = S(acc / double(T));
    }
  return t.push(std::move(out), t.needs(a), "mean_time", [a, N, T, F](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int nn = 0; nn < N; ++nn)
        for (int ts = 0; ts < T; ++ts)
          for (int f = 0; f < F; ++f)
            ga.at((int64_t(nn) * T + ts) * F + f) += S(double(g.at(int64_t(nn) * F + f)) / double(T));
    }
  });
}

// (N,T,F) -> (N,T-1,F): out[:,t,:] = in[:,t+1,:] - in[:,t,:]
template <class S>
int time_diff(TapeT<S>& t, int a) {
  const auto& va = t.val(a);
  if (va.ndim() != 3) throw ShapeError("time_diff: needs (N,T,F)");
  int N = va.dim(0), T = va.dim(1), F = va.dim(2);
  if (T < 2) throw ShapeError("time_diff: needs T >= 2");
  TensorT<S> out({N, T - 1, F});
  for (int nn = 0; nn < N; ++nn)
    for (int ts = 0; ts + 1 < T; ++ts)
      for (int f = 0; f < F; ++f)
        out.at((int64_t(nn) * (T - 1) + ts) * F + f) =
            va.at((int64_t(nn) * T + ts + 1) * F + f) - va.at((int64_t(nn) * T + ts) * F + f);
  return t.push(std::move(out), t.needs(a), "time_diff", [a, N, T, F](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int nn = 0; nn < N; ++nn)
        for (int ts = 0; ts + 1 < T; ++ts)
          for (int f = 0; f < F; ++f) {
            S gv = g.at((int64_t(nn) * (T - 1) + ts) * F + f);
            ga.at((int64_t(nn) * T + ts + 1) * F + f) += gv;
            ga.at((int64_t(nn) * T + ts) * F + f) -= gv;
          }
    }
  });
}

// (N,T,J) -> (N,Tkeep,J), keeping time steps [0,Tkeep)
template <class S>
int slice_time_prefix(TapeT<S>& t, int a, int Tkeep) {
  const auto& va = t.val(a);
  if (va.ndim() != 3) throw ShapeError("slice_time_prefix: needs (N,T,F)");
  int N = va.dim(0), T = va.dim(1), F = va.dim(2);
  if (Tkeep < 1 || Tkeep > T) throw ShapeError("slice_time_prefix: bad length");
  TensorT<S> out({N, Tkeep, F});
  for (int nn = 0; nn < N; ++nn)
    for (int ts = 0; ts < Tkeep; ++ts)
      for (int f = 0; f < F; ++f)
        out.at((int64_t(nn) * Tkeep + ts) * F + f) = va.at((int64_t(nn) * T + ts) * F + f);
  return t.push(std::move(out), t.needs(a), "slice_time_prefix", [a, N, T, Tkeep, F](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int nn = 0; nn < N; ++nn)
        for (int ts = 0; ts < Tkeep; ++ts)
          for (int f = 0; f < F; ++f)
            ga.at((int64_t(nn) * T + ts) * F + f) += g.at((int64_t(nn) * Tkeep + ts) * F + f);
    }
  });
}

// ----------------------------------------------------------- concatenation

template <class S>
int concat_feat(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  const auto& vb = t.val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(0) != vb.dim(0)) throw ShapeError("concat_feat: incompatible");
  int N = va.dim(0), Fa = va.dim(1), Fb = vb.dim(1);
  TensorT<S> out({N, Fa + Fb});
  for (int nn = 0; nn < N; ++nn) {
    for (int f = 0; f < Fa; ++f) out.at(int64_t(nn) * (Fa + Fb) + f) = va.at(int64_t(nn) * Fa + f);
    for (int f = 0; f < Fb; ++f) out.at(int64_t(nn) * (Fa + Fb) + Fa + f) = vb.at(int64_t(nn) * Fb + f);
  }
  return t.push(std::move(out), t.needs(a) || t.needs(b), "concat_feat", [a, b, N, Fa, Fb](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int nn = 0; nn < N; ++nn)
        for (int f = 0; f < Fa; ++f) ga.at(int64_t(nn) * Fa + f) += g.at(int64_t(nn) * (Fa + Fb) + f);
    }
    if (tp.needs(b)) {
      auto& gb = tp.grad(b);
      for (int nn = 0; nn < N; ++nn)
        for (int f = 0; f < Fb; ++f) gb.at(int64_t(nn) * Fb + f) += g.at(int64_t(nn) * (Fa + Fb) + Fa + f);
    }
  });
}

template <class S>
int concat_channels(TapeT<S>& t, int a, int b) {
  const auto& va = t.val(a);
  const auto& vb = t.val(b);
  if (va.ndim() != 4 || vb.ndim() != 4 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2) ||
      va.dim(3) != vb.dim(3))
    throw ShapeError("concat_channels: incompatible");
  int N = va.dim(0), Ca = va.dim(1), Cb = vb.dim(1), H = va.dim(2), W = va.dim(3);
  int64_t hw = int64_t(H) * W;
  TensorT<S> out({N, Ca + Cb, H, W});
  for (int nn = 0; nn < N; ++nn) {
    S* po = out.ptr() + int64_t(nn) * (Ca + Cb) * hw;
    const S* pa = va.ptr() + int64_t(nn) * Ca * hw;
    const S* pb = vb.ptr() + int64_t(nn) * Cb * hw;
    for (int64_t i = 0; i < Ca * hw; ++i) po[i] = pa[i];
    for (int64_t i = 0; i < Cb * hw; ++i) po[Ca * hw + i] = pb[i];
  }
  return t.push(std::move(out), t.needs(a) || t.needs(b), "concat_channels",
                [a, b, N, Ca, Cb, hw](TapeT<S>& tp, int self) {
                  const auto& g = tp.grad(self);
                  if (tp.needs(a)) {
                    auto& ga = tp.grad(a);
                    for (int nn = 0; nn < N; ++nn)
                      for (int64_t i = 0; i < Ca * hw; ++i)
                        ga.at(int64_t(nn) * Ca * hw + i) += g.at(int64_t(nn) * (Ca + Cb) * hw + i);
                  }
                  if (tp.needs(b)) {
                    auto& gb = tp.grad(b);
                    for (int nn = 0; nn < N; ++nn)
                      for (int64_t i = 0; i < Cb * hw; ++i)
                        gb.at(int64_t(nn) * Cb * hw + i) += g.at(int64_t(nn) * (Ca + Cb) * hw + Ca * hw + i);
                  }
                });
}

// (N,C) -> (N,C,H,W), value replicated over the spatial plane
template <class S>
int broadcast_vec_to_map(TapeT<S>& t, int a, int H, int W) {
  const auto& va = t.val(a);
  if (va.ndim() != 2) throw ShapeError("broadcast_vec_to_map: needs (N,C)");
  int N = va.dim(0), C = va.dim(1);
  int64_t hw = int64_t(H) * W;
  TensorT<S> out({N, C, H, W});
  for (int nn = 0; nn < N; ++nn)
    for (int c = 0; c < C; ++c) {
      S v = va.at(int64_t(nn) * C + c);
      S* p = out.ptr() + (int64_t(nn) * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] = v;
    }
  return t.push(std::move(out), t.needs(a), "broadcast_vec_to_map", [a, N, C, hw](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          const S* p = g.ptr() + (int64_t(nn) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) acc += double(p[i]);
          ga.at(int64_t(nn) * C + c) += S(acc);
        }
    }
  });
}

template <class S>
int global_avg_pool(TapeT<S>& t, int a) {
  const auto& va = t.val(a);
  if (va.ndim() != 4) throw ShapeError("global_avg_pool: needs (N,C,H,W)");
  int N = va.dim(0), C = va.dim(1);
  int64_t hw = int64_t(va.dim(2)) * va.dim(3);
  TensorT<S> out({N, C});
  for (int nn = 0; nn < N; ++nn)
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      const S* p = va.ptr() + (int64_t(nn) * C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) acc += double(p[i]);
      out.at(int64_t(nn) * C + c) = S(acc / double(hw));
    }
  return t.push(std::move(out), t.needs(a), "global_avg_pool", [a, N, C, hw](TapeT<S>& tp, int self) {
    const auto& g = tp.grad(self);
    if (tp.needs(a)) {
      auto& ga = tp.grad(a);
      for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c) {
          S gv = S(double(g.at(int64_t(nn) * C + c)) / double(hw));
          S* p = ga.ptr() + (int64_t(nn) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) p[i] += gv;
        }
    }
  });
}

// y[n,c,:,:] = x[n,c,:,:] * s[c] + b[c]
template <class S>
int channel_affine(TapeT<S>& t, int x, int s, int b) {
  const auto& vx = t.val(x);
  const auto& vs = t.val(s);
  const auto& vb = t.val(b);
  if (vx.ndim() != 4 || vs.ndim() != 1 || vb.ndim() != 1 || vs.dim(0) != vx.dim(1) || vb.dim(0) != vx.dim(1))
    throw ShapeError("channel_affine: incompatible");
  int N = vx.dim(0), C = vx.dim(1);
  int64_t hw = int64_t(vx.dim(2)) * vx.dim(3);
  TensorT<S> out(vx.shape);
  for (int nn = 0; nn < N; ++nn)
    for (int c = 0; c < C; ++c) {
      const S* px = vx.ptr() + (int64_t(nn) * C + c) * hw;
      S* po = out.ptr() + (int64_t(nn) * C + c) * hw;
      S sc = vs.at(c), bc = vb.at(c);
      for (int64_t i = 0; i < hw; ++i) po[i] = px[i] * sc + bc;
    }
  return t.push(std::move(out), t.needs(x) || t.needs(s) || t.needs(b), "channel_affine",
                [x, s, b, N, C, hw](TapeT<S>& tp, int self) {
                  const auto& g = tp.grad(self);
                  const auto& vx2 = tp.val(x);
                  const auto& vs2 = tp.val(s);
                  if (tp.needs(x)) {
                    auto& gx = tp.grad(x);
                    for (int nn = 0; nn < N; ++nn)
                      for (int c = 0; c < C; ++c) {
                        const S* pg = g.ptr() + (int64_t(nn) * C + c) * hw;
                        S* p = gx.ptr() + (int64_t(nn) * C + c) * hw;
                        S sc = vs2.at(c);
                        for (int64_t i = 0; i < hw; ++i) p[i] += pg[i] * sc;
                      }
                  }
                  if (tp.needs(s)) {
                    auto& gs = tp.grad(s);
                    for (int c = 0; c < C; ++c) {
                      double acc = 0.0;
                      for (int nn = 0; nn < N; ++nn) {
                        const S* pg = g.ptr() + (int64_t(nn) * C + c) * hw;
                        const S* px = vx2.ptr() + (int64_t(nn) * C + c) * hw;
                        for (int64_t i = 0; i < hw; ++i) acc += double(pg[i]) * double(px[i]);
                      }
                      gs.at(c) += S(acc);
                    }
                  }
                  if (tp.needs(b)) {
                    auto& gb = tp.grad(b);
                    for (int c = 0; c < C; ++c) {
                      double acc = 0.0;
                      for (int nn = 0; nn < N; ++nn) {
                        const S* pg = g.ptr() + (int64_t(nn) * C + c) * hw;
                        for (int64_t i = 0; i < hw; ++i) acc += double(pg[i]);
                      }
                      gb.at(c) += S(acc);
                    }
                  }
                });
}

// -------------------------------------------------------- pairwise distance

// x:(m,D), y:(n,D) -> (m,n) with entry ij = sum_d (x_id - y_jd)^2
template <class S>
int pairwise_sqdist(TapeT<S>& t, int x, int y) {
  const auto& vx = t.val(x);
  const auto& vy = t.val(y);
  if (vx.ndim() != 2 || vy.ndim() != 2 || vx.dim(1) != vy.dim(1)) throw ShapeError("pairwise_sqdist: incompatible");
  int m = vx.dim(0), n = vy.dim(0), D = vx.dim(1);
  TensorT<S> out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const S* px = vx.ptr() + int64_t(i) * D;
      const S* py = vy.ptr() + int64_t(j) * D;
      double acc = 0.0;
      for (int d = 0; d < D; ++d) {
        double df = double(px[d]) - double(py[d]);
        acc += df * df;
      }
      out.at(int64_t(i) * n + j) = S(acc);
    }
  return t.push(std::move(out), t.needs(x) || t.needs(y), "pairwise_sqdist",
                [x, y, m, n, D](TapeT<S>& tp, int self) {
                  const auto& g = tp.grad(self);
                  const auto& vx2 = tp.val(x);
                  const auto& vy2 = tp.val(y);
                  if (tp.needs(x)) {
                    auto& gx = tp.grad(x);
                    for (int i = 0; i < m; ++i)
                      for (int d = 0; d < D; ++d) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                          acc += double(g.at(int64_t(i) * n + j)) *
                                 2.0 * (double(vx2.at(int64_t(i) * D + d)) - double(vy2.at(int64_t(j) * D + d)));
                        gx.at(int64_t(i) * D + d) += S(acc);
                      }
                  }
                  if (tp.needs(y)) {
                    auto& gy = tp.grad(y);
                    for (int j = 0; j < n; ++j)
                      for (int d = 0; d < D; ++d) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                          acc += double(g.at(int64_t(i) * n + j)) *
                                 (-2.0) * (double(vx2.at(int64_t(i) * D + d)) - double(vy2.at(int64_t(j) * D + d)));
                        gy.at(int64_t(j) * D + d) += S(acc);
                      }
                  }
                });
}

// -------------------------------------------------------------- convolution

// out spatial size for correlation with zero padding
inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  int num = in + 2 * pad - kernel;
  if (num < 0) throw ShapeError("conv: kernel larger than padded input");
  return num / stride + 1;
}

// Walk tables shared by the convolution kernels. Computed once per call so the
// hot loops run branch-free and division-free. Each rewritten loop visits
// exactly the taps the straightforward bounds-checked nested loop visits, in
// the same ascending order, so per-element summation order (and therefore the
// exact floating-point result) is unchanged.
namespace conv_detail {

// Correlation walk i = q*stride - pad + r: the in-bounds taps for coordinate q
// form the contiguous range [lo[q], hi[q]).
inline void corr_tap_ranges(int Q, int k, int stride, int pad, int in_dim, std::vector<int>& lo,
                            std::vector<int>& hi) {
  lo.resize(size_t(Q));
  hi.resize(size_t(Q));
  for (int q = 0; q < Q; ++q) {
    int base = q * stride - pad;
    int l = 0;
    while (l < k && base + l < 0) ++l;
    int h = k;
    while (h > l && base + h - 1 >= in_dim) --h;
    lo[size_t(q)] = l;
    hi[size_t(q)] = h;
  }
}

// Gather walk i = (q + pad - r) / stride: per coordinate q, the ascending taps
// r whose division is exact and whose quotient lands in [0, in_dim), stored as
// (r, i) pairs indexed by begin[q] .. begin[q+1].
struct GatherTaps {
  std::vector<int> begin;
  std::vector<std::array<int, 2>> pairs;
};
inline GatherTaps gather_taps(int Q, int k, int stride, int pad, int in_dim) {
  GatherTaps g;
  g.begin.assign(size_t(Q) + 1, 0);
  for (int q = 0; q < Q; ++q) {
    for (int r = 0; r < k; ++r) {
      int num = q + pad - r;
      if (num >= 0 && num % stride == 0 && num / stride < in_dim)
        g.pairs.push_back({r, num / stride});
    }
    g.begin[size_t(q) + 1] = int(g.pairs.size());
  }
  return g;
}

// Per-tap walk range: for tap r, coordinates q in [lo[r], hi[r]) keep
// q*stride - pad + r inside [0, in_dim).
inline void tap_walk_ranges(int k, int Q, int stride, int pad, int in_dim, std::vector<int>& lo,
                            std::vector<int>& hi) {
  lo.assign(size_t(k), 0);
  hi.assign(size_t(k), 0);
  for (int r = 0; r < k; ++r) {
    int l = 0;
    while (l < Q && l * stride - pad + r < 0) ++l;
    int h = Q;
    while (h > l && (h - 1) * stride - pad + r >= in_dim) --h;
    lo[size_t(r)] = l;
    hi[size_t(r)] = h;
  }
}

}  // namespace conv_detail

// Cross-correlation, weights (Co,Ci,kh,kw). Per output element the sum runs
// bias first, then ci-major, kh, kw; tests rely on this exact order.
template <class S>
int conv2d(TapeT<S>& t, int x, int w, int b, int stride, int pad) {
  const auto& vx = t.val(x);
  const auto& vw = t.val(w);
  const auto& vb = t.val(b);
  if (vx.ndim() != 4 || vw.ndim() != 4 || vb.ndim() != 1) throw ShapeError("conv2d: bad ranks");
  if (vw.dim(1) != vx.dim(1) || vb.dim(0) != vw.dim(0)) throw ShapeError("conv2d: channel mismatch");
  int N = vx.dim(0), Ci = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  int Co = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
  int OH = conv_out_dim(H, kh, stride, pad), OW = conv_out_dim(W, kw, stride, pad);
  TensorT<S> out({N, Co, OH, OW});
  const S* X = vx.ptr();
  const S* Wt = vw.ptr();
  const S* Bp = vb.ptr();
  S* O = out.ptr();
  std::vector<int> rlo, rhi, clo, chi;
  conv_detail::corr_tap_ranges(OH, kh, stride, pad, H, rlo, rhi);
  conv_detail::corr_tap_ranges(OW, kw, stride, pad, W, clo, chi);
  const int64_t HW = int64_t(H) * W, KHW = int64_t(kh) * kw;
  ThreadPool::instance().parallel_for(int64_t(N) * Co, [&](int64_t plane_lo, int64_t plane_hi) {
    for (int64_t plane = plane_lo; plane < plane_hi; ++plane) {
      int nn = int(plane / Co), co = int(plane % Co);
      const S* Xn = X + int64_t(nn) * Ci * HW;
      const S* Wco = Wt + int64_t(co) * Ci * KHW;
      const double bias = double(Bp[co]);
      S* Op = O + plane * OH * OW;
      for (int oh = 0; oh < OH; ++oh) {
        const int r0 = rlo[size_t(oh)], r1 = rhi[size_t(oh)];
        const int ih0 = oh * stride - pad;
        for (int ow = 0; ow < OW; ++ow) {
          const int c0 = clo[size_t(ow)], c1 = chi[size_t(ow)];
          const int iw0 = ow * stride - pad;
          double acc = bias;
          const S* xci = Xn;
          const S* wci = Wco;
          for (int ci = 0; ci < Ci; ++ci, xci += HW, wci += KHW) {
            for (int r = r0; r < r1; ++r) {
              const S* xrow = xci + int64_t(ih0 + r) * W + iw0;
              const S* wrow = wci + int64_t(r) * kw;
              for (int c = c0; c < c1; ++c) acc += double(xrow[c]) * double(wrow[c]);
            }
          }
          Op[int64_t(oh) * OW + ow] = S(acc);
        }
      }
    }
  });
  return t.push(std::move(out), t.needs(x) || t.needs(w) || t.needs(b), "conv2d",
                [x, w, b, stride, pad, N, Ci, H, W, Co, kh, kw, OH, OW](TapeT<S>& tp, int self) {
                  const auto& g = tp.grad(self);
                  const auto& vx2 = tp.val(x);
                  const auto& vw2 = tp.val(w);
                  const S* G = g.ptr();
                  const int64_t HW = int64_t(H) * W, OHW = int64_t(OH) * OW, KHW = int64_t(kh) * kw;
                  if (tp.needs(x)) {
                    auto& gx = tp.grad(x);
                    S* GX = gx.ptr();
                    const S* Wt = vw2.ptr();
                    conv_detail::GatherTaps rt = conv_detail::gather_taps(H, kh, stride, pad, OH);
                    conv_detail::GatherTaps ct = conv_detail::gather_taps(W, kw, stride, pad, OW);
                    ThreadPool::instance().parallel_for(int64_t(N) * Ci, [&](int64_t plane_lo, int64_t plane_hi) {
                      for (int64_t plane = plane_lo; plane < plane_hi; ++plane) {
                        int nn = int(plane / Ci), ci = int(plane % Ci);
                        const S* Gn = G + int64_t(nn) * Co * OHW;
                        const S* Wci = Wt + int64_t(ci) * KHW;
                        S* GXp = GX + plane * HW;
                        for (int ih = 0; ih < H; ++ih) {
                          const int tb = rt.begin[size_t(ih)], te = rt.begin[size_t(ih) + 1];
                          for (int iw = 0; iw < W; ++iw) {
                            const int ub = ct.begin[size_t(iw)], ue = ct.begin[size_t(iw) + 1];
                            double acc = 0.0;
                            const S* gco = Gn;
                            const S* wco = Wci;
                            for (int co = 0; co < Co; ++co, gco += OHW, wco += Ci * KHW) {
                              for (int ti = tb; ti < te; ++ti) {
                                const S* grow = gco + int64_t(rt.pairs[size_t(ti)][1]) * OW;
                                const S* wrow = wco + int64_t(rt.pairs[size_t(ti)][0]) * kw;
                                for (int tj = ub; tj < ue; ++tj)
                                  acc += double(grow[ct.pairs[size_t(tj)][1]]) *
                                         double(wrow[ct.pairs[size_t(tj)][0]]);
                              }
                            }
                            GXp[int64_t(ih) * W + iw] += S(acc);
                          }
                        }
                      }
                    });
                  }
                  if (tp.needs(w)) {
                    auto& gw = tp.grad(w);
                    S* GW = gw.ptr();
                    const S* X = vx2.ptr();
                    std::vector<int> ohlo, ohhi, owlo, owhi;
                    conv_detail::tap_walk_ranges(kh, OH, stride, pad, H, ohlo, ohhi);
                    conv_detail::tap_walk_ranges(kw, OW, stride, pad, W, owlo, owhi);
                    ThreadPool::instance().parallel_for(Co, [&](int64_t co_lo, int64_t co_hi) {
                      for (int64_t co = co_lo; co < co_hi; ++co)
                        for (int ci = 0; ci < Ci; ++ci)
                          for (int r = 0; r < kh; ++r)
                            for (int c = 0; c < kw; ++c) {
                              const int oh0 = ohlo[size_t(r)], oh1 = ohhi[size_t(r)];
                              const int ow0 = owlo[size_t(c)], ow1 = owhi[size_t(c)];
                              double acc = 0.0;
                              for (int nn = 0; nn < N; ++nn) {
                                const S* Gp = G + (int64_t(nn) * Co + co) * OHW;
                                const S* Xp = X + (int64_t(nn) * Ci + ci) * HW;
                                for (int oh = oh0; oh < oh1; ++oh) {
                                  const S* grow = Gp + int64_t(oh) * OW;
                                  const S* xq = Xp + int64_t(oh * stride - pad + r) * W +
                                                (int64_t(ow0) * stride - pad + c);
                                  for (int ow = ow0; ow < ow1; ++ow, xq += stride)
                                    acc += double(grow[ow]) * double(*xq);
                                }
                              }
                              GW[((co * Ci + ci) * kh + r) * kw + c] += S(acc);
                            }
                    });
                  }
                  if (tp.needs(b)) {
                    auto& gb = tp.grad(b);
                    for (int co = 0; co < Co; ++co) {
                      double acc = 0.0;
                      for (int nn = 0; nn < N; ++nn) {
                        const S* p = G + (int64_t(nn) * Co + co) * OH * OW;
                        for (int64_t i = 0; i < int64_t(OH) * OW; ++i) acc += double(p[i]);
                      }
                      gb.at(co) += S(acc);
                    }
                  }
                });
}

inline int deconv_out_dim(int in, int kernel, int stride, int pad) {
  int v = (in - 1) * stride - 2 * pad + kernel;
  if (v <= 0) throw ShapeError("conv2d_transpose: non-positive output dim");
  return v;
}

// Transposed convolution, weights (Ci,Co,kh,kw); adjoint of conv2d with the
// same stride/pad. Summation per output: bias first, then ci, kh, kw.
template <class S>
int conv2d_transpose(TapeT<S>& t, int x, int w, int b, int stride, int pad) {
  const auto& vx = t.val(x);
  const auto& vw = t.val(w);
  const auto& vb = t.val(b);
  if (vx.ndim() != 4 || vw.ndim() != 4 || vb.ndim() != 1) throw ShapeError("conv2d_transpose: bad ranks");
  if (vw.dim(0) != vx.dim(1) || vb.dim(0) != vw.dim(1)) throw ShapeError("conv2d_transpose: channel mismatch");
  int N = vx.dim(0), Ci = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  int Co = vw.dim(1), kh = vw.dim(2), kw = vw.dim(3);
  int OH = deconv_out_dim(H, kh, stride, pad), OW = deconv_out_dim(W, kw, stride, pad);
  TensorT<S> out({N, Co, OH, OW});
  const S* X = vx.ptr();
  const S* Wt = vw.ptr();
  const S* Bp = vb.ptr();
  S* O = out.ptr();
  conv_detail::GatherTaps rt = conv_detail::gather_taps(OH, kh, stride, pad, H);
  conv_detail::GatherTaps ct = conv_detail::gather_taps(OW, kw, stride, pad, W);
  const int64_t HW = int64_t(H) * W, KHW = int64_t(kh) * kw;
  ThreadPool::instance().parallel_for(int64_t(N) * Co, [&](int64_t plane_lo, int64_t plane_hi) {
    for (int64_t plane = plane_lo; plane < plane_hi; ++plane) {
      int nn = int(plane / Co), co = int(plane % Co);
      const S* Xn = X + int64_t(nn) * Ci * HW;
      const S* Wco = Wt + int64_t(co) * KHW;
      const double bias = double(Bp[co]);
      S* Op = O + plane * OH * OW;
      for (int oh = 0; oh < OH; ++oh) {
        const int tb = rt.begin[size_t(oh)], te = rt.begin[size_t(oh) + 1];
        for (int ow = 0; ow < OW; ++ow) {
          const int ub = ct.begin[size_t(ow)], ue = ct.begin[size_t(ow) + 1];
          double acc = bias;
          const S* xci = Xn;
          const S* wci = Wco;
          for (int ci = 0; ci < Ci; ++ci, xci += HW, wci += Co * KHW) {
            for (int ti = tb; ti < te; ++ti) {
              const S* xrow = xci + int64_t(rt.pairs[size_t(ti)][1]) * W;
              const S* wrow = wci + int64_t(rt.pairs[size_t(ti)][0]) * kw;
              for (int tj = ub; tj < ue; ++tj)
                acc += double(xrow[ct.pairs[size_t(tj)][1]]) * double(wrow[ct.pairs[size_t(tj)][0]]);
            }
          }
          Op[int64_t(oh) * OW + ow] = S(acc);
        }
      }
    }
  });
  return t.push(std::move(out), t.needs(x) || t.needs(w) || t.needs(b), "conv2d_transpose",
                [x, w, b, stride, pad, N, Ci, H, W, Co, kh, kw, OH, OW](TapeT<S>& tp, int self) {
                  const auto& g = tp.grad(self);
                  const auto& vx2 = tp.val(x);
                  const auto& vw2 = tp.val(w);
                  const S* G = g.ptr();
                  const int64_t HW = int64_t(H) * W, OHW = int64_t(OH) * OW, KHW = int64_t(kh) * kw;
                  if (tp.needs(x)) {
                    auto& gx = tp.grad(x);
                    S* GX = gx.ptr();
                    const S* Wt = vw2.ptr();
                    // adjoint is a plain correlation over the output gradient
                    std::vector<int> rlo, rhi, clo, chi;
                    conv_detail::corr_tap_ranges(H, kh, stride, pad, OH, rlo, rhi);
                    conv_detail::corr_tap_ranges(W, kw, stride, pad, OW, clo, chi);
                    ThreadPool::instance().parallel_for(int64_t(N) * Ci, [&](int64_t plane_lo, int64_t plane_hi) {
                      for (int64_t plane = plane_lo; plane < plane_hi; ++plane) {
                        int nn = int(plane / Ci), ci = int(plane % Ci);
                        const S* Gn = G + int64_t(nn) * Co * OHW;
                        const S* Wci = Wt + int64_t(ci) * Co * KHW;
                        S* GXp = GX + plane * HW;
                        for (int ih = 0; ih < H; ++ih) {
                          const int r0 = rlo[size_t(ih)], r1 = rhi[size_t(ih)];
                          const int oh0 = ih * stride - pad;
                          for (int iw = 0; iw < W; ++iw) {
                            const int c0 = clo[size_t(iw)], c1 = chi[size_t(iw)];
                            const int ow0 = iw * stride - pad;
                            double acc = 0.0;
                            const S* gco = Gn;
                            const S* wco = Wci;
                            for (int co = 0; co < Co; ++co, gco += OHW, wco += KHW) {
                              for (int r = r0; r < r1; ++r) {
                                const S* grow = gco + int64_t(oh0 + r) * OW + ow0;
                                const S* wrow = wco + int64_t(r) * kw;
                                for (int c = c0; c < c1; ++c) acc += double(grow[c]) * double(wrow[c]);
                              }
                            }
                            GXp[int64_t(ih) * W + iw] += S(acc);
                          }
                        }
                      }
                    });
                  }
                  if (tp.needs(w)) {
                    auto& gw = tp.grad(w);
                    S* GW = gw.ptr();
                    const S* X = vx2.ptr();
                    std::vector<int> ihlo, ihhi, iwlo, iwhi;
                    conv_detail::tap_walk_ranges(kh, H, stride, pad, OH, ihlo, ihhi);
                    conv_detail::tap_walk_ranges(kw, W, stride, pad, OW, iwlo, iwhi);
                    ThreadPool::instance().parallel_for(Ci, [&](int64_t ci_lo, int64_t ci_hi) {
                      for (int64_t ci = ci_lo; ci < ci_hi; ++ci)
                        for (int co = 0; co < Co; ++co)
                          for (int r = 0; r < kh; ++r)
                            for (int c = 0; c < kw; ++c) {
                              const int ih0 = ihlo[size_t(r)], ih1 = ihhi[size_t(r)];
                              const int iw0 = iwlo[size_t(c)], iw1 = iwhi[size_t(c)];
                              double acc = 0.0;
                              for (int nn = 0; nn < N; ++nn) {
                                const S* Xp = X + (int64_t(nn) * Ci + ci) * HW;
                                const S* Gp = G + (int64_t(nn) * Co + co) * OHW;
                                for (int ih = ih0; ih < ih1; ++ih) {
                                  const S* xrow = Xp + int64_t(ih) * W;
                                  const S* gq = Gp + int64_t(ih * stride - pad + r) * OW +
                                                (int64_t(iw0) * stride - pad + c);
                                  for (int iw = iw0; iw < iw1; ++iw, gq += stride)
                                    acc += double(xrow[iw]) * double(*gq);
                                }
                              }
                              GW[((ci * Co + co) * kh + r) * kw + c] += S(acc);
                            }
                    });
                  }
                  if (tp.needs(b)) {
                    auto& gb = tp.grad(b);
                    for (int co = 0; co < Co; ++co) {
                      double acc = 0.0;
                      for (int nn = 0; nn < N; ++nn) {
                        const S* p = G + (int64_t(nn) * Co + co) * OH * OW;
                        for (int64_t i = 0; i < int64_t(OH) * OW; ++i) acc += double(p[i]);
                      }
                      gb.at(co) += S(acc);
                    }
                  }
                });
}

// ------------------------------------------------------------- batch norm

// Running statistics stay float (they are model state, not tape state).
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

// x is (N,F) with per-feature stats over N, or (N,C,H,W) with per-channel
// stats over N*H*W. Train mode uses biased batch variance for both the
// normalization and the running update; eval mode uses running statistics.
template <class S>
int batchnorm(TapeT<S>& t, int x, int gamma, int beta, BatchNormState* state, bool train,
              bool update_running, double eps = 1e-5, double momentum = 0.1) {
  const auto& vx = t.val(x);
  int C, B;
  int64_t I;
  if (vx.ndim() == 2) {
    B = vx.dim(0);
    C = vx.dim(1);
    I = 1;
  } else if (vx.ndim() == 4) {
    B = vx.dim(0);
    C = vx.dim(1);
    I = int64_t(vx.dim(2)) * vx.dim(3);
  } else {
    throw ShapeError("batchnorm: needs (N,F) or (N,C,H,W)");
  }
  require_shape(t.val(gamma), {C}, "batchnorm gamma");
  require_shape(t.val(beta), {C}, "batchnorm beta");
  if (state->running_mean.shape != std::vector<int>{C}) throw ShapeError("batchnorm: state size mismatch");
  int64_t count = int64_t(B) * I;
  if (train && count <= 1) throw NumericError("batchnorm: train-mode statistics degenerate (one value per feature)");

  auto index = [C, I](int b, int c, int64_t i) { return (int64_t(b) * C + c) * I + i; };

  std::vector<double> mean(size_t(C), 0.0);
  std::vector<double> inv(size_t(C), 0.0);
  if (train) {
    for (int c = 0; c < C; ++c) {
      double m = 0.0;
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < I; ++i) m += double(vx.at(index(b, c, i)));
      m /= double(count);
      double v = 0.0;
      for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < I; ++i) {
          double d = double(vx.at(index(b, c, i))) - m;
          v += d * d;
        }
      v /= double(count);
      mean[size_t(c)] = m;
      inv[size_t(c)] = 1.0 / std::sqrt(v + eps);
      if (update_running) {
        state->running_mean.at(c) = float((1.0 - momentum) * double(state->running_mean.at(c)) + momentum * m);
        state->running_var.at(c) = float((1.0 - momentum) * double(state->running_var.at(c)) + momentum * v);
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[size_t(c)] = double(state->running_mean.at(c));
      inv[size_t(c)] = 1.0 / std::sqrt(double(state->running_var.at(c)) + eps);
    }
  }

  // normalized values saved for backward
  auto xhat = std::make_shared<TensorT<S>>(vx.shape);
  TensorT<S> out(vx.shape);
  for (int c = 0; c < C; ++c) {
    S gm = t.val(gamma).at(c), bt = t.val(beta).at(c);
    for (int b = 0; b < B; ++b)
      for (int64_t i = 0; i < I; ++i) {
        int64_t ix = index(b, c, i);
        S xh = S((double(vx.at(ix)) - mean[size_t(c)]) * inv[size_t(c)]);
        xhat->at(ix) = xh;
        out.at(ix) = xh * gm + bt;
      }
  }
  std::vector<double> invv = inv;
  return t.push(std::move(out), t.needs(x) || t.needs(gamma) || t.needs(beta), "batchnorm",
                [x, gamma, beta, xhat, invv, train, B, C, I, index](TapeT<S>& tp, int self) {
                  const auto& g = tp.grad(self);
                  int64_t count = int64_t(B) * I;
                  for (int c = 0; c < C; ++c) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int b = 0; b < B; ++b)
                      for (int64_t i = 0; i < I; ++i) {
                        int64_t ix = index(b, c, i);
                        sum_g += double(g.at(ix));
                        sum_gx += double(g.at(ix)) * double(xhat->at(ix));
                      }
                    if (tp.needs(gamma)) tp.grad(gamma).at(c) += S(sum_gx);
                    if (tp.needs(beta)) tp.grad(beta).at(c) += S(sum_g);
                    if (tp.needs(x)) {
                      double gm = double(tp.val(gamma).at(c));
                      double k = gm * invv[size_t(c)];
                      auto& gx = tp.grad(x);
                      if (train) {
                        for (int b = 0; b < B; ++b)
                          for (int64_t i = 0; i < I; ++i) {
                            int64_t ix = index(b, c, i);
                            gx.at(ix) += S(k * (double(g.at(ix)) - sum_g / double(count) -
                                                double(xhat->at(ix)) * sum_gx / double(count)));
                          }
                      } else {
                        for (int b = 0; b < B; ++b)
                          for (int64_t i = 0; i < I; ++i) {
                            int64_t ix = index(b, c, i);
                            gx.at(ix) += S(k * double(g.at(ix)));
                          }
                      }
                    }
                  }
                });
}

}  // namespace ops

}  // namespace wxgan
