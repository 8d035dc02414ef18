#pragma once

// AdamW with decoupled weight decay: the decay multiplies the parameter
// directly (theta *= 1 - lr*w) before the adaptive update, so with zero
// gradient a step shrinks parameters by exactly that factor — the observable
// difference from L2-in-gradient Adam.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "wxgan/common.hpp"
#include "wxgan/tensor.hpp"

namespace wxgan {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adamw: lr must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("adamw: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adamw: eps must be > 0");
    if (weight_decay < 0.0) throw ConfigError("adamw: weight decay must be >= 0");
  }
};

class AdamW {
 public:
  void init(std::vector<Parameter*> params, const AdamWConfig& cfg) {
    cfg.validate();
    cfg_ = cfg;
    params_ = std::move(params);
    m_.clear();
    v_.clear();
    for (Parameter* p : params_) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
    step_ = 0;
  }

  const AdamWConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }

  // applies one update from the gradients accumulated in the parameters
  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      if (!p.grad.all_finite()) throw NumericError("adamw: non-finite gradient for parameter '" + p.name + "'");
      for (int64_t i = 0; i < p.value.numel(); ++i) {
        double g = double(p.grad.at(i));
        double m = cfg_.beta1 * double(m_[k].at(i)) + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * double(v_[k].at(i)) + (1.0 - cfg_.beta2) * g * g;
        m_[k].at(i) = float(m);
        v_[k].at(i) = float(v);
        double theta = double(p.value.at(i)) * decay;
        theta -= cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        p.value.at(i) = float(theta);
      }
    }
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  // moment tensors for checkpointing, named after their parameters
  void collect_state(std::vector<std::pair<std::string, Tensor*>>& out) {
    for (size_t k = 0; k < params_.size(); ++k) {
      out.emplace_back(params_[k]->name + ".adam_m", &m_[k]);
      out.emplace_back(params_[k]->name + ".adam_v", &v_[k]);
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  int64_t step_ = 0;
};

}  // namespace wxgan
