#pragma once

#include <map>
#include <string>

#include "genad/numkit/tape.hpp"
#include "genad/numkit/tensor.hpp"

namespace genad::numkit {

using GradMap = std::map<std::string, Tensor>;

// Named parameter tensors for one trainable component. std::map keeps
// iteration order stable so checkpoints and updates are reproducible.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  size_t size() const { return params_.size(); }
  size_t numel() const;

  std::map<std::string, Tensor>& all() { return params_; }
  const std::map<std::string, Tensor>& all() const { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

// Per-step bridge between a ParamStore and a Tape: binds each parameter once
// as a tape input and collects gradients by name after backward.
class Binder {
 public:
  Binder(Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  Var operator()(const std::string& name);
  // Gradients for every bound parameter; zeros for bound-but-unused ones.
  GradMap grads() const;

 private:
  Tape& tape_;
  const ParamStore& store_;
  std::map<std::string, Var> bound_;
};

void grad_accumulate(GradMap& into, const GradMap& add);
void grad_scale(GradMap& grads, double c);

struct AdamConfig {
  double lr = 0.0024;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction. Moment buffers are created on first
// sight of each parameter name; the step counter is global to the optimizer.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& params, const GradMap& grads);
  long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  void set_config(const AdamConfig& cfg) { cfg_ = cfg; }
  void set_lr(double lr) { cfg_.lr = lr; }

  // Exposed for checkpointing.
  std::map<std::string, Tensor>& moments1() { return m_; }
  std::map<std::string, Tensor>& moments2() { return v_; }
  void set_step_count(long t) { t_ = t; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

}  // namespace genad::numkit
