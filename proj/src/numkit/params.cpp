#include "genad/numkit/params.hpp"

#include <cmath>

#include "genad/errors.hpp"

namespace genad::numkit {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  auto [it, fresh] = params_.emplace(name, std::move(init));
  if (!fresh) throw ConfigError("duplicate parameter name: " + name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

size_t ParamStore::numel() const {
  size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

Var Binder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_.input(store_.get(name));
  bound_.emplace(name, v);
  return v;
}

GradMap Binder::grads() const {
  GradMap out;
  for (const auto& [name, var] : bound_) {
    if (tape_.has_grad(var)) {
      out.emplace(name, tape_.grad(var));
    } else {
      out.emplace(name, Tensor::zeros(tape_.val(var).shape));
    }
  }
  return out;
}

void grad_accumulate(GradMap& into, const GradMap& add) {
  for (const auto& [name, g] : add) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, g);
    } else {
      if (!it->second.same_shape(g)) throw ShapeError("gradient shape mismatch for " + name);
      for (size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
    }
  }
}

void grad_scale(GradMap& grads, double c) {
  for (auto& [name, g] : grads) {
    for (auto& v : g.data) v *= c;
  }
}

void Adam::step(ParamStore& params, const GradMap& grads) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.get(name);
    if (!p.same_shape(g)) throw ShapeError("adam gradient shape mismatch for " + name);
    auto mi = m_.find(name);
    if (mi == m_.end()) {
      mi = m_.emplace(name, Tensor::zeros(p.shape)).first;
      v_.emplace(name, Tensor::zeros(p.shape));
    }
    Tensor& m = mi->second;
    Tensor& v = v_.at(name);
    for (size_t i = 0; i < p.data.size(); ++i) {
      m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g.data[i];
      v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      p.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace genad::numkit
