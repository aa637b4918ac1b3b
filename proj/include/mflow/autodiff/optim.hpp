#pragma once

#include "mflow/autodiff/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mflow::ad {

/// Ordered collection of named trainable leaves.
template <typename Scalar>
class ParameterSet {
 public:
  Tensor<Scalar> add(std::string name, Shape shape, std::vector<Scalar> init) {
    for (const auto& [n, t] : items_) {
      if (n == name) throw std::invalid_argument("ParameterSet: duplicate parameter '" + name + "'");
    }
    Tensor<Scalar> t(std::move(shape), std::move(init), true);
    items_.emplace_back(std::move(name), t);
    return t;
  }

  std::size_t size() const { return items_.size(); }
  const std::string& name(std::size_t i) const { return items_[i].first; }
  Tensor<Scalar>& tensor(std::size_t i) { return items_[i].second; }
  const Tensor<Scalar>& tensor(std::size_t i) const { return items_[i].second; }

  const Tensor<Scalar>* find(const std::string& name) const {
    for (const auto& [n, t] : items_) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& item : items_) n += item.second.numel();
    return n;
  }

  void zero_grad() {
    for (auto& item : items_) item.second.zero_grad();
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor<Scalar>>> items_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

/// First and second moments per parameter plus the step counter.
template <typename Scalar>
struct AdamState {
  std::vector<std::vector<Scalar>> m;
  std::vector<std::vector<Scalar>> v;
  long step = 0;

  static AdamState for_parameters(const ParameterSet<Scalar>& params) {
    AdamState s;
    for (const auto& [name, t] : params) {
      s.m.emplace_back(t.numel(), Scalar(0));
      s.v.emplace_back(t.numel(), Scalar(0));
    }
    return s;
  }
};

/// Bias-corrected Adam update of every parameter from its accumulated gradient.
/// Throws before touching any parameter if a gradient is non-finite.
template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params.tensor(i).node()->grad;
    for (Scalar x : g) {
      if (!std::isfinite(x)) throw std::runtime_error("adam_step: non-finite gradient in '" + params.name(i) + "'");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.tensor(i).mutable_data();
    const auto& g = params.tensor(i).node()->grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const Scalar gj = g.empty() ? Scalar(0) : g[j];
      m[j] = b1 * m[j] + (Scalar(1) - b1) * gj;
      v[j] = b2 * v[j] + (Scalar(1) - b2) * gj * gj;
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      p[j] -= static_cast<Scalar>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

/// shadow <- decay * shadow + (1 - decay) * params
template <typename Scalar>
void ema_update(std::vector<std::vector<Scalar>>& shadow, const ParameterSet<Scalar>& params, double decay) {
  if (shadow.size() != params.size()) throw std::invalid_argument("ema_update: shadow does not match parameters");
  const Scalar d = static_cast<Scalar>(decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.tensor(i).data();
    auto& s = shadow[i];
    if (s.size() != p.size()) throw std::invalid_argument("ema_update: size mismatch in '" + params.name(i) + "'");
    for (std::size_t j = 0; j < p.size(); ++j) s[j] = d * s[j] + (Scalar(1) - d) * p[j];
  }
}

template <typename Scalar>
std::vector<std::vector<Scalar>> snapshot(const ParameterSet<Scalar>& params) {
  std::vector<std::vector<Scalar>> out;
  out.reserve(params.size());
  for (const auto& item : params) out.emplace_back(item.second.data().begin(), item.second.data().end());
  return out;
}

template <typename Scalar>
void load_values(ParameterSet<Scalar>& params, const std::vector<std::vector<Scalar>>& values) {
  if (values.size() != params.size()) throw std::invalid_argument("load_values: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (values[i].size() != params.tensor(i).numel()) {
      throw std::invalid_argument("load_values: size mismatch in '" + params.name(i) + "'");
    }
    params.tensor(i).mutable_data().assign(values[i].begin(), values[i].end());
  }
}

}  // namespace mflow::ad
