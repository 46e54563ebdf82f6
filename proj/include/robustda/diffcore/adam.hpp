#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "robustda/diffcore/tensor.hpp"

namespace robustda {

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState for_params(const std::vector<Tensor>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape, 0.0);
      s.v.emplace_back(p.shape, 0.0);
    }
    return s;
  }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update, in place. Pointers let callers update
/// parameters that live in several containers under a single state.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                      double lr, std::span<const std::string> names = {}, AdamHyper h = {}) {
  if (!(lr > 0.0)) throw ValidationError("adam: learning rate must be positive");
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam: parameter/gradient/state counts differ");
  auto name = [&](std::size_t i) { return i < names.size() ? names[i] : "param[" + std::to_string(i) + "]"; };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(grads[i]) || !params[i]->same_shape(state.m[i]))
      throw ShapeError("adam: shape mismatch for " + name(i));
    if (!grads[i].all_finite()) throw NumericError("adam: non-finite gradient for " + name(i));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    const auto& g = grads[i].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                      std::span<const std::string> names = {}) {
  std::vector<Tensor*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  adam_step(std::span<Tensor* const>(ptrs), std::span<const Tensor>(grads), state, lr, names);
}

}  // namespace robustda
