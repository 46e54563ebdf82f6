#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "robustda/diffcore/graph.hpp"

namespace robustda {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;                  // "param 2 [17]" or "input [3]"
  double min_abs_preactivation = std::numeric_limits<double>::infinity();
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double scale_floor = 1e-6;  // denominators below this are treated as absolute error
  std::uint64_t seed = 7;     // coefficients of the scalarising projection
};

namespace detail {

inline double projected_loss(const GraphSpec& g, const ParamSet& p, const Tensor& x, const Tensor& coeff) {
  Tensor y = infer(g, p, x);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * coeff.data[i];
  return s;
}

inline double min_abs_relu_input(const GraphSpec& g, const ParamSet& params, const Tensor& x) {
  double best = std::numeric_limits<double>::infinity();
  Tensor h = x;
  std::size_t p = 0;
  for (const auto& l : g.layers) {
    if (auto* d = std::get_if<DenseLayer>(&l)) {
      Tensor y = Tensor::matrix(h.rows(), d->out);
      kernels::dense_forward(h.data.data(), params[p].data.data(), params[p + 1].data.data(), y.data.data(),
                             h.rows(), d->in, d->out);
      h = std::move(y);
      p += 2;
    } else if (std::holds_alternative<ReluLayer>(l)) {
      for (double& v : h.data) {
        best = std::min(best, std::abs(v));
        v = std::max(v, 0.0);
      }
    } else if (std::holds_alternative<SoftmaxLayer>(l)) {
      h = ops::softmax(h);
    }
  }
  return best;
}

}  // namespace detail

/// Compares tape gradients of a fixed random projection of the graph output
/// against central differences, in eval mode, for every parameter entry and
/// every input entry.
inline GradCheckReport grad_check(const GraphSpec& graph, const ParamSet& params, const Tensor& point,
                                  GradCheckOptions opt = {}) {
  graph.check_params(params);
  GradCheckReport rep;
  Tensor probe = infer(graph, params, point);
  Tensor coeff(probe.shape);
  Rng rng(opt.seed);
  for (double& c : coeff.data) c = rng.uniform(0.5, 1.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);

  ForwardResult fr = forward(graph, params, point, false, 0);
  Gradients grads = backward(fr, coeff);
  rep.min_abs_preactivation = detail::min_abs_relu_input(graph, params, point);

  auto consider = [&](double analytic, double numeric, const std::string& where) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), opt.scale_floor});
    double rel = std::abs(analytic - numeric) / denom;
    ++rep.checked;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst = where;
    }
  };

  ParamSet work = params;
  for (std::size_t t = 0; t < work.size(); ++t) {
    for (std::size_t i = 0; i < work[t].size(); ++i) {
      const double orig = work[t].data[i];
      work[t].data[i] = orig + opt.step;
      double up = detail::projected_loss(graph, work, point, coeff);
      work[t].data[i] = orig - opt.step;
      double down = detail::projected_loss(graph, work, point, coeff);
      work[t].data[i] = orig;
      consider(grads.params[t].data[i], (up - down) / (2.0 * opt.step),
               "param " + std::to_string(t) + " [" + std::to_string(i) + "]");
    }
  }
  Tensor x = point;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data[i];
    x.data[i] = orig + opt.step;
    double up = detail::projected_loss(graph, params, x, coeff);
    x.data[i] = orig - opt.step;
    double down = detail::projected_loss(graph, params, x, coeff);
    x.data[i] = orig;
    consider(grads.input.data[i], (up - down) / (2.0 * opt.step), "input [" + std::to_string(i) + "]");
  }
  rep.passed = rep.max_rel_error < opt.tolerance;
  return rep;
}

}  // namespace robustda
