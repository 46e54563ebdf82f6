#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "robustda/diffcore/ops.hpp"

namespace robustda {

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
};
struct ReluLayer {};
struct DropoutLayer {
  double p = 0.5;
};
struct SoftmaxLayer {};

using Layer = std::variant<DenseLayer, ReluLayer, DropoutLayer, SoftmaxLayer>;

/// Parameters of a graph: for every dense layer, its weight [in x out]
/// followed by its bias [out].
using ParamSet = std::vector<Tensor>;

/// A feed-forward stack of layers over row-major batches.
struct GraphSpec {
  std::size_t input_dim = 0;
  std::vector<Layer> layers;

  std::size_t output_dim() const {
    std::size_t d = input_dim;
    for (const auto& l : layers)
      if (auto* dl = std::get_if<DenseLayer>(&l)) d = dl->out;
    return d;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      if (std::holds_alternative<DenseLayer>(l)) n += 2;
    return n;
  }

  std::string describe(std::size_t i) const {
    const auto& l = layers[i];
    std::string s = "layer " + std::to_string(i) + " (";
    if (auto* d = std::get_if<DenseLayer>(&l))
      s += "dense " + std::to_string(d->in) + "->" + std::to_string(d->out);
    else if (std::holds_alternative<ReluLayer>(l))
      s += "relu";
    else if (std::holds_alternative<DropoutLayer>(l))
      s += "dropout";
    else
      s += "softmax";
    return s + ")";
  }

  /// Throws ShapeError unless params match the declared dense layers.
  void check_params(const ParamSet& params) const {
    if (params.size() != param_count())
      throw ShapeError("graph: expected " + std::to_string(param_count()) + " parameter tensors, got " +
                       std::to_string(params.size()));
    std::size_t p = 0;
    std::size_t width = input_dim;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto* d = std::get_if<DenseLayer>(&layers[i]);
      if (!d) continue;
      if (d->in != width)
        throw ShapeError("graph: " + describe(i) + " expects width " + std::to_string(d->in) + " but receives " +
                         std::to_string(width));
      const Tensor& w = params[p];
      const Tensor& b = params[p + 1];
      if (w.shape != std::vector<std::size_t>{d->in, d->out} || b.shape != std::vector<std::size_t>{d->out})
        throw ShapeError("graph: " + describe(i) + " has parameters " + shape_str(w.shape) + " / " +
                         shape_str(b.shape));
      width = d->out;
      p += 2;
    }
  }
};

/// Appends the graph to an existing tape. Dropout is applied only when
/// `train` is set; `rng` may be null in eval mode.
inline Var apply(Tape& tape, const GraphSpec& graph, const std::vector<Var>& params, Var x, bool train,
                 Rng* rng) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 2 || xv.cols() != graph.input_dim)
    throw ShapeError("graph: input " + shape_str(xv.shape) + " does not match input width " +
                     std::to_string(graph.input_dim));
  Var h = x;
  std::size_t p = 0;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    if (auto* d = std::get_if<DenseLayer>(&l)) {
      if (tape.value(h).cols() != d->in)
        throw ShapeError("graph: " + graph.describe(i) + " receives width " + std::to_string(tape.value(h).cols()));
      h = ops::dense(tape, h, params.at(p), params.at(p + 1));
      p += 2;
    } else if (std::holds_alternative<ReluLayer>(l)) {
      h = ops::relu(tape, h);
    } else if (auto* dr = std::get_if<DropoutLayer>(&l)) {
      if (train) {
        if (!rng) throw Error("graph: dropout in train mode needs a generator");
        h = ops::dropout(tape, h, dr->p, *rng);
      }
    } else {
      h = ops::softmax(tape, h);
    }
  }
  return h;
}

/// Registers parameters as gradient-tracking leaves.
inline std::vector<Var> register_params(Tape& tape, const ParamSet& params, bool requires_grad = true) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& t : params) vars.push_back(tape.leaf(t, requires_grad));
  return vars;
}

struct ForwardResult {
  Tensor output;
  Tape tape;
  std::vector<Var> params;
  Var input;
  Var out;
};

/// Fresh-tape forward pass over the whole graph.
inline ForwardResult forward(const GraphSpec& graph, const ParamSet& params, const Tensor& input,
                             bool train_mode, std::uint64_t rng_seed) {
  graph.check_params(params);
  ForwardResult r;
  r.params = register_params(r.tape, params);
  r.input = r.tape.leaf(input);
  Rng rng(rng_seed);
  r.out = apply(r.tape, graph, r.params, r.input, train_mode, &rng);
  r.output = r.tape.value(r.out);
  return r;
}

struct Gradients {
  std::vector<Tensor> params;
  Tensor input;
};

/// Backward pass for a ForwardResult; consumes its tape.
inline Gradients backward(ForwardResult& fr, const Tensor& loss_grad) {
  fr.tape.backward(fr.out, loss_grad);
  Gradients g;
  for (auto v : fr.params) g.params.push_back(fr.tape.grad(v));
  g.input = fr.tape.grad(fr.input);
  return g;
}

/// Eval-mode forward without recording. Produces the same values as the tape.
inline Tensor infer(const GraphSpec& graph, const ParamSet& params, const Tensor& input) {
  if (input.rank() != 2 || input.cols() != graph.input_dim)
    throw ShapeError("graph: input " + shape_str(input.shape) + " does not match input width " +
                     std::to_string(graph.input_dim));
  Tensor h = input;
  std::size_t p = 0;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    if (auto* d = std::get_if<DenseLayer>(&l)) {
      const Tensor& w = params.at(p);
      const Tensor& b = params.at(p + 1);
      if (h.cols() != d->in) throw ShapeError("graph: " + graph.describe(i) + " receives width " + std::to_string(h.cols()));
      Tensor y = Tensor::matrix(h.rows(), d->out);
      kernels::dense_forward(h.data.data(), w.data.data(), b.data.data(), y.data.data(), h.rows(), d->in, d->out);
      h = std::move(y);
      p += 2;
    } else if (std::holds_alternative<ReluLayer>(l)) {
      for (double& v : h.data) v = v > 0.0 ? v : 0.0;
    } else if (std::holds_alternative<SoftmaxLayer>(l)) {
      h = ops::softmax(h);
    }
  }
  require_finite(h, "infer");
  return h;
}

}  // namespace robustda
