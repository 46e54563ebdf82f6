#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "robustda/diffcore/kernels.hpp"
#include "robustda/diffcore/tape.hpp"
#include "robustda/rng.hpp"

// Differentiable primitives. Each op computes its value eagerly and records a
// closure that maps the output gradient onto its inputs.
namespace robustda::ops {

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape));
}

/// Row-wise log-softmax of a matrix.
inline Tensor log_softmax(const Tensor& x) {
  Tensor out(x.shape);
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.row_ptr(r);
    double m = *std::max_element(xr, xr + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(xr[k] - m);
    double lse = m + std::log(s);
    for (std::size_t k = 0; k < c; ++k) out.at(r, k) = xr[k] - lse;
  }
  return out;
}

inline void check_labels(const std::vector<int>& labels, const Tensor& logits, const char* op) {
  if (labels.size() != logits.rows())
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.rows()) + " rows");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= logits.cols())
      throw Error(std::string(op) + ": label " + std::to_string(labels[i]) + " at row " +
                  std::to_string(i) + " outside {0.." + std::to_string(logits.cols() - 1) + "}");
}

}  // namespace detail

/// Row-wise softmax (value only).
inline Tensor softmax(const Tensor& x) {
  Tensor out = detail::log_softmax(x);
  for (double& v : out.data) v = std::exp(v);
  return out;
}

/// y = x W + b with x [batch x in], W [in x out], b [out].
inline Var dense(Tape& tape, Var x, Var w, Var b) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  const Tensor& bv = tape.value(b);
  detail::require_matrix(xv, "dense");
  detail::require_matrix(wv, "dense");
  const std::size_t rows = xv.rows(), in = wv.rows(), out = wv.cols();
  if (xv.cols() != in)
    throw ShapeError("dense: input width " + std::to_string(xv.cols()) + " does not match weight rows " +
                     std::to_string(in));
  if (bv.size() != out) throw ShapeError("dense: bias size " + std::to_string(bv.size()) + " != " + std::to_string(out));
  Tensor y = Tensor::matrix(rows, out);
  kernels::dense_forward(xv.data.data(), wv.data.data(), bv.data.data(), y.data.data(), rows, in, out);
  return tape.record(
      std::move(y), {x, w, b},
      [x, w, b, rows, in, out](Tape& t, std::size_t self) {
        const double* dy = t.grad_at(self).data.data();
        if (t.needs_grad(x.id))
          kernels::dense_backward_input(dy, t.value_at(w.id).data.data(), t.grad_buffer(x.id), rows, in, out);
        double* dw = t.needs_grad(w.id) ? t.grad_buffer(w.id) : nullptr;
        double* db = t.needs_grad(b.id) ? t.grad_buffer(b.id) : nullptr;
        if (dw || db) kernels::dense_backward_params(t.value_at(x.id).data.data(), dy, dw, db, rows, in, out);
      },
      "dense");
}

/// max(x, 0); the subgradient at 0 is 0.
inline Var relu(Tape& tape, Var x) {
  Tensor y = tape.value(x);
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return tape.record(
      std::move(y), {x},
      [x](Tape& t, std::size_t self) {
        const Tensor& xv = t.value_at(x.id);
        const Tensor& g = t.grad_at(self);
        double* dx = t.grad_buffer(x.id);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if (xv.data[i] > 0.0) dx[i] += g.data[i];
      },
      "relu");
}

/// Inverted dropout: kept units are scaled by 1/(1-p).
inline Var dropout(Tape& tape, Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw Error("dropout: p must be < 1");
  const Tensor& xv = tape.value(x);
  std::vector<double> mask(xv.size());
  const double keep = 1.0 / (1.0 - p);
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : keep;
  Tensor y = xv;
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] *= mask[i];
  return tape.record(
      std::move(y), {x},
      [x, mask = std::move(mask)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_at(self);
        double* dx = t.grad_buffer(x.id);
        for (std::size_t i = 0; i < g.data.size(); ++i) dx[i] += g.data[i] * mask[i];
      },
      "dropout");
}

inline Var softmax(Tape& tape, Var x) {
  detail::require_matrix(tape.value(x), "softmax");
  Tensor s = softmax(tape.value(x));
  return tape.record(
      s, {x},
      [x](Tape& t, std::size_t self) {
        const Tensor& s = t.value_at(self);
        const Tensor& g = t.grad_at(self);
        double* dx = t.grad_buffer(x.id);
        const std::size_t c = s.cols();
        for (std::size_t r = 0; r < s.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t k = 0; k < c; ++k) dot += g.at(r, k) * s.at(r, k);
          for (std::size_t k = 0; k < c; ++k) dx[r * c + k] += s.at(r, k) * (g.at(r, k) - dot);
        }
      },
      "softmax");
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (!av.same_shape(bv)) throw ShapeError("add: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor y = av;
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += bv.data[i];
  return tape.record(
      std::move(y), {a, b},
      [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_at(self);
        t.accumulate(a.id, g);
        t.accumulate(b.id, g);
      },
      "add");
}

inline Var scale(Tape& tape, Var x, double c) {
  Tensor y = tape.value(x);
  for (double& v : y.data) v *= c;
  return tape.record(
      std::move(y), {x},
      [x, c](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_at(self);
        double* dx = t.grad_buffer(x.id);
        for (std::size_t i = 0; i < g.data.size(); ++i) dx[i] += c * g.data[i];
      },
      "scale");
}

/// Sum of all entries, as a scalar of shape [1].
inline Var sum(Tape& tape, Var x) {
  double s = 0.0;
  for (double v : tape.value(x).data) s += v;
  return tape.record(
      Tensor({1}, std::vector<double>{s}), {x},
      [x](Tape& t, std::size_t self) {
        const double g = t.grad_at(self).data[0];
        double* dx = t.grad_buffer(x.id);
        for (std::size_t i = 0; i < t.value_at(x.id).size(); ++i) dx[i] += g;
      },
      "sum");
}

/// Inner product of two equally shaped tensors, as a scalar of shape [1].
inline Var dot(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (!av.same_shape(bv)) throw ShapeError("dot: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av.data[i] * bv.data[i];
  return tape.record(
      Tensor({1}, std::vector<double>{s}), {a, b},
      [a, b](Tape& t, std::size_t self) {
        const double g = t.grad_at(self).data[0];
        const Tensor& av = t.value_at(a.id);
        const Tensor& bv = t.value_at(b.id);
        if (t.needs_grad(a.id)) {
          double* da = t.grad_buffer(a.id);
          for (std::size_t i = 0; i < av.size(); ++i) da[i] += g * bv.data[i];
        }
        if (t.needs_grad(b.id)) {
          double* db = t.grad_buffer(b.id);
          for (std::size_t i = 0; i < bv.size(); ++i) db[i] += g * av.data[i];
        }
      },
      "dot");
}

/// Differentiable row gather.
inline Var select_rows(Tape& tape, Var x, std::vector<std::size_t> rows) {
  const Tensor& xv = tape.value(x);
  detail::require_matrix(xv, "select_rows");
  for (auto r : rows)
    if (r >= xv.rows()) throw ShapeError("select_rows: row " + std::to_string(r) + " out of range");
  Tensor y = xv.gather_rows(rows);
  return tape.record(
      std::move(y), {x},
      [x, rows = std::move(rows)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_at(self);
        const std::size_t c = g.cols();
        double* dx = t.grad_buffer(x.id);
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t k = 0; k < c; ++k) dx[rows[i] * c + k] += g.at(i, k);
      },
      "select_rows");
}

/// Batch mean of -log softmax(logits)[label].
inline Var cross_entropy(Tape& tape, Var logits, const std::vector<int>& labels) {
  const Tensor& z = tape.value(logits);
  detail::require_matrix(z, "cross_entropy");
  detail::check_labels(labels, z, "cross_entropy");
  Tensor ls = detail::log_softmax(z);
  const double n = static_cast<double>(z.rows());
  double loss = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) loss -= ls.at(r, static_cast<std::size_t>(labels[r]));
  loss /= n;
  return tape.record(
      Tensor({1}, std::vector<double>{loss}), {logits},
      [logits, labels, ls = std::move(ls), n](Tape& t, std::size_t self) {
        const double g = t.grad_at(self).data[0];
        double* dz = t.grad_buffer(logits.id);
        const std::size_t c = ls.cols();
        for (std::size_t r = 0; r < ls.rows(); ++r)
          for (std::size_t k = 0; k < c; ++k) {
            double p = std::exp(ls.at(r, k));
            double y = static_cast<int>(k) == labels[r] ? 1.0 : 0.0;
            dz[r * c + k] += g * (p - y) / n;
          }
      },
      "cross_entropy");
}

/// Batch mean of KL(softmax(p) || softmax(q)), differentiable in both inputs.
inline Var kl_divergence(Tape& tape, Var p_logits, Var q_logits) {
  const Tensor& a = tape.value(p_logits);
  const Tensor& b = tape.value(q_logits);
  detail::require_matrix(a, "kl_divergence");
  if (!a.same_shape(b)) throw ShapeError("kl_divergence: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor lp = detail::log_softmax(a);
  Tensor lq = detail::log_softmax(b);
  const double n = static_cast<double>(a.rows());
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp.data[i]) * (lp.data[i] - lq.data[i]);
  kl = std::max(kl / n, 0.0);
  return tape.record(
      Tensor({1}, std::vector<double>{kl}), {p_logits, q_logits},
      [p_logits, q_logits, lp = std::move(lp), lq = std::move(lq), n](Tape& t, std::size_t self) {
        const double g = t.grad_at(self).data[0] / n;
        const std::size_t c = lp.cols();
        const bool need_p = t.needs_grad(p_logits.id), need_q = t.needs_grad(q_logits.id);
        double* dp = need_p ? t.grad_buffer(p_logits.id) : nullptr;
        double* dq = need_q ? t.grad_buffer(q_logits.id) : nullptr;
        for (std::size_t r = 0; r < lp.rows(); ++r) {
          double mean_l = 0.0;
          for (std::size_t k = 0; k < c; ++k) mean_l += std::exp(lp.at(r, k)) * (lp.at(r, k) - lq.at(r, k));
          for (std::size_t k = 0; k < c; ++k) {
            const double p = std::exp(lp.at(r, k)), q = std::exp(lq.at(r, k));
            if (dp) dp[r * c + k] += g * p * ((lp.at(r, k) - lq.at(r, k)) - mean_l);
            if (dq) dq[r * c + k] += g * (q - p);
          }
        }
      },
      "kl_divergence");
}

}  // namespace robustda::ops
