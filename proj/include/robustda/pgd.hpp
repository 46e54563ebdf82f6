#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "robustda/csv.hpp"
#include "robustda/networks.hpp"

namespace robustda {

struct PgdConfig {
  double epsilon = 0.0;
  int steps = 0;
  double step_size = 0.0;
  bool random_start = true;
  std::uint64_t seed = 0;

  /// 5 steps of size eps/4 from a random start.
  static PgdConfig training(double eps, std::uint64_t seed = 0) { return {eps, 5, eps / 4, true, seed}; }
  /// 20 steps of size eps/4 from a random start.
  static PgdConfig evaluation(double eps, std::uint64_t seed = 0) { return {eps, 20, eps / 4, true, seed}; }

  void validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ValidationError("pgd: epsilon must be finite and >= 0");
    if (steps < 0) throw ValidationError("pgd: steps must be >= 0");
    if (steps > 0 && !(step_size > 0)) throw ValidationError("pgd: step_size must be > 0 when steps > 0");
  }
};

enum class LossKind { Classification, KlToClean, JointTarget };

struct LossSpec {
  LossKind kind = LossKind::Classification;
  std::vector<int> labels;  // classification, joint_target
  Tensor clean_logits;      // kl_to_clean: frozen predictions on the unperturbed batch
  Tensor source_batch;      // joint_target: the already transformed source batch, held fixed
  double lambda1 = 0.0;
  double lambda2 = 0.0;

  static LossSpec classification(std::vector<int> y) { return {LossKind::Classification, std::move(y), {}, {}, 0, 0}; }
  static LossSpec kl_to_clean(Tensor clean) { return {LossKind::KlToClean, {}, std::move(clean), {}, 0, 0}; }
  static LossSpec joint_target(std::vector<int> yt, Tensor xs_tilde, double l1, double l2) {
    return {LossKind::JointTarget, std::move(yt), {}, std::move(xs_tilde), l1, l2};
  }
};

namespace detail {

inline void check_loss_spec(const LossSpec& loss, const Tensor& x, std::size_t F) {
  const std::size_t n = x.rows();
  switch (loss.kind) {
    case LossKind::Classification:
      if (loss.labels.size() != n) throw ValidationError("pgd: classification loss needs one label per row");
      break;
    case LossKind::KlToClean:
      if (loss.clean_logits.rank() != 2 || loss.clean_logits.rows() != n || loss.clean_logits.cols() != 2)
        throw ValidationError("pgd: kl_to_clean needs clean logits of shape [batch x 2]");
      break;
    case LossKind::JointTarget:
      if (loss.labels.size() != n) throw ValidationError("pgd: joint_target needs one label per target row");
      if (loss.source_batch.rank() != 2 || loss.source_batch.cols() != F || loss.source_batch.rows() == 0)
        throw ValidationError("pgd: joint_target needs a non-empty source batch of width F");
      if (loss.lambda1 < 0 || loss.lambda2 < 0) throw ValidationError("pgd: joint_target weights must be >= 0");
      break;
  }
}

/// Cross entropy of the domain discriminator against a constant domain label.
inline Var domain_ce(Tape& tape, const ModelBundle& b, const std::vector<Var>& dp, Var emb, int domain) {
  Var logits = apply(tape, b.d_graph(), dp, emb, false, nullptr);
  return ops::cross_entropy(tape, logits, std::vector<int>(tape.value(emb).rows(), domain));
}

}  // namespace detail

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;  // d loss / d x
};

/// Attack objective and its input gradient, evaluated with dropout off.
inline LossAndGrad attack_objective(const ModelBundle& b, const Tensor& x, const LossSpec& loss) {
  detail::check_loss_spec(loss, x, b.dims.F);
  Tape tape;
  auto gp = register_params(tape, b.g, false);
  auto fp = register_params(tape, b.f, false);
  Var xv = tape.leaf(x);
  Var emb = apply(tape, b.g_graph(), gp, xv, false, nullptr);
  Var logits = apply(tape, b.f_graph(), fp, emb, false, nullptr);
  Var j;
  switch (loss.kind) {
    case LossKind::Classification: j = ops::cross_entropy(tape, logits, loss.labels); break;
    case LossKind::KlToClean: j = ops::kl_divergence(tape, logits, tape.constant(loss.clean_logits)); break;
    case LossKind::JointTarget: {
      // J = lambda2 * Omega(xs~, xt~) + lambda1 * CE(f(g(xt~)), yt); only xt~ moves.
      auto dp = register_params(tape, b.d, false);
      Var xs = tape.constant(loss.source_batch);
      Var es = apply(tape, b.g_graph(), gp, xs, false, nullptr);
      Var omega = ops::scale(tape, ops::add(tape, detail::domain_ce(tape, b, dp, es, kSourceDomain),
                                             detail::domain_ce(tape, b, dp, emb, kTargetDomain)),
                             -1.0);
      j = ops::add(tape, ops::scale(tape, omega, loss.lambda2),
                   ops::scale(tape, ops::cross_entropy(tape, logits, loss.labels), loss.lambda1));
      break;
    }
  }
  LossAndGrad out;
  out.loss = tape.value(j).data[0];
  if (!tape.requires_grad(j)) {
    out.grad = Tensor(x.shape, 0.0);
    return out;
  }
  tape.backward(j);
  out.grad = tape.grad(xv);
  if (!out.grad.all_finite()) throw NumericError("pgd: non-finite input gradient");
  return out;
}

inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

/// Exact test of a - b > eps. The rounded difference can land on eps when the true one
/// is just above it, so the TwoSum residual breaks the tie.
inline bool exceeds(double a, double b, double eps) {
  const double s = a - b;
  const double bb = s - a;
  const double err = (a - (s - bb)) + (-b - bb);
  return s > eps || (s == eps && err > 0);
}

/// l_inf PGD ascent on the loss, projected onto the eps-ball around x intersected with [0,1].
inline Tensor pgd(const ModelBundle& b, const Tensor& x, const LossSpec& loss, const PgdConfig& cfg) {
  cfg.validate();
  if (x.rank() != 2 || x.cols() != b.dims.F) throw ShapeError("pgd: input must be [batch x F]");
  detail::check_loss_spec(loss, x, b.dims.F);
  for (double v : x.data)
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("pgd: input outside [0,1]");
  if (cfg.epsilon == 0.0) return x;

  const double eps = cfg.epsilon;
  auto project = [&](Tensor& xa) {
    for (std::size_t i = 0; i < xa.data.size(); ++i) {
      double lo = std::max(0.0, x.data[i] - eps), hi = std::min(1.0, x.data[i] + eps);
      // x +- eps rounds to nearest; pull a bound back inside by one ulp when it rounded outward
      if (exceeds(hi, x.data[i], eps)) hi = std::nextafter(hi, 0.0);
      if (exceeds(x.data[i], lo, eps)) lo = std::nextafter(lo, 1.0);
      xa.data[i] = std::clamp(xa.data[i], lo, hi);
    }
  };
  Tensor xa = x;
  if (cfg.random_start) {
    Rng rng(cfg.seed);
    for (double& v : xa.data) v += rng.uniform(-eps, eps);
    project(xa);
  }
  for (int s = 0; s < cfg.steps; ++s) {
    Tensor g = attack_objective(b, xa, loss).grad;
    for (std::size_t i = 0; i < xa.data.size(); ++i) xa.data[i] += cfg.step_size * sign(g.data[i]);
    project(xa);
  }
  return xa;
}

enum class SourceVariant { Clean, Adv, Kl };

inline Tensor dart_source_transform(const ModelBundle& b, const Tensor& xs, const std::vector<int>& ys,
                                    SourceVariant v, const PgdConfig& cfg) {
  switch (v) {
    case SourceVariant::Clean: return xs;
    case SourceVariant::Adv: return pgd(b, xs, LossSpec::classification(ys), cfg);
    case SourceVariant::Kl: return pgd(b, xs, LossSpec::kl_to_clean(class_logits(b, xs)), cfg);
  }
  return xs;
}

inline Tensor dart_target_transform(const ModelBundle& b, const Tensor& xs_tilde, const Tensor& xt,
                                    const std::vector<int>& yt, double lambda1, double lambda2,
                                    const PgdConfig& cfg) {
  return pgd(b, xt, LossSpec::joint_target(yt, xs_tilde, lambda1, lambda2), cfg);
}

inline double linf_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("linf_distance: size mismatch");
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// ---- attack-result files ----

struct AttackRecord {
  std::uint64_t sample_id = 0;
  double clean_score = 0.0;
  double adv_score = 0.0;
  double linf = 0.0;
  bool bypassed = false;
};

inline std::string attack_records_csv(const std::vector<AttackRecord>& rows, const std::string& comment = "") {
  std::string out;
  if (!comment.empty()) out += "# " + comment + "\n";
  out += "sample_id,clean_score,adv_score,linf,bypassed\n";
  for (const auto& r : rows)
    out += csv::join({hex64(r.sample_id), csv::exact(r.clean_score), csv::exact(r.adv_score), csv::exact(r.linf),
                      r.bypassed ? "1" : "0"}) +
           "\n";
  return out;
}

inline std::vector<AttackRecord> read_attack_records(const std::string& path) {
  auto t = csv::read(path);
  auto ci = t.column("sample_id"), cc = t.column("clean_score"), ca = t.column("adv_score"), cl = t.column("linf"),
       cb = t.column("bypassed");
  std::vector<AttackRecord> rows;
  try {
    for (const auto& r : t.rows)
      rows.push_back({std::stoull(r.at(ci), nullptr, 16), std::stod(r.at(cc)), std::stod(r.at(ca)),
                      std::stod(r.at(cl)), r.at(cb) == "1"});
  } catch (const std::logic_error&) {
    throw FormatError("attack records: malformed row in " + path);
  }
  return rows;
}

}  // namespace robustda
