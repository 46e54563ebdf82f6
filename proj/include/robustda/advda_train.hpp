#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <memory>
#include <string>
#include <vector>

#include "robustda/csv.hpp"
#include "robustda/networks.hpp"
#include "robustda/pgd.hpp"

namespace robustda {

struct TrainConfig {
  double lambda1 = 0.5;
  double lambda2 = 0.02;
  double lr = 1e-4;
  int batch_size = 32;
  int epochs = 30;
  std::uint64_t seed = 0;
  int discriminator_steps = 1;

  void validate() const {
    if (!(lambda1 >= 0) || !(lambda2 >= 0)) throw ValidationError("train: lambda1 and lambda2 must be >= 0");
    if (!(lr > 0)) throw ValidationError("train: lr must be > 0");
    if (batch_size < 2) throw ValidationError("train: batch_size must be >= 2");
    if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
    if (discriminator_steps < 0) throw ValidationError("train: discriminator_steps must be >= 0");
  }
};

/// One domain's training rows. `labeled[i]` marks rows whose label may enter the loss.
struct DomainData {
  Tensor X;
  std::vector<int> y;
  std::vector<std::uint64_t> ids;
  std::vector<bool> labeled;

  std::size_t size() const { return ids.size(); }

  void check(std::size_t F, const char* what) const {
    if (ids.empty()) throw ValidationError(std::string(what) + ": empty domain");
    if (X.rank() != 2 || X.rows() != ids.size() || X.cols() != F || y.size() != ids.size() ||
        labeled.size() != ids.size())
      throw ShapeError(std::string(what) + ": inconsistent domain arrays");
  }
};

using SubstitutionTable = std::map<std::uint64_t, std::vector<double>>;

enum class SourceKind { Identity, PgdAdv, PgdKl, Precomputed };
enum class TargetKind { Identity, PgdJoint, Precomputed };

struct TransformSpec {
  SourceKind source = SourceKind::Identity;
  TargetKind target = TargetKind::Identity;
  double epsilon = 0.0;
  int steps = 5;
  double step_size = 0.0;
  bool random_start = true;
  std::shared_ptr<const SubstitutionTable> source_table;
  std::shared_ptr<const SubstitutionTable> target_table;

  bool uses_pgd() const {
    return source == SourceKind::PgdAdv || source == SourceKind::PgdKl || target == TargetKind::PgdJoint;
  }
  bool uses_tables() const { return source == SourceKind::Precomputed || target == TargetKind::Precomputed; }

  void validate() const {
    if (uses_pgd()) PgdConfig{epsilon, steps, step_size, random_start, 0}.validate();
    if (uses_pgd() && !(epsilon > 0)) throw ValidationError("transform: PGD kinds need epsilon > 0");
    if (source == SourceKind::Precomputed && (!source_table || source_table->empty()))
      throw ValidationError("transform: precomputed source needs a non-empty substitution table");
    if (target == TargetKind::Precomputed && (!target_table || target_table->empty()))
      throw ValidationError("transform: precomputed target needs a non-empty substitution table");
  }
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"advda",   "dart_clean",     "dart_adv",
                                              "dart_kl", "malguise_clean", "malguise_adv"};
  return names;
}

/// Transform kinds of a named variant; PGD kinds use 5 steps of eps/4.
inline TransformSpec make_transform(const std::string& variant, double epsilon = 0.0) {
  TransformSpec t;
  if (variant == "advda") {
  } else if (variant == "dart_clean") {
    t.target = TargetKind::PgdJoint;
  } else if (variant == "dart_adv") {
    t.source = SourceKind::PgdAdv;
    t.target = TargetKind::PgdJoint;
  } else if (variant == "dart_kl") {
    t.source = SourceKind::PgdKl;
    t.target = TargetKind::PgdJoint;
  } else if (variant == "malguise_clean") {
    t.target = TargetKind::Precomputed;
  } else if (variant == "malguise_adv") {
    t.source = SourceKind::Precomputed;
    t.target = TargetKind::Precomputed;
  } else {
    std::string list;
    for (const auto& n : variant_names()) list += (list.empty() ? "" : ", ") + n;
    throw ValidationError("unknown variant '" + variant + "'; valid variants: " + list);
  }
  if (t.uses_pgd()) {
    t.epsilon = epsilon;
    t.steps = 5;
    t.step_size = epsilon / 4;
  }
  return t;
}

// ---- objective ----

struct Batch {
  Tensor xs;
  std::vector<int> ys;
  std::vector<std::uint64_t> source_ids;
  Tensor xt;
  std::vector<int> yt;
  std::vector<std::uint64_t> target_ids;
  std::vector<std::size_t> labeled_rows;  // rows of xt whose labels enter the target loss
};

struct ObjectiveTerms {
  double source_ce = 0.0;
  double target_ce = 0.0;
  double omega = 0.0;
  double total = 0.0;
};

namespace detail {

struct ObjectiveGraph {
  Var source_ce, target_ce, omega, total;
  bool has_target = false, has_omega = false;
};

inline Var domain_loss(Tape& tape, const ModelBundle& b, const std::vector<Var>& dp, Var emb, int domain) {
  Var logits = apply(tape, b.d_graph(), dp, emb, false, nullptr);
  return ops::cross_entropy(tape, logits, std::vector<int>(tape.value(emb).rows(), domain));
}

// CE_s + lambda1 * CE_t(labeled rows) + lambda2 * Omega. Zero-weight terms are not built.
inline ObjectiveGraph build_objective(Tape& tape, const ModelBundle& b, const std::vector<Var>& gp,
                                      const std::vector<Var>& fp, const std::vector<Var>& dp, const Batch& batch,
                                      const TrainConfig& cfg, bool train, Rng* rng,
                                      const std::function<void(const std::vector<std::uint64_t>&)>& audit) {
  ObjectiveGraph o;
  Var es = apply(tape, b.g_graph(), gp, tape.constant(batch.xs), train, rng);
  o.source_ce = ops::cross_entropy(tape, apply(tape, b.f_graph(), fp, es, train, rng), batch.ys);
  o.total = o.source_ce;
  Var et{};
  const bool need_et = (cfg.lambda1 > 0 && !batch.labeled_rows.empty()) || cfg.lambda2 > 0;
  if (need_et) et = apply(tape, b.g_graph(), gp, tape.constant(batch.xt), train, rng);
  if (cfg.lambda1 > 0 && !batch.labeled_rows.empty()) {
    std::vector<int> yl;
    std::vector<std::uint64_t> ids;
    for (auto r : batch.labeled_rows) {
      yl.push_back(batch.yt.at(r));
      if (!batch.target_ids.empty()) ids.push_back(batch.target_ids.at(r));
    }
    if (audit) audit(ids);
    Var el = ops::select_rows(tape, et, batch.labeled_rows);
    o.target_ce = ops::cross_entropy(tape, apply(tape, b.f_graph(), fp, el, train, rng), yl);
    o.total = ops::add(tape, o.total, ops::scale(tape, o.target_ce, cfg.lambda1));
    o.has_target = true;
  }
  if (cfg.lambda2 > 0) {
    o.omega = ops::scale(
        tape, ops::add(tape, domain_loss(tape, b, dp, es, kSourceDomain), domain_loss(tape, b, dp, et, kTargetDomain)),
        -1.0);
    o.total = ops::add(tape, o.total, ops::scale(tape, o.omega, cfg.lambda2));
    o.has_omega = true;
  }
  return o;
}

inline ObjectiveTerms read_terms(const Tape& tape, const ObjectiveGraph& o) {
  ObjectiveTerms t;
  t.source_ce = tape.value(o.source_ce).data[0];
  if (o.has_target) t.target_ce = tape.value(o.target_ce).data[0];
  if (o.has_omega) t.omega = tape.value(o.omega).data[0];
  t.total = tape.value(o.total).data[0];
  return t;
}

}  // namespace detail

/// Objective value on a batch. In train mode dropout masks come from `dropout_seed`.
inline ObjectiveTerms objective_terms(const ModelBundle& b, const Batch& batch, const TrainConfig& cfg, bool train,
                                      std::uint64_t dropout_seed) {
  Tape tape;
  auto gp = register_params(tape, b.g, false);
  auto fp = register_params(tape, b.f, false);
  auto dp = register_params(tape, b.d, false);
  Rng rng(dropout_seed);
  auto o = detail::build_objective(tape, b, gp, fp, dp, batch, cfg, train, &rng, {});
  return detail::read_terms(tape, o);
}

/// Omega = -CE(d(g(xs)), source) - CE(d(g(xt)), target), batch means, at the current d.
inline double domain_divergence(const ModelBundle& b, const Tensor& xs, const Tensor& xt) {
  if (xs.rank() != 2 || xt.rank() != 2 || xs.rows() == 0 || xt.rows() == 0)
    throw ValidationError("domain_divergence: empty batch");
  auto ce = [&](const Tensor& x, int domain) {
    Tensor logp = ops::detail::log_softmax(discriminate(b, embed(b, x)));
    double s = 0;
    for (std::size_t r = 0; r < logp.rows(); ++r) s -= logp.at(r, static_cast<std::size_t>(domain));
    return s / static_cast<double>(logp.rows());
  };
  return -ce(xs, kSourceDomain) - ce(xt, kTargetDomain);
}

/// One Adam step of d minimizing CE(d(es), source) + CE(d(et), target), i.e. ascending Omega.
inline double discriminator_step(ModelBundle& b, AdamState& state, const Tensor& es, const Tensor& et, double lr) {
  Tape tape;
  auto dp = register_params(tape, b.d);
  Var loss = ops::add(tape, detail::domain_loss(tape, b, dp, tape.constant(es), kSourceDomain),
                      detail::domain_loss(tape, b, dp, tape.constant(et), kTargetDomain));
  double v = tape.value(loss).data[0];
  tape.backward(loss);
  std::vector<Tensor> grads;
  for (auto p : dp) grads.push_back(tape.grad(p));
  adam_step(b.d, grads, state, lr);
  return v;
}

/// One Adam step of g and f on the objective; returns the terms before the step.
inline ObjectiveTerms generator_step(ModelBundle& b, AdamState& state, const Batch& batch, const TrainConfig& cfg,
                                     std::uint64_t dropout_seed,
                                     const std::function<void(const std::vector<std::uint64_t>&)>& audit = {}) {
  Tape tape;
  auto gp = register_params(tape, b.g);
  auto fp = register_params(tape, b.f);
  auto dp = register_params(tape, b.d, false);
  Rng rng(dropout_seed);
  auto o = detail::build_objective(tape, b, gp, fp, dp, batch, cfg, true, &rng, audit);
  auto terms = detail::read_terms(tape, o);
  if (!std::isfinite(terms.total)) throw NumericError("train: non-finite objective");
  tape.backward(o.total);
  std::vector<Tensor*> params;
  std::vector<Tensor> grads;
  for (std::size_t i = 0; i < gp.size(); ++i) {
    params.push_back(&b.g[i]);
    grads.push_back(tape.grad(gp[i]));
  }
  for (std::size_t i = 0; i < fp.size(); ++i) {
    params.push_back(&b.f[i]);
    grads.push_back(tape.grad(fp[i]));
  }
  adam_step(std::span<Tensor* const>(params), std::span<const Tensor>(grads), state, cfg.lr);
  return terms;
}

// ---- transforms ----

/// Rows processed by forward+backward passes, per phase.
struct WorkUnits {
  std::uint64_t train = 0;
  std::uint64_t source_attack = 0;
  std::uint64_t target_attack = 0;

  std::uint64_t total() const { return train + source_attack + target_attack; }
  WorkUnits& operator+=(const WorkUnits& o) {
    train += o.train;
    source_attack += o.source_attack;
    target_attack += o.target_attack;
    return *this;
  }
};

namespace detail {

inline Tensor lookup(const SubstitutionTable& table, const std::vector<std::uint64_t>& ids, std::size_t F,
                     const char* what) {
  Tensor x = Tensor::matrix(ids.size(), F);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    auto it = table.find(ids[r]);
    if (it == table.end())
      throw ValidationError(std::string(what) + " substitution table has no entry for sample " + hex64(ids[r]));
    if (it->second.size() != F) throw ShapeError(std::string(what) + " substitution row has wrong width");
    std::copy(it->second.begin(), it->second.end(), x.data.begin() + static_cast<long>(r * F));
  }
  return x;
}

}  // namespace detail

/// Replaces batch inputs with their transformed versions (x~s first, then x~t).
inline void apply_transform(const ModelBundle& b, const TransformSpec& tf, Batch& batch, double lambda1,
                            double lambda2, std::uint64_t seed, WorkUnits* work = nullptr) {
  const std::size_t F = b.dims.F;
  PgdConfig pc{tf.epsilon, tf.steps, tf.step_size, tf.random_start, 0};
  auto pgd_rows = [&](std::size_t rows) { return static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(tf.steps); };
  switch (tf.source) {
    case SourceKind::Identity: break;
    case SourceKind::PgdAdv:
    case SourceKind::PgdKl:
      pc.seed = derive_seed(seed, "pgd.source");
      batch.xs = dart_source_transform(b, batch.xs, batch.ys,
                                       tf.source == SourceKind::PgdAdv ? SourceVariant::Adv : SourceVariant::Kl, pc);
      if (work) work->source_attack += pgd_rows(batch.xs.rows());
      break;
    case SourceKind::Precomputed: batch.xs = detail::lookup(*tf.source_table, batch.source_ids, F, "source"); break;
  }
  switch (tf.target) {
    case TargetKind::Identity: break;
    case TargetKind::PgdJoint: {
      pc.seed = derive_seed(seed, "pgd.target");
      batch.xt = dart_target_transform(b, batch.xs, batch.xt, batch.yt, lambda1, lambda2, pc);
      if (work) work->target_attack += pgd_rows(batch.xt.rows());
      break;
    }
    case TargetKind::Precomputed: batch.xt = detail::lookup(*tf.target_table, batch.target_ids, F, "target"); break;
  }
}

// ---- training loop ----

struct EpochStats {
  int epoch = 0;
  double source_ce = 0.0;
  double target_ce = 0.0;
  double omega = 0.0;
  double seconds = 0.0;
};

struct TrainHooks {
  /// Called with the ids of target rows entering the classification loss.
  std::function<void(const std::vector<std::uint64_t>&)> target_loss_ids;
  /// Called before every iteration with the current bundle.
  std::function<void(std::uint64_t iteration, const ModelBundle&)> on_iteration;
  std::string checkpoint_dir;  // empty: no checkpoints
  int checkpoint_every = 0;
};

struct TrainResult {
  ModelBundle bundle;
  std::vector<EpochStats> curve;
  WorkUnits work;
};

inline std::size_t iterations_per_epoch(std::size_t source, std::size_t target, int batch_size) {
  const std::size_t n = std::max(source, target), bs = static_cast<std::size_t>(batch_size);
  return (n + bs - 1) / bs;
}

/// Draws batch_size/2 rows with replacement from each domain.
inline Batch sample_batch(const DomainData& S, const DomainData& T, int batch_size, Rng& rng) {
  const std::size_t half = static_cast<std::size_t>(batch_size) / 2;
  Batch b;
  std::vector<std::size_t> si(half), ti(half);
  for (auto& i : si) i = static_cast<std::size_t>(rng.below(S.size()));
  for (auto& i : ti) i = static_cast<std::size_t>(rng.below(T.size()));
  b.xs = S.X.gather_rows(si);
  b.xt = T.X.gather_rows(ti);
  for (std::size_t r = 0; r < half; ++r) {
    b.ys.push_back(S.y[si[r]]);
    b.source_ids.push_back(S.ids[si[r]]);
    b.yt.push_back(T.y[ti[r]]);
    b.target_ids.push_back(T.ids[ti[r]]);
    if (T.labeled[ti[r]]) b.labeled_rows.push_back(r);
  }
  return b;
}

/// Alternating optimization: per iteration, transform the batch, take k discriminator
/// steps, then one g/f step. The bundle's g, f and d are used as given.
inline TrainResult train_loop(ModelBundle bundle, const DomainData& S, const DomainData& T, const TransformSpec& tf,
                              const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  tf.validate();
  bundle.check();
  S.check(bundle.dims.F, "source");
  T.check(bundle.dims.F, "target");
  if (tf.target == TargetKind::PgdJoint)
    for (bool l : T.labeled)
      if (!l) throw ValidationError("train: PGD target transform needs labels for every target row");

  TrainResult res;
  ParamSet gf = bundle.g;
  gf.insert(gf.end(), bundle.f.begin(), bundle.f.end());
  AdamState gf_state = AdamState::for_params(gf);
  AdamState d_state = AdamState::for_params(bundle.d);
  Rng sampler(derive_seed(cfg.seed, "train.sampler"));
  const std::size_t iters = iterations_per_epoch(S.size(), T.size(), cfg.batch_size);
  const std::uint64_t half = static_cast<std::uint64_t>(cfg.batch_size / 2);
  std::uint64_t it = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    EpochStats st;
    st.epoch = epoch;
    for (std::size_t i = 0; i < iters; ++i, ++it) {
      if (hooks.on_iteration) hooks.on_iteration(it, bundle);
      try {
        Batch batch = sample_batch(S, T, cfg.batch_size, sampler);
        apply_transform(bundle, tf, batch, cfg.lambda1, cfg.lambda2, derive_seed(cfg.seed, "train.transform", {it}),
                        &res.work);
        if (cfg.discriminator_steps > 0) {
          Tensor es = embed(bundle, batch.xs), et = embed(bundle, batch.xt);
          for (int k = 0; k < cfg.discriminator_steps; ++k) {
            double v = discriminator_step(bundle, d_state, es, et, cfg.lr);
            if (!std::isfinite(v)) throw NumericError("non-finite discriminator loss");
          }
          res.work.train += 2 * half * static_cast<std::uint64_t>(cfg.discriminator_steps);
        }
        auto terms = generator_step(bundle, gf_state, batch, cfg, derive_seed(cfg.seed, "train.dropout", {it}),
                                    hooks.target_loss_ids);
        res.work.train += 2 * half;
        st.source_ce += terms.source_ce;
        st.target_ce += terms.target_ce;
        st.omega += terms.omega;
      } catch (const NumericError& e) {
        throw NumericError("train: divergence at epoch " + std::to_string(epoch) + " step " + std::to_string(i) +
                           ": " + e.what());
      }
    }
    const double n = static_cast<double>(iters);
    st.source_ce /= n;
    st.target_ce /= n;
    st.omega /= n;
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.curve.push_back(st);
    if (!hooks.checkpoint_dir.empty() && hooks.checkpoint_every > 0 &&
        (epoch % hooks.checkpoint_every == 0 || epoch == cfg.epochs))
      save_bundle(bundle, hooks.checkpoint_dir + "/epoch_" + std::to_string(epoch) + ".rdmb");
  }
  res.bundle = std::move(bundle);
  return res;
}

/// Non-robust domain adaptation from a fresh initialization.
inline TrainResult pretrain_advda(const DomainData& S, const DomainData& T, const TrainConfig& cfg,
                                  const Dims& dims = {}, const TrainHooks& hooks = {}) {
  return train_loop(init_bundle(dims, derive_seed(cfg.seed, "pretrain.init")), S, T, make_transform("advda"), cfg,
                    hooks);
}

/// Robust fine-tuning: g and f start from the pretrained bundle, d is re-initialized.
inline TrainResult robust_finetune(const ModelBundle& pretrained, const DomainData& S, const DomainData& T,
                                   const TransformSpec& tf, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  ModelBundle b = pretrained;
  b.d = fresh_discriminator(b.dims, derive_seed(cfg.seed, "finetune.d"));
  b.seed = cfg.seed;
  return train_loop(std::move(b), S, T, tf, cfg, hooks);
}

/// Loss curve without wall-clock columns, so equal runs give equal bytes.
inline std::string curve_csv(const std::vector<EpochStats>& curve, const std::string& comment = "") {
  std::string out;
  if (!comment.empty()) out += "# " + comment + "\n";
  out += "epoch,source_ce,target_ce,omega\n";
  for (const auto& e : curve)
    out += csv::join({std::to_string(e.epoch), csv::exact(e.source_ce), csv::exact(e.target_ce), csv::exact(e.omega)}) +
           "\n";
  return out;
}

/// Table of clean rows keyed by id, with `replace` rows substituted where present.
inline SubstitutionTable substitution_table(const DomainData& clean, const SubstitutionTable& replace = {}) {
  SubstitutionTable t;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    auto it = replace.find(clean.ids[i]);
    t[clean.ids[i]] = it != replace.end() ? it->second : clean.X.row_vector(i);
  }
  return t;
}

}  // namespace robustda
