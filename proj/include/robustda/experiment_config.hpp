#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustda/advda_train.hpp"
#include "robustda/driftdata.hpp"
#include "robustda/mcts_attack.hpp"
#include "robustda/networks.hpp"

namespace robustda {

struct DefenseSpec {
  std::string name;
  std::string variant;
  double epsilon_255 = 0.0;  // PGD budget in units of 1/255; DART only

  double epsilon() const { return epsilon_255 / 255.0; }
  // advda is evaluated as the pretrained checkpoint itself
  bool pretrained() const { return variant == "advda"; }
  bool malguise() const { return variant == "malguise_clean" || variant == "malguise_adv"; }
};

struct PgdAttackSpec {
  std::string name;
  double epsilon_255 = 8.0;
  int steps = 20;
  double step_fraction = 0.25;  // step size as a fraction of epsilon

  double epsilon() const { return epsilon_255 / 255.0; }
  double step_size() const { return epsilon() * step_fraction; }
};

struct MctsAttackSpec {
  std::string name = "mcts";
  MctsConfig mcts;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;                  // root of every derived seed
  std::vector<std::uint64_t> run_seeds;    // independent replicates
  std::vector<int> windows;
  std::vector<double> fpr;
  std::string output_dir;                  // absolute after loading
  std::size_t workers = 30;
  CorpusConfig corpus;
  Dims dims;
  TrainConfig train;
  std::vector<DefenseSpec> defenses;
  std::vector<PgdAttackSpec> pgd;
  MctsAttackSpec mcts;

  std::string hash;  // of the canonical form; output_dir and workers excluded

  const DefenseSpec& defense(const std::string& name) const {
    for (const auto& d : defenses)
      if (d.name == name) return d;
    throw ValidationError("config: unknown defense '" + name + "'");
  }
  std::vector<std::string> defense_names() const {
    std::vector<std::string> out;
    for (const auto& d : defenses) out.push_back(d.name);
    return out;
  }
  std::vector<std::string> attack_names() const {
    std::vector<std::string> out;
    for (const auto& p : pgd) out.push_back(p.name);
    out.push_back(mcts.name);
    return out;
  }
  std::size_t window_count() const { return corpus.target_months().size() - 1; }
};

// Training-time PGD always runs this many steps (see make_transform).
inline constexpr int kTrainingPgdSteps = 5;

namespace detail {

/// Walks one JSON object, remembering the dotted path for error messages and
/// rejecting keys nobody asked for.
class Fields {
public:
  Fields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& msg) {
    throw ValidationError("config: " + path + ": " + msg);
  }
  std::string at(const std::string& key) const { return path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json& get(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) fail(at(key), "missing required field");
    return j_.at(key);
  }
  const nlohmann::json* find(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void number(const std::string& key, double& out, bool required = false) {
    const auto* v = required ? &get(key) : find(key);
    if (!v) return;
    if (!v->is_number()) fail(at(key), "expected a number");
    out = v->get<double>();
  }
  template <typename Int>
  void integer(const std::string& key, Int& out, bool required = false) {
    const auto* v = required ? &get(key) : find(key);
    if (!v) return;
    if (!v->is_number_integer()) fail(at(key), "expected an integer");
    if constexpr (std::is_unsigned_v<Int>) {
      if (v->is_number_unsigned() || v->get<std::int64_t>() >= 0)
        out = static_cast<Int>(v->get<std::uint64_t>());
      else
        fail(at(key), "expected a non-negative integer");
    } else {
      out = static_cast<Int>(v->get<std::int64_t>());
    }
  }
  void text(const std::string& key, std::string& out, bool required = false) {
    const auto* v = required ? &get(key) : find(key);
    if (!v) return;
    if (!v->is_string()) fail(at(key), "expected a string");
    out = v->get<std::string>();
  }
  template <typename Int>
  void int_pair(const std::string& key, Int& lo, Int& hi) {
    const auto* v = find(key);
    if (!v) return;
    if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number_integer() || !(*v)[1].is_number_integer())
      fail(at(key), "expected [lo, hi] integers");
    lo = (*v)[0].get<Int>();
    hi = (*v)[1].get<Int>();
  }
  void num_pair(const std::string& key, double& lo, double& hi) {
    const auto* v = find(key);
    if (!v) return;
    if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number())
      fail(at(key), "expected [lo, hi] numbers");
    lo = (*v)[0].get<double>();
    hi = (*v)[1].get<double>();
  }

  void done() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(at(k), "unknown field");
  }

private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline const nlohmann::json& array_at(Fields& f, const std::string& key, bool required) {
  static const nlohmann::json empty = nlohmann::json::array();
  const auto* v = required ? &f.get(key) : f.find(key);
  if (!v) return empty;
  if (!v->is_array()) Fields::fail(f.at(key), "expected an array");
  return *v;
}

inline void parse_style(const nlohmann::json& j, const std::string& path, ProgramStyle& s) {
  if (!j.is_object()) Fields::fail(path, "expected an object");
  static const std::set<std::string> known{"w_call",     "w_out_lo",   "w_out_hi", "w_out_reg", "w_push",
                                           "w_mov_same", "w_mov_diff", "w_nop",    "high_reg",  "mid",
                                           "leaf",       "blocks",     "block_len", "main_scale", "skip_prob",
                                           "pad_prob",   "pad",        "main_last", "base"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) Fields::fail(path + "." + k, "unknown field");
  try {
    s = style_from_json(j, s);
  } catch (const nlohmann::json::exception& e) {
    Fields::fail(path, std::string("bad style value: ") + e.what());
  } catch (const ValidationError& e) {
    Fields::fail(path, e.what());
  }
}

inline void parse_trampolines(Fields& parent, const std::string& key, CorpusConfig::Trampolines& t) {
  const auto* v = parent.find(key);
  if (!v) return;
  Fields f(*v, parent.at(key));
  f.number("prob", t.prob);
  f.int_pair("count", t.lo, t.hi);
  f.done();
}

inline void parse_corpus(const nlohmann::json& j, const std::string& path, CorpusConfig& c) {
  Fields f(j, path);
  const auto& months = array_at(f, "months", false);
  if (!months.empty()) {
    c.months.clear();
    for (std::size_t i = 0; i < months.size(); ++i) {
      Fields m(months[i], f.at("months") + "[" + std::to_string(i) + "]");
      MonthSpec spec;
      m.text("id", spec.id, true);
      m.integer("malware", spec.malware, true);
      m.integer("families", spec.families, true);
      m.number("malware_ratio", spec.malware_ratio);
      m.done();
      c.months.push_back(spec);
    }
  }
  f.integer("source_months", c.source_months);
  f.integer("gap_month", c.gap_month);
  f.num_pair("unseen", c.unseen_lo, c.unseen_hi);
  f.number("drift", c.drift);
  f.number("prior_drift", c.prior_drift);
  f.number("family_spread", c.family_spread);
  f.number("sample_jitter", c.sample_jitter);
  f.integer("benign_total", c.benign_total);
  f.integer("benign_templates", c.benign_templates);
  f.integer("label_budget", c.label_budget);
  parse_trampolines(f, "benign_trampolines", c.benign_trampolines);
  parse_trampolines(f, "malware_trampolines", c.malware_trampolines);
  if (const auto* s = f.find("stealth")) {
    Fields sf(*s, f.at("stealth"));
    sf.number("prob", c.stealth_prob);
    sf.num_pair("mix", c.stealth_lo, c.stealth_hi);
    sf.done();
  }
  if (const auto* s = f.find("malware_prior")) parse_style(*s, f.at("malware_prior"), c.malware_prior);
  if (const auto* s = f.find("benign_prior")) parse_style(*s, f.at("benign_prior"), c.benign_prior);
  f.done();
}

inline void parse_mcts(const nlohmann::json& j, const std::string& path, MctsAttackSpec& m) {
  Fields f(j, path);
  f.text("name", m.name);
  f.integer("levels", m.mcts.levels);
  f.integer("budget_per_level", m.mcts.budget_per_level);
  f.number("size_cap_ratio", m.mcts.size_cap_ratio);
  f.number("exploration", m.mcts.exploration);
  f.int_pair("nops", m.mcts.nops.lo, m.mcts.nops.hi);
  f.done();
  try {
    m.mcts.validate();
  } catch (const ValidationError& e) {
    Fields::fail(path, e.what());
  }
}

inline nlohmann::json trampolines_json(const CorpusConfig::Trampolines& t) {
  return {{"prob", t.prob}, {"count", {t.lo, t.hi}}};
}

}  // namespace detail

inline std::string config_hash(const ExperimentConfig& c);

/// Nine defenses, two PGD budgets and the MCTS attack over five windows and three seeds.
inline ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.seed = 1;
  c.run_seeds = {1, 2, 3};
  c.windows = {0, 1, 2, 3, 4};
  c.fpr = {0.005, 0.01, 0.02};
  c.output_dir = "runs/default";
  c.corpus = default_corpus_config();
  c.train.lr = 1e-3;
  c.defenses = {{"advda", "advda", 0},
                {"dart_clean_e2", "dart_clean", 2},
                {"dart_kl_e2", "dart_kl", 2},
                {"dart_adv_e2", "dart_adv", 2},
                {"dart_clean_e8", "dart_clean", 8},
                {"dart_kl_e8", "dart_kl", 8},
                {"dart_adv_e8", "dart_adv", 8},
                {"malguise_clean", "malguise_clean", 0},
                {"malguise_adv", "malguise_adv", 0}};
  c.pgd = {{"pgd_e2", 2, 20, 0.25}, {"pgd_e8", 8, 20, 0.25}};
  c.corpus.seed = derive_seed(c.seed, "corpus");
  c.hash = config_hash(c);
  return c;
}

/// Canonical JSON of everything that can change an output byte.
inline nlohmann::json canonical_json(const ExperimentConfig& c) {
  nlohmann::json months = nlohmann::json::array();
  for (const auto& m : c.corpus.months)
    months.push_back({{"id", m.id}, {"malware", m.malware}, {"families", m.families}, {"malware_ratio", m.malware_ratio}});
  nlohmann::json corpus{{"months", months},
                        {"source_months", c.corpus.source_months},
                        {"gap_month", c.corpus.gap_month},
                        {"unseen", {c.corpus.unseen_lo, c.corpus.unseen_hi}},
                        {"drift", c.corpus.drift},
                        {"prior_drift", c.corpus.prior_drift},
                        {"family_spread", c.corpus.family_spread},
                        {"sample_jitter", c.corpus.sample_jitter},
                        {"benign_total", c.corpus.benign_total},
                        {"benign_templates", c.corpus.benign_templates},
                        {"label_budget", c.corpus.label_budget},
                        {"benign_trampolines", detail::trampolines_json(c.corpus.benign_trampolines)},
                        {"malware_trampolines", detail::trampolines_json(c.corpus.malware_trampolines)},
                        {"stealth", {{"prob", c.corpus.stealth_prob}, {"mix", {c.corpus.stealth_lo, c.corpus.stealth_hi}}}},
                        {"malware_prior", style_to_json(c.corpus.malware_prior)},
                        {"benign_prior", style_to_json(c.corpus.benign_prior)}};
  nlohmann::json defenses = nlohmann::json::array();
  for (const auto& d : c.defenses) {
    nlohmann::json e{{"name", d.name}, {"variant", d.variant}};
    if (d.epsilon_255 != 0) e["epsilon_255"] = d.epsilon_255;
    defenses.push_back(e);
  }
  nlohmann::json pgd = nlohmann::json::array();
  for (const auto& p : c.pgd)
    pgd.push_back({{"name", p.name}, {"epsilon_255", p.epsilon_255}, {"steps", p.steps}, {"step_fraction", p.step_fraction}});
  const auto& m = c.mcts.mcts;
  return {{"seed", c.seed},
          {"seeds", c.run_seeds},
          {"windows", c.windows},
          {"fpr", c.fpr},
          {"corpus", corpus},
          {"model", {{"hidden", c.dims.H}, {"embedding", c.dims.E}, {"classifier_hidden", c.dims.C},
                     {"discriminator_hidden", c.dims.D}}},
          {"train", {{"lambda1", c.train.lambda1}, {"lambda2", c.train.lambda2}, {"lr", c.train.lr},
                     {"batch_size", c.train.batch_size}, {"epochs", c.train.epochs},
                     {"discriminator_steps", c.train.discriminator_steps}}},
          {"defenses", defenses},
          {"attacks", {{"pgd", pgd},
                       {"mcts", {{"name", c.mcts.name}, {"levels", m.levels}, {"budget_per_level", m.budget_per_level},
                                 {"size_cap_ratio", m.size_cap_ratio}, {"exploration", m.exploration},
                                 {"nops", {m.nops.lo, m.nops.hi}}}}}}};
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(canonical_json(c).dump())); }

/// Cross-field checks. Throws ValidationError naming the offending field.
inline void validate(const ExperimentConfig& c) {
  using detail::Fields;
  try {
    c.corpus.validate();
  } catch (const ValidationError& e) {
    Fields::fail("config.corpus", e.what());
  }
  try {
    c.train.validate();
  } catch (const ValidationError& e) {
    Fields::fail("config.train", e.what());
  }
  if (c.dims.F != kFeatureDim) Fields::fail("config.model", "feature width must be " + std::to_string(kFeatureDim));
  if (!c.dims.H || !c.dims.E || !c.dims.C || !c.dims.D) Fields::fail("config.model", "widths must be positive");
  if (c.run_seeds.empty()) Fields::fail("config.seeds", "need at least one seed");
  if (std::set<std::uint64_t>(c.run_seeds.begin(), c.run_seeds.end()).size() != c.run_seeds.size())
    Fields::fail("config.seeds", "duplicate seed");
  if (c.windows.empty()) Fields::fail("config.windows", "need at least one window");
  const int nw = static_cast<int>(c.window_count());
  for (std::size_t i = 0; i < c.windows.size(); ++i)
    if (c.windows[i] < 0 || c.windows[i] >= nw)
      Fields::fail("config.windows[" + std::to_string(i) + "]",
                   "window " + std::to_string(c.windows[i]) + " out of range [0, " + std::to_string(nw) + ")");
  if (std::set<int>(c.windows.begin(), c.windows.end()).size() != c.windows.size())
    Fields::fail("config.windows", "duplicate window");
  if (c.fpr.empty()) Fields::fail("config.fpr", "need at least one FPR point");
  for (std::size_t i = 0; i < c.fpr.size(); ++i) {
    if (!(c.fpr[i] > 0 && c.fpr[i] < 1)) Fields::fail("config.fpr[" + std::to_string(i) + "]", "must lie in (0, 1)");
    if (i && !(c.fpr[i] > c.fpr[i - 1])) Fields::fail("config.fpr", "points must be strictly increasing");
  }
  if (c.workers < 1) Fields::fail("config.workers", "must be >= 1");

  std::set<std::string> names;
  bool has_pretrained = false;
  for (std::size_t i = 0; i < c.defenses.size(); ++i) {
    const auto& d = c.defenses[i];
    const std::string at = "config.defenses[" + std::to_string(i) + "]";
    if (d.name.empty()) Fields::fail(at + ".name", "must not be empty");
    if (!names.insert(d.name).second) Fields::fail(at + ".name", "duplicate defense '" + d.name + "'");
    TransformSpec tf;
    try {
      tf = make_transform(d.variant, d.epsilon());
    } catch (const ValidationError& e) {
      Fields::fail(at + ".variant", e.what());
    }
    if (tf.uses_pgd() && !(d.epsilon_255 > 0)) Fields::fail(at + ".epsilon_255", "PGD variants need a positive budget");
    if (!tf.uses_pgd() && d.epsilon_255 != 0) Fields::fail(at + ".epsilon_255", "only PGD variants take a budget");
    if (d.pretrained()) {
      if (has_pretrained) Fields::fail(at + ".variant", "only one advda defense is allowed");
      has_pretrained = true;
    }
  }
  if (c.defenses.empty()) Fields::fail("config.defenses", "need at least one defense");

  for (std::size_t i = 0; i < c.pgd.size(); ++i) {
    const auto& p = c.pgd[i];
    const std::string at = "config.attacks.pgd[" + std::to_string(i) + "]";
    if (p.name.empty()) Fields::fail(at + ".name", "must not be empty");
    if (!names.insert(p.name).second) Fields::fail(at + ".name", "name '" + p.name + "' already used");
    if (!(p.epsilon_255 > 0)) Fields::fail(at + ".epsilon_255", "must be > 0");
    if (!(p.step_fraction > 0)) Fields::fail(at + ".step_fraction", "must be > 0");
    if (p.steps < 4 * kTrainingPgdSteps)
      Fields::fail(at + ".steps", "evaluation PGD needs at least " + std::to_string(4 * kTrainingPgdSteps) +
                                      " iterations (4x the " + std::to_string(kTrainingPgdSteps) + " used in training)");
  }
  if (c.mcts.name.empty()) Fields::fail("config.attacks.mcts.name", "must not be empty");
  if (!names.insert(c.mcts.name).second)
    Fields::fail("config.attacks.mcts.name", "name '" + c.mcts.name + "' already used");
}

/// Parses and validates a config document. Relative output_dir resolves against `base_dir`.
inline ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir = {},
                                                std::optional<std::uint64_t> seed_override = std::nullopt) {
  using detail::Fields;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config: not valid JSON: ") + e.what());
  }
  ExperimentConfig c = default_experiment_config();
  Fields f(j, "config");
  if (seed_override) {
    f.find("seed");
    c.seed = *seed_override;
  } else {
    f.integer("seed", c.seed, true);
  }
  if (f.has("seeds")) {
    c.run_seeds.clear();
    const auto& a = detail::array_at(f, "seeds", false);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].is_number_unsigned()) Fields::fail("config.seeds[" + std::to_string(i) + "]", "expected a non-negative integer");
      c.run_seeds.push_back(a[i].get<std::uint64_t>());
    }
  }
  if (f.has("windows")) {
    c.windows.clear();
    const auto& a = detail::array_at(f, "windows", false);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].is_number_integer()) Fields::fail("config.windows[" + std::to_string(i) + "]", "expected an integer");
      c.windows.push_back(a[i].get<int>());
    }
  }
  if (f.has("fpr")) {
    c.fpr.clear();
    const auto& a = detail::array_at(f, "fpr", false);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].is_number()) Fields::fail("config.fpr[" + std::to_string(i) + "]", "expected a number");
      c.fpr.push_back(a[i].get<double>());
    }
  }
  f.text("output_dir", c.output_dir);
  f.integer("workers", c.workers);
  if (const auto* v = f.find("corpus")) detail::parse_corpus(*v, "config.corpus", c.corpus);
  if (const auto* v = f.find("model")) {
    Fields m(*v, "config.model");
    m.integer("hidden", c.dims.H);
    m.integer("embedding", c.dims.E);
    m.integer("classifier_hidden", c.dims.C);
    m.integer("discriminator_hidden", c.dims.D);
    m.done();
  }
  if (const auto* v = f.find("train")) {
    Fields t(*v, "config.train");
    t.number("lambda1", c.train.lambda1);
    t.number("lambda2", c.train.lambda2);
    t.number("lr", c.train.lr);
    t.integer("batch_size", c.train.batch_size);
    t.integer("epochs", c.train.epochs);
    t.integer("discriminator_steps", c.train.discriminator_steps);
    t.done();
  }
  if (f.has("defenses")) {
    c.defenses.clear();
    const auto& a = detail::array_at(f, "defenses", false);
    for (std::size_t i = 0; i < a.size(); ++i) {
      Fields d(a[i], "config.defenses[" + std::to_string(i) + "]");
      DefenseSpec s;
      d.text("name", s.name, true);
      d.text("variant", s.variant, true);
      d.number("epsilon_255", s.epsilon_255);
      d.done();
      c.defenses.push_back(s);
    }
  }
  if (const auto* v = f.find("attacks")) {
    Fields at(*v, "config.attacks");
    if (at.has("pgd")) {
      c.pgd.clear();
      const auto& a = detail::array_at(at, "pgd", false);
      for (std::size_t i = 0; i < a.size(); ++i) {
        Fields p(a[i], "config.attacks.pgd[" + std::to_string(i) + "]");
        PgdAttackSpec s;
        p.text("name", s.name, true);
        p.number("epsilon_255", s.epsilon_255, true);
        p.integer("steps", s.steps);
        p.number("step_fraction", s.step_fraction);
        p.done();
        c.pgd.push_back(s);
      }
    }
    if (const auto* m = at.find("mcts")) detail::parse_mcts(*m, "config.attacks.mcts", c.mcts);
    at.done();
  }
  f.done();

  c.corpus.seed = derive_seed(c.seed, "corpus");
  validate(c);
  std::filesystem::path out(c.output_dir);
  if (out.is_relative() && !base_dir.empty()) out = base_dir / out;
  c.output_dir = out.lexically_normal().string();
  c.hash = config_hash(c);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path,
                                               std::optional<std::uint64_t> seed_override = std::nullopt) {
  if (!std::filesystem::exists(path)) throw ValidationError("config: file not found: " + path);
  auto base = std::filesystem::absolute(path).parent_path();
  return parse_experiment_config(read_text(path), base, seed_override);
}

}  // namespace robustda
