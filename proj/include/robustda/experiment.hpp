#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "robustda/advda_train.hpp"
#include "robustda/driftdata.hpp"
#include "robustda/evalproto.hpp"
#include "robustda/experiment_config.hpp"
#include "robustda/mcts_attack.hpp"
#include "robustda/networks.hpp"
#include "robustda/parallel.hpp"
#include "robustda/pgd.hpp"

namespace robustda {

namespace fs = std::filesystem;

/// "0.005", "0.01": short enough for file names, exact for the configured points.
inline std::string fpr_label(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", f);
  return buf;
}

/// On-disk layout of one experiment directory.
struct RunPaths {
  fs::path root;

  fs::path corpus() const { return root / "corpus"; }
  fs::path window(int w) const { return root / ("w" + std::to_string(w)); }
  fs::path run(int w, std::uint64_t s) const { return window(w) / ("s" + std::to_string(s)); }
  fs::path pretrain_dir(int w, std::uint64_t s) const { return run(w, s) / "pretrain"; }
  fs::path pretrain_bundle(int w, std::uint64_t s) const { return pretrain_dir(w, s) / "advda.rdmb"; }
  fs::path defense_dir(int w, std::uint64_t s) const { return run(w, s) / "defenses"; }
  fs::path bundle(int w, std::uint64_t s, const DefenseSpec& d) const {
    return d.pretrained() ? pretrain_bundle(w, s) : defense_dir(w, s) / (d.name + ".rdmb");
  }
  fs::path cost(int w, std::uint64_t s, const std::string& defense) const {
    return run(w, s) / "costs" / (defense + ".json");
  }
  fs::path advsets(int w, std::uint64_t s) const { return run(w, s) / "advsets"; }
  fs::path eval(int w) const { return window(w) / "eval"; }
  fs::path attack_dir(int w, std::uint64_t s, const std::string& defense, const std::string& attack) const {
    return run(w, s) / "attacks" / defense / attack;
  }
  fs::path attack_file(int w, std::uint64_t s, const std::string& defense, const std::string& attack, double f) const {
    return attack_dir(w, s, defense, attack) / ("fpr_" + fpr_label(f) + ".csv");
  }
  fs::path report() const { return root / "report"; }
  fs::path timing() const { return root / "timing.csv"; }
};

/// Clean scores, thresholds and common sets of one window, as written by evaluate.
struct WindowEval {
  using Key = std::pair<std::uint64_t, std::string>;  // run seed, defense
  std::map<Key, std::vector<double>> thresholds;      // per FPR point
  std::map<Key, std::map<std::uint64_t, double>> scores;  // test malware
  std::map<Key, std::vector<double>> tpr;                // per FPR point
  std::map<std::pair<std::uint64_t, std::size_t>, CommonSet> common;  // run seed, FPR index
};

/// Adversarial feature rows for MalGuise training, with the queries spent finding them.
struct AdvSet {
  SubstitutionTable table;
  std::uint64_t queries = 0;
  std::size_t attacked = 0;
};

enum class AdvSide { Target = 0, Source = 1 };

namespace detail {

inline std::string side_name(AdvSide s) { return s == AdvSide::Target ? "target" : "source"; }

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  fs::create_directories(p.parent_path());
  write_file(p.string(), j.dump(1) + "\n");
}

inline nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_text(p.string()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline std::uint64_t parse_hex(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError(where + ": bad id '" + s + "'");
  }
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError(where + ": bad number '" + s + "'");
  }
}

inline std::string table_csv(const SubstitutionTable& t, const std::string& comment) {
  std::string out = "# " + comment + "\nsample_id";
  const std::size_t width = t.empty() ? kFeatureDim : t.begin()->second.size();
  for (std::size_t k = 0; k < width; ++k) out += ",f" + std::to_string(k);
  out += "\n";
  for (const auto& [id, row] : t) {
    out += hex64(id);
    for (double v : row) out += "," + csv::exact(v);
    out += "\n";
  }
  return out;
}

inline SubstitutionTable read_table_csv(const fs::path& p) {
  auto t = csv::read(p.string());
  SubstitutionTable out;
  for (const auto& r : t.rows) {
    if (r.size() != t.header.size()) throw FormatError(p.string() + ": ragged row");
    std::vector<double> v;
    for (std::size_t k = 1; k < r.size(); ++k) v.push_back(parse_double(r[k], p.string()));
    out[parse_hex(r[0], p.string())] = std::move(v);
  }
  return out;
}

}  // namespace detail

class Experiment {
public:
  explicit Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)), paths_{fs::path(cfg_.output_dir)} {
    cfg_.corpus.seed = derive_seed(cfg_.seed, "corpus");
    validate(cfg_);
    cfg_.hash = config_hash(cfg_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const RunPaths& paths() const { return paths_; }

  /// "config_hash=... seed=..." plus optional run coordinates.
  std::string stamp(std::optional<int> window = {}, std::optional<std::uint64_t> run_seed = {}) const {
    std::string s = "config_hash=" + cfg_.hash + " seed=" + std::to_string(cfg_.seed);
    if (run_seed) s += " run_seed=" + std::to_string(*run_seed);
    if (window) s += " window=" + std::to_string(*window);
    return s;
  }

  // ---- gen-data ----

  void gen_data() {
    auto t0 = now();
    auto corpus = generate_corpus(cfg_.corpus);
    auto parts = partition(corpus, cfg_.corpus);
    fs::create_directories(paths_.corpus());
    save_corpus(paths_.corpus().string(), corpus, parts);
    nlohmann::json months = nlohmann::json::array();
    for (const auto& m : corpus.months)
      if (!m.gap) months.push_back(m.spec.id);
    detail::write_json(paths_.corpus() / "meta.json", {{"config_hash", cfg_.hash},
                                                        {"seed", cfg_.seed},
                                                        {"corpus_hash", corpus_hash()},
                                                        {"months", months},
                                                        {"windows", cfg_.window_count()}});
    write_file((paths_.root / "config.json").string(),
               nlohmann::json{{"config_hash", cfg_.hash}, {"config", canonical_json(cfg_)}}.dump(1) + "\n");
    data_.reset();
    log_time("gen-data", {}, {}, "corpus", t0);
  }

  // ---- pretrain ----

  void pretrain(std::optional<int> window = {}) {
    for (int w : windows(window))
      for (auto s : cfg_.run_seeds) pretrain_one(w, s);
  }

  // ---- robustify ----

  /// `target` is a defense name or a variant name; empty means every non-pretrained defense.
  void robustify(std::optional<int> window = {}, const std::string& target = {}) {
    auto defs = robustify_targets(target);
    for (int w : windows(window))
      for (auto s : cfg_.run_seeds)
        for (const auto& d : defs) robustify_one(w, s, d);
  }

  /// Defenses a robustify target refers to. A bare "advda" means continued clean training.
  std::vector<DefenseSpec> robustify_targets(const std::string& target) const {
    std::vector<DefenseSpec> out;
    if (target.empty()) {
      for (const auto& d : cfg_.defenses)
        if (!d.pretrained()) out.push_back(d);
      return out;
    }
    for (const auto& d : cfg_.defenses)
      if (d.name == target) {
        if (d.pretrained()) return {continued_defense()};
        return {d};
      }
    make_transform(target);  // throws for unknown names with the list of valid variants
    if (target == "advda") return {continued_defense()};
    std::string names;
    for (const auto& d : cfg_.defenses)
      if (d.variant == target) out.push_back(d), names += (names.empty() ? "" : ", ") + d.name;
    if (out.empty()) throw ValidationError("robustify: no configured defense uses variant '" + target + "'");
    if (out.size() > 1)
      throw ValidationError("robustify: variant '" + target + "' is ambiguous; pick one of: " + names);
    return out;
  }

  /// Configured defense a name or unique variant refers to.
  const DefenseSpec& resolve_defense(const std::string& target) const {
    for (const auto& d : cfg_.defenses)
      if (d.name == target) return d;
    make_transform(target);
    std::vector<const DefenseSpec*> hits;
    std::string names;
    for (const auto& d : cfg_.defenses)
      if (d.variant == target) hits.push_back(&d), names += (names.empty() ? "" : ", ") + d.name;
    if (hits.empty()) throw ValidationError("no configured defense uses variant '" + target + "'");
    if (hits.size() > 1) throw ValidationError("variant '" + target + "' is ambiguous; pick one of: " + names);
    return *hits.front();
  }

  // ---- evaluate ----

  /// Calibrates every model on source-test benign, scores window-test malware and
  /// fixes the common malware set per run seed and FPR point.
  void evaluate(std::optional<int> window = {}) {
    for (int w : windows(window)) evaluate_one(w);
  }

  // ---- attack ----

  void attack(std::optional<int> window = {}, const std::string& defense = {}, const std::string& attack = {}) {
    std::vector<std::string> defs = defense.empty() ? cfg_.defense_names() : std::vector<std::string>{defense};
    if (!defense.empty()) cfg_.defense(defense);
    const auto all = cfg_.attack_names();
    std::vector<std::string> atks = attack.empty() ? all : std::vector<std::string>{attack};
    if (std::find(all.begin(), all.end(), atks.front()) == all.end()) {
      std::string list;
      for (const auto& a : all) list += (list.empty() ? "" : ", ") + a;
      throw ValidationError("attack: unknown attack '" + attack + "'; configured attacks: " + list);
    }
    for (int w : windows(window)) {
      auto ev = load_eval(w);
      for (auto s : cfg_.run_seeds)
        for (const auto& d : defs)
          for (const auto& a : atks) attack_one(w, s, cfg_.defense(d), a, ev);
    }
  }

  // ---- report ----

  /// Writes report files and returns the report; `incomplete` marks gaps.
  EvalReport report() {
    std::vector<RunRecord> runs;
    std::vector<CostRecord> costs;
    for (int w : cfg_.windows) {
      std::optional<WindowEval> ev;
      if (fs::exists(paths_.eval(w) / "common_sets.json")) ev = load_eval(w);
      for (auto s : cfg_.run_seeds) {
        for (const auto& d : cfg_.defenses) {
          if (fs::exists(paths_.cost(w, s, d.name))) {
            auto j = detail::read_json(paths_.cost(w, s, d.name));
            costs.push_back({d.name, w, s,
                             {j.at("train").get<double>(), j.at("source_attack").get<double>(),
                              j.at("target_attack").get<double>()}});
          }
          if (!ev) continue;
          for (const auto& a : cfg_.attack_names())
            for (std::size_t fi = 0; fi < cfg_.fpr.size(); ++fi) {
              auto p = paths_.attack_file(w, s, d.name, a, cfg_.fpr[fi]);
              if (!fs::exists(p)) continue;
              runs.push_back(run_record(w, s, d.name, a, fi, p, *ev));
            }
        }
      }
    }
    MatrixSpec spec{cfg_.defense_names(), cfg_.attack_names(), cfg_.fpr, cfg_.windows, cfg_.run_seeds};
    auto rep = build_report(spec, runs, costs);
    write_report(rep);
    return rep;
  }

  /// Every stage in order.
  EvalReport run_all() {
    gen_data();
    pretrain();
    robustify();
    evaluate();
    attack();
    return report();
  }

  // ---- data access (also used by tests) ----

  const LoadedCorpus& data() {
    if (!data_) {
      const auto meta_path = paths_.corpus() / "meta.json";
      if (!fs::exists(meta_path))
        throw ValidationError("no corpus under " + paths_.corpus().string() + "; run gen-data first");
      auto meta = detail::read_json(meta_path);
      if (meta.value("corpus_hash", "") != corpus_hash())
        throw ValidationError("corpus under " + paths_.corpus().string() +
                              " was generated from different corpus settings; run gen-data again");
      data_ = load_corpus(paths_.corpus().string());
      index_.emplace(data_->corpus);
    }
    return *data_;
  }
  const SampleIndex& index() {
    data();
    return *index_;
  }

  DomainData domain(const std::vector<std::uint64_t>& ids) {
    const auto& idx = index();
    DomainData d;
    d.X = Tensor::matrix(ids.size(), kFeatureDim);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto& s = idx.at(ids[i]);
      std::copy(s.x.begin(), s.x.end(), d.X.data.begin() + static_cast<long>(i * kFeatureDim));
      d.y.push_back(s.label);
      d.ids.push_back(ids[i]);
      d.labeled.push_back(true);
    }
    return d;
  }
  DomainData source_domain() { return domain(data().partitions.source_train); }
  DomainData target_domain(int w) { return domain(window_part(w).train); }

  const WindowPartition& window_part(int w) {
    const auto& p = data().partitions;
    if (w < 0 || static_cast<std::size_t>(w) >= p.windows.size())
      throw ValidationError("window " + std::to_string(w) + " out of range [0, " + std::to_string(p.windows.size()) + ")");
    return p.windows[static_cast<std::size_t>(w)];
  }

  std::vector<std::uint64_t> with_label(const std::vector<std::uint64_t>& ids, int label) {
    std::vector<std::uint64_t> out;
    for (auto id : ids)
      if (index().at(id).label == label) out.push_back(id);
    return out;
  }

  std::vector<double> scores_of(const ModelBundle& b, const std::vector<std::uint64_t>& ids) {
    if (ids.empty()) return {};
    return score_batch(b, domain(ids).X);
  }

  /// Fraction of ids whose thresholded-at-one-half prediction matches the label.
  double accuracy(const ModelBundle& b, const std::vector<std::uint64_t>& ids) {
    auto sc = scores_of(b, ids);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) ok += (sc[i] > 0.5 ? kMalware : kBenign) == index().at(ids[i]).label;
    return static_cast<double>(ok) / static_cast<double>(ids.size());
  }

  WindowEval load_eval(int w) const {
    const auto dir = paths_.eval(w);
    if (!fs::exists(dir / "common_sets.json"))
      throw ValidationError("no evaluation for window " + std::to_string(w) + "; run evaluate first");
    WindowEval ev;
    const std::string where = dir.string();
    {
      auto t = csv::read((dir / "thresholds.csv").string());
      auto cs = t.column("run_seed"), cd = t.column("defense"), cf = t.column("fpr"), ct = t.column("threshold");
      for (const auto& r : t.rows) {
        auto& v = ev.thresholds[{std::stoull(r.at(cs)), r.at(cd)}];
        v.resize(cfg_.fpr.size());
        v[fpr_index(detail::parse_double(r.at(cf), where))] = detail::parse_double(r.at(ct), where);
      }
    }
    {
      auto t = csv::read((dir / "tpr.csv").string());
      auto cs = t.column("run_seed"), cd = t.column("defense"), cf = t.column("fpr"), ct = t.column("clean_tpr");
      for (const auto& r : t.rows) {
        auto& v = ev.tpr[{std::stoull(r.at(cs)), r.at(cd)}];
        v.resize(cfg_.fpr.size());
        v[fpr_index(detail::parse_double(r.at(cf), where))] = detail::parse_double(r.at(ct), where);
      }
    }
    {
      auto t = csv::read((dir / "scores.csv").string());
      auto cs = t.column("run_seed"), cd = t.column("defense"), ci = t.column("sample_id"), cv = t.column("score");
      for (const auto& r : t.rows)
        ev.scores[{std::stoull(r.at(cs)), r.at(cd)}][detail::parse_hex(r.at(ci), where)] =
            detail::parse_double(r.at(cv), where);
    }
    const auto doc = detail::read_json(dir / "common_sets.json");
    for (const auto& e : doc.at("sets")) {
      CommonSet c;
      c.fpr = e.at("fpr").get<double>();
      for (const auto& id : e.at("ids")) c.ids.push_back(detail::parse_hex(id.get<std::string>(), where));
      c.models = e.at("models").get<std::vector<std::string>>();
      if (hex64(c.fingerprint()) != e.at("fingerprint").get<std::string>())
        throw FormatError(where + ": common set fingerprint mismatch");
      ev.common[{e.at("run_seed").get<std::uint64_t>(), fpr_index(c.fpr)}] = std::move(c);
    }
    return ev;
  }

  /// Loads a cached adversarial set or generates it against the pretrained bundle.
  AdvSet adv_set(int w, std::uint64_t s, AdvSide side) {
    const auto dir = paths_.advsets(w, s);
    const std::string name = detail::side_name(side);
    const auto summary = dir / (name + "_summary.json");
    if (fs::exists(summary)) {
      auto j = detail::read_json(summary);
      if (j.value("config_hash", "") == cfg_.hash) {
        AdvSet out;
        out.table = detail::read_table_csv(dir / (name + "_table.csv"));
        out.queries = j.at("queries").get<std::uint64_t>();
        out.attacked = j.at("attacked").get<std::size_t>();
        return out;
      }
    }
    auto t0 = now();
    auto pre = load_bundle(require_pretrained(w, s, "malguise adversarial sets").string());
    auto thresholds = calibrate(scores_of(pre, calibration_ids()), cfg_.fpr).threshold;
    // bypass means score <= t, the complement of detection
    for (auto& t : thresholds) t = std::nextafter(t, 2.0);
    const auto& ids = side == AdvSide::Target ? window_part(w).train : data().partitions.source_train;
    std::vector<AttackTarget> targets;
    for (auto id : with_label(ids, kMalware)) targets.push_back({id, &index().at(id).binary});
    MctsConfig mc = cfg_.mcts.mcts;
    mc.seed = derive_seed(cfg_.seed, "advset", {static_cast<std::uint64_t>(w), s, static_cast<std::uint64_t>(side)});
    auto oracle = [&pre](const std::vector<double>& x) { return score(pre, x).malware_probability; };
    auto set = generate_adv_trainset(oracle, thresholds, targets, mc, cfg_.workers);

    fs::create_directories(dir);
    write_file((dir / (name + "_table.csv")).string(), detail::table_csv(set.table, stamp(w, s)));
    write_file((dir / (name + "_log.jsonl")).string(), attack_log_jsonl(set.log));
    detail::write_json(summary, {{"config_hash", cfg_.hash},
                                 {"seed", cfg_.seed},
                                 {"run_seed", s},
                                 {"window", w},
                                 {"side", name},
                                 {"attacked", targets.size()},
                                 {"adversarial", set.table.size()},
                                 {"queries", set.queries}});
    log_time("robustify", w, s, "advset_" + name, t0);
    return {std::move(set.table), set.queries, targets.size()};
  }

  std::vector<std::uint64_t> calibration_ids() { return with_label(data().partitions.source_test, kBenign); }

private:
  using Clock = std::chrono::steady_clock;
  static Clock::time_point now() { return Clock::now(); }

  ExperimentConfig cfg_;
  RunPaths paths_;
  std::optional<LoadedCorpus> data_;
  std::optional<SampleIndex> index_;

  std::string corpus_hash() const {
    return hex64(fnv1a(canonical_json(cfg_).at("corpus").dump() + "/" + std::to_string(cfg_.seed)));
  }

  static DefenseSpec continued_defense() { return {"advda_continued", "advda", 0}; }

  std::size_t fpr_index(double f) const {
    for (std::size_t i = 0; i < cfg_.fpr.size(); ++i)
      if (cfg_.fpr[i] == f) return i;
    throw FormatError("FPR point " + csv::exact(f) + " is not in the configuration");
  }

  std::vector<int> windows(std::optional<int> window) const {
    if (!window) return cfg_.windows;
    const int nw = static_cast<int>(cfg_.window_count());
    if (*window < 0 || *window >= nw)
      throw ValidationError("window " + std::to_string(*window) + " out of range [0, " + std::to_string(nw) + ")");
    return {*window};
  }

  void log_time(const std::string& command, std::optional<int> w, std::optional<std::uint64_t> s,
                const std::string& item, Clock::time_point t0) const {
    const double secs = std::chrono::duration<double>(now() - t0).count();
    const auto p = paths_.timing();
    fs::create_directories(p.parent_path());
    const bool fresh = !fs::exists(p);
    std::FILE* f = std::fopen(p.string().c_str(), "a");
    if (!f) throw Error("cannot append to " + p.string());
    if (fresh) std::fprintf(f, "command,window,run_seed,item,seconds\n");
    std::fprintf(f, "%s,%s,%s,%s,%.3f\n", command.c_str(), w ? std::to_string(*w).c_str() : "",
                 s ? std::to_string(*s).c_str() : "", item.c_str(), secs);
    std::fclose(f);
  }

  fs::path require_pretrained(int w, std::uint64_t s, const std::string& who) const {
    auto p = paths_.pretrain_bundle(w, s);
    if (!fs::exists(p))
      throw ValidationError(who + " needs the pretrained checkpoint " + p.string() + "; run pretrain first");
    return p;
  }

  void save_model(const ModelBundle& b, const fs::path& path, int w, std::uint64_t s, const std::string& defense,
                  const std::string& variant) const {
    fs::create_directories(path.parent_path());
    auto bytes = bundle_to_bytes(b);
    write_file(path.string(), bytes);
    auto meta = path;
    meta.replace_extension(".meta.json");
    detail::write_json(meta, {{"config_hash", cfg_.hash},
                              {"seed", cfg_.seed},
                              {"run_seed", s},
                              {"window", w},
                              {"defense", defense},
                              {"variant", variant},
                              {"bundle_fnv1a", hex64(fnv1a(bytes))}});
  }

  void write_cost(int w, std::uint64_t s, const std::string& defense, const PhaseCost& c) const {
    detail::write_json(paths_.cost(w, s, defense), {{"config_hash", cfg_.hash},
                                                    {"seed", cfg_.seed},
                                                    {"run_seed", s},
                                                    {"window", w},
                                                    {"defense", defense},
                                                    {"train", c.train},
                                                    {"source_attack", c.source_attack},
                                                    {"target_attack", c.target_attack}});
  }

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig t = cfg_.train;
    t.seed = seed;
    return t;
  }

  void pretrain_one(int w, std::uint64_t s) {
    auto t0 = now();
    auto S = source_domain();
    auto T = target_domain(w);
    auto res = pretrain_advda(S, T, train_config(derive_seed(cfg_.seed, "pretrain", {static_cast<std::uint64_t>(w), s})),
                              cfg_.dims);
    const auto dir = paths_.pretrain_dir(w, s);
    save_model(res.bundle, paths_.pretrain_bundle(w, s), w, s, "advda", "advda");
    write_file((dir / "curve.csv").string(), curve_csv(res.curve, stamp(w, s)));
    const double acc = accuracy(res.bundle, data().partitions.source_test);
    detail::write_json(dir / "summary.json", {{"config_hash", cfg_.hash},
                                              {"seed", cfg_.seed},
                                              {"run_seed", s},
                                              {"window", w},
                                              {"epochs", res.curve.size()},
                                              {"source_test_accuracy", acc},
                                              {"work_train", res.work.train}});
    for (const auto& d : cfg_.defenses)
      if (d.pretrained()) write_cost(w, s, d.name, {static_cast<double>(res.work.train), 0.0, 0.0});
    log_time("pretrain", w, s, "advda", t0);
  }

  void robustify_one(int w, std::uint64_t s, const DefenseSpec& d) {
    auto pre_path = require_pretrained(w, s, "robustify " + d.name);
    auto t0 = now();
    auto pre = load_bundle(pre_path.string());
    auto S = source_domain();
    auto T = target_domain(w);
    auto tf = make_transform(d.variant, d.epsilon());
    PhaseCost cost;
    if (d.malguise()) {
      auto tgt = adv_set(w, s, AdvSide::Target);
      tf.target_table = std::make_shared<SubstitutionTable>(substitution_table(T, tgt.table));
      cost.target_attack += static_cast<double>(tgt.queries);
      if (d.variant == "malguise_adv") {
        auto src = adv_set(w, s, AdvSide::Source);
        tf.source_table = std::make_shared<SubstitutionTable>(substitution_table(S, src.table));
        cost.source_attack += static_cast<double>(src.queries);
      }
    }
    auto t1 = now();
    auto seed = derive_seed(cfg_.seed, "robustify", {static_cast<std::uint64_t>(w), s, fnv1a(d.name)});
    auto res = robust_finetune(pre, S, T, tf, train_config(seed));
    const auto summary = detail::read_json(paths_.pretrain_dir(w, s) / "summary.json");
    cost.train += summary.at("work_train").get<double>() + static_cast<double>(res.work.train);
    cost.source_attack += static_cast<double>(res.work.source_attack);
    cost.target_attack += static_cast<double>(res.work.target_attack);

    const auto path = paths_.defense_dir(w, s) / (d.name + ".rdmb");
    save_model(res.bundle, path, w, s, d.name, d.variant);
    write_file((paths_.defense_dir(w, s) / (d.name + "_curve.csv")).string(), curve_csv(res.curve, stamp(w, s)));
    write_cost(w, s, d.name, cost);
    log_time("robustify", w, s, d.name + "_train", t1);
    log_time("robustify", w, s, d.name, t0);
  }

  void evaluate_one(int w) {
    auto t0 = now();
    const auto calib = calibration_ids();
    const auto malware = with_label(window_part(w).test, kMalware);
    std::string th_csv = "# " + stamp(w) + "\nrun_seed,defense,fpr,threshold,allowed,n\n";
    std::string sc_csv = "# " + stamp(w) + "\nrun_seed,defense,sample_id,score\n";
    std::string tpr_csv = "# " + stamp(w) + "\nrun_seed,defense,fpr,clean_tpr\n";
    nlohmann::json sets = nlohmann::json::array();
    for (auto s : cfg_.run_seeds) {
      std::vector<std::map<std::uint64_t, double>> score_maps(cfg_.defenses.size());
      std::vector<ThresholdRow> rows(cfg_.defenses.size());
      for (std::size_t di = 0; di < cfg_.defenses.size(); ++di) {
        const auto& d = cfg_.defenses[di];
        auto p = paths_.bundle(w, s, d);
        if (!fs::exists(p))
          throw ValidationError("evaluate: missing checkpoint " + p.string() + "; run " +
                                (d.pretrained() ? "pretrain" : "robustify") + " first");
        auto b = load_bundle(p.string());
        rows[di] = calibrate(scores_of(b, calib), cfg_.fpr);
        auto sc = scores_of(b, malware);
        for (std::size_t i = 0; i < malware.size(); ++i) score_maps[di][malware[i]] = sc[i];
        for (std::size_t i = 0; i < malware.size(); ++i)
          sc_csv += csv::join({std::to_string(s), d.name, hex64(malware[i]), csv::exact(sc[i])}) + "\n";
        for (std::size_t fi = 0; fi < cfg_.fpr.size(); ++fi) {
          th_csv += csv::join({std::to_string(s), d.name, csv::exact(cfg_.fpr[fi]), csv::exact(rows[di].threshold[fi]),
                               std::to_string(rows[di].allowed[fi]), std::to_string(rows[di].n)}) +
                    "\n";
          tpr_csv += csv::join({std::to_string(s), d.name, csv::exact(cfg_.fpr[fi]),
                                csv::exact(clean_tpr(sc, rows[di].threshold[fi]))}) +
                     "\n";
        }
      }
      for (std::size_t fi = 0; fi < cfg_.fpr.size(); ++fi) {
        std::vector<DetectorView> views;
        for (std::size_t di = 0; di < cfg_.defenses.size(); ++di)
          views.push_back({cfg_.defenses[di].name, rows[di].threshold[fi], &score_maps[di]});
        auto c = common_malware_set(views, malware, cfg_.fpr[fi]);
        nlohmann::json ids = nlohmann::json::array();
        for (auto id : c.ids) ids.push_back(hex64(id));
        sets.push_back({{"run_seed", s},
                        {"fpr", cfg_.fpr[fi]},
                        {"size", c.ids.size()},
                        {"fingerprint", hex64(c.fingerprint())},
                        {"models", c.models},
                        {"ids", ids}});
      }
    }
    const auto dir = paths_.eval(w);
    fs::create_directories(dir);
    write_file((dir / "thresholds.csv").string(), th_csv);
    write_file((dir / "scores.csv").string(), sc_csv);
    write_file((dir / "tpr.csv").string(), tpr_csv);
    detail::write_json(dir / "common_sets.json", {{"config_hash", cfg_.hash},
                                                  {"seed", cfg_.seed},
                                                  {"window", w},
                                                  {"test_malware", malware.size()},
                                                  {"sets", sets}});
    log_time("evaluate", w, {}, "all", t0);
  }

  void attack_one(int w, std::uint64_t s, const DefenseSpec& d, const std::string& attack, const WindowEval& ev) {
    auto t0 = now();
    auto p = paths_.bundle(w, s, d);
    if (!fs::exists(p)) throw ValidationError("attack: missing checkpoint " + p.string());
    auto b = load_bundle(p.string());
    const auto& th = ev.thresholds.at({s, d.name});
    const auto& clean = ev.scores.at({s, d.name});
    const std::uint64_t seed =
        derive_seed(cfg_.seed, "attack", {static_cast<std::uint64_t>(w), s, fnv1a(d.name), fnv1a(attack)});
    const auto dir = paths_.attack_dir(w, s, d.name, attack);
    fs::create_directories(dir);
    const std::size_t nf = cfg_.fpr.size();
    auto common = [&](std::size_t fi) -> const CommonSet& { return ev.common.at({s, fi}); };
    auto comment = [&](std::size_t fi) {
      return stamp(w, s) + " defense=" + d.name + " attack=" + attack + " fpr=" + fpr_label(cfg_.fpr[fi]) +
             " threshold=" + csv::exact(th[fi]) + " common_fingerprint=" + hex64(common(fi).fingerprint());
    };

    const PgdAttackSpec* pgd_spec = nullptr;
    for (const auto& ps : cfg_.pgd)
      if (ps.name == attack) pgd_spec = &ps;

    if (pgd_spec) {
      // one perturbation per sample serves every threshold
      std::set<std::uint64_t> uni;
      for (std::size_t fi = 0; fi < nf; ++fi) uni.insert(common(fi).ids.begin(), common(fi).ids.end());
      std::vector<std::uint64_t> ids(uni.begin(), uni.end());
      std::map<std::uint64_t, std::pair<double, double>> adv;  // adversarial score, linf
      if (!ids.empty()) {
        auto X = domain(ids).X;
        auto Xa = pgd(b, X, LossSpec::classification(std::vector<int>(ids.size(), kMalware)),
                      PgdConfig{pgd_spec->epsilon(), pgd_spec->steps, pgd_spec->step_size(), true, seed});
        auto sa = score_batch(b, Xa);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          std::vector<double> a(Xa.data.begin() + static_cast<long>(i * kFeatureDim),
                                Xa.data.begin() + static_cast<long>((i + 1) * kFeatureDim));
          adv[ids[i]] = {sa[i], linf_distance(a, index().at(ids[i]).x)};
        }
      }
      for (std::size_t fi = 0; fi < nf; ++fi) {
        std::vector<AttackRecord> rows;
        for (auto id : common(fi).ids) {
          auto [sa, linf] = adv.at(id);
          rows.push_back({id, clean.at(id), sa, linf, !detected(sa, th[fi])});
        }
        write_file(paths_.attack_file(w, s, d.name, attack, cfg_.fpr[fi]).string(), attack_records_csv(rows, comment(fi)));
      }
    } else if (attack == cfg_.mcts.name) {
      std::vector<std::pair<std::size_t, std::uint64_t>> tasks;
      for (std::size_t fi = 0; fi < nf; ++fi)
        for (auto id : common(fi).ids) tasks.emplace_back(fi, id);
      std::vector<AttackOutcome> out(tasks.size());
      auto oracle = [&b](const std::vector<double>& x) { return score(b, x).malware_probability; };
      parallel_for(tasks.size(), cfg_.workers, [&](std::size_t i) {
        auto [fi, id] = tasks[i];
        MctsConfig mc = cfg_.mcts.mcts;
        mc.seed = derive_seed(seed, "sample", {id, static_cast<std::uint64_t>(fi)});
        out[i] = mcts_attack(index().at(id).binary, oracle, std::nextafter(th[fi], 2.0), mc);
      });
      std::vector<std::vector<AttackRecord>> rows(nf);
      std::vector<AttackLogRow> log;
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        auto [fi, id] = tasks[i];
        const auto& o = out[i];
        const double linf = linf_distance(features(o.final_binary), index().at(id).x);
        rows[fi].push_back({id, clean.at(id), o.final_score, linf, !detected(o.final_score, th[fi])});
        log.push_back(log_row(id, fi, th[fi], o));
      }
      for (std::size_t fi = 0; fi < nf; ++fi)
        write_file(paths_.attack_file(w, s, d.name, attack, cfg_.fpr[fi]).string(),
                   attack_records_csv(rows[fi], comment(fi)));
      write_file((dir / "log.jsonl").string(), attack_log_jsonl(log));
    } else {
      std::string list;
      for (const auto& a : cfg_.attack_names()) list += (list.empty() ? "" : ", ") + a;
      throw ValidationError("attack: unknown attack '" + attack + "'; configured attacks: " + list);
    }
    log_time("attack", w, s, d.name + "/" + attack, t0);
  }

  RunRecord run_record(int w, std::uint64_t s, const std::string& defense, const std::string& attack, std::size_t fi,
                       const fs::path& p, const WindowEval& ev) const {
    auto rows = read_attack_records(p.string());
    const auto& c = ev.common.at({s, fi});
    std::vector<std::uint64_t> ids;
    std::map<std::uint64_t, double> adv;
    for (const auto& r : rows) ids.push_back(r.sample_id), adv[r.sample_id] = r.adv_score;
    if (id_fingerprint(ids) != c.fingerprint() || ids.size() != c.ids.size())
      throw FormatError(p.string() + ": rows do not match the common malware set; re-run attack");
    const double t = ev.thresholds.at({s, defense})[fi];
    RunRecord r;
    r.defense = defense;
    r.attack = attack;
    r.fpr = cfg_.fpr[fi];
    r.window = w;
    r.seed = s;
    r.asr = asr(adv, c, t);
    r.clean_tpr = ev.tpr.at({s, defense})[fi];
    r.common_size = c.ids.size();
    r.common_fingerprint = c.fingerprint();
    return r;
  }

  void write_report(const EvalReport& rep) const {
    const auto dir = paths_.report();
    fs::create_directories(dir);
    std::vector<std::string> comments{stamp(),
                                      "asr and tpr: mean and population std across windows of per-window seed means",
                                      "cost unit: one row through a forward/backward pass; one MCTS query counts as one row"};
    write_file((dir / "matrix.csv").string(), report_csv(rep, comments));
    write_file((dir / "costs.csv").string(), cost_csv(rep, comments));

    std::string md;
    for (const auto& c : comments) md += "<!-- " + c + " -->\n";
    md += "# Robustness report\n\n";
    const auto defs = cfg_.defense_names();
    for (const auto& a : cfg_.attack_names()) md += markdown_matrix(rep, "ASR under " + a, defs, {a}, cfg_.fpr, false);
    // clean TPR does not depend on the attack; show it once
    md += "## Clean TPR\n\n";
    std::vector<std::string> head{"defense"}, rule{"---"};
    for (double f : cfg_.fpr) head.push_back("clean @ " + csv::fmt(100.0 * f, 1) + "%"), rule.push_back("---:");
    md += markdown_row(head) + markdown_row(rule);
    for (const auto& d : defs) {
      std::vector<std::string> row{d};
      for (double f : cfg_.fpr) row.push_back(percent_cell(rep.cell(d, cfg_.attack_names().front(), f), true));
      md += markdown_row(row);
    }
    md += "\n" + markdown_costs(rep);
    if (!rep.gaps.empty()) {
      md += "## Gaps\n\n";
      for (const auto& g : rep.gaps) md += "- " + g + "\n";
      md += "\n";
    }
    write_file((dir / "report.md").string(), md);
  }
};

}  // namespace robustda
