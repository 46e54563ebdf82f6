#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustda/bytes.hpp"
#include "robustda/rng.hpp"
#include "robustda/synbin.hpp"
#include "robustda/synbin_gen.hpp"

namespace robustda {

struct MonthSpec {
  std::string id;
  int malware = 0;         // malware samples in the month
  int families = 0;        // distinct families in the month
  double malware_ratio = 0.3;  // malware:benign ratio used for the month's labeled budget
};

struct CorpusConfig {
  std::vector<MonthSpec> months;
  std::size_t source_months = 3;
  std::size_t gap_month = 3;  // generated, then excluded
  double unseen_lo = 0.27;
  double unseen_hi = 0.50;
  double drift = 0.15;        // per-month log-scale perturbation of surviving families
  double prior_drift = 0.08;  // per-month shift of the new-family prior
  double family_spread = 0.35;
  double sample_jitter = 0.10;
  int benign_total = 2000;
  int benign_templates = 16;
  int label_budget = 500;
  // Call-redirection trampolines baked into generated programs, per class.
  struct Trampolines {
    double prob = 0.0;
    int lo = 0, hi = 0;
  };
  Trampolines benign_trampolines;
  Trampolines malware_trampolines;
  // Share of new families whose template is pulled toward the benign prior, and how far.
  double stealth_prob = 0.0;
  double stealth_lo = 0.0, stealth_hi = 0.0;
  ProgramStyle malware_prior;
  ProgramStyle benign_prior;
  std::uint64_t seed = 0;

  void validate() const {
    if (months.size() < source_months + 1 + 2) throw ValidationError("corpus: too few months");
    if (source_months < 1 || gap_month >= months.size() || gap_month < source_months)
      throw ValidationError("corpus: gap month must follow the source months");
    if (!(unseen_lo >= 0 && unseen_hi <= 1 && unseen_lo <= unseen_hi))
      throw ValidationError("corpus: unseen fraction range must lie in [0,1]");
    if (drift < 0 || prior_drift < 0 || family_spread < 0 || sample_jitter < 0)
      throw ValidationError("corpus: drift scales must be non-negative");
    for (const auto& m : months) {
      if (m.id.empty()) throw ValidationError("corpus: empty month id");
      if (m.malware <= 0 || m.families <= 0) throw ValidationError("corpus: month " + m.id + " needs positive counts");
      if (m.families > m.malware) throw ValidationError("corpus: month " + m.id + " has more families than samples");
      if (m.malware_ratio <= 0) throw ValidationError("corpus: month " + m.id + " needs a positive malware ratio");
    }
    if (benign_total < 8 || benign_templates < 1) throw ValidationError("corpus: benign pool too small");
    if (label_budget < 2) throw ValidationError("corpus: label budget must be at least 2");
    for (const auto* t : {&benign_trampolines, &malware_trampolines})
      if (!(t->prob >= 0 && t->prob <= 1) || t->lo < 0 || t->lo > t->hi)
        throw ValidationError("corpus: trampoline probability must lie in [0,1] with 0 <= lo <= hi");
    if (!(stealth_prob >= 0 && stealth_prob <= 1) || !(stealth_lo >= 0 && stealth_lo <= stealth_hi && stealth_hi <= 1))
      throw ValidationError("corpus: stealth probability and mix range must lie in [0,1]");
  }

  std::vector<std::size_t> target_months() const {
    std::vector<std::size_t> t;
    for (std::size_t m = gap_month + 1; m < months.size(); ++m) t.push_back(m);
    return t;
  }
};

struct Sample {
  std::uint64_t id = 0;
  std::string month;  // empty for benign
  int family = -1;
  int label = kBenignLabel;
  SyntheticBinary binary;
  std::vector<double> x;  // features(binary)

  static constexpr int kBenignLabel = 0;
  static constexpr int kMalwareLabel = 1;
};

struct FamilyRecord {
  int id = 0;
  std::string born;
  ProgramStyle style;
};

/// Draws behind one month, kept so the emitted manifests can be audited.
struct MonthDraw {
  int families = 0;
  int new_families = 0;
  double unseen_draw = 0;
};

struct MonthData {
  MonthSpec spec;
  bool gap = false;
  MonthDraw draw;
  std::vector<Sample> malware;
};

struct DriftCorpus {
  std::vector<MonthData> months;
  std::vector<Sample> benign;
  std::vector<FamilyRecord> families;
  std::vector<ProgramStyle> benign_styles;

  const MonthData& month(const std::string& id) const {
    for (const auto& m : months)
      if (m.spec.id == id) return m;
    throw ValidationError("corpus: unknown month " + id);
  }
};

/// Month layout and template priors used when no corpus section overrides them.
inline CorpusConfig default_corpus_config() {
  CorpusConfig c;
  c.months = {{"mar", 200, 18, 0.5}, {"apr", 144, 14, 0.5}, {"may", 200, 17, 0.5}, {"jun", 190, 17, 0.3},
              {"jul", 216, 21, 0.3}, {"aug", 215, 19, 0.3}, {"sep", 178, 15, 0.3}, {"oct", 193, 16, 0.3},
              {"nov", 161, 18, 0.3}, {"dec", 174, 18, 0.3}};
  c.benign_total = 7800;
  // Most benign programs carry a few hot-patch trampolines; malware rarely does.
  c.benign_trampolines = {0.6, 1, 4};
  c.malware_trampolines = {0.02, 1, 4};
  // Some new families imitate benign code and sit close to the decision boundary.
  c.stealth_prob = 0.3;
  c.stealth_lo = 0.2;
  c.stealth_hi = 0.5;

  ProgramStyle& b = c.benign_prior;
  b.w_call = 0.8, b.w_out_lo = 1.0, b.w_out_hi = 0.05, b.w_out_reg = 0.6, b.w_push = 0.4;
  b.w_mov_same = 0.6, b.w_mov_diff = 0.5, b.w_nop = 0.9, b.high_reg = 0.5;
  b.mid_lo = 3, b.mid_hi = 6, b.leaf_lo = 5, b.leaf_hi = 10, b.blocks_lo = 3, b.blocks_hi = 6;
  b.block_len_lo = 5, b.block_len_hi = 14, b.skip_prob = 0.6, b.pad_prob = 0.6, b.pad_lo = 2, b.pad_hi = 12;

  ProgramStyle& m = c.malware_prior;
  m.w_call = 1.3, m.w_out_lo = 1.0, m.w_out_hi = 0.35, m.w_out_reg = 0.4, m.w_push = 0.8;
  m.w_mov_same = 0.2, m.w_mov_diff = 0.6, m.w_nop = 0.3, m.high_reg = 0.35;
  m.mid_lo = 2, m.mid_hi = 4, m.leaf_lo = 3, m.leaf_hi = 7, m.blocks_lo = 2, m.blocks_hi = 5;
  m.block_len_lo = 4, m.block_len_hi = 12, m.skip_prob = 0.2, m.pad_prob = 0.2;
  return c;
}

// ---- style perturbation ----

namespace detail {

inline constexpr double ProgramStyle::*kStyleWeights[] = {
    &ProgramStyle::w_call,   &ProgramStyle::w_out_lo,   &ProgramStyle::w_out_hi,   &ProgramStyle::w_out_reg,
    &ProgramStyle::w_push,   &ProgramStyle::w_mov_same, &ProgramStyle::w_mov_diff, &ProgramStyle::w_nop,
    &ProgramStyle::main_scale};
inline constexpr double ProgramStyle::*kStyleProbs[] = {&ProgramStyle::high_reg, &ProgramStyle::skip_prob,
                                                      &ProgramStyle::pad_prob, &ProgramStyle::main_last};
inline constexpr std::pair<int ProgramStyle::*, int ProgramStyle::*> kStyleRanges[] = {
    {&ProgramStyle::mid_lo, &ProgramStyle::mid_hi},
    {&ProgramStyle::leaf_lo, &ProgramStyle::leaf_hi},
    {&ProgramStyle::blocks_lo, &ProgramStyle::blocks_hi},
    {&ProgramStyle::block_len_lo, &ProgramStyle::block_len_hi},
    {&ProgramStyle::pad_lo, &ProgramStyle::pad_hi}};
inline constexpr std::size_t kStyleDims = std::size(kStyleWeights) + std::size(kStyleProbs) + std::size(kStyleRanges);

inline double logit(double p) {
  p = std::clamp(p, 1e-4, 1 - 1e-4);
  return std::log(p / (1 - p));
}
inline double sigmoid(double z) { return 1 / (1 + std::exp(-z)); }

}  // namespace detail

/// Moves every style coordinate by scale * z[k] on a log (weights, ranges) or logit (probabilities) scale.
inline ProgramStyle shift_style(const ProgramStyle& s, const std::vector<double>& z, double scale) {
  if (z.size() != detail::kStyleDims) throw ShapeError("shift_style: direction has wrong size");
  ProgramStyle out = s;
  std::size_t k = 0;
  for (auto w : detail::kStyleWeights) out.*w = s.*w * std::exp(scale * z[k++]);
  for (auto p : detail::kStyleProbs) out.*p = detail::sigmoid(detail::logit(s.*p) + scale * z[k++]);
  for (auto [lo, hi] : detail::kStyleRanges) {
    double f = std::exp(scale * z[k++]);
    int min_lo = (lo == &ProgramStyle::mid_lo || lo == &ProgramStyle::leaf_lo || lo == &ProgramStyle::pad_lo) ? 0 : 1;
    out.*lo = std::max(min_lo, static_cast<int>(std::lround(s.*lo * f)));
    out.*hi = std::max(out.*lo, static_cast<int>(std::lround(s.*hi * f)));
  }
  return out;
}

inline std::vector<double> normal_vector(Rng& rng, std::size_t n) {
  std::vector<double> z(n);
  for (double& v : z) v = rng.normal();
  return z;
}

inline ProgramStyle perturb_style(const ProgramStyle& s, double scale, Rng& rng) {
  return shift_style(s, normal_vector(rng, detail::kStyleDims), scale);
}

/// Moves `s` toward `toward` by 1-mix: weights geometrically, probabilities and ranges linearly.
inline ProgramStyle blend_style(const ProgramStyle& toward, const ProgramStyle& s, double mix) {
  ProgramStyle out = s;
  for (auto w : detail::kStyleWeights) out.*w = toward.*w * std::pow(s.*w / toward.*w, mix);
  for (auto p : detail::kStyleProbs) out.*p = toward.*p + mix * (s.*p - toward.*p);
  for (auto [lo, hi] : detail::kStyleRanges) {
    out.*lo = static_cast<int>(std::lround(toward.*lo + mix * (s.*lo - toward.*lo)));
    out.*hi = std::max(out.*lo, static_cast<int>(std::lround(toward.*hi + mix * (s.*hi - toward.*hi))));
  }
  return out;
}

// ---- generation ----

/// Generates one sample from a template, retrying until its id is new.
inline Sample draw_sample(const ProgramStyle& style, double jitter, std::uint64_t seed, int label, int family,
                          const std::string& month, std::set<std::uint64_t>& seen,
                          const CorpusConfig::Trampolines& tramp = {}) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, "sample", {attempt}));
    Sample s;
    s.binary = generate_program(perturb_style(style, jitter, rng), rng);
    if (tramp.prob > 0 && rng.bernoulli(tramp.prob)) {
      const auto k = rng.range(tramp.lo, tramp.hi);
      for (std::int64_t j = 0; j < k; ++j) {
        auto sites = extract_call_sites(s.binary);
        if (sites.empty()) break;
        auto site = sites[rng.below(sites.size())];
        s.binary = apply_patch(s.binary, site, rng.next_u64());
      }
    }
    try {
      validate(s.binary);
    } catch (const ValidationError&) {
      if (attempt > 1000) throw Error("corpus: could not draw a terminating sample");
      continue;  // heavy call fan-out can exhaust the step budget
    }
    s.id = s.binary.id_hash();
    if (!seen.insert(s.id).second) {
      if (attempt > 1000) throw Error("corpus: could not draw a unique sample");
      continue;
    }
    s.label = label;
    s.family = family;
    s.month = month;
    s.x = features(s.binary);
    return s;
  }
}

inline DriftCorpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  DriftCorpus corpus;
  std::set<std::uint64_t> seen;
  Rng meta(derive_seed(cfg.seed, "corpus.meta"));
  const auto direction = normal_vector(meta, detail::kStyleDims);

  for (int b = 0; b < cfg.benign_templates; ++b) {
    Rng r(derive_seed(cfg.seed, "benign.template", {static_cast<std::uint64_t>(b)}));
    corpus.benign_styles.push_back(perturb_style(cfg.benign_prior, cfg.family_spread, r));
  }
  for (int i = 0; i < cfg.benign_total; ++i) {
    auto seed = derive_seed(cfg.seed, "benign", {static_cast<std::uint64_t>(i)});
    Rng r(seed);
    const auto& style = corpus.benign_styles[r.below(corpus.benign_styles.size())];
    corpus.benign.push_back(
        draw_sample(style, cfg.sample_jitter, seed, Sample::kBenignLabel, -1, "", seen, cfg.benign_trampolines));
  }

  std::vector<int> alive;                 // family ids present last month
  std::map<int, double> popularity;
  for (std::size_t m = 0; m < cfg.months.size(); ++m) {
    const auto& spec = cfg.months[m];
    Rng r(derive_seed(cfg.seed, "month", {m}));
    MonthData md;
    md.spec = spec;
    md.gap = m == cfg.gap_month;

    int n_new = spec.families;
    if (m > 0) {
      md.draw.unseen_draw = r.uniform(cfg.unseen_lo, cfg.unseen_hi);
      n_new = static_cast<int>(std::lround(md.draw.unseen_draw * spec.families));
      if (spec.families - n_new > static_cast<int>(alive.size()))
        throw ValidationError("corpus: month " + spec.id + " needs " + std::to_string(spec.families - n_new) +
                              " surviving families but only " + std::to_string(alive.size()) + " exist");
    } else {
      md.draw.unseen_draw = 1.0;
    }
    md.draw.families = spec.families;
    md.draw.new_families = n_new;

    // Survivors drift; newcomers come from a prior that itself drifts with time.
    std::vector<int> present = alive;
    r.shuffle(present.begin(), present.end());
    present.resize(static_cast<std::size_t>(spec.families - n_new));
    std::sort(present.begin(), present.end());
    for (int f : present) corpus.families[static_cast<std::size_t>(f)].style =
        perturb_style(corpus.families[static_cast<std::size_t>(f)].style, cfg.drift, r);
    const ProgramStyle prior = shift_style(cfg.malware_prior, direction, cfg.prior_drift * static_cast<double>(m));
    for (int k = 0; k < n_new; ++k) {
      int id = static_cast<int>(corpus.families.size());
      auto style = perturb_style(prior, cfg.family_spread, r);
      if (cfg.stealth_prob > 0 && r.bernoulli(cfg.stealth_prob))
        style = blend_style(cfg.benign_prior, style, r.uniform(cfg.stealth_lo, cfg.stealth_hi));
      corpus.families.push_back({id, spec.id, style});
      popularity[id] = std::exp(r.normal(0.0, 0.8));
      present.push_back(id);
    }

    // Every present family gets one sample; the rest follow family popularity.
    std::vector<int> owner(present.begin(), present.end());
    std::vector<double> w;
    for (int f : present) w.push_back(popularity[f]);
    while (static_cast<int>(owner.size()) < spec.malware) owner.push_back(present[r.categorical(w)]);
    for (std::size_t i = 0; i < owner.size(); ++i) {
      auto seed = derive_seed(cfg.seed, "malware", {m, i});
      md.malware.push_back(draw_sample(corpus.families[static_cast<std::size_t>(owner[i])].style, cfg.sample_jitter,
                                       seed, Sample::kMalwareLabel, owner[i], spec.id, seen,
                                       cfg.malware_trampolines));
    }
    alive = present;
    corpus.months.push_back(std::move(md));
  }
  return corpus;
}

// ---- partitioning ----

struct WindowPartition {
  std::string train_month;
  std::string test_month;
  std::vector<std::uint64_t> train;  // labeled target budget
  std::vector<std::uint64_t> test;   // full next month plus target-test benign
};

struct PartitionSet {
  std::vector<std::uint64_t> source_train;
  std::vector<std::uint64_t> source_test;
  std::vector<std::uint64_t> target_train_pool;  // benign reserved for window training
  std::vector<std::uint64_t> target_test_benign;  // benign reserved for window testing
  std::vector<WindowPartition> windows;
  std::vector<std::uint64_t> unused;  // emitted samples no partition drew
};

/// Benign count that puts `malware` samples at the given malware:benign ratio.
inline std::size_t benign_for_ratio(std::size_t malware, double ratio) {
  return static_cast<std::size_t>(std::lround(static_cast<double>(malware) / ratio));
}

inline PartitionSet partition(const DriftCorpus& corpus, const CorpusConfig& cfg) {
  cfg.validate();
  if (corpus.months.size() != cfg.months.size()) throw ValidationError("partition: corpus does not match config");
  const auto targets = cfg.target_months();
  if (cfg.source_months < 3 || targets.size() < 6)
    throw ValidationError("partition: need at least 3 source months and 6 target months");
  Rng rng(derive_seed(cfg.seed, "partition"));
  PartitionSet p;
  std::set<std::uint64_t> used;

  auto split = [&](std::vector<std::uint64_t> ids, double train_frac, std::vector<std::uint64_t>& a,
                   std::vector<std::uint64_t>& b) {
    rng.shuffle(ids.begin(), ids.end());
    auto n = static_cast<std::size_t>(std::lround(train_frac * static_cast<double>(ids.size())));
    a.insert(a.end(), ids.begin(), ids.begin() + static_cast<long>(n));
    b.insert(b.end(), ids.begin() + static_cast<long>(n), ids.end());
  };

  // Benign: half to source, a quarter each to target train and target test.
  std::vector<std::uint64_t> benign;
  for (const auto& s : corpus.benign) benign.push_back(s.id);
  rng.shuffle(benign.begin(), benign.end());
  const std::size_t half = benign.size() / 2, quarter = (benign.size() - half) / 2;
  p.target_train_pool.assign(benign.begin() + static_cast<long>(half),
                             benign.begin() + static_cast<long>(half + quarter));
  p.target_test_benign.assign(benign.begin() + static_cast<long>(half + quarter), benign.end());

  // Source months and their share of benign, each split 75/25.
  std::size_t source_benign = 0;
  for (std::size_t m = 0; m < cfg.source_months; ++m) {
    std::vector<std::uint64_t> ids;
    for (const auto& s : corpus.months[m].malware) ids.push_back(s.id);
    split(ids, 0.75, p.source_train, p.source_test);
    source_benign += benign_for_ratio(ids.size(), corpus.months[m].spec.malware_ratio);
  }
  if (source_benign > half)
    throw ValidationError("partition: source needs " + std::to_string(source_benign) + " benign but the pool has " +
                          std::to_string(half));
  split(std::vector<std::uint64_t>(benign.begin(), benign.begin() + static_cast<long>(source_benign)), 0.75,
        p.source_train, p.source_test);
  used.insert(benign.begin(), benign.begin() + static_cast<long>(source_benign));

  // Windows draw training benign from disjoint slices of the target-train pool; test
  // benign is drawn per window from the target-test pool.
  const std::size_t n_windows = targets.size() - 1;
  const std::size_t slice = p.target_train_pool.size() / n_windows;
  for (std::size_t w = 0; w < n_windows; ++w) {
    const auto& train_month = corpus.months[targets[w]];
    const auto& test_month = corpus.months[targets[w + 1]];
    WindowPartition wp{train_month.spec.id, test_month.spec.id, {}, {}};
    const double r = train_month.spec.malware_ratio;
    auto n_mal = static_cast<std::size_t>(std::lround(cfg.label_budget * r / (1 + r)));
    auto n_ben = static_cast<std::size_t>(cfg.label_budget) - n_mal;
    if (n_mal > train_month.malware.size() || n_ben > slice)
      throw ValidationError("partition: label budget " + std::to_string(cfg.label_budget) + " exceeds month " +
                            train_month.spec.id + " (" + std::to_string(train_month.malware.size()) +
                            " malware, " + std::to_string(slice) + " benign per window)");
    std::vector<std::uint64_t> mal;
    for (const auto& s : train_month.malware) mal.push_back(s.id);
    rng.shuffle(mal.begin(), mal.end());
    wp.train.assign(mal.begin(), mal.begin() + static_cast<long>(n_mal));
    auto first = p.target_train_pool.begin() + static_cast<long>(w * slice);
    std::vector<std::uint64_t> ben(first, first + static_cast<long>(slice));
    rng.shuffle(ben.begin(), ben.end());
    wp.train.insert(wp.train.end(), ben.begin(), ben.begin() + static_cast<long>(n_ben));

    const std::size_t test_ben = benign_for_ratio(test_month.malware.size(), test_month.spec.malware_ratio);
    if (test_ben > p.target_test_benign.size())
      throw ValidationError("partition: month " + test_month.spec.id + " needs " + std::to_string(test_ben) +
                            " test benign but the pool has " + std::to_string(p.target_test_benign.size()));
    for (const auto& s : test_month.malware) wp.test.push_back(s.id);
    std::vector<std::uint64_t> tb = p.target_test_benign;
    rng.shuffle(tb.begin(), tb.end());
    wp.test.insert(wp.test.end(), tb.begin(), tb.begin() + static_cast<long>(test_ben));
    used.insert(wp.train.begin(), wp.train.end());
    used.insert(wp.test.begin(), wp.test.end());
    p.windows.push_back(std::move(wp));
  }

  for (std::size_t m = 0; m < cfg.source_months; ++m)
    for (const auto& s : corpus.months[m].malware) used.insert(s.id);
  for (std::size_t m = 0; m < corpus.months.size(); ++m) {
    if (corpus.months[m].gap) continue;
    for (const auto& s : corpus.months[m].malware)
      if (!used.count(s.id)) p.unused.push_back(s.id);
  }
  for (auto id : benign)
    if (!used.count(id)) p.unused.push_back(id);
  return p;
}

// ---- lookup ----

/// Id -> sample over every non-gap month and the benign pool.
class SampleIndex {
public:
  explicit SampleIndex(const DriftCorpus& c) {
    for (const auto& m : c.months)
      for (const auto& s : m.malware) by_id_[s.id] = &s;
    for (const auto& s : c.benign) by_id_[s.id] = &s;
  }
  const Sample& at(std::uint64_t id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw ValidationError("corpus: unknown sample id " + hex64(id));
    return *it->second;
  }
  bool contains(std::uint64_t id) const { return by_id_.count(id) != 0; }

private:
  std::map<std::uint64_t, const Sample*> by_id_;
};

// ---- on-disk layout ----
// months/<id>/binaries.pack, months/<id>/manifest.csv, benign/binaries.pack,
// benign/manifest.csv, families.json, partitions.json, checksums.csv

inline nlohmann::json style_to_json(const ProgramStyle& s) {
  return {{"w_call", s.w_call},         {"w_out_lo", s.w_out_lo},       {"w_out_hi", s.w_out_hi},
          {"w_out_reg", s.w_out_reg},   {"w_push", s.w_push},           {"w_mov_same", s.w_mov_same},
          {"w_mov_diff", s.w_mov_diff}, {"w_nop", s.w_nop},             {"high_reg", s.high_reg},
          {"mid", {s.mid_lo, s.mid_hi}}, {"leaf", {s.leaf_lo, s.leaf_hi}}, {"blocks", {s.blocks_lo, s.blocks_hi}},
          {"block_len", {s.block_len_lo, s.block_len_hi}}, {"main_scale", s.main_scale},
          {"skip_prob", s.skip_prob},   {"pad_prob", s.pad_prob},       {"pad", {s.pad_lo, s.pad_hi}},
          {"main_last", s.main_last},   {"base", s.base}};
}

/// Reads a style; absent keys keep the values of `base`.
inline ProgramStyle style_from_json(const nlohmann::json& j, ProgramStyle s = {}) {
  auto num = [&](const char* k, double& v) {
    if (j.contains(k)) v = j.at(k).get<double>();
  };
  auto range = [&](const char* k, int& lo, int& hi) {
    if (!j.contains(k)) return;
    const auto& a = j.at(k);
    if (!a.is_array() || a.size() != 2) throw ValidationError(std::string("style: '") + k + "' must be [lo, hi]");
    lo = a[0].get<int>();
    hi = a[1].get<int>();
  };
  num("w_call", s.w_call);
  num("w_out_lo", s.w_out_lo);
  num("w_out_hi", s.w_out_hi);
  num("w_out_reg", s.w_out_reg);
  num("w_push", s.w_push);
  num("w_mov_same", s.w_mov_same);
  num("w_mov_diff", s.w_mov_diff);
  num("w_nop", s.w_nop);
  num("high_reg", s.high_reg);
  num("main_scale", s.main_scale);
  num("skip_prob", s.skip_prob);
  num("pad_prob", s.pad_prob);
  num("main_last", s.main_last);
  range("mid", s.mid_lo, s.mid_hi);
  range("leaf", s.leaf_lo, s.leaf_hi);
  range("blocks", s.blocks_lo, s.blocks_hi);
  range("block_len", s.block_len_lo, s.block_len_hi);
  range("pad", s.pad_lo, s.pad_hi);
  if (j.contains("base")) s.base = j.at("base").get<std::uint64_t>();
  return s;
}

namespace detail {

inline std::vector<std::uint8_t> pack(const std::vector<Sample>& samples) {
  ByteWriter w;
  w.bytes("RDPK", 4);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    auto b = binary_to_bytes(s.binary);
    w.u32(static_cast<std::uint32_t>(b.size()));
    w.bytes(b.data(), b.size());
  }
  w.seal();
  return w.take();
}

inline std::vector<SyntheticBinary> unpack(const std::vector<std::uint8_t>& buf) {
  ByteReader r(buf, "binaries.pack");
  r.verify_seal();
  r.expect_magic("RDPK");
  std::vector<SyntheticBinary> out;
  for (auto n = r.u32(); n > 0; --n) {
    std::vector<std::uint8_t> b(r.u32());
    for (auto& c : b) c = r.u8();
    out.push_back(binary_from_bytes(b));
  }
  return out;
}

inline std::vector<ManifestRow> manifest_of(const std::vector<Sample>& samples) {
  std::vector<ManifestRow> rows;
  for (const auto& s : samples) rows.push_back({s.id, s.month, s.family, s.label, s.binary.byte_length()});
  return rows;
}

inline nlohmann::json ids_json(const std::vector<std::uint64_t>& ids) {
  auto a = nlohmann::json::array();
  for (auto id : ids) a.push_back(hex64(id));
  return a;
}

inline std::vector<std::uint64_t> ids_from_json(const nlohmann::json& a) {
  std::vector<std::uint64_t> ids;
  for (const auto& v : a) ids.push_back(std::stoull(v.get<std::string>(), nullptr, 16));
  return ids;
}

}  // namespace detail

inline nlohmann::json partitions_to_json(const PartitionSet& p) {
  nlohmann::json j;
  j["source_train"] = detail::ids_json(p.source_train);
  j["source_test"] = detail::ids_json(p.source_test);
  j["target_train_pool"] = detail::ids_json(p.target_train_pool);
  j["target_test_benign"] = detail::ids_json(p.target_test_benign);
  j["windows"] = nlohmann::json::array();
  for (const auto& w : p.windows)
    j["windows"].push_back({{"train_month", w.train_month},
                            {"test_month", w.test_month},
                            {"train", detail::ids_json(w.train)},
                            {"test", detail::ids_json(w.test)}});
  j["unused"] = detail::ids_json(p.unused);
  return j;
}

inline PartitionSet partitions_from_json(const nlohmann::json& j) {
  PartitionSet p;
  try {
    p.source_train = detail::ids_from_json(j.at("source_train"));
    p.source_test = detail::ids_from_json(j.at("source_test"));
    p.target_train_pool = detail::ids_from_json(j.at("target_train_pool"));
    p.target_test_benign = detail::ids_from_json(j.at("target_test_benign"));
    for (const auto& w : j.at("windows"))
      p.windows.push_back({w.at("train_month").get<std::string>(), w.at("test_month").get<std::string>(),
                           detail::ids_from_json(w.at("train")), detail::ids_from_json(w.at("test"))});
    p.unused = detail::ids_from_json(j.at("unused"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("partitions.json: ") + e.what());
  }
  return p;
}

/// Writes the corpus (gap month excluded) and partitions; every file is listed in checksums.csv.
inline void save_corpus(const std::string& dir, const DriftCorpus& c, const PartitionSet& p) {
  namespace fs = std::filesystem;
  std::vector<std::pair<std::string, std::string>> files;  // relative path, content
  auto put = [&](const std::string& rel, const std::vector<std::uint8_t>& bytes) {
    fs::create_directories(fs::path(dir) / fs::path(rel).parent_path());
    write_file((fs::path(dir) / rel).string(), bytes);
    files.emplace_back(rel, hex64(fnv1a(bytes)));
  };
  auto text = [](const std::string& s) { return std::vector<std::uint8_t>(s.begin(), s.end()); };

  nlohmann::json months = nlohmann::json::array();
  for (const auto& m : c.months) {
    if (m.gap) continue;
    put("months/" + m.spec.id + "/binaries.pack", detail::pack(m.malware));
    put("months/" + m.spec.id + "/manifest.csv", text(manifest_csv(detail::manifest_of(m.malware))));
    months.push_back({{"id", m.spec.id},
                      {"malware", m.spec.malware},
                      {"families", m.draw.families},
                      {"new_families", m.draw.new_families},
                      {"unseen_draw", m.draw.unseen_draw},
                      {"malware_ratio", m.spec.malware_ratio}});
  }
  put("benign/binaries.pack", detail::pack(c.benign));
  put("benign/manifest.csv", text(manifest_csv(detail::manifest_of(c.benign))));

  nlohmann::json fam = nlohmann::json::array();
  for (const auto& f : c.families) fam.push_back({{"id", f.id}, {"born", f.born}, {"style", style_to_json(f.style)}});
  nlohmann::json meta{{"months", months}, {"families", fam}};
  put("families.json", text(meta.dump(1) + "\n"));
  put("partitions.json", text(partitions_to_json(p).dump(1) + "\n"));

  std::string sums = "path,fnv1a\n";
  for (const auto& [rel, h] : files) sums += rel + "," + h + "\n";
  write_file((fs::path(dir) / "checksums.csv").string(), sums);
}

struct LoadedCorpus {
  DriftCorpus corpus;
  PartitionSet partitions;
};

/// Loads a corpus directory after verifying every checksum.
inline LoadedCorpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  auto sums = csv::read((fs::path(dir) / "checksums.csv").string());
  auto cp = sums.column("path"), ch = sums.column("fnv1a");
  for (const auto& row : sums.rows) {
    auto bytes = read_file((fs::path(dir) / row.at(cp)).string());
    if (hex64(fnv1a(bytes)) != row.at(ch)) throw FormatError("corpus: checksum mismatch for " + row.at(cp));
  }

  LoadedCorpus out;
  auto meta = nlohmann::json::parse(read_text((fs::path(dir) / "families.json").string()));
  auto load_samples = [&](const std::string& sub) {
    auto bins = detail::unpack(read_file((fs::path(dir) / sub / "binaries.pack").string()));
    auto rows = read_manifest((fs::path(dir) / sub / "manifest.csv").string());
    if (bins.size() != rows.size()) throw FormatError("corpus: " + sub + " manifest and pack disagree");
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < bins.size(); ++i) {
      Sample s;
      s.binary = std::move(bins[i]);
      s.id = s.binary.id_hash();
      if (s.id != rows[i].id_hash) throw FormatError("corpus: " + sub + " id mismatch at row " + std::to_string(i));
      s.month = rows[i].month;
      s.family = rows[i].family;
      s.label = rows[i].label;
      s.x = features(s.binary);
      samples.push_back(std::move(s));
    }
    return samples;
  };
  for (const auto& m : meta.at("months")) {
    MonthData md;
    md.spec = {m.at("id").get<std::string>(), m.at("malware").get<int>(), m.at("families").get<int>(),
               m.at("malware_ratio").get<double>()};
    md.draw = {m.at("families").get<int>(), m.at("new_families").get<int>(), m.at("unseen_draw").get<double>()};
    md.malware = load_samples("months/" + md.spec.id);
    out.corpus.months.push_back(std::move(md));
  }
  for (const auto& f : meta.at("families"))
    out.corpus.families.push_back({f.at("id").get<int>(), f.at("born").get<std::string>(), style_from_json(f.at("style"))});
  out.corpus.benign = load_samples("benign");
  out.partitions = partitions_from_json(nlohmann::json::parse(read_text((fs::path(dir) / "partitions.json").string())));
  return out;
}

}  // namespace robustda
