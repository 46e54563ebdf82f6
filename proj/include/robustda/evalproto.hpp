#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "robustda/csv.hpp"
#include "robustda/error.hpp"
#include "robustda/hash.hpp"

namespace robustda {

// Detection is strict: a score equal to the threshold is not detected.
inline bool detected(double score, double threshold) { return score > threshold; }

// Guard against f*N landing a hair below an integer (0.29*100 = 28.999...).
inline std::size_t allowed_false_positives(double fpr, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fpr * static_cast<double>(n) + 1e-9));
}

/// Order-statistic threshold: with scores sorted descending, t is the (m+1)-th largest,
/// m = floor(f*N). At most m benign scores are strictly above t.
inline double order_threshold(const std::vector<double>& sorted_desc, double fpr) {
  if (sorted_desc.empty()) throw ValidationError("calibrate: no benign scores");
  if (!(fpr >= 0.0 && fpr < 1.0)) throw ValidationError("calibrate: fpr must be in [0, 1)");
  const std::size_t m = allowed_false_positives(fpr, sorted_desc.size());
  return sorted_desc[std::min(m, sorted_desc.size() - 1)];
}

struct ThresholdRow {
  std::vector<double> fpr;
  std::vector<double> threshold;
  std::vector<std::size_t> allowed;  // m per point
  std::size_t n = 0;
};

inline ThresholdRow calibrate(const std::vector<double>& benign_scores, const std::vector<double>& fpr_points) {
  if (fpr_points.empty()) throw ValidationError("calibrate: no fpr points");
  for (double s : benign_scores)
    if (!std::isfinite(s)) throw NumericError("calibrate: non-finite benign score");
  const double fmin = *std::min_element(fpr_points.begin(), fpr_points.end());
  if (!(fmin > 0.0)) throw ValidationError("calibrate: fpr points must be positive");
  const std::size_t n = benign_scores.size();
  if (static_cast<double>(n) * fmin < 1.0 - 1e-9)
    throw ValidationError("calibrate: " + std::to_string(n) + " benign scores cannot resolve fpr " + csv::exact(fmin) +
                          " (need at least " + std::to_string(static_cast<std::size_t>(std::ceil(1.0 / fmin - 1e-9))) +
                          ")");
  std::vector<double> s = benign_scores;
  std::sort(s.begin(), s.end(), std::greater<>());
  ThresholdRow row;
  row.n = n;
  for (double f : fpr_points) {
    row.fpr.push_back(f);
    row.threshold.push_back(order_threshold(s, f));
    row.allowed.push_back(allowed_false_positives(f, n));
  }
  return row;
}

inline double empirical_fpr(const std::vector<double>& benign_scores, double threshold) {
  if (benign_scores.empty()) throw ValidationError("empirical_fpr: no benign scores");
  std::size_t k = 0;
  for (double s : benign_scores) k += detected(s, threshold);
  return static_cast<double>(k) / static_cast<double>(benign_scores.size());
}

/// Thresholds for every model at every FPR point, tied to the benign set they came from.
struct ThresholdTable {
  std::vector<double> fpr;
  std::map<std::string, std::vector<double>> thresholds;
  std::uint64_t calibration_fingerprint = 0;

  std::size_t fpr_index(double f) const {
    for (std::size_t i = 0; i < fpr.size(); ++i)
      if (fpr[i] == f) return i;
    throw ValidationError("threshold table: no fpr point " + csv::exact(f));
  }
  double at(const std::string& model, double f) const {
    auto it = thresholds.find(model);
    if (it == thresholds.end()) throw ValidationError("threshold table: unknown model '" + model + "'");
    return it->second[fpr_index(f)];
  }
};

inline std::uint64_t id_fingerprint(std::vector<std::uint64_t> ids) {
  std::sort(ids.begin(), ids.end());
  Fnv1a h;
  h.update_u64(ids.size());
  for (auto id : ids) h.update_u64(id);
  return h.digest();
}

// ---- common malware set ----

/// Scores of one model on a sample set, plus its threshold at the FPR point in question.
struct DetectorView {
  std::string model;
  double threshold = 0.0;
  const std::map<std::uint64_t, double>* scores = nullptr;
};

struct CommonSet {
  double fpr = 0.0;
  std::vector<std::uint64_t> ids;  // ascending
  std::vector<std::string> models;

  std::uint64_t fingerprint() const { return id_fingerprint(ids); }
  bool contains(std::uint64_t id) const { return std::binary_search(ids.begin(), ids.end(), id); }
};

inline double score_of(const DetectorView& d, std::uint64_t id) {
  auto it = d.scores->find(id);
  if (it == d.scores->end()) throw ValidationError("missing score for model '" + d.model + "', sample " + hex64(id));
  return it->second;
}

/// Malware detected by every model. Ordered by sample id.
inline CommonSet common_malware_set(const std::vector<DetectorView>& models, const std::vector<std::uint64_t>& sample_ids,
                                    double fpr) {
  if (models.empty()) throw ValidationError("common set: no models");
  CommonSet out;
  out.fpr = fpr;
  for (const auto& m : models) {
    if (!m.scores) throw ValidationError("common set: model '" + m.model + "' has no scores");
    out.models.push_back(m.model);
  }
  std::vector<std::uint64_t> ids = sample_ids;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (auto id : ids) {
    bool all = true;
    for (const auto& m : models) all = detected(score_of(m, id), m.threshold) && all;  // look up every pair
    if (all) out.ids.push_back(id);
  }
  return out;
}

/// Fraction of the common set whose adversarial score falls to or below the threshold.
/// nullopt means the common set is empty and the rate is undefined.
inline std::optional<double> asr(const std::map<std::uint64_t, double>& adversarial_scores, const CommonSet& common,
                                 double threshold) {
  if (common.ids.empty()) return std::nullopt;
  std::size_t bypass = 0;
  for (auto id : common.ids) {
    auto it = adversarial_scores.find(id);
    if (it == adversarial_scores.end()) throw ValidationError("asr: no attack result for sample " + hex64(id));
    bypass += !detected(it->second, threshold);
  }
  return static_cast<double>(bypass) / static_cast<double>(common.ids.size());
}

/// Detection rate over the full clean malware test set.
inline double clean_tpr(const std::vector<double>& malware_scores, double threshold) {
  if (malware_scores.empty()) throw ValidationError("clean_tpr: empty malware test set");
  std::size_t k = 0;
  for (double s : malware_scores) k += detected(s, threshold);
  return static_cast<double>(k) / static_cast<double>(malware_scores.size());
}

// ---- report ----

struct RunRecord {
  std::string defense;
  std::string attack;
  double fpr = 0.0;
  int window = 0;
  std::uint64_t seed = 0;
  std::optional<double> asr;
  double clean_tpr = 0.0;
  std::size_t common_size = 0;
  std::uint64_t common_fingerprint = 0;
};

// Deterministic work units per phase; wall-clock lives elsewhere.
struct PhaseCost {
  double train = 0.0;
  double source_attack = 0.0;
  double target_attack = 0.0;
  double total() const { return train + source_attack + target_attack; }
};

struct CostRecord {
  std::string defense;
  int window = 0;
  std::uint64_t seed = 0;
  PhaseCost cost;
};

/// The cells a complete run must cover.
struct MatrixSpec {
  std::vector<std::string> defenses;
  std::vector<std::string> attacks;
  std::vector<double> fpr;
  std::vector<int> windows;
  std::vector<std::uint64_t> seeds;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population, across windows
};

/// Window-level values are first averaged over seeds, then summarized across windows.
inline std::optional<MeanStd> mean_std(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return MeanStd{mean, std::sqrt(ss / static_cast<double>(v.size()))};
}

struct ReportCell {
  std::string defense;
  std::string attack;
  double fpr = 0.0;
  std::size_t expected = 0;  // window x seed runs
  std::size_t present = 0;
  std::size_t undefined = 0;  // runs with an empty common set
  std::optional<MeanStd> asr;
  std::optional<MeanStd> tpr;
  bool complete() const { return present == expected; }
};

struct CostCell {
  std::string defense;
  std::size_t windows = 0;
  PhaseCost mean;  // per adaptation window
};

struct EvalReport {
  std::vector<ReportCell> cells;  // defense x attack x fpr, in matrix order
  std::vector<CostCell> costs;
  std::vector<std::string> gaps;  // human-readable missing entries
  bool incomplete = false;

  const ReportCell& cell(const std::string& d, const std::string& a, double f) const {
    for (const auto& c : cells)
      if (c.defense == d && c.attack == a && c.fpr == f) return c;
    throw ValidationError("report: no cell " + d + "/" + a + "/" + csv::exact(f));
  }
};

inline EvalReport build_report(const MatrixSpec& spec, const std::vector<RunRecord>& runs,
                               const std::vector<CostRecord>& costs) {
  using Key = std::tuple<std::string, std::string, double, int, std::uint64_t>;
  std::map<Key, const RunRecord*> index;
  for (const auto& r : runs) {
    if (r.asr && !(*r.asr >= 0.0 && *r.asr <= 1.0)) throw ValidationError("report: asr outside [0,1]");
    if (!(r.clean_tpr >= 0.0 && r.clean_tpr <= 1.0)) throw ValidationError("report: tpr outside [0,1]");
    if (!index.emplace(Key{r.defense, r.attack, r.fpr, r.window, r.seed}, &r).second)
      throw ValidationError("report: duplicate run " + r.defense + "/" + r.attack + "/" + csv::exact(r.fpr) +
                            "/w" + std::to_string(r.window) + "/s" + std::to_string(r.seed));
  }

  EvalReport rep;
  for (const auto& d : spec.defenses)
    for (const auto& a : spec.attacks)
      for (double f : spec.fpr) {
        ReportCell c{d, a, f, spec.windows.size() * spec.seeds.size(), 0, 0, {}, {}};
        std::vector<double> asr_w, tpr_w;
        for (int w : spec.windows) {
          double asr_sum = 0, tpr_sum = 0;
          std::size_t asr_n = 0, tpr_n = 0;
          for (auto s : spec.seeds) {
            auto it = index.find(Key{d, a, f, w, s});
            if (it == index.end()) {
              rep.gaps.push_back(d + " / " + a + " / fpr " + csv::fmt(f, 4) + " / window " + std::to_string(w) +
                                 " / seed " + std::to_string(s));
              continue;
            }
            ++c.present;
            tpr_sum += it->second->clean_tpr, ++tpr_n;
            if (it->second->asr)
              asr_sum += *it->second->asr, ++asr_n;
            else
              ++c.undefined;
          }
          if (asr_n) asr_w.push_back(asr_sum / static_cast<double>(asr_n));
          if (tpr_n) tpr_w.push_back(tpr_sum / static_cast<double>(tpr_n));
        }
        c.asr = mean_std(asr_w);
        c.tpr = mean_std(tpr_w);
        rep.incomplete = rep.incomplete || !c.complete();
        rep.cells.push_back(std::move(c));
      }

  for (const auto& d : spec.defenses) {
    CostCell cc{d, 0, {}};
    for (int w : spec.windows) {
      PhaseCost sum;
      std::size_t n = 0;
      for (const auto& r : costs)
        if (r.defense == d && r.window == w) {
          sum.train += r.cost.train, sum.source_attack += r.cost.source_attack, sum.target_attack += r.cost.target_attack;
          ++n;
        }
      if (!n) continue;
      ++cc.windows;
      cc.mean.train += sum.train / static_cast<double>(n);
      cc.mean.source_attack += sum.source_attack / static_cast<double>(n);
      cc.mean.target_attack += sum.target_attack / static_cast<double>(n);
    }
    if (cc.windows) {
      const double k = static_cast<double>(cc.windows);
      cc.mean.train /= k, cc.mean.source_attack /= k, cc.mean.target_attack /= k;
    }
    if (cc.windows != spec.windows.size()) {
      rep.incomplete = true;
      rep.gaps.push_back(d + " / cost / " + std::to_string(spec.windows.size() - cc.windows) + " window(s)");
    }
    rep.costs.push_back(cc);
  }
  return rep;
}

// ---- rendering ----

inline std::string comment_block(const std::vector<std::string>& comments) {
  std::string out;
  for (const auto& c : comments) out += "# " + c + "\n";
  return out;
}

inline std::string opt_exact(const std::optional<MeanStd>& v, bool std_part) {
  if (!v) return "undefined";
  return csv::exact(std_part ? v->std : v->mean);
}

inline std::string report_csv(const EvalReport& r, const std::vector<std::string>& comments = {}) {
  std::string out = comment_block(comments);
  out += "defense,attack,fpr,runs_expected,runs_present,runs_undefined,asr_mean,asr_std,tpr_mean,tpr_std\n";
  for (const auto& c : r.cells)
    out += csv::join({c.defense, c.attack, csv::exact(c.fpr), std::to_string(c.expected), std::to_string(c.present),
                      std::to_string(c.undefined), opt_exact(c.asr, false), opt_exact(c.asr, true),
                      opt_exact(c.tpr, false), opt_exact(c.tpr, true)}) +
           "\n";
  return out;
}

inline std::string cost_csv(const EvalReport& r, const std::vector<std::string>& comments = {}) {
  std::string out = comment_block(comments);
  out += "defense,windows,train,source_attack,target_attack,total\n";
  for (const auto& c : r.costs)
    out += csv::join({c.defense, std::to_string(c.windows), csv::exact(c.mean.train), csv::exact(c.mean.source_attack),
                      csv::exact(c.mean.target_attack), csv::exact(c.mean.total())}) +
           "\n";
  return out;
}

/// "12.3 ± 4.5" in percent, "gap" for a missing cell, "undefined" for an empty common set.
inline std::string percent_cell(const ReportCell& c, bool tpr) {
  if (!c.complete()) return "gap";
  const auto& v = tpr ? c.tpr : c.asr;
  if (!v) return "undefined";
  return csv::fmt(100.0 * v->mean, 1) + " ± " + csv::fmt(100.0 * v->std, 1);
}

inline std::string markdown_row(const std::vector<std::string>& cells) {
  std::string out = "|";
  for (const auto& c : cells) out += " " + c + " |";
  return out + "\n";
}

/// Defenses as rows, (attack, fpr) as columns.
inline std::string markdown_matrix(const EvalReport& r, const std::string& title, const std::vector<std::string>& defenses,
                                   const std::vector<std::string>& attacks, const std::vector<double>& fprs, bool tpr,
                                   const std::vector<std::string>& comments = {}) {
  std::string out;
  for (const auto& c : comments) out += "<!-- " + c + " -->\n";
  out += "## " + title + "\n\n";
  std::vector<std::string> head{"defense"}, rule{"---"};
  for (const auto& a : attacks)
    for (double f : fprs) head.push_back(a + " @ " + csv::fmt(100.0 * f, 1) + "%"), rule.push_back("---:");
  out += markdown_row(head) + markdown_row(rule);
  for (const auto& d : defenses) {
    std::vector<std::string> row{d};
    for (const auto& a : attacks)
      for (double f : fprs) row.push_back(percent_cell(r.cell(d, a, f), tpr));
    out += markdown_row(row);
  }
  return out + "\n";
}

inline std::string markdown_costs(const EvalReport& r, const std::vector<std::string>& comments = {}) {
  std::string out;
  for (const auto& c : comments) out += "<!-- " + c + " -->\n";
  out += "## Cost per adaptation window (work units)\n\n";
  out += markdown_row({"defense", "train", "source attack", "target attack", "total"});
  out += markdown_row({"---", "---:", "---:", "---:", "---:"});
  for (const auto& c : r.costs) {
    if (!c.windows) {
      out += markdown_row({c.defense, "gap", "gap", "gap", "gap"});
      continue;
    }
    out += markdown_row({c.defense, csv::fmt(c.mean.train, 0), csv::fmt(c.mean.source_attack, 0),
                         csv::fmt(c.mean.target_attack, 0), csv::fmt(c.mean.total(), 0)});
  }
  return out + "\n";
}

}  // namespace robustda
