#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustda/parallel.hpp"
#include "robustda/rng.hpp"
#include "robustda/synbin.hpp"

namespace robustda {

struct MctsConfig {
  int levels = 6;
  int budget_per_level = 40;
  int simulations_per_expansion = 1;
  double size_cap_ratio = 1.05;
  double exploration = std::sqrt(2.0);
  std::uint64_t seed = 0;
  NopRange nops{};

  void validate() const {
    if (levels < 1) throw ValidationError("mcts: levels must be >= 1");
    if (budget_per_level < 1) throw ValidationError("mcts: budget_per_level must be >= 1");
    if (simulations_per_expansion != 1) throw ValidationError("mcts: simulations_per_expansion must be 1");
    if (!(size_cap_ratio > 1.0)) throw ValidationError("mcts: size_cap_ratio must be > 1");
    if (!(exploration >= 0)) throw ValidationError("mcts: exploration constant must be >= 0");
    if (nops.lo > nops.hi) throw ValidationError("mcts: empty nop range");
  }
};

/// Black-box access: malware score of a feature vector.
using ScoreOracle = std::function<double(const std::vector<double>&)>;

struct AttackOutcome {
  bool success = false;
  std::string reason;  // empty on success
  SyntheticBinary final_binary;
  std::vector<std::uint64_t> patch_sites;  // commit order
  std::size_t queries = 0;
  double initial_score = 0.0;
  double final_score = 0.0;
  std::vector<double> level_scores;  // committed root score after each level
  std::vector<bool> level_stalled;   // no child improved on the root; root kept
};

namespace detail {

struct MctsNode {
  SyntheticBinary bin;
  double score = 0.0;
  std::uint64_t site = 0;  // call site patched to reach this node
  std::size_t order = 0;   // creation order
  std::vector<std::uint64_t> path;  // sites patched from the original
  std::vector<std::uint64_t> untried;
  std::vector<std::unique_ptr<MctsNode>> children;
  MctsNode* parent = nullptr;
  double reward_sum = 0.0;
  int visits = 0;
};

inline std::vector<std::uint64_t> open_sites(const SyntheticBinary& bin, const std::vector<std::uint64_t>& patched) {
  std::vector<std::uint64_t> out;
  for (auto s : extract_call_sites(bin))
    if (std::find(patched.begin(), patched.end(), s) == patched.end()) out.push_back(s);
  return out;
}

// lowest score, then lowest call-site address, then earliest creation
inline bool better(const MctsNode& a, const MctsNode& b) {
  if (a.score != b.score) return a.score < b.score;
  if (a.site != b.site) return a.site < b.site;
  return a.order < b.order;
}

}  // namespace detail

/// MCTS over call-site patches. Each level spends its budget growing the tree under the
/// current root, then commits the root's best-scoring child. Stops as soon as any scored
/// candidate falls below the threshold.
inline AttackOutcome mcts_attack(const SyntheticBinary& bin, const ScoreOracle& oracle, double threshold,
                                 const MctsConfig& cfg) {
  using detail::MctsNode;
  cfg.validate();
  // a program cut off by the step budget has no complete trace to preserve
  try {
    validate(bin);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("mcts: input binary rejected: ") + e.what());
  }
  AttackOutcome out;
  out.final_binary = bin;
  auto query = [&](const SyntheticBinary& b) {
    ++out.queries;
    double s = oracle(features(b));
    if (!std::isfinite(s)) throw NumericError("mcts: oracle returned a non-finite score");
    return s;
  };
  out.initial_score = out.final_score = query(bin);
  if (out.initial_score < threshold)
    throw ValidationError("mcts: sample is not detected at this threshold (score " +
                          std::to_string(out.initial_score) + ")");

  const auto cap = static_cast<std::uint64_t>(std::floor(cfg.size_cap_ratio * static_cast<double>(bin.byte_length())));
  Rng rng(cfg.seed);
  std::size_t created = 0;
  auto root = std::make_unique<MctsNode>();
  root->bin = bin;
  root->score = out.initial_score;
  root->untried = detail::open_sites(bin, {});
  if (root->untried.empty()) {
    out.reason = "empty action space";
    return out;
  }

  auto finish = [&](const MctsNode& n, bool success) {
    out.success = success;
    out.final_binary = n.bin;
    out.final_score = n.score;
    out.patch_sites = n.path;
  };

  MctsNode* cur = root.get();
  for (int level = 0; level < cfg.levels; ++level) {
    for (int it = 0; it < cfg.budget_per_level; ++it) {
      // selection: descend through fully expanded nodes by UCT
      MctsNode* node = cur;
      while (node->untried.empty() && !node->children.empty()) {
        MctsNode* best = nullptr;
        double best_u = -std::numeric_limits<double>::infinity();
        const double ln_n = std::log(static_cast<double>(std::max(node->visits, 1)));
        for (auto& c : node->children) {
          double u = c->reward_sum / c->visits + cfg.exploration * std::sqrt(ln_n / c->visits);
          if (u > best_u) best_u = u, best = c.get();
        }
        node = best;
      }
      if (node->untried.empty()) break;  // subtree exhausted

      // expansion: one untried site, one scored mutant
      std::size_t pick = static_cast<std::size_t>(rng.below(node->untried.size()));
      std::uint64_t site = node->untried[pick];
      node->untried.erase(node->untried.begin() + static_cast<long>(pick));
      SyntheticBinary mutant;
      try {
        mutant = apply_patch(node->bin, site, derive_seed(cfg.seed, "mcts.nop", {static_cast<std::uint64_t>(level),
                                                                                  static_cast<std::uint64_t>(it), site}),
                             cfg.nops, cap);
      } catch (const ValidationError&) {
        --it;  // pruned before scoring: does not consume budget
        continue;
      }
      auto child = std::make_unique<MctsNode>();
      child->bin = std::move(mutant);
      child->site = site;
      child->order = ++created;
      child->parent = node;
      child->path = node->path;
      child->path.push_back(site);
      child->untried = detail::open_sites(child->bin, child->path);
      child->score = query(child->bin);
      MctsNode* added = child.get();
      node->children.push_back(std::move(child));

      // backpropagation
      const double reward = 1.0 - added->score;
      for (MctsNode* n = added; n; n = n->parent) {
        n->visits += 1;
        n->reward_sum += reward;
        if (n == cur) break;
      }
      if (added->score < threshold) {
        finish(*added, true);
        out.level_scores.push_back(added->score);
        out.level_stalled.push_back(false);
        return out;
      }
    }

    // commit the best child of the current root, unless none improves on it
    MctsNode* best = nullptr;
    for (auto& c : cur->children)
      if (!best || detail::better(*c, *best)) best = c.get();
    if (best && best->score <= cur->score) {
      cur = best;
      out.level_stalled.push_back(false);
    } else {
      out.level_stalled.push_back(true);
    }
    out.level_scores.push_back(cur->score);
  }
  finish(*cur, false);
  out.reason = "budget exhausted";
  return out;
}

// ---- adversarial training sets ----

struct AttackTarget {
  std::uint64_t id = 0;
  const SyntheticBinary* binary = nullptr;
};

struct AttackLogRow {
  std::uint64_t sample_id = 0;
  std::size_t threshold_index = 0;
  double threshold = 0.0;
  bool success = false;
  std::string reason;
  std::size_t queries = 0;
  double initial_score = 0.0;
  double final_score = 0.0;
  std::uint64_t final_id = 0;
  std::vector<std::uint64_t> patch_sites;
  std::vector<double> level_scores;
  std::vector<bool> level_stalled;
};

inline AttackLogRow log_row(std::uint64_t id, std::size_t ti, double threshold, const AttackOutcome& o) {
  return {id,           ti,           threshold,     o.success,     o.reason,      o.queries,
          o.initial_score, o.final_score, o.final_binary.id_hash(), o.patch_sites, o.level_scores, o.level_stalled};
}

inline std::string attack_log_jsonl(const std::vector<AttackLogRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::json sites = nlohmann::json::array();
    for (auto s : r.patch_sites) sites.push_back(hex64(s));
    nlohmann::json j{{"id", hex64(r.sample_id)},
                     {"threshold", r.threshold},
                     {"threshold_index", r.threshold_index},
                     {"success", r.success},
                     {"queries", r.queries},
                     {"initial_score", r.initial_score},
                     {"final_score", r.final_score},
                     {"final_id", hex64(r.final_id)},
                     {"patches", sites},
                     {"level_scores", r.level_scores},
                     {"level_stalled", r.level_stalled}};
    if (!r.reason.empty()) j["reason"] = r.reason;
    out += j.dump() + "\n";
  }
  return out;
}

struct AdvTrainset {
  std::map<std::uint64_t, std::vector<double>> table;  // original id -> adversarial features
  std::vector<AttackLogRow> log;
  std::uint64_t queries = 0;
};

/// Attacks every sample at every threshold and keeps, per original, the lowest-score
/// bypassing mutant. Samples not detected at a threshold are skipped for it.
inline AdvTrainset generate_adv_trainset(const ScoreOracle& oracle, const std::vector<double>& thresholds,
                                         const std::vector<AttackTarget>& samples, const MctsConfig& cfg,
                                         std::size_t workers = 1) {
  cfg.validate();
  const std::size_t nt = thresholds.size();
  std::vector<std::optional<AttackOutcome>> results(samples.size() * nt);
  std::vector<double> clean(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    clean[i] = oracle(features(*samples[i].binary));
    for (std::size_t t = 0; t < nt; ++t) {
      if (clean[i] < thresholds[t]) continue;
      MctsConfig c = cfg;
      c.seed = derive_seed(cfg.seed, "mcts.sample", {samples[i].id, t});
      results[i * nt + t] = mcts_attack(*samples[i].binary, oracle, thresholds[t], c);
    }
  });

  AdvTrainset out;
  std::set<std::uint64_t> mutant_ids;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.queries += 1;
    const AttackOutcome* best = nullptr;
    for (std::size_t t = 0; t < nt; ++t) {
      const auto& r = results[i * nt + t];
      if (!r) continue;
      out.queries += r->queries;
      out.log.push_back(log_row(samples[i].id, t, thresholds[t], *r));
      if (r->success && (!best || r->final_score < best->final_score)) best = &*r;
    }
    if (best && mutant_ids.insert(best->final_binary.id_hash()).second)
      out.table[samples[i].id] = features(best->final_binary);
  }
  return out;
}

}  // namespace robustda
