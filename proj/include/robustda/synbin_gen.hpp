#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "robustda/rng.hpp"
#include "robustda/synbin.hpp"

namespace robustda {

/// Knobs of the random program generator. Weights are relative.
struct ProgramStyle {
  // straight-line op mix inside a block
  double w_call = 1.0;
  double w_out_lo = 1.0;
  double w_out_hi = 0.2;
  double w_out_reg = 0.5;
  double w_push = 0.6;  // a PUSH, later matched by a POP in the same block
  double w_mov_same = 0.3;
  double w_mov_diff = 0.5;
  double w_nop = 0.5;
  double high_reg = 0.5;  // probability a register is drawn from r4..r7

  int mid_lo = 2, mid_hi = 5;
  int leaf_lo = 3, leaf_hi = 8;
  int blocks_lo = 2, blocks_hi = 5;
  int block_len_lo = 4, block_len_hi = 14;
  double main_scale = 2.0;    // main gets this many times more blocks
  double skip_prob = 0.3;     // per function: reorder two blocks through JMPs
  double pad_prob = 0.3;      // per function gap: dead NOP padding
  int pad_lo = 1, pad_hi = 12;
  double main_last = 0.5;     // probability main is laid out after its callees
  std::uint64_t base = 0x401000;
};

namespace detail {

// Tiny two-pass assembler over symbolic labels.
class Assembler {
public:
  int new_label() { return next_label_++; }
  void bind(int label) { items_.push_back({Instruction{}, -1, label}); }
  void emit(const Instruction& i, int target_label = -1) { items_.push_back({i, target_label, -1}); }
  std::size_t size() const { return items_.size(); }

  Section assemble(std::string name, std::uint64_t base, std::map<int, std::uint64_t>& labels) const {
    std::uint64_t a = base;
    for (const auto& it : items_) {
      if (it.bind >= 0)
        labels[it.bind] = a;
      else
        a += it.ins.size();
    }
    Section s{std::move(name), base, {}};
    for (const auto& it : items_) {
      if (it.bind >= 0) continue;
      Instruction i = it.ins;
      if (it.target >= 0) i.target = static_cast<std::uint32_t>(labels.at(it.target));
      s.code.push_back(i);
    }
    return s;
  }

private:
  struct Item {
    Instruction ins;
    int target;
    int bind;
  };
  std::vector<Item> items_;
  int next_label_ = 0;
};

}  // namespace detail

/// Generates a well-formed, terminating program. Call graph is main -> mid -> leaf,
/// so recursion is impossible and execution always reaches main's HALT.
inline SyntheticBinary generate_program(const ProgramStyle& st, Rng& rng) {
  if (st.mid_lo < 0 || st.mid_hi < st.mid_lo || st.leaf_lo < 0 || st.leaf_hi < st.leaf_lo || st.blocks_lo < 1 ||
      st.blocks_hi < st.blocks_lo || st.block_len_lo < 1 || st.block_len_hi < st.block_len_lo || st.pad_lo < 0 ||
      st.pad_hi < st.pad_lo)
    throw ValidationError("generate_program: inconsistent style ranges");

  detail::Assembler as;
  const int n_mid = static_cast<int>(rng.range(st.mid_lo, st.mid_hi));
  const int n_leaf = static_cast<int>(rng.range(st.leaf_lo, st.leaf_hi));
  std::vector<int> mid_labels, leaf_labels;
  for (int i = 0; i < n_mid; ++i) mid_labels.push_back(as.new_label());
  for (int i = 0; i < n_leaf; ++i) leaf_labels.push_back(as.new_label());
  const int main_label = as.new_label();

  auto reg = [&] {
    return static_cast<std::uint8_t>(rng.bernoulli(st.high_reg) ? 4 + rng.below(4) : rng.below(4));
  };

  // One block: straight-line code whose POPs never exceed its own PUSHes.
  auto block = [&](detail::Assembler& a, const std::vector<int>& callees, int len) {
    std::vector<double> w{callees.empty() ? 0.0 : st.w_call, st.w_out_lo, st.w_out_hi, st.w_out_reg,
                          st.w_push, st.w_mov_same, st.w_mov_diff, st.w_nop};
    int depth = 0;
    for (int n = 0; n < len; ++n) {
      switch (rng.categorical(w)) {
        case 0: a.emit(Instruction::call(0), callees[rng.below(callees.size())]); break;
        case 1: a.emit(Instruction::out(static_cast<std::uint8_t>(rng.below(128)))); break;
        case 2: a.emit(Instruction::out(static_cast<std::uint8_t>(128 + rng.below(128)))); break;
        case 3: a.emit(Instruction::out_reg(reg())); break;
        case 4:
          a.emit(Instruction::push(reg()));
          ++depth;
          break;
        case 5: {
          auto r = reg();
          a.emit(Instruction::mov(r, r));
          break;
        }
        case 6: a.emit(Instruction::mov(reg(), reg())); break;
        default: a.emit(Instruction::nop());
      }
      if (depth > 0 && rng.bernoulli(0.3)) {
        a.emit(Instruction::pop(reg()));
        --depth;
      }
    }
    for (; depth > 0; --depth) a.emit(Instruction::pop(reg()));
  };

  auto function = [&](detail::Assembler& a, int label, const std::vector<int>& callees, double scale, bool is_main) {
    a.bind(label);
    int nb = static_cast<int>(rng.range(st.blocks_lo, st.blocks_hi) * scale + 0.5);
    nb = std::max(nb, 1);
    auto len = [&] { return static_cast<int>(rng.range(st.block_len_lo, st.block_len_hi)); };
    if (nb >= 2 && rng.bernoulli(st.skip_prob)) {
      // Executes block A then block B while laying B out first.
      int la = a.new_label(), lb = a.new_label(), lc = a.new_label();
      a.emit(Instruction::jmp(0), la);
      a.bind(lb);
      block(a, callees, len());
      a.emit(Instruction::jmp(0), lc);
      a.bind(la);
      block(a, callees, len());
      a.emit(Instruction::jmp(0), lb);
      a.bind(lc);
      nb -= 2;
    }
    for (int b = 0; b < nb; ++b) block(a, callees, len());
    a.emit(is_main ? Instruction::halt() : Instruction::ret());
  };

  auto pad = [&] {
    if (rng.bernoulli(st.pad_prob))
      for (auto n = rng.range(st.pad_lo, st.pad_hi); n > 0; --n) as.emit(Instruction::nop());
  };

  std::vector<int> all_callees = mid_labels;
  all_callees.insert(all_callees.end(), leaf_labels.begin(), leaf_labels.end());

  // Layout order of functions: shuffled, with main first or last.
  std::vector<int> order;
  for (int i = 0; i < n_mid + n_leaf; ++i) order.push_back(i);
  rng.shuffle(order.begin(), order.end());
  const bool main_last = rng.bernoulli(st.main_last);
  if (!main_last) order.insert(order.begin(), -1);
  else order.push_back(-1);

  for (std::size_t k = 0; k < order.size(); ++k) {
    if (k > 0) pad();
    int f = order[k];
    if (f < 0)
      function(as, main_label, all_callees, st.main_scale, true);
    else if (f < n_mid)
      function(as, mid_labels[f], leaf_labels, 1.0, false);
    else
      function(as, leaf_labels[f - n_mid], {}, 1.0, false);
  }

  std::map<int, std::uint64_t> labels;
  SyntheticBinary bin;
  bin.sections.push_back(as.assemble(".text", st.base, labels));
  bin.entry = labels.at(main_label);
  return bin;
}

}  // namespace robustda
