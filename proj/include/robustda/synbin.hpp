#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "robustda/bytes.hpp"
#include "robustda/csv.hpp"
#include "robustda/error.hpp"
#include "robustda/hash.hpp"
#include "robustda/rng.hpp"

namespace robustda {

inline constexpr std::size_t kRegisters = 8;
inline constexpr std::size_t kFeatureDim = 256;
inline constexpr std::uint64_t kDefaultStepBudget = 1u << 20;
inline constexpr std::uint64_t kSectionAlign = 0x1000;

enum class Op : std::uint8_t { Call, Jmp, Ret, Push, Pop, Mov, Nop, Out, Halt };

// Opcode bytes. OUT has two encodings: immediate and register operand.
inline constexpr std::uint8_t kByteCall = 0xE8;
inline constexpr std::uint8_t kByteJmp = 0xE9;
inline constexpr std::uint8_t kByteRet = 0xC3;
inline constexpr std::uint8_t kBytePush = 0x50;  // + register
inline constexpr std::uint8_t kBytePop = 0x58;   // + register
inline constexpr std::uint8_t kByteMov = 0x89;   // then (dst << 4 | src)
inline constexpr std::uint8_t kByteNop = 0x90;
inline constexpr std::uint8_t kByteOutImm = 0xE6;
inline constexpr std::uint8_t kByteOutReg = 0xEE;
inline constexpr std::uint8_t kByteHalt = 0xF4;

inline constexpr std::uint32_t width(Op op) {
  switch (op) {
    case Op::Call:
    case Op::Jmp: return 5;
    case Op::Mov:
    case Op::Out: return 2;
    default: return 1;
  }
}

inline const char* op_name(Op op) {
  static constexpr const char* names[] = {"CALL", "JMP", "RET", "PUSH", "POP", "MOV", "NOP", "OUT", "HALT"};
  return names[static_cast<int>(op)];
}

struct Instruction {
  Op op = Op::Nop;
  std::uint32_t target = 0;  // CALL / JMP
  std::uint8_t a = 0;        // PUSH/POP/MOV-dst register, OUT immediate or register
  std::uint8_t b = 0;        // MOV source register
  bool reg_operand = false;  // OUT reads register a instead of immediate a

  static Instruction call(std::uint32_t t) { return {Op::Call, t}; }
  static Instruction jmp(std::uint32_t t) { return {Op::Jmp, t}; }
  static Instruction ret() { return {Op::Ret}; }
  static Instruction push(std::uint8_t r) { return {Op::Push, 0, r}; }
  static Instruction pop(std::uint8_t r) { return {Op::Pop, 0, r}; }
  static Instruction mov(std::uint8_t dst, std::uint8_t src) { return {Op::Mov, 0, dst, src}; }
  static Instruction nop() { return {Op::Nop}; }
  static Instruction out(std::uint8_t imm) { return {Op::Out, 0, imm}; }
  static Instruction out_reg(std::uint8_t r) { return {Op::Out, 0, r, 0, true}; }
  static Instruction halt() { return {Op::Halt}; }

  std::uint32_t size() const { return width(op); }
  bool terminator() const { return op == Op::Jmp || op == Op::Ret || op == Op::Halt; }

  bool operator==(const Instruction&) const = default;
};

inline void encode(const Instruction& ins, std::vector<std::uint8_t>& out) {
  auto addr = [&](std::uint32_t t) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(t >> (8 * i)));
  };
  switch (ins.op) {
    case Op::Call: out.push_back(kByteCall); addr(ins.target); break;
    case Op::Jmp: out.push_back(kByteJmp); addr(ins.target); break;
    case Op::Ret: out.push_back(kByteRet); break;
    case Op::Push: out.push_back(static_cast<std::uint8_t>(kBytePush + ins.a)); break;
    case Op::Pop: out.push_back(static_cast<std::uint8_t>(kBytePop + ins.a)); break;
    case Op::Mov:
      out.push_back(kByteMov);
      out.push_back(static_cast<std::uint8_t>(ins.a << 4 | ins.b));
      break;
    case Op::Nop: out.push_back(kByteNop); break;
    case Op::Out:
      out.push_back(ins.reg_operand ? kByteOutReg : kByteOutImm);
      out.push_back(ins.a);
      break;
    case Op::Halt: out.push_back(kByteHalt); break;
  }
}

/// Decodes one instruction at `pos`, advancing it.
inline Instruction decode(const std::vector<std::uint8_t>& code, std::size_t& pos) {
  auto need = [&](std::size_t n) {
    if (pos + n > code.size()) throw FormatError("synbin: truncated instruction");
  };
  need(1);
  std::uint8_t b = code[pos++];
  auto addr = [&] {
    need(4);
    std::uint32_t t = 0;
    for (int i = 0; i < 4; ++i) t |= static_cast<std::uint32_t>(code[pos++]) << (8 * i);
    return t;
  };
  if (b == kByteCall) return Instruction::call(addr());
  if (b == kByteJmp) return Instruction::jmp(addr());
  if (b == kByteRet) return Instruction::ret();
  if (b >= kBytePush && b < kBytePush + kRegisters) return Instruction::push(b - kBytePush);
  if (b >= kBytePop && b < kBytePop + kRegisters) return Instruction::pop(b - kBytePop);
  if (b == kByteNop) return Instruction::nop();
  if (b == kByteHalt) return Instruction::halt();
  need(1);
  std::uint8_t op = code[pos++];
  if (b == kByteMov) return Instruction::mov(op >> 4, op & 0x0F);
  if (b == kByteOutImm) return Instruction::out(op);
  if (b == kByteOutReg) return Instruction::out_reg(op);
  throw FormatError("synbin: unknown opcode byte " + std::to_string(b));
}

struct Section {
  std::string name;
  std::uint64_t base = 0;
  std::vector<Instruction> code;

  std::uint64_t byte_size() const {
    std::uint64_t n = 0;
    for (const auto& i : code) n += i.size();
    return n;
  }
  std::uint64_t end() const { return base + byte_size(); }

  bool operator==(const Section&) const = default;
};

/// Where an instruction lives: section index and position within it.
struct Location {
  std::size_t section = 0;
  std::size_t index = 0;
};

struct SyntheticBinary {
  std::vector<Section> sections;
  std::uint64_t entry = 0;

  /// Encoded width of all instructions; gaps between sections do not count.
  std::uint64_t byte_length() const {
    std::uint64_t n = 0;
    for (const auto& s : sections) n += s.byte_size();
    return n;
  }

  std::uint64_t end_address() const {
    std::uint64_t e = 0;
    for (const auto& s : sections) e = std::max(e, s.end());
    return e;
  }

  /// Content hash over entry, section bases and encoded instructions. Labels are not hashed.
  std::uint64_t id_hash() const {
    Fnv1a h;
    h.update_u64(entry);
    std::vector<std::uint8_t> buf;
    for (const auto& s : sections) {
      h.update_u64(s.base);
      buf.clear();
      for (const auto& i : s.code) encode(i, buf);
      h.update_u64(buf.size());
      h.update(buf);
    }
    return h.digest();
  }

  std::size_t instruction_count() const {
    std::size_t n = 0;
    for (const auto& s : sections) n += s.code.size();
    return n;
  }

  bool operator==(const SyntheticBinary&) const = default;
};

/// Sorted address table for resolving jump targets.
class AddressIndex {
public:
  explicit AddressIndex(const SyntheticBinary& bin) {
    for (std::size_t s = 0; s < bin.sections.size(); ++s) {
      std::uint64_t a = bin.sections[s].base;
      for (std::size_t i = 0; i < bin.sections[s].code.size(); ++i) {
        entries_.push_back({a, {s, i}});
        a += bin.sections[s].code[i].size();
      }
    }
    std::sort(entries_.begin(), entries_.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  }

  std::optional<Location> find(std::uint64_t addr) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), addr,
                               [](const auto& e, std::uint64_t a) { return e.first < a; });
    if (it == entries_.end() || it->first != addr) return std::nullopt;
    return it->second;
  }

  std::uint64_t address(std::size_t k) const { return entries_[k].first; }
  std::size_t size() const { return entries_.size(); }

private:
  std::vector<std::pair<std::uint64_t, Location>> entries_;
};

enum class HaltStatus : std::uint8_t { Halted, UnresolvedTarget, StackUnderflow, BudgetExhausted };

inline const char* status_name(HaltStatus s) {
  static constexpr const char* names[] = {"halted", "unresolved_target", "stack_underflow", "budget_exhausted"};
  return names[static_cast<int>(s)];
}

/// Observable behaviour of one run: emitted OUT values and how execution stopped.
struct TraceSignature {
  std::vector<std::uint32_t> outputs;
  HaltStatus status = HaltStatus::Halted;

  bool halted() const { return status == HaltStatus::Halted; }
  bool operator==(const TraceSignature&) const = default;
};

/// Initial register file. Non-zero so that register moves are visible through OUT.
inline std::uint32_t initial_register(std::size_t r) { return static_cast<std::uint32_t>(16 * r + 1); }

// Return addresses live on their own stack, so semantic NOPs that touch the
// data stack cannot disturb control flow.
inline TraceSignature interpret(const SyntheticBinary& bin, std::uint64_t step_budget = kDefaultStepBudget) {
  AddressIndex index(bin);
  TraceSignature trace;
  std::array<std::uint32_t, kRegisters> reg{};
  for (std::size_t r = 0; r < kRegisters; ++r) reg[r] = initial_register(r);
  std::vector<std::uint32_t> data;
  std::vector<std::uint64_t> calls;

  std::uint64_t pc = bin.entry;
  for (std::uint64_t step = 0;; ++step) {
    if (step == step_budget) {
      trace.status = HaltStatus::BudgetExhausted;
      return trace;
    }
    auto loc = index.find(pc);
    if (!loc) {
      trace.status = HaltStatus::UnresolvedTarget;
      return trace;
    }
    const Instruction& ins = bin.sections[loc->section].code[loc->index];
    std::uint64_t next = pc + ins.size();
    switch (ins.op) {
      case Op::Call:
        calls.push_back(next);
        next = ins.target;
        break;
      case Op::Jmp: next = ins.target; break;
      case Op::Ret:
        if (calls.empty()) {
          trace.status = HaltStatus::StackUnderflow;
          return trace;
        }
        next = calls.back();
        calls.pop_back();
        break;
      case Op::Push: data.push_back(reg[ins.a]); break;
      case Op::Pop:
        if (data.empty()) {
          trace.status = HaltStatus::StackUnderflow;
          return trace;
        }
        reg[ins.a] = data.back();
        data.pop_back();
        break;
      case Op::Mov: reg[ins.a] = reg[ins.b]; break;
      case Op::Nop: break;
      case Op::Out: trace.outputs.push_back(ins.reg_operand ? reg[ins.a] : ins.a); break;
      case Op::Halt: trace.status = HaltStatus::Halted; return trace;
    }
    pc = next;
  }
}

/// Throws ValidationError unless the binary is well formed and halts within the budget.
inline void validate(const SyntheticBinary& bin, std::uint64_t step_budget = kDefaultStepBudget) {
  if (bin.sections.empty()) throw ValidationError("synbin: no sections");
  std::uint64_t prev_end = 0;
  for (std::size_t s = 0; s < bin.sections.size(); ++s) {
    const auto& sec = bin.sections[s];
    if (sec.code.empty()) throw ValidationError("synbin: section '" + sec.name + "' is empty");
    if (s > 0 && sec.base < prev_end)
      throw ValidationError("synbin: section '" + sec.name + "' overlaps or precedes its predecessor");
    if (sec.end() > 0xFFFFFFFFull) throw ValidationError("synbin: section '" + sec.name + "' exceeds 32-bit space");
    if (!sec.code.back().terminator())
      throw ValidationError("synbin: section '" + sec.name + "' does not end in JMP, RET or HALT");
    for (const auto& i : sec.code) {
      bool reg_op = i.op == Op::Push || i.op == Op::Pop || i.op == Op::Mov || (i.op == Op::Out && i.reg_operand);
      if (reg_op && i.a >= kRegisters) throw ValidationError("synbin: register out of range");
      if (i.op == Op::Mov && i.b >= kRegisters) throw ValidationError("synbin: register out of range");
    }
    prev_end = sec.end();
  }
  AddressIndex index(bin);
  if (!index.find(bin.entry)) throw ValidationError("synbin: entry " + hex64(bin.entry) + " is not an instruction");
  for (const auto& sec : bin.sections)
    for (const auto& i : sec.code)
      if ((i.op == Op::Call || i.op == Op::Jmp) && !index.find(i.target))
        throw ValidationError("synbin: target " + hex64(i.target) + " is not an instruction boundary");
  auto trace = interpret(bin, step_budget);
  if (!trace.halted()) throw ValidationError(std::string("synbin: execution ends with ") + status_name(trace.status));
}

/// Addresses of every CALL, ascending.
inline std::vector<std::uint64_t> extract_call_sites(const SyntheticBinary& bin) {
  std::vector<std::uint64_t> sites;
  for (const auto& sec : bin.sections) {
    std::uint64_t a = sec.base;
    for (const auto& i : sec.code) {
      if (i.op == Op::Call) sites.push_back(a);
      a += i.size();
    }
  }
  std::sort(sites.begin(), sites.end());
  return sites;
}

inline std::optional<Location> locate(const SyntheticBinary& bin, std::uint64_t addr) {
  for (std::size_t s = 0; s < bin.sections.size(); ++s) {
    const auto& sec = bin.sections[s];
    if (addr < sec.base || addr >= sec.end()) continue;
    std::uint64_t a = sec.base;
    for (std::size_t i = 0; i < sec.code.size(); ++i) {
      if (a == addr) return Location{s, i};
      a += sec.code[i].size();
    }
  }
  return std::nullopt;
}

struct NopRange {
  std::uint32_t lo = 2;
  std::uint32_t hi = 8;
};

/// Semantic NOP patterns: NOP, MOV r<-r, and PUSH r / POP r.
inline std::vector<Instruction> semantic_nops(Rng& rng, std::uint32_t k) {
  std::vector<Instruction> out;
  for (std::uint32_t n = 0; n < k; ++n) {
    auto r = static_cast<std::uint8_t>(rng.below(kRegisters));
    switch (rng.below(3)) {
      case 0: out.push_back(Instruction::nop()); break;
      case 1: out.push_back(Instruction::mov(r, r)); break;
      default:
        out.push_back(Instruction::push(r));
        out.push_back(Instruction::pop(r));
    }
  }
  return out;
}

/// Redirects the CALL at `site` through a JMP into a fresh section holding the
/// original CALL, k semantic NOPs and a JMP back. `max_bytes` of 0 means no cap.
inline SyntheticBinary apply_patch(const SyntheticBinary& bin, std::uint64_t site, std::uint64_t nop_seed,
                                   NopRange range = {}, std::uint64_t max_bytes = 0) {
  if (range.lo > range.hi) throw ValidationError("apply_patch: empty nop_count_range");
  auto loc = locate(bin, site);
  if (!loc || bin.sections[loc->section].code[loc->index].op != Op::Call)
    throw ValidationError("apply_patch: no CALL at " + hex64(site));

  SyntheticBinary out = bin;
  Instruction& call = out.sections[loc->section].code[loc->index];
  std::uint64_t base = (bin.end_address() + kSectionAlign - 1) / kSectionAlign * kSectionAlign;
  if (base + 0x1000 > 0xFFFFFFFFull) throw ValidationError("apply_patch: address space exhausted");

  Rng rng(nop_seed);
  auto k = static_cast<std::uint32_t>(rng.range(range.lo, range.hi));
  Section added{".patch" + std::to_string(bin.sections.size()), base, {call}};
  for (auto& i : semantic_nops(rng, k)) added.code.push_back(i);
  added.code.push_back(Instruction::jmp(static_cast<std::uint32_t>(site + width(Op::Call))));

  call = Instruction::jmp(static_cast<std::uint32_t>(base));
  out.sections.push_back(std::move(added));
  if (max_bytes && out.byte_length() > max_bytes)
    throw ValidationError("apply_patch: patched size " + std::to_string(out.byte_length()) + " exceeds cap " +
                          std::to_string(max_bytes));
  return out;
}

// ---- features ----

inline constexpr std::size_t kTokenClasses = 16;
inline constexpr std::size_t kWindows = 16;
inline constexpr std::uint64_t kWindowBytes = 192;
// Near zero one instruction moves a bin by 1/64, about 4/255, so an 8/255 ball spans roughly two.
inline constexpr double kSaturation = 64.0;
// The last window holds every section after the first. Those sections are short, so
// it saturates much sooner: one added instruction moves a bin by 0.2.
inline constexpr double kSectionSaturation = 4.0;

/// Coarse (opcode, operand) bucket of an instruction at address `addr`.
inline std::size_t token_class(const Instruction& i, std::uint64_t addr) {
  switch (i.op) {
    case Op::Call: return i.target > addr ? 0 : 1;
    case Op::Jmp: return i.target > addr ? 2 : 3;
    case Op::Ret: return 4;
    case Op::Push: return i.a < 4 ? 5 : 6;
    case Op::Pop: return i.a < 4 ? 7 : 8;
    case Op::Mov: return i.a == i.b ? 9 : 10;
    case Op::Nop: return 11;
    case Op::Out: return i.reg_operand ? 14 : (i.a < 128 ? 12 : 13);
    case Op::Halt: return 15;
  }
  return 15;
}

/// Window of an address in the first section; its tail folds into window kWindows-2.
inline std::size_t window_of(std::uint64_t addr, std::uint64_t text_base) {
  return static_cast<std::size_t>(std::min<std::uint64_t>((addr - text_base) / kWindowBytes, kWindows - 2));
}

/// Raw (window, class) counts, window-major. Windows 0..14 cover the first section,
/// window 15 pools all later sections.
inline std::vector<std::uint32_t> feature_counts(const SyntheticBinary& bin) {
  std::vector<std::uint32_t> counts(kFeatureDim, 0);
  if (bin.sections.empty()) return counts;
  const std::uint64_t text_base = bin.sections.front().base;
  for (std::size_t s = 0; s < bin.sections.size(); ++s) {
    const auto& sec = bin.sections[s];
    std::uint64_t a = sec.base;
    for (const auto& i : sec.code) {
      const std::size_t w = s == 0 ? window_of(a, text_base) : kWindows - 1;
      counts[w * kTokenClasses + token_class(i, a)] += 1;
      a += i.size();
    }
  }
  return counts;
}

inline double saturation_of(std::size_t bin) {
  return bin / kTokenClasses == kWindows - 1 ? kSectionSaturation : kSaturation;
}

/// Windowed token histogram, each count c squashed to c / (c + kappa) with kappa from
/// saturation_of, so values lie in [0, 1).
inline std::vector<double> features(const SyntheticBinary& bin) {
  auto counts = feature_counts(bin);
  std::vector<double> f(kFeatureDim);
  for (std::size_t k = 0; k < kFeatureDim; ++k) f[k] = counts[k] / (counts[k] + saturation_of(k));
  return f;
}

// ---- serialization ----

inline constexpr std::uint32_t kBinaryVersion = 1;

inline std::vector<std::uint8_t> binary_to_bytes(const SyntheticBinary& bin) {
  ByteWriter w;
  w.bytes("RDSB", 4);
  w.u32(kBinaryVersion);
  w.u64(bin.entry);
  w.u32(static_cast<std::uint32_t>(bin.sections.size()));
  std::vector<std::uint8_t> code;
  for (const auto& s : bin.sections) {
    w.str(s.name);
    w.u64(s.base);
    code.clear();
    for (const auto& i : s.code) encode(i, code);
    w.u32(static_cast<std::uint32_t>(code.size()));
    w.bytes(code.data(), code.size());
  }
  w.seal();
  return w.take();
}

inline SyntheticBinary binary_from_bytes(const std::vector<std::uint8_t>& buf) {
  ByteReader r(buf, "synbin");
  r.verify_seal();
  r.expect_magic("RDSB");
  if (auto v = r.u32(); v != kBinaryVersion) throw FormatError("synbin: unsupported version " + std::to_string(v));
  SyntheticBinary bin;
  bin.entry = r.u64();
  auto n = r.u32();
  for (std::uint32_t k = 0; k < n; ++k) {
    Section s;
    s.name = r.str();
    s.base = r.u64();
    auto len = r.u32();
    std::vector<std::uint8_t> code(len);
    for (auto& b : code) b = r.u8();
    for (std::size_t pos = 0; pos < code.size();) s.code.push_back(decode(code, pos));
    bin.sections.push_back(std::move(s));
  }
  if (r.remaining() != 8) throw FormatError("synbin: trailing bytes");
  return bin;
}

inline void save_binary(const std::string& path, const SyntheticBinary& bin) { write_file(path, binary_to_bytes(bin)); }
inline SyntheticBinary load_binary(const std::string& path) { return binary_from_bytes(read_file(path)); }

// ---- corpus manifest ----

struct ManifestRow {
  std::uint64_t id_hash = 0;
  std::string month;
  int family = -1;  // -1 for benign
  int label = 0;
  std::uint64_t byte_length = 0;

  bool operator==(const ManifestRow&) const = default;
};

inline std::string manifest_csv(const std::vector<ManifestRow>& rows) {
  std::string out = "id_hash,month,family,label,byte_length\n";
  for (const auto& r : rows)
    out += csv::join({hex64(r.id_hash), r.month, std::to_string(r.family), std::to_string(r.label),
                      std::to_string(r.byte_length)}) +
           "\n";
  return out;
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  auto t = csv::read(path);
  auto ci = t.column("id_hash"), cm = t.column("month"), cf = t.column("family"), cl = t.column("label"),
       cb = t.column("byte_length");
  std::vector<ManifestRow> rows;
  try {
    for (const auto& row : t.rows)
      rows.push_back({std::stoull(row.at(ci), nullptr, 16), row.at(cm), std::stoi(row.at(cf)), std::stoi(row.at(cl)),
                      std::stoull(row.at(cb))});
  } catch (const std::logic_error&) {
    throw FormatError("manifest: malformed row in " + path);
  }
  return rows;
}

}  // namespace robustda
