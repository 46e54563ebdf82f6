#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "robustda/bytes.hpp"
#include "robustda/diffcore.hpp"

namespace robustda {

inline constexpr int kBenign = 0;
inline constexpr int kMalware = 1;
inline constexpr int kSourceDomain = 0;
inline constexpr int kTargetDomain = 1;

/// Widths of the three networks: g is F->H->E, f is E->C->2, d is E->D->2.
struct Dims {
  std::size_t F = 256;
  std::size_t H = 128;
  std::size_t E = 64;
  std::size_t C = 32;
  std::size_t D = 128;

  bool operator==(const Dims&) const = default;
};

inline GraphSpec generator_graph(const Dims& d) {
  return GraphSpec{d.F, {DenseLayer{d.F, d.H}, ReluLayer{}, DenseLayer{d.H, d.E}, ReluLayer{}}};
}

inline GraphSpec classifier_graph(const Dims& d) {
  return GraphSpec{d.E, {DenseLayer{d.E, d.C}, ReluLayer{}, DropoutLayer{0.5}, DenseLayer{d.C, 2}}};
}

inline GraphSpec discriminator_graph(const Dims& d) {
  return GraphSpec{d.E, {DenseLayer{d.E, d.D}, ReluLayer{}, DenseLayer{d.D, 2}}};
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
inline ParamSet init_params(const GraphSpec& graph, std::uint64_t seed) {
  Rng rng(seed);
  ParamSet p;
  for (const auto& l : graph.layers)
    if (auto* d = std::get_if<DenseLayer>(&l)) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(d->in));
      Tensor w({d->in, d->out});
      for (double& v : w.data) v = rng.uniform(-bound, bound);
      p.push_back(std::move(w));
      p.emplace_back(std::vector<std::size_t>{d->out}, 0.0);
    }
  return p;
}

struct ModelBundle {
  Dims dims;
  std::uint64_t seed = 0;
  ParamSet g;
  ParamSet f;
  ParamSet d;

  GraphSpec g_graph() const { return generator_graph(dims); }
  GraphSpec f_graph() const { return classifier_graph(dims); }
  GraphSpec d_graph() const { return discriminator_graph(dims); }

  void check() const {
    if (!dims.F || !dims.H || !dims.E || !dims.C || !dims.D) throw ValidationError("bundle: dims must be positive");
    g_graph().check_params(g);
    f_graph().check_params(f);
    d_graph().check_params(d);
  }
};

inline ParamSet fresh_discriminator(const Dims& dims, std::uint64_t seed) {
  return init_params(discriminator_graph(dims), derive_seed(seed, "init.d"));
}

inline ModelBundle init_bundle(const Dims& dims, std::uint64_t seed) {
  if (!dims.F || !dims.H || !dims.E || !dims.C || !dims.D) throw ValidationError("bundle: dims must be positive");
  ModelBundle b;
  b.dims = dims;
  b.seed = seed;
  b.g = init_params(b.g_graph(), derive_seed(seed, "init.g"));
  b.f = init_params(b.f_graph(), derive_seed(seed, "init.f"));
  b.d = fresh_discriminator(dims, seed);
  return b;
}

struct Score {
  double malware_probability = 0.0;
};

inline Tensor embed(const ModelBundle& b, const Tensor& x) { return infer(b.g_graph(), b.g, x); }

/// Classifier logits of f(g(x)) in eval mode.
inline Tensor class_logits(const ModelBundle& b, const Tensor& x) {
  return infer(b.f_graph(), b.f, embed(b, x));
}

/// Malware probability for every row of x.
inline std::vector<double> score_batch(const ModelBundle& b, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != b.dims.F)
    throw ShapeError("score: input " + shape_str(x.shape) + " does not have width " + std::to_string(b.dims.F));
  Tensor p = ops::softmax(class_logits(b, x));
  std::vector<double> out(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) out[r] = p.at(r, kMalware);
  return out;
}

inline Score score(const ModelBundle& b, const std::vector<double>& x) {
  if (x.size() != b.dims.F)
    throw ShapeError("score: input has " + std::to_string(x.size()) + " features, expected " + std::to_string(b.dims.F));
  return Score{score_batch(b, Tensor::row(x))[0]};
}

/// Domain logits of d over embeddings (class 0 = source, 1 = target).
inline Tensor discriminate(const ModelBundle& b, const Tensor& embedding) {
  if (embedding.rank() != 2 || embedding.cols() != b.dims.E)
    throw ShapeError("discriminate: embedding " + shape_str(embedding.shape) + " does not have width " +
                     std::to_string(b.dims.E));
  return infer(b.d_graph(), b.d, embedding);
}

// Bundle file: "RDAB", u32 version, five u64 dims, u64 seed, then every
// parameter of g, f, d as little-endian f64 in declaration order, then an
// FNV-1a checksum of all preceding bytes.
inline constexpr std::uint32_t kBundleVersion = 1;

inline std::vector<std::uint8_t> bundle_to_bytes(const ModelBundle& b) {
  b.check();
  ByteWriter w;
  w.bytes("RDAB", 4);
  w.u32(kBundleVersion);
  for (auto v : {b.dims.F, b.dims.H, b.dims.E, b.dims.C, b.dims.D}) w.u64(v);
  w.u64(b.seed);
  for (const ParamSet* set : {&b.g, &b.f, &b.d})
    for (const auto& t : *set)
      for (double v : t.data) w.f64(v);
  w.seal();
  return w.take();
}

inline ModelBundle bundle_from_bytes(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "bundle");
  r.verify_seal();
  r.expect_magic("RDAB");
  if (auto v = r.u32(); v != kBundleVersion) throw FormatError("bundle: unsupported version " + std::to_string(v));
  ModelBundle b;
  b.dims.F = r.u64();
  b.dims.H = r.u64();
  b.dims.E = r.u64();
  b.dims.C = r.u64();
  b.dims.D = r.u64();
  if (!b.dims.F || !b.dims.H || !b.dims.E || !b.dims.C || !b.dims.D || b.dims.F > (1u << 20) ||
      b.dims.H > (1u << 20) || b.dims.E > (1u << 20) || b.dims.C > (1u << 20) || b.dims.D > (1u << 20))
    throw FormatError("bundle: implausible dims");
  b.seed = r.u64();
  auto fill = [&](const GraphSpec& g, ParamSet& set) {
    set = init_params(g, 0);
    for (auto& t : set)
      for (double& v : t.data) v = r.f64();
  };
  fill(b.g_graph(), b.g);
  fill(b.f_graph(), b.f);
  fill(b.d_graph(), b.d);
  if (r.remaining() != 8) throw FormatError("bundle: trailing bytes");
  return b;
}

inline void save_bundle(const ModelBundle& b, const std::string& path) { write_file(path, bundle_to_bytes(b)); }
inline ModelBundle load_bundle(const std::string& path) { return bundle_from_bytes(read_file(path)); }

}  // namespace robustda
