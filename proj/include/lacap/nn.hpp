#pragma once

// Named parameters, seeded initialization and the small layers shared by the
// encoder, attention and captioner modules.

#include "lacap/diff.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace lacap::nn {

using diff::DiffArray;
using diff::Shape;

// Stream for one named module: init never depends on construction order.
std::mt19937_64 module_rng(std::uint64_t seed, const std::string& name);

class Parameters {
 public:
  // Normal(0, stddev) values drawn from module_rng(seed, name).
  DiffArray& add_normal(const std::string& name, Shape shape, double stddev, std::uint64_t seed);
  DiffArray& add_constant(const std::string& name, Shape shape, double value);
  // Registers an existing tensor under a second name (shared weights).
  void alias(const std::string& name, const DiffArray& tensor);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  DiffArray& at(const std::string& name);
  const DiffArray& at(const std::string& name) const;
  const std::map<std::string, DiffArray>& tensors() const { return tensors_; }

  // Frozen tensors keep requires_grad off and are skipped by optimizers.
  void freeze(const std::string& name);
  bool frozen(const std::string& name) const { return frozen_.count(name) != 0; }
  std::vector<std::string> trainable_names() const;

  std::size_t count() const;
  void zero_grad();

 private:
  DiffArray& insert(const std::string& name, DiffArray tensor);

  std::map<std::string, DiffArray> tensors_;
  std::set<std::string> frozen_;
};

// y = x W + b over the last axis; W: [in, out].
struct Linear {
  DiffArray weight;
  DiffArray bias;

  static Linear create(Parameters& params, const std::string& name, std::size_t in, std::size_t out,
                       std::uint64_t seed, bool with_bias = true);
  DiffArray operator()(const DiffArray& x) const;
};

// Layer norm over the last axis with learned gain and shift.
struct LayerNorm {
  DiffArray gain;
  DiffArray shift;

  static LayerNorm create(Parameters& params, const std::string& name, std::size_t dim);
  DiffArray operator()(const DiffArray& x) const;
};

struct Conv {
  DiffArray weight;
  DiffArray bias;
  std::size_t padding = 0;

  // He fan-in initialization.
  static Conv create(Parameters& params, const std::string& name, std::size_t in, std::size_t out,
                     std::size_t kernel, std::uint64_t seed);
  DiffArray operator()(const DiffArray& x) const;
};

// Multi-head attention. Query [N,T,D], memory [N,S,D].
struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  static MultiHeadAttention create(Parameters& params, const std::string& name, std::size_t dim,
                                   std::size_t heads, std::uint64_t seed);
  // Projected keys/values in head layout [N*heads, S, D/heads].
  struct KeyValue {
    DiffArray keys;
    DiffArray values;
  };
  KeyValue project_memory(const DiffArray& memory) const;
  DiffArray operator()(const DiffArray& query, const KeyValue& kv, bool causal) const;
  DiffArray operator()(const DiffArray& query, const DiffArray& memory, bool causal) const;
  // Row-stochastic attention weights [N*heads, T, S], for inspection.
  DiffArray weights(const DiffArray& query, const KeyValue& kv, bool causal) const;
};

struct FeedForward {
  Linear in, out;

  static FeedForward create(Parameters& params, const std::string& name, std::size_t dim, std::size_t hidden,
                            std::uint64_t seed);
  DiffArray operator()(const DiffArray& x) const;
};

// [length, dim] sinusoidal table.
DiffArray sinusoidal_1d(std::size_t length, std::size_t dim);
// [height*width, dim]: first half encodes the row, second half the column.
DiffArray sinusoidal_2d(std::size_t height, std::size_t width, std::size_t dim);

// Bilinear resampling (half-pixel centres) of a row-major single-channel map.
std::vector<double> resize_map(std::span<const double> map, std::size_t height, std::size_t width,
                               std::size_t out_height, std::size_t out_width);

}  // namespace lacap::nn
