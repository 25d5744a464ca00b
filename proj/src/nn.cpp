#include "lacap/nn.hpp"

#include "lacap/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lacap::nn {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::mt19937_64 module_rng(std::uint64_t seed, const std::string& name) {
  return std::mt19937_64(splitmix64(seed ^ fnv1a(name)));
}

DiffArray& Parameters::insert(const std::string& name, DiffArray tensor) {
  if (tensors_.count(name)) throw std::invalid_argument("parameter registered twice: " + name);
  return tensors_[name] = std::move(tensor);
}

DiffArray& Parameters::add_normal(const std::string& name, Shape shape, double stddev, std::uint64_t seed) {
  auto rng = module_rng(seed, name);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(diff::shape_size(shape));
  for (auto& v : values) v = dist(rng);
  return insert(name, DiffArray::from(std::move(shape), std::move(values), true));
}

DiffArray& Parameters::add_constant(const std::string& name, Shape shape, double value) {
  return insert(name, DiffArray::full(std::move(shape), value, true));
}

void Parameters::alias(const std::string& name, const DiffArray& tensor) { insert(name, tensor); }

DiffArray& Parameters::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const DiffArray& Parameters::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void Parameters::freeze(const std::string& name) {
  at(name).set_requires_grad(false);
  frozen_.insert(name);
}

std::vector<std::string> Parameters::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : tensors_) {
    if (!frozen_.count(name)) out.push_back(name);
  }
  return out;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  std::set<const diff::Node*> seen;
  for (const auto& [name, t] : tensors_) {
    if (seen.insert(t.node()).second) n += t.size();
  }
  return n;
}

void Parameters::zero_grad() {
  for (auto& [name, t] : tensors_) t.zero_grad();
}

Linear Linear::create(Parameters& params, const std::string& name, std::size_t in, std::size_t out,
                      std::uint64_t seed, bool with_bias) {
  Linear l;
  l.weight = params.add_normal(name + ".weight", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), seed);
  if (with_bias) l.bias = params.add_constant(name + ".bias", {out}, 0.0);
  return l;
}

DiffArray Linear::operator()(const DiffArray& x) const {
  DiffArray y;
  if (x.rank() <= 3) {
    y = diff::matmul(x, weight);
  } else {
    Shape flat = {x.size() / x.shape().back(), x.shape().back()};
    Shape out = x.shape();
    out.back() = weight.dim(1);
    y = diff::reshape(diff::matmul(diff::reshape(x, flat), weight), out);
  }
  return bias.defined() ? diff::add(y, bias) : y;
}

LayerNorm LayerNorm::create(Parameters& params, const std::string& name, std::size_t dim) {
  return {params.add_constant(name + ".gain", {dim}, 1.0), params.add_constant(name + ".shift", {dim}, 0.0)};
}

DiffArray LayerNorm::operator()(const DiffArray& x) const {
  return diff::add(diff::mul(diff::layer_norm(x, x.rank() - 1), gain), shift);
}

Conv Conv::create(Parameters& params, const std::string& name, std::size_t in, std::size_t out,
                  std::size_t kernel, std::uint64_t seed) {
  Conv c;
  const double fan_in = static_cast<double>(in * kernel * kernel);
  c.weight = params.add_normal(name + ".weight", {out, in, kernel, kernel}, std::sqrt(2.0 / fan_in), seed);
  c.bias = params.add_constant(name + ".bias", {out}, 0.0);
  c.padding = kernel / 2;
  return c;
}

DiffArray Conv::operator()(const DiffArray& x) const {
  return diff::conv2d(x, weight, bias, {.stride = 1, .padding = padding});
}

MultiHeadAttention MultiHeadAttention::create(Parameters& params, const std::string& name, std::size_t dim,
                                              std::size_t heads, std::uint64_t seed) {
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("attention: dim must be divisible by heads");
  MultiHeadAttention a;
  a.q = Linear::create(params, name + ".q", dim, dim, seed);
  a.k = Linear::create(params, name + ".k", dim, dim, seed);
  a.v = Linear::create(params, name + ".v", dim, dim, seed);
  a.o = Linear::create(params, name + ".o", dim, dim, seed);
  a.heads = heads;
  return a;
}

namespace {

// [N,T,D] -> [N*H,T,D/H]
DiffArray split_heads(const DiffArray& x, std::size_t heads) {
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  auto y = diff::permute(diff::reshape(x, {n, t, heads, d / heads}), {0, 2, 1, 3});
  return diff::reshape(y, {n * heads, t, d / heads});
}

DiffArray merge_heads(const DiffArray& x, std::size_t heads) {
  const std::size_t nh = x.dim(0), t = x.dim(1), dh = x.dim(2);
  auto y = diff::permute(diff::reshape(x, {nh / heads, heads, t, dh}), {0, 2, 1, 3});
  return diff::reshape(y, {nh / heads, t, heads * dh});
}

}  // namespace

MultiHeadAttention::KeyValue MultiHeadAttention::project_memory(const DiffArray& memory) const {
  return {split_heads(k(memory), heads), split_heads(v(memory), heads)};
}

DiffArray MultiHeadAttention::weights(const DiffArray& query, const KeyValue& kv, bool causal) const {
  const std::size_t t = query.dim(1), s = kv.keys.dim(1);
  const std::size_t dh = kv.keys.dim(2);
  auto scores = diff::scale(diff::matmul(split_heads(q(query), heads), kv.keys, true),
                            1.0 / std::sqrt(static_cast<double>(dh)));
  if (causal) {
    if (t > s) throw diff::ShapeError("attention", "causal query longer than memory");
    // Query i sits at memory position s - t + i.
    std::vector<double> mask(t * s, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = s - t + i + 1; j < s; ++j) mask[i * s + j] = -1e30;
    }
    scores = diff::add(scores, DiffArray::from({t, s}, std::move(mask)));
  }
  return diff::softmax(scores, 2);
}

DiffArray MultiHeadAttention::operator()(const DiffArray& query, const KeyValue& kv, bool causal) const {
  return o(merge_heads(diff::matmul(weights(query, kv, causal), kv.values), heads));
}

DiffArray MultiHeadAttention::operator()(const DiffArray& query, const DiffArray& memory, bool causal) const {
  return (*this)(query, project_memory(memory), causal);
}

FeedForward FeedForward::create(Parameters& params, const std::string& name, std::size_t dim, std::size_t hidden,
                                std::uint64_t seed) {
  return {Linear::create(params, name + ".in", dim, hidden, seed),
          Linear::create(params, name + ".out", hidden, dim, seed)};
}

DiffArray FeedForward::operator()(const DiffArray& x) const { return out(diff::relu(in(x))); }

namespace {

void fill_sinusoid(double position, std::size_t dim, double* out) {
  for (std::size_t i = 0; i < dim; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    out[i] = i % 2 == 0 ? std::sin(position * freq) : std::cos(position * freq);
  }
}

}  // namespace

DiffArray sinusoidal_1d(std::size_t length, std::size_t dim) {
  std::vector<double> v(length * dim);
  for (std::size_t p = 0; p < length; ++p) fill_sinusoid(static_cast<double>(p), dim, &v[p * dim]);
  return DiffArray::from({length, dim}, std::move(v));
}

DiffArray sinusoidal_2d(std::size_t height, std::size_t width, std::size_t dim) {
  if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_2d: dim must be even");
  const std::size_t half = dim / 2;
  std::vector<double> v(height * width * dim);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double* row = &v[(y * width + x) * dim];
      fill_sinusoid(static_cast<double>(y), half, row);
      fill_sinusoid(static_cast<double>(x), half, row + half);
    }
  }
  return DiffArray::from({height * width, dim}, std::move(v));
}

std::vector<double> resize_map(std::span<const double> map, std::size_t height, std::size_t width,
                               std::size_t out_height, std::size_t out_width) {
  if (map.size() != height * width) throw std::invalid_argument("resize_map: size mismatch");
  Tensor3 t{1, height, width, std::vector<double>(map.begin(), map.end())};
  return resize_bilinear(t, out_height, out_width).values;
}

}  // namespace lacap::nn
