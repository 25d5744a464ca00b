#pragma once

// Minimal reverse-mode differentiable array engine.
//
// Every op builds a node holding its forward value and a closure that pushes
// the output gradient into its parents. Gradients accumulate (+=) into leaves
// until zero_grad(); intermediate gradients are reset at the start of each
// backward pass. Values are 64-bit throughout.
//
// Broadcasting is deliberately narrow: add/sub/mul accept equal shapes, a
// scalar (one element) right operand, or a right operand whose shape is a
// suffix of the left shape (leading-axis broadcast). broadcast_mul accepts a
// same-rank right operand whose extents are either equal or 1. Anything else
// throws ShapeError.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lacap::diff {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  ShapeError(const std::string& op, const std::string& what);
};

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
  bool backward_done = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad();
};

class DiffArray {
 public:
  DiffArray() = default;
  explicit DiffArray(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static DiffArray zeros(Shape shape, bool requires_grad = false);
  static DiffArray full(Shape shape, double value, bool requires_grad = false);
  static DiffArray from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static DiffArray scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::uint64_t node_id() const;

  std::span<const double> data() const;
  // Write access for leaves (parameters, inputs). Mutating a value that has
  // already been consumed by an op invalidates that op's backward.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Root must hold exactly one element. A second call on the same root
  // without zero_grad() throws.
  void backward();

  DiffArray detach() const;
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph construction for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Re-enables graph construction inside a NoGradGuard scope.
class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- primitives ------------------------------------------------------------

DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray scale(const DiffArray& a, double factor);
DiffArray add_scalar(const DiffArray& a, double value);
DiffArray broadcast_mul(const DiffArray& a, const DiffArray& b);

// [M,K]x[K,N], [B,M,K]x[K,N] (leading-axis broadcast of b), [B,M,K]x[B,K,N].
// transpose_b treats the last two axes of b as swapped.
DiffArray matmul(const DiffArray& a, const DiffArray& b, bool transpose_b = false);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;  // symmetric zero padding on both spatial axes
};

// x: [N,C,H,W], weight: [F,C,KH,KW], bias: [F] or undefined.
DiffArray conv2d(const DiffArray& x, const DiffArray& weight, const DiffArray& bias,
                 Conv2dOptions options = {});
DiffArray max_pool2d(const DiffArray& x, std::size_t kernel, std::size_t stride);
DiffArray avg_pool2d(const DiffArray& x, std::size_t kernel, std::size_t stride);
// [N,C,H,W] -> [N,C,1,1]
DiffArray global_avg_pool2d(const DiffArray& x);
DiffArray global_max_pool2d(const DiffArray& x);

DiffArray relu(const DiffArray& x);
DiffArray sigmoid(const DiffArray& x);
DiffArray softmax(const DiffArray& x, std::size_t axis);
// Normalizes to zero mean / unit variance along `axis` (no affine terms).
DiffArray layer_norm(const DiffArray& x, std::size_t axis, double eps = 1e-5);

// table: [V,D]; result [ids.size(), D]
DiffArray embedding_lookup(const DiffArray& table, std::span<const int> ids);
DiffArray concat(const std::vector<DiffArray>& parts, std::size_t axis);
DiffArray reshape(const DiffArray& x, Shape shape);
DiffArray permute(const DiffArray& x, const std::vector<std::size_t>& axes);

// Keeps the reduced axis with extent 1.
DiffArray mean_axis(const DiffArray& x, std::size_t axis);
DiffArray max_axis(const DiffArray& x, std::size_t axis);
DiffArray reduce_mean(const DiffArray& x);
DiffArray reduce_sum(const DiffArray& x);

// logits: [N,K]. Returns [N] with logits[i, index[i]].
DiffArray pick(const DiffArray& logits, std::span<const int> index);

// Mean negative log-likelihood over rows whose target != ignore_index.
DiffArray cross_entropy(const DiffArray& logits, std::span<const int> targets,
                        int ignore_index = -1);
DiffArray cross_entropy(const DiffArray& logits, int target);

// Builds an op from a precomputed value and a backward closure. The closure
// receives the output node; parent gradients are preallocated for every
// parent with requires_grad set.
DiffArray custom_op(Shape shape, std::vector<double> data, std::vector<DiffArray> parents,
                    std::function<void(Node&)> backward_fn);

// ---- finite-difference oracle ---------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = false;
  std::string diagnostic;
};

using ScalarFn = std::function<DiffArray(const DiffArray&)>;

// Central differences (f(x+h) - f(x-h)) / 2h per element. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
GradCheckReport grad_check(const ScalarFn& f, const DiffArray& x, double h, double tol);

}  // namespace lacap::diff
