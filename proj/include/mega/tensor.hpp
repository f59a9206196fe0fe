#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations record their
// inputs and a backward closure when any input requires a gradient, so the
// graph is rebuilt every training step and discarded with its last handle.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mega {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size() const;
  std::span<const double> data() const;
  double operator[](std::size_t i) const { return data()[i]; }
  double item() const;

  // Only leaves may be written in place (parameters, gradient-check inputs).
  std::span<double> mutable_data();

  bool requires_grad() const;
  bool is_leaf() const;
  const char* op() const;

  // Empty span until a backward pass has reached this tensor.
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  // Same values, cut from the graph.
  Tensor detach() const;

  // Accumulates d(*this)/d(leaf) into every reachable leaf that requires a
  // gradient. Intermediate gradients are reset first, leaf gradients add up
  // across calls.
  void backward() const;

  // Internal: used by op implementations.
  static Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                            std::vector<Tensor> inputs,
                            std::function<void(const detail::Node&)> backward_fn);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// While alive, operations on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Elementwise arithmetic (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
// s - x
Tensor rsub_scalar(double s, const Tensor& x);
Tensor square(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// max(x, floor) elementwise; gradient passes where x > floor.
Tensor clamp_min(const Tensor& x, double floor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Euclidean norm along `axis`, which is removed from the shape. The gradient
// at an exactly-zero vector is taken as zero.
Tensor l2_norm(const Tensor& x, std::size_t axis);
// Each row of a matrix divided by its Euclidean norm; rows with norm below
// kCosineEps become zero and pass no gradient.
Tensor normalize_rows(const Tensor& x);

// Shape manipulation.
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // rank 2 only
Tensor matmul(const Tensor& a, const Tensor& b);
// Rows of a rank-2 tensor, in the given order (repeats allowed).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Channel vectors of a C×H×W map at locations where mask (H×W) is nonzero,
// in row-major location order, as an N×C matrix.
Tensor masked_select(const Tensor& map, std::span<const double> mask);
// C×H×W map times an H×W mask broadcast over channels. The mask is a constant.
Tensor mask_multiply(const Tensor& map, std::span<const double> mask);

// Softmax along `axis`, stabilized by max-subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);
// Mean softmax cross-entropy of N×classes logits against integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

// Same-padded, stride-1 cross-correlation. x: C_in×H×W, kernel:
// C_out×C_in×k×k with k ∈ {1, 3}; bias (optional): C_out.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias = {});

// Per-location cosine similarity of two C×H×W maps, giving H×W. Locations
// where either vector has norm below kCosineEps yield 0.
inline constexpr double kCosineEps = 1e-12;
Tensor cosine_map(const Tensor& a, const Tensor& b);

// Gradient reversal: identity forward, multiplies the upstream gradient by
// -coeff on the way back.
Tensor grl(const Tensor& x, double coeff = 1.0);

// Central finite-difference gradient check of a scalar function against
// backward(). Each input must be a leaf; its values are perturbed in place
// and restored. The reported error per input is
// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12).
struct GradCheckResult {
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
};
GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                std::span<Tensor> inputs, double h = 1e-5);

}  // namespace mega
