#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace magma {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Storage and graph node behind a Tensor handle. Graph fields are only
// populated for results recorded on an active Tape.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(const TensorImpl&)> backward;
  const Tape* tape = nullptr;
  std::size_t tape_index = 0;
  const char* op = "leaf";

  // Zero-initialized gradient buffer of matching length.
  std::vector<double>& grad_buffer();
};

// Dense row-major f64 tensor. A cheap handle: copies share the same node.
// Values are immutable after creation except through mutable_data() on
// leaves (parameter updates) and gradient accumulation.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor ones(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor eye(std::size_t n);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Leaf tensors only; recorded results are immutable.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return impl_->data[flat_index]; }
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  // Accumulated gradient; empty span when none has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();

  // Same values, no graph history, no gradient requirement.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::initializer_list<const Tensor*>,
                            std::function<void(const TensorImpl&)>, const char*);

  std::shared_ptr<TensorImpl> impl_;
};

// Records differentiable operations while alive (one active tape per
// thread; construction pushes, destruction pops). Single-owner: do not share
// across threads. Operations executed without an active tape are not
// recorded and behave as inference.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Accumulates d(loss)/d(leaf) into every leaf that requires grad.
  // Intermediate gradients are reset on each call; leaf gradients add up.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void record(const std::shared_ptr<TensorImpl>& node);

 private:
  std::vector<std::shared_ptr<TensorImpl>> nodes_;
  Tape* previous_ = nullptr;
};

// Suspends recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// NaN/Inf checks at op boundaries. On by default in debug builds.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// Builds an op result; records it on the active tape when any input
// requires grad. Exposed for ops defined outside tensor_ops.cpp.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(const TensorImpl&)> backward, const char* op);

// ---- elementwise (equal shapes, or either operand a one-element tensor)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor reciprocal(const Tensor& x);

// ---- linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N]
Tensor bmm(const Tensor& a, const Tensor& b);     // [G,M,K]x[G,K,N]
Tensor transpose(const Tensor& x);                // swaps the last two axes (rank 2 or 3)
Tensor mul_rows(const Tensor& x, const Tensor& v);  // x[R,C] * v[R] per row
Tensor mul_cols(const Tensor& x, const Tensor& v);  // x[R,C] * v[C] per column
Tensor diag(const Tensor& v);                       // v[n] -> [n,n]

// ---- shape
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
// x[B,T,D], index[b] lists token positions -> [B,T',D]; backward scatter-adds.
Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<std::size_t>>& index);
// Tiles along a new leading extent: x[1,...] -> [n,...].
Tensor repeat_batch(const Tensor& x, std::size_t n);

// ---- reductions (deterministic left-to-right accumulation)
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor max(const Tensor& x, const std::vector<std::size_t>& axes);

// ---- neural-network primitives
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
Tensor gelu(const Tensor& x);  // tanh approximation
// x[..., in], weight[out, in], bias[out] (bias may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Mean softmax cross-entropy of logits[N,C] against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// Squared Euclidean distances between rows of z[B,D], computed as
// sum((z_i - z_j)^2); symmetric with an exactly-zero diagonal.
Tensor pairwise_sq_dists(const Tensor& z);

}  // namespace magma
