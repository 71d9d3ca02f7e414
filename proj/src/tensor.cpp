#include "magma/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "magma/error.hpp"

namespace magma {

namespace {

thread_local Tape* g_active_tape = nullptr;

#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (magma::numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(magma::numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  if (finite_checks_enabled()) {
    for (double v : impl_->data) {
      if (!std::isfinite(v)) throw NonFiniteError("non-finite value in tensor construction");
    }
  }
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, std::vector<double>(magma::numel(shape), 0.0), requires_grad);
}

Tensor Tensor::ones(const Shape& shape, bool requires_grad) { return full(shape, 1.0, requires_grad); }

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(magma::numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(d));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::span<double> Tensor::mutable_data() {
  if (!impl_->inputs.empty()) throw ContractError("mutable_data() on a recorded op result");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw DimensionError("at(i, j) needs a matrix, got " + shape_str(shape()));
  return impl_->data[i * impl_->shape[1] + j];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(const TensorImpl&)> backward, const char* op) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  if (finite_checks_enabled()) {
    for (double v : impl->data) {
      if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite output from op '") + op + "'");
    }
  }
  Tape* tape = Tape::active();
  if (tape != nullptr && backward) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || (t->defined() && t->requires_grad());
    if (any) {
      impl->requires_grad = true;
      for (const Tensor* t : inputs) {
        if (t->defined()) impl->inputs.push_back(t->impl());
      }
      impl->backward = std::move(backward);
      tape->record(impl);
    }
  }
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------- Tape

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const std::shared_ptr<TensorImpl>& node) {
  node->tape = this;
  node->tape_index = nodes_.size();
  nodes_.push_back(node);
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined tensor")));
  }
  TensorImpl& root = *loss.impl();
  if (!root.requires_grad) throw ContractError("backward() on a loss that does not require grad");
  if (root.tape == nullptr) {
    root.grad_buffer()[0] += 1.0;
    return;
  }
  if (root.tape != this) throw ContractError("backward() on a loss recorded by another tape");

  for (const auto& node : nodes_) node->grad.assign(node->data.size(), 0.0);
  root.grad[0] = 1.0;
  for (std::size_t i = root.tape_index + 1; i-- > 0;) {
    const TensorImpl& node = *nodes_[i];
    node.backward(node);
  }
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

}  // namespace magma
