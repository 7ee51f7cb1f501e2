#include "t2r/tensor.h"

#include <algorithm>
#include <sstream>

#include "t2r/errors.h"

namespace t2r {

std::size_t NumElements(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace internal {

std::vector<double>& TensorImpl::EnsureGrad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace internal

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<internal::TensorImpl>()) {
  if (NumElements(shape) != data.size()) {
    throw DimensionError("tensor shape " + ShapeToString(shape) + " holds " +
                         std::to_string(NumElements(shape)) + " elements, got " +
                         std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::Zeros(Shape shape, bool requires_grad) {
  return Full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::Full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = NumElements(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::Scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return impl_ ? impl_->shape : kEmpty;
}

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         ShapeToString(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() needs a single-element tensor, got " + ShapeToString(shape()));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() { return impl_->EnsureGrad(); }

void Tensor::ZeroGrad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::Clone() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

Tape& Tape::Current() {
  thread_local Tape tape;
  return tape;
}

void Tape::Record(const std::shared_ptr<internal::TensorImpl>& out, BackwardFn fn) {
  out->requires_grad = true;
  entries_.push_back({out, std::move(fn)});
}

void Tape::Clear() { entries_.clear(); }

void Tape::Backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        ShapeToString(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() called on a loss that does not require grad");
  }
  loss.impl()->EnsureGrad()[0] += 1.0;
  // Entries were appended in execution order, so reverse order is a valid
  // topological order of the recorded graph.
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    it->fn(*it->out);
  }
  entries_.clear();
}

NoGradGuard::NoGradGuard() : previous_(Tape::Current().recording_) {
  Tape::Current().recording_ = false;
}

NoGradGuard::~NoGradGuard() { Tape::Current().recording_ = previous_; }

void Backward(const Tensor& loss) { Tape::Current().Backward(loss); }

}  // namespace t2r
