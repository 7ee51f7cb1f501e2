#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace t2r {

using Shape = std::vector<std::size_t>;

std::size_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

namespace internal {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Empty until a gradient flows into this tensor.
  std::vector<double> grad;
  bool requires_grad = false;

  std::vector<double>& EnsureGrad();
};

}  // namespace internal

// Dense row-major float64 tensor. Copies share storage; use Clone() for a
// deep copy. Shape {} denotes a scalar.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor Zeros(Shape shape, bool requires_grad = false);
  static Tensor Full(Shape shape, double value, bool requires_grad = false);
  static Tensor Scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access, for initializers and optimizers only. Never call on
  // a tensor that participates in a live tape.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void ZeroGrad();

  Tensor Clone() const;
  bool SharesStorageWith(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<internal::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<internal::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<internal::TensorImpl> impl_;
};

// Reverse-mode tape. One per thread; operations append to it while gradient
// recording is enabled and at least one input requires grad.
class Tape {
 public:
  using BackwardFn = std::function<void(internal::TensorImpl& out)>;

  static Tape& Current();

  void Record(const std::shared_ptr<internal::TensorImpl>& out, BackwardFn fn);
  void Clear();
  std::size_t size() const { return entries_.size(); }
  bool recording() const { return recording_; }

  // Seeds d(loss)/d(loss) = 1, replays entries in reverse and clears the tape.
  void Backward(const Tensor& loss);

 private:
  friend class NoGradGuard;
  struct Entry {
    std::shared_ptr<internal::TensorImpl> out;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool recording_ = true;
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void Backward(const Tensor& loss);

}  // namespace t2r
