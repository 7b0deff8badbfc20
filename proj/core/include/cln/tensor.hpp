#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace cln {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Vectorized kernels pick their loop split from the
// buffer address, so unaligned buffers would make results vary from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using RealBuffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array of doubles with an optional gradient accumulator.
// Values are only mutated by optimizers and explicit initializers; the
// accumulator is written by Graph::backward for tensors with requires_grad.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return values_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<const double> values() const { return values_; }
  std::span<double> mutable_values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);

  // Empty until requires_grad is enabled; then same length as values. The
  // accumulator stays writable through const references: it is the only
  // mutable state of a tensor shared with a computation graph.
  std::span<const double> grad() const { return grad_; }
  std::span<double> grad_accumulator() const { return grad_; }
  void zero_grad();

  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  RealBuffer values_;
  mutable RealBuffer grad_;
  bool requires_grad_ = false;
};

}  // namespace cln
