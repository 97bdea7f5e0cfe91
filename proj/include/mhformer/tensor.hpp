#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "mhformer/error.hpp"

namespace mhf {

using Shape = std::vector<std::size_t>;

enum class DType { float32, float64 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::float32 : DType::float64;
}

inline std::string_view dtype_name(DType d) {
  return d == DType::float32 ? "float32" : "float64";
}

inline DType parse_dtype(std::string_view s) {
  if (s == "float32") return DType::float32;
  if (s == "float64") return DType::float64;
  throw ValidationError("unknown dtype '" + std::string(s) + "'");
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;

  void accumulate_grad(std::span<const T> g) {
    if (grad.empty()) grad.assign(data.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor of float or double.
///
/// A Tensor is a handle: copies share storage, gradient and differentiation
/// flag. Use clone() for an independent deep copy. Extents are strictly
/// positive; scalars have shape {1}.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    check_shape(shape);
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    check_shape(shape);
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = T(1);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t i) const { return impl().shape.at(i); }
  std::size_t numel() const { return impl().data.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> data() { return impl().data; }
  std::span<const T> data() const { return impl().data; }
  T& operator[](std::size_t i) { return impl().data[i]; }
  const T& operator[](std::size_t i) const { return impl().data[i]; }
  T& at(std::size_t r, std::size_t c) { return impl().data[r * impl().shape.back() + c]; }
  const T& at(std::size_t r, std::size_t c) const {
    return impl().data[r * impl().shape.back() + c];
  }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl().requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl().leaf; }

  bool has_grad() const { return !impl().grad.empty(); }
  // Gradient as an independent tensor; zeros when nothing was accumulated.
  Tensor grad() const {
    if (!has_grad()) return Tensor(shape());
    return Tensor(shape(), impl().grad);
  }
  std::span<const T> grad_data() const { return impl().grad; }
  std::span<T> grad_data() { return impl().grad; }
  void zero_grad() {
    if (has_grad()) std::fill(impl().grad.begin(), impl().grad.end(), T(0));
  }
  void clear_grad() { impl().grad.clear(); }

  Tensor clone() const {
    Tensor t(shape(), impl().data);
    t.impl_->requires_grad = impl().requires_grad;
    return t;
  }
  // Same values, cut from any differentiation record.
  Tensor detach() const { return Tensor(shape(), impl().data); }

  // Copy under a new shape with equal element count. Not recorded: use
  // ops::reshape inside differentiated code.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    return Tensor(std::move(s), impl().data);
  }

  // Internal access for ops and the tape.
  const std::shared_ptr<detail::TensorImpl<T>>& impl_ptr() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl<T>> p) {
    Tensor t;
    t.impl_ = std::move(p);
    return t;
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  detail::TensorImpl<T>& impl() {
    if (!impl_) throw ValidationError("use of undefined tensor");
    return *impl_;
  }
  const detail::TensorImpl<T>& impl() const {
    if (!impl_) throw ValidationError("use of undefined tensor");
    return *impl_;
  }
  static void check_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : s)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Ordered record of differentiable ops executed while the tape is active.
///
/// Constructing a tape makes it the active tape for scalar type T on the
/// current thread; destruction restores the previously active one. A tape is
/// single-threaded and not copyable.
template <typename T>
class GradTape {
 public:
  GradTape() : previous_(current()) { current() = this; }
  ~GradTape() { current() = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return current(); }

  void record(std::function<void()> adjoint) { ops_.push_back(std::move(adjoint)); }
  std::size_t size() const { return ops_.size(); }

  // Replays every recorded adjoint once, newest first, then clears the record.
  void backward(const Tensor<T>& seed) {
    if (seed.numel() != 1)
      throw ShapeError("backward seed must be a scalar, got " + shape_str(seed.shape()));
    if (!seed.requires_grad())
      throw ValidationError("backward seed carries no differentiation record");
    auto& g = seed.impl_ptr()->grad_buffer();
    g[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  void clear() { ops_.clear(); }

 private:
  static GradTape*& current() {
    thread_local GradTape* tape = nullptr;
    return tape;
  }

  GradTape* previous_;
  std::vector<std::function<void()>> ops_;
};

template <typename T>
void backward(const Tensor<T>& seed) {
  auto* tape = GradTape<T>::active();
  if (!tape) throw ValidationError("backward called with no active gradient tape");
  tape->backward(seed);
}

}  // namespace mhf
