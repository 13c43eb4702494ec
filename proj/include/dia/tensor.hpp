// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dia {

// Live-allocation bookkeeping for tensor storage. Counters are per thread so
// concurrent gradient calls can be measured independently.
//
// `pinned_*` lets a caller exclude buffers it deliberately keeps alive (stored
// trajectory latents) from the high-water mark.
struct MemStats {
  std::int64_t live_tensors = 0;
  std::int64_t live_scalars = 0;
  std::int64_t pinned_tensors = 0;
  std::int64_t pinned_scalars = 0;
  std::int64_t peak_tensors = 0;
  std::int64_t peak_scalars = 0;
  std::int64_t allocations = 0;

  void touch() {
    peak_tensors = std::max(peak_tensors, live_tensors - pinned_tensors);
    peak_scalars = std::max(peak_scalars, live_scalars - pinned_scalars);
  }
};

inline MemStats& mem_stats() {
  thread_local MemStats stats;
  return stats;
}

template <class T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() noexcept = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto& s = mem_stats();
    s.live_tensors += 1;
    s.live_scalars += static_cast<std::int64_t>(n);
    s.allocations += 1;
    s.touch();
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    auto& s = mem_stats();
    s.live_tensors -= 1;
    s.live_scalars -= static_cast<std::int64_t>(n);
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, TrackedAllocator<double>>;
using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor of doubles.
///
/// A tensor never has a zero extent; `Tensor{}` is the empty rank-0 placeholder
/// used only as a moved-from or default state.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::span<const double> values) : shape_(std::move(shape)) {
    validate_shape(shape_);
    if (values.size() != shape_numel(shape_))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape_));
    data_.assign(values.begin(), values.end());
  }

  Tensor(Shape shape, std::initializer_list<double> values)
      : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size())) {}

  static Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0); }
  static Tensor ones(const Shape& shape) { return Tensor(shape, 1.0); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }
  static Tensor vector(std::initializer_list<double> v) { return Tensor({v.size()}, v); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return {data_.data(), data_.size()}; }
  std::span<const double> values() const { return {data_.data(), data_.size()}; }

  double* begin() { return data_.data(); }
  double* end() { return data_.data() + data_.size(); }
  const double* begin() const { return data_.data(); }
  const double* end() const { return data_.data() + data_.size(); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(*this, o, "+=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(*this, o, "-=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double c) {
    for (auto& v : data_) v *= c;
    return *this;
  }

  /// this += c * o
  Tensor& axpy(double c, const Tensor& o) {
    require_same_shape(*this, o, "axpy");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += c * o.data_[i];
    return *this;
  }

  static void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape_ != b.shape_)
      throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape_) +
                                  " vs " + shape_str(b.shape_));
  }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw std::invalid_argument("tensor: empty shape");
    for (auto e : s)
      if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(s));
  }

  Shape shape_;
  Buffer data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(Tensor a, double c) { return a *= c; }
inline Tensor operator*(double c, Tensor a) { return a *= c; }
inline Tensor operator-(Tensor a) { return a *= -1.0; }

/// a*x + b*y
inline Tensor lincomb(double a, const Tensor& x, double b, const Tensor& y) {
  Tensor::require_same_shape(x, y, "lincomb");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  Tensor::require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a) s += v;
  return s;
}

inline double squared_norm(const Tensor& a) { return dot(a, a); }
inline double norm(const Tensor& a) { return std::sqrt(squared_norm(a)); }

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline Tensor map(const Tensor& a, const std::function<double(double)>& f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::clamp(a[i], lo, hi);
  return out;
}

inline bool all_finite(const Tensor& a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

/// ‖a − b‖∞ / max(‖b‖∞, floor)
inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  Tensor::require_same_shape(a, b, "max_rel_error");
  return max_abs(a - b) / std::max(max_abs(b), floor);
}

}  // namespace dia
