#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tabench {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Eigen picks its vectorized peel from the buffer address, so buffers are 64-byte
// aligned to keep reductions bit-identical from one allocation to the next.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::initializer_list<double> data) : Tensor(std::move(shape), Buffer(data)) {}

  Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

  Tensor(Shape shape, Buffer data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != numel(shape_))
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
  }

  static Tensor vector(std::initializer_list<double> v) {
    return Tensor({v.size()}, std::vector<double>(v));
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return shape_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }
  Buffer& storage() noexcept { return data_; }
  const Buffer& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor has " + std::to_string(data_.size()) + " elements");
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (numel(s) != data_.size()) shape_mismatch("reshape", shape_, s);
    return Tensor(std::move(s), data_);
  }

  // Rows [begin, end) along axis 0.
  Tensor rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || end > shape_[0] || begin > end)
      throw ShapeError("rows: range out of bounds for " + to_string(shape_));
    const std::size_t inner = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), Buffer(data_.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                                       data_.begin() + static_cast<std::ptrdiff_t>(end * inner)));
  }

  std::size_t row_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

  std::span<double> row(std::size_t i) { return data().subspan(i * row_size(), row_size()); }
  std::span<const double> row(std::size_t i) const { return data().subspan(i * row_size(), row_size()); }

  Tensor& operator+=(const Tensor& o) {
    if (o.shape_ != shape_) shape_mismatch("add", shape_, o.shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) noexcept {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape_));
  }

  Shape shape_;
  Buffer data_;
};

// Stacks equal-shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack: no tensors");
  Shape s{items.size()};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  Buffer d;
  d.reserve(numel(s));
  for (const auto& t : items) {
    if (t.shape() != items[0].shape()) shape_mismatch("stack", items[0].shape(), t.shape());
    d.insert(d.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(s), std::move(d));
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double l1_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  return s;
}

}  // namespace tabench
