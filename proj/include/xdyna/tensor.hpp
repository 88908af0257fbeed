#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xdyna {

/// Error categories surfaced by the library. The CLI maps these onto exit codes.
enum class ErrorKind { shape, parameter, config, metric, numerical, io };

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::config: return "config";
    case ErrorKind::metric: return "metric";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::shape, w) {}
};
struct ParameterError : Error {
  explicit ParameterError(const std::string& w) : Error(ErrorKind::parameter, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct MetricError : Error {
  explicit MetricError(const std::string& w) : Error(ErrorKind::metric, w) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::numerical, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::io, w) {}
};

/// splitmix64 finalizer; used to derive independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

/// Dense row-major tensor with value semantics.
///
/// Activations use the layout [N, C, L...] where N indexes frames. Because a
/// frame is stored channel-major, its data is also the column-major token
/// matrix [L x C], which is how attention and 1x1 projections consume it.
/// Two-dimensional weights {rows, cols} are stored column-major so they can be
/// mapped straight into Eigen.
/// Tensor buffers are aligned for the widest SIMD width Eigen was built for, so
/// vectorized kernels take the same path (and summation order) on every run.
template <typename T>
using Storage = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Storage<T>(data.begin(), data.end())) {}
  Tensor(Shape shape, Storage<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  Storage<T>& storage() noexcept { return data_; }
  const Storage<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Number of leading "frames" (first axis).
  int frames() const { return shape_.empty() ? 1 : shape_[0]; }
  int channels() const { return shape_.size() < 2 ? 1 : shape_[1]; }
  /// Product of all axes after the channel axis.
  int length() const {
    int l = 1;
    for (std::size_t i = 2; i < shape_.size(); ++i) l *= shape_[i];
    return l;
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(T(0)); }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Storage<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  /// Frame n as a new tensor of shape [1, rest...].
  Tensor frame(int n) const {
    Shape s = shape_;
    s[0] = 1;
    std::size_t stride = shape_size(s);
    return Tensor(s, Storage<T>(data_.begin() + n * stride, data_.begin() + (n + 1) * stride));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T max_abs() const {
    T m = 0;
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  void check_same(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_)
      throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_str(shape_) + " vs " +
                       shape_str(o.shape_));
  }

 private:
  Shape shape_;
  Storage<T> data_;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}
template <typename T>
Tensor<T> operator-(Tensor<T> a, const Tensor<T>& b) {
  a -= b;
  return a;
}
template <typename T>
Tensor<T> operator*(Tensor<T> a, T s) {
  a *= s;
  return a;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same(b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Concatenate tensors along the frame axis.
template <typename T>
Tensor<T> stack_frames(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("stack_frames: no parts");
  Shape s = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    ps[0] = s[0];
    if (ps != s) throw ShapeError("stack_frames: inconsistent shapes");
    total += p.dim(0);
  }
  s[0] = total;
  Storage<T> data;
  data.reserve(shape_size(s));
  for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
  return Tensor<T>(s, std::move(data));
}

/// Column-major Eigen matrix -> 2-D tensor {rows, cols}.
template <typename T>
Tensor<T> from_matrix(const Mat<T>& m) {
  return Tensor<T>({static_cast<int>(m.rows()), static_cast<int>(m.cols())},
                   Storage<T>(m.data(), m.data() + m.size()));
}

template <typename T>
Mat<T> to_matrix(const Tensor<T>& t) {
  if (t.rank() != 2) throw ShapeError("to_matrix expects a 2-D tensor, got " + shape_str(t.shape()));
  return ConstMatMap<T>(t.data(), t.dim(0), t.dim(1));
}

/// Token matrix [L x C] -> activation tensor [1, C, L].
template <typename T>
Tensor<T> tokens_to_tensor(const Mat<T>& z) {
  return Tensor<T>({1, static_cast<int>(z.cols()), static_cast<int>(z.rows())},
                   Storage<T>(z.data(), z.data() + z.size()));
}

/// Activation tensor [1, C, L] -> token matrix [L x C].
template <typename T>
Mat<T> tensor_to_tokens(const Tensor<T>& t) {
  if (t.frames() != 1) throw ShapeError("tensor_to_tokens expects a single frame");
  return ConstMatMap<T>(t.data(), t.length(), t.channels());
}

}  // namespace xdyna
