#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace aird {

// Error taxonomy shared by every module. The CLI maps ConfigError/UsageError to
// exit code 1 and everything else to 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct BatchSizeError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major float64 array with an optional same-shape gradient buffer.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
  }

  static Tensor vector(std::initializer_list<double> v) {
    return Tensor({v.size()}, std::vector<double>(v));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> d;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(d));
  }

  static Tensor eye(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on = true) {
    requires_grad_ = on;
    return *this;
  }

  bool has_grad() const { return !grad_.empty(); }
  std::span<const double> grad() const { return grad_; }
  std::span<double> grad() { return grad_; }
  void zero_grad() { grad_.clear(); }

  // Adds g into the gradient buffer, allocating it on first use.
  void accumulate_grad(std::span<const double> g) {
    if (g.size() != data_.size())
      throw DimensionError("gradient length mismatch for shape " + to_string(shape_));
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != data_.size())
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  bool all_finite() const {
    auto ok = [](double v) { return std::isfinite(v); };
    return std::all_of(data_.begin(), data_.end(), ok) && std::all_of(grad_.begin(), grad_.end(), ok);
  }

  // Check barrier: NaN/Inf never passes silently.
  void check_finite(std::string_view what) const {
    if (!all_finite()) throw NumericError("non-finite value in " + std::string(what));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw DimensionError("zero extent in shape " + to_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

}  // namespace aird
