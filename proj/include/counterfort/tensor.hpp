#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "counterfort/error.hpp"

namespace counterfort {

using Dims = std::vector<std::size_t>;

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. `values.size() == product(dims)` always.
struct Tensor {
  Dims dims;
  std::vector<double> values;

  Tensor() = default;

  explicit Tensor(Dims d, double fill = 0.0) : dims(std::move(d)), values(dims_product(dims), fill) {
    check_dims();
  }

  Tensor(Dims d, std::vector<double> v) : dims(std::move(d)), values(std::move(v)) {
    check_dims();
    if (values.size() != dims_product(dims)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill dims " +
                       dims_string(dims));
    }
  }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t rank() const noexcept { return dims.size(); }
  std::size_t dim(std::size_t i) const { return dims.at(i); }

  double* data() noexcept { return values.data(); }
  const double* data() const noexcept { return values.data(); }
  std::span<double> span() noexcept { return values; }
  std::span<const double> span() const noexcept { return values; }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  /// Number of values per leading-axis entry (e.g. per example of a batch).
  std::size_t stride0() const { return dims.empty() ? 1 : size() / dims[0]; }

  /// Copy of rows [begin, end) along the leading axis.
  Tensor slice0(std::size_t begin, std::size_t end) const {
    if (dims.empty() || begin > end || end > dims[0]) throw ShapeError("tensor: bad slice");
    Dims d = dims;
    d[0] = end - begin;
    const std::size_t s = stride0();
    return Tensor(std::move(d), std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(begin * s),
                                                    values.begin() + static_cast<std::ptrdiff_t>(end * s)));
  }

  /// Rows selected by `index` along the leading axis.
  Tensor gather0(std::span<const std::size_t> index) const {
    Dims d = dims;
    d[0] = index.size();
    Tensor out(std::move(d));
    const std::size_t s = stride0();
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= dims[0]) throw ShapeError("tensor: gather index out of range");
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(index[i] * s), s,
                  out.values.begin() + static_cast<std::ptrdiff_t>(i * s));
    }
    return out;
  }

  bool operator==(const Tensor&) const = default;

 private:
  void check_dims() const {
    for (std::size_t d : dims) {
      if (d == 0) throw ShapeError("tensor: zero extent in dims " + dims_string(dims));
    }
  }
};

inline void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dims != b.dims) {
    throw ShapeError(std::string(what) + ": dims " + dims_string(a.dims) + " vs " + dims_string(b.dims));
  }
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline bool all_in_unit_interval(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x >= 0.0 && x <= 1.0; });
}

/// sign with sign(0) = 0.
inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline void clip_unit(std::span<double> v) {
  for (double& x : v) x = std::clamp(x, 0.0, 1.0);
}

}  // namespace counterfort
