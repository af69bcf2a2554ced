#pragma once

// Layer descriptors and their batched forward/backward kernels.
//
// Every kernel works on a contiguous block of `n` examples laid out
// row-major ([n, ...per-example dims]). Backward kernels accumulate into
// parameter gradients and overwrite the input gradient.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>

#include "counterfort/tensor.hpp"

namespace counterfort {

/// Fully connected layer. weight is [out, in], bias is [out].
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  Tensor weight;
  Tensor bias;

  Dense() = default;
  Dense(std::size_t in_features, std::size_t out_features)
      : in(in_features), out(out_features), weight(Dims{out_features, in_features}), bias(Dims{out_features}) {}
};

/// 2D convolution (cross-correlation). weight is [out_ch, in_ch, k, k].
struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor weight;
  Tensor bias;

  Conv2d() = default;
  Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t s = 1, std::size_t p = 0)
      : in_channels(in_ch),
        out_channels(out_ch),
        kernel(k),
        stride(s),
        padding(p),
        weight(Dims{out_ch, in_ch, k, k}),
        bias(Dims{out_ch}) {}
};

struct Relu {};

/// Non-overlapping max pooling (stride == window). Ties route to the first max.
struct MaxPool2d {
  std::size_t window = 2;
};

struct Flatten {};

using Layer = std::variant<Dense, Conv2d, Relu, MaxPool2d, Flatten>;

inline std::string layer_kind(const Layer& layer) {
  struct Visitor {
    std::string operator()(const Dense&) const { return "dense"; }
    std::string operator()(const Conv2d&) const { return "conv2d"; }
    std::string operator()(const Relu&) const { return "relu"; }
    std::string operator()(const MaxPool2d&) const { return "maxpool2d"; }
    std::string operator()(const Flatten&) const { return "flatten"; }
  };
  return std::visit(Visitor{}, layer);
}

/// Per-example output dims, or ShapeError describing the mismatch.
inline Dims layer_output_dims(const Layer& layer, const Dims& in) {
  struct Visitor {
    const Dims& in;
    Dims operator()(const Dense& d) const {
      if (in.size() != 1 || in[0] != d.in) {
        throw ShapeError("expects input [" + std::to_string(d.in) + "], got " + dims_string(in));
      }
      if (d.weight.dims != Dims{d.out, d.in} || d.bias.dims != Dims{d.out}) {
        throw ShapeError("parameter dims disagree with declared features");
      }
      return {d.out};
    }
    Dims operator()(const Conv2d& c) const {
      if (in.size() != 3 || in[0] != c.in_channels) {
        throw ShapeError("expects input [" + std::to_string(c.in_channels) + ",H,W], got " + dims_string(in));
      }
      if (c.kernel == 0 || c.stride == 0) throw ShapeError("kernel and stride must be positive");
      if (c.weight.dims != Dims{c.out_channels, c.in_channels, c.kernel, c.kernel} ||
          c.bias.dims != Dims{c.out_channels}) {
        throw ShapeError("parameter dims disagree with declared channels/kernel");
      }
      const std::size_t h = in[1] + 2 * c.padding;
      const std::size_t w = in[2] + 2 * c.padding;
      if (h < c.kernel || w < c.kernel) throw ShapeError("kernel larger than padded input " + dims_string(in));
      return {c.out_channels, (h - c.kernel) / c.stride + 1, (w - c.kernel) / c.stride + 1};
    }
    Dims operator()(const Relu&) const { return in; }
    Dims operator()(const MaxPool2d& p) const {
      if (in.size() != 3) throw ShapeError("expects input [C,H,W], got " + dims_string(in));
      if (p.window == 0 || in[1] < p.window || in[2] < p.window) {
        throw ShapeError("window does not fit input " + dims_string(in));
      }
      return {in[0], in[1] / p.window, in[2] / p.window};
    }
    Dims operator()(const Flatten&) const { return {dims_product(in)}; }
  };
  return std::visit(Visitor{in}, layer);
}

namespace kernels {

// Range of output coordinates o with 0 <= o*stride + k - pad < extent.
struct OutRange {
  std::size_t lo;
  std::size_t hi;  // exclusive
};

inline OutRange valid_outputs(std::size_t out_extent, std::size_t in_extent, std::size_t stride, std::size_t k,
                              std::size_t pad) {
  const auto s = static_cast<std::int64_t>(stride);
  const auto shift = static_cast<std::int64_t>(k) - static_cast<std::int64_t>(pad);
  std::int64_t lo = 0;
  if (shift < 0) lo = (-shift + s - 1) / s;
  const std::int64_t last_in = static_cast<std::int64_t>(in_extent) - 1 - shift;
  std::int64_t hi = last_in < 0 ? 0 : last_in / s + 1;
  hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(out_extent));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline void dense_forward(const Dense& d, std::size_t n, const double* in, double* out) {
  const double* w = d.weight.data();
  const double* b = d.bias.data();
  for (std::size_t e = 0; e < n; ++e) {
    const double* x = in + e * d.in;
    double* y = out + e * d.out;
    for (std::size_t o = 0; o < d.out; ++o) {
      const double* row = w + o * d.in;
      double acc = b[o];
      for (std::size_t i = 0; i < d.in; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
  }
}

inline void dense_backward(const Dense& d, std::size_t n, const double* in, const double* dout, double* din,
                           double* dweight, double* dbias) {
  const double* w = d.weight.data();
  for (std::size_t e = 0; e < n; ++e) {
    const double* x = in + e * d.in;
    const double* g = dout + e * d.out;
    if (dweight != nullptr) {
      for (std::size_t o = 0; o < d.out; ++o) {
        const double go = g[o];
        double* row = dweight + o * d.in;
        for (std::size_t i = 0; i < d.in; ++i) row[i] += go * x[i];
        dbias[o] += go;
      }
    }
    if (din != nullptr) {
      double* dx = din + e * d.in;
      std::fill(dx, dx + d.in, 0.0);
      for (std::size_t o = 0; o < d.out; ++o) {
        const double go = g[o];
        const double* row = w + o * d.in;
        for (std::size_t i = 0; i < d.in; ++i) dx[i] += row[i] * go;
      }
    }
  }
}

// Unrolls one example into a [in_channels*k*k, oh*ow] matrix; padded taps are 0.
inline void im2col(const Conv2d& c, std::size_t ih, std::size_t iw, std::size_t oh, std::size_t ow, const double* x,
                   double* cols) {
  const std::size_t k = c.kernel, s = c.stride, p = c.padding, plane = oh * ow;
  for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
    const double* src = x + ic * ih * iw;
    for (std::size_t ky = 0; ky < k; ++ky) {
      const OutRange rows = valid_outputs(oh, ih, s, ky, p);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const OutRange cols_ok = valid_outputs(ow, iw, s, kx, p);
        double* row = cols + ((ic * k + ky) * k + kx) * plane;
        std::fill(row, row + plane, 0.0);
        for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
          const double* srow = src + (oy * s + ky - p) * iw;
          double* drow = row + oy * ow;
          for (std::size_t ox = cols_ok.lo; ox < cols_ok.hi; ++ox) drow[ox] = srow[ox * s + kx - p];
        }
      }
    }
  }
}

// Adds a [in_channels*k*k, oh*ow] column gradient back onto one example's input gradient.
inline void col2im(const Conv2d& c, std::size_t ih, std::size_t iw, std::size_t oh, std::size_t ow,
                   const double* cols, double* dx) {
  const std::size_t k = c.kernel, s = c.stride, p = c.padding, plane = oh * ow;
  for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
    double* dst = dx + ic * ih * iw;
    for (std::size_t ky = 0; ky < k; ++ky) {
      const OutRange rows = valid_outputs(oh, ih, s, ky, p);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const OutRange cols_ok = valid_outputs(ow, iw, s, kx, p);
        const double* row = cols + ((ic * k + ky) * k + kx) * plane;
        for (std::size_t oy = rows.lo; oy < rows.hi; ++oy) {
          double* drow = dst + (oy * s + ky - p) * iw;
          const double* srow = row + oy * ow;
          for (std::size_t ox = cols_ok.lo; ox < cols_ok.hi; ++ox) drow[ox * s + kx - p] += srow[ox];
        }
      }
    }
  }
}

inline void conv_forward(const Conv2d& c, const Dims& in_dims, const Dims& out_dims, std::size_t n, const double* in,
                         double* out) {
  const std::size_t ih = in_dims[1], iw = in_dims[2];
  const std::size_t oh = out_dims[1], ow = out_dims[2], plane = oh * ow;
  const std::size_t taps = c.in_channels * c.kernel * c.kernel;
  std::vector<double> cols(taps * plane);
  const double* w = c.weight.data();
  for (std::size_t e = 0; e < n; ++e) {
    im2col(c, ih, iw, oh, ow, in + e * c.in_channels * ih * iw, cols.data());
    double* y = out + e * c.out_channels * plane;
    for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
      double* dst = y + oc * plane;
      std::fill(dst, dst + plane, c.bias[oc]);
      const double* wrow = w + oc * taps;
      for (std::size_t r = 0; r < taps; ++r) {
        const double wv = wrow[r];
        const double* src = cols.data() + r * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += wv * src[i];
      }
    }
  }
}

inline void conv_backward(const Conv2d& c, const Dims& in_dims, const Dims& out_dims, std::size_t n,
                          const double* in, const double* dout, double* din, double* dweight, double* dbias) {
  const std::size_t ih = in_dims[1], iw = in_dims[2];
  const std::size_t oh = out_dims[1], ow = out_dims[2], plane = oh * ow;
  const std::size_t taps = c.in_channels * c.kernel * c.kernel;
  std::vector<double> cols(dweight != nullptr ? taps * plane : 0);
  std::vector<double> dcols(din != nullptr ? taps * plane : 0);
  const double* w = c.weight.data();
  for (std::size_t e = 0; e < n; ++e) {
    const double* g = dout + e * c.out_channels * plane;
    if (dbias != nullptr) {
      for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += g[oc * plane + i];
        dbias[oc] += acc;
      }
    }
    if (dweight != nullptr) {
      im2col(c, ih, iw, oh, ow, in + e * c.in_channels * ih * iw, cols.data());
      for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
        const double* gp = g + oc * plane;
        for (std::size_t r = 0; r < taps; ++r) {
          const double* src = cols.data() + r * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += gp[i] * src[i];
          dweight[oc * taps + r] += acc;
        }
      }
    }
    if (din != nullptr) {
      std::fill(dcols.begin(), dcols.end(), 0.0);
      for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
        const double* gp = g + oc * plane;
        const double* wrow = w + oc * taps;
        for (std::size_t r = 0; r < taps; ++r) {
          const double wv = wrow[r];
          double* dst = dcols.data() + r * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] += wv * gp[i];
        }
      }
      double* dx = din + e * c.in_channels * ih * iw;
      std::fill(dx, dx + c.in_channels * ih * iw, 0.0);
      col2im(c, ih, iw, oh, ow, dcols.data(), dx);
    }
  }
}

inline void relu_forward(std::size_t count, const double* in, double* out) {
  for (std::size_t i = 0; i < count; ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
}

inline void relu_backward(std::size_t count, const double* in, const double* dout, double* din) {
  for (std::size_t i = 0; i < count; ++i) din[i] = in[i] > 0.0 ? dout[i] : 0.0;
}

inline void maxpool_forward(const MaxPool2d& pool, const Dims& in_dims, const Dims& out_dims, std::size_t n,
                            const double* in, double* out) {
  const std::size_t ch = in_dims[0], ih = in_dims[1], iw = in_dims[2];
  const std::size_t oh = out_dims[1], ow = out_dims[2], win = pool.window;
  for (std::size_t plane = 0; plane < n * ch; ++plane) {
    const double* src = in + plane * ih * iw;
    double* dst = out + plane * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double best = src[(oy * win) * iw + ox * win];
        for (std::size_t dy = 0; dy < win; ++dy) {
          for (std::size_t dx = 0; dx < win; ++dx) best = std::max(best, src[(oy * win + dy) * iw + ox * win + dx]);
        }
        dst[oy * ow + ox] = best;
      }
    }
  }
}

inline void maxpool_backward(const MaxPool2d& pool, const Dims& in_dims, const Dims& out_dims, std::size_t n,
                             const double* in, const double* dout, double* din) {
  const std::size_t ch = in_dims[0], ih = in_dims[1], iw = in_dims[2];
  const std::size_t oh = out_dims[1], ow = out_dims[2], win = pool.window;
  std::fill(din, din + n * ch * ih * iw, 0.0);
  for (std::size_t plane = 0; plane < n * ch; ++plane) {
    const double* src = in + plane * ih * iw;
    const double* g = dout + plane * oh * ow;
    double* dsrc = din + plane * ih * iw;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t arg = (oy * win) * iw + ox * win;
        for (std::size_t dy = 0; dy < win; ++dy) {
          for (std::size_t dx = 0; dx < win; ++dx) {
            const std::size_t idx = (oy * win + dy) * iw + ox * win + dx;
            if (src[idx] > src[arg]) arg = idx;
          }
        }
        dsrc[arg] += g[oy * ow + ox];
      }
    }
  }
}

}  // namespace kernels
}  // namespace counterfort
