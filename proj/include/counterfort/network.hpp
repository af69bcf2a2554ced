#pragma once

// Network container, forward pass, softmax cross-entropy and reverse-mode
// gradients with respect to inputs and parameters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "counterfort/error.hpp"
#include "counterfort/layers.hpp"
#include "counterfort/parallel.hpp"
#include "counterfort/tensor.hpp"

namespace counterfort {

/// Images in [0,1], dims [n, channels, height, width] (or [n, features]).
using ImageBatch = Tensor;
/// Class labels in [0, classes).
using LabelBatch = std::vector<int>;

/// An ordered layer stack whose final output is a vector of class logits.
class Network {
 public:
  Network() = default;

  Network(Dims input_dims, std::vector<Layer> layers) : input_dims_(std::move(input_dims)), layers_(std::move(layers)) {
    validate();
  }

  const Dims& input_dims() const noexcept { return input_dims_; }
  std::size_t classes() const noexcept { return activation_dims_.empty() ? 0 : activation_dims_.back()[0]; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }

  /// Per-example dims entering layer i; the last entry is the logits dims.
  const std::vector<Dims>& activation_dims() const noexcept { return activation_dims_; }

  /// Parameters in layer order (weight before bias). Shapes are fixed; only
  /// values may be modified through the returned pointers.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (Layer& layer : layers_) {
      if (auto* d = std::get_if<Dense>(&layer)) {
        out.push_back(&d->weight);
        out.push_back(&d->bias);
      } else if (auto* c = std::get_if<Conv2d>(&layer)) {
        out.push_back(&c->weight);
        out.push_back(&c->bias);
      }
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (Tensor* t : const_cast<Network*>(this)->parameters()) out.push_back(t);
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (std::holds_alternative<Dense>(layers_[i]) || std::holds_alternative<Conv2d>(layers_[i])) {
        out.push_back("layers." + std::to_string(i) + ".weight");
        out.push_back("layers." + std::to_string(i) + ".bias");
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
  }

  /// Throws ShapeError unless `x` is a batch of this network's input dims.
  void check_input(const Tensor& x) const {
    if (x.rank() != input_dims_.size() + 1 || !std::equal(input_dims_.begin(), input_dims_.end(), x.dims.begin() + 1)) {
      const std::string got = x.rank() >= 1 ? dims_string(Dims(x.dims.begin() + 1, x.dims.end())) : dims_string(x.dims);
      throw ShapeError(describe_layer(0) + ": expects per-example input " + dims_string(input_dims_) + ", got " + got);
    }
  }

  bool operator==(const Network& other) const {
    if (input_dims_ != other.input_dims_ || layers_.size() != other.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layer_kind(layers_[i]) != layer_kind(other.layers_[i])) return false;
    }
    const auto a = parameters();
    const auto b = other.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i]->dims != b[i]->dims) return false;
      if (std::memcmp(a[i]->data(), b[i]->data(), a[i]->size() * sizeof(double)) != 0) return false;
    }
    return true;
  }

 private:
  std::string describe_layer(std::size_t i) const {
    if (layers_.empty()) return "network";
    return "layer " + std::to_string(i) + " (" + layer_kind(layers_[i]) + ")";
  }

  void validate() {
    if (layers_.empty()) throw ShapeError("network: no layers");
    activation_dims_.clear();
    activation_dims_.push_back(input_dims_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      try {
        activation_dims_.push_back(layer_output_dims(layers_[i], activation_dims_.back()));
      } catch (const ShapeError& e) {
        throw ShapeError(describe_layer(i) + ": " + e.what());
      }
    }
    const Dims& out = activation_dims_.back();
    if (out.size() != 1) throw ShapeError("network: final layer must produce a logit vector, got " + dims_string(out));
    if (out[0] < 2) throw ShapeError("network: class count must be at least 2");
  }

  Dims input_dims_;
  std::vector<Layer> layers_;
  std::vector<Dims> activation_dims_;
};

enum class Reduction { Mean, Sum };

struct GradOptions {
  Reduction reduction = Reduction::Mean;
  bool input_grad = true;
  bool param_grads = true;
};

/// Loss together with its gradients. param_grads follow Network::parameters().
struct GradResult {
  double loss = 0.0;
  Tensor input_grad;
  std::vector<Tensor> param_grads;
  std::vector<double> example_losses;
  Tensor logits;
};

/// One-hot rows for integer labels. Throws ValidationError on out-of-range labels.
inline Tensor one_hot(std::span<const int> labels, std::size_t classes) {
  if (labels.empty()) throw ValidationError("labels", "empty label batch");
  Tensor t(Dims{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ValidationError("labels", "label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                                          " outside [0, " + std::to_string(classes) + ")");
    }
    t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

/// Row-wise softmax of [n, classes] logits.
inline Tensor softmax(const Tensor& logits) {
  Tensor out(logits.dims);
  const std::size_t n = logits.dim(0), l = logits.stride0();
  for (std::size_t e = 0; e < n; ++e) {
    const double* z = logits.data() + e * l;
    double* p = out.data() + e * l;
    const double m = *std::max_element(z, z + l);
    double total = 0.0;
    for (std::size_t c = 0; c < l; ++c) total += (p[c] = std::exp(z[c] - m));
    for (std::size_t c = 0; c < l; ++c) p[c] /= total;
  }
  return out;
}

/// Per-row argmax; ties resolve to the lowest index.
inline LabelBatch argmax_rows(const Tensor& scores) {
  const std::size_t n = scores.dim(0), l = scores.stride0();
  LabelBatch out(n);
  for (std::size_t e = 0; e < n; ++e) {
    const double* z = scores.data() + e * l;
    std::size_t best = 0;
    for (std::size_t c = 1; c < l; ++c) {
      if (z[c] > z[best]) best = c;
    }
    out[e] = static_cast<int>(best);
  }
  return out;
}

namespace detail {

// Examples per work item. Fixed so reductions never depend on thread count.
inline constexpr std::size_t kChunk = 16;

inline void layer_forward(const Layer& layer, const Dims& in_dims, const Dims& out_dims, std::size_t n,
                          const double* in, double* out) {
  if (const auto* d = std::get_if<Dense>(&layer)) {
    kernels::dense_forward(*d, n, in, out);
  } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
    kernels::conv_forward(*c, in_dims, out_dims, n, in, out);
  } else if (std::holds_alternative<Relu>(layer)) {
    kernels::relu_forward(n * dims_product(in_dims), in, out);
  } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
    kernels::maxpool_forward(*p, in_dims, out_dims, n, in, out);
  } else {
    std::copy_n(in, n * dims_product(in_dims), out);
  }
}

// Runs the chunk forward, keeping every activation for the backward pass.
inline std::vector<std::vector<double>> forward_chunk(const Network& net, const double* x, std::size_t n) {
  const auto& dims = net.activation_dims();
  const auto& layers = net.layers();
  std::vector<std::vector<double>> acts(layers.size() + 1);
  acts[0].assign(x, x + n * dims_product(dims[0]));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    acts[i + 1].resize(n * dims_product(dims[i + 1]));
    layer_forward(layers[i], dims[i], dims[i + 1], n, acts[i].data(), acts[i + 1].data());
  }
  return acts;
}

// Offsets of each layer's first parameter inside Network::parameters().
inline std::vector<std::optional<std::size_t>> param_slots(const Network& net) {
  std::vector<std::optional<std::size_t>> slots;
  std::size_t next = 0;
  for (const Layer& layer : net.layers()) {
    if (std::holds_alternative<Dense>(layer) || std::holds_alternative<Conv2d>(layer)) {
      slots.emplace_back(next);
      next += 2;
    } else {
      slots.emplace_back(std::nullopt);
    }
  }
  return slots;
}

}  // namespace detail

/// Logits [n, classes]. Pure: identical arguments give bit-identical output.
inline Tensor forward(const Network& net, const ImageBatch& x) {
  net.check_input(x);
  const std::size_t n = x.dim(0);
  const std::size_t in_size = x.stride0();
  const std::size_t classes = net.classes();
  Tensor logits(Dims{n, classes});
  const std::size_t chunks = (n + detail::kChunk - 1) / detail::kChunk;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t begin = c * detail::kChunk;
    const std::size_t count = std::min(detail::kChunk, n - begin);
    auto acts = detail::forward_chunk(net, x.data() + begin * in_size, count);
    std::copy(acts.back().begin(), acts.back().end(), logits.data() + begin * classes);
  });
  return logits;
}

/// Softmax cross-entropy against soft targets ([n, classes] rows of
/// non-negative weights) and its gradients. For integer labels pass one_hot().
inline GradResult loss_and_grad(const Network& net, const ImageBatch& x, const Tensor& targets,
                                const GradOptions& opts = {}) {
  net.check_input(x);
  const std::size_t n = x.dim(0);
  const std::size_t classes = net.classes();
  if (targets.dims != Dims{n, classes}) {
    throw ShapeError("loss: targets dims " + dims_string(targets.dims) + " do not match [" + std::to_string(n) + "," +
                     std::to_string(classes) + "]");
  }
  const std::size_t in_size = x.stride0();
  const double scale = opts.reduction == Reduction::Mean ? 1.0 / static_cast<double>(n) : 1.0;
  const auto& layers = net.layers();
  const auto& dims = net.activation_dims();
  const auto slots = detail::param_slots(net);
  const auto params = net.parameters();

  GradResult result;
  result.example_losses.assign(n, 0.0);
  result.logits = Tensor(Dims{n, classes});
  if (opts.input_grad) result.input_grad = Tensor(x.dims);

  const std::size_t chunks = (n + detail::kChunk - 1) / detail::kChunk;
  std::vector<std::vector<Tensor>> chunk_grads(opts.param_grads ? chunks : 0);

  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t begin = c * detail::kChunk;
    const std::size_t count = std::min(detail::kChunk, n - begin);
    auto acts = detail::forward_chunk(net, x.data() + begin * in_size, count);

    std::vector<double> grad(count * classes);
    for (std::size_t e = 0; e < count; ++e) {
      const double* z = acts.back().data() + e * classes;
      const double* t = targets.data() + (begin + e) * classes;
      const double m = *std::max_element(z, z + classes);
      double total = 0.0;
      for (std::size_t k = 0; k < classes; ++k) total += std::exp(z[k] - m);
      const double lse = m + std::log(total);
      double loss = 0.0, mass = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        loss -= t[k] * (z[k] - lse);
        mass += t[k];
      }
      result.example_losses[begin + e] = loss;
      std::copy(z, z + classes, result.logits.data() + (begin + e) * classes);
      double* g = grad.data() + e * classes;
      for (std::size_t k = 0; k < classes; ++k) g[k] = (std::exp(z[k] - lse) * mass - t[k]) * scale;
    }

    std::vector<Tensor> local;
    if (opts.param_grads) {
      for (const Tensor* p : params) local.emplace_back(p->dims);
    }
    std::vector<double> upstream = std::move(grad);
    for (std::size_t i = layers.size(); i-- > 0;) {
      const bool need_din = i > 0 || opts.input_grad;
      const bool need_params = opts.param_grads && slots[i].has_value();
      if (!need_din && !need_params) break;
      std::vector<double> din(need_din ? count * dims_product(dims[i]) : 0);
      double* dw = need_params ? local[*slots[i]].data() : nullptr;
      double* db = need_params ? local[*slots[i] + 1].data() : nullptr;
      const Layer& layer = layers[i];
      if (const auto* d = std::get_if<Dense>(&layer)) {
        kernels::dense_backward(*d, count, acts[i].data(), upstream.data(), need_din ? din.data() : nullptr, dw, db);
      } else if (const auto* cv = std::get_if<Conv2d>(&layer)) {
        kernels::conv_backward(*cv, dims[i], dims[i + 1], count, acts[i].data(), upstream.data(),
                               need_din ? din.data() : nullptr, dw, db);
      } else if (std::holds_alternative<Relu>(layer)) {
        kernels::relu_backward(din.size(), acts[i].data(), upstream.data(), din.data());
      } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
        kernels::maxpool_backward(*p, dims[i], dims[i + 1], count, acts[i].data(), upstream.data(), din.data());
      } else {
        din = upstream;
      }
      upstream = std::move(din);
    }
    if (opts.input_grad) std::copy(upstream.begin(), upstream.end(), result.input_grad.data() + begin * in_size);
    if (opts.param_grads) chunk_grads[c] = std::move(local);
  });

  double total = 0.0;
  for (double l : result.example_losses) total += l;
  result.loss = total * scale;

  if (opts.param_grads) {
    for (const Tensor* p : params) result.param_grads.emplace_back(p->dims);
    for (const auto& local : chunk_grads) {
      for (std::size_t k = 0; k < local.size(); ++k) {
        double* dst = result.param_grads[k].data();
        const double* src = local[k].data();
        for (std::size_t j = 0; j < local[k].size(); ++j) dst[j] += src[j];
      }
    }
  }
  return result;
}

/// Mean softmax cross-entropy over the batch with its input and parameter gradients.
inline GradResult loss_and_input_grad(const Network& net, const ImageBatch& x, std::span<const int> labels) {
  return loss_and_grad(net, x, one_hot(labels, net.classes()));
}

/// Mean cross-entropy only (no backward pass).
inline double mean_loss(const Network& net, const ImageBatch& x, const Tensor& targets) {
  const Tensor logits = forward(net, x);
  if (targets.dims != logits.dims) throw ShapeError("loss: targets do not match logits");
  const std::size_t n = logits.dim(0), l = logits.stride0();
  double total = 0.0;
  for (std::size_t e = 0; e < n; ++e) {
    const double* z = logits.data() + e * l;
    const double* t = targets.data() + e * l;
    const double m = *std::max_element(z, z + l);
    double s = 0.0;
    for (std::size_t k = 0; k < l; ++k) s += std::exp(z[k] - m);
    const double lse = m + std::log(s);
    for (std::size_t k = 0; k < l; ++k) total -= t[k] * (z[k] - lse);
  }
  return total / static_cast<double>(n);
}

/// Central differences of the mean loss at the listed flat input coordinates.
inline std::vector<double> finite_diff_grad_at(const Network& net, const ImageBatch& x, std::span<const int> labels,
                                               double h, std::span<const std::size_t> coords) {
  if (!(h > 0.0)) throw ValidationError("h", "step must be positive");
  const Tensor targets = one_hot(labels, net.classes());
  std::vector<double> out(coords.size());
  Tensor probe = x;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const std::size_t k = coords[i];
    const double original = probe[k];
    probe[k] = original + h;
    const double up = mean_loss(net, probe, targets);
    probe[k] = original - h;
    const double down = mean_loss(net, probe, targets);
    probe[k] = original;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

/// Central differences over every input coordinate.
inline Tensor finite_diff_grad(const Network& net, const ImageBatch& x, std::span<const int> labels, double h) {
  std::vector<std::size_t> coords(x.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  return Tensor(x.dims, finite_diff_grad_at(net, x, labels, h, coords));
}

}  // namespace counterfort
