#pragma once

// Desk-scale classifier architectures and checkpoint persistence.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfort/container.hpp"
#include "counterfort/error.hpp"
#include "counterfort/network.hpp"
#include "counterfort/rng.hpp"
#include "counterfort/version.hpp"

namespace counterfort {

inline constexpr std::size_t kHiddenUnits = 128;
inline constexpr std::size_t kConv1Channels = 16;
inline constexpr std::size_t kConv2Channels = 32;

inline const std::vector<std::string>& architecture_names() {
  static const std::vector<std::string> names = {"mlp-small", "cnn-desk"};
  return names;
}

/// He-normal (fan-in) weights, zero biases, drawn layer by layer from `seed`.
inline void initialize_he(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  for (Tensor* p : net.parameters()) {
    if (p->rank() == 1) {
      std::fill(p->values.begin(), p->values.end(), 0.0);
      continue;
    }
    const double fan_in = static_cast<double>(p->stride0());
    const double scale = std::sqrt(2.0 / fan_in);
    for (double& v : p->values) v = scale * rng.normal();
  }
}

/// Builds an architecture by name:
///   mlp-small: flatten, dense 128, relu, dense classes
///   cnn-desk:  2 x (conv3x3 pad 1, relu, maxpool 2), flatten, dense 128, relu, dense classes
/// with 16 and 32 convolution channels.
inline Network build(const std::string& arch, const Dims& input_dims, std::size_t classes, std::uint64_t seed) {
  if (classes < 2) throw ValidationError("classes", "must be at least 2");
  std::vector<Layer> layers;
  if (arch == "mlp-small") {
    layers.emplace_back(Flatten{});
    layers.emplace_back(Dense(dims_product(input_dims), kHiddenUnits));
    layers.emplace_back(Relu{});
    layers.emplace_back(Dense(kHiddenUnits, classes));
  } else if (arch == "cnn-desk") {
    if (input_dims.size() != 3) throw ShapeError("cnn-desk: input must be [channels,height,width]");
    const std::size_t h = input_dims[1] / 2 / 2, w = input_dims[2] / 2 / 2;
    if (h == 0 || w == 0) throw ShapeError("cnn-desk: input too small for two 2x2 poolings");
    layers.emplace_back(Conv2d(input_dims[0], kConv1Channels, 3, 1, 1));
    layers.emplace_back(Relu{});
    layers.emplace_back(MaxPool2d{2});
    layers.emplace_back(Conv2d(kConv1Channels, kConv2Channels, 3, 1, 1));
    layers.emplace_back(Relu{});
    layers.emplace_back(MaxPool2d{2});
    layers.emplace_back(Flatten{});
    layers.emplace_back(Dense(kConv2Channels * h * w, kHiddenUnits));
    layers.emplace_back(Relu{});
    layers.emplace_back(Dense(kHiddenUnits, classes));
  } else {
    throw ValidationError("arch", "unknown architecture '" + arch + "'");
  }
  Network net(input_dims, std::move(layers));
  initialize_he(net, seed);
  return net;
}

/// Argmax of the softmax probabilities; ties go to the lowest class index.
inline LabelBatch predict(const Network& net, const ImageBatch& x) { return argmax_rows(forward(net, x)); }

// ---------------------------------------------------------------------------
// Checkpoints

struct TrainingMeta {
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  std::string method = "plain";  // plain | mixup | iat
};

struct Checkpoint {
  std::string arch;
  Network net;
  TrainingMeta training;
  nlohmann::json provenance = nlohmann::json::object();
};

inline nlohmann::json describe_layers(const Network& net) {
  nlohmann::json out = nlohmann::json::array();
  for (const Layer& layer : net.layers()) {
    nlohmann::json j = {{"type", layer_kind(layer)}};
    if (const auto* d = std::get_if<Dense>(&layer)) {
      j["in"] = d->in;
      j["out"] = d->out;
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      j["in_channels"] = c->in_channels;
      j["out_channels"] = c->out_channels;
      j["kernel"] = c->kernel;
      j["stride"] = c->stride;
      j["padding"] = c->padding;
    } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
      j["window"] = p->window;
    }
    out.push_back(std::move(j));
  }
  return out;
}

inline std::vector<Layer> layers_from_description(const nlohmann::json& desc) {
  std::vector<Layer> layers;
  for (const auto& j : desc) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "dense") {
      layers.emplace_back(Dense(j.at("in").get<std::size_t>(), j.at("out").get<std::size_t>()));
    } else if (type == "conv2d") {
      layers.emplace_back(Conv2d(j.at("in_channels").get<std::size_t>(), j.at("out_channels").get<std::size_t>(),
                                 j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>(),
                                 j.at("padding").get<std::size_t>()));
    } else if (type == "relu") {
      layers.emplace_back(Relu{});
    } else if (type == "maxpool2d") {
      layers.emplace_back(MaxPool2d{j.at("window").get<std::size_t>()});
    } else if (type == "flatten") {
      layers.emplace_back(Flatten{});
    } else {
      throw FormatError("checkpoint: unknown layer type '" + type + "'");
    }
  }
  return layers;
}

inline Container to_container(const Checkpoint& ckpt) {
  Container c;
  c.kind = "network";
  c.meta = {{"arch", ckpt.arch},
            {"input_dims", ckpt.net.input_dims()},
            {"classes", ckpt.net.classes()},
            {"layers", describe_layers(ckpt.net)},
            {"training", {{"epochs", ckpt.training.epochs}, {"seed", ckpt.training.seed}, {"method", ckpt.training.method}}},
            {"code_version", std::string(kVersion)},
            {"provenance", ckpt.provenance}};
  const auto names = ckpt.net.parameter_names();
  const auto params = ckpt.net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) c.tensors.emplace_back(names[i], *params[i]);
  return c;
}

inline Checkpoint checkpoint_from_container(const Container& c) {
  if (c.kind != "network") throw FormatError("checkpoint: container holds '" + c.kind + "', not a network");
  Checkpoint ckpt;
  try {
    ckpt.arch = c.meta.at("arch").get<std::string>();
    const auto& t = c.meta.at("training");
    ckpt.training = {t.at("epochs").get<std::size_t>(), t.at("seed").get<std::uint64_t>(),
                     t.at("method").get<std::string>()};
    ckpt.provenance = c.meta.value("provenance", nlohmann::json::object());
    ckpt.net = Network(c.meta.at("input_dims").get<Dims>(), layers_from_description(c.meta.at("layers")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: corrupt header: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint: inconsistent architecture: ") + e.what());
  }
  const auto names = ckpt.net.parameter_names();
  const auto params = ckpt.net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& stored = c.tensor(names[i]);
    if (stored.dims != params[i]->dims) throw FormatError("checkpoint: parameter '" + names[i] + "' has wrong dims");
    *params[i] = stored;
  }
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) { save_container(to_container(ckpt), path); }

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_container(load_container(path)); }

/// Network-only convenience wrappers.
inline void save(const Network& net, const std::string& path) {
  save_checkpoint(Checkpoint{"custom", net, {}, nlohmann::json::object()}, path);
}

inline Network load(const std::string& path) { return load_checkpoint(path).net; }

}  // namespace counterfort
