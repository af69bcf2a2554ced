#pragma once

// White-box gradient attacks in the l-infinity threat model: FGSM and
// multi-step PGD, untargeted and targeted.

#include <algorithm>
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

/// Slack allowed on the budget for floating-point rounding of x + eps.
inline constexpr double kBudgetSlack = 1e-12;

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double step = 2.0 / 255.0;
  std::size_t iters = 10;
  bool targeted = false;
  bool random_start = false;
  std::uint64_t seed = 0;

  void validate(const std::string& prefix = "attack") const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ValidationError(prefix + ".epsilon", "must be >= 0");
    if (iters >= 1 && !(step > 0.0)) throw ValidationError(prefix + ".step", "must be > 0 when iters >= 1");
    if (!std::isfinite(step)) throw ValidationError(prefix + ".step", "must be finite");
  }
};

inline nlohmann::json to_json(const AttackConfig& c) {
  return {{"epsilon", c.epsilon}, {"step", c.step},         {"iters", c.iters},
          {"targeted", c.targeted}, {"random_start", c.random_start}, {"seed", c.seed}};
}

inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.epsilon = j.value("epsilon", c.epsilon);
  c.step = j.value("step", c.step);
  c.iters = j.value("iters", c.iters);
  c.targeted = j.value("targeted", c.targeted);
  c.random_start = j.value("random_start", c.random_start);
  c.seed = j.value("seed", c.seed);
  return c;
}

struct AdversarialBatch {
  ImageBatch x_adv;
  Tensor delta;  // x_adv - x_clean
  AttackConfig config;
  LabelBatch labels;   // true labels
  LabelBatch targets;  // attack targets; empty unless targeted
};

/// Clamps every coordinate of t into [center - radius, center + radius].
inline Tensor linf_project(const Tensor& t, const Tensor& center, double radius) {
  require_same_dims(t, center, "linf_project");
  if (!(radius >= 0.0)) throw ValidationError("radius", "must be >= 0");
  Tensor out(t.dims);
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = std::clamp(t[i], center[i] - radius, center[i] + radius);
  return out;
}

/// Input gradient of the summed per-example cross-entropy. Summation keeps
/// each example's gradient independent of the batch it was computed in.
inline Tensor input_gradient(const Network& net, const ImageBatch& x, std::span<const int> labels) {
  return loss_and_grad(net, x, one_hot(labels, net.classes()), {Reduction::Sum, true, false}).input_grad;
}

/// Per example, a label drawn uniformly from the classes other than the true one.
inline LabelBatch draw_targets(std::span<const int> labels, std::size_t classes, Rng& rng) {
  LabelBatch out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto t = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(classes) - 2));
    if (t >= labels[i]) ++t;
    out[i] = t;
  }
  return out;
}

namespace detail {

inline void check_budget(const Tensor& x_adv, const Tensor& x, double epsilon) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(std::abs(x_adv[i] - x[i]) <= epsilon + kBudgetSlack) || x_adv[i] < 0.0 || x_adv[i] > 1.0) {
      throw std::logic_error("attack iterate left the epsilon ball or the pixel range");
    }
  }
}

inline AdversarialBatch finish(const Tensor& x, Tensor x_adv, const AttackConfig& cfg, std::span<const int> labels) {
  AdversarialBatch out;
  out.delta = Tensor(x.dims);
  for (std::size_t i = 0; i < x.size(); ++i) out.delta[i] = x_adv[i] - x[i];
  out.x_adv = std::move(x_adv);
  out.config = cfg;
  if (cfg.targeted) {
    out.targets.assign(labels.begin(), labels.end());
  } else {
    out.labels.assign(labels.begin(), labels.end());
  }
  return out;
}

}  // namespace detail

/// x_adv = clip(x + epsilon * sign(grad_x L(x, y)), 0, 1) with sign(0) = 0.
inline AdversarialBatch fgsm(const Network& net, const ImageBatch& x, std::span<const int> labels, double epsilon) {
  if (!(epsilon >= 0.0)) throw ValidationError("attack.epsilon", "must be >= 0");
  const Tensor g = input_gradient(net, x, labels);
  Tensor x_adv(x.dims);
  for (std::size_t i = 0; i < x.size(); ++i) x_adv[i] = std::clamp(x[i] + epsilon * sign(g[i]), 0.0, 1.0);
  detail::check_budget(x_adv, x, epsilon);
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  cfg.step = epsilon;
  cfg.iters = 1;
  return detail::finish(x, std::move(x_adv), cfg, labels);
}

/// Projected gradient sign iterations starting at x (or a uniform point of
/// the epsilon ball). Untargeted steps ascend the loss of `labels`; targeted
/// steps descend the loss of the target labels. Each iterate is projected
/// onto the ball around x and then clipped to [0,1].
/// `stream` selects the random-start stream (e.g. the batch index).
inline AdversarialBatch pgd(const Network& net, const ImageBatch& x, std::span<const int> labels,
                            const AttackConfig& cfg, std::uint64_t stream = 0) {
  cfg.validate();
  if (labels.size() != x.dim(0)) throw ShapeError("pgd: label count does not match batch");
  Tensor cur = x;
  if (cfg.random_start) {
    Rng rng(derive_seed(cfg.seed, {stream}));
    for (std::size_t i = 0; i < cur.size(); ++i) {
      cur[i] = std::clamp(x[i] + rng.uniform(-cfg.epsilon, cfg.epsilon), 0.0, 1.0);
    }
    detail::check_budget(cur, x, cfg.epsilon);
  }
  const double direction = cfg.targeted ? -1.0 : 1.0;
  for (std::size_t t = 0; t < cfg.iters; ++t) {
    const Tensor g = input_gradient(net, cur, labels);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const double stepped = cur[i] + direction * cfg.step * sign(g[i]);
      const double projected = std::clamp(stepped, x[i] - cfg.epsilon, x[i] + cfg.epsilon);
      cur[i] = std::clamp(projected, 0.0, 1.0);
    }
    detail::check_budget(cur, x, cfg.epsilon);
  }
  return detail::finish(x, std::move(cur), cfg, labels);
}

/// Attacks a large set in batches of `batch_size`; batch b draws its random
/// start from stream b. For targeted attacks `labels` are the targets and
/// `true_labels` are recorded alongside.
inline AdversarialBatch pgd_batched(const Network& net, const ImageBatch& x, std::span<const int> labels,
                                    std::span<const int> true_labels, const AttackConfig& cfg,
                                    std::size_t batch_size = 256) {
  cfg.validate();
  const std::size_t n = x.dim(0);
  AdversarialBatch out;
  out.x_adv = Tensor(x.dims);
  out.delta = Tensor(x.dims);
  out.config = cfg;
  out.labels.assign(true_labels.begin(), true_labels.end());
  if (cfg.targeted) out.targets.assign(labels.begin(), labels.end());
  const std::size_t per = x.stride0();
  for (std::size_t b = 0, begin = 0; begin < n; ++b, begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    const AdversarialBatch part = pgd(net, x.slice0(begin, end), labels.subspan(begin, end - begin), cfg, b);
    std::copy(part.x_adv.values.begin(), part.x_adv.values.end(), out.x_adv.data() + begin * per);
    std::copy(part.delta.values.begin(), part.delta.values.end(), out.delta.data() + begin * per);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline Container to_container(const AdversarialBatch& adv, const nlohmann::json& provenance = nlohmann::json::object()) {
  if (max_abs(adv.delta.span()) > adv.config.epsilon + kBudgetSlack) {
    throw std::logic_error("adversarial batch violates its epsilon budget");
  }
  Container c;
  c.kind = "adversarial";
  c.meta = {{"attack", to_json(adv.config)}, {"code_version", std::string(kVersion)}, {"provenance", provenance}};
  c.tensors.emplace_back("x_adv", adv.x_adv);
  c.tensors.emplace_back("delta", adv.delta);
  auto as_tensor = [](const LabelBatch& l) { return Tensor(Dims{l.size()}, std::vector<double>(l.begin(), l.end())); };
  if (!adv.labels.empty()) c.tensors.emplace_back("labels", as_tensor(adv.labels));
  if (!adv.targets.empty()) c.tensors.emplace_back("targets", as_tensor(adv.targets));
  return c;
}

inline AdversarialBatch adversarial_from_container(const Container& c) {
  if (c.kind != "adversarial") throw FormatError("adversarial: container holds '" + c.kind + "'");
  AdversarialBatch adv;
  adv.config = attack_config_from_json(c.meta.at("attack"));
  adv.x_adv = c.tensor("x_adv");
  adv.delta = c.tensor("delta");
  auto labels_of = [&](const char* name) {
    LabelBatch l;
    if (c.has_tensor(name)) {
      for (double v : c.tensor(name).values) l.push_back(static_cast<int>(v));
    }
    return l;
  };
  adv.labels = labels_of("labels");
  adv.targets = labels_of("targets");
  return adv;
}

inline void save_adversarial(const AdversarialBatch& adv, const std::string& path,
                             const nlohmann::json& provenance = nlohmann::json::object()) {
  save_container(to_container(adv, provenance), path);
}

inline AdversarialBatch load_adversarial(const std::string& path) {
  return adversarial_from_container(load_container(path));
}

}  // namespace counterfort
