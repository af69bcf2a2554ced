#pragma once

// Minibatch SGD with momentum: plain cross-entropy, mixup, and interpolated
// adversarial training (IAT).

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfort/attacks.hpp"
#include "counterfort/data.hpp"
#include "counterfort/error.hpp"
#include "counterfort/network.hpp"
#include "counterfort/rng.hpp"

namespace counterfort {

enum class TrainMethod { Plain, Mixup, Iat };

inline std::string to_string(TrainMethod m) {
  switch (m) {
    case TrainMethod::Plain: return "plain";
    case TrainMethod::Mixup: return "mixup";
    case TrainMethod::Iat: return "iat";
  }
  return "plain";
}

inline TrainMethod train_method_from_string(const std::string& s) {
  if (s == "plain") return TrainMethod::Plain;
  if (s == "mixup") return TrainMethod::Mixup;
  if (s == "iat") return TrainMethod::Iat;
  throw ValidationError("train.method", "unknown method '" + s + "' (expected plain, mixup or iat)");
}

struct LrDrop {
  std::size_t epoch;  // 0-based epoch at which the drop takes effect
  double factor;      // learning rate is divided by this
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  std::vector<LrDrop> lr_drops = {{20, 10.0}, {25, 10.0}};
  TrainMethod method = TrainMethod::Mixup;
  double mixup_alpha = 1.0;
  double mixup_beta = 1.0;
  std::pair<std::size_t, std::size_t> iat_ratio = {1, 1};  // clean : adversarial
  AttackConfig iat_attack{8.0 / 255.0, 2.0 / 255.0, 10, false, false, 0};
  std::uint64_t seed = 0;

  void validate(const std::string& prefix = "train") const {
    if (epochs == 0) throw ValidationError(prefix + ".epochs", "must be >= 1");
    if (batch_size == 0) throw ValidationError(prefix + ".batch_size", "must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError(prefix + ".lr", "must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError(prefix + ".momentum", "must be in [0, 1)");
    for (const auto& d : lr_drops) {
      if (!(d.factor > 0.0)) throw ValidationError(prefix + ".lr_drops", "factors must be positive");
    }
    if (!(mixup_alpha > 0.0 && mixup_beta > 0.0)) {
      throw ValidationError(prefix + ".mixup_beta_params", "Beta parameters must be positive");
    }
    if (iat_ratio.first + iat_ratio.second == 0) throw ValidationError(prefix + ".iat_ratio", "must not be 0:0");
    iat_attack.validate(prefix + ".iat_attack");
  }

  double lr_at(std::size_t epoch) const {
    double rate = lr;
    for (const auto& d : lr_drops) {
      if (epoch >= d.epoch) rate /= d.factor;
    }
    return rate;
  }
};

struct EpochLog {
  std::size_t epoch;
  double loss;
  double train_acc;
  double lr;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"loss", e.loss}, {"train_acc", e.train_acc}, {"lr", e.lr}};
}

// ---------------------------------------------------------------------------
// Mixup

/// Interpolated inputs with the two label sets and their loss weights.
struct MixupBatch {
  ImageBatch x;
  LabelBatch y1;
  LabelBatch y2;
  double w1 = 1.0;
  double w2 = 0.0;

  /// Soft targets w1 * onehot(y1) + w2 * onehot(y2); cross-entropy against
  /// these equals w1 * CE(y1) + w2 * CE(y2).
  Tensor targets(std::size_t classes) const {
    Tensor t(Dims{y1.size(), classes});
    for (std::size_t i = 0; i < y1.size(); ++i) {
      t[i * classes + static_cast<std::size_t>(y1[i])] += w1;
      t[i * classes + static_cast<std::size_t>(y2[i])] += w2;
    }
    return t;
  }
};

inline MixupBatch mixup_batch(const ImageBatch& x1, std::span<const int> y1, const ImageBatch& x2,
                              std::span<const int> y2, double lambda) {
  require_same_dims(x1, x2, "mixup_batch");
  if (y1.size() != y2.size() || y1.size() != x1.dim(0)) throw ShapeError("mixup_batch: label counts do not match");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("lambda", "must be in [0, 1]");
  MixupBatch out;
  out.x = Tensor(x1.dims);
  const double rest = 1.0 - lambda;
  for (std::size_t i = 0; i < x1.size(); ++i) out.x[i] = lambda * x1[i] + rest * x2[i];
  out.y1.assign(y1.begin(), y1.end());
  out.y2.assign(y2.begin(), y2.end());
  out.w1 = lambda;
  out.w2 = rest;
  return out;
}

/// One lambda per batch and a same-batch partner permutation.
struct MixupDraw {
  double lambda = 1.0;
  std::vector<std::size_t> partner;
};

inline MixupDraw draw_mixup(Rng& rng, std::size_t batch, double alpha, double beta) {
  MixupDraw d;
  d.lambda = rng.beta(alpha, beta);
  d.partner = rng.permutation(batch);
  return d;
}

inline MixupBatch mixup_with_partner(const ImageBatch& x, std::span<const int> y, const MixupDraw& draw) {
  const ImageBatch x2 = x.gather0(draw.partner);
  LabelBatch y2(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) y2[i] = y[draw.partner[i]];
  return mixup_batch(x, y, x2, y2, draw.lambda);
}

// ---------------------------------------------------------------------------
// IAT

/// Everything one IAT objective evaluation produced, for inspection.
struct IatStep {
  MixupDraw draw;
  double clean_weight = 1.0;
  double adv_weight = 0.0;
  GradResult clean;
  std::optional<GradResult> adversarial;
  std::optional<ImageBatch> x_adv;
  double loss = 0.0;
  std::vector<Tensor> grads;
};

/// Weighted average of the mixup loss on interpolated clean pairs and on
/// interpolated adversarial pairs. Adversarial examples are generated first
/// (against the current parameters), then interpolated with the same draw.
inline IatStep iat_objective(const Network& net, const ImageBatch& x, std::span<const int> y, const MixupDraw& draw,
                             const TrainConfig& cfg, std::uint64_t attack_stream) {
  IatStep step;
  step.draw = draw;
  const double total = static_cast<double>(cfg.iat_ratio.first + cfg.iat_ratio.second);
  step.clean_weight = static_cast<double>(cfg.iat_ratio.first) / total;
  step.adv_weight = static_cast<double>(cfg.iat_ratio.second) / total;

  const std::size_t classes = net.classes();
  const MixupBatch clean = mixup_with_partner(x, y, draw);
  step.clean = loss_and_grad(net, clean.x, clean.targets(classes));
  if (cfg.iat_ratio.second == 0) {
    step.loss = step.clean.loss;
    step.grads = step.clean.param_grads;
    return step;
  }
  AttackConfig attack = cfg.iat_attack;
  attack.targeted = false;
  step.x_adv = pgd(net, x, y, attack, attack_stream).x_adv;
  const MixupBatch adv = mixup_with_partner(*step.x_adv, y, draw);
  step.adversarial = loss_and_grad(net, adv.x, adv.targets(classes));

  if (cfg.iat_ratio.first == 0) {
    step.loss = step.adversarial->loss;
    step.grads = step.adversarial->param_grads;
    return step;
  }
  step.loss = step.clean_weight * step.clean.loss + step.adv_weight * step.adversarial->loss;
  step.grads = step.clean.param_grads;
  for (std::size_t k = 0; k < step.grads.size(); ++k) {
    const Tensor& ga = step.adversarial->param_grads[k];
    for (std::size_t j = 0; j < ga.size(); ++j) {
      step.grads[k][j] = step.clean_weight * step.grads[k][j] + step.adv_weight * ga[j];
    }
  }
  return step;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop

/// Heavy-ball momentum: v = momentum * v + g, p -= lr * v.
class Sgd {
 public:
  explicit Sgd(double momentum) : momentum_(momentum) {}

  void apply(Network& net, const std::vector<Tensor>& grads, double lr) {
    auto params = net.parameters();
    if (velocity_.empty()) {
      for (const Tensor* p : params) velocity_.emplace_back(p->dims);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& v = velocity_[k];
      const Tensor& g = grads[k];
      Tensor& p = *params[k];
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j];
        p[j] -= lr * v[j];
      }
    }
  }

 private:
  double momentum_;
  std::vector<Tensor> velocity_;
};

struct TrainResult {
  Network net;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains a copy of `net`. Fully determined by cfg.seed: one stream drives
/// shuffling and mixup draws; IAT attacks use streams derived from
/// (seed, epoch, batch).
inline TrainResult train(Network net, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.size() == 0) throw ValidationError("dataset", "is empty");
  if (data.classes != net.classes()) {
    throw ValidationError("dataset.classes", "dataset has " + std::to_string(data.classes) + " classes, model has " +
                                                 std::to_string(net.classes()));
  }
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= net.classes()) throw ValidationError("dataset.labels", "label out of range");
  }

  Rng rng(cfg.seed);
  Sgd sgd(cfg.momentum);
  TrainResult result;
  const std::size_t n = data.size();
  const std::size_t classes = net.classes();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    const auto order = rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0, batch = 0; begin < n; begin += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const Dataset b = data.select(idx);

      double loss = 0.0;
      std::vector<Tensor> grads;
      LabelBatch predicted;
      LabelBatch reference = b.labels;
      if (cfg.method == TrainMethod::Plain) {
        GradResult g = loss_and_grad(net, b.images, one_hot(b.labels, classes));
        loss = g.loss;
        grads = std::move(g.param_grads);
        predicted = argmax_rows(g.logits);
      } else {
        const MixupDraw draw = draw_mixup(rng, b.size(), cfg.mixup_alpha, cfg.mixup_beta);
        if (draw.lambda < 0.5) {
          for (std::size_t i = 0; i < b.size(); ++i) reference[i] = b.labels[draw.partner[i]];
        }
        if (cfg.method == TrainMethod::Mixup) {
          const MixupBatch mixed = mixup_with_partner(b.images, b.labels, draw);
          GradResult g = loss_and_grad(net, mixed.x, mixed.targets(classes));
          loss = g.loss;
          grads = std::move(g.param_grads);
          predicted = argmax_rows(g.logits);
        } else {
          IatStep step = iat_objective(net, b.images, b.labels, draw, cfg, derive_seed(cfg.seed, {epoch, batch}));
          loss = step.loss;
          grads = std::move(step.grads);
          predicted = argmax_rows(step.clean.logits);
        }
      }
      if (!std::isfinite(loss)) {
        throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch));
      }
      sgd.apply(net, grads, lr);
      loss_sum += loss * static_cast<double>(b.size());
      for (std::size_t i = 0; i < b.size(); ++i) correct += predicted[i] == reference[i] ? 1 : 0;
    }
    EpochLog entry{epoch + 1, loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n), lr};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  result.net = std::move(net);
  return result;
}

}  // namespace counterfort
