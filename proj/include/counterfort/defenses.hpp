#pragma once

// Inference-time defenses.
//
// counteract() adds an aggregate of one-step gradient-sign perturbations
// computed for randomly chosen non-predicted labels, clamped to a mu-ball,
// before classification. The transformation baselines (Gaussian noise,
// random rotation, resize+pad, crop+rescale, mixup inference with other
// labels) can run alone or after it in a stage pipeline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfort/attacks.hpp"
#include "counterfort/data.hpp"
#include "counterfort/error.hpp"
#include "counterfort/models.hpp"
#include "counterfort/network.hpp"
#include "counterfort/rng.hpp"

namespace counterfort {

/// Direction of the one-step defense perturbations: targeted steps descend
/// the loss of the drawn label, untargeted steps ascend it.
enum class DefenseMode { Targeted, Untargeted };

struct DefenseConfig {
  std::size_t n_labels = 9;
  double def_step = 4.0 / 255.0;
  double mu = 8.0 / 255.0;
  DefenseMode mode = DefenseMode::Targeted;
  std::uint64_t seed = 0;

  void validate(std::size_t classes, const std::string& prefix = "defense") const {
    if (n_labels < 1 || n_labels + 1 > classes) {
      throw ValidationError(prefix + ".n_labels", "must be in [1, " + std::to_string(classes - 1) + "], got " +
                                                      std::to_string(n_labels));
    }
    if (!(def_step > 0.0) || !std::isfinite(def_step)) throw ValidationError(prefix + ".def_step", "must be > 0");
    if (!(mu >= 0.0) || !std::isfinite(mu)) throw ValidationError(prefix + ".mu", "must be >= 0");
  }
};

struct CounteractResult {
  ImageBatch x_defended;
  Tensor agg_pert;  // clamp(sum of one-step perturbations, -mu, mu)
  LabelBatch predicted;
  std::vector<LabelBatch> drawn_labels;  // per example
};

/// Counteraction with caller-chosen labels per example (every example must
/// list between 1 and classes-1 labels). All one-step perturbations are taken
/// at the original input, independently of each other.
inline CounteractResult counteract_with_labels(const Network& net, const ImageBatch& x,
                                               const std::vector<LabelBatch>& labels, const DefenseConfig& cfg,
                                               LabelBatch predicted = {}) {
  net.check_input(x);
  const std::size_t n = x.dim(0);
  if (labels.size() != n) throw ShapeError("counteract: need one label list per example");
  if (!(cfg.def_step > 0.0)) throw ValidationError("defense.def_step", "must be > 0");
  if (!(cfg.mu >= 0.0)) throw ValidationError("defense.mu", "must be >= 0");
  const std::size_t per = x.stride0();
  const double direction = cfg.mode == DefenseMode::Targeted ? -1.0 : 1.0;

  CounteractResult out;
  out.agg_pert = Tensor(x.dims);
  out.x_defended = Tensor(x.dims);
  out.predicted = std::move(predicted);
  out.drawn_labels = labels;

  // Examples are processed in blocks so the replicated batch stays small.
  constexpr std::size_t kBlock = 32;
  for (std::size_t begin = 0; begin < n; begin += kBlock) {
    const std::size_t end = std::min(n, begin + kBlock);
    std::vector<std::size_t> owner;
    LabelBatch copy_labels;
    for (std::size_t e = begin; e < end; ++e) {
      for (int l : labels[e]) {
        owner.push_back(e);
        copy_labels.push_back(l);
      }
    }
    const Tensor grads = input_gradient(net, x.gather0(owner), copy_labels);
    for (std::size_t k = 0; k < owner.size(); ++k) {
      double* agg = out.agg_pert.data() + owner[k] * per;
      const double* g = grads.data() + k * per;
      for (std::size_t j = 0; j < per; ++j) agg[j] += direction * cfg.def_step * sign(g[j]);
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.agg_pert[i] = std::clamp(out.agg_pert[i], -cfg.mu, cfg.mu);
    out.x_defended[i] = std::clamp(x[i] + out.agg_pert[i], 0.0, 1.0);
  }
  return out;
}

/// Draws cfg.n_labels distinct labels per example from the classes other than
/// the model's prediction, then counteracts.
inline CounteractResult counteract(const Network& net, const ImageBatch& x, const DefenseConfig& cfg, Rng& rng) {
  cfg.validate(net.classes());
  LabelBatch predicted = predict(net, x);
  std::vector<LabelBatch> drawn(predicted.size());
  for (std::size_t e = 0; e < predicted.size(); ++e) {
    LabelBatch candidates;
    for (std::size_t c = 0; c < net.classes(); ++c) {
      if (static_cast<int>(c) != predicted[e]) candidates.push_back(static_cast<int>(c));
    }
    drawn[e] = rng.sample_without_replacement(std::move(candidates), cfg.n_labels);
  }
  return counteract_with_labels(net, x, drawn, cfg, std::move(predicted));
}

inline CounteractResult counteract(const Network& net, const ImageBatch& x, const DefenseConfig& cfg) {
  Rng rng(cfg.seed);
  return counteract(net, x, cfg, rng);
}

// ---------------------------------------------------------------------------
// Probability-shift diagnostic

struct DiagnosticRow {
  int label;              // j, the label the one-step perturbation was made for
  double delta_adv;       // f(x_adv + eta_j)[label_adv] - f(x_adv)[label_adv]
  double delta_true;      // f(x_adv + eta_j)[label_true] - f(x_adv)[label_true]
};

/// For every j != label_adv, the change in the probabilities of the
/// adversarial and the true label when the single one-step perturbation
/// eta_j (step `step`, direction `mode`) is added to x_adv. The perturbed
/// input is clipped to [0,1]. `x_adv` holds one example.
inline std::vector<DiagnosticRow> counteraction_diagnostic(const Network& net, const ImageBatch& x_adv, int label_true,
                                                           int label_adv, double step,
                                                           DefenseMode mode = DefenseMode::Targeted) {
  net.check_input(x_adv);
  if (x_adv.dim(0) != 1) throw ShapeError("counteraction_diagnostic: expects a single example");
  const auto classes = static_cast<int>(net.classes());
  if (label_true < 0 || label_true >= classes || label_adv < 0 || label_adv >= classes) {
    throw ValidationError("labels", "label out of range");
  }
  const Tensor base = softmax(forward(net, x_adv));
  LabelBatch others;
  for (int j = 0; j < classes; ++j) {
    if (j != label_adv) others.push_back(j);
  }
  const std::vector<std::size_t> copies(others.size(), 0);
  const ImageBatch replicated = x_adv.gather0(copies);
  Tensor perturbed = replicated;
  if (step != 0.0) {
    const Tensor g = input_gradient(net, replicated, others);
    const double direction = mode == DefenseMode::Targeted ? -1.0 : 1.0;
    for (std::size_t i = 0; i < perturbed.size(); ++i) {
      perturbed[i] = std::clamp(perturbed[i] + direction * step * sign(g[i]), 0.0, 1.0);
    }
  }
  const Tensor probs = softmax(forward(net, perturbed));
  const auto l = static_cast<std::size_t>(classes);
  std::vector<DiagnosticRow> rows;
  for (std::size_t k = 0; k < others.size(); ++k) {
    rows.push_back({others[k], probs[k * l + static_cast<std::size_t>(label_adv)] - base[static_cast<std::size_t>(label_adv)],
                    probs[k * l + static_cast<std::size_t>(label_true)] - base[static_cast<std::size_t>(label_true)]});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Transformations

enum class TransformKind { Gaussian, Rotate, ResizePad, CropRescale, MiOl };

inline std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Gaussian: return "gaussian";
    case TransformKind::Rotate: return "rotate";
    case TransformKind::ResizePad: return "resize_pad";
    case TransformKind::CropRescale: return "crop_rescale";
    case TransformKind::MiOl: return "mi_ol";
  }
  return "gaussian";
}

using SizeRange = std::pair<std::size_t, std::size_t>;

struct TransformConfig {
  TransformKind kind = TransformKind::Gaussian;
  double sigma = 8.0 / 255.0;
  double max_angle_deg = 15.0;
  SizeRange size_range = {22, 30};
  SizeRange crop_range = {22, 30};
  double lambda_ol = 0.5;
  std::size_t samples = 1;  // mi_ol: pool draws whose probabilities are averaged in one execution
  std::shared_ptr<const Dataset> pool;  // clean examples for mi_ol
  nlohmann::json pool_source;           // descriptor of `pool`, for provenance
  std::uint64_t seed = 0;

  void validate(const Dims& image_dims, const std::string& prefix = "transform") const {
    const std::size_t side = image_dims.size() == 3 ? std::min(image_dims[1], image_dims[2]) : 0;
    auto check_range = [&](const SizeRange& r, const char* field) {
      if (side == 0) throw ValidationError(prefix + "." + field, "geometric transforms need [C,H,W] images");
      if (r.first == 0 || r.first > r.second || r.second > side) {
        throw ValidationError(prefix + "." + field, "must satisfy 0 < lo <= hi <= " + std::to_string(side));
      }
    };
    switch (kind) {
      case TransformKind::Gaussian:
        if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ValidationError(prefix + ".sigma", "must be >= 0");
        break;
      case TransformKind::Rotate:
        if (!(max_angle_deg >= 0.0) || !std::isfinite(max_angle_deg)) {
          throw ValidationError(prefix + ".max_angle_deg", "must be >= 0");
        }
        break;
      case TransformKind::ResizePad: check_range(size_range, "size_range"); break;
      case TransformKind::CropRescale: check_range(crop_range, "crop_range"); break;
      case TransformKind::MiOl:
        if (!(lambda_ol > 0.0 && lambda_ol <= 1.0)) throw ValidationError(prefix + ".lambda_ol", "must be in (0, 1]");
        if (samples == 0) throw ValidationError(prefix + ".samples", "must be >= 1");
        if (!pool || pool->size() == 0) throw ValidationError(prefix + ".pool", "mi_ol needs a non-empty clean pool");
        if (Dims(pool->images.dims.begin() + 1, pool->images.dims.end()) != image_dims) {
          throw ValidationError(prefix + ".pool", "pool image dims do not match the inputs");
        }
        break;
    }
  }
};

namespace detail {

// Bilinear resize of one [h, w] plane with half-pixel centres and edge clamping.
inline void resize_plane(const double* src, std::size_t ih, std::size_t iw, double* dst, std::size_t oh,
                         std::size_t ow) {
  const double sy = static_cast<double>(ih) / static_cast<double>(oh);
  const double sx = static_cast<double>(iw) / static_cast<double>(ow);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    const double fy_src = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(ih - 1));
    const auto y0 = static_cast<std::size_t>(fy_src);
    const std::size_t y1 = std::min(y0 + 1, ih - 1);
    const double fy = fy_src - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const double fx_src = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(iw - 1));
      const auto x0 = static_cast<std::size_t>(fx_src);
      const std::size_t x1 = std::min(x0 + 1, iw - 1);
      const double fx = fx_src - static_cast<double>(x0);
      const double top = (1.0 - fx) * src[y0 * iw + x0] + fx * src[y0 * iw + x1];
      const double bottom = (1.0 - fx) * src[y1 * iw + x0] + fx * src[y1 * iw + x1];
      dst[oy * ow + ox] = (1.0 - fy) * top + fy * bottom;
    }
  }
}

// Bilinear sample of a plane; taps outside the frame read as 0.
inline double sample_zero(const double* src, std::size_t h, std::size_t w, double y, double x) {
  const double yf = std::floor(y), xf = std::floor(x);
  const double fy = y - yf, fx = x - xf;
  const auto y0 = static_cast<long long>(yf), x0 = static_cast<long long>(xf);
  auto at = [&](long long yy, long long xx) {
    if (yy < 0 || xx < 0 || yy >= static_cast<long long>(h) || xx >= static_cast<long long>(w)) return 0.0;
    return src[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
  };
  const double top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1);
  const double bottom = (1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1);
  return (1.0 - fy) * top + fy * bottom;
}

}  // namespace detail

/// Applies one transformation to every example. `predicted` (the model's
/// labels for x) is required by mi_ol only.
inline ImageBatch transform(const ImageBatch& x, const TransformConfig& cfg, Rng& rng,
                            std::span<const int> predicted = {}) {
  const Dims image_dims(x.dims.begin() + 1, x.dims.end());
  cfg.validate(image_dims);
  const std::size_t n = x.dim(0), per = x.stride0();
  ImageBatch out(x.dims);

  switch (cfg.kind) {
    case TransformKind::Gaussian:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + cfg.sigma * rng.normal(), 0.0, 1.0);
      break;

    case TransformKind::Rotate: {
      const std::size_t ch = image_dims[0], h = image_dims[1], w = image_dims[2];
      const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
      for (std::size_t e = 0; e < n; ++e) {
        const double angle = rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg) * std::numbers::pi / 180.0;
        const double c = std::cos(angle), s = std::sin(angle);
        for (std::size_t k = 0; k < ch; ++k) {
          const double* src = x.data() + e * per + k * h * w;
          double* dst = out.data() + e * per + k * h * w;
          for (std::size_t oy = 0; oy < h; ++oy) {
            for (std::size_t ox = 0; ox < w; ++ox) {
              const double dy = static_cast<double>(oy) - cy, dx = static_cast<double>(ox) - cx;
              const double sx = c * dx + s * dy + cx;
              const double sy = -s * dx + c * dy + cy;
              dst[oy * w + ox] = std::clamp(detail::sample_zero(src, h, w, sy, sx), 0.0, 1.0);
            }
          }
        }
      }
      break;
    }

    case TransformKind::ResizePad: {
      const std::size_t ch = image_dims[0], h = image_dims[1], w = image_dims[2];
      for (std::size_t e = 0; e < n; ++e) {
        const auto s = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.size_range.first),
                                                                static_cast<std::int64_t>(cfg.size_range.second)));
        const auto top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - s)));
        const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - s)));
        std::vector<double> small(s * s);
        for (std::size_t k = 0; k < ch; ++k) {
          const double* src = x.data() + e * per + k * h * w;
          double* dst = out.data() + e * per + k * h * w;
          detail::resize_plane(src, h, w, small.data(), s, s);
          for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t xx = 0; xx < s; ++xx) dst[(top + y) * w + left + xx] = std::clamp(small[y * s + xx], 0.0, 1.0);
          }
        }
      }
      break;
    }

    case TransformKind::CropRescale: {
      const std::size_t ch = image_dims[0], h = image_dims[1], w = image_dims[2];
      for (std::size_t e = 0; e < n; ++e) {
        const auto s = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.crop_range.first),
                                                                static_cast<std::int64_t>(cfg.crop_range.second)));
        const auto top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - s)));
        const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - s)));
        std::vector<double> crop(s * s);
        for (std::size_t k = 0; k < ch; ++k) {
          const double* src = x.data() + e * per + k * h * w;
          for (std::size_t y = 0; y < s; ++y) {
            std::copy_n(src + (top + y) * w + left, s, crop.data() + y * s);
          }
          double* dst = out.data() + e * per + k * h * w;
          detail::resize_plane(crop.data(), s, s, dst, h, w);
          for (std::size_t i = 0; i < h * w; ++i) dst[i] = std::clamp(dst[i], 0.0, 1.0);
        }
      }
      break;
    }

    case TransformKind::MiOl: {
      if (predicted.size() != n) throw ShapeError("mi_ol: need one predicted label per example");
      const Dataset& pool = *cfg.pool;
      std::vector<std::vector<std::size_t>> by_class(std::max<std::size_t>(pool.classes, 1));
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto y = static_cast<std::size_t>(pool.labels[i]);
        if (y >= by_class.size()) by_class.resize(y + 1);
        by_class[y].push_back(i);
      }
      for (std::size_t e = 0; e < n; ++e) {
        std::size_t eligible = 0;
        for (std::size_t c = 0; c < by_class.size(); ++c) {
          if (static_cast<int>(c) != predicted[e]) eligible += by_class[c].size();
        }
        if (eligible == 0) {
          throw ValidationError("transform.pool", "mi_ol pool has no example outside predicted class " +
                                                      std::to_string(predicted[e]));
        }
        auto pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(eligible) - 1));
        std::size_t chosen = 0;
        for (std::size_t c = 0; c < by_class.size(); ++c) {
          if (static_cast<int>(c) == predicted[e]) continue;
          if (pick < by_class[c].size()) {
            chosen = by_class[c][pick];
            break;
          }
          pick -= by_class[c].size();
        }
        const double* src = x.data() + e * per;
        const double* mate = pool.images.data() + chosen * per;
        double* dst = out.data() + e * per;
        const double rest = 1.0 - cfg.lambda_ol;
        for (std::size_t i = 0; i < per; ++i) dst[i] = std::clamp(cfg.lambda_ol * src[i] + rest * mate[i], 0.0, 1.0);
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipelines

struct IdentityStage {};

using Stage = std::variant<IdentityStage, DefenseConfig, TransformConfig>;

inline std::string stage_kind(const Stage& s) {
  if (std::holds_alternative<IdentityStage>(s)) return "identity";
  if (std::holds_alternative<DefenseConfig>(s)) return "counteract";
  return to_string(std::get<TransformConfig>(s).kind);
}

inline void validate_pipeline(const std::vector<Stage>& stages, const Network& net, const std::string& prefix = "stages") {
  if (stages.empty()) throw ValidationError(prefix, "pipeline needs at least one stage");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string field = prefix + "[" + std::to_string(i) + "]";
    if (const auto* d = std::get_if<DefenseConfig>(&stages[i])) {
      if (i != 0) throw ValidationError(field, "counteract must be the first stage");
      d->validate(net.classes(), field);
    } else if (const auto* t = std::get_if<TransformConfig>(&stages[i])) {
      t->validate(net.input_dims(), field);
      if (t->kind == TransformKind::MiOl && t->samples > 1 && i + 1 != stages.size()) {
        throw ValidationError(field + ".samples", "multi-sample mi_ol must be the last stage");
      }
    }
  }
}

/// Stream for stage i: keyed by the stage kind and how many stages of that
/// kind precede it, so the same transform draws the same randomness in
/// different pipelines (paired comparisons).
inline std::uint64_t stage_seed(const std::vector<Stage>& stages, std::size_t i, std::uint64_t seed) {
  const std::string kind = stage_kind(stages[i]);
  std::uint64_t occurrence = 0;
  for (std::size_t k = 0; k < i; ++k) occurrence += stage_kind(stages[k]) == kind ? 1 : 0;
  std::uint64_t own = 0;
  if (const auto* d = std::get_if<DefenseConfig>(&stages[i])) own = d->seed;
  if (const auto* t = std::get_if<TransformConfig>(&stages[i])) own = t->seed;
  return derive_seed(seed, {hash_string(kind), occurrence, own});
}

/// True when the stage output does not depend on its random stream.
inline bool stage_is_deterministic(const Stage& s, std::size_t classes) {
  if (std::holds_alternative<IdentityStage>(s)) return true;
  if (const auto* d = std::get_if<DefenseConfig>(&s)) return d->n_labels + 1 == classes || d->mu == 0.0;
  return false;
}

/// One stochastic pass of stages [first, last) over x.
inline ImageBatch apply_pipeline(const Network& net, const ImageBatch& x, const std::vector<Stage>& stages,
                                 std::uint64_t seed, std::size_t first = 0,
                                 std::size_t last = std::numeric_limits<std::size_t>::max()) {
  validate_pipeline(stages, net);
  ImageBatch cur = x;
  for (std::size_t i = first; i < std::min(last, stages.size()); ++i) {
    if (const auto* d = std::get_if<DefenseConfig>(&stages[i])) {
      Rng rng(stage_seed(stages, i, seed));
      cur = counteract(net, cur, *d, rng).x_defended;
    } else if (const auto* t = std::get_if<TransformConfig>(&stages[i])) {
      Rng rng(stage_seed(stages, i, seed));
      LabelBatch predicted;
      if (t->kind == TransformKind::MiOl) predicted = predict(net, cur);
      cur = transform(cur, *t, rng, predicted);
    }
  }
  return cur;
}

/// Softmax probabilities after one pipeline pass. A final mi_ol stage with
/// samples > 1 averages the probabilities of that many pool draws.
inline Tensor defense_pipeline(const Network& net, const ImageBatch& x, const std::vector<Stage>& stages,
                               std::uint64_t seed, std::size_t first = 0) {
  const auto* last = stages.empty() ? nullptr : std::get_if<TransformConfig>(&stages.back());
  if (last == nullptr || last->kind != TransformKind::MiOl || last->samples <= 1 || first >= stages.size()) {
    return softmax(forward(net, apply_pipeline(net, x, stages, seed, first)));
  }
  const std::size_t k = stages.size() - 1;
  const ImageBatch cur = apply_pipeline(net, x, stages, seed, first, k);
  const LabelBatch predicted = predict(net, cur);
  const std::uint64_t base = stage_seed(stages, k, seed);
  Tensor mean;
  for (std::size_t s = 0; s < last->samples; ++s) {
    Rng rng(derive_seed(base, {s}));
    const Tensor p = softmax(forward(net, transform(cur, *last, rng, predicted)));
    if (s == 0) {
      mean = p;
    } else {
      for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
    }
  }
  for (double& v : mean.values) v /= static_cast<double>(last->samples);
  return mean;
}

// ---------------------------------------------------------------------------
// JSON descriptors
//
//   {"kind": "identity"}
//   {"kind": "counteract", "n_labels", "def_step", "mu", "mode": "targeted"|"untargeted", "seed"}
//   {"kind": "gaussian", "sigma"}            {"kind": "rotate", "max_angle_deg"}
//   {"kind": "resize_pad", "size_range": [lo, hi]}
//   {"kind": "crop_rescale", "crop_range": [lo, hi]}
//   {"kind": "mi_ol", "lambda_ol", "samples", "pool": <dataset source>}

using PoolLoader = std::function<std::shared_ptr<const Dataset>(const nlohmann::json&)>;

inline Stage stage_from_json(const nlohmann::json& j, const PoolLoader& load_pool = {}) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "identity") return IdentityStage{};
  if (kind == "counteract") {
    DefenseConfig d;
    d.n_labels = j.value("n_labels", d.n_labels);
    d.def_step = j.value("def_step", d.def_step);
    d.mu = j.value("mu", d.mu);
    const std::string mode = j.value("mode", std::string("targeted"));
    if (mode != "targeted" && mode != "untargeted") throw ValidationError("mode", "must be targeted or untargeted");
    d.mode = mode == "targeted" ? DefenseMode::Targeted : DefenseMode::Untargeted;
    d.seed = j.value("seed", d.seed);
    return d;
  }
  TransformConfig t;
  if (kind == "gaussian") {
    t.kind = TransformKind::Gaussian;
  } else if (kind == "rotate") {
    t.kind = TransformKind::Rotate;
  } else if (kind == "resize_pad") {
    t.kind = TransformKind::ResizePad;
  } else if (kind == "crop_rescale") {
    t.kind = TransformKind::CropRescale;
  } else if (kind == "mi_ol") {
    t.kind = TransformKind::MiOl;
  } else {
    throw ValidationError("kind", "unknown stage kind '" + kind + "'");
  }
  t.sigma = j.value("sigma", t.sigma);
  t.max_angle_deg = j.value("max_angle_deg", t.max_angle_deg);
  if (j.contains("size_range")) t.size_range = j.at("size_range").get<SizeRange>();
  if (j.contains("crop_range")) t.crop_range = j.at("crop_range").get<SizeRange>();
  t.lambda_ol = j.value("lambda_ol", t.lambda_ol);
  t.samples = j.value("samples", t.samples);
  t.seed = j.value("seed", t.seed);
  if (t.kind == TransformKind::MiOl) {
    if (!j.contains("pool")) throw ValidationError("pool", "mi_ol needs a clean pool dataset");
    if (!load_pool) throw ValidationError("pool", "no pool loader available");
    t.pool_source = j.at("pool");
    t.pool = load_pool(t.pool_source);
  }
  return t;
}

inline nlohmann::json to_json(const Stage& s) {
  if (std::holds_alternative<IdentityStage>(s)) return {{"kind", "identity"}};
  if (const auto* d = std::get_if<DefenseConfig>(&s)) {
    return {{"kind", "counteract"},
            {"n_labels", d->n_labels},
            {"def_step", d->def_step},
            {"mu", d->mu},
            {"mode", d->mode == DefenseMode::Targeted ? "targeted" : "untargeted"},
            {"seed", d->seed}};
  }
  const auto& t = std::get<TransformConfig>(s);
  nlohmann::json j = {{"kind", to_string(t.kind)}, {"seed", t.seed}};
  switch (t.kind) {
    case TransformKind::Gaussian: j["sigma"] = t.sigma; break;
    case TransformKind::Rotate: j["max_angle_deg"] = t.max_angle_deg; break;
    case TransformKind::ResizePad: j["size_range"] = t.size_range; break;
    case TransformKind::CropRescale: j["crop_range"] = t.crop_range; break;
    case TransformKind::MiOl:
      j["lambda_ol"] = t.lambda_ol;
      j["samples"] = t.samples;
      j["pool"] = t.pool_source;
      break;
  }
  return j;
}

}  // namespace counterfort
