#pragma once

// Analytic input gradients against central finite differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfort/error.hpp"
#include "counterfort/models.hpp"
#include "counterfort/network.hpp"
#include "counterfort/rng.hpp"

namespace counterfort {

struct GradcheckConfig {
  std::string arch = "mlp-small";
  Dims input_dims = {3, 8, 8};
  std::size_t classes = 10;
  std::size_t batch = 2;
  std::size_t coordinates = 128;
  double h = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-8;  // denominators below this are raised to it
  std::uint64_t seed = 0;
  bool corrupt_backward = false;  // negative control: scales the analytic gradient by 1.01

  void validate(const std::string& prefix = "gradcheck") const {
    if (batch == 0) throw ValidationError(prefix + ".batch", "must be >= 1");
    if (coordinates == 0) throw ValidationError(prefix + ".coordinates", "must be >= 1");
    if (!(h > 0.0)) throw ValidationError(prefix + ".h", "must be > 0");
    if (!(tolerance > 0.0)) throw ValidationError(prefix + ".tolerance", "must be > 0");
    if (!(floor > 0.0)) throw ValidationError(prefix + ".floor", "must be > 0");
    if (classes < 2) throw ValidationError(prefix + ".classes", "must be at least 2");
  }
};

struct GradcheckResult {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = false;
};

inline nlohmann::json to_json(const GradcheckResult& r) {
  return {{"checked", r.checked},
          {"max_rel_error", r.max_rel_error},
          {"worst", {{"index", r.worst_index}, {"analytic", r.worst_analytic}, {"numeric", r.worst_numeric}}},
          {"passed", r.passed}};
}

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Mean cross-entropy input gradient of a freshly initialized network on
/// uniform [0,1] inputs, compared at a random sample of coordinates.
inline GradcheckResult gradient_check(const GradcheckConfig& cfg) {
  cfg.validate();
  const Network net = build(cfg.arch, cfg.input_dims, cfg.classes, derive_seed(cfg.seed, {hash_string("init")}));
  Rng rng(derive_seed(cfg.seed, {hash_string("inputs")}));
  Dims dims = {cfg.batch};
  dims.insert(dims.end(), cfg.input_dims.begin(), cfg.input_dims.end());
  ImageBatch x(dims);
  for (double& v : x.values) v = rng.uniform();
  LabelBatch labels(cfg.batch);
  for (int& y : labels) y = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.classes) - 1));

  Tensor analytic = loss_and_input_grad(net, x, labels).input_grad;
  if (cfg.corrupt_backward) {
    for (double& v : analytic.values) v *= 1.01;
  }
  std::vector<std::size_t> all(x.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto coords = rng.sample_without_replacement(std::move(all), std::min(cfg.coordinates, x.size()));
  const std::vector<double> numeric = finite_diff_grad_at(net, x, labels, cfg.h, coords);

  GradcheckResult r;
  r.checked = coords.size();
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const double err = relative_error(analytic[coords[k]], numeric[k], cfg.floor);
    if (k == 0 || err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = coords[k];
      r.worst_analytic = analytic[coords[k]];
      r.worst_numeric = numeric[k];
    }
  }
  r.passed = r.max_rel_error <= cfg.tolerance;
  return r;
}

}  // namespace counterfort
