#pragma once

// Aggregates counteraction_diagnostic over a set of adversarial examples.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfort/defenses.hpp"
#include "counterfort/error.hpp"
#include "counterfort/models.hpp"

namespace counterfort {

/// P(X >= successes) for X ~ Binomial(trials, 1/2).
inline double sign_test_upper(std::size_t successes, std::size_t trials) {
  if (successes == 0) return 1.0;
  if (successes > trials) return 0.0;
  const double n = static_cast<double>(trials);
  double p = 0.0;
  for (std::size_t k = successes; k <= trials; ++k) {
    const double kk = static_cast<double>(k);
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(kk + 1.0) - std::lgamma(n - kk + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

struct DiagnosticGroup {
  std::size_t index;  // position in the adversarial batch
  int label_true;
  int label_adv;
  std::vector<DiagnosticRow> rows;
};

struct LabelSummary {
  int label;
  std::size_t count = 0;
  double mean_delta_adv = 0.0;
  double mean_delta_true = 0.0;
};

struct DiagnosticSummary {
  std::vector<DiagnosticGroup> groups;
  std::vector<LabelSummary> per_label;
  double mean_delta_adv = 0.0;
  double mean_delta_true = 0.0;
  std::size_t negative = 0;  // groups whose mean delta on label_adv is < 0
  std::size_t positive = 0;
  std::size_t ties = 0;
  double sign_test_p = 1.0;  // one-sided, H1: the adversarial label loses probability
};

/// Runs the diagnostic on up to `max_examples` examples of x_adv that the
/// model misclassifies (or on all of them when `misclassified_only` is false,
/// using the prediction as label_adv).
inline DiagnosticSummary diagnose(const Network& net, const ImageBatch& x_adv, std::span<const int> labels,
                                  double step, DefenseMode mode, std::size_t max_examples,
                                  bool misclassified_only = true) {
  if (labels.size() != x_adv.dim(0)) throw ShapeError("diagnose: need one true label per example");
  const LabelBatch predicted = predict(net, x_adv);
  DiagnosticSummary s;
  std::vector<LabelSummary> by_label(net.classes());
  for (std::size_t c = 0; c < by_label.size(); ++c) by_label[c].label = static_cast<int>(c);
  double sum_adv = 0.0, sum_true = 0.0;
  std::size_t row_count = 0;
  for (std::size_t i = 0; i < predicted.size() && s.groups.size() < max_examples; ++i) {
    if (misclassified_only && predicted[i] == labels[i]) continue;
    DiagnosticGroup g{i, labels[i], predicted[i],
                      counteraction_diagnostic(net, x_adv.slice0(i, i + 1), labels[i], predicted[i], step, mode)};
    double group_adv = 0.0;
    for (const DiagnosticRow& r : g.rows) {
      auto& entry = by_label[static_cast<std::size_t>(r.label)];
      ++entry.count;
      entry.mean_delta_adv += r.delta_adv;
      entry.mean_delta_true += r.delta_true;
      group_adv += r.delta_adv;
      sum_adv += r.delta_adv;
      sum_true += r.delta_true;
      ++row_count;
    }
    if (group_adv < 0.0) {
      ++s.negative;
    } else if (group_adv > 0.0) {
      ++s.positive;
    } else {
      ++s.ties;
    }
    s.groups.push_back(std::move(g));
  }
  for (LabelSummary& e : by_label) {
    if (e.count == 0) continue;
    e.mean_delta_adv /= static_cast<double>(e.count);
    e.mean_delta_true /= static_cast<double>(e.count);
    s.per_label.push_back(e);
  }
  if (row_count > 0) {
    s.mean_delta_adv = sum_adv / static_cast<double>(row_count);
    s.mean_delta_true = sum_true / static_cast<double>(row_count);
  }
  s.sign_test_p = sign_test_upper(s.negative, s.negative + s.positive);
  return s;
}

inline nlohmann::json to_json(const DiagnosticSummary& s) {
  nlohmann::json groups = nlohmann::json::array();
  for (const DiagnosticGroup& g : s.groups) {
    nlohmann::json rows = nlohmann::json::array();
    for (const DiagnosticRow& r : g.rows) {
      rows.push_back({{"label", r.label}, {"delta_adv", r.delta_adv}, {"delta_true", r.delta_true}});
    }
    groups.push_back({{"index", g.index}, {"label_true", g.label_true}, {"label_adv", g.label_adv}, {"rows", rows}});
  }
  nlohmann::json per_label = nlohmann::json::array();
  for (const LabelSummary& e : s.per_label) {
    per_label.push_back({{"label", e.label},
                         {"count", e.count},
                         {"mean_delta_adv", e.mean_delta_adv},
                         {"mean_delta_true", e.mean_delta_true}});
  }
  return {{"examples", s.groups.size()},
          {"groups", groups},
          {"per_label", per_label},
          {"summary",
           {{"mean_delta_adv", s.mean_delta_adv},
            {"mean_delta_true", s.mean_delta_true},
            {"negative", s.negative},
            {"positive", s.positive},
            {"ties", s.ties},
            {"sign_test_p", s.sign_test_p}}}};
}

/// Per-label means as a markdown table with text bars scaled to the largest
/// magnitude.
inline std::string render_diagnostic_markdown(const DiagnosticSummary& s) {
  double scale = 0.0;
  for (const LabelSummary& e : s.per_label) {
    scale = std::max({scale, std::abs(e.mean_delta_adv), std::abs(e.mean_delta_true)});
  }
  auto bar = [&](double v) {
    const int width = scale > 0.0 ? static_cast<int>(std::lround(20.0 * std::abs(v) / scale)) : 0;
    return std::string(v < 0.0 ? "-" : "+") + std::string(static_cast<std::size_t>(width), '#');
  };
  std::ostringstream out;
  char buf[64];
  out << "| label | count | mean dp(adv) | mean dp(true) | adv | true |\n|---:|---:|---:|---:|:---|:---|\n";
  for (const LabelSummary& e : s.per_label) {
    out << "| " << e.label << " | " << e.count << " | ";
    std::snprintf(buf, sizeof buf, "%+.5f | %+.5f", e.mean_delta_adv, e.mean_delta_true);
    out << buf << " | " << bar(e.mean_delta_adv) << " | " << bar(e.mean_delta_true) << " |\n";
  }
  std::snprintf(buf, sizeof buf, "%+.5f", s.mean_delta_adv);
  out << "\nexamples: " << s.groups.size() << ", mean dp(adv): " << buf;
  std::snprintf(buf, sizeof buf, "%+.5f", s.mean_delta_true);
  out << ", mean dp(true): " << buf << ", negative/positive/ties: " << s.negative << '/' << s.positive << '/'
      << s.ties;
  std::snprintf(buf, sizeof buf, "%.3g", s.sign_test_p);
  out << ", sign test p: " << buf << '\n';
  return out.str();
}

}  // namespace counterfort
