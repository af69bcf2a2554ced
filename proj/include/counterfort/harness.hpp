#pragma once

// Repeated-run evaluation: attack columns x defense pipelines x runs.
//
// Each attack's adversarial set is produced once and shared by every
// pipeline, so pipeline comparisons within a column are paired. Run r of
// cell (attack a, pipeline p) is seeded from (master_seed, a, p, r) only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfort/attacks.hpp"
#include "counterfort/data.hpp"
#include "counterfort/defenses.hpp"
#include "counterfort/error.hpp"
#include "counterfort/models.hpp"
#include "counterfort/rng.hpp"
#include "counterfort/version.hpp"

namespace counterfort {

inline constexpr const char* kCleanAttackId = "clean";

struct AttackSpec {
  std::string id;
  std::string label;  // column header, e.g. "PGD10 (untargeted)"
  AttackConfig config;
  std::string adversarial_path;  // reuse a stored adversarial batch instead of attacking
};

struct PipelineSpec {
  std::string id;
  std::vector<Stage> stages;
};

struct EvalSpec {
  std::vector<AttackSpec> attacks;
  std::vector<PipelineSpec> pipelines;
  std::size_t runs_per_defense = 30;
  std::uint64_t master_seed = 0;
  bool include_clean = true;
  std::size_t block_size = 256;  // examples per pipeline pass
  nlohmann::json model = nlohmann::json::object();    // descriptors copied into the report
  nlohmann::json dataset = nlohmann::json::object();

  void validate(const Network& net) const {
    if (runs_per_defense < 1) throw ValidationError("runs_per_defense", "must be >= 1");
    if (block_size < 1) throw ValidationError("block_size", "must be >= 1");
    if (pipelines.empty()) throw ValidationError("pipelines", "need at least one pipeline");
    if (attacks.empty() && !include_clean) throw ValidationError("attacks", "nothing to evaluate");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < attacks.size(); ++i) {
      const std::string field = "attacks[" + std::to_string(i) + "]";
      if (attacks[i].id.empty() || attacks[i].id == kCleanAttackId || !ids.insert(attacks[i].id).second) {
        throw ValidationError(field + ".id", "must be non-empty, unique and not 'clean'");
      }
      attacks[i].config.validate(field);
    }
    ids.clear();
    for (std::size_t i = 0; i < pipelines.size(); ++i) {
      const std::string field = "pipelines[" + std::to_string(i) + "]";
      if (pipelines[i].id.empty() || !ids.insert(pipelines[i].id).second) {
        throw ValidationError(field + ".id", "must be non-empty and unique");
      }
      validate_pipeline(pipelines[i].stages, net, field + ".stages");
    }
  }
};

struct Cell {
  std::string attack;
  std::string pipeline;
  std::vector<double> runs;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation of runs
  std::string error;  // set when a stage failed; runs is then empty
};

struct ColumnInfo {
  std::string id;
  std::string label;
  nlohmann::json config;
};

struct EvaluationReport {
  nlohmann::json model = nlohmann::json::object();
  nlohmann::json dataset = nlohmann::json::object();
  std::vector<ColumnInfo> attacks;  // column order, clean first when present
  std::vector<ColumnInfo> pipelines;
  std::vector<Cell> cells;          // attack-major, then pipeline
  nlohmann::json provenance = nlohmann::json::object();

  const Cell& cell(const std::string& attack, const std::string& pipeline) const {
    for (const Cell& c : cells) {
      if (c.attack == attack && c.pipeline == pipeline) return c;
    }
    throw Error("report has no cell (" + attack + ", " + pipeline + ")");
  }
};

/// Fraction of rows whose argmax equals the label.
inline double accuracy(const Tensor& scores, std::span<const int> labels) {
  const LabelBatch predicted = argmax_rows(scores);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline void summarize(Cell& cell) {
  double sum = 0.0;
  for (double a : cell.runs) sum += a;
  cell.mean = sum / static_cast<double>(cell.runs.size());
  double sq = 0.0;
  for (double a : cell.runs) sq += (a - cell.mean) * (a - cell.mean);
  cell.std = std::sqrt(sq / static_cast<double>(cell.runs.size()));
}

/// Seed of one run. It does not depend on the pipeline, so every pipeline in
/// a column sees the same stream (paired comparison).
inline std::uint64_t run_seed(std::uint64_t master, const std::string& attack, std::size_t run) {
  return derive_seed(master, {hash_string(attack), run});
}

/// One pipeline pass over a whole set, block by block, starting at stage
/// `first`; returns the accuracy against `labels`.
inline double pipeline_accuracy(const Network& net, const ImageBatch& x, std::span<const int> labels,
                                const std::vector<Stage>& stages, std::uint64_t seed, std::size_t block_size,
                                std::size_t first = 0) {
  const std::size_t n = x.dim(0);
  std::size_t hits = 0;
  for (std::size_t b = 0, begin = 0; begin < n; ++b, begin += block_size) {
    const std::size_t end = std::min(n, begin + block_size);
    const Tensor probs = defense_pipeline(net, x.slice0(begin, end), stages, derive_seed(seed, {b}), first);
    const LabelBatch predicted = argmax_rows(probs);
    for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[begin + i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// Accuracy of every run of one pipeline. Leading stages that ignore their
/// random stream are applied once and shared by all runs; the values are the
/// same as running the full pipeline each time.
inline std::vector<double> pipeline_runs(const Network& net, const ImageBatch& x, std::span<const int> labels,
                                         const std::vector<Stage>& stages, std::uint64_t master,
                                         const std::string& attack, std::size_t runs, std::size_t block_size) {
  validate_pipeline(stages, net);
  std::size_t prefix = 0;
  while (prefix < stages.size() && stage_is_deterministic(stages[prefix], net.classes())) ++prefix;
  const ImageBatch base = prefix > 0 ? apply_pipeline(net, x, stages, 0, 0, prefix) : x;
  std::vector<double> out;
  if (prefix == stages.size()) {
    out.assign(runs, accuracy(forward(net, base), labels));
    return out;
  }
  for (std::size_t r = 0; r < runs; ++r) {
    out.push_back(pipeline_accuracy(net, base, labels, stages, run_seed(master, attack, r), block_size, prefix));
  }
  return out;
}

/// Adversarial set for one attack column. Targets for targeted attacks come
/// from a stream seeded by (master_seed, attack id).
inline AdversarialBatch generate_attack(const Network& net, const Dataset& data, const AttackSpec& attack,
                                        std::uint64_t master_seed) {
  if (!attack.adversarial_path.empty()) {
    AdversarialBatch adv = load_adversarial(attack.adversarial_path);
    if (adv.x_adv.dims != data.images.dims) {
      throw ValidationError("attacks." + attack.id + ".adversarial_path", "stored batch does not match the dataset dims");
    }
    return adv;
  }
  if (attack.config.targeted) {
    Rng rng(derive_seed(master_seed, {hash_string("targets"), hash_string(attack.id)}));
    const LabelBatch targets = draw_targets(data.labels, net.classes(), rng);
    return pgd_batched(net, data.images, targets, data.labels, attack.config);
  }
  return pgd_batched(net, data.images, data.labels, data.labels, attack.config);
}

using ProgressCallback = std::function<void(const Cell&)>;

inline EvaluationReport evaluate(const Network& net, const Dataset& data, const EvalSpec& spec,
                                 const ProgressCallback& on_cell = {}) {
  if (net.classes() != data.classes) {
    throw ValidationError("dataset.classes", "model has " + std::to_string(net.classes()) + " classes, dataset has " +
                                                 std::to_string(data.classes));
  }
  if (data.size() == 0) throw ValidationError("dataset", "is empty");
  net.check_input(data.images);
  spec.validate(net);

  EvaluationReport report;
  report.model = spec.model;
  report.dataset = spec.dataset;
  report.provenance = {{"code_version", std::string(kVersion)},
                       {"master_seed", spec.master_seed},
                       {"runs_per_defense", spec.runs_per_defense},
                       {"block_size", spec.block_size},
                       {"examples", data.size()}};
  for (const PipelineSpec& p : spec.pipelines) {
    nlohmann::json stages = nlohmann::json::array();
    for (const Stage& s : p.stages) stages.push_back(to_json(s));
    report.pipelines.push_back({p.id, p.id, stages});
  }

  auto run_column = [&](const std::string& attack_id, const ImageBatch& x) {
    for (const PipelineSpec& p : spec.pipelines) {
      Cell cell;
      cell.attack = attack_id;
      cell.pipeline = p.id;
      try {
        cell.runs = pipeline_runs(net, x, data.labels, p.stages, spec.master_seed, attack_id, spec.runs_per_defense,
                                  spec.block_size);
        summarize(cell);
      } catch (const Error& e) {
        cell.runs.clear();
        cell.error = e.what();
      }
      if (on_cell) on_cell(cell);
      report.cells.push_back(std::move(cell));
    }
  };

  if (spec.include_clean) {
    report.attacks.push_back({kCleanAttackId, kCleanAttackId, nullptr});
    run_column(kCleanAttackId, data.images);
  }
  for (const AttackSpec& a : spec.attacks) {
    nlohmann::json config = to_json(a.config);
    if (!a.adversarial_path.empty()) config["adversarial_path"] = a.adversarial_path;
    report.attacks.push_back({a.id, a.label.empty() ? a.id : a.label, config});
    const AdversarialBatch adv = generate_attack(net, data, a, spec.master_seed);
    run_column(a.id, adv.x_adv);
  }
  return report;
}

/// Accuracy of each pipeline on unattacked inputs.
inline std::vector<Cell> clean_eval(const Network& net, const Dataset& data, const std::vector<PipelineSpec>& pipelines,
                                    std::size_t runs = 1, std::uint64_t master_seed = 0) {
  EvalSpec spec;
  spec.pipelines = pipelines;
  spec.runs_per_defense = runs;
  spec.master_seed = master_seed;
  return evaluate(net, data, spec).cells;
}

// ---------------------------------------------------------------------------
// Serialization and rendering

inline nlohmann::json to_json(const EvaluationReport& r) {
  auto columns = [](const std::vector<ColumnInfo>& cols) {
    nlohmann::json out = nlohmann::json::array();
    for (const ColumnInfo& c : cols) out.push_back({{"id", c.id}, {"label", c.label}, {"config", c.config}});
    return out;
  };
  nlohmann::json cells = nlohmann::json::array();
  for (const Cell& c : r.cells) {
    nlohmann::json j = {{"attack", c.attack},   {"pipeline", c.pipeline}, {"runs", c.runs},
                        {"mean", c.mean},       {"std", c.std},           {"run_count", c.runs.size()}};
    if (!c.error.empty()) j["error"] = c.error;
    cells.push_back(std::move(j));
  }
  return {{"model", r.model},
          {"dataset", r.dataset},
          {"attacks", columns(r.attacks)},
          {"pipelines", columns(r.pipelines)},
          {"cells", cells},
          {"provenance", r.provenance}};
}

inline EvaluationReport report_from_json(const nlohmann::json& j) {
  EvaluationReport r;
  try {
    r.model = j.at("model");
    r.dataset = j.at("dataset");
    for (const auto& c : j.at("attacks")) r.attacks.push_back({c.at("id"), c.at("label"), c.at("config")});
    for (const auto& c : j.at("pipelines")) r.pipelines.push_back({c.at("id"), c.at("label"), c.at("config")});
    for (const auto& c : j.at("cells")) {
      Cell cell;
      cell.attack = c.at("attack").get<std::string>();
      cell.pipeline = c.at("pipeline").get<std::string>();
      cell.runs = c.at("runs").get<std::vector<double>>();
      cell.mean = c.at("mean").get<double>();
      cell.std = c.at("std").get<double>();
      cell.error = c.value("error", std::string());
      r.cells.push_back(std::move(cell));
    }
    r.provenance = j.at("provenance");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

/// Accuracy in percent with one decimal, e.g. 0.265 -> "26.5".
inline std::string percent_cell(double accuracy) {
  const double tenths = std::round(accuracy * 1000.0);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", tenths / 10.0);
  return buf;
}

enum class ReportFormat { Json, Csv, Markdown };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "markdown" || s == "markdown-table" || s == "md") return ReportFormat::Markdown;
  throw ValidationError("format", "unknown report format '" + s + "' (expected json, csv or markdown)");
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string cell_text(const EvaluationReport& r, const std::string& attack, const std::string& pipeline) {
  for (const Cell& c : r.cells) {
    if (c.attack == attack && c.pipeline == pipeline) return c.error.empty() ? percent_cell(c.mean) : "error";
  }
  return "";
}

}  // namespace detail

/// Pipelines as rows, attack columns (clean first) as columns.
inline std::string render_report(const EvaluationReport& r, ReportFormat format) {
  std::ostringstream out;
  switch (format) {
    case ReportFormat::Json: out << to_json(r).dump(2) << '\n'; break;
    case ReportFormat::Csv:
      out << "pipeline";
      for (const ColumnInfo& a : r.attacks) out << ',' << detail::csv_field(a.label);
      out << '\n';
      for (const ColumnInfo& p : r.pipelines) {
        out << detail::csv_field(p.id);
        for (const ColumnInfo& a : r.attacks) out << ',' << detail::cell_text(r, a.id, p.id);
        out << '\n';
      }
      break;
    case ReportFormat::Markdown:
      out << "| Defense |";
      for (const ColumnInfo& a : r.attacks) out << ' ' << a.label << " |";
      out << "\n|---|";
      for (std::size_t i = 0; i < r.attacks.size(); ++i) out << "---:|";
      out << '\n';
      for (const ColumnInfo& p : r.pipelines) {
        out << "| " << p.id << " |";
        for (const ColumnInfo& a : r.attacks) out << ' ' << detail::cell_text(r, a.id, p.id) << " |";
        out << '\n';
      }
      break;
  }
  return out.str();
}

inline std::string render_report(const EvaluationReport& r, const std::string& format) {
  return render_report(r, report_format_from_string(format));
}

}  // namespace counterfort
