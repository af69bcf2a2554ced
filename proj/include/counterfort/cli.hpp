#pragma once

// Config-file driven commands: train, attack, eval, gradcheck, diagnose, report.
//
// Every command takes one JSON config (--config). Exit codes: 0 success,
// 2 validation error, 3 runtime failure. Errors are written to stderr as a
// single JSON line.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "counterfort/attacks.hpp"
#include "counterfort/data.hpp"
#include "counterfort/defenses.hpp"
#include "counterfort/diagnose.hpp"
#include "counterfort/error.hpp"
#include "counterfort/gradcheck.hpp"
#include "counterfort/harness.hpp"
#include "counterfort/models.hpp"
#include "counterfort/parallel.hpp"
#include "counterfort/rng.hpp"
#include "counterfort/training.hpp"
#include "counterfort/version.hpp"

namespace counterfort::cli {

using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

// ---------------------------------------------------------------------------
// Config access

inline json read_config(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw ValidationError("config", "no such file: " + path);
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("config", std::string("not valid JSON: ") + e.what());
  }
}

inline std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

template <class T>
T required(const json& j, const std::string& key, const std::string& prefix = "") {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(join(prefix, key), "is required");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(join(prefix, key), "has the wrong type");
  }
}

template <class T>
T optional(const json& j, const std::string& key, T fallback, const std::string& prefix = "") {
  if (!j.is_object() || !j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(join(prefix, key), "has the wrong type");
  }
}

inline void require_file(const std::string& path, const std::string& field) {
  if (!std::filesystem::exists(path)) throw ValidationError(field, "no such file or directory: " + path);
}

inline void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

inline std::uint64_t seed_for(std::uint64_t master, const char* purpose) {
  return derive_seed(master, {hash_string(purpose)});
}

// ---------------------------------------------------------------------------
// Section parsers

inline AttackConfig parse_attack(const json& j, const std::string& prefix) {
  AttackConfig c;
  c.epsilon = optional(j, "epsilon", c.epsilon, prefix);
  c.step = optional(j, "step", c.step, prefix);
  c.iters = optional(j, "iters", c.iters, prefix);
  c.targeted = optional(j, "targeted", c.targeted, prefix);
  c.random_start = optional(j, "random_start", c.random_start, prefix);
  c.validate(prefix);
  return c;
}

inline TrainConfig parse_train(const json& j, std::uint64_t master_seed) {
  const std::string p = "train";
  TrainConfig c;
  c.epochs = optional(j, "epochs", c.epochs, p);
  c.batch_size = optional(j, "batch_size", c.batch_size, p);
  c.lr = optional(j, "lr", c.lr, p);
  c.momentum = optional(j, "momentum", c.momentum, p);
  if (j.contains("lr_drops")) {
    c.lr_drops.clear();
    for (const auto& d : optional(j, "lr_drops", std::vector<std::pair<std::size_t, double>>{}, p)) {
      c.lr_drops.push_back({d.first, d.second});
    }
  }
  c.method = train_method_from_string(optional(j, "method", to_string(c.method), p));
  c.mixup_alpha = optional(j, "mixup_alpha", c.mixup_alpha, p);
  c.mixup_beta = optional(j, "mixup_beta", c.mixup_beta, p);
  c.iat_ratio = optional(j, "iat_ratio", c.iat_ratio, p);
  if (j.contains("iat_attack")) c.iat_attack = parse_attack(j.at("iat_attack"), p + ".iat_attack");
  c.seed = seed_for(master_seed, "train");
  c.iat_attack.seed = seed_for(master_seed, "iat");
  c.validate(p);
  return c;
}

inline void check_source(const json& source, const std::string& field) {
  const std::string kind = required<std::string>(source, "kind", field);
  if (kind == "cifar10" || kind == "cifar100" || kind == "file") {
    require_file(required<std::string>(source, "path", field), field + ".path");
  } else if (kind == "synthetic") {
    required<std::size_t>(source, "classes", field);
    required<std::size_t>(source, "n", field);
    required<Dims>(source, "dims", field);
    if (!(required<double>(source, "separation", field) > 0.0)) {
      throw ValidationError(field + ".separation", "must be > 0");
    }
    required<std::uint64_t>(source, "seed", field);
  } else {
    throw ValidationError(field + ".kind", "unknown dataset kind '" + kind + "'");
  }
}

/// "dataset": <source>, optional "subset": {"n", "seed"}.
struct DatasetSection {
  json source;
  std::optional<std::pair<std::size_t, std::uint64_t>> subset;

  json describe() const {
    json j = {{"source", source}};
    if (subset) j["subset"] = {{"n", subset->first}, {"seed", subset->second}};
    return j;
  }

  Dataset load() const {
    DatasetHandle h = open_dataset(source);
    if (subset) h = counterfort::subset(h, subset->first, subset->second);
    return materialize(h);
  }
};

inline DatasetSection parse_dataset(const json& cfg, const std::string& key = "dataset") {
  DatasetSection d;
  d.source = required<json>(cfg, key);
  check_source(d.source, key);
  const std::string subset_key = key == "dataset" ? "subset" : key + "_subset";
  if (cfg.contains(subset_key)) {
    const json& s = cfg.at(subset_key);
    d.subset = {{required<std::size_t>(s, "n", subset_key), required<std::uint64_t>(s, "seed", subset_key)}};
  }
  return d;
}

inline std::shared_ptr<const Dataset> load_pool(const json& pool) {
  DatasetSection d;
  d.source = pool.contains("source") ? pool.at("source") : pool;
  check_source(d.source, "pool");
  if (pool.contains("subset")) {
    d.subset = {{required<std::size_t>(pool.at("subset"), "n", "pool.subset"),
                 required<std::uint64_t>(pool.at("subset"), "seed", "pool.subset")}};
  }
  return std::make_shared<const Dataset>(d.load());
}

inline DefenseMode parse_mode(const std::string& s, const std::string& field) {
  if (s == "targeted") return DefenseMode::Targeted;
  if (s == "untargeted") return DefenseMode::Untargeted;
  throw ValidationError(field, "must be targeted or untargeted");
}

inline std::vector<Stage> parse_stages(const json& stages, const std::string& field) {
  if (!stages.is_array() || stages.empty()) throw ValidationError(field, "must be a non-empty array");
  std::vector<Stage> out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string f = field + "[" + std::to_string(i) + "]";
    try {
      out.push_back(stage_from_json(stages[i], load_pool));
    } catch (const ValidationError& e) {
      throw ValidationError(f + "." + e.field(), e.what());
    } catch (const json::exception& e) {
      throw ValidationError(f, e.what());
    }
  }
  return out;
}

inline json provenance(const std::string& command, const json& cfg) {
  return {{"command", command}, {"config", cfg}, {"code_version", std::string(kVersion)}};
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_train(const json& cfg, std::ostream& out) {
  const auto master = optional<std::uint64_t>(cfg, "master_seed", 0);
  const auto arch = required<std::string>(cfg, "arch");
  const DatasetSection dataset = parse_dataset(cfg);
  const TrainConfig tc = parse_train(optional<json>(cfg, "train", json::object()), master);
  const json output = required<json>(cfg, "output");
  const auto ckpt_path = required<std::string>(output, "checkpoint", "output");
  const auto log_path = optional<std::string>(output, "log", "", "output");

  const Dataset data = dataset.load();
  const Dims image_dims(data.images.dims.begin() + 1, data.images.dims.end());
  Network net = build(arch, image_dims, data.classes, seed_for(master, "init"));

  std::ofstream log;
  if (!log_path.empty()) {
    ensure_parent(log_path);
    log.open(log_path, std::ios::binary);
  }
  const TrainResult result = train(std::move(net), data, tc, [&](const EpochLog& e) {
    const std::string line = to_json(e).dump();
    out << line << '\n';
    if (log) log << line << '\n';
  });

  Checkpoint ckpt{arch, result.net, {tc.epochs, tc.seed, to_string(tc.method)}, provenance("train", cfg)};
  ckpt.provenance["dataset"] = dataset.describe();
  ensure_parent(ckpt_path);
  save_checkpoint(ckpt, ckpt_path);
  return kExitOk;
}

inline int cmd_attack(const json& cfg, std::ostream& out) {
  const auto master = optional<std::uint64_t>(cfg, "master_seed", 0);
  const auto ckpt_path = required<std::string>(cfg, "checkpoint");
  require_file(ckpt_path, "checkpoint");
  const DatasetSection dataset = parse_dataset(cfg);
  AttackConfig ac = parse_attack(optional<json>(cfg, "attack", json::object()), "attack");
  ac.seed = seed_for(master, "attack");
  const auto adv_path = required<std::string>(required<json>(cfg, "output"), "adversarial", "output");
  const auto batch = optional<std::size_t>(cfg, "batch_size", 256);
  if (batch == 0) throw ValidationError("batch_size", "must be >= 1");

  const Network net = load_checkpoint(ckpt_path).net;
  const Dataset data = dataset.load();
  if (data.classes != net.classes()) throw ValidationError("dataset", "class count does not match the checkpoint");
  AdversarialBatch adv;
  if (ac.targeted) {
    Rng rng(seed_for(master, "targets"));
    const LabelBatch targets = draw_targets(data.labels, net.classes(), rng);
    adv = pgd_batched(net, data.images, targets, data.labels, ac, batch);
  } else {
    adv = pgd_batched(net, data.images, data.labels, data.labels, ac, batch);
  }
  json prov = provenance("attack", cfg);
  prov["dataset"] = dataset.describe();
  ensure_parent(adv_path);
  save_adversarial(adv, adv_path, prov);
  out << json{{"adversarial", adv_path}, {"examples", data.size()}, {"max_abs_delta", max_abs(adv.delta.span())}}.dump()
      << '\n';
  return kExitOk;
}

inline EvalSpec parse_eval_spec(const json& cfg, const Network& net) {
  EvalSpec spec;
  spec.master_seed = optional<std::uint64_t>(cfg, "master_seed", 0);
  spec.runs_per_defense = optional<std::size_t>(cfg, "runs_per_defense", spec.runs_per_defense);
  spec.include_clean = optional(cfg, "include_clean", spec.include_clean);
  spec.block_size = optional(cfg, "block_size", spec.block_size);
  const json attacks = optional<json>(cfg, "attacks", json::array());
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    const std::string f = "attacks[" + std::to_string(i) + "]";
    AttackSpec a;
    a.id = required<std::string>(attacks[i], "id", f);
    a.label = optional<std::string>(attacks[i], "label", a.id, f);
    a.config = parse_attack(attacks[i], f);
    a.config.seed = derive_seed(spec.master_seed, {hash_string("attack"), hash_string(a.id)});
    a.adversarial_path = optional<std::string>(attacks[i], "adversarial", "", f);
    if (!a.adversarial_path.empty()) require_file(a.adversarial_path, f + ".adversarial");
    spec.attacks.push_back(std::move(a));
  }
  const json pipelines = required<json>(cfg, "pipelines");
  if (!pipelines.is_array()) throw ValidationError("pipelines", "must be an array");
  for (std::size_t i = 0; i < pipelines.size(); ++i) {
    const std::string f = "pipelines[" + std::to_string(i) + "]";
    spec.pipelines.push_back({required<std::string>(pipelines[i], "id", f),
                              parse_stages(required<json>(pipelines[i], "stages", f), f + ".stages")});
  }
  spec.validate(net);
  return spec;
}

inline int cmd_eval(const json& cfg, std::ostream& out) {
  const auto ckpt_path = required<std::string>(cfg, "checkpoint");
  require_file(ckpt_path, "checkpoint");
  const DatasetSection dataset = parse_dataset(cfg);
  const json output = required<json>(cfg, "output");
  const auto json_path = optional<std::string>(output, "json", "", "output");
  const auto csv_path = optional<std::string>(output, "csv", "", "output");
  const auto md_path = optional<std::string>(output, "markdown", "", "output");

  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  EvalSpec spec = parse_eval_spec(cfg, ckpt.net);
  spec.model = {{"path", ckpt_path}, {"arch", ckpt.arch}, {"classes", ckpt.net.classes()}};
  spec.dataset = dataset.describe();
  const Dataset data = dataset.load();

  EvaluationReport report = evaluate(ckpt.net, data, spec, [&](const Cell& c) {
    json line = {{"attack", c.attack}, {"pipeline", c.pipeline}, {"mean", c.mean}, {"std", c.std}};
    if (!c.error.empty()) line["error"] = c.error;
    out << line.dump() << '\n';
  });
  report.provenance["config"] = cfg;
  if (!json_path.empty()) write_text(json_path, render_report(report, ReportFormat::Json));
  if (!csv_path.empty()) write_text(csv_path, render_report(report, ReportFormat::Csv));
  if (!md_path.empty()) write_text(md_path, render_report(report, ReportFormat::Markdown));
  if (json_path.empty() && csv_path.empty() && md_path.empty()) out << render_report(report, ReportFormat::Markdown);
  return kExitOk;
}

inline int cmd_gradcheck(const json& cfg, std::ostream& out) {
  GradcheckConfig g;
  g.arch = required<std::string>(cfg, "arch");
  g.input_dims = optional(cfg, "input_dims", g.input_dims);
  g.classes = optional(cfg, "classes", g.classes);
  g.batch = optional(cfg, "batch", g.batch);
  g.coordinates = optional(cfg, "coordinates", g.coordinates);
  g.h = optional(cfg, "h", g.h);
  g.tolerance = optional(cfg, "tolerance", g.tolerance);
  g.floor = optional(cfg, "floor", g.floor);
  g.corrupt_backward = optional(cfg, "corrupt_backward", g.corrupt_backward);
  g.seed = seed_for(optional<std::uint64_t>(cfg, "master_seed", 0), "gradcheck");
  g.validate("");
  const GradcheckResult r = gradient_check(g);
  json j = to_json(r);
  j["arch"] = g.arch;
  j["tolerance"] = g.tolerance;
  out << j.dump() << '\n';
  if (!r.passed) throw Error("gradcheck failed: max relative error " + std::to_string(r.max_rel_error) +
                             " at input coordinate " + std::to_string(r.worst_index));
  return kExitOk;
}

inline int cmd_diagnose(const json& cfg, std::ostream& out) {
  const auto ckpt_path = required<std::string>(cfg, "checkpoint");
  require_file(ckpt_path, "checkpoint");
  const auto adv_path = required<std::string>(cfg, "adversarial");
  require_file(adv_path, "adversarial");
  const double step = optional(cfg, "def_step", 4.0 / 255.0);
  if (!(step >= 0.0)) throw ValidationError("def_step", "must be >= 0");
  const DefenseMode mode = parse_mode(optional<std::string>(cfg, "mode", "targeted"), "mode");
  const auto max_examples = optional<std::size_t>(cfg, "max_examples", 200);
  const bool misclassified_only = optional(cfg, "misclassified_only", true);
  const json output = optional<json>(cfg, "output", json::object());

  const Network net = load_checkpoint(ckpt_path).net;
  const AdversarialBatch adv = load_adversarial(adv_path);
  if (adv.labels.size() != adv.x_adv.dim(0)) throw ValidationError("adversarial", "batch carries no true labels");
  const DiagnosticSummary s = diagnose(net, adv.x_adv, adv.labels, step, mode, max_examples, misclassified_only);
  json j = to_json(s);
  j["provenance"] = provenance("diagnose", cfg);
  const std::string md = render_diagnostic_markdown(s);
  const auto json_path = optional<std::string>(output, "json", "", "output");
  const auto md_path = optional<std::string>(output, "markdown", "", "output");
  if (!json_path.empty()) write_text(json_path, j.dump(2) + "\n");
  if (!md_path.empty()) write_text(md_path, md);
  out << j.at("summary").dump() << '\n' << md;
  return kExitOk;
}

/// Re-renders a stored JSON report: {"input", "format" | "formats", "output" | "outputs"}.
inline int cmd_report(const json& cfg, std::ostream& out) {
  const auto input = required<std::string>(cfg, "input");
  require_file(input, "input");
  const auto format = report_format_from_string(optional<std::string>(cfg, "format", "markdown"));
  const auto output = optional<std::string>(cfg, "output", "");
  std::ifstream in(input);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  const std::string text = render_report(report_from_json(j), format);
  if (output.empty()) {
    out << text;
  } else {
    write_text(output, text);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline void report_error(std::ostream& err, const char* kind, const std::string& message, const std::string& field = "") {
  json j = {{"error", kind}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  err << j.dump() << '\n';
}

/// Thread count: COUNTERFORT_THREADS wins over --threads; 0 or unset means
/// all available cores.
inline std::size_t resolve_threads(std::size_t flag) {
  if (const char* env = std::getenv("COUNTERFORT_THREADS"); env != nullptr && *env != '\0') {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(env, &pos);
      if (pos != std::string(env).size() || v < 0) throw std::invalid_argument("negative");
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ValidationError("COUNTERFORT_THREADS", "must be a non-negative integer");
    }
  }
  return flag;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"counterfort: adversarial attacks and inference-time defenses at desk scale"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = all cores); COUNTERFORT_THREADS overrides");

  struct Command {
    const char* name;
    const char* help;
    int (*fn)(const json&, std::ostream&);
  };
  const Command commands[] = {
      {"train", "train a classifier", cmd_train},
      {"attack", "generate an adversarial batch", cmd_attack},
      {"eval", "evaluate defense pipelines against attacks", cmd_eval},
      {"gradcheck", "compare analytic and finite-difference input gradients", cmd_gradcheck},
      {"diagnose", "per-label probability shifts from single defense perturbations", cmd_diagnose},
      {"report", "render a stored evaluation report", cmd_report},
  };
  std::string config_path;
  for (const Command& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("-c,--config", config_path, "JSON config file")->required();
    sub->add_option("--threads", threads, "worker threads (0 = all cores)");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what());
    return kExitValidation;
  }

  try {
    set_max_threads(resolve_threads(threads));
    for (const Command& c : commands) {
      if (app.got_subcommand(c.name)) return c.fn(read_config(config_path), out);
    }
    return kExitValidation;
  } catch (const ValidationError& e) {
    report_error(err, "validation", e.what(), e.field());
    return kExitValidation;
  } catch (const std::exception& e) {
    report_error(err, "runtime", e.what());
    return kExitRuntime;
  }
}

}  // namespace counterfort::cli
