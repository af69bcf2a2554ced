#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "counterfort/cli.hpp"
#include "oracles.hpp"

using namespace counterfort;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  oracle::TempDir dir{"cli"};

  std::string path(const std::string& name) const { return dir.file(name); }

  std::string write_config(const std::string& name, const json& cfg) const {
    std::ofstream(path(name)) << cfg.dump(2);
    return path(name);
  }

  Outcome run(const std::string& command, const json& cfg, const std::string& name = "cfg.json") const {
    std::ostringstream out, err;
    const int code = cli::run({command, "-c", write_config(name, cfg)}, out, err);
    return {code, out.str(), err.str()};
  }

  json dataset(std::size_t n, std::uint64_t stream) const {
    return {{"kind", "synthetic"}, {"classes", 4}, {"n", n}, {"dims", {3, 6, 6}},
            {"separation", 1.5},   {"seed", 1},    {"stream", stream}};
  }

  json train_cfg() const {
    return {{"master_seed", 3},
            {"arch", "mlp-small"},
            {"dataset", dataset(160, 0)},
            {"train", {{"epochs", 2}, {"batch_size", 32}, {"lr", 0.05}, {"lr_drops", json::array()}, {"method", "mixup"}}},
            {"output", {{"checkpoint", path("model.cfb")}, {"log", path("train.jsonl")}}}};
  }

  json attack_cfg(double eps) const {
    return {{"master_seed", 3},
            {"checkpoint", path("model.cfb")},
            {"dataset", dataset(40, 1)},
            {"attack", {{"epsilon", eps}, {"step", 0.01}, {"iters", 3}}},
            {"output", {{"adversarial", path("adv.cfb")}}}};
  }

  json eval_cfg() const {
    return {{"master_seed", 3},
            {"checkpoint", path("model.cfb")},
            {"dataset", dataset(40, 1)},
            {"runs_per_defense", 2},
            {"attacks",
             {{{"id", "pgd_u"}, {"label", "PGD3 (untargeted)"}, {"epsilon", 0.03}, {"step", 0.01}, {"iters", 3}},
              {{"id", "pgd_t"}, {"label", "PGD3 (targeted)"}, {"epsilon", 0.03}, {"step", 0.01}, {"iters", 3}, {"targeted", true}}}},
            {"pipelines",
             {{{"id", "none"}, {"stages", {{{"kind", "identity"}}}}},
              {{"id", "counteract"}, {"stages", {{{"kind", "counteract"}, {"n_labels", 3}}}}},
              {{"id", "counteract+gaussian"}, {"stages", {{{"kind", "counteract"}, {"n_labels", 3}}, {{"kind", "gaussian"}}}}},
              {{"id", "mi_ol"}, {"stages", {{{"kind", "mi_ol"}, {"pool", {{"source", dataset(30, 2)}}}}}}}}},
            {"output", {{"json", path("report.json")}, {"csv", path("report.csv")}, {"markdown", path("report.md")}}}};
  }

  void train_model() const { ASSERT_EQ(run("train", train_cfg(), "train.json").code, 0); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(Cli, TrainWritesLoadableCheckpointAndLog) {
  const Outcome o = run("train", train_cfg());
  ASSERT_EQ(o.code, 0) << o.err;
  const Checkpoint ckpt = load_checkpoint(path("model.cfb"));
  EXPECT_EQ(ckpt.arch, "mlp-small");
  EXPECT_EQ(ckpt.net.classes(), 4u);
  EXPECT_EQ(ckpt.provenance.at("command"), "train");
  std::istringstream log(slurp(path("train.jsonl")));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const json j = json::parse(line);
    EXPECT_EQ(j.at("epoch"), ++lines);
  }
  EXPECT_EQ(lines, 2u);
  EXPECT_EQ(o.out, slurp(path("train.jsonl")));
}

TEST_F(Cli, RerunsAreByteIdentical) {
  train_model();
  const std::string model = slurp(path("model.cfb"));
  ASSERT_EQ(run("attack", attack_cfg(0.03)).code, 0);
  const std::string adv = slurp(path("adv.cfb"));
  ASSERT_EQ(run("eval", eval_cfg()).code, 0);
  const std::string report = slurp(path("report.json"));

  train_model();
  ASSERT_EQ(run("attack", attack_cfg(0.03)).code, 0);
  ASSERT_EQ(run("eval", eval_cfg()).code, 0);
  EXPECT_EQ(slurp(path("model.cfb")), model);
  EXPECT_EQ(slurp(path("adv.cfb")), adv);
  EXPECT_EQ(slurp(path("report.json")), report);
}

TEST_F(Cli, ValidationErrorNamesField) {
  json cfg = train_cfg();
  cfg["train"]["momentum"] = 1.2;
  const Outcome o = run("train", cfg);
  EXPECT_EQ(o.code, cli::kExitValidation);
  const json err = json::parse(o.err);
  EXPECT_EQ(err.at("error"), "validation");
  EXPECT_EQ(err.at("field"), "train.momentum");
  EXPECT_FALSE(std::filesystem::exists(path("model.cfb")));

  cfg = train_cfg();
  cfg["train"]["epochs"] = "many";
  EXPECT_EQ(json::parse(run("train", cfg).err).at("field"), "train.epochs");
  cfg = train_cfg();
  cfg.erase("arch");
  EXPECT_EQ(json::parse(run("train", cfg).err).at("field"), "arch");
}

TEST_F(Cli, ZeroEpsilonAttackHasZeroDelta) {
  train_model();
  const Outcome o = run("attack", attack_cfg(0.0));
  ASSERT_EQ(o.code, 0) << o.err;
  const AdversarialBatch adv = load_adversarial(path("adv.cfb"));
  EXPECT_EQ(max_abs(adv.delta.span()), 0.0);
  EXPECT_EQ(json::parse(o.out).at("max_abs_delta"), 0.0);
}

TEST_F(Cli, EvalWritesAllFormats) {
  train_model();
  const Outcome o = run("eval", eval_cfg());
  ASSERT_EQ(o.code, 0) << o.err;
  const std::string md = slurp(path("report.md"));
  EXPECT_EQ(md.rfind("| Defense | clean | PGD3 (untargeted) | PGD3 (targeted) |\n", 0), 0u);
  EXPECT_NE(md.find("| counteract+gaussian |"), std::string::npos);
  const EvaluationReport r = report_from_json(json::parse(slurp(path("report.json"))));
  EXPECT_EQ(r.cells.size(), 12u);
  EXPECT_EQ(render_report(r, "csv"), slurp(path("report.csv")));
  // One progress line per cell.
  EXPECT_EQ(std::count(o.out.begin(), o.out.end(), '\n'), 12);
}

TEST_F(Cli, EvalReusesStoredAdversarialBatch) {
  train_model();
  ASSERT_EQ(run("attack", attack_cfg(0.03)).code, 0);
  json cfg = eval_cfg();
  cfg["attacks"] = {{{"id", "stored"}, {"epsilon", 0.03}, {"adversarial", path("adv.cfb")}}};
  cfg["pipelines"] = {{{"id", "none"}, {"stages", {{{"kind", "identity"}}}}}};
  cfg["runs_per_defense"] = 1;
  ASSERT_EQ(run("eval", cfg).code, 0);
  const EvaluationReport r = report_from_json(json::parse(slurp(path("report.json"))));
  const Network net = load(path("model.cfb"));
  const AdversarialBatch adv = load_adversarial(path("adv.cfb"));
  EXPECT_EQ(r.cell("stored", "none").mean, accuracy(forward(net, adv.x_adv), adv.labels));
}

TEST_F(Cli, GradcheckPassAndFail) {
  json cfg = {{"arch", "mlp-small"}, {"input_dims", {3, 4, 4}}, {"classes", 5}, {"coordinates", 40}};
  Outcome o = run("gradcheck", cfg);
  ASSERT_EQ(o.code, 0) << o.err;
  const json j = json::parse(o.out);
  EXPECT_TRUE(j.at("passed").get<bool>());
  EXPECT_LE(j.at("max_rel_error").get<double>(), 1e-4);
  EXPECT_EQ(j.at("checked"), 40);
  cfg["corrupt_backward"] = true;
  o = run("gradcheck", cfg);
  EXPECT_EQ(o.code, cli::kExitRuntime);
  EXPECT_FALSE(json::parse(o.out).at("passed").get<bool>());
}

TEST_F(Cli, DiagnoseReportsRowsPerExample) {
  train_model();
  ASSERT_EQ(run("attack", attack_cfg(0.1)).code, 0);
  const json cfg = {{"checkpoint", path("model.cfb")},
                    {"adversarial", path("adv.cfb")},
                    {"max_examples", 5},
                    {"misclassified_only", false},
                    {"output", {{"json", path("diag.json")}, {"markdown", path("diag.md")}}}};
  const Outcome o = run("diagnose", cfg);
  ASSERT_EQ(o.code, 0) << o.err;
  const json j = json::parse(slurp(path("diag.json")));
  ASSERT_EQ(j.at("groups").size(), 5u);
  for (const json& g : j.at("groups")) EXPECT_EQ(g.at("rows").size(), 3u);
  EXPECT_NE(slurp(path("diag.md")).find("| label | count |"), std::string::npos);

  json zero = cfg;
  zero["def_step"] = 0.0;
  ASSERT_EQ(run("diagnose", zero).code, 0);
  for (const json& g : json::parse(slurp(path("diag.json"))).at("groups")) {
    for (const json& r : g.at("rows")) {
      EXPECT_EQ(r.at("delta_adv"), 0.0);
      EXPECT_EQ(r.at("delta_true"), 0.0);
    }
  }
}

TEST_F(Cli, ReportRerendersStoredJson) {
  train_model();
  ASSERT_EQ(run("eval", eval_cfg()).code, 0);
  Outcome o = run("report", {{"input", path("report.json")}, {"format", "csv"}});
  ASSERT_EQ(o.code, 0);
  EXPECT_EQ(o.out, slurp(path("report.csv")));
  o = run("report", {{"input", path("report.json")}, {"format", "markdown-table"}, {"output", path("again.md")}});
  ASSERT_EQ(o.code, 0);
  EXPECT_EQ(slurp(path("again.md")), slurp(path("report.md")));
  o = run("report", {{"input", path("report.json")}, {"format", "pdf"}});
  EXPECT_EQ(o.code, cli::kExitValidation);
  EXPECT_EQ(json::parse(o.err).at("field"), "format");
}

TEST_F(Cli, UsageErrors) {
  std::ostringstream out, err;
  EXPECT_EQ(cli::run({"frobnicate"}, out, err), cli::kExitValidation);
  EXPECT_EQ(cli::run({"train"}, out, err), cli::kExitValidation);
  EXPECT_EQ(cli::run({"train", "-c", path("missing.json")}, out, err), cli::kExitValidation);
  std::ofstream(path("bad.json")) << "{not json";
  EXPECT_EQ(cli::run({"train", "-c", path("bad.json")}, out, err), cli::kExitValidation);
  std::ostringstream version;
  EXPECT_EQ(cli::run({"--version"}, version, err), 0);
  EXPECT_EQ(version.str(), std::string(kVersion) + "\n");
}

TEST_F(Cli, MissingCheckpointIsValidationError) {
  const Outcome o = run("attack", attack_cfg(0.03));
  EXPECT_EQ(o.code, cli::kExitValidation);
  EXPECT_EQ(json::parse(o.err).at("field"), "checkpoint");
}

TEST_F(Cli, ThreadEnvironmentVariable) {
  ::setenv("COUNTERFORT_THREADS", "3", 1);
  EXPECT_EQ(cli::resolve_threads(1), 3u);
  ::setenv("COUNTERFORT_THREADS", "-2", 1);
  EXPECT_THROW(cli::resolve_threads(1), ValidationError);
  ::setenv("COUNTERFORT_THREADS", "", 1);
  EXPECT_EQ(cli::resolve_threads(5), 5u);
  ::unsetenv("COUNTERFORT_THREADS");
  EXPECT_EQ(cli::resolve_threads(0), 0u);
}

TEST_F(Cli, BinaryExitCodesAndThreadInvariance) {
  const std::string bin = COUNTERFORT_CLI_PATH;
  const std::string cfg = write_config("t.json", train_cfg());
  ASSERT_EQ(shell("COUNTERFORT_THREADS=1 " + bin + " train -c " + cfg + " > /dev/null"), 0);
  const std::string one = slurp(path("model.cfb"));
  ASSERT_EQ(shell("COUNTERFORT_THREADS=4 " + bin + " train -c " + cfg + " > /dev/null"), 0);
  EXPECT_EQ(slurp(path("model.cfb")), one);
  ASSERT_EQ(shell(bin + " train --threads 2 -c " + cfg + " > /dev/null"), 0);
  EXPECT_EQ(slurp(path("model.cfb")), one);

  json bad = train_cfg();
  bad["train"]["momentum"] = 1.2;
  EXPECT_EQ(shell(bin + " train -c " + write_config("bad.json", bad) + " 2> " + path("err.txt")), 2);
  EXPECT_EQ(json::parse(slurp(path("err.txt"))).at("field"), "train.momentum");
  EXPECT_EQ(shell("COUNTERFORT_THREADS=x " + bin + " train -c " + cfg + " 2> /dev/null"), 2);
  EXPECT_EQ(shell(bin + " 2> /dev/null"), 2);
}
