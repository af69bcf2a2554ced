#include <gtest/gtest.h>

#include "counterfort/data.hpp"
#include "counterfort/harness.hpp"
#include "counterfort/models.hpp"

using namespace counterfort;

namespace {

struct Fixture {
  Dataset data = synth_blobs(10, 60, {3, 4, 4}, 1.0, 1);
  Network net = build("mlp-small", {3, 4, 4}, 10, 2);
};

EvalSpec small_spec() {
  EvalSpec spec;
  AttackConfig pgd2;
  pgd2.iters = 2;
  spec.attacks = {{"pgd_u", "PGD2 (untargeted)", pgd2, ""}};
  pgd2.targeted = true;
  spec.attacks.push_back({"pgd_t", "PGD2 (targeted)", pgd2, ""});
  TransformConfig g;
  g.kind = TransformKind::Gaussian;
  DefenseConfig d;
  d.n_labels = 3;
  spec.pipelines = {{"none", {IdentityStage{}}}, {"gauss", {g}}, {"counteract", {d}}};
  spec.runs_per_defense = 3;
  spec.master_seed = 11;
  spec.block_size = 16;
  return spec;
}

}  // namespace

TEST(Harness, ZeroEpsilonColumnEqualsClean) {
  Fixture f;
  EvalSpec spec;
  AttackConfig zero;
  zero.epsilon = 0.0;
  spec.attacks = {{"eps0", "eps0", zero, ""}};
  spec.pipelines = {{"none", {IdentityStage{}}}};
  spec.runs_per_defense = 2;
  const EvaluationReport r = evaluate(f.net, f.data, spec);
  const double clean = accuracy(forward(f.net, f.data.images), f.data.labels);
  EXPECT_EQ(r.cell("eps0", "none").mean, clean);
  EXPECT_EQ(r.cell(kCleanAttackId, "none").mean, clean);
  EXPECT_EQ(r.cell("eps0", "none").std, 0.0);
}

TEST(Harness, SameSpecSameReport) {
  Fixture f;
  const EvalSpec spec = small_spec();
  EXPECT_EQ(to_json(evaluate(f.net, f.data, spec)), to_json(evaluate(f.net, f.data, spec)));
}

TEST(Harness, MeanAndStdReaggregate) {
  Fixture f;
  const EvaluationReport r = evaluate(f.net, f.data, small_spec());
  for (const Cell& c : r.cells) {
    ASSERT_TRUE(c.error.empty());
    ASSERT_EQ(c.runs.size(), 3u);
    double sum = 0.0;
    for (double a : c.runs) sum += a;
    const double mean = sum / 3.0;
    double var = 0.0;
    for (double a : c.runs) var += (a - mean) * (a - mean) / 3.0;
    EXPECT_NEAR(c.mean, mean, 1e-15);
    EXPECT_NEAR(c.std, std::sqrt(var), 1e-15);
    for (double a : c.runs) {
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
    }
  }
}

TEST(Harness, RunsArePrefixStableAcrossRunCounts) {
  Fixture f;
  EvalSpec spec = small_spec();
  const EvaluationReport three = evaluate(f.net, f.data, spec);
  spec.runs_per_defense = 5;
  const EvaluationReport five = evaluate(f.net, f.data, spec);
  for (const Cell& c : three.cells) {
    const Cell& d = five.cell(c.attack, c.pipeline);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(c.runs[r], d.runs[r]);
  }
}

TEST(Harness, ColumnLayoutCleanFirst) {
  Fixture f;
  const EvaluationReport r = evaluate(f.net, f.data, small_spec());
  ASSERT_EQ(r.attacks.size(), 3u);
  EXPECT_EQ(r.attacks[0].id, kCleanAttackId);
  EXPECT_EQ(r.attacks[1].label, "PGD2 (untargeted)");
  EXPECT_EQ(r.cells.size(), 9u);
  EXPECT_EQ(r.provenance.at("master_seed"), 11);
}

TEST(Harness, UntrainedModelIsNearChance) {
  const Dataset data = synth_blobs(10, 1000, {3, 8, 8}, 1.0, 3);
  const Network net = build("cnn-desk", {3, 8, 8}, 10, 4);
  const auto cells = clean_eval(net, data, {{"none", {IdentityStage{}}}});
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_GE(cells[0].mean, 0.05);
  EXPECT_LE(cells[0].mean, 0.20);
}

TEST(Harness, StageFailureIsRecordedInCell) {
  Fixture f;
  const LabelBatch pred = predict(f.net, f.data.images);
  auto pool = std::make_shared<Dataset>(f.data.select(std::vector<std::size_t>{0}));
  pool->labels = {pred[0]};  // no eligible partner for example 0
  TransformConfig m;
  m.kind = TransformKind::MiOl;
  m.pool = pool;
  EvalSpec spec;
  spec.pipelines = {{"none", {IdentityStage{}}}, {"mi_ol", {m}}};
  spec.runs_per_defense = 1;
  const EvaluationReport r = evaluate(f.net, f.data, spec);
  EXPECT_TRUE(r.cell(kCleanAttackId, "none").error.empty());
  EXPECT_FALSE(r.cell(kCleanAttackId, "mi_ol").error.empty());
  EXPECT_TRUE(r.cell(kCleanAttackId, "mi_ol").runs.empty());
  EXPECT_NE(render_report(r, ReportFormat::Markdown).find("error"), std::string::npos);
}

TEST(Harness, SpecValidation) {
  Fixture f;
  EvalSpec spec = small_spec();
  spec.attacks[1].id = "pgd_u";
  EXPECT_THROW(evaluate(f.net, f.data, spec), ValidationError);
  spec = small_spec();
  spec.attacks[0].id = kCleanAttackId;
  EXPECT_THROW(evaluate(f.net, f.data, spec), ValidationError);
  spec = small_spec();
  spec.runs_per_defense = 0;
  EXPECT_THROW(evaluate(f.net, f.data, spec), ValidationError);
  const Network wrong = build("mlp-small", {3, 4, 4}, 5, 2);
  try {
    evaluate(wrong, f.data, small_spec());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "dataset.classes");
  }
}

TEST(Report, PercentCellRounding) {
  EXPECT_EQ(percent_cell(0.265), "26.5");
  EXPECT_EQ(percent_cell(0.0), "0.0");
  EXPECT_EQ(percent_cell(1.0), "100.0");
  EXPECT_EQ(percent_cell(0.12345), "12.3");
  EXPECT_EQ(percent_cell(0.9996), "100.0");
}

TEST(Report, CsvAndMarkdownShape) {
  Fixture f;
  const EvaluationReport r = evaluate(f.net, f.data, small_spec());
  std::istringstream csv(render_report(r, "csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "pipeline,clean,PGD2 (untargeted),PGD2 (targeted)");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
  }
  EXPECT_EQ(rows, 3u);
  const std::string md = render_report(r, "markdown");
  EXPECT_EQ(md.rfind("| Defense | clean | PGD2 (untargeted) | PGD2 (targeted) |\n|---|---:|---:|---:|\n", 0), 0u);
  EXPECT_NE(md.find("| counteract | " + percent_cell(r.cell(kCleanAttackId, "counteract").mean) + " |"),
            std::string::npos);
}

TEST(Report, JsonRoundTripAndFormats) {
  Fixture f;
  const EvaluationReport r = evaluate(f.net, f.data, small_spec());
  const nlohmann::json j = to_json(r);
  EXPECT_EQ(to_json(report_from_json(j)), j);
  EXPECT_EQ(render_report(report_from_json(j), "md"), render_report(r, "markdown"));
  EXPECT_EQ(report_format_from_string("markdown-table"), ReportFormat::Markdown);
  try {
    report_format_from_string("xlsx");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "format");
  }
}

TEST(Report, CsvQuotesSpecialCharacters) {
  EvaluationReport r;
  r.attacks = {{"a", "PGD, targeted", nullptr}};
  r.pipelines = {{"p", "p", nullptr}};
  Cell c;
  c.attack = "a";
  c.pipeline = "p";
  c.runs = {0.5};
  summarize(c);
  r.cells = {c};
  EXPECT_EQ(render_report(r, "csv"), "pipeline,\"PGD, targeted\"\np,50.0\n");
}

TEST(Harness, CachedDeterministicPrefixMatchesFullPipeline) {
  Fixture f;
  DefenseConfig d;  // n_labels 9 of 10 classes: every other label, no randomness
  TransformConfig c;
  c.kind = TransformKind::CropRescale;
  c.crop_range = {2, 4};
  const std::vector<Stage> stages = {d, c};
  const auto runs = pipeline_runs(f.net, f.data.images, f.data.labels, stages, 5, "clean", 3, 16);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(runs[r], pipeline_accuracy(f.net, f.data.images, f.data.labels, stages, run_seed(5, "clean", r), 16));
  }
  const auto fixed = pipeline_runs(f.net, f.data.images, f.data.labels, {d}, 5, "clean", 2, 16);
  EXPECT_EQ(fixed[0], pipeline_accuracy(f.net, f.data.images, f.data.labels, {d}, 123, 16));
  EXPECT_EQ(fixed[0], fixed[1]);
}

TEST(Harness, PipelinesArePaired) {
  // A neutral leading stage leaves the transform's draws unchanged.
  Fixture f;
  DefenseConfig neutral;
  neutral.mu = 0.0;
  neutral.n_labels = 3;
  TransformConfig c;
  c.kind = TransformKind::CropRescale;
  c.crop_range = {2, 4};
  EvalSpec spec;
  spec.pipelines = {{"crop", {c}}, {"neutral+crop", {neutral, c}}};
  spec.runs_per_defense = 4;
  const EvaluationReport r = evaluate(f.net, f.data, spec);
  EXPECT_EQ(r.cell(kCleanAttackId, "crop").runs, r.cell(kCleanAttackId, "neutral+crop").runs);
}
