#include <gtest/gtest.h>

#include "inspect/experiments.hpp"
#include "inspect/reviewer.hpp"

using namespace inspect;
namespace ex = inspect::experiments;

TEST(Checks, RelationsAndOutcome) {
  EXPECT_TRUE(ex::at_least("a", 0.9, 0.9).passed);
  EXPECT_FALSE(ex::below("b", 0.9, 0.9).passed);
  EXPECT_TRUE(ex::exactly("c", 3, 3).passed);
  ex::Outcome o;
  EXPECT_FALSE(o.passed());  // no checks never counts as a pass
  o.checks.push_back(ex::at_least("a", 1, 0));
  EXPECT_TRUE(o.passed());
  o.checks.push_back(ex::below("b", 1, 0));
  EXPECT_FALSE(o.passed());
  EXPECT_EQ(ex::to_json(o)["checks"].size(), 2u);
}

TEST(ExperimentsSmoke, SmallProtocolAudit) {
  ex::AuditOptions o;
  o.products = 60;
  const auto out = ex::protocol_audit(o);
  for (const auto& c : out.checks) EXPECT_TRUE(c.passed) << c.name << " " << c.measured;
}

TEST(ExperimentsSmoke, SmallGradientCheck) {
  ex::GradientCheckOptions o;
  o.pairs = 4;
  auto passed_except_pairs = [](const ex::Outcome& out) {
    bool ok = true;
    for (const auto& c : out.checks) ok = ok && (c.name == "pairs" ? !c.passed : c.passed);
    return ok;
  };
  const auto out = ex::gradient_check(o);
  EXPECT_TRUE(passed_except_pairs(out)) << ex::to_json(out).dump();
  // A zero tolerance cannot be met, so the check is not vacuous.
  o.max_relative_error = 0.0;
  EXPECT_FALSE(passed_except_pairs(ex::gradient_check(o)));
}

TEST(ExperimentsSmoke, SmallDeterminism) {
  ex::DeterminismOptions o;
  o.products = 40;
  o.workdir = std::filesystem::temp_directory_path() / "inspect-test-determinism";
  EXPECT_TRUE(ex::determinism(o).passed());
  EXPECT_FALSE(std::filesystem::exists(o.workdir));
}

TEST(ExperimentsSmoke, RegistryNamesEveryExperiment) {
  const auto& r = ex::registry();
  for (const char* n : {"forgetting", "augmentation", "classifier-vs-detector", "protocol-audit", "gradient-check",
                        "saliency", "expansion", "determinism"}) {
    EXPECT_TRUE(r.count(n)) << n;
  }
}

TEST(SimulatedReviewer, DecisionRules) {
  Sample ng;
  ng.id = "n";
  ng.label = 0;
  ng.image = TensorImage(4, 4, 1);
  ng.defect_box = RoiBox::from_corner(0, 0, 2, 2);
  SaliencyMap inside{4, 4, std::vector<double>(16, 0.0)};
  inside.mass[0] = 0.6;
  inside.mass[15] = 0.4;
  SaliencyMap outside{4, 4, std::vector<double>(16, 1.0 / 16)};

  auto d = simulated_review("n", 1, ng, inside, 0.5);
  EXPECT_EQ(d.stage1, Stage1::label_wrong);
  EXPECT_EQ(d.y_gt, 0);
  EXPECT_NO_THROW(validate_decision(d));

  d = simulated_review("n", 0, ng, inside, 0.5);
  EXPECT_EQ(d.stage1, Stage1::label_right);
  EXPECT_EQ(d.g, 1);
  EXPECT_EQ(simulated_review("n", 0, ng, outside, 0.5).g, 0);
  EXPECT_EQ(simulated_review("n", 0, ng, std::nullopt, 0.5).g, 1);

  Sample ok = ng;
  ok.label = 1;
  ok.defect_box.reset();
  EXPECT_EQ(simulated_review("o", 1, ok, outside, 0.5).g, 1);
}
