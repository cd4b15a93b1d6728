#include "oracles.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace autorig;

namespace {

Skeleton chain(std::vector<Vec3> joints) {
  Skeleton sk;
  sk.joints = std::move(joints);
  for (int k = 0; k < sk.size(); ++k) sk.parents.push_back(k == 0 ? 0 : k - 1);
  return sk;
}

}  // namespace

TEST(MetricOracles, TwoHundredRandomInstances) {
  const oracle::SweepResult r = oracle::metric_sweep(17, 200);
  EXPECT_EQ(r.instances, 200);
  EXPECT_LE(r.max_error, 1e-12) << r.first_failure;
  EXPECT_EQ(r.integer_mismatches, 0) << r.first_failure;
}

TEST(MetricOracles, OtherThresholds) {
  for (double tau : {0.02, 0.3}) {
    const oracle::SweepResult r = oracle::metric_sweep(18, 60, tau, 0.2, 5);
    EXPECT_LE(r.max_error, 1e-12) << r.first_failure;
    EXPECT_EQ(r.integer_mismatches, 0) << r.first_failure;
  }
}

TEST(Hungarian, MatchesEnumerationOnRectangularCosts) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 6, m = 1 + (trial / 6) % 7;
    const MatrixXd c = autorig::testing::random_matrix(rng, n, m, 1.0).cwiseAbs();
    const std::vector<int> a = hungarian(c);
    ASSERT_EQ(static_cast<int>(a.size()), n);
    double got = 0;
    std::vector<int> used(m, 0);
    int assigned = 0;
    for (int i = 0; i < n; ++i)
      if (a[i] >= 0) {
        ASSERT_LT(a[i], m);
        ASSERT_EQ(used[a[i]]++, 0);
        got += c(i, a[i]);
        ++assigned;
      }
    EXPECT_EQ(assigned, std::min(n, m));
    EXPECT_NEAR(got, oracle::best_assignment(c).second, 1e-12);
  }
}

TEST(SkeletonMetrics, IdenticalSkeletons) {
  Rng rng(4);
  const Skeleton sk = autorig::testing::random_skeleton(rng, 9);
  const SkeletonReport r = evaluate_skeleton(sk, sk);
  EXPECT_EQ(r.iou, 1.0);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.cd_j2j, 0.0);
  EXPECT_EQ(r.cd_j2b, 0.0);
  EXPECT_EQ(r.cd_b2b, 0.0);
  EXPECT_EQ(r.edit_distance, 0);
  EXPECT_EQ(connectivity_accuracy(sk.parents, sk.parents), 1.0);
}

TEST(SkeletonMetrics, HandComputedCases) {
  const Skeleton gt = chain({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0)});
  // shift every joint by 0.05: all matched, distance 0.05 both ways
  Skeleton shifted = gt;
  for (auto& j : shifted.joints) j += Vec3(0, 0.05, 0);
  SkeletonReport r = evaluate_skeleton(shifted, gt);
  EXPECT_NEAR(r.cd_j2j, 0.05, 1e-15);
  EXPECT_NEAR(r.cd_b2b, 0.05, 1e-15);
  EXPECT_EQ(r.iou, 1.0);
  EXPECT_EQ(r.edit_distance, 0);

  // one extra far joint: tp = 3, iou = 3 / 4, one extra bone to edit
  Skeleton extra = gt;
  extra.joints.push_back(Vec3(5, 0, 0));
  extra.parents.push_back(2);
  r = evaluate_skeleton(extra, gt);
  EXPECT_DOUBLE_EQ(r.iou, 0.75);
  EXPECT_DOUBLE_EQ(r.precision, 0.75);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_EQ(r.edit_distance, 1);
  EXPECT_NEAR(r.cd_j2j, 0.5 * (3.0 / 4.0), 1e-15);

  // rewired parent: 2 attaches to 0 instead of 1 -> one bone removed, one added
  Skeleton rewired = gt;
  rewired.parents[2] = 0;
  EXPECT_EQ(evaluate_skeleton(rewired, gt).edit_distance, 2);
  EXPECT_DOUBLE_EQ(connectivity_accuracy(rewired.parents, gt.parents), 0.5);
}

TEST(SkeletonMetrics, SingleJointSkeletonsUseJointsAsBones) {
  const Skeleton a = chain({Vec3(0, 0, 0)}), b = chain({Vec3(0, 0.3, 0.4)});
  const SkeletonReport r = evaluate_skeleton(a, b);
  EXPECT_NEAR(r.cd_b2b, 0.5, 1e-15);
  EXPECT_EQ(r.iou, 0.0);
  EXPECT_EQ(r.edit_distance, 0);
}

TEST(SkinningMetrics, RowConventions) {
  MatrixXd p(2, 3), g(2, 3);
  p << 0.5, 0.5, 0.0, 0.02, 0.98, 0.0;
  g << 0.5, 0.0, 0.5, 0.0, 1.0, 0.0;
  const SkinningReport r = skinning_metrics(p, g);
  EXPECT_DOUBLE_EQ(r.precision, (0.5 + 1.0) / 2);
  EXPECT_DOUBLE_EQ(r.recall, (0.5 + 1.0) / 2);
  EXPECT_DOUBLE_EQ(r.avg_l1, (1.0 + 0.04) / 2);
  EXPECT_THROW(skinning_metrics(p, MatrixXd::Zero(2, 2)), ShapeError);
}

TEST(Metrics, ErrorsOnEmptyInput) {
  EXPECT_THROW(chamfer_j2j({}, {Vec3::Zero()}), Error);
  EXPECT_THROW(match_joints({Vec3::Zero()}, {}), Error);
  EXPECT_THROW(connectivity_accuracy({0}, {0, 0}), Error);
}

TEST(Report, CsvAndJson) {
  const Skeleton gt = chain({Vec3(0, 0, 0), Vec3(1, 0, 0)});
  std::vector<std::pair<std::string, SkeletonReport>> rows{{"a", evaluate_skeleton(gt, gt)},
                                                           {"b", evaluate_skeleton(chain({Vec3(0, 0, 0)}), gt)}};
  std::ostringstream os;
  write_report_csv(os, rows);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("# ", 0), 0u);
  EXPECT_NE(line.find("tau=0.1"), std::string::npos);
  std::getline(in, line);
  EXPECT_EQ(line, "shape,iou,precision,recall,cd_j2j,cd_j2b,cd_b2b,edit_distance");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 8), "a,1,1,1,");

  const nlohmann::json j = aggregate_report(rows);
  EXPECT_EQ(j["shapes"], 2);
  EXPECT_DOUBLE_EQ(j["mean"]["iou"].get<double>(), (1.0 + 0.5) / 2);
  EXPECT_DOUBLE_EQ(j["config"]["match_threshold"].get<double>(), 0.1);
}
