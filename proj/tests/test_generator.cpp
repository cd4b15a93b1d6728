#include "support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace autorig;
using namespace autorig::testing;

namespace {

TriMesh box_mesh(Vec3 lo, Vec3 hi) {
  TriMesh m;
  for (int i = 0; i < 8; ++i) m.vertices.emplace_back(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(), i & 4 ? hi.z() : lo.z());
  m.faces = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
             {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  return m;
}

std::unique_ptr<Model<float>> random_model(std::uint64_t seed, ModelConfig cfg = tiny_config()) {
  auto m = std::make_unique<Model<float>>(cfg, seed);
  Rng rng(seed);
  randomize(m->params(), rng, 0.3);
  return m;
}

}  // namespace

TEST(ParentMode, ArgmaxPrefersLowestIndexOnTies) {
  EXPECT_EQ(resample_parent_mode({0.1, 0.45, 0.45}, ParentMode::Argmax), 1);
  EXPECT_EQ(resample_parent_mode({1.0}, ParentMode::Argmax), 0);
}

TEST(ParentMode, SamplingFrequencies) {
  Rng rng(1);
  const int n = 20000;
  int ones = 0, zeros = 0;
  for (int i = 0; i < n; ++i) ones += resample_parent_mode({0.5, 0.5}, ParentMode::Sample, 1.0, &rng) == 1;
  EXPECT_NEAR(static_cast<double>(ones) / n, 0.5, 0.02);
  // low temperature sharpens towards the mode
  for (int i = 0; i < 2000; ++i) zeros += resample_parent_mode({0.7, 0.3}, ParentMode::Sample, 0.05, &rng) == 0;
  EXPECT_GT(zeros, 1990);
}

TEST(ParentMode, Errors) {
  Rng rng(2);
  EXPECT_THROW(resample_parent_mode({}, ParentMode::Argmax), Error);
  EXPECT_THROW(resample_parent_mode({0.3, 0.3}, ParentMode::Argmax), Error);
  EXPECT_THROW(resample_parent_mode({0.5, 0.5}, ParentMode::Sample, 0.0, &rng), Error);
  EXPECT_THROW(resample_parent_mode({0.5, 0.5}, ParentMode::Sample, 1.0, nullptr), Error);
}

TEST(Rig, ProducesValidSkeletonAndSkinning) {
  auto model = random_model(3);
  const TriMesh mesh = box_mesh(Vec3(-1, 0, 2), Vec3(3, 1, 4));
  const RigResult r = rig(*model, mesh, 7);
  const int K = r.skeleton.size();
  ASSERT_GE(K, 1);
  EXPECT_LE(K, model->config().max_joints);
  EXPECT_TRUE(validate_skeleton(r.skeleton, model->config().max_joints).ok());
  EXPECT_EQ(r.skinning.rows(), model->config().num_points);
  EXPECT_EQ(r.skinning.cols(), K);
  for (int i = 0; i < r.skinning.rows(); ++i) EXPECT_NEAR(r.skinning.row(i).sum(), 1.0, 1e-5);
  EXPECT_EQ(static_cast<int>(r.trace.size()), r.truncated ? K : K + 1);
  for (int k = 0; k < K; ++k) {
    // denormalized joints map back onto the normalized ones
    const Vec3 back = r.transform.apply(r.skeleton.joints[k]);
    EXPECT_LT((back - r.normalized_skeleton.joints[k]).norm(), 1e-9);
    EXPECT_EQ(r.trace[k].probabilities.size(), static_cast<size_t>(k + 1));
  }
}

TEST(Rig, DeterministicForSeed) {
  auto model = random_model(4);
  const TriMesh mesh = box_mesh(Vec3(0, 0, 0), Vec3(1, 2, 0.5));
  const RigResult a = rig(*model, mesh, 11), b = rig(*model, mesh, 11);
  ASSERT_EQ(a.skeleton.size(), b.skeleton.size());
  for (int k = 0; k < a.skeleton.size(); ++k) {
    EXPECT_EQ(a.skeleton.joints[k], b.skeleton.joints[k]);
    EXPECT_EQ(a.skeleton.parents[k], b.skeleton.parents[k]);
  }
  EXPECT_EQ(a.skinning, b.skinning);
}

TEST(Rig, CapacityAndStopSwitch) {
  auto model = random_model(5);
  const TriMesh mesh = box_mesh(Vec3(0, 0, 0), Vec3(1, 1, 1));
  GenerationConfig gen;
  gen.stop_enabled = false;
  gen.max_joints = 5;
  const RigResult r = rig(*model, mesh, 1, gen);
  EXPECT_EQ(r.skeleton.size(), 5);
  EXPECT_TRUE(r.truncated);
  for (int k = 1; k < 5; ++k) EXPECT_LT(r.skeleton.parents[k], k);
}

TEST(Rig, KvCacheMatchesRecompute) {
  auto model = random_model(6);
  const TriMesh mesh = box_mesh(Vec3(0, 0, 0), Vec3(1, 1, 2));
  GenerationConfig gen;
  gen.stop_enabled = false;
  gen.max_joints = 8;
  gen.use_kv_cache = true;
  const RigResult cached = rig(*model, mesh, 2, gen);
  gen.use_kv_cache = false;
  const RigResult full = rig(*model, mesh, 2, gen);
  const auto a = flat_logits(cached), b = flat_logits(full);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
  ASSERT_EQ(cached.trace.size(), full.trace.size());
  for (size_t k = 0; k < cached.trace.size(); ++k) EXPECT_EQ(cached.trace[k].parent, full.trace[k].parent);
}

TEST(Rig, SampledParentsStayInRange) {
  auto model = random_model(7);
  GenerationConfig gen;
  gen.parent_mode = ParentMode::Sample;
  gen.temperature = 2.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const RigResult r = rig(*model, box_mesh(Vec3(0, 0, 0), Vec3(2, 1, 1)), seed, gen);
    EXPECT_TRUE(validate_skeleton(r.skeleton, model->config().max_joints).ok());
  }
}

TEST(Rig, RejectsBrokenMesh) {
  auto model = random_model(8);
  TriMesh m = box_mesh(Vec3(0, 0, 0), Vec3(1, 1, 1));
  m.faces.push_back({0, 1, 99});
  EXPECT_THROW(rig(*model, m, 0), Error);
  TriMesh flat;
  flat.vertices = {Vec3(0, 0, 0), Vec3(0, 0, 0), Vec3(0, 0, 0)};
  flat.faces = {{0, 1, 2}};
  EXPECT_THROW(rig(*model, flat, 0), Error);
}

TEST(RigBatch, OrderIndependentAndIsolatesFailures) {
  auto model = random_model(9);
  std::vector<TriMesh> meshes{box_mesh(Vec3(0, 0, 0), Vec3(1, 1, 1)), box_mesh(Vec3(0, 0, 0), Vec3(2, 1, 1)),
                              box_mesh(Vec3(0, 0, 0), Vec3(1, 3, 1))};
  meshes[1].faces.push_back({0, 1, 42});
  const auto items = rig_batch(*model, meshes, 5, {}, 2);
  ASSERT_EQ(items.size(), 3u);
  EXPECT_TRUE(items[0].result.has_value());
  EXPECT_FALSE(items[1].result.has_value());
  EXPECT_FALSE(items[1].error.empty());
  EXPECT_TRUE(items[2].result.has_value());

  std::vector<TriMesh> reversed{meshes[2], meshes[0]};
  const auto again = rig_batch(*model, reversed, 5, {}, 1);
  EXPECT_EQ(again[0].result->skeleton.joints, items[2].result->skeleton.joints);
  EXPECT_EQ(again[1].result->skeleton.joints, items[0].result->skeleton.joints);
}

TEST(Trace, CsvHasOneRowPerStep) {
  auto model = random_model(10);
  const RigResult r = rig(*model, box_mesh(Vec3(0, 0, 0), Vec3(1, 1, 1)), 3);
  std::ostringstream os;
  write_trace_csv(os, r);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,x,y,z,parent,parent_probability,stop_probability,milliseconds");
  size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, r.trace.size());
}
