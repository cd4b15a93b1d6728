#pragma once

// Scoring a trained model on rigged assets: generated skeletons against GT in
// normalized coordinates, plus teacher-forced connectivity and skinning.

#include "autorig/generator.hpp"
#include "autorig/metrics.hpp"
#include "autorig/trainer.hpp"

namespace autorig {

struct AssetScore {
  std::string name;
  SkeletonReport skeleton;  // generated vs GT, normalized units
  double connect_accuracy = 0;
  SkinningReport skinning;
  int predicted_joints = 0;
  bool truncated = false;
  double seconds = 0;
};

/// Connectivity and skinning with GT joints fed to the model, in BFS order
/// without sibling shuffling. Points use the substream ("teacher") of `seed`.
template <typename T>
std::pair<double, SkinningReport> teacher_forced_scores(const Model<T>& model, const RigAsset& asset, std::uint64_t seed,
                                                        const MetricConfig& metrics = {}) {
  TrainConfig ec;
  ec.model = model.config();
  ec.p_aug = 0;
  ec.shuffle_siblings = false;
  Rng rng = substream(seed, "teacher");
  const TrainingExample ex = prepare_example(asset, rng, ec);
  const TeacherForcedPrediction pred = teacher_forced_predict(model, ex);
  std::vector<int> gt, got;
  for (int k = 0; k < ex.joint_count(); ++k) {
    gt.push_back(ex.sequence.entries[k].parent);
    got.push_back(pred.parents[k]);
  }
  return {connectivity_accuracy(got, gt), skinning_metrics(pred.skinning, ex.skinning, metrics.influence_threshold)};
}

template <typename T>
AssetScore score_asset(const Model<T>& model, const RigAsset& asset, std::uint64_t seed, const GenerationConfig& gen = {},
                       const MetricConfig& metrics = {}) {
  AssetScore s;
  s.name = asset.name;
  const RigResult r = rig(model, asset.mesh, seed, gen);
  s.skeleton = evaluate_skeleton(r.normalized_skeleton, transform_skeleton(asset.skeleton, r.transform), metrics);
  s.predicted_joints = r.skeleton.size();
  s.truncated = r.truncated;
  s.seconds = r.seconds;
  std::tie(s.connect_accuracy, s.skinning) = teacher_forced_scores(model, asset, seed, metrics);
  return s;
}

}  // namespace autorig
