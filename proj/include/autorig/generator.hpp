#pragma once

// Autoregressive rigging: grow the skeleton from the BOS token one joint at a
// time (diffusion-sampled position, then a parent among the earlier joints or
// the stop signal), then predict skinning against the finished joint tokens.

#include "autorig/dataset.hpp"
#include "autorig/model.hpp"

#include <chrono>
#include <deque>
#include <numeric>
#include <optional>
#include <thread>

namespace autorig {

enum class ParentMode { Argmax, Sample };

struct GenerationConfig {
  int max_joints = 0;      // 0: model capacity
  int num_points = 0;      // 0: model default
  int sampling_steps = 0;  // 0: model default
  ParentMode parent_mode = ParentMode::Argmax;
  double temperature = 1.0;
  bool stop_enabled = true;
  bool use_kv_cache = true;
  double clip_denoised = kDefaultSampleClip;  // clamp of the implied clean joint while sampling; 0 disables
};

struct GenerationStep {
  int index = 0;             // 0-based sequence position
  Vec3 joint;                // normalized coordinates
  std::vector<double> logits;         // over candidates 0..index (last = self)
  std::vector<double> probabilities;
  int parent = 0;
  double milliseconds = 0;
};

struct RigResult {
  Skeleton skeleton;             // input units
  Skeleton normalized_skeleton;  // normalized units
  SkinningMatrix skinning;       // samples x joints
  SampledShape shape;            // normalized samples the skinning refers to
  NormalizationTransform transform;
  std::vector<GenerationStep> trace;
  bool truncated = false;  // capacity reached before the stop signal
  double seconds = 0;
};

/// Parent choice from candidate probabilities: argmax with lowest-index ties,
/// or a draw from p^(1/temperature) renormalized.
inline int resample_parent_mode(const std::vector<double>& probs, ParentMode mode, double temperature = 1.0,
                                Rng* rng = nullptr) {
  if (probs.empty()) throw Error("no parent candidates");
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-4) throw Error("parent probabilities do not sum to 1");
  if (mode == ParentMode::Argmax) return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  if (!(temperature > 0)) throw Error("temperature must be positive");
  if (!rng) throw Error("sampling parents needs a random stream");
  std::vector<double> w(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) w[i] = std::pow(std::max(probs[i], 0.0), 1.0 / temperature);
  if (!(std::accumulate(w.begin(), w.end(), 0.0) > 0)) return resample_parent_mode(probs, ParentMode::Argmax);
  std::discrete_distribution<int> dist(w.begin(), w.end());
  return dist(*rng);
}

/// Rigs a normalized point sample. The shape must already be in normalized units.
template <typename T>
RigResult rig_shape(const Model<T>& model, const SampledShape& shape, std::uint64_t seed, const GenerationConfig& gen = {}) {
  using Var = nn::Var<T>;
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig& cfg = model.config();
  const int capacity = gen.max_joints > 0 ? std::min(gen.max_joints, cfg.max_joints) : cfg.max_joints;
  const RespacedSchedule sched =
      respace(model.schedule(), gen.sampling_steps > 0 ? gen.sampling_steps : cfg.sampling_steps);
  const int L = shape.size();

  nn::Tape<T> tape(false);
  Var shape_tokens = model.tokenize_shape(tape, shape);
  KvCache<T> cache;

  // Rows of the running sequence: post-transformer output of BOS and of each accepted joint.
  // Deques keep element addresses stable for the tape's by-reference constants.
  std::deque<Matrix<T>> outputs;
  Matrix<T> shape_outputs;
  std::deque<Matrix<T>> joint_tokens;  // tokenizer outputs T_0..T_{k-1}
  std::deque<Matrix<T>> joint_embs;
  JointSequence seq;

  auto full_pass = [&]() {
    std::vector<Var> rows{shape_tokens, model.bos(tape)};
    for (const auto& t : joint_tokens) rows.push_back(tape.constant_ref(t));
    const int k = static_cast<int>(joint_tokens.size());
    Matrix<T> out = model.transformer(tape, nn::concat_rows<T>(rows), build_hybrid_mask(L, k + 1)).value();
    shape_outputs = out.topRows(L);
    outputs.clear();
    for (int r = 0; r <= k; ++r) outputs.push_back(out.row(L + r));
  };

  if (gen.use_kv_cache) {
    Matrix<T> out = model.init_cache(tape, shape_tokens, cache).value();
    shape_outputs = out.topRows(L);
    outputs.push_back(out.row(L));
  } else {
    full_pass();
  }

  RigResult result;
  result.shape = shape;
  bool stopped = false;
  for (int k = 0; k < capacity; ++k) {
    const auto ts = std::chrono::steady_clock::now();
    GenerationStep step;
    step.index = k;
    const Matrix<T>& context = outputs.back();
    Rng joint_rng = substream(seed, "joint", static_cast<std::uint64_t>(k));
    step.joint = sample_joint(model.denoiser(), sched, context, joint_rng, gen.clip_denoised);

    Matrix<T> jpos(1, 3);
    jpos.row(0) = step.joint.transpose().cast<T>();
    Var emb = model.embed_joints(tape, tape.constant(jpos));
    const std::vector<int> here{k + 1};
    Var fused = model.fuse(tape, tape.constant_ref(context), emb, here);
    Var self_token = model.tokenize_skeleton(tape, emb, here, emb, here);
    std::vector<Var> cand_rows;
    for (int i = 0; i < k; ++i)
      cand_rows.push_back(tape.constant_ref(cfg.heads_use_post_tokens ? outputs[i + 1] : joint_tokens[i]));
    cand_rows.push_back(self_token);
    Var logits = model.connect_logits(tape, fused, nn::concat_rows<T>(cand_rows));
    Matrix<T> probs = nn::softmax_rows(logits).value();
    for (int i = 0; i <= k; ++i) {
      step.logits.push_back(static_cast<double>(logits.value()(0, i)));
      step.probabilities.push_back(static_cast<double>(probs(0, i)));
    }
    if (k == 0) {
      step.parent = 0;
    } else {
      Rng parent_rng = substream(seed, "parent", static_cast<std::uint64_t>(k));
      step.parent = resample_parent_mode(step.probabilities, gen.parent_mode, gen.temperature, &parent_rng);
    }
    if (k > 0 && step.parent == k && !gen.stop_enabled) {
      // stop disabled: fall back to the best real parent
      step.parent = static_cast<int>(std::max_element(step.probabilities.begin(), step.probabilities.end() - 1) -
                                     step.probabilities.begin());
    }
    const bool stop = k > 0 && step.parent == k;
    if (!stop) {
      seq.entries.push_back({step.joint, step.parent});
      const int p = step.parent;
      Var parent_emb = p == k ? emb : tape.constant_ref(joint_embs[p]);
      Var token = model.tokenize_skeleton(tape, emb, here, parent_emb, {p + 1});
      joint_embs.push_back(emb.value());
      joint_tokens.push_back(token.value());
      if (gen.use_kv_cache) {
        outputs.push_back(model.kv_step(tape, token, cache).value());
      } else {
        full_pass();
      }
    }
    step.milliseconds = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - ts).count();
    result.trace.push_back(std::move(step));
    if (stop) {
      stopped = true;
      break;
    }
  }
  result.truncated = !stopped;

  const int K = seq.size();
  std::vector<Var> keys;
  for (int i = 0; i < K; ++i) keys.push_back(tape.constant_ref(cfg.heads_use_post_tokens ? outputs[i + 1] : joint_tokens[i]));
  Var queries = cfg.heads_use_post_tokens ? tape.constant_ref(shape_outputs) : shape_tokens;
  result.skinning = nn::softmax_rows(model.skinning_logits(tape, queries, nn::concat_rows<T>(keys))).value().template cast<double>();
  result.normalized_skeleton = sequence_to_skeleton(seq);
  result.skeleton = result.normalized_skeleton;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

/// Normalize -> sample -> generate -> denormalize. Points use the substream
/// ("points") of `seed`; joint k uses ("joint", k).
template <typename T>
RigResult rig(const Model<T>& model, const TriMesh& mesh, std::uint64_t seed, const GenerationConfig& gen = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  check_mesh(mesh);
  const NormalizationTransform t = normalization_for(mesh);
  const int L = gen.num_points > 0 ? gen.num_points : model.config().num_points;
  SampledShape shape = sample_surface(transform_mesh(mesh, t), L, derive_seed(seed, "points"));
  RigResult r = rig_shape(model, shape, seed, gen);
  r.transform = t;
  r.skeleton = denormalize_skeleton(r.normalized_skeleton, t);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Seed of one mesh within a batch: derived from the batch seed and the mesh
/// content, so results do not depend on batch order.
inline std::uint64_t mesh_seed(std::uint64_t seed, const TriMesh& mesh) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Vec3& v : mesh.vertices) mix(v.data(), 3 * sizeof(double));
  for (const auto& f : mesh.faces) mix(f.data(), 3 * sizeof(int));
  return derive_seed(seed, "mesh", h);
}

struct BatchItem {
  std::optional<RigResult> result;
  std::string error;
  double seconds = 0;
};

/// Rigs every mesh with its own derived seed; a failure is recorded on its
/// item and does not affect the others.
template <typename T>
std::vector<BatchItem> rig_batch(const Model<T>& model, const std::vector<TriMesh>& meshes, std::uint64_t seed,
                                 const GenerationConfig& gen = {}, int workers = 1) {
  std::vector<BatchItem> items(meshes.size());
  auto run = [&](size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      items[i].result = rig(model, meshes[i], mesh_seed(seed, meshes[i]), gen);
    } catch (const std::exception& e) {
      items[i].error = e.what();
    }
    items[i].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  if (workers <= 1 || meshes.size() <= 1) {
    for (size_t i = 0; i < meshes.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    const size_t n = std::min<size_t>(workers, meshes.size());
    for (size_t w = 0; w < n; ++w)
      pool.emplace_back([&, w] {
        for (size_t i = w; i < meshes.size(); i += n) run(i);
      });
    for (auto& th : pool) th.join();
  }
  return items;
}

/// Per-vertex skinning for `mesh` (input units): inverse-distance blend of the
/// rows of the `neighbors` nearest samples, pruned to the strongest influences.
inline VertexSkinning vertex_skinning(const RigResult& r, const TriMesh& mesh, int neighbors = 3,
                                      double min_weight = 1e-3) {
  const int L = r.shape.size(), K = static_cast<int>(r.skinning.cols());
  if (L == 0 || K == 0) throw Error("rig result has no skinning");
  neighbors = std::clamp(neighbors, 1, L);
  VertexSkinning out;
  out.reserve(mesh.vertices.size());
  std::vector<std::pair<double, int>> dist(L);
  for (const Vec3& v : mesh.vertices) {
    const Vec3 p = r.transform.apply(v);
    for (int i = 0; i < L; ++i) dist[i] = {(r.shape.points.row(i).transpose() - p).norm(), i};
    std::partial_sort(dist.begin(), dist.begin() + neighbors, dist.end());
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(K);
    for (int n = 0; n < neighbors; ++n) row += r.skinning.row(dist[n].second) / (dist[n].first + 1e-6);
    row /= row.sum();
    std::vector<std::pair<int, double>> sparse;
    for (int k = 0; k < K; ++k)
      if (row[k] >= min_weight) sparse.emplace_back(k, row[k]);
    if (sparse.empty()) {
      Eigen::Index best = 0;
      row.maxCoeff(&best);
      sparse.emplace_back(static_cast<int>(best), 1.0);
    }
    out.push_back(detail::prune_influences(std::move(sparse), kMaxInfluences));
  }
  return out;
}

/// Writes the per-step trace as CSV.
inline void write_trace_csv(std::ostream& out, const RigResult& r) {
  out << "step,x,y,z,parent,parent_probability,stop_probability,milliseconds\n";
  for (const auto& s : r.trace) {
    out << s.index << ',' << s.joint.x() << ',' << s.joint.y() << ',' << s.joint.z() << ',' << s.parent << ','
        << s.probabilities[std::min<size_t>(s.parent, s.probabilities.size() - 1)] << ','
        << (s.index > 0 ? s.probabilities.back() : 0.0) << ',' << s.milliseconds << "\n";
  }
}

}  // namespace autorig
