#pragma once

// Fixtures shared by the unit tests and the acceptance runner.

#include "autorig.hpp"

#include <map>

namespace autorig::testing {

/// Small model for 64-bit gradient checks and fast property tests.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 16;
  c.layers = 2;
  c.heads = 2;
  c.mlp_hidden = 24;
  c.num_points = 10;
  c.max_joints = 8;
  c.shape_tokenizer_hidden = {12};
  c.joint_embed_hidden = 12;
  c.skeleton_token_hidden = 12;
  c.fusing_hidden = {20, 14};
  c.head_hidden = 10;
  c.denoiser_width = 12;
  c.denoiser_depth = 2;
  c.time_dim = 8;
  c.diffusion_steps = 100;
  c.sampling_steps = 10;
  return c;
}

inline MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2 * uniform01(rng) - 1);
  return m;
}

/// Replaces every parameter with uniform noise (zero-initialized layers would
/// otherwise hide most gradient paths).
template <typename T>
void randomize(nn::ParamStore<T>& store, Rng& rng, double scale) {
  for (size_t i = 0; i < store.size(); ++i)
    store[i].value = random_matrix(rng, store[i].value.rows(), store[i].value.cols(), scale).template cast<T>();
}

inline SampledShape random_shape(Rng& rng, int L) {
  SampledShape s;
  s.points = random_matrix(rng, L, 3, 0.5);
  s.normals = random_matrix(rng, L, 3);
  for (int i = 0; i < L; ++i) s.normals.row(i).normalize();
  return s;
}

/// Random tree: joint k > 0 hangs off a uniformly chosen earlier joint.
inline Skeleton random_skeleton(Rng& rng, int K) {
  Skeleton sk;
  for (int k = 0; k < K; ++k) {
    sk.joints.emplace_back(uniform01(rng) - 0.5, uniform01(rng) - 0.5, uniform01(rng) - 0.5);
    sk.parents.push_back(k == 0 ? 0 : std::min(k - 1, static_cast<int>(uniform01(rng) * k)));
  }
  return sk;
}

/// Training example over random points, a random K-joint tree and random
/// row-stochastic skinning.
inline TrainingExample random_example(Rng& rng, const ModelConfig& cfg, int K) {
  TrainingExample ex;
  ex.name = "random";
  ex.shape = random_shape(rng, cfg.num_points);
  ex.sequence = bfs_serialize(random_skeleton(rng, K), nullptr, cfg.max_joints);
  if (K < cfg.max_joints) ex.sequence = append_terminal(std::move(ex.sequence));
  ex.skinning = random_matrix(rng, cfg.num_points, K).cwiseAbs();
  for (int r = 0; r < cfg.num_points; ++r) ex.skinning.row(r) /= ex.skinning.row(r).sum();
  return ex;
}

/// Max abs change of the transformer outputs that must not see skeleton token
/// `t` (all shape rows and skeleton rows before it) when that token is
/// replaced by fresh noise. Random weights, `k` skeleton tokens after BOS.
inline double causality_deviation(const ModelConfig& cfg, int L, int k, int t, std::uint64_t seed) {
  Model<float> model(cfg, seed);
  Rng rng(seed);
  randomize(model.params(), rng, 0.2);
  const MatrixXf x = random_matrix(rng, L + 1 + k, cfg.d).cast<float>();
  MatrixXf y = x;
  y.row(L + 1 + t) = random_matrix(rng, 1, cfg.d, 3.0).cast<float>();
  nn::Tape<float> tape(false);
  const auto mask = build_hybrid_mask(L, k + 1);
  const MatrixXf a = model.transformer(tape, tape.constant(x), mask).value();
  const MatrixXf b = model.transformer(tape, tape.constant(y), mask).value();
  const int unaffected = L + 1 + t;
  return (a.topRows(unaffected) - b.topRows(unaffected)).cwiseAbs().maxCoeff();
}

struct NamedCheck {
  std::string block;
  nn::GradCheckResult result;
};

/// Below this magnitude the central-difference estimate of a full-model loss is
/// dominated by roundoff (about 1e-10 absolute), so such entries are compared
/// on an absolute gap of 1e-4 * floor.
inline constexpr double kModelGradFloor = 1e-5;

/// Finite-difference checks of every trainable block of a 64-bit tiny model,
/// each through a fixed random linear probe of its output, plus the three
/// training losses. At most `entries` sampled entries per parameter tensor.
inline std::vector<NamedCheck> model_grad_checks(std::uint64_t seed, size_t entries = 6) {
  using Var = nn::Var<double>;
  using Tape = nn::Tape<double>;
  const ModelConfig cfg = tiny_config();
  Model<double> model(cfg, seed);
  Rng rng(seed);
  randomize(model.params(), rng, 0.4);
  const int L = cfg.num_points, K = 4;
  const TrainingExample ex = random_example(rng, cfg, K);
  const NoiseDraws draws = draw_noise(ex, 2, cfg.diffusion_steps, rng);
  const MatrixXd joints = random_matrix(rng, 3, 3, 0.5);
  const MatrixXd context = random_matrix(rng, 3, cfg.d);
  const MatrixXd cand = random_matrix(rng, 4, cfg.d);
  const nn::AttentionMask mask = build_hybrid_mask(L, K + 1);
  const MatrixXd seq = random_matrix(rng, L + K + 1, cfg.d);

  std::vector<MatrixXd> probes;
  auto probe = [&](Tape& t, Var out, int slot) {
    while (static_cast<int>(probes.size()) <= slot) probes.emplace_back();
    if (probes[slot].rows() != out.rows() || probes[slot].cols() != out.cols())
      probes[slot] = random_matrix(rng, out.rows(), out.cols());
    return nn::sum(nn::mul(out, t.constant(probes[slot])));
  };

  std::vector<std::pair<std::string, std::function<Var(Tape&)>>> cases = {
      {"shape tokenizer", [&](Tape& t) { return probe(t, model.tokenize_shape(t, ex.shape), 0); }},
      {"skeleton tokenizer",
       [&](Tape& t) {
         Var e = model.embed_joints(t, joints);
         Var p = model.embed_joints(t, MatrixXd(joints.colwise().reverse()));
         return probe(t, model.tokenize_skeleton(t, e, {1, 2, 3}, p, {1, 1, 2}), 1);
       }},
      {"transformer", [&](Tape& t) { return probe(t, model.transformer(t, t.constant(seq), mask), 2); }},
      {"denoiser",
       [&](Tape& t) {
         return probe(t, model.denoiser()(t, t.constant(joints), {1, 40, 99}, t.constant(context)), 3);
       }},
      {"fusing head",
       [&](Tape& t) {
         return probe(t, model.fuse(t, t.constant(context), model.embed_joints(t, joints), {1, 2, 3}), 4);
       }},
      {"connectivity head",
       [&](Tape& t) {
         Var fused = model.fuse(t, t.constant(MatrixXd(context.topRows(1))), model.embed_joints(t, MatrixXd(joints.topRows(1))), {2});
         return probe(t, model.connect_logits(t, fused, t.constant(cand)), 5);
       }},
      {"skinning head",
       [&](Tape& t) {
         return probe(t, model.skinning_logits(t, t.constant(MatrixXd(seq.topRows(L))), t.constant(cand)), 6);
       }},
      {"joint loss", [&](Tape& t) { return compute_losses(t, model, ex, draws).joint; }},
      {"connectivity loss", [&](Tape& t) { return compute_losses(t, model, ex, draws).connect; }},
      {"skinning loss", [&](Tape& t) { return compute_losses(t, model, ex, draws).skinning; }},
  };
  std::vector<NamedCheck> out;
  for (auto& [name, fn] : cases) {
    {
      Tape warm(false);  // fixes the probe matrix before checking
      fn(warm);
    }
    out.push_back({name, nn::grad_check(model.params(), fn, 1e-5, entries, seed, kModelGradFloor)});
  }
  return out;
}

struct PointMassOutcome {
  Vec3 mean = Vec3::Zero();
  Vec3 stddev = Vec3::Zero();
  double final_loss = 0;  // mean noise-prediction loss over the last 100 steps
};

/// Trains a condition-free denoiser on a single clean joint and draws
/// `samples` joints from it with the respaced ancestral sampler.
inline PointMassOutcome point_mass_experiment(const Vec3& target, int train_steps, int samples, int sampling_steps,
                                              double clip, std::uint64_t seed) {
  const int batch = 128;
  nn::ParamStore<float> store;
  Rng init(seed);
  Denoiser<float> denoiser(store, "denoiser", {64, 2, 32, 4}, init);
  const NoiseSchedule sched = NoiseSchedule::cosine(1000);
  TrainConfig tc;
  tc.learning_rate = 2e-3;
  tc.warmup_steps = 100;
  Adam<float> opt(store, tc);
  const MatrixXd targets = target.transpose().replicate(batch, 1);
  const MatrixXf cond = MatrixXf::Zero(batch, 4);
  Rng rng = substream(seed, "noise");
  PointMassOutcome out;
  for (int step = 0; step < train_steps; ++step) {
    store.zero_grad();
    nn::Tape<float> tape;
    const NoiseDraws draws = NoiseDraws::sample(batch, sched.steps, rng);
    nn::Var<float> loss = joint_loss(tape, denoiser, sched, tape.constant_ref(cond), targets, draws);
    if (step >= train_steps - 100) out.final_loss += loss.scalar() / 100.0;
    tape.backward(loss);
    opt.step();
  }
  const RespacedSchedule rs = respace(sched, sampling_steps);
  const MatrixXf c1 = MatrixXf::Zero(1, 4);
  Rng srng = substream(seed, "sample");
  std::vector<Vec3> draws;
  for (int i = 0; i < samples; ++i) draws.push_back(sample_joint(denoiser, rs, c1, srng, clip));
  for (const Vec3& d : draws) out.mean += d / samples;
  for (const Vec3& d : draws) out.stddev += (d - out.mean).cwiseAbs2() / samples;
  out.stddev = out.stddev.cwiseSqrt();
  return out;
}

/// Connection logits of a generated trace, flattened.
inline std::vector<double> flat_logits(const RigResult& r) {
  std::vector<double> out;
  for (const auto& s : r.trace) out.insert(out.end(), s.logits.begin(), s.logits.end());
  return out;
}

/// Four assets that break one filter rule each, plus two procedural assets that
/// must survive. Returns the assets and the expected rule per rejected name.
inline std::pair<std::vector<RigAsset>, std::map<std::string, std::string>> filter_fixture(std::uint64_t seed = 1) {
  std::vector<RigAsset> assets = synth_generate(2, seed);
  const RigAsset& base = assets[0];

  RigAsset too_many = base;
  too_many.name = "too_many_joints";
  too_many.vertex_skinning.clear();
  too_many.skeleton = Skeleton{};
  for (int k = 0; k < 65; ++k) {
    too_many.skeleton.joints.emplace_back(0.01 * k, 0, 0);
    too_many.skeleton.parents.push_back(k == 0 ? 0 : k - 1);
  }

  RigAsset cyclic = base;
  cyclic.name = "cyclic";
  cyclic.vertex_skinning.clear();
  const int K = cyclic.skeleton.size();
  cyclic.skeleton.parents[0] = K - 1;  // root now hangs off a leaf-side joint: no root, a cycle

  RigAsset misaligned = base;
  misaligned.name = "misaligned";
  for (Vec3& j : misaligned.skeleton.joints) j += Vec3(1.0, 0, 0);

  // octagonal bipyramid: 10 vertices, 16 faces, with a two-joint skeleton on its poles
  RigAsset tiny;
  tiny.name = "ten_vertices";
  for (int s = 0; s < 8; ++s)
    tiny.mesh.vertices.emplace_back(0.2 * std::cos(s * M_PI / 4), 0.2 * std::sin(s * M_PI / 4), 0.0);
  tiny.mesh.vertices.emplace_back(0, 0, 0.5);
  tiny.mesh.vertices.emplace_back(0, 0, -0.5);
  for (int s = 0; s < 8; ++s) {
    tiny.mesh.faces.push_back({s, (s + 1) % 8, 8});
    tiny.mesh.faces.push_back({(s + 1) % 8, s, 9});
  }
  tiny.skeleton.joints = {Vec3(0, 0, -0.5), Vec3(0, 0, 0.5)};
  tiny.skeleton.parents = {0, 0};

  std::map<std::string, std::string> expected{
      {"too_many_joints", "max-joints"}, {"cyclic", "tree"}, {"misaligned", "alignment"}, {"ten_vertices", "degenerate"}};
  for (auto* a : {&too_many, &cyclic, &misaligned, &tiny}) assets.push_back(*a);
  return {assets, expected};
}

}  // namespace autorig::testing
