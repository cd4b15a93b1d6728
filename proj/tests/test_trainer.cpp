#include "support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace autorig;
using namespace autorig::testing;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.model = tiny_config();
  c.batch_size = 2;
  c.steps = 3;
  c.warmup_steps = 2;
  c.learning_rate = 1e-3;
  c.diffusion_batch_mul = 2;
  c.log_every = 0;
  c.seed = 5;
  return c;
}

SynthParams small_synth() {
  SynthParams p;
  p.min_joints = 3;
  p.max_joints = 6;
  return p;
}

std::vector<double> bone_lengths(const JointSequence& seq) {
  std::vector<double> out;
  for (int k = 1; k < seq.joint_count(); ++k)
    out.push_back((seq.entries[k].joint - seq.entries[seq.entries[k].parent].joint).norm());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(LossIdentities, UniformSkinningIsLogK) {
  for (int K : {1, 2, 5, 17}) {
    nn::Tape<double> t(false);
    const MatrixXd targets = MatrixXd::Constant(6, K, 1.0 / K);
    EXPECT_NEAR(nn::soft_cross_entropy(t.constant(MatrixXd::Zero(6, K)), targets).scalar(), std::log(K), 1e-12);
    // any target distribution against a uniform prediction gives ln K
    Rng rng(K);
    MatrixXd w = random_matrix(rng, 6, K).cwiseAbs();
    for (int r = 0; r < 6; ++r) w.row(r) /= w.row(r).sum();
    EXPECT_NEAR(nn::soft_cross_entropy(t.constant(MatrixXd::Constant(6, K, 0.3)), w).scalar(), std::log(K), 1e-12);
  }
}

TEST(LossIdentities, ConnectivityBceExample) {
  nn::Tape<double> t(false);
  MatrixXd logits(1, 2);
  logits << std::log(0.8), std::log(0.2);
  EXPECT_NEAR(nn::softmax_bce(t.constant(logits), 0).scalar(), -2 * std::log(0.8), 1e-12);
}

TEST(PrepareExample, DeterministicAndConsistent) {
  TrainConfig cfg = tiny_train_config();
  cfg.p_aug = 0.5;
  const RigAsset asset = synth_asset(3, small_synth());
  Rng a(11), b(11);
  const TrainingExample x = prepare_example(asset, a, cfg);
  const TrainingExample y = prepare_example(asset, b, cfg);
  EXPECT_EQ(x.shape.points, y.shape.points);
  EXPECT_EQ(x.skinning, y.skinning);
  EXPECT_EQ(x.augmented, y.augmented);
  ASSERT_EQ(x.sequence.size(), y.sequence.size());
  for (int k = 0; k < x.sequence.size(); ++k) EXPECT_EQ(x.sequence.entries[k].parent, y.sequence.entries[k].parent);

  const int K = asset.skeleton.size();
  EXPECT_EQ(x.joint_count(), K);
  EXPECT_EQ(x.sequence.size(), K + 1);  // terminal step
  EXPECT_EQ(x.shape.size(), cfg.model.num_points);
  ASSERT_EQ(x.skinning.cols(), K);
  for (int r = 0; r < x.skinning.rows(); ++r) EXPECT_NEAR(x.skinning.row(r).sum(), 1.0, 1e-9);
}

TEST(PrepareExample, SkinningColumnsFollowSequenceOrder) {
  TrainConfig cfg = tiny_train_config();
  cfg.p_aug = 0;
  cfg.model.num_points = 200;
  const RigAsset asset = synth_asset(4, small_synth());
  Rng rng(12);
  const TrainingExample ex = prepare_example(asset, rng, cfg);
  // Points bound mostly to a joint lie near that joint's bones; compare the weighted centroid
  // of each column against the sequence joint it is labelled with.
  for (int k = 0; k < ex.joint_count(); ++k) {
    const Eigen::VectorXd w = ex.skinning.col(k);
    if (w.sum() < 1.0) continue;
    const Vec3 centroid = (ex.shape.points.transpose() * w) / w.sum();
    double best = 1e9;
    int arg = -1;
    for (int j = 0; j < ex.joint_count(); ++j) {
      const double d = (centroid - ex.sequence.entries[j].joint).norm();
      if (d < best) best = d, arg = j;
    }
    const int p = ex.sequence.entries[k].parent;
    const bool near_own_bone = arg == k || ex.sequence.entries[arg].parent == k || arg == p;
    EXPECT_TRUE(near_own_bone) << "column " << k << " nearest joint " << arg;
  }
}

TEST(PrepareExample, AugmentationKeepsBoneLengths) {
  TrainConfig cfg = tiny_train_config();
  cfg.shuffle_siblings = false;
  const RigAsset asset = synth_asset(5, small_synth());
  cfg.p_aug = 0;
  Rng r0(13);
  const TrainingExample plain = prepare_example(asset, r0, cfg);
  cfg.p_aug = 1;
  for (int trial = 0; trial < 5; ++trial) {
    Rng r1(100 + trial);
    const TrainingExample posed = prepare_example(asset, r1, cfg);
    EXPECT_TRUE(posed.augmented);
    const auto a = bone_lengths(plain.sequence), b = bone_lengths(posed.sequence);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  }
}

TEST(PrepareExample, CapacityErrors) {
  TrainConfig cfg = tiny_train_config();
  SynthParams p;
  p.min_joints = 10;
  p.max_joints = 10;
  Rng rng(14);
  EXPECT_THROW(prepare_example(synth_asset(6, p), rng, cfg), Error);
  // exactly at capacity: no terminal step
  cfg.model.max_joints = 10;
  const TrainingExample ex = prepare_example(synth_asset(6, p), rng, cfg);
  EXPECT_EQ(ex.sequence.size(), 10);
  EXPECT_FALSE(ex.sequence.terminated);
}

TEST(Losses, TotalIsSumAndPerStepValuesAverage) {
  Rng rng(15);
  const ModelConfig cfg = tiny_config();
  Model<double> model(cfg, 15);
  randomize(model.params(), rng, 0.3);
  const TrainingExample ex = random_example(rng, cfg, 5);
  const NoiseDraws draws = draw_noise(ex, 3, cfg.diffusion_steps, rng);
  nn::Tape<double> tape;
  const LossTerms<double> terms = compute_losses(tape, model, ex, draws);
  const LossBreakdown& v = terms.values;
  EXPECT_NEAR(v.total, v.joint + v.connect + v.skinning, 1e-12);
  ASSERT_EQ(static_cast<int>(v.joint_steps.size()), ex.sequence.size());
  ASSERT_EQ(static_cast<int>(v.connect_steps.size()), ex.sequence.size());
  double js = 0, cs = 0;
  for (double x : v.joint_steps) js += x;
  for (double x : v.connect_steps) cs += x;
  EXPECT_NEAR(js / ex.sequence.size(), v.joint, 1e-10);
  EXPECT_EQ(v.connect_steps[0], 0.0);
  EXPECT_NEAR(cs / (ex.sequence.size() - 1), v.connect, 1e-10);
}

TEST(TeacherForcing, EarlierPositionsIgnoreLaterJoints) {
  Rng rng(16);
  const ModelConfig cfg = tiny_config();
  Model<double> model(cfg, 16);
  randomize(model.params(), rng, 0.3);
  TrainingExample ex = random_example(rng, cfg, 6);
  TrainingExample changed = ex;
  const int from = 3;
  for (int k = from; k < changed.joint_count(); ++k) changed.sequence.entries[k].joint += Vec3(0.3, -0.2, 0.1);
  nn::Tape<double> t(false);
  const auto a = teacher_forced_pass(t, model, ex);
  const auto b = teacher_forced_pass(t, model, changed);
  const int L = cfg.num_points;
  // rows up to the output that conditions position `from` are unchanged
  EXPECT_EQ((a.outputs.value().topRows(L + 1 + from) - b.outputs.value().topRows(L + 1 + from)).cwiseAbs().maxCoeff(), 0.0);
  for (int k = 0; k < from; ++k) EXPECT_EQ(a.connect_logits[k].value(), b.connect_logits[k].value()) << k;
  EXPECT_NE(a.connect_logits[from].value(), b.connect_logits[from].value());
}

TEST(TeacherForcing, MatchesIncrementalEvaluation) {
  // Position k's connectivity logits from one teacher-forced pass equal those
  // computed from a cache that has seen only joints 0..k-1.
  Rng rng(17);
  const ModelConfig cfg = tiny_config();
  Model<double> model(cfg, 17);
  randomize(model.params(), rng, 0.3);
  const TrainingExample ex = random_example(rng, cfg, 5);
  nn::Tape<double> t(false);
  const auto pass = teacher_forced_pass(t, model, ex);
  const MatrixXd tokens = pass.joint_tokens.value();

  KvCache<double> cache;
  const MatrixXd head = model.init_cache(t, model.tokenize_shape(t, ex.shape), cache).value();
  std::vector<MatrixXd> outs{MatrixXd(head.row(cfg.num_points))};
  for (int k = 0; k < ex.joint_count(); ++k) outs.push_back(model.kv_step(t, t.constant(MatrixXd(tokens.row(k))), cache).value());
  for (int k = 0; k < ex.sequence.size(); ++k) {
    MatrixXd j(1, 3);
    j.row(0) = ex.sequence.entries[k == ex.joint_count() ? 0 : k].joint.transpose();
    auto emb = model.embed_joints(t, j);
    auto fused = model.fuse(t, t.constant(outs[k]), emb, {k + 1});
    std::vector<nn::Var<double>> cand;
    for (int i = 0; i < k; ++i) cand.push_back(t.constant(outs[i + 1]));
    cand.push_back(model.tokenize_skeleton(t, emb, {k + 1}, emb, {k + 1}));
    const MatrixXd logits = model.connect_logits(t, fused, nn::concat_rows<double>(cand)).value();
    EXPECT_LT((logits - pass.connect_logits[k].value()).cwiseAbs().maxCoeff(), 1e-10) << "position " << k;
  }
}

TEST(Adam, WarmupScheduleAndClipping) {
  Rng rng(18);
  nn::ParamStore<double> store;
  auto& p = store.add("p", 1, 2, nn::Init::Zeros, rng);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.warmup_steps = 4;
  Adam<double> opt(store, cfg);
  EXPECT_DOUBLE_EQ(opt.learning_rate(0), 0.025);
  EXPECT_DOUBLE_EQ(opt.learning_rate(3), 0.1);
  EXPECT_DOUBLE_EQ(opt.learning_rate(100), 0.1);
  p.grad << 30, -40;
  EXPECT_DOUBLE_EQ(opt.step(), 50.0);
  // first Adam step moves each coordinate by lr against the gradient sign
  EXPECT_NEAR(p.value(0, 0), -0.025, 1e-9);
  EXPECT_NEAR(p.value(0, 1), 0.025, 1e-9);
  p.grad(0, 0) = std::nan("");
  EXPECT_THROW(opt.step(), Error);
}

TEST(Adam, MinimizesQuadratic) {
  Rng rng(19);
  nn::ParamStore<double> store;
  auto& p = store.add("p", 1, 3, nn::Init::Zeros, rng);
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.warmup_steps = 0;
  Adam<double> opt(store, cfg);
  const MatrixXd goal = (MatrixXd(1, 3) << 1.0, -2.0, 0.5).finished();
  for (int i = 0; i < 2000; ++i) {
    store.zero_grad();
    nn::Tape<double> t;
    t.backward(nn::mean_squared_rows(t.param(p), goal));
    opt.step();
  }
  EXPECT_LT((p.value - goal).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(TrainingStep, LossDecreasesOnFixedBatch) {
  Rng rng(20);
  TrainConfig cfg = tiny_train_config();
  Model<float> model(cfg.model, 20);
  Adam<float> opt(model.params(), cfg);
  std::vector<TrainingExample> batch{random_example(rng, cfg.model, 4), random_example(rng, cfg.model, 3)};
  std::vector<NoiseDraws> draws;
  for (const auto& ex : batch) draws.push_back(draw_noise(ex, 2, cfg.model.diffusion_steps, rng));
  const double first = training_step(model, opt, batch, draws).total;
  double last = first;
  for (int i = 0; i < 60; ++i) last = training_step(model, opt, batch, draws).total;
  EXPECT_LT(last, 0.7 * first);
  EXPECT_THROW(training_step(model, opt, {}, {}), Error);
}

TEST(TrainingStep, NonFiniteLossNamesTheExample) {
  Rng rng(21);
  TrainConfig cfg = tiny_train_config();
  Model<float> model(cfg.model, 21);
  Adam<float> opt(model.params(), cfg);
  TrainingExample ex = random_example(rng, cfg.model, 3);
  ex.name = "broken";
  ex.shape.points(0, 0) = std::numeric_limits<double>::infinity();
  const NoiseDraws d = draw_noise(ex, 1, cfg.model.diffusion_steps, rng);
  try {
    training_step(model, opt, {ex}, {d});
    FAIL();
  } catch (const TrainingDivergedError& e) {
    EXPECT_NE(std::string(e.what()).find("broken"), std::string::npos);
  }
}

TEST(Fit, DeterministicGivenSeed) {
  const TrainConfig cfg = tiny_train_config();
  const auto assets = synth_generate(3, 1, small_synth());
  Model<float> a(cfg.model, 1), b(cfg.model, 1);
  const FitResult ra = fit(a, assets, cfg);
  const FitResult rb = fit(b, assets, cfg);
  ASSERT_EQ(ra.curve.size(), 3u);
  for (size_t i = 0; i < ra.curve.size(); ++i) EXPECT_EQ(ra.curve[i].total, rb.curve[i].total);
  for (size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);

  TrainConfig threaded = cfg;
  threaded.workers = 2;
  Model<float> c(cfg.model, 1);
  const FitResult rc = fit(c, assets, threaded);
  for (size_t i = 0; i < ra.curve.size(); ++i) EXPECT_EQ(ra.curve[i].total, rc.curve[i].total);
}

TEST(Fit, WritesCurveAndCheckpoint) {
  TrainConfig cfg = tiny_train_config();
  cfg.checkpoint_every = 2;
  const auto dir = std::filesystem::temp_directory_path() / "autorig_fit_test";
  std::filesystem::create_directories(dir);
  FitOptions opts;
  opts.checkpoint_path = (dir / "model.ckpt").string();
  opts.loss_csv_path = (dir / "loss.csv").string();
  Model<float> model(cfg.model, 2);
  fit(model, synth_generate(2, 2, small_synth()), cfg, opts);
  std::ifstream csv(opts.loss_csv_path);
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,L_joint,L_connect,L_skinning,total");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(rows, 3);
  nn::Checkpoint ck = nn::load_checkpoint(opts.checkpoint_path);
  EXPECT_EQ(ck.manifest["extra"]["step"], 3);
  std::filesystem::remove_all(dir);
}

TEST(Fit, StopsEarlyOnRequest) {
  TrainConfig cfg = tiny_train_config();
  cfg.steps = 10;
  const auto dir = std::filesystem::temp_directory_path() / "autorig_fit_stop";
  std::filesystem::create_directories(dir);
  FitOptions opts;
  opts.checkpoint_path = (dir / "model.ckpt").string();
  opts.stop_when = [](const LossRecord& r) { return r.step == 4; };
  Model<float> model(cfg.model, 4);
  const FitResult r = fit(model, synth_generate(2, 4, small_synth()), cfg, opts);
  EXPECT_EQ(r.curve.size(), 4u);
  EXPECT_EQ(nn::load_checkpoint(opts.checkpoint_path).manifest["extra"]["step"], 4);
  std::filesystem::remove_all(dir);
}

TEST(Fit, SkipsUnusableAssetsAndRejectsMismatch) {
  TrainConfig cfg = tiny_train_config();
  auto assets = synth_generate(2, 3, small_synth());
  SynthParams big;
  big.min_joints = 12;
  big.max_joints = 12;
  assets.push_back(synth_asset(9, big));
  assets.back().name = "too_big";
  Model<float> model(cfg.model, 3);
  const FitResult r = fit(model, assets, cfg);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0].rfind("too_big", 0), 0u);
  EXPECT_EQ(r.curve.size(), 3u);

  Model<float> other(ModelConfig::toy(), 3);
  EXPECT_THROW(fit(other, assets, cfg), Error);
}

TEST(TrainConfig, ParseAndErrors) {
  std::istringstream ok(
      "# comment\n"
      "model.preset = toy\n"
      "steps = 123   # trailing\n"
      "learning_rate = 3e-4\n"
      "shuffle_siblings = false\n"
      "model.fusing_hidden = 64,32\n"
      "model.layers = 2\n");
  const TrainConfig c = parse_train_config(ok);
  EXPECT_EQ(c.steps, 123);
  EXPECT_DOUBLE_EQ(c.learning_rate, 3e-4);
  EXPECT_FALSE(c.shuffle_siblings);
  EXPECT_EQ(c.model.d, 128);
  EXPECT_EQ(c.model.layers, 2);
  EXPECT_EQ(c.model.fusing_hidden, (std::vector<int>{64, 32}));

  auto line_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_train_config(in);
    } catch (const ParseError& e) {
      return e.line();
    }
    return -1;
  };
  EXPECT_EQ(line_of("steps = 10\nbogus = 1\n"), 2);
  EXPECT_EQ(line_of("steps = ten\n"), 1);
  EXPECT_EQ(line_of("\n\nsteps 10\n"), 3);
  EXPECT_EQ(line_of("model.preset = huge\n"), 1);
  std::istringstream bad_range("p_aug = 1.5\n");
  EXPECT_THROW(parse_train_config(bad_range), Error);
}
