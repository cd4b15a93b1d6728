#pragma once

// Teacher-forced training: example preparation with sibling shuffling and
// pose augmentation, the combined joint/connectivity/skinning objective, an
// Adam optimizer with warmup and gradient clipping, and the fitting loop.

#include "autorig/dataset.hpp"
#include "autorig/model.hpp"

#include <chrono>
#include <functional>
#include <iomanip>
#include <thread>

namespace autorig {

struct TrainConfig {
  ModelConfig model;
  int batch_size = 8;
  double learning_rate = 1e-4;
  int warmup_steps = 500;
  int steps = 20000;
  double p_aug = 0.5;
  double max_angle = 45.0;  // degrees
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int diffusion_batch_mul = 4;  // noise draws per sequence position
  bool shuffle_siblings = true;
  int checkpoint_every = 0;     // 0: final checkpoint only
  int log_every = 100;
  int workers = 1;

  void validate() const {
    model.validate();
    if (batch_size <= 0) throw Error("train config: batch_size must be positive");
    if (!(learning_rate > 0)) throw Error("train config: learning_rate must be positive");
    if (warmup_steps < 0) throw Error("train config: warmup_steps must be non-negative");
    if (steps <= 0) throw Error("train config: steps must be positive");
    if (!(p_aug >= 0 && p_aug <= 1)) throw Error("train config: p_aug must lie in [0, 1]");
    if (!(max_angle > 0 && max_angle <= 180)) throw Error("train config: max_angle must lie in (0, 180]");
    if (!(grad_clip > 0)) throw Error("train config: grad_clip must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw Error("train config: betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw Error("train config: adam_eps must be positive");
    if (diffusion_batch_mul <= 0) throw Error("train config: diffusion_batch_mul must be positive");
    if (checkpoint_every < 0 || log_every < 0) throw Error("train config: intervals must be non-negative");
    if (workers <= 0) throw Error("train config: workers must be positive");
  }
};

/// Reads `key = value` lines ('#' comments). Keys are the TrainConfig field
/// names; model fields use a `model.` prefix, and `model.preset = toy|full`
/// selects the base model configuration before the other model keys apply.
inline TrainConfig parse_train_config(std::istream& in) {
  std::vector<std::tuple<std::string, std::string, int>> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", lineno);
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), lineno);
  }

  TrainConfig cfg;
  for (const auto& [key, value, ln] : entries)
    if (key == "model.preset") {
      if (value == "toy")
        cfg.model = ModelConfig::toy();
      else if (value == "full")
        cfg.model = ModelConfig{};
      else
        throw ParseError("unknown model preset '" + value + "'", ln);
    }

  for (const auto& [key, value, ln] : entries) {
    if (key == "model.preset") continue;
    auto num = [&, &value = value, &ln = ln, &key = key]() {
      try {
        size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
      } catch (const std::exception&) {
        throw ParseError("value of " + key + " is not a number: '" + value + "'", ln);
      }
    };
    auto integer = [&, &value = value, &ln = ln, &key = key]() {
      const double v = num();
      if (v != std::floor(v)) throw ParseError("value of " + key + " must be an integer", ln);
      return static_cast<long long>(v);
    };
    auto boolean = [&, &value = value, &ln = ln, &key = key]() {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      throw ParseError("value of " + key + " must be true or false", ln);
    };
    auto int_list = [&, &value = value, &ln = ln, &key = key]() {
      std::vector<int> out;
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        try {
          out.push_back(std::stoi(item));
        } catch (const std::exception&) {
          throw ParseError("value of " + key + " must be a comma-separated list of integers", ln);
        }
      }
      return out;
    };
    ModelConfig& m = cfg.model;
    if (key == "batch_size") cfg.batch_size = static_cast<int>(integer());
    else if (key == "learning_rate") cfg.learning_rate = num();
    else if (key == "warmup_steps") cfg.warmup_steps = static_cast<int>(integer());
    else if (key == "steps") cfg.steps = static_cast<int>(integer());
    else if (key == "p_aug") cfg.p_aug = num();
    else if (key == "max_angle") cfg.max_angle = num();
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(integer());
    else if (key == "grad_clip") cfg.grad_clip = num();
    else if (key == "beta1") cfg.beta1 = num();
    else if (key == "beta2") cfg.beta2 = num();
    else if (key == "adam_eps") cfg.adam_eps = num();
    else if (key == "diffusion_batch_mul") cfg.diffusion_batch_mul = static_cast<int>(integer());
    else if (key == "shuffle_siblings") cfg.shuffle_siblings = boolean();
    else if (key == "checkpoint_every") cfg.checkpoint_every = static_cast<int>(integer());
    else if (key == "log_every") cfg.log_every = static_cast<int>(integer());
    else if (key == "workers") cfg.workers = static_cast<int>(integer());
    else if (key == "model.d") m.d = static_cast<int>(integer());
    else if (key == "model.layers") m.layers = static_cast<int>(integer());
    else if (key == "model.heads") m.heads = static_cast<int>(integer());
    else if (key == "model.mlp_hidden") m.mlp_hidden = static_cast<int>(integer());
    else if (key == "model.num_points") m.num_points = static_cast<int>(integer());
    else if (key == "model.max_joints") m.max_joints = static_cast<int>(integer());
    else if (key == "model.shape_tokenizer_hidden") m.shape_tokenizer_hidden = int_list();
    else if (key == "model.joint_embed_hidden") m.joint_embed_hidden = static_cast<int>(integer());
    else if (key == "model.skeleton_token_hidden") m.skeleton_token_hidden = static_cast<int>(integer());
    else if (key == "model.fusing_hidden") m.fusing_hidden = int_list();
    else if (key == "model.head_hidden") m.head_hidden = static_cast<int>(integer());
    else if (key == "model.denoiser_width") m.denoiser_width = static_cast<int>(integer());
    else if (key == "model.denoiser_depth") m.denoiser_depth = static_cast<int>(integer());
    else if (key == "model.time_dim") m.time_dim = static_cast<int>(integer());
    else if (key == "model.diffusion_steps") m.diffusion_steps = static_cast<int>(integer());
    else if (key == "model.sampling_steps") m.sampling_steps = static_cast<int>(integer());
    else if (key == "model.heads_use_post_tokens") m.heads_use_post_tokens = boolean();
    else throw ParseError("unknown config key '" + key + "'", ln);
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  return parse_train_config(in);
}

// ---------------------------------------------------------------------------
// Examples

struct TrainingExample {
  std::string name;
  SampledShape shape;
  /// BFS sequence; the terminal step is appended unless the skeleton already
  /// fills every positional slot. Entry parents are the connectivity targets.
  JointSequence sequence;
  MatrixXd skinning;  // L x K, columns in sequence order
  bool augmented = false;

  int joint_count() const { return sequence.joint_count(); }
};

/// normalize -> (with probability p_aug) random pose -> sample points ->
/// sibling-shuffled BFS -> terminal -> GT skinning at the samples.
inline TrainingExample prepare_example(const RigAsset& asset, Rng& rng, const TrainConfig& cfg) {
  const int K = asset.skeleton.size();
  if (K > cfg.model.max_joints)
    throw Error(asset.name + ": " + std::to_string(K) + " joints exceed capacity " + std::to_string(cfg.model.max_joints));
  if (asset.vertex_skinning.size() != asset.mesh.vertices.size()) throw Error(asset.name + ": asset has no skinning");
  const NormalizationTransform t = normalization_for(asset.mesh);
  TriMesh mesh = transform_mesh(asset.mesh, t);
  Skeleton sk = transform_skeleton(asset.skeleton, t);

  TrainingExample ex;
  ex.name = asset.name;
  if (uniform01(rng) < cfg.p_aug) {
    std::tie(mesh, sk) = random_pose_augment(mesh, sk, asset.vertex_skinning, cfg.max_angle, rng);
    ex.augmented = true;
  }
  const SurfaceSamples samples = sample_surface_with_faces(mesh, cfg.model.num_points, rng());
  ex.shape = samples.shape;
  ex.sequence = bfs_serialize(sk, cfg.shuffle_siblings ? &rng : nullptr, cfg.model.max_joints);
  if (K < cfg.model.max_joints) ex.sequence = append_terminal(std::move(ex.sequence));

  const SkinningMatrix W = transfer_skinning(samples, mesh, asset.vertex_skinning, K);
  ex.skinning.resize(W.rows(), K);
  for (int k = 0; k < K; ++k) ex.skinning.col(k) = W.col(ex.sequence.source_index[k]);
  return ex;
}

// ---------------------------------------------------------------------------
// Objective

struct LossBreakdown {
  double joint = 0;
  double connect = 0;
  double skinning = 0;
  double total = 0;
  std::vector<double> joint_steps;    // per sequence position
  std::vector<double> connect_steps;  // per sequence position (0 for the root)
};

template <typename T>
struct LossTerms {
  nn::Var<T> joint, connect, skinning, total;
  LossBreakdown values;
};

/// Intermediate tensors of one teacher-forced pass.
template <typename T>
struct TeacherForcedPass {
  nn::Var<T> shape_tokens;     // L x d, tokenizer output
  nn::Var<T> outputs;          // (L + 1 + K) x d, transformer output
  nn::Var<T> joint_tokens;     // K x d, tokenizer output
  nn::Var<T> joint_emb;        // S x d, embedding of every target position
  nn::Var<T> fused;            // S x fused width
  std::vector<nn::Var<T>> connect_logits;  // per position, 1 x (k + 1)
  nn::Var<T> skinning_logits;  // L x K
};

/// One masked forward pass over [shape; BOS; T_1..T_K] with GT joints fed to
/// every head. Position k is conditioned on output row L + k.
template <typename T>
TeacherForcedPass<T> teacher_forced_pass(nn::Tape<T>& tape, const Model<T>& model, const TrainingExample& ex) {
  const ModelConfig& cfg = model.config();
  const int L = ex.shape.size();
  const int K = ex.joint_count();
  const int S = ex.sequence.size();
  if (K < 1) throw Error("example has no joints");
  if (ex.skinning.rows() != L || ex.skinning.cols() != K) throw ShapeError("example skinning must be L x K");

  TeacherForcedPass<T> pass;
  MatrixXd targets(S, 3);
  std::vector<int> steps(S), parents(K), parent_steps(K);
  for (int k = 0; k < S; ++k) {
    targets.row(k) = ex.sequence.entries[k].joint.transpose();
    steps[k] = k + 1;
  }
  for (int k = 0; k < K; ++k) {
    parents[k] = ex.sequence.entries[k].parent;
    if (parents[k] < 0 || parents[k] > k || (k > 0 && parents[k] == k)) throw Error("example sequence is malformed");
    parent_steps[k] = parents[k] + 1;
  }
  pass.shape_tokens = model.tokenize_shape(tape, ex.shape);
  pass.joint_emb = model.embed_joints(tape, targets);
  nn::Var<T> real_emb = nn::slice_rows(pass.joint_emb, 0, K);
  pass.joint_tokens = model.tokenize_skeleton(tape, real_emb, std::vector<int>(steps.begin(), steps.begin() + K),
                                              nn::gather_rows(real_emb, parents), parent_steps);
  nn::Var<T> x = nn::concat_rows<T>({pass.shape_tokens, model.bos(tape), pass.joint_tokens});
  pass.outputs = model.transformer(tape, x, build_hybrid_mask(L, K + 1));

  nn::Var<T> context = nn::slice_rows(pass.outputs, L, S);
  pass.fused = model.fuse(tape, context, pass.joint_emb, steps);

  const bool post = cfg.heads_use_post_tokens;
  nn::Var<T> joint_keys = post ? nn::slice_rows(pass.outputs, L + 1, K) : pass.joint_tokens;
  nn::Var<T> self_tokens = model.tokenize_skeleton(tape, pass.joint_emb, steps, pass.joint_emb, steps);
  const auto& head = model.connect_head();
  nn::Var<T> key_proj = head.project_key(tape, joint_keys);
  nn::Var<T> self_proj = head.project_key(tape, self_tokens);
  nn::Var<T> query_proj = head.project_query(tape, pass.fused);
  for (int k = 0; k < S; ++k) {
    nn::Var<T> cands = k == 0 ? nn::slice_rows(self_proj, 0, 1)
                              : nn::concat_rows<T>({nn::slice_rows(key_proj, 0, k), nn::slice_rows(self_proj, k, 1)});
    pass.connect_logits.push_back(head.score(tape, nn::slice_rows(query_proj, k, 1), cands));
  }
  nn::Var<T> shape_keys = post ? nn::slice_rows(pass.outputs, 0, L) : pass.shape_tokens;
  pass.skinning_logits = model.skinning_logits(tape, shape_keys, joint_keys);
  return pass;
}

/// L_joint + L_connect + L_skinning for one example. `draws` holds
/// diffusion_batch_mul rows per sequence position (position-major).
template <typename T>
LossTerms<T> compute_losses(nn::Tape<T>& tape, const Model<T>& model, const TrainingExample& ex, const NoiseDraws& draws) {
  const int S = ex.sequence.size();
  if (draws.eps.rows() == 0 || draws.eps.rows() % S != 0) throw ShapeError("noise draws must be a multiple of the sequence length");
  const int reps = static_cast<int>(draws.eps.rows()) / S;
  TeacherForcedPass<T> pass = teacher_forced_pass(tape, model, ex);
  const int L = ex.shape.size();

  LossTerms<T> out;
  LossBreakdown& v = out.values;

  std::vector<int> cond_rows(static_cast<size_t>(S) * reps);
  MatrixXd targets(S * reps, 3);
  for (int k = 0; k < S; ++k)
    for (int r = 0; r < reps; ++r) {
      cond_rows[k * reps + r] = L + k;
      targets.row(k * reps + r) = ex.sequence.entries[k].joint.transpose();
    }
  nn::Var<T> cond = nn::gather_rows(pass.outputs, cond_rows);
  Matrix<T> pred;
  out.joint = joint_loss(tape, model.denoiser(), model.schedule(), cond, targets, draws, &pred);
  v.joint_steps.assign(S, 0.0);
  for (int i = 0; i < S * reps; ++i)
    v.joint_steps[i / reps] += (pred.row(i).template cast<double>() - draws.eps.row(i)).squaredNorm() / reps;

  std::vector<nn::Var<T>> connect_terms;
  v.connect_steps.assign(S, 0.0);
  for (int k = 1; k < S; ++k) {
    nn::Var<T> term = nn::softmax_bce(pass.connect_logits[k], ex.sequence.entries[k].parent);
    v.connect_steps[k] = static_cast<double>(term.scalar());
    connect_terms.push_back(term);
  }
  if (connect_terms.empty()) {
    out.connect = tape.constant(Matrix<T>::Zero(1, 1));
  } else {
    out.connect = nn::scale(nn::sum(nn::concat_cols<T>(connect_terms)), T(1) / static_cast<T>(connect_terms.size()));
  }
  out.skinning = nn::soft_cross_entropy(pass.skinning_logits, Matrix<T>(ex.skinning.cast<T>()));
  out.total = nn::add(nn::add(out.joint, out.connect), out.skinning);

  v.joint = static_cast<double>(out.joint.scalar());
  v.connect = static_cast<double>(out.connect.scalar());
  v.skinning = static_cast<double>(out.skinning.scalar());
  v.total = static_cast<double>(out.total.scalar());
  return out;
}

/// Noise draws for one example: `reps` per sequence position.
inline NoiseDraws draw_noise(const TrainingExample& ex, int reps, int diffusion_steps, Rng& rng) {
  return NoiseDraws::sample(ex.sequence.size() * reps, diffusion_steps, rng);
}

/// Teacher-forced predictions on GT joints: argmax parent per sequence position
/// and skinning probabilities (L x K, sequence column order).
struct TeacherForcedPrediction {
  std::vector<int> parents;
  MatrixXd skinning;
};

template <typename T>
TeacherForcedPrediction teacher_forced_predict(const Model<T>& model, const TrainingExample& ex) {
  nn::Tape<T> tape(false);
  TeacherForcedPass<T> pass = teacher_forced_pass(tape, model, ex);
  TeacherForcedPrediction out;
  for (const auto& logits : pass.connect_logits) {
    Eigen::Index best = 0;
    logits.value().row(0).maxCoeff(&best);
    out.parents.push_back(static_cast<int>(best));
  }
  Matrix<T> p = nn::softmax_rows(pass.skinning_logits).value();
  out.skinning = p.template cast<double>();
  return out;
}

// ---------------------------------------------------------------------------
// Optimization

/// Adam with bias correction, a linear warmup to the base rate, and global
/// gradient-norm clipping.
template <typename T>
class Adam {
 public:
  Adam(nn::ParamStore<T>& store, const TrainConfig& cfg) : store_(&store), cfg_(cfg) {
    for (size_t i = 0; i < store.size(); ++i) {
      m_.push_back(Matrix<double>::Zero(store[i].value.rows(), store[i].value.cols()));
      v_.push_back(Matrix<double>::Zero(store[i].value.rows(), store[i].value.cols()));
    }
  }

  double learning_rate(int step) const {
    if (cfg_.warmup_steps == 0 || step >= cfg_.warmup_steps) return cfg_.learning_rate;
    return cfg_.learning_rate * static_cast<double>(step + 1) / cfg_.warmup_steps;
  }

  int steps_taken() const { return t_; }

  /// Applies one update from the accumulated gradients; returns the pre-clip gradient norm.
  double step() {
    double sq = 0;
    for (size_t i = 0; i < store_->size(); ++i) sq += (*store_)[i].grad.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw Error("non-finite gradient norm");
    const double clip = norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
    const double lr = learning_rate(t_);
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < store_->size(); ++i) {
      nn::Parameter<T>& p = (*store_)[i];
      const Matrix<double> g = p.grad.template cast<double>() * clip;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const Matrix<double> update = (m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + cfg_.adam_eps);
      p.value -= (lr * update).template cast<T>();
    }
    return norm;
  }

 private:
  nn::ParamStore<T>* store_;
  TrainConfig cfg_;
  std::vector<Matrix<double>> m_, v_;
  int t_ = 0;
};

class TrainingDivergedError : public Error {
 public:
  using Error::Error;
};

/// Forward/backward over a batch (gradients averaged) followed by one optimizer update.
template <typename T>
LossBreakdown training_step(Model<T>& model, Adam<T>& opt, const std::vector<TrainingExample>& batch,
                            const std::vector<NoiseDraws>& draws) {
  if (batch.empty()) throw Error("empty batch");
  if (draws.size() != batch.size()) throw Error("one set of noise draws per example is required");
  model.params().zero_grad();
  LossBreakdown mean;
  const T inv = T(1) / static_cast<T>(batch.size());
  for (size_t b = 0; b < batch.size(); ++b) {
    nn::Tape<T> tape;
    LossTerms<T> terms = compute_losses(tape, model, batch[b], draws[b]);
    const LossBreakdown& v = terms.values;
    if (!std::isfinite(v.total)) {
      std::ostringstream os;
      os << "non-finite loss on example '" << batch[b].name << "' (joint " << v.joint << ", connect " << v.connect
         << ", skinning " << v.skinning << ") at optimizer step " << opt.steps_taken();
      throw TrainingDivergedError(os.str());
    }
    tape.backward(nn::scale(terms.total, inv));
    mean.joint += v.joint / batch.size();
    mean.connect += v.connect / batch.size();
    mean.skinning += v.skinning / batch.size();
  }
  mean.total = mean.joint + mean.connect + mean.skinning;
  opt.step();
  return mean;
}

// ---------------------------------------------------------------------------
// Fitting loop

struct LossRecord {
  int step = 0;
  double joint = 0, connect = 0, skinning = 0, total = 0;
};

struct FitOptions {
  std::string checkpoint_path;  // empty: no checkpoint files
  std::string loss_csv_path;    // empty: no CSV
  std::ostream* log = nullptr;
  std::function<void(const LossRecord&)> on_step;
  std::function<bool(const LossRecord&)> stop_when;  // checked after every step; true ends training early
};

struct FitResult {
  std::vector<LossRecord> curve;
  std::vector<std::string> skipped;  // assets whose example preparation failed
  double seconds = 0;
};

inline void write_loss_header(std::ostream& out) { out << "step,L_joint,L_connect,L_skinning,total\n"; }

inline void write_loss_row(std::ostream& out, const LossRecord& r) {
  out << r.step << ',' << std::setprecision(9) << r.joint << ',' << r.connect << ',' << r.skinning << ',' << r.total
      << "\n";
}

/// Trains `model` on `assets`. Batches walk seeded permutations of the assets;
/// every example and noise draw uses its own named substream, so a run is a
/// pure function of the seed.
template <typename T>
FitResult fit(Model<T>& model, const std::vector<RigAsset>& assets, const TrainConfig& cfg, const FitOptions& opts = {}) {
  cfg.validate();
  if (assets.empty()) throw Error("training set is empty");
  if (!model.config().first_mismatch(cfg.model).empty())
    throw Error("model does not match train config field '" + model.config().first_mismatch(cfg.model) + "'");
  const auto t0 = std::chrono::steady_clock::now();
  FitResult result;
  Adam<T> opt(model.params(), cfg);

  std::ofstream csv;
  if (!opts.loss_csv_path.empty()) {
    csv.open(opts.loss_csv_path);
    if (!csv) throw Error("cannot write " + opts.loss_csv_path);
    write_loss_header(csv);
  }

  std::vector<bool> usable(assets.size(), true);
  std::vector<size_t> order;
  size_t cursor = 0;
  int epoch = 0;
  auto next_asset = [&]() -> size_t {
    for (size_t guard = 0; guard < 2 * assets.size() + 2; ++guard) {
      if (cursor >= order.size()) {
        order.clear();
        for (size_t i = 0; i < assets.size(); ++i)
          if (usable[i]) order.push_back(i);
        if (order.empty()) throw Error("no asset produced a usable training example");
        Rng perm = substream(cfg.seed, "epoch", static_cast<std::uint64_t>(epoch++));
        std::shuffle(order.begin(), order.end(), perm);
        cursor = 0;
      }
      const size_t i = order[cursor++];
      if (usable[i]) return i;
    }
    throw Error("no asset produced a usable training example");
  };

  std::vector<TrainingExample> batch(cfg.batch_size);
  std::vector<NoiseDraws> draws(cfg.batch_size);
  std::vector<size_t> picks(cfg.batch_size);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < cfg.batch_size; ++b) picks[b] = next_asset();
    auto prepare = [&](int b) {
      const std::uint64_t slot = static_cast<std::uint64_t>(step) * cfg.batch_size + b;
      Rng ex_rng = substream(cfg.seed, "example", slot);
      batch[b] = prepare_example(assets[picks[b]], ex_rng, cfg);
      Rng noise_rng = substream(cfg.seed, "noise", slot);
      draws[b] = draw_noise(batch[b], cfg.diffusion_batch_mul, cfg.model.diffusion_steps, noise_rng);
    };
    std::vector<std::string> errors(cfg.batch_size);
    auto guarded = [&](int b) {
      try {
        prepare(b);
      } catch (const Error& e) {
        errors[b] = e.what();
      }
    };
    if (cfg.workers > 1) {
      std::vector<std::thread> pool;
      for (int w = 0; w < std::min(cfg.workers, cfg.batch_size); ++w)
        pool.emplace_back([&, w] {
          for (int b = w; b < cfg.batch_size; b += cfg.workers) guarded(b);
        });
      for (auto& th : pool) th.join();
    } else {
      for (int b = 0; b < cfg.batch_size; ++b) guarded(b);
    }
    bool retry = false;
    for (int b = 0; b < cfg.batch_size; ++b)
      if (!errors[b].empty()) {
        usable[picks[b]] = false;
        result.skipped.push_back(assets[picks[b]].name + ": " + errors[b]);
        if (opts.log) *opts.log << "skipping asset " << result.skipped.back() << "\n";
        retry = true;
      }
    if (retry) {
      --step;
      continue;
    }

    const LossBreakdown loss = training_step(model, opt, batch, draws);
    const LossRecord rec{step + 1, loss.joint, loss.connect, loss.skinning, loss.total};
    result.curve.push_back(rec);
    if (csv) write_loss_row(csv, rec);
    if (opts.on_step) opts.on_step(rec);
    if (opts.log && cfg.log_every > 0 && (rec.step % cfg.log_every == 0 || rec.step == 1)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *opts.log << "step " << rec.step << "  joint " << rec.joint << "  connect " << rec.connect << "  skinning "
                << rec.skinning << "  total " << rec.total << "  (" << std::fixed << std::setprecision(1) << secs
                << " s)" << std::defaultfloat << std::setprecision(6) << "\n";
    }
    if (!opts.checkpoint_path.empty() && cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 &&
        rec.step < cfg.steps)
      model.save(opts.checkpoint_path, {{"step", rec.step}, {"seed", cfg.seed}});
    if (opts.stop_when && opts.stop_when(rec)) break;
  }
  const int done = result.curve.empty() ? 0 : result.curve.back().step;
  if (!opts.checkpoint_path.empty()) model.save(opts.checkpoint_path, {{"step", done}, {"seed", cfg.seed}});
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace autorig
