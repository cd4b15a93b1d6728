#pragma once

// The rigging network: shape and skeleton tokenizers, the hybrid-masked
// transformer with KV-cached incremental decoding, the diffusion head, and
// the fusing, connectivity and skinning heads.

#include "autorig/diffusion.hpp"
#include "autorig/geometry.hpp"
#include "autorig/nn/checkpoint.hpp"

#include <json.hpp>

namespace autorig {

struct ModelConfig {
  int d = 1024;
  int layers = 12;
  int heads = 16;
  int mlp_hidden = 4096;
  int num_points = 1024;
  int max_joints = kDefaultMaxJoints;
  std::vector<int> shape_tokenizer_hidden{512};  // 6 -> hidden... -> d
  int joint_embed_hidden = 512;                  // 3 -> hidden -> d
  int skeleton_token_hidden = 1024;              // 4d -> hidden -> d
  std::vector<int> fusing_hidden{2048, 1024};    // 3d -> hidden...; last entry is the fused width
  int head_hidden = 1024;                        // connectivity and skinning: (fused|d) + d -> hidden -> 1
  int denoiser_width = 1024;
  int denoiser_depth = 3;
  int time_dim = 128;
  int diffusion_steps = 1000;
  int sampling_steps = 50;
  bool heads_use_post_tokens = true;  // connectivity/skinning read transformer outputs (false: tokenizer outputs)

  /// The desk-scale configuration used for tests and the end-to-end run.
  static ModelConfig toy() {
    ModelConfig c;
    c.d = 128;
    c.layers = 4;
    c.heads = 4;
    c.mlp_hidden = 512;
    c.num_points = 256;
    c.shape_tokenizer_hidden = {128};
    c.joint_embed_hidden = 128;
    c.skeleton_token_hidden = 128;
    c.fusing_hidden = {256, 128};
    c.head_hidden = 128;
    c.denoiser_width = 128;
    c.denoiser_depth = 3;
    return c;
  }

  int fused_width() const { return fusing_hidden.back(); }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw Error(std::string("model config: ") + name + " must be positive");
    };
    positive(d, "d");
    positive(layers, "layers");
    positive(heads, "heads");
    positive(mlp_hidden, "mlp_hidden");
    positive(num_points, "num_points");
    positive(max_joints, "max_joints");
    positive(joint_embed_hidden, "joint_embed_hidden");
    positive(skeleton_token_hidden, "skeleton_token_hidden");
    positive(head_hidden, "head_hidden");
    positive(denoiser_width, "denoiser_width");
    positive(denoiser_depth, "denoiser_depth");
    positive(time_dim, "time_dim");
    positive(diffusion_steps, "diffusion_steps");
    positive(sampling_steps, "sampling_steps");
    if (d % heads != 0) throw Error("model config: d must be divisible by heads");
    if (time_dim % 2 != 0) throw Error("model config: time_dim must be even");
    if (sampling_steps > diffusion_steps) throw Error("model config: sampling_steps exceeds diffusion_steps");
    if (fusing_hidden.empty()) throw Error("model config: fusing_hidden is empty");
    for (int v : fusing_hidden) positive(v, "fusing_hidden");
    for (int v : shape_tokenizer_hidden) positive(v, "shape_tokenizer_hidden");
  }

  nlohmann::json to_json() const {
    return {{"d", d},
            {"layers", layers},
            {"heads", heads},
            {"mlp_hidden", mlp_hidden},
            {"num_points", num_points},
            {"max_joints", max_joints},
            {"shape_tokenizer_hidden", shape_tokenizer_hidden},
            {"joint_embed_hidden", joint_embed_hidden},
            {"skeleton_token_hidden", skeleton_token_hidden},
            {"fusing_hidden", fusing_hidden},
            {"head_hidden", head_hidden},
            {"denoiser_width", denoiser_width},
            {"denoiser_depth", denoiser_depth},
            {"time_dim", time_dim},
            {"diffusion_steps", diffusion_steps},
            {"sampling_steps", sampling_steps},
            {"heads_use_post_tokens", heads_use_post_tokens}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto read = [&](const char* key, auto& field) {
      if (!j.contains(key)) throw Error(std::string("model manifest is missing field ") + key);
      try {
        j.at(key).get_to(field);
      } catch (const std::exception&) {
        throw Error(std::string("model manifest field ") + key + " has the wrong type");
      }
    };
    read("d", c.d);
    read("layers", c.layers);
    read("heads", c.heads);
    read("mlp_hidden", c.mlp_hidden);
    read("num_points", c.num_points);
    read("max_joints", c.max_joints);
    read("shape_tokenizer_hidden", c.shape_tokenizer_hidden);
    read("joint_embed_hidden", c.joint_embed_hidden);
    read("skeleton_token_hidden", c.skeleton_token_hidden);
    read("fusing_hidden", c.fusing_hidden);
    read("head_hidden", c.head_hidden);
    read("denoiser_width", c.denoiser_width);
    read("denoiser_depth", c.denoiser_depth);
    read("time_dim", c.time_dim);
    read("diffusion_steps", c.diffusion_steps);
    read("sampling_steps", c.sampling_steps);
    read("heads_use_post_tokens", c.heads_use_post_tokens);
    c.validate();
    return c;
  }

  /// Name of the first field that differs from `other`, or empty.
  std::string first_mismatch(const ModelConfig& other) const {
    const auto a = to_json();
    const auto b = other.to_json();
    for (auto it = a.begin(); it != a.end(); ++it)
      if (!b.contains(it.key()) || b.at(it.key()) != it.value()) return it.key();
    return {};
  }
};

/// allow(q, key) = (q < L and key < L) or (q >= L and (key < L or key <= q)),
/// for query rows [first_row, first_row + rows) over keys [0, first_row + rows).
inline nn::AttentionMask hybrid_mask_rows(int L, int first_row, int rows) {
  if (L < 1) throw Error("hybrid mask needs at least one shape token");
  const int keys = first_row + rows;
  nn::AttentionMask mask(rows, keys);
  for (int r = 0; r < rows; ++r) {
    const int q = first_row + r;
    for (int key = 0; key < keys; ++key) mask(r, key) = (q < L) ? key < L : (key < L || key <= q);
  }
  return mask;
}

/// Full (L + k) x (L + k) hybrid mask.
inline nn::AttentionMask build_hybrid_mask(int L, int k) { return hybrid_mask_rows(L, 0, L + k); }

/// Per-layer keys/values of all processed positions.
template <typename T>
struct KvCache {
  std::vector<nn::LayerCache<T>> layers;
  int shape_count = 0;
  bool initialized = false;

  Eigen::Index length() const { return layers.empty() ? 0 : layers.front().length(); }
};

template <typename T>
class Model {
 public:
  using Var = nn::Var<T>;
  using Tape = nn::Tape<T>;

  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "model-init"));
    const int d = cfg_.d;
    std::vector<int> shape_dims{6};
    shape_dims.insert(shape_dims.end(), cfg_.shape_tokenizer_hidden.begin(), cfg_.shape_tokenizer_hidden.end());
    shape_dims.push_back(d);
    shape_tokenizer_ = nn::Mlp<T>::create(store_, "shape_tokenizer", shape_dims, rng);
    joint_embed_ = nn::Mlp<T>::create(store_, "joint_embed", {3, cfg_.joint_embed_hidden, d}, rng);
    positional_ = &store_.add("positional", cfg_.max_joints + 1, d, nn::Init::SmallUniform, rng);
    bos_ = &store_.add("bos", 1, d, nn::Init::SmallUniform, rng);
    skeleton_tokenizer_ = nn::Mlp<T>::create(store_, "skeleton_tokenizer", {4 * d, cfg_.skeleton_token_hidden, d}, rng);
    for (int l = 0; l < cfg_.layers; ++l)
      blocks_.push_back(nn::TransformerBlock<T>::create(store_, "block" + std::to_string(l), d, cfg_.heads, cfg_.mlp_hidden, rng));
    final_norm_ = nn::LayerNorm<T>::create(store_, "final_norm", d, rng);

    std::vector<int> fuse_dims{3 * d};
    fuse_dims.insert(fuse_dims.end(), cfg_.fusing_hidden.begin(), cfg_.fusing_hidden.end());
    fuse_ = nn::Mlp<T>::create(store_, "fuse", fuse_dims, rng);
    connect_ = PairHead::create(store_, "connect", cfg_.fused_width(), d, cfg_.head_hidden, rng);
    skin_ = PairHead::create(store_, "skin", d, d, cfg_.head_hidden, rng);
    denoiser_ = Denoiser<T>(store_, "denoiser", {cfg_.denoiser_width, cfg_.denoiser_depth, cfg_.time_dim, d}, rng);
    schedule_ = NoiseSchedule::cosine(cfg_.diffusion_steps);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const Denoiser<T>& denoiser() const { return denoiser_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  // ---- tokenizers --------------------------------------------------------

  /// L x d initial shape tokens from per-point concat(position, normal).
  Var tokenize_shape(Tape& tape, const SampledShape& shape) const {
    if (shape.points.rows() != shape.normals.rows() || shape.points.cols() != 3 || shape.normals.cols() != 3)
      throw ShapeError("shape points and normals must both be L x 3");
    for (int i = 0; i < shape.size(); ++i)
      if (std::abs(shape.normals.row(i).norm() - 1.0) > 1e-4)
        throw Error("normal " + std::to_string(i) + " is not unit length");
    Matrix<T> feats(shape.size(), 6);
    feats.leftCols(3) = shape.points.cast<T>();
    feats.rightCols(3) = shape.normals.cast<T>();
    return shape_tokenizer_(tape, tape.constant(std::move(feats)));
  }

  /// Joint-position embedding MLP(j), for n x 3 positions.
  Var embed_joints(Tape& tape, Var positions) const { return joint_embed_(tape, positions); }

  Var embed_joints(Tape& tape, const MatrixXd& positions) const {
    return joint_embed_(tape, tape.constant(positions.cast<T>()));
  }

  /// Learned positional table rows; index 0 is the BOS slot, joints use 1..max_joints.
  Var positional(Tape& tape, const std::vector<int>& index) const {
    for (int i : index)
      if (i < 0 || i > cfg_.max_joints)
        throw Error("positional index " + std::to_string(i) + " outside 0.." + std::to_string(cfg_.max_joints));
    return nn::gather_rows(tape.param(*positional_), index);
  }

  int positional_rows() const { return static_cast<int>(positional_->value.rows()); }

  /// Skeleton tokens MLP(concat(MLP(j_k), gamma(k), MLP(j_parent), gamma(parent))).
  /// `step` and `parent_step` are 1-based sequence indices.
  Var tokenize_skeleton(Tape& tape, Var joint_emb, const std::vector<int>& step, Var parent_emb,
                        const std::vector<int>& parent_step) const {
    return skeleton_tokenizer_(tape, nn::concat_cols<T>({joint_emb, positional(tape, step), parent_emb,
                                                          positional(tape, parent_step)}));
  }

  Var bos(Tape& tape) const { return tape.param(*bos_); }

  // ---- transformer -------------------------------------------------------

  /// Full pass over concatenated [shape; BOS; skeleton] tokens under `mask`.
  Var transformer(Tape& tape, Var x, const nn::AttentionMask& mask) const {
    if (x.cols() != cfg_.d) throw ShapeError("transformer input width mismatch");
    if (mask.rows() != x.rows() || mask.cols() != x.rows()) throw ShapeError("transformer mask does not match sequence length");
    for (const auto& b : blocks_) x = b(tape, x, mask);
    return final_norm_(tape, x);
  }

  /// Runs shape tokens + BOS through the network and fills a fresh cache.
  /// Returns the (L + 1) x d final-layer outputs.
  Var init_cache(Tape& tape, Var shape_tokens, KvCache<T>& cache) const {
    cache = KvCache<T>{};
    cache.layers.resize(blocks_.size());
    cache.shape_count = static_cast<int>(shape_tokens.rows());
    Var x = nn::concat_rows<T>({shape_tokens, bos(tape)});
    Var out = run_cached(tape, x, cache);
    cache.initialized = true;
    return out;
  }

  /// Appends one skeleton token (1 x d) and returns its final-layer output.
  Var kv_step(Tape& tape, Var token, KvCache<T>& cache) const {
    if (!cache.initialized) throw Error("kv_step on an uninitialized cache");
    if (token.rows() != 1) throw ShapeError("kv_step takes one token");
    return run_cached(tape, token, cache);
  }

  // ---- heads -------------------------------------------------------------

  /// Z' = F(concat(context, MLP(j), gamma(k))) for n rows; steps are 1-based.
  Var fuse(Tape& tape, Var context, Var joint_emb, const std::vector<int>& step) const {
    return fuse_(tape, nn::concat_cols<T>({context, joint_emb, positional(tape, step)}));
  }

  /// Connectivity logits (1 x k) of one fused row against k candidate tokens.
  Var connect_logits(Tape& tape, Var fused_row, Var candidates) const {
    return connect_.score(tape, connect_.project_query(tape, fused_row), connect_.project_key(tape, candidates));
  }

  /// Skinning logits (L x K) of shape tokens against joint tokens.
  Var skinning_logits(Tape& tape, Var shape_tokens, Var joint_tokens) const {
    return skin_.score(tape, skin_.project_query(tape, shape_tokens), skin_.project_key(tape, joint_tokens));
  }

  /// Two-layer scorer over concatenated (query, key) pairs. The first dense
  /// layer is applied to each side separately, so all pairs share the work.
  struct PairHead {
    nn::Parameter<T>* w1 = nullptr;  // (query + key) x hidden
    nn::Parameter<T>* b1 = nullptr;  // 1 x hidden
    nn::Parameter<T>* w2 = nullptr;  // hidden x 1
    nn::Parameter<T>* b2 = nullptr;  // 1 x 1
    int query_width = 0;
    int key_width = 0;

    static PairHead create(nn::ParamStore<T>& store, const std::string& name, int qw, int kw, int hidden, Rng& rng) {
      return {&store.add(name + ".0.w", qw + kw, hidden, nn::Init::GlorotUniform, rng),
              &store.add(name + ".0.b", 1, hidden, nn::Init::Zeros, rng),
              &store.add(name + ".1.w", hidden, 1, nn::Init::GlorotUniform, rng),
              &store.add(name + ".1.b", 1, 1, nn::Init::Zeros, rng), qw, kw};
    }

    Var project_query(Tape& tape, Var q) const {
      if (q.cols() != query_width) throw ShapeError("pair head: query width mismatch");
      return nn::affine(q, nn::slice_rows(tape.param(*w1), 0, query_width), tape.param(*b1));
    }

    Var project_key(Tape& tape, Var k) const {
      if (k.cols() != key_width) throw ShapeError("pair head: key width mismatch");
      return nn::matmul(k, nn::slice_rows(tape.param(*w1), query_width, key_width));
    }

    Var score(Tape& tape, Var projected_query, Var projected_key) const {
      return nn::pairwise_score(projected_query, projected_key, tape.param(*w2), tape.param(*b2));
    }
  };

  const PairHead& connect_head() const { return connect_; }
  const PairHead& skin_head() const { return skin_; }

  // ---- manifest ------------------------------------------------------------

  nlohmann::json manifest() const {
    return {{"format", "autorig-model"},
            {"model", cfg_.to_json()},
            {"schedule", {{"kind", "cosine"}, {"steps", cfg_.diffusion_steps}, {"s", 0.008}, {"sampling_steps", cfg_.sampling_steps}}}};
  }

  void save(const std::string& path, const nlohmann::json& extra = {}) const {
    nlohmann::json m = manifest();
    if (!extra.is_null()) m["extra"] = extra;
    nn::save_checkpoint(path, store_, m);
  }

 private:
  Var run_cached(Tape& tape, Var x, KvCache<T>& cache) const {
    const int first = static_cast<int>(cache.length());
    const nn::AttentionMask mask = hybrid_mask_rows(cache.shape_count, first, static_cast<int>(x.rows()));
    for (size_t l = 0; l < blocks_.size(); ++l) x = blocks_[l](tape, x, mask, cache.layers[l]);
    return final_norm_(tape, x);
  }

  ModelConfig cfg_;
  nn::ParamStore<T> store_;
  nn::Mlp<T> shape_tokenizer_, joint_embed_, skeleton_tokenizer_, fuse_;
  nn::Parameter<T>* positional_ = nullptr;
  nn::Parameter<T>* bos_ = nullptr;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> final_norm_;
  PairHead connect_, skin_;
  Denoiser<T> denoiser_;
  NoiseSchedule schedule_;
};

/// Loads a checkpoint into a new float model. If `expected` is given, its
/// configuration must match the manifest; the first mismatching field is named.
inline std::unique_ptr<Model<float>> load_model(const std::string& path, const ModelConfig* expected = nullptr) {
  nn::Checkpoint ck = nn::load_checkpoint(path);
  if (!ck.manifest.contains("model")) throw Error("checkpoint manifest has no model section");
  ModelConfig cfg = ModelConfig::from_json(ck.manifest.at("model"));
  if (expected) {
    std::string field = expected->first_mismatch(cfg);
    if (!field.empty()) throw Error("checkpoint/config mismatch in field '" + field + "'");
  }
  auto model = std::make_unique<Model<float>>(cfg);
  nn::assign_checkpoint(model->params(), ck);
  return model;
}

}  // namespace autorig
