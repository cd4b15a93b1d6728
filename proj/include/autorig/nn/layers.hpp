#pragma once

// Parameter storage and the layer building blocks used by the model.

#include "autorig/nn/ops.hpp"

#include <map>
#include <memory>
#include <unordered_map>

namespace autorig::nn {

enum class Init { GlorotUniform, Zeros, Ones, SmallUniform };

/// Named parameters with stable addresses (layers keep pointers into the store).
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init, Rng& rng) {
    if (index_.count(name)) throw Error("duplicate parameter name " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value.resize(rows, cols);
    switch (init) {
      case Init::Zeros: p->value.setZero(); break;
      case Init::Ones: p->value.setOnes(); break;
      case Init::GlorotUniform: {
        const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
        fill_uniform(p->value, limit, rng);
        break;
      }
      case Init::SmallUniform: fill_uniform(p->value, 0.02 * std::sqrt(3.0), rng); break;
    }
    p->grad = Matrix<T>::Zero(rows, cols);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return *params_[it->second];
  }

  size_t size() const { return params_.size(); }
  Parameter<T>& operator[](size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](size_t i) const { return *params_[i]; }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += static_cast<size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero(p->value.rows(), p->value.cols());
  }

  /// Copies values by name from another store of any scalar type.
  template <typename U>
  void copy_values_from(const ParamStore<U>& other) {
    for (auto& p : params_) {
      const auto& src = other.get(p->name).value;
      if (src.rows() != p->value.rows() || src.cols() != p->value.cols())
        throw ShapeError("parameter " + p->name + " shape differs");
      p->value = src.template cast<T>();
    }
  }

 private:
  static void fill_uniform(Matrix<T>& m, double limit, Rng& rng) {
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  }

  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, size_t> index_;
};

template <typename T>
struct Dense {
  Parameter<T>* weight = nullptr;  // in x out
  Parameter<T>* bias = nullptr;    // 1 x out

  static Dense create(ParamStore<T>& store, const std::string& name, int in, int out, Rng& rng,
                      Init init = Init::GlorotUniform) {
    return {&store.add(name + ".w", in, out, init, rng), &store.add(name + ".b", 1, out, Init::Zeros, rng)};
  }

  int in() const { return static_cast<int>(weight->value.rows()); }
  int out() const { return static_cast<int>(weight->value.cols()); }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const { return affine(x, tape.param(*weight), tape.param(*bias)); }
};

/// Dense layers with exact GeLU between them (none after the last).
template <typename T>
struct Mlp {
  std::vector<Dense<T>> layers;

  static Mlp create(ParamStore<T>& store, const std::string& name, const std::vector<int>& dims, Rng& rng) {
    if (dims.size() < 2) throw Error("mlp " + name + " needs at least input and output widths");
    Mlp m;
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      m.layers.push_back(Dense<T>::create(store, name + "." + std::to_string(i), dims[i], dims[i + 1], rng));
    return m;
  }

  int in() const { return layers.front().in(); }
  int out() const { return layers.back().out(); }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](tape, x);
      if (i + 1 < layers.size()) x = gelu(x);
    }
    return x;
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* offset = nullptr;

  static LayerNorm create(ParamStore<T>& store, const std::string& name, int width, Rng& rng) {
    return {&store.add(name + ".gain", 1, width, Init::Ones, rng), &store.add(name + ".offset", 1, width, Init::Zeros, rng)};
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return add_row(mul_row(layer_norm(x), tape.param(*gain)), tape.param(*offset));
  }
};

/// Adaptive layer norm: LN(x) * (1 + scale) + shift, with (shift, scale) a
/// zero-initialized dense map of the (already activated) condition. Extra
/// outputs beyond shift/scale (e.g. a residual gate) are returned separately.
template <typename T>
struct AdaLN {
  Dense<T> modulation;  // cond -> chunks * width
  int width = 0;
  int chunks = 2;

  static AdaLN create(ParamStore<T>& store, const std::string& name, int cond_width, int width, int chunks, Rng& rng) {
    return {Dense<T>::create(store, name + ".mod", cond_width, chunks * width, rng, Init::Zeros), width, chunks};
  }

  struct Output {
    Var<T> y;
    std::vector<Var<T>> extra;  // chunks beyond shift and scale
  };

  Output operator()(Tape<T>& tape, Var<T> x, Var<T> cond) const {
    if (x.cols() != width) throw ShapeError("ada_ln: feature width mismatch");
    if (x.rows() != cond.rows()) throw ShapeError("ada_ln: condition rows do not match input rows");
    Var<T> mod = modulation(tape, cond);
    Var<T> shift = slice_cols(mod, 0, width);
    Var<T> scl = slice_cols(mod, width, width);
    Output out{add(mul(layer_norm(x), add_scalar(scl, T(1))), shift), {}};
    for (int c = 2; c < chunks; ++c) out.extra.push_back(slice_cols(mod, c * width, width));
    return out;
  }
};

/// Keys and values of every processed position, for one attention layer.
template <typename T>
struct LayerCache {
  Matrix<T> keys;
  Matrix<T> values;
  Eigen::Index length() const { return keys.rows(); }

  void append(const Matrix<T>& k, const Matrix<T>& v) {
    const Eigen::Index n = keys.rows();
    if (n == 0) {
      keys = k;
      values = v;
      return;
    }
    keys.conservativeResize(n + k.rows(), Eigen::NoChange);
    values.conservativeResize(n + v.rows(), Eigen::NoChange);
    keys.bottomRows(k.rows()) = k;
    values.bottomRows(v.rows()) = v;
  }
};

template <typename T>
struct MultiHeadAttention {
  Dense<T> q, k, v, o;
  int heads = 1;

  static MultiHeadAttention create(ParamStore<T>& store, const std::string& name, int width, int heads, Rng& rng) {
    if (heads <= 0 || width % heads != 0) throw Error("attention width must be divisible by heads");
    return {Dense<T>::create(store, name + ".q", width, width, rng), Dense<T>::create(store, name + ".k", width, width, rng),
            Dense<T>::create(store, name + ".v", width, width, rng), Dense<T>::create(store, name + ".o", width, width, rng),
            heads};
  }

  /// Self-attention of `x` over itself; mask is rows(x) x rows(x).
  Var<T> operator()(Tape<T>& tape, Var<T> x, const AttentionMask& mask) const {
    return o(tape, masked_attention(q(tape, x), k(tape, x), v(tape, x), mask, heads));
  }

  /// Attention of new rows over cached rows plus themselves; appends their keys/values.
  /// mask is rows(x) x (cache length + rows(x)).
  Var<T> operator()(Tape<T>& tape, Var<T> x, const AttentionMask& mask, LayerCache<T>& cache) const {
    Var<T> kn = k(tape, x);
    Var<T> vn = v(tape, x);
    Var<T> keys = kn, values = vn;
    if (cache.length() > 0) {
      keys = concat_rows<T>({tape.constant_ref(cache.keys), kn});
      values = concat_rows<T>({tape.constant_ref(cache.values), vn});
    }
    Var<T> out = o(tape, masked_attention(q(tape, x), keys, values, mask, heads));
    cache.append(kn.value(), vn.value());
    return out;
  }
};

/// Pre-LN block: x + MHA(LN(x)), then x + MLP(LN(x)).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;

  static TransformerBlock create(ParamStore<T>& store, const std::string& name, int width, int heads, int hidden,
                                 Rng& rng) {
    return {LayerNorm<T>::create(store, name + ".ln1", width, rng), LayerNorm<T>::create(store, name + ".ln2", width, rng),
            MultiHeadAttention<T>::create(store, name + ".attn", width, heads, rng),
            Mlp<T>::create(store, name + ".mlp", {width, hidden, width}, rng)};
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, const AttentionMask& mask) const {
    x = add(x, attn(tape, ln1(tape, x), mask));
    return add(x, mlp(tape, ln2(tape, x)));
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, const AttentionMask& mask, LayerCache<T>& cache) const {
    x = add(x, attn(tape, ln1(tape, x), mask, cache));
    return add(x, mlp(tape, ln2(tape, x)));
  }
};

/// 128-style sinusoidal features of integer timesteps: [cos(m f_i), sin(m f_i)].
template <typename T>
Matrix<T> sinusoidal_embedding(const std::vector<int>& steps, int dim, double max_period = 10000.0) {
  if (dim % 2 != 0) throw Error("sinusoidal embedding width must be even");
  const int half = dim / 2;
  Matrix<T> out(static_cast<Eigen::Index>(steps.size()), dim);
  for (size_t r = 0; r < steps.size(); ++r)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(max_period) * i / half);
      const double a = steps[r] * freq;
      out(static_cast<Eigen::Index>(r), i) = static_cast<T>(std::cos(a));
      out(static_cast<Eigen::Index>(r), half + i) = static_cast<T>(std::sin(a));
    }
  return out;
}

}  // namespace autorig::nn
