#pragma once

// Diffusion head for continuous joint positions: cosine noise schedule,
// forward noising, an AdaLN-conditioned denoising MLP, the noise-prediction
// loss and the ancestral reverse sampler on a respaced schedule.

#include "autorig/nn/layers.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace autorig {

/// Training schedule over steps m = 1..M. Vectors are indexed by m; entry 0
/// holds alpha_bar = 1 (no noise) and alpha = beta = 0 placeholders.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> alpha_bar;
  std::vector<double> alpha;
  std::vector<double> beta;

  /// Improved-DDPM cosine schedule: alpha_bar(m) = f(m)/f(0),
  /// f(m) = cos^2(((m/M + s)/(1 + s)) * pi/2), with per-step betas clipped at 0.999.
  static NoiseSchedule cosine(int M = 1000, double s = 0.008) {
    if (M < 1) throw Error("noise schedule needs at least one step");
    auto f = [&](double m) {
      const double c = std::cos(((m / M + s) / (1.0 + s)) * M_PI / 2.0);
      return c * c;
    };
    NoiseSchedule out;
    out.steps = M;
    out.alpha_bar.assign(M + 1, 1.0);
    out.alpha.assign(M + 1, 0.0);
    out.beta.assign(M + 1, 0.0);
    const double f0 = f(0.0);
    for (int m = 1; m <= M; ++m) {
      const double beta = std::min(1.0 - (f(m) / f0) / (f(m - 1) / f0), 0.999);
      out.beta[m] = beta;
      out.alpha[m] = 1.0 - beta;
      out.alpha_bar[m] = out.alpha_bar[m - 1] * out.alpha[m];
    }
    return out;
  }
};

/// Sampling subsequence of a training schedule. Index i = 1..S runs over the
/// selected training steps in increasing order (timesteps[i]); entry 0 is the
/// clean endpoint. Betas are recomputed so cumulative products match the
/// selected alpha_bar values.
struct RespacedSchedule {
  std::vector<int> timesteps;
  std::vector<double> alpha_bar, alpha, beta, sigma;

  int steps() const { return static_cast<int>(timesteps.size()) - 1; }
};

/// Uniform stride over 1..M that always contains step M.
inline RespacedSchedule respace(const NoiseSchedule& sched, int steps) {
  const int M = sched.steps;
  if (steps < 1) throw Error("need at least one sampling step");
  if (steps > M) throw Error("sampling steps (" + std::to_string(steps) + ") exceed training steps (" + std::to_string(M) + ")");
  RespacedSchedule r;
  r.timesteps.push_back(0);
  if (steps == 1) {
    r.timesteps.push_back(M);
  } else {
    const double stride = static_cast<double>(M - 1) / (steps - 1);
    for (int i = 0; i < steps; ++i) r.timesteps.push_back(1 + static_cast<int>(std::lround(i * stride)));
  }
  const int S = steps;
  r.alpha_bar.assign(S + 1, 1.0);
  r.alpha.assign(S + 1, 0.0);
  r.beta.assign(S + 1, 0.0);
  r.sigma.assign(S + 1, 0.0);
  for (int i = 1; i <= S; ++i) {
    r.alpha_bar[i] = sched.alpha_bar[r.timesteps[i]];
    r.beta[i] = 1.0 - r.alpha_bar[i] / r.alpha_bar[i - 1];
    r.alpha[i] = 1.0 - r.beta[i];
    // lower-bound posterior variance
    r.sigma[i] = std::sqrt(r.beta[i] * (1.0 - r.alpha_bar[i - 1]) / (1.0 - r.alpha_bar[i]));
  }
  return r;
}

/// j^m = sqrt(alpha_bar_m) j0 + sqrt(1 - alpha_bar_m) eps.
inline Vec3 forward_noise(const NoiseSchedule& sched, const Vec3& j0, int m, const Vec3& eps) {
  if (m < 1 || m > sched.steps) throw Error("diffusion step " + std::to_string(m) + " outside 1.." + std::to_string(sched.steps));
  return std::sqrt(sched.alpha_bar[m]) * j0 + std::sqrt(1.0 - sched.alpha_bar[m]) * eps;
}

/// Per-row timesteps and standard-normal noise for a batch of diffusion targets.
struct NoiseDraws {
  std::vector<int> steps;
  MatrixXd eps;  // n x 3

  static NoiseDraws sample(int n, int M, Rng& rng) {
    NoiseDraws d;
    d.steps.resize(n);
    d.eps.resize(n, 3);
    std::uniform_int_distribution<int> step(1, M);
    for (int i = 0; i < n; ++i) {
      d.steps[i] = step(rng);
      for (int c = 0; c < 3; ++c) d.eps(i, c) = standard_normal(rng);
    }
    return d;
  }
};

struct DenoiserConfig {
  int width = 1024;
  int depth = 3;
  int time_dim = 128;
  int cond_dim = 1024;
};

/// Noise predictor eps_theta(j^m | m, z): input projection of the noisy joint,
/// then `depth` residual blocks whose LayerNorms are modulated (AdaLN) by the
/// sum of a time-embedding projection and a condition projection; the
/// residual branch is gated. Modulations start at zero.
template <typename T>
class Denoiser {
 public:
  struct Block {
    nn::AdaLN<T> norm;  // shift, scale, gate
    nn::Mlp<T> mlp;
  };

  Denoiser() = default;

  Denoiser(nn::ParamStore<T>& store, const std::string& name, const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    in_proj_ = nn::Dense<T>::create(store, name + ".in", 3, cfg.width, rng);
    time_proj_ = nn::Dense<T>::create(store, name + ".time", cfg.time_dim, cfg.width, rng);
    cond_proj_ = nn::Dense<T>::create(store, name + ".cond", cfg.cond_dim, cfg.width, rng);
    for (int b = 0; b < cfg.depth; ++b) {
      const std::string bn = name + ".block" + std::to_string(b);
      blocks_.push_back({nn::AdaLN<T>::create(store, bn + ".adaln", cfg.width, cfg.width, 3, rng),
                         nn::Mlp<T>::create(store, bn + ".mlp", {cfg.width, cfg.width, cfg.width}, rng)});
    }
    final_norm_ = nn::AdaLN<T>::create(store, name + ".final.adaln", cfg.width, cfg.width, 2, rng);
    out_proj_ = nn::Dense<T>::create(store, name + ".out", cfg.width, 3, rng, nn::Init::Zeros);
  }

  const DenoiserConfig& config() const { return cfg_; }

  /// x: n x 3 noisy joints, steps: n timesteps, cond: n x cond_dim.
  nn::Var<T> operator()(nn::Tape<T>& tape, nn::Var<T> x, const std::vector<int>& steps, nn::Var<T> cond) const {
    if (x.cols() != 3) throw ShapeError("denoiser input must be n x 3");
    if (cond.cols() != cfg_.cond_dim) throw ShapeError("denoiser condition width mismatch");
    if (x.rows() != cond.rows() || static_cast<Eigen::Index>(steps.size()) != x.rows())
      throw ShapeError("denoiser batch sizes differ");
    nn::Var<T> temb = tape.constant(nn::sinusoidal_embedding<T>(steps, cfg_.time_dim));
    nn::Var<T> c = nn::gelu(nn::add(time_proj_(tape, temb), cond_proj_(tape, cond)));
    nn::Var<T> h = in_proj_(tape, x);
    for (const Block& b : blocks_) {
      auto mod = b.norm(tape, h, c);
      h = nn::add(h, nn::mul(mod.extra[0], b.mlp(tape, mod.y)));
    }
    return out_proj_(tape, final_norm_(tape, h, c).y);
  }

 private:
  DenoiserConfig cfg_;
  nn::Dense<T> in_proj_, time_proj_, cond_proj_, out_proj_;
  std::vector<Block> blocks_;
  nn::AdaLN<T> final_norm_;
};

/// Mean over rows of ||eps - eps_theta(j^m | m, z)||^2 for given draws.
/// cond: n x cond_dim, targets: n x 3 clean joints. The raw noise prediction
/// is copied to `prediction` when given.
template <typename T>
nn::Var<T> joint_loss(nn::Tape<T>& tape, const Denoiser<T>& denoiser, const NoiseSchedule& sched, nn::Var<T> cond,
                      const MatrixXd& targets, const NoiseDraws& draws, Matrix<T>* prediction = nullptr) {
  const Eigen::Index n = targets.rows();
  if (draws.eps.rows() != n || cond.rows() != n) throw ShapeError("joint_loss: batch sizes differ");
  Matrix<T> noisy(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int m = draws.steps[i];
    if (m < 1 || m > sched.steps) throw Error("diffusion step out of range");
    const double a = std::sqrt(sched.alpha_bar[m]);
    const double b = std::sqrt(1.0 - sched.alpha_bar[m]);
    for (int c = 0; c < 3; ++c) noisy(i, c) = static_cast<T>(a * targets(i, c) + b * draws.eps(i, c));
  }
  nn::Var<T> pred = denoiser(tape, tape.constant(std::move(noisy)), draws.steps, cond);
  if (prediction) *prediction = pred.value();
  return nn::mean_squared_rows(pred, Matrix<T>(draws.eps.template cast<T>()));
}

/// Default clamp of the implied clean joint while sampling. Normalized shapes
/// fit in [-0.5, 0.5]^3. Without it, the last training step (alpha_bar_M
/// about 2e-9) multiplies noise-prediction error by 1/sqrt(alpha) in the
/// hundreds on the first reverse update.
inline constexpr double kDefaultSampleClip = 1.0;

/// Noise prediction as a plain function of (noisy joint, training timestep).
using EpsPredictor = std::function<Vec3(const Vec3&, int)>;

/// Ancestral sampling on a respaced schedule, starting from j ~ N(0, I):
/// j <- (j - (1 - alpha_i)/sqrt(1 - alpha_bar_i) * eps_hat) / sqrt(alpha_i) + sigma_i * delta.
/// The final update adds no noise (sigma_1 = 0); `zero_noise` suppresses all noise.
/// With `clip` > 0 the implied clean joint is clamped to [-clip, clip] per
/// coordinate and the mean is taken as the posterior mean given that joint
/// (identical to the update above when nothing is clamped).
inline Vec3 reverse_sample(const EpsPredictor& eps_hat, const RespacedSchedule& sched, Rng& rng, bool zero_noise = false,
                           const Vec3* start = nullptr, double clip = 0.0) {
  Vec3 j = start ? *start : Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
  for (int i = sched.steps(); i >= 1; --i) {
    const Vec3 e = eps_hat(j, sched.timesteps[i]);
    if (clip > 0) {
      const double ab = sched.alpha_bar[i], ab_prev = sched.alpha_bar[i - 1];
      const Vec3 j0 = ((j - std::sqrt(1.0 - ab) * e) / std::sqrt(ab)).cwiseMax(-clip).cwiseMin(clip);
      j = (std::sqrt(ab_prev) * sched.beta[i] / (1.0 - ab)) * j0 +
          (std::sqrt(sched.alpha[i]) * (1.0 - ab_prev) / (1.0 - ab)) * j;
    } else {
      j = (j - ((1.0 - sched.alpha[i]) / std::sqrt(1.0 - sched.alpha_bar[i])) * e) / std::sqrt(sched.alpha[i]);
    }
    if (i > 1 && !zero_noise) j += sched.sigma[i] * Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
  }
  return j;
}

/// Draws one joint position conditioned on a 1 x cond_dim context row.
template <typename T>
Vec3 sample_joint(const Denoiser<T>& denoiser, const RespacedSchedule& sched, const Matrix<T>& cond, Rng& rng,
                  double clip = kDefaultSampleClip) {
  if (cond.rows() != 1) throw ShapeError("sample_joint expects a single condition row");
  auto eps = [&](const Vec3& x, int m) {
    nn::Tape<T> tape(false);
    Matrix<T> xin(1, 3);
    xin.row(0) = x.transpose().cast<T>();
    nn::Var<T> out = denoiser(tape, tape.constant(std::move(xin)), {m}, tape.constant_ref(cond));
    return Vec3(out.value().row(0).transpose().template cast<double>());
  };
  return reverse_sample(eps, sched, rng, false, nullptr, clip);
}

}  // namespace autorig
