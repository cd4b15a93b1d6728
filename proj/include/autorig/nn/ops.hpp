#pragma once

// Differentiable operations on Tape variables.

#include "autorig/nn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace autorig::nn {

/// Boolean attention pattern: rows are queries, columns keys, true = attend.
using AttentionMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

template <typename T>
inline T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
  return cdf + x * pdf;
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix<T> C(A.rows(), B.cols());
  C.noalias() = A * B;
  return a.tape->record(std::move(C), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id).noalias() += G * t.value(b.id).transpose();
    if (t.requires_grad(b.id)) t.grad(b.id).noalias() += t.value(a.id).transpose() * G;
  });
}

/// x W + b, with b a 1 x out row broadcast over rows.
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  const auto& X = x.value();
  const auto& W = w.value();
  const auto& B = b.value();
  if (X.cols() != W.rows()) throw ShapeError("affine: input width " + std::to_string(X.cols()) + " vs weight rows " + std::to_string(W.rows()));
  if (B.rows() != 1 || B.cols() != W.cols()) throw ShapeError("affine: bias shape");
  Matrix<T> Y(X.rows(), W.cols());
  Y.noalias() = X * W;
  Y.rowwise() += B.row(0);
  return x.tape->record(std::move(Y), {x, w, b}, [x, w, b](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(x.id)) t.grad(x.id).noalias() += G * t.value(w.id).transpose();
    if (t.requires_grad(w.id)) t.grad(w.id).noalias() += t.value(x.id).transpose() * G;
    if (t.requires_grad(b.id)) t.grad(b.id) += G.colwise().sum();
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id) += G;
    if (t.requires_grad(b.id)) t.grad(b.id) += G;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id) += G;
    if (t.requires_grad(b.id)) t.grad(b.id) -= G;
  });
}

/// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  return a.tape->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id) += G.cwiseProduct(t.value(b.id));
    if (t.requires_grad(b.id)) t.grad(b.id) += G.cwiseProduct(t.value(a.id));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return a.tape->record(a.value() * s, {a}, [a, s](Tape<T>& t, int self) {
    if (t.requires_grad(a.id)) t.grad(a.id) += t.grad(self) * s;
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  Matrix<T> v = a.value().array() + s;
  return a.tape->record(std::move(v), {a}, [a](Tape<T>& t, int self) {
    if (t.requires_grad(a.id)) t.grad(a.id) += t.grad(self);
  });
}

/// a + row, row broadcast over all rows of a.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  const auto& R = row.value();
  if (R.rows() != 1 || R.cols() != a.cols()) throw ShapeError("add_row: row shape");
  Matrix<T> v = a.value();
  v.rowwise() += R.row(0);
  return a.tape->record(std::move(v), {a, row}, [a, row](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id) += G;
    if (t.requires_grad(row.id)) t.grad(row.id) += G.colwise().sum();
  });
}

/// a * row elementwise, row broadcast over all rows of a.
template <typename T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  const auto& R = row.value();
  if (R.rows() != 1 || R.cols() != a.cols()) throw ShapeError("mul_row: row shape");
  Matrix<T> v = a.value().array().rowwise() * R.row(0).array();
  return a.tape->record(std::move(v), {a, row}, [a, row](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(a.id)) t.grad(a.id).array() += G.array().rowwise() * t.value(row.id).row(0).array();
    if (t.requires_grad(row.id)) t.grad(row.id) += G.cwiseProduct(t.value(a.id)).colwise().sum();
  });
}

/// Exact GeLU: x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> a) {
  Matrix<T> v = a.value().unaryExpr([](T x) { return detail::gelu(x); });
  return a.tape->record(std::move(v), {a}, [a](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    t.grad(a.id) += t.grad(self).cwiseProduct(t.value(a.id).unaryExpr([](T x) { return detail::gelu_grad(x); }));
  });
}

/// Per-row normalization to zero mean and unit variance (biased), no affine.
template <typename T>
Var<T> layer_norm(Var<T> a, T eps = T(1e-5)) {
  const auto& X = a.value();
  Matrix<T> Y(X.rows(), X.cols());
  Matrix<T> inv_std(X.rows(), 1);
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const T mean = X.row(r).mean();
    const T var = (X.row(r).array() - mean).square().mean();
    inv_std(r, 0) = T(1) / std::sqrt(var + eps);
    Y.row(r) = (X.row(r).array() - mean) * inv_std(r, 0);
  }
  return a.tape->record(std::move(Y), {a}, [a, inv_std = std::move(inv_std)](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const auto& G = t.grad(self);
    const auto& Y = t.value(self);
    auto& dX = t.grad(a.id);
    for (Eigen::Index r = 0; r < G.rows(); ++r) {
      const T g_mean = G.row(r).mean();
      const T gy_mean = G.row(r).cwiseProduct(Y.row(r)).mean();
      dX.row(r).array() += inv_std(r, 0) * (G.row(r).array() - g_mean - Y.row(r).array() * gy_mean);
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix<T> v(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts[0].tape->record(std::move(v), parts, [parts](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      const Eigen::Index c = t.value(p.id).cols();
      if (t.requires_grad(p.id)) t.grad(p.id) += G.middleCols(off, c);
      off += c;
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix<T> v(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts[0].tape->record(std::move(v), parts, [parts](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      const Eigen::Index r = t.value(p.id).rows();
      if (t.requires_grad(p.id)) t.grad(p.id) += G.middleRows(off, r);
      off += r;
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Matrix<T> v = a.value().middleRows(start, count);
  return a.tape->record(std::move(v), {a}, [a, start, count](Tape<T>& t, int self) {
    if (t.requires_grad(a.id)) t.grad(a.id).middleRows(start, count) += t.grad(self);
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix<T> v = a.value().middleCols(start, count);
  return a.tape->record(std::move(v), {a}, [a, start, count](Tape<T>& t, int self) {
    if (t.requires_grad(a.id)) t.grad(a.id).middleCols(start, count) += t.grad(self);
  });
}

/// Rows of `a` selected by index (repeats allowed); gradients scatter-add.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int> index) {
  const auto& A = a.value();
  Matrix<T> v(static_cast<Eigen::Index>(index.size()), A.cols());
  for (size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= A.rows())
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range");
    v.row(static_cast<Eigen::Index>(i)) = A.row(index[i]);
  }
  return a.tape->record(std::move(v), {a}, [a, index = std::move(index)](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const auto& G = t.grad(self);
    auto& dA = t.grad(a.id);
    for (size_t i = 0; i < index.size(); ++i) dA.row(index[i]) += G.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Matrix<T> v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape->record(std::move(v), {a}, [a](Tape<T>& t, int self) {
    if (t.requires_grad(a.id)) t.grad(a.id).array() += t.grad(self)(0, 0);
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

/// Row-wise softmax.
template <typename T>
Var<T> softmax_rows(Var<T> a) {
  const auto& X = a.value();
  Matrix<T> P(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const T mx = X.row(r).maxCoeff();
    P.row(r) = (X.row(r).array() - mx).exp();
    P.row(r) /= P.row(r).sum();
  }
  return a.tape->record(std::move(P), {a}, [a](Tape<T>& t, int self) {
    if (!t.requires_grad(a.id)) return;
    const auto& G = t.grad(self);
    const auto& P = t.value(self);
    auto& dX = t.grad(a.id);
    for (Eigen::Index r = 0; r < G.rows(); ++r) {
      const T dot = G.row(r).dot(P.row(r));
      dX.row(r).array() += P.row(r).array() * (G.row(r).array() - dot);
    }
  });
}

/// Multi-head scaled dot-product attention with a boolean mask.
/// q: n x d queries, k and v: N x d keys/values, mask: n x N.
/// Disallowed keys receive exactly zero weight.
template <typename T>
Var<T> masked_attention(Var<T> q, Var<T> k, Var<T> v, const AttentionMask& mask, int heads) {
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  const Eigen::Index n = Q.rows(), N = K.rows(), d = Q.cols();
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (K.cols() != d || V.cols() != d || V.rows() != N) throw ShapeError("attention: q/k/v shapes");
  if (mask.rows() != n || mask.cols() != N) throw ShapeError("attention: mask shape");
  for (Eigen::Index r = 0; r < n; ++r)
    if (!mask.row(r).any()) throw Error("attention: query " + std::to_string(r) + " has no allowed key");

  const Eigen::Index dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Matrix<T>> probs(heads);
  Matrix<T> O(n, d);
  for (int h = 0; h < heads; ++h) {
    Matrix<T> S(n, N);
    S.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
    Matrix<T>& P = probs[h];
    P.setZero(n, N);
    for (Eigen::Index r = 0; r < n; ++r) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index c = 0; c < N; ++c)
        if (mask(r, c)) mx = std::max(mx, S(r, c) * sc);
      T total = 0;
      for (Eigen::Index c = 0; c < N; ++c)
        if (mask(r, c)) total += (P(r, c) = std::exp(S(r, c) * sc - mx));
      P.row(r) /= total;
    }
    O.middleCols(h * dh, dh).noalias() = P * V.middleCols(h * dh, dh);
  }
  return q.tape->record(std::move(O), {q, k, v}, [q, k, v, probs = std::move(probs), heads, dh, sc](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    const auto& Q = t.value(q.id);
    const auto& K = t.value(k.id);
    const auto& V = t.value(v.id);
    for (int h = 0; h < heads; ++h) {
      const Matrix<T>& P = probs[h];
      Matrix<T> Gh = G.middleCols(h * dh, dh);
      if (t.requires_grad(v.id)) t.grad(v.id).middleCols(h * dh, dh).noalias() += P.transpose() * Gh;
      if (!t.requires_grad(q.id) && !t.requires_grad(k.id)) continue;
      Matrix<T> dP(P.rows(), P.cols());
      dP.noalias() = Gh * V.middleCols(h * dh, dh).transpose();
      Matrix<T> dS = P.cwiseProduct(dP);
      for (Eigen::Index r = 0; r < dS.rows(); ++r) {
        const T rowdot = dS.row(r).sum();
        dS.row(r) -= P.row(r) * rowdot;
      }
      dS *= sc;
      if (t.requires_grad(q.id)) t.grad(q.id).middleCols(h * dh, dh).noalias() += dS * K.middleCols(h * dh, dh);
      if (t.requires_grad(k.id)) t.grad(k.id).middleCols(h * dh, dh).noalias() += dS.transpose() * Q.middleCols(h * dh, dh);
    }
  });
}

/// Second stage of a two-layer MLP applied to every (row of a, row of b) pair
/// whose first layer decomposes as a_i + b_j (the first-layer bias folded into a):
/// out(i, j) = gelu(a_i + b_j) . w + bias, w: h x 1, bias: 1 x 1.
template <typename T>
Var<T> pairwise_score(Var<T> a, Var<T> b, Var<T> w, Var<T> bias) {
  const auto& A = a.value();
  const auto& B = b.value();
  const auto& W = w.value();
  const Eigen::Index h = A.cols();
  if (B.cols() != h || W.rows() != h || W.cols() != 1) throw ShapeError("pairwise_score: widths");
  if (bias.value().size() != 1) throw ShapeError("pairwise_score: bias must be 1x1");
  const T b0 = bias.value()(0, 0);
  Matrix<T> S(A.rows(), B.rows());
  Eigen::Matrix<T, 1, Eigen::Dynamic> z(h);
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < B.rows(); ++j) {
      z = A.row(i) + B.row(j);
      S(i, j) = z.unaryExpr([](T x) { return detail::gelu(x); }).dot(W.col(0).transpose()) + b0;
    }
  return a.tape->record(std::move(S), {a, b, w, bias}, [a, b, w, bias](Tape<T>& t, int self) {
    const auto& G = t.grad(self);
    const auto& A = t.value(a.id);
    const auto& B = t.value(b.id);
    const auto& W = t.value(w.id);
    const bool ga = t.requires_grad(a.id), gb = t.requires_grad(b.id), gw = t.requires_grad(w.id);
    const Eigen::Index h = A.cols();
    Matrix<T> dA = Matrix<T>::Zero(A.rows(), h);
    Matrix<T> dB = Matrix<T>::Zero(B.rows(), h);
    Eigen::Matrix<T, 1, Eigen::Dynamic> dW = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(h);
    Eigen::Matrix<T, 1, Eigen::Dynamic> z(h), dz(h);
    for (Eigen::Index i = 0; i < A.rows(); ++i)
      for (Eigen::Index j = 0; j < B.rows(); ++j) {
        const T g = G(i, j);
        if (g == T(0)) continue;
        z = A.row(i) + B.row(j);
        if (gw) dW += g * z.unaryExpr([](T x) { return detail::gelu(x); });
        if (ga || gb) {
          dz = g * z.unaryExpr([](T x) { return detail::gelu_grad(x); }).cwiseProduct(W.col(0).transpose());
          dA.row(i) += dz;
          dB.row(j) += dz;
        }
      }
    if (ga) t.grad(a.id) += dA;
    if (gb) t.grad(b.id) += dB;
    if (gw) t.grad(w.id) += dW.transpose();
    if (t.requires_grad(bias.id)) t.grad(bias.id)(0, 0) += G.sum();
  });
}

/// Mean over rows of -sum_j target_ij * log softmax(logits)_ij.
template <typename T>
Var<T> soft_cross_entropy(Var<T> logits, const Matrix<T>& targets) {
  const auto& X = logits.value();
  detail::require_same_shape(X, targets, "soft_cross_entropy");
  const Eigen::Index n = X.rows();
  if (n == 0) throw ShapeError("soft_cross_entropy: no rows");
  Matrix<T> P(X.rows(), X.cols());
  T loss = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mx = X.row(r).maxCoeff();
    const T lse = mx + std::log((X.row(r).array() - mx).exp().sum());
    P.row(r) = (X.row(r).array() - lse).exp();
    loss -= (targets.row(r).array() * (X.row(r).array() - lse)).sum();
  }
  Matrix<T> out(1, 1);
  out(0, 0) = loss / static_cast<T>(n);
  return logits.tape->record(std::move(out), {logits}, [logits, P = std::move(P), targets](Tape<T>& t, int self) {
    if (!t.requires_grad(logits.id)) return;
    const T g = t.grad(self)(0, 0) / static_cast<T>(P.rows());
    auto& dX = t.grad(logits.id);
    for (Eigen::Index r = 0; r < P.rows(); ++r) dX.row(r) += g * (P.row(r) * targets.row(r).sum() - targets.row(r));
  });
}

/// Binary cross-entropy over softmax probabilities q of a 1 x k logit row
/// against the one-hot label `target`:
/// -log q_target - sum_{i != target} log(1 - q_i).
template <typename T>
Var<T> softmax_bce(Var<T> logits, int target) {
  const auto& X = logits.value();
  if (X.rows() != 1) throw ShapeError("softmax_bce: expects a single row");
  const Eigen::Index k = X.cols();
  if (target < 0 || target >= k) throw ShapeError("softmax_bce: target out of range");
  const T mx = X.maxCoeff();
  Eigen::Matrix<T, 1, Eigen::Dynamic> e = (X.row(0).array() - mx).exp();
  const T total = e.sum();
  Eigen::Matrix<T, 1, Eigen::Dynamic> q = e / total;
  Eigen::Matrix<T, 1, Eigen::Dynamic> ratio = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(k);  // q_i / (1 - q_i)
  T loss = -(X(0, target) - mx - std::log(total));
  for (Eigen::Index i = 0; i < k; ++i) {
    if (i == target) continue;
    const T others = total - e[i];  // (1 - q_i) * total
    loss -= std::log(others) - std::log(total);
    ratio[i] = e[i] / others;
  }
  Matrix<T> out(1, 1);
  out(0, 0) = loss;
  return logits.tape->record(std::move(out), {logits}, [logits, q, ratio, target](Tape<T>& t, int self) {
    if (!t.requires_grad(logits.id)) return;
    const T g = t.grad(self)(0, 0);
    Eigen::Matrix<T, 1, Eigen::Dynamic> d = ratio - q * ratio.sum() + q;
    d[target] -= T(1);
    t.grad(logits.id).row(0) += g * d;
  });
}

/// Mean over rows of the squared Euclidean row distance to a constant target.
template <typename T>
Var<T> mean_squared_rows(Var<T> pred, const Matrix<T>& target) {
  detail::require_same_shape(pred.value(), target, "mean_squared_rows");
  const T n = static_cast<T>(pred.rows());
  Matrix<T> diff = pred.value() - target;
  Matrix<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return pred.tape->record(std::move(out), {pred}, [pred, diff = std::move(diff), n](Tape<T>& t, int self) {
    if (t.requires_grad(pred.id)) t.grad(pred.id) += (T(2) * t.grad(self)(0, 0) / n) * diff;
  });
}

}  // namespace autorig::nn
