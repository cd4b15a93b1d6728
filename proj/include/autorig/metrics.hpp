#pragma once

// Skeleton and skinning evaluation: Chamfer distances between joints and
// sampled bones, Hungarian joint matching with IoU/precision/recall, bone edit
// distance, teacher-forced connectivity accuracy, and skinning metrics.
//
// Bone matching and edit distance follow self-consistent definitions
// (Hungarian matching, distance threshold tau); absolute numbers are only
// comparable with other protocols that use the same definitions.

#include "autorig/skeleton.hpp"

#include <json.hpp>

#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>

namespace autorig {

struct MetricConfig {
  double match_threshold = 0.1;  // normalized units
  int bone_samples = 64;         // points per bone, endpoints included
  double influence_threshold = 0.05;

  void validate() const {
    if (!(match_threshold > 0)) throw Error("metric config: match threshold must be positive");
    if (bone_samples < 2) throw Error("metric config: bone sampling density must be at least 2");
    if (!(influence_threshold > 0 && influence_threshold < 1)) throw Error("metric config: influence threshold must lie in (0, 1)");
  }
};

inline constexpr const char* kMetricsProtocolNote =
    "bone matching and edit distance use self-consistent definitions (Hungarian matching, distance threshold tau); "
    "not guaranteed to match other evaluation code";

/// Mean over `a` of the distance to the nearest point of `b`.
inline double one_sided_chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) throw Error("chamfer distance of an empty set");
  double sum = 0;
  for (const Vec3& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& q : b) best = std::min(best, (p - q).norm());
    sum += best;
  }
  return sum / static_cast<double>(a.size());
}

inline double chamfer_j2j(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
  return 0.5 * one_sided_chamfer(pred, gt) + 0.5 * one_sided_chamfer(gt, pred);
}

/// Evenly spaced points along every bone (endpoints included). A skeleton
/// without bones yields its joints.
inline std::vector<Vec3> sample_bones(const Skeleton& sk, int per_bone = 64) {
  if (sk.size() == 0) throw Error("empty skeleton");
  std::vector<Vec3> out;
  for (auto [child, parent] : sk.bones()) {
    const Vec3& a = sk.joints[parent];
    const Vec3& b = sk.joints[child];
    for (int i = 0; i < per_bone; ++i) {
      const double t = static_cast<double>(i) / (per_bone - 1);
      out.push_back((1 - t) * a + t * b);
    }
  }
  if (out.empty()) out = sk.joints;
  return out;
}

inline double chamfer_j2b(const Skeleton& pred, const Skeleton& gt, const MetricConfig& cfg = {}) {
  return 0.5 * one_sided_chamfer(pred.joints, sample_bones(gt, cfg.bone_samples)) +
         0.5 * one_sided_chamfer(gt.joints, sample_bones(pred, cfg.bone_samples));
}

inline double chamfer_b2b(const Skeleton& pred, const Skeleton& gt, const MetricConfig& cfg = {}) {
  const auto a = sample_bones(pred, cfg.bone_samples);
  const auto b = sample_bones(gt, cfg.bone_samples);
  return 0.5 * one_sided_chamfer(a, b) + 0.5 * one_sided_chamfer(b, a);
}

/// Minimum-cost assignment on a rectangular cost matrix (rows x cols).
/// Returns, for each row, the assigned column or -1 (when rows > cols).
inline std::vector<int> hungarian(const MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (n == 0 || m == 0) return std::vector<int>(n, -1);
  if (n > m) {
    std::vector<int> col_to_row = hungarian(cost.transpose());
    std::vector<int> out(n, -1);
    for (int c = 0; c < m; ++c)
      if (col_to_row[c] >= 0) out[col_to_row[c]] = c;
    return out;
  }
  // potentials method, 1-based with a virtual column 0
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j)
        if (!used[j]) {
          const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (int j = 0; j <= m; ++j)
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> out(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] > 0) out[p[j] - 1] = j - 1;
  return out;
}

struct JointMatching {
  std::vector<int> pred_to_gt;  // matched GT index or -1, before thresholding
  std::vector<int> true_pred;   // pred index -> GT index for pairs within tau, else -1
  double cost = 0;              // sum of matched distances, in pred order
  int true_positives = 0;
  double iou = 0, precision = 0, recall = 0;
};

inline MatrixXd distance_matrix(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  MatrixXd d(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) d(i, j) = (a[i] - b[j]).norm();
  return d;
}

inline JointMatching match_joints(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau = 0.1) {
  if (pred.empty() || gt.empty()) throw Error("joint matching of an empty set");
  const MatrixXd d = distance_matrix(pred, gt);
  JointMatching m;
  m.pred_to_gt = hungarian(d);
  m.true_pred.assign(pred.size(), -1);
  for (size_t i = 0; i < pred.size(); ++i) {
    const int j = m.pred_to_gt[i];
    if (j < 0) continue;
    m.cost += d(i, j);
    if (d(i, j) <= tau) {
      m.true_pred[i] = j;
      ++m.true_positives;
    }
  }
  const double tp = m.true_positives;
  m.precision = tp / pred.size();
  m.recall = tp / gt.size();
  m.iou = tp / (pred.size() + gt.size() - tp);
  return m;
}

/// Bones whose endpoints are both matched are compared as unordered GT label
/// pairs; every other bone counts as an edit.
inline int edit_distance(const Skeleton& pred, const Skeleton& gt, const JointMatching& matching) {
  if (matching.true_pred.size() != static_cast<size_t>(pred.size())) throw Error("matching does not belong to this skeleton");
  auto key = [](int a, int b) { return std::make_pair(std::min(a, b), std::max(a, b)); };
  std::vector<int> gt_matched(gt.size(), 0);
  for (int j : matching.true_pred)
    if (j >= 0) gt_matched[j] = 1;
  std::set<std::pair<int, int>> pred_edges, gt_edges;
  int edits = 0;
  for (auto [c, p] : pred.bones()) {
    const int a = matching.true_pred[c], b = matching.true_pred[p];
    if (a < 0 || b < 0)
      ++edits;
    else
      pred_edges.insert(key(a, b));
  }
  for (auto [c, p] : gt.bones()) {
    if (!gt_matched[c] || !gt_matched[p])
      ++edits;
    else
      gt_edges.insert(key(c, p));
  }
  for (const auto& e : pred_edges) edits += gt_edges.count(e) ? 0 : 1;
  for (const auto& e : gt_edges) edits += pred_edges.count(e) ? 0 : 1;
  return edits;
}

/// Fraction of non-root joints whose predicted parent is the GT parent.
inline double connectivity_accuracy(const std::vector<int>& pred_parents, const std::vector<int>& gt_parents) {
  if (pred_parents.size() != gt_parents.size()) throw Error("parent lists differ in size");
  int total = 0, correct = 0;
  for (size_t k = 0; k < gt_parents.size(); ++k) {
    if (gt_parents[k] == static_cast<int>(k)) continue;
    ++total;
    correct += pred_parents[k] == gt_parents[k];
  }
  return total == 0 ? 1.0 : static_cast<double>(correct) / total;
}

struct SkinningReport {
  double precision = 0, recall = 0, avg_l1 = 0;
};

inline SkinningReport skinning_metrics(const MatrixXd& pred, const MatrixXd& gt, double tau_w = 0.05) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw ShapeError("skinning matrices differ in shape");
  if (pred.rows() == 0) throw Error("empty skinning matrices");
  SkinningReport r;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    int np = 0, ng = 0, both = 0;
    for (Eigen::Index k = 0; k < pred.cols(); ++k) {
      const bool a = pred(i, k) >= tau_w, b = gt(i, k) >= tau_w;
      np += a;
      ng += b;
      both += a && b;
    }
    r.precision += np > 0 ? static_cast<double>(both) / np : (ng == 0 ? 1.0 : 0.0);
    r.recall += ng > 0 ? static_cast<double>(both) / ng : (np == 0 ? 1.0 : 0.0);
    r.avg_l1 += (pred.row(i) - gt.row(i)).cwiseAbs().sum();
  }
  const double n = static_cast<double>(pred.rows());
  r.precision /= n;
  r.recall /= n;
  r.avg_l1 /= n;
  return r;
}

struct SkeletonReport {
  double iou = 0, precision = 0, recall = 0;
  double cd_j2j = 0, cd_j2b = 0, cd_b2b = 0;
  int edit_distance = 0;
};

inline SkeletonReport evaluate_skeleton(const Skeleton& pred, const Skeleton& gt, const MetricConfig& cfg = {}) {
  cfg.validate();
  SkeletonReport r;
  const JointMatching m = match_joints(pred.joints, gt.joints, cfg.match_threshold);
  r.iou = m.iou;
  r.precision = m.precision;
  r.recall = m.recall;
  r.cd_j2j = chamfer_j2j(pred.joints, gt.joints);
  r.cd_j2b = chamfer_j2b(pred, gt, cfg);
  r.cd_b2b = chamfer_b2b(pred, gt, cfg);
  r.edit_distance = edit_distance(pred, gt, m);
  return r;
}

inline void write_report_csv(std::ostream& out, const std::vector<std::pair<std::string, SkeletonReport>>& rows,
                             const MetricConfig& cfg = {}) {
  out << "# " << kMetricsProtocolNote << "; tau=" << cfg.match_threshold << "\n";
  out << "shape,iou,precision,recall,cd_j2j,cd_j2b,cd_b2b,edit_distance\n";
  out << std::setprecision(9);
  for (const auto& [name, r] : rows)
    out << name << ',' << r.iou << ',' << r.precision << ',' << r.recall << ',' << r.cd_j2j << ',' << r.cd_j2b << ','
        << r.cd_b2b << ',' << r.edit_distance << "\n";
}

inline nlohmann::json aggregate_report(const std::vector<std::pair<std::string, SkeletonReport>>& rows,
                                       const MetricConfig& cfg = {}) {
  nlohmann::json j;
  j["note"] = kMetricsProtocolNote;
  j["config"] = {{"match_threshold", cfg.match_threshold},
                 {"bone_samples", cfg.bone_samples},
                 {"influence_threshold", cfg.influence_threshold}};
  j["shapes"] = rows.size();
  SkeletonReport mean;
  double ed = 0;
  for (const auto& [name, r] : rows) {
    mean.iou += r.iou;
    mean.precision += r.precision;
    mean.recall += r.recall;
    mean.cd_j2j += r.cd_j2j;
    mean.cd_j2b += r.cd_j2b;
    mean.cd_b2b += r.cd_b2b;
    ed += r.edit_distance;
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  j["mean"] = {{"iou", mean.iou / n},       {"precision", mean.precision / n}, {"recall", mean.recall / n},
               {"cd_j2j", mean.cd_j2j / n}, {"cd_j2b", mean.cd_j2b / n},       {"cd_b2b", mean.cd_b2b / n},
               {"edit_distance", ed / n}};
  return j;
}

}  // namespace autorig
