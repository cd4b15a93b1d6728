#pragma once

// Skeleton tree model and its breadth-first serialization.
//
// All indices are 0-based. In a JointSequence the root is entry 0 and is its
// own parent; every later entry k has parent < k. A terminated sequence ends
// with one extra entry whose parent is itself (the stop marker).

#include "autorig/common.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

namespace autorig {

inline constexpr int kDefaultMaxJoints = 64;

struct Skeleton {
  std::vector<Vec3> joints;
  std::vector<int> parents;
  std::vector<std::string> names;  // empty, or one per joint

  int size() const { return static_cast<int>(joints.size()); }

  /// Index of the first self-parented joint, or -1.
  int root() const {
    for (int k = 0; k < static_cast<int>(parents.size()); ++k)
      if (parents[k] == k) return k;
    return -1;
  }

  /// (child, parent) pairs for every non-root joint.
  std::vector<std::pair<int, int>> bones() const {
    std::vector<std::pair<int, int>> out;
    for (int k = 0; k < size(); ++k)
      if (parents[k] != k) out.emplace_back(k, parents[k]);
    return out;
  }
};

struct Violation {
  std::string rule;  // "empty", "max-joints", "size", "index out of range", "root", "cycle", "non-finite", "names"
  int index = -1;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }

  bool has(std::string_view rule) const {
    return std::any_of(violations.begin(), violations.end(), [&](const Violation& v) { return v.rule == rule; });
  }

  std::string summary() const {
    if (ok()) return "ok";
    std::ostringstream os;
    for (size_t i = 0; i < violations.size(); ++i) os << (i ? "; " : "") << violations[i].message;
    return os.str();
  }
};

class InvalidSkeletonError : public Error {
 public:
  explicit InvalidSkeletonError(ValidationReport report)
      : Error("invalid skeleton: " + report.summary()), report_(std::move(report)) {}
  const ValidationReport& report() const { return report_; }

 private:
  ValidationReport report_;
};

inline ValidationReport validate_skeleton(const Skeleton& sk, int max_joints = kDefaultMaxJoints) {
  ValidationReport rep;
  auto add = [&](std::string rule, int index, std::string msg) {
    rep.violations.push_back({std::move(rule), index, std::move(msg)});
  };
  const int K = sk.size();
  if (K == 0) {
    add("empty", -1, "skeleton has no joints");
    return rep;
  }
  if (K > max_joints)
    add("max-joints", K, "joint count " + std::to_string(K) + " exceeds " + std::to_string(max_joints));
  if (static_cast<int>(sk.parents.size()) != K) {
    add("size", -1, "parents has " + std::to_string(sk.parents.size()) + " entries for " + std::to_string(K) + " joints");
    return rep;
  }
  if (!sk.names.empty() && static_cast<int>(sk.names.size()) != K)
    add("names", -1, "names has " + std::to_string(sk.names.size()) + " entries for " + std::to_string(K) + " joints");
  for (int k = 0; k < K; ++k)
    if (!sk.joints[k].allFinite()) add("non-finite", k, "non-finite position at " + std::to_string(k));

  bool bounds_ok = true;
  for (int k = 0; k < K; ++k) {
    if (sk.parents[k] < 0 || sk.parents[k] >= K) {
      add("index out of range", k, "index out of range at " + std::to_string(k) + " (parent " + std::to_string(sk.parents[k]) + ")");
      bounds_ok = false;
    }
  }
  if (!bounds_ok) return rep;

  std::vector<int> roots;
  for (int k = 0; k < K; ++k)
    if (sk.parents[k] == k) roots.push_back(k);
  if (roots.empty()) add("root", -1, "no self-parented root");
  for (size_t i = 1; i < roots.size(); ++i)
    add("root", roots[i], "extra root at " + std::to_string(roots[i]));

  // 0 = unvisited, 1 = on current walk, 2 = reaches a root
  std::vector<int> state(K, 0);
  for (int start = 0; start < K; ++start) {
    if (state[start] != 0) continue;
    std::vector<int> walk;
    int k = start;
    while (state[k] == 0 && sk.parents[k] != k) {
      state[k] = 1;
      walk.push_back(k);
      k = sk.parents[k];
    }
    if (state[k] == 1) {
      auto it = std::find(walk.begin(), walk.end(), k);
      int lowest = *std::min_element(it, walk.end());
      add("cycle", lowest, "cycle at " + std::to_string(lowest));
    }
    for (int w : walk) state[w] = 2;
    state[k] = 2;
  }
  return rep;
}

struct SequenceEntry {
  Vec3 joint = Vec3::Zero();
  int parent = 0;
};

struct JointSequence {
  std::vector<SequenceEntry> entries;
  bool terminated = false;
  // Original skeleton index of each non-terminal entry.
  std::vector<int> source_index;

  int size() const { return static_cast<int>(entries.size()); }
  /// Number of real joints (the terminal step excluded).
  int joint_count() const { return size() - (terminated ? 1 : 0); }
};

/// Breadth-first serialization. With `sibling_rng`, children of each joint are
/// visited in a uniformly random order; otherwise in canonical order
/// (lexicographic by position, ties by index).
inline JointSequence bfs_serialize(const Skeleton& sk, Rng* sibling_rng = nullptr,
                                   int max_joints = kDefaultMaxJoints) {
  ValidationReport rep = validate_skeleton(sk, max_joints);
  if (!rep.ok()) throw InvalidSkeletonError(std::move(rep));

  const int K = sk.size();
  std::vector<std::vector<int>> children(K);
  for (int k = 0; k < K; ++k)
    if (sk.parents[k] != k) children[sk.parents[k]].push_back(k);
  for (auto& c : children) {
    std::sort(c.begin(), c.end(), [&](int a, int b) {
      const Vec3& pa = sk.joints[a];
      const Vec3& pb = sk.joints[b];
      for (int i = 0; i < 3; ++i)
        if (pa[i] != pb[i]) return pa[i] < pb[i];
      return a < b;
    });
    if (sibling_rng) std::shuffle(c.begin(), c.end(), *sibling_rng);
  }

  JointSequence seq;
  seq.entries.reserve(K + 1);
  std::vector<int> order_of(K, -1);
  std::queue<int> frontier;
  const int root = sk.root();
  frontier.push(root);
  while (!frontier.empty()) {
    int k = frontier.front();
    frontier.pop();
    int pos = static_cast<int>(seq.entries.size());
    order_of[k] = pos;
    int parent = (k == root) ? pos : order_of[sk.parents[k]];
    seq.entries.push_back({sk.joints[k], parent});
    seq.source_index.push_back(k);
    for (int c : children[k]) frontier.push(c);
  }
  return seq;
}

/// Rebuilds a skeleton from a sequence; the terminal entry, if any, is dropped.
inline Skeleton sequence_to_skeleton(const JointSequence& seq) {
  const int K = seq.joint_count();
  if (K <= 0) throw Error("malformed sequence: no joints");
  if (seq.entries[0].parent != 0) throw Error("malformed sequence: first entry is not self-parented");
  Skeleton sk;
  sk.joints.reserve(K);
  sk.parents.reserve(K);
  for (int k = 0; k < K; ++k) {
    const auto& e = seq.entries[k];
    if (k > 0 && (e.parent < 0 || e.parent >= k))
      throw Error("malformed sequence: parent " + std::to_string(e.parent) + " at entry " + std::to_string(k));
    sk.joints.push_back(e.joint);
    sk.parents.push_back(e.parent);
  }
  return sk;
}

/// Appends the stop step: target position = root position, parent = itself.
inline JointSequence append_terminal(JointSequence seq) {
  if (seq.terminated) throw Error("sequence already terminated");
  if (seq.entries.empty()) throw Error("cannot terminate an empty sequence");
  const int self = seq.size();
  seq.entries.push_back({seq.entries.front().joint, self});
  seq.terminated = true;
  return seq;
}

/// BFS depth of every entry (terminal entry, if any, gets depth 0).
inline std::vector<int> sequence_depths(const JointSequence& seq) {
  std::vector<int> depth(seq.size(), 0);
  for (int k = 1; k < seq.joint_count(); ++k) depth[k] = depth[seq.entries[k].parent] + 1;
  return depth;
}

}  // namespace autorig
