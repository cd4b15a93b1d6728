#pragma once

// Meshes, normalization, surface sampling, forward kinematics, linear blend
// skinning and random pose augmentation.

#include "autorig/common.hpp"
#include "autorig/skeleton.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <utility>
#include <vector>

namespace autorig {

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
};

/// Per-vertex sparse influences: (joint, weight) pairs, rows sum to one.
using VertexSkinning = std::vector<std::vector<std::pair<int, double>>>;

/// Dense L x K row-stochastic influence matrix.
using SkinningMatrix = MatrixXd;

struct SampledShape {
  MatrixXd points;   // L x 3
  MatrixXd normals;  // L x 3, unit rows
  int size() const { return static_cast<int>(points.rows()); }
};

/// Surface samples together with their source faces and barycentric coordinates.
struct SurfaceSamples {
  SampledShape shape;
  std::vector<int> face;
  std::vector<Vec3> barycentric;
};

/// normalized = (p + translation) * scale
struct NormalizationTransform {
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return (p + translation) * scale; }
  Vec3 invert(const Vec3& p) const { return p / scale - translation; }
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 operator()(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform operator*(const RigidTransform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }
};

struct Pose {
  std::vector<Mat3> local_rotations;

  static Pose identity(int K) { return {std::vector<Mat3>(K, Mat3::Identity())}; }
};

inline void check_mesh(const TriMesh& mesh) {
  const int n = static_cast<int>(mesh.vertices.size());
  for (size_t f = 0; f < mesh.faces.size(); ++f)
    for (int i : mesh.faces[f])
      if (i < 0 || i >= n) throw ShapeError("face " + std::to_string(f) + " references vertex " + std::to_string(i));
}

inline Vec3 face_normal_unnormalized(const TriMesh& mesh, const std::array<int, 3>& f) {
  const Vec3& a = mesh.vertices[f[0]];
  return (mesh.vertices[f[1]] - a).cross(mesh.vertices[f[2]] - a);
}

/// Centers the bounding box at the origin and scales its longest side to 1.
inline NormalizationTransform normalization_for(const TriMesh& mesh) {
  if (mesh.vertices.empty()) throw DegenerateGeometryError("mesh has no vertices");
  Vec3 lo = mesh.vertices.front(), hi = lo;
  for (const Vec3& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  const double extent = (hi - lo).maxCoeff();
  if (!(extent > 1e-12) || !std::isfinite(extent))
    throw DegenerateGeometryError("mesh bounding box has zero extent");
  return {-(lo + hi) / 2.0, 1.0 / extent};
}

inline TriMesh transform_mesh(const TriMesh& mesh, const NormalizationTransform& t) {
  TriMesh out = mesh;
  for (Vec3& v : out.vertices) v = t.apply(v);
  return out;
}

inline Skeleton transform_skeleton(const Skeleton& sk, const NormalizationTransform& t) {
  Skeleton out = sk;
  for (Vec3& j : out.joints) j = t.apply(j);
  return out;
}

inline Skeleton denormalize_skeleton(const Skeleton& sk, const NormalizationTransform& t) {
  Skeleton out = sk;
  for (Vec3& j : out.joints) j = t.invert(j);
  return out;
}

inline std::pair<TriMesh, NormalizationTransform> normalize_shape(const TriMesh& mesh) {
  NormalizationTransform t = normalization_for(mesh);
  return {transform_mesh(mesh, t), t};
}

/// Area-weighted surface sampling; each point carries its face's unit normal.
inline SurfaceSamples sample_surface_with_faces(const TriMesh& mesh, int count, std::uint64_t seed) {
  check_mesh(mesh);
  if (count <= 0) throw Error("sample count must be positive");
  std::vector<double> cumulative;
  std::vector<Vec3> unit_normals;
  cumulative.reserve(mesh.faces.size());
  unit_normals.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    Vec3 n = face_normal_unnormalized(mesh, f);
    const double twice_area = n.norm();
    total += 0.5 * twice_area;
    cumulative.push_back(total);
    unit_normals.push_back(twice_area > 0 ? Vec3(n / twice_area) : Vec3::Zero());
  }
  if (!(total > 0) || !std::isfinite(total)) throw DegenerateGeometryError("mesh has zero surface area");

  Rng rng(seed);
  SurfaceSamples out;
  out.shape.points.resize(count, 3);
  out.shape.normals.resize(count, 3);
  out.face.resize(count);
  out.barycentric.resize(count);
  for (int i = 0; i < count; ++i) {
    const double r = uniform01(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    int f = static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative.begin(), cumulative.size() - 1));
    const double r1 = std::sqrt(uniform01(rng));
    const double r2 = uniform01(rng);
    Vec3 bary(1.0 - r1, r1 * (1.0 - r2), r1 * r2);
    const auto& face = mesh.faces[f];
    Vec3 p = bary[0] * mesh.vertices[face[0]] + bary[1] * mesh.vertices[face[1]] + bary[2] * mesh.vertices[face[2]];
    out.shape.points.row(i) = p.transpose();
    out.shape.normals.row(i) = unit_normals[f].transpose();
    out.face[i] = f;
    out.barycentric[i] = bary;
  }
  return out;
}

inline SampledShape sample_surface(const TriMesh& mesh, int count, std::uint64_t seed) {
  return sample_surface_with_faces(mesh, count, seed).shape;
}

/// Ground-truth skinning at surface samples: barycentric blend of the source
/// face's vertex weights, renormalized per row.
inline SkinningMatrix transfer_skinning(const SurfaceSamples& samples, const TriMesh& mesh,
                                        const VertexSkinning& skinning, int joint_count) {
  if (skinning.size() != mesh.vertices.size()) throw ShapeError("skinning rows do not match vertex count");
  SkinningMatrix W = SkinningMatrix::Zero(samples.shape.size(), joint_count);
  for (int i = 0; i < samples.shape.size(); ++i) {
    const auto& face = mesh.faces[samples.face[i]];
    for (int c = 0; c < 3; ++c)
      for (auto [j, w] : skinning[face[c]]) W(i, j) += samples.barycentric[i][c] * w;
    const double s = W.row(i).sum();
    if (!(s > 0)) throw Error("sample " + std::to_string(i) + " has no skinning mass");
    W.row(i) /= s;
  }
  return W;
}

/// Global rigid transform of every joint. Joint k rotates by its local
/// rotation about its own rest position, composed with its parent's transform.
inline std::vector<RigidTransform> forward_kinematics(const Skeleton& sk, const Pose& pose) {
  if (static_cast<int>(pose.local_rotations.size()) != sk.size())
    throw ShapeError("pose has " + std::to_string(pose.local_rotations.size()) + " rotations for " +
                     std::to_string(sk.size()) + " joints");
  JointSequence order = bfs_serialize(sk, nullptr, std::max(sk.size(), kDefaultMaxJoints));
  std::vector<RigidTransform> global(sk.size());
  for (int idx : order.source_index) {
    const Mat3& R = pose.local_rotations[idx];
    const Vec3& j = sk.joints[idx];
    RigidTransform local{R, j - R * j};
    global[idx] = (sk.parents[idx] == idx) ? local : global[sk.parents[idx]] * local;
  }
  return global;
}

inline Skeleton posed_skeleton(const Skeleton& sk, const std::vector<RigidTransform>& transforms) {
  Skeleton out = sk;
  for (int k = 0; k < sk.size(); ++k) out.joints[k] = transforms[k](sk.joints[k]);
  return out;
}

inline void check_row_stochastic(const SkinningMatrix& W, double tol = 1e-5) {
  for (int i = 0; i < W.rows(); ++i) {
    if ((W.row(i).array() < -tol).any()) throw Error("skinning row " + std::to_string(i) + " has negative weights");
    if (std::abs(W.row(i).sum() - 1.0) > tol)
      throw Error("skinning row " + std::to_string(i) + " sums to " + std::to_string(W.row(i).sum()));
  }
}

/// p' = sum_k w_k G_k(p), evaluated as p + sum_k w_k (G_k(p) - p) so identity
/// transforms reproduce the input bit-for-bit.
inline MatrixXd lbs_deform(const MatrixXd& points, const SkinningMatrix& weights,
                           const std::vector<RigidTransform>& transforms) {
  if (points.cols() != 3) throw ShapeError("points must be L x 3");
  if (weights.rows() != points.rows()) throw ShapeError("skinning rows do not match point count");
  if (weights.cols() != static_cast<Eigen::Index>(transforms.size()))
    throw ShapeError("skinning columns do not match transform count");
  check_row_stochastic(weights);
  MatrixXd out(points.rows(), 3);
  for (int i = 0; i < points.rows(); ++i) {
    const Vec3 p = points.row(i).transpose();
    Vec3 delta = Vec3::Zero();
    for (int k = 0; k < weights.cols(); ++k) {
      const double w = weights(i, k);
      if (w != 0.0) delta += w * (transforms[k](p) - p);
    }
    out.row(i) = (p + delta).transpose();
  }
  return out;
}

inline SkinningMatrix densify(const VertexSkinning& skinning, int joint_count) {
  SkinningMatrix W = SkinningMatrix::Zero(static_cast<Eigen::Index>(skinning.size()), joint_count);
  for (size_t v = 0; v < skinning.size(); ++v)
    for (auto [j, w] : skinning[v]) {
      if (j < 0 || j >= joint_count) throw ShapeError("skinning references joint " + std::to_string(j));
      W(static_cast<Eigen::Index>(v), j) += w;
    }
  return W;
}

inline MatrixXd to_matrix(const std::vector<Vec3>& pts) {
  MatrixXd m(static_cast<Eigen::Index>(pts.size()), 3);
  for (size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  return m;
}

inline std::vector<Vec3> to_points(const MatrixXd& m) {
  std::vector<Vec3> pts(m.rows());
  for (int i = 0; i < m.rows(); ++i) pts[i] = m.row(i).transpose();
  return pts;
}

/// Rotation by `angle` radians about a uniformly random axis; angle uniform in [0, max_angle].
inline Mat3 random_rotation(Rng& rng, double max_angle_rad) {
  Vec3 axis;
  do {
    axis = Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
  } while (axis.norm() < 1e-12);
  axis.normalize();
  const double angle = uniform01(rng) * max_angle_rad;
  if (angle == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

inline Pose random_pose(int joint_count, double max_angle_deg, Rng& rng) {
  if (!(max_angle_deg >= 0.0 && max_angle_deg <= 180.0)) throw Error("max_angle must lie in [0, 180]");
  Pose pose;
  pose.local_rotations.reserve(joint_count);
  const double max_rad = max_angle_deg * M_PI / 180.0;
  for (int k = 0; k < joint_count; ++k) pose.local_rotations.push_back(random_rotation(rng, max_rad));
  return pose;
}

/// Applies a pose to a rigged mesh: vertices by LBS, joints by FK.
inline std::pair<TriMesh, Skeleton> apply_pose(const TriMesh& mesh, const Skeleton& sk, const VertexSkinning& skinning,
                                               const Pose& pose) {
  auto transforms = forward_kinematics(sk, pose);
  TriMesh out = mesh;
  out.vertices = to_points(lbs_deform(to_matrix(mesh.vertices), densify(skinning, sk.size()), transforms));
  return {std::move(out), posed_skeleton(sk, transforms)};
}

inline std::pair<TriMesh, Skeleton> random_pose_augment(const TriMesh& mesh, const Skeleton& sk,
                                                        const VertexSkinning& skinning, double max_angle_deg,
                                                        Rng& rng) {
  return apply_pose(mesh, sk, skinning, random_pose(sk.size(), max_angle_deg, rng));
}

// ---------------------------------------------------------------------------
// ASCII OBJ subset: `v x y z` and `f a b c ...` records (polygons are fanned).

inline TriMesh parse_obj(std::istream& in) {
  TriMesh mesh;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x() >> v.y() >> v.z())) throw ParseError("malformed vertex record", lineno);
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        int i = 0;
        try {
          i = std::stoi(tok.substr(0, tok.find('/')));
        } catch (const std::exception&) {
          throw ParseError("malformed face index '" + tok + "'", lineno);
        }
        const int n = static_cast<int>(mesh.vertices.size());
        int resolved = i > 0 ? i - 1 : n + i;
        if (i == 0 || resolved < 0 || resolved >= n) throw ParseError("face index out of range: " + tok, lineno);
        idx.push_back(resolved);
      }
      if (idx.size() < 3) throw ParseError("face with fewer than 3 vertices", lineno);
      for (size_t k = 1; k + 1 < idx.size(); ++k) mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  return mesh;
}

inline TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_obj(in);
}

inline void write_obj(std::ostream& out, const TriMesh& mesh) {
  for (const Vec3& v : mesh.vertices)
    out << "v " << format_double(v.x()) << ' ' << format_double(v.y()) << ' ' << format_double(v.z()) << '\n';
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

inline void save_obj(const std::string& path, const TriMesh& mesh) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_obj(out, mesh);
}

}  // namespace autorig
