#pragma once

// Rig assets: the text file format, filtering rules, dataset statistics and a
// procedural generator of tube-shaped articulated assets.
//
// Rig file layout (one record per line, '#' starts a comment line):
//
//   autorig-rig 1
//   units <free text>
//   category <label>                 (optional)
//   mesh inline | mesh file <path>   (path relative to the rig file)
//   vertices <N>                     (inline only, then N lines "x y z")
//   faces <F>                        (inline only, then F lines "a b c", 0-based)
//   joints <K>                       (then K lines "index x y z parent name")
//   skinning <N|0>                   (then N lines "vertex count j w j w ...")
//   end

#include "autorig/geometry.hpp"
#include "autorig/skeleton.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <set>

namespace autorig {

inline constexpr int kRigFormatVersion = 1;
inline constexpr int kMaxInfluences = 8;

struct RigAsset {
  std::string name;
  TriMesh mesh;
  Skeleton skeleton;
  VertexSkinning vertex_skinning;  // empty when the file carries no skinning
  std::string category;
  std::string units = "model";
};

struct RigLoadResult {
  RigAsset asset;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string format_number(double v) { return format_double(v); }

/// Renormalizes a sparse row if it is off by more than `tol`; returns the original sum.
inline double renormalize(std::vector<std::pair<int, double>>& row, double tol = 1e-9) {
  double s = 0;
  for (auto& [j, w] : row) s += w;
  if (s > 0 && std::abs(s - 1.0) > tol)
    for (auto& [j, w] : row) w /= s;
  return s;
}

/// Keeps the `max_count` largest influences (ties by joint index), sorted by joint.
inline std::vector<std::pair<int, double>> prune_influences(std::vector<std::pair<int, double>> row, int max_count) {
  std::map<int, double> merged;
  for (auto [j, w] : row)
    if (w > 0) merged[j] += w;
  row.assign(merged.begin(), merged.end());
  if (static_cast<int>(row.size()) > max_count) {
    std::stable_sort(row.begin(), row.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    row.resize(max_count);
    std::sort(row.begin(), row.end());
  }
  renormalize(row);
  return row;
}

}  // namespace detail

inline void write_rig(std::ostream& out, const RigAsset& asset) {
  using detail::format_number;
  out << "autorig-rig " << kRigFormatVersion << "\n";
  out << "units " << (asset.units.empty() ? "model" : asset.units) << "\n";
  if (!asset.category.empty()) out << "category " << asset.category << "\n";
  out << "mesh inline\n";
  out << "vertices " << asset.mesh.vertices.size() << "\n";
  for (const Vec3& v : asset.mesh.vertices)
    out << format_number(v.x()) << ' ' << format_number(v.y()) << ' ' << format_number(v.z()) << "\n";
  out << "faces " << asset.mesh.faces.size() << "\n";
  for (const auto& f : asset.mesh.faces) out << f[0] << ' ' << f[1] << ' ' << f[2] << "\n";
  const Skeleton& sk = asset.skeleton;
  out << "joints " << sk.size() << "\n";
  for (int k = 0; k < sk.size(); ++k) {
    std::string name = sk.names.empty() || sk.names[k].empty() ? "-" : sk.names[k];
    std::replace(name.begin(), name.end(), ' ', '_');
    out << k << ' ' << format_number(sk.joints[k].x()) << ' ' << format_number(sk.joints[k].y()) << ' '
        << format_number(sk.joints[k].z()) << ' ' << sk.parents[k] << ' ' << name << "\n";
  }
  out << "skinning " << asset.vertex_skinning.size() << "\n";
  for (size_t v = 0; v < asset.vertex_skinning.size(); ++v) {
    auto row = detail::prune_influences(asset.vertex_skinning[v], kMaxInfluences);
    out << v << ' ' << row.size();
    for (auto [j, w] : row) out << ' ' << j << ' ' << format_number(w);
    out << "\n";
  }
  out << "end\n";
}

inline void save_rig(const std::string& path, const RigAsset& asset) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_rig(out, asset);
  if (!out) throw Error("failed writing " + path);
}

inline RigLoadResult parse_rig(std::istream& in, const std::filesystem::path& base_dir = {}) {
  RigLoadResult result;
  RigAsset& asset = result.asset;
  int lineno = 0;
  std::string line;

  auto next = [&](const char* what) -> std::istringstream {
    while (std::getline(in, line)) {
      ++lineno;
      auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      if (line.back() == '\r') line.pop_back();
      return std::istringstream(line);
    }
    throw ParseError(std::string("unexpected end of file, expected ") + what, lineno + 1);
  };
  auto expect_tag = [&](std::istringstream& ls, const std::string& tag) {
    std::string t;
    if (!(ls >> t) || t != tag) throw ParseError("expected '" + tag + "' section", lineno);
  };
  auto read_count = [&](const std::string& tag) {
    auto ls = next(tag.c_str());
    expect_tag(ls, tag);
    long n = -1;
    if (!(ls >> n) || n < 0) throw ParseError("malformed " + tag + " count", lineno);
    return static_cast<int>(n);
  };

  {
    auto ls = next("header");
    std::string magic;
    int version = 0;
    if (!(ls >> magic) || magic != "autorig-rig") throw ParseError("not a rig file", lineno);
    if (!(ls >> version) || version != kRigFormatVersion)
      throw ParseError("unsupported rig format version (expected " + std::to_string(kRigFormatVersion) + ")", lineno);
  }
  auto ls = next("units");
  std::string tag;
  ls >> tag;
  if (tag != "units") throw ParseError("expected 'units'", lineno);
  std::getline(ls >> std::ws, asset.units);

  ls = next("mesh");
  ls >> tag;
  if (tag == "category") {
    std::getline(ls >> std::ws, asset.category);
    ls = next("mesh");
    ls >> tag;
  }
  if (tag != "mesh") throw ParseError("expected 'mesh'", lineno);
  std::string kind;
  ls >> kind;
  if (kind == "inline") {
    const int nv = read_count("vertices");
    asset.mesh.vertices.resize(nv);
    for (int i = 0; i < nv; ++i) {
      auto vs = next("vertex");
      Vec3& v = asset.mesh.vertices[i];
      if (!(vs >> v.x() >> v.y() >> v.z())) throw ParseError("malformed vertex", lineno);
    }
    const int nf = read_count("faces");
    asset.mesh.faces.resize(nf);
    for (int i = 0; i < nf; ++i) {
      auto fs = next("face");
      auto& f = asset.mesh.faces[i];
      if (!(fs >> f[0] >> f[1] >> f[2])) throw ParseError("malformed face", lineno);
      for (int c : f)
        if (c < 0 || c >= nv) throw ParseError("face references vertex " + std::to_string(c) + " of " + std::to_string(nv), lineno);
    }
  } else if (kind == "file") {
    std::string rel;
    std::getline(ls >> std::ws, rel);
    if (rel.empty()) throw ParseError("mesh file path missing", lineno);
    try {
      asset.mesh = load_obj((base_dir / rel).string());
    } catch (const Error& e) {
      throw ParseError(std::string("mesh reference: ") + e.what(), lineno);
    }
  } else {
    throw ParseError("mesh must be 'inline' or 'file <path>'", lineno);
  }

  const int K = read_count("joints");
  Skeleton& sk = asset.skeleton;
  sk.joints.resize(K);
  sk.parents.resize(K);
  sk.names.resize(K);
  bool any_name = false;
  for (int k = 0; k < K; ++k) {
    auto js = next("joint");
    int index = -1;
    Vec3& p = sk.joints[k];
    if (!(js >> index >> p.x() >> p.y() >> p.z() >> sk.parents[k])) throw ParseError("malformed joint", lineno);
    if (index != k) throw ParseError("joint index " + std::to_string(index) + " out of order (expected " + std::to_string(k) + ")", lineno);
    if (sk.parents[k] < 0 || sk.parents[k] >= K)
      throw ParseError("parent index " + std::to_string(sk.parents[k]) + " out of range for " + std::to_string(K) + " joints", lineno);
    std::string name;
    if (js >> name && name != "-") {
      sk.names[k] = name;
      any_name = true;
    }
  }
  if (!any_name) sk.names.clear();

  const int ns = read_count("skinning");
  const int nv = static_cast<int>(asset.mesh.vertices.size());
  if (ns != 0 && ns != nv)
    throw ParseError("skinning has " + std::to_string(ns) + " rows for " + std::to_string(nv) + " vertices", lineno);
  asset.vertex_skinning.resize(ns);
  for (int i = 0; i < ns; ++i) {
    auto ss = next("skinning row");
    int v = -1, count = -1;
    if (!(ss >> v >> count) || count < 1) throw ParseError("malformed skinning row", lineno);
    if (v != i) throw ParseError("skinning vertex " + std::to_string(v) + " out of order (expected " + std::to_string(i) + ")", lineno);
    auto& row = asset.vertex_skinning[i];
    for (int c = 0; c < count; ++c) {
      int j = -1;
      double w = 0;
      if (!(ss >> j >> w)) throw ParseError("malformed skinning influence", lineno);
      if (j < 0 || j >= K) throw ParseError("skinning references joint " + std::to_string(j) + " of " + std::to_string(K), lineno);
      if (w < 0 || !std::isfinite(w)) throw ParseError("negative or non-finite skinning weight", lineno);
      row.emplace_back(j, w);
    }
    const double s = detail::renormalize(row);
    if (!(s > 0)) throw ParseError("skinning row of vertex " + std::to_string(i) + " has zero mass", lineno);
    if (std::abs(s - 1.0) > 1e-4)
      result.warnings.push_back("line " + std::to_string(lineno) + ": skinning row of vertex " + std::to_string(i) +
                                " summed to " + detail::format_number(s) + ", renormalized");
  }
  auto es = next("end");
  expect_tag(es, "end");
  return result;
}

inline RigLoadResult load_rig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    RigLoadResult r = parse_rig(in, std::filesystem::path(path).parent_path());
    r.asset.name = std::filesystem::path(path).stem().string();
    return r;
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.detail(), e.line());
  }
}

// ---------------------------------------------------------------------------
// Filtering

struct FilterRules {
  int max_joints = kDefaultMaxJoints;
  double alignment_distance = 0.1;  // normalized units
  double alignment_fraction = 0.1;  // reject if more than this fraction of joints are farther
  int alignment_samples = 2048;
  int min_vertices = 50;
  int min_faces = 50;
  std::uint64_t seed = 0;
};

struct FilterDecision {
  std::string name;
  bool kept = true;
  std::string rule;  // "max-joints", "tree", "alignment", "degenerate"; empty when kept
  std::string detail;
  std::map<std::string, double> measured;
};

struct FilterReport {
  std::vector<FilterDecision> decisions;

  int rejected() const {
    return static_cast<int>(std::count_if(decisions.begin(), decisions.end(), [](const auto& d) { return !d.kept; }));
  }
};

/// Applies the rules in order and stops at the first one that fails.
inline FilterDecision check_asset(const RigAsset& asset, const FilterRules& rules = {}) {
  FilterDecision d;
  d.name = asset.name;
  const int K = asset.skeleton.size();
  d.measured["joints"] = K;
  d.measured["vertices"] = static_cast<double>(asset.mesh.vertices.size());
  d.measured["faces"] = static_cast<double>(asset.mesh.faces.size());
  auto reject = [&](std::string rule, std::string detail) {
    d.kept = false;
    d.rule = std::move(rule);
    d.detail = std::move(detail);
    return d;
  };
  if (K > rules.max_joints)
    return reject("max-joints", std::to_string(K) + " joints > " + std::to_string(rules.max_joints));
  if (ValidationReport rep = validate_skeleton(asset.skeleton, std::max(rules.max_joints, 1)); !rep.ok())
    return reject("tree", rep.summary());

  try {
    check_mesh(asset.mesh);
    NormalizationTransform t = normalization_for(asset.mesh);
    SampledShape samples = sample_surface(transform_mesh(asset.mesh, t), rules.alignment_samples, rules.seed);
    int far = 0;
    double worst = 0;
    for (const Vec3& j : asset.skeleton.joints) {
      const Vec3 p = t.apply(j);
      const double nearest = (samples.points.rowwise() - p.transpose()).rowwise().norm().minCoeff();
      worst = std::max(worst, nearest);
      if (nearest > rules.alignment_distance) ++far;
    }
    const double frac = static_cast<double>(far) / K;
    d.measured["far_joint_fraction"] = frac;
    d.measured["max_joint_surface_distance"] = worst;
    if (frac > rules.alignment_fraction)
      return reject("alignment", detail::format_number(frac) + " of joints farther than " +
                                     detail::format_number(rules.alignment_distance) + " from the surface");
  } catch (const Error& e) {
    return reject("degenerate", e.what());
  }

  if (static_cast<int>(asset.mesh.vertices.size()) < rules.min_vertices ||
      static_cast<int>(asset.mesh.faces.size()) < rules.min_faces)
    return reject("degenerate", std::to_string(asset.mesh.vertices.size()) + " vertices, " +
                                    std::to_string(asset.mesh.faces.size()) + " faces");
  return d;
}

inline std::pair<std::vector<RigAsset>, FilterReport> filter_assets(const std::vector<RigAsset>& assets,
                                                                    const FilterRules& rules = {}) {
  std::vector<RigAsset> kept;
  FilterReport report;
  for (const auto& a : assets) {
    report.decisions.push_back(check_asset(a, rules));
    if (report.decisions.back().kept) kept.push_back(a);
  }
  return {std::move(kept), std::move(report)};
}

// ---------------------------------------------------------------------------
// Statistics

inline constexpr int kHistogramBinWidth = 5;
inline constexpr int kHistogramBins = 13;  // [0,5), [5,10), ..., [60,65)

struct DatasetStats {
  int assets = 0;
  std::map<std::string, int> categories;
  std::array<int, kHistogramBins> joint_histogram{};
  int overflow = 0;  // assets with more than 64 joints
};

inline DatasetStats dataset_stats(const std::vector<RigAsset>& assets) {
  DatasetStats s;
  for (const auto& a : assets) {
    ++s.assets;
    ++s.categories[a.category.empty() ? "unlabeled" : a.category];
    const int bin = a.skeleton.size() / kHistogramBinWidth;
    if (bin < kHistogramBins)
      ++s.joint_histogram[bin];
    else
      ++s.overflow;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Procedural assets

struct SynthParams {
  int min_joints = 4;
  int max_joints = 16;
  double branch_probability = 0.3;
  double min_radius = 0.025;
  double max_radius = 0.05;
  double sharpness = 25.0;
  double min_bone = 0.2;
  double max_bone = 0.32;
  double min_joint_angle_deg = 65.0;  // between bones meeting at a joint
  double min_bone_gap = 0.1;          // between bones that share no joint
  double box = 0.45;                  // joints are generated inside [-box, box]^3
  double target_extent = 0.9;         // skeleton bounding box is scaled up to this
  int ring_segments = 8;
  int rings = 4;
};

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

/// Minimum distance between segments [p0,p1] and [q0,q1].
inline double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1) {
  const Vec3 d1 = p1 - p0, d2 = q1 - q0, r = p0 - q0;
  const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  double s = 0, t = 0;
  if (a <= 1e-18 && e <= 1e-18) return r.norm();
  if (a <= 1e-18) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= 1e-18) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      s = denom > 1e-18 ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0) {
        t = 0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1) {
        t = 1;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return ((p0 + s * d1) - (q0 + t * d2)).norm();
}

/// Bones as (owner joint, child joint) segments; a bone is owned by the joint
/// whose rotation moves it (its proximal end).
inline std::vector<std::pair<int, int>> owned_bones(const Skeleton& sk) {
  std::vector<std::pair<int, int>> out;
  for (auto [child, parent] : sk.bones()) out.emplace_back(parent, child);
  return out;
}

/// Softmax of -sharpness * distance over the two bones nearest to `p`,
/// accumulated onto the bones' owner joints.
inline std::vector<std::pair<int, double>> two_bone_skinning(const Vec3& p, const Skeleton& sk, double sharpness) {
  auto bones = owned_bones(sk);
  if (bones.empty()) return {{sk.root(), 1.0}};
  std::vector<std::pair<double, int>> dist;
  for (size_t b = 0; b < bones.size(); ++b)
    dist.emplace_back(point_segment_distance(p, sk.joints[bones[b].first], sk.joints[bones[b].second]), static_cast<int>(b));
  std::sort(dist.begin(), dist.end());
  if (dist.size() == 1) return {{bones[dist[0].second].first, 1.0}};
  const double w1 = 1.0 / (1.0 + std::exp(-sharpness * (dist[1].first - dist[0].first)));
  const int o1 = bones[dist[0].second].first, o2 = bones[dist[1].second].first;
  if (o1 == o2) return {{o1, 1.0}};
  std::vector<std::pair<int, double>> row{{o1, w1}, {o2, 1.0 - w1}};
  std::sort(row.begin(), row.end());
  return row;
}

namespace detail {

inline Vec3 uniform_direction(Rng& rng) {
  Vec3 v;
  do {
    v = Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng));
  } while (v.norm() < 1e-9);
  return v.normalized();
}

inline std::optional<Skeleton> try_random_tree(Rng& rng, int K, const SynthParams& p) {
  Skeleton sk;
  sk.joints.push_back(Vec3(uniform01(rng) - 0.5, uniform01(rng) - 0.5, uniform01(rng) - 0.5) * 0.4);
  sk.parents.push_back(0);
  const double cos_limit = std::cos(p.min_joint_angle_deg * M_PI / 180.0);
  int tries = 0;
  while (sk.size() < K) {
    if (++tries > 400 * K) return std::nullopt;
    const int last = sk.size() - 1;
    const int parent = (uniform01(rng) < p.branch_probability) ? static_cast<int>(uniform01(rng) * sk.size()) % sk.size() : last;
    const Vec3 dir = uniform_direction(rng);
    const double len = p.min_bone + uniform01(rng) * (p.max_bone - p.min_bone);
    const Vec3& a = sk.joints[parent];
    const Vec3 c = a + dir * len;
    if ((c.array().abs() > p.box).any()) continue;
    bool ok = true;
    for (const Vec3& j : sk.joints)
      if ((j - c).norm() < 0.75 * p.min_bone) ok = false;
    for (auto [child, par] : sk.bones()) {
      if (!ok) break;
      const bool shares = (child == parent || par == parent);
      if (shares) {
        const Vec3 other = (child == parent) ? sk.joints[par] : sk.joints[child];
        if ((other - a).normalized().dot(dir) > cos_limit) ok = false;
      } else if (segment_distance(a, c, sk.joints[child], sk.joints[par]) < p.min_bone_gap) {
        ok = false;
      }
    }
    if (!ok) continue;
    sk.joints.push_back(c);
    sk.parents.push_back(parent);
  }
  return sk;
}

/// Closed tube around segment a-b: `rings` rings of `segments` vertices plus
/// a pole beyond each end. Faces are wound outward.
inline void append_tube(TriMesh& mesh, const Vec3& a, const Vec3& b, double r, int rings, int segments) {
  const Vec3 u = (b - a).normalized();
  Vec3 helper = std::abs(u.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 v = u.cross(helper).normalized();
  const Vec3 w = u.cross(v);
  const int base = static_cast<int>(mesh.vertices.size());
  for (int i = 0; i < rings; ++i) {
    const Vec3 c = a + (b - a) * (static_cast<double>(i) / (rings - 1));
    for (int s = 0; s < segments; ++s) {
      const double th = 2.0 * M_PI * s / segments;
      mesh.vertices.push_back(c + r * (std::cos(th) * v + std::sin(th) * w));
    }
  }
  const int pole_a = static_cast<int>(mesh.vertices.size());
  mesh.vertices.push_back(a - u * r);
  const int pole_b = pole_a + 1;
  mesh.vertices.push_back(b + u * r);
  auto idx = [&](int ring, int s) { return base + ring * segments + (s % segments); };
  std::vector<std::array<int, 3>> faces;
  for (int i = 0; i + 1 < rings; ++i)
    for (int s = 0; s < segments; ++s) {
      faces.push_back({idx(i, s), idx(i + 1, s + 1), idx(i + 1, s)});
      faces.push_back({idx(i, s), idx(i, s + 1), idx(i + 1, s + 1)});
    }
  for (int s = 0; s < segments; ++s) {
    faces.push_back({pole_a, idx(0, s + 1), idx(0, s)});
    faces.push_back({pole_b, idx(rings - 1, s), idx(rings - 1, s + 1)});
  }
  for (auto f : faces) {
    const Vec3 centroid = (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0;
    const double t = std::clamp((centroid - a).dot(u), 0.0, (b - a).norm());
    const Vec3 outward = centroid - (a + t * u);
    if (face_normal_unnormalized(mesh, f).dot(outward) < 0) std::swap(f[1], f[2]);
    mesh.faces.push_back(f);
  }
}

}  // namespace detail

/// One procedural asset, fully determined by `seed`.
inline RigAsset synth_asset(std::uint64_t seed, const SynthParams& p = {}) {
  Rng rng(seed);
  std::optional<Skeleton> sk;
  while (!sk) {
    const int K = p.min_joints + static_cast<int>(uniform01(rng) * (p.max_joints - p.min_joints + 1));
    sk = detail::try_random_tree(rng, std::min(K, p.max_joints), p);
  }
  Vec3 lo = sk->joints.front(), hi = lo;
  for (const Vec3& j : sk->joints) {
    lo = lo.cwiseMin(j);
    hi = hi.cwiseMax(j);
  }
  const Vec3 center = (lo + hi) / 2.0;
  const double up = p.target_extent / std::max((hi - lo).maxCoeff(), 1e-9);
  for (Vec3& j : sk->joints) j = (j - center) * std::max(up, 1.0);

  RigAsset asset;
  asset.units = "normalized";
  asset.category = "synthetic";
  asset.skeleton = *sk;
  const double radius = p.min_radius + uniform01(rng) * (p.max_radius - p.min_radius);
  for (auto [owner, child] : owned_bones(asset.skeleton))
    detail::append_tube(asset.mesh, asset.skeleton.joints[owner], asset.skeleton.joints[child], radius, p.rings,
                        p.ring_segments);
  asset.vertex_skinning.reserve(asset.mesh.vertices.size());
  for (const Vec3& v : asset.mesh.vertices) asset.vertex_skinning.push_back(two_bone_skinning(v, asset.skeleton, p.sharpness));
  return asset;
}

/// `n` assets; asset i uses the substream ("synth", i) of `seed`.
inline std::vector<RigAsset> synth_generate(int n, std::uint64_t seed, const SynthParams& p = {}) {
  std::vector<RigAsset> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    out.push_back(synth_asset(derive_seed(seed, "synth", static_cast<std::uint64_t>(i)), p));
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%04d", i);
    out.back().name = name;
  }
  return out;
}

}  // namespace autorig
