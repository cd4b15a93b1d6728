// Command-line entry point: synth, filter, stats, train, rig, eval, deform.
// Exit codes: 0 success, 1 hard error, 2 some inputs failed.

#include "autorig.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace autorig;

namespace {

constexpr int kOk = 0;
constexpr int kHardError = 1;
constexpr int kPartial = 2;

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string out;
  bool quiet = false;
};

std::vector<fs::path> rig_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".rig") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

void require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw Error(std::string("--out is required for ") + what);
}

fs::path ensure_dir(const std::string& dir) {
  fs::create_directories(dir);
  return dir;
}

/// Loads every rig in `dir`; unreadable files are reported and skipped.
std::vector<RigAsset> load_dir(const fs::path& dir, std::vector<std::string>& failures) {
  std::vector<RigAsset> assets;
  for (const auto& p : rig_files(dir)) {
    try {
      RigLoadResult r = load_rig(p.string());
      for (const auto& w : r.warnings) std::cerr << "warning: " << p.filename().string() << ": " << w << "\n";
      assets.push_back(std::move(r.asset));
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      failures.push_back(p.filename().string() + ": " + e.what());
    }
  }
  return assets;
}

std::string csv_field(std::string s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

// ---------------------------------------------------------------------------

int cmd_synth(const Globals& g, int n, int min_joints, int max_joints) {
  require_out(g, "synth");
  SynthParams p;
  p.min_joints = min_joints;
  p.max_joints = max_joints;
  if (n < 0 || min_joints < 2 || max_joints < min_joints) throw Error("synth: need n >= 0 and 2 <= min-joints <= max-joints");
  const fs::path dir = ensure_dir(g.out);
  for (const RigAsset& a : synth_generate(n, g.seed, p)) save_rig((dir / (a.name + ".rig")).string(), a);
  if (!g.quiet) std::cout << "wrote " << n << " assets to " << dir.string() << "\n";
  return kOk;
}

int cmd_filter(const Globals& g, const std::string& in_dir, FilterRules rules) {
  require_out(g, "filter");
  std::vector<std::string> failures;
  const std::vector<RigAsset> assets = load_dir(in_dir, failures);
  const fs::path dir = ensure_dir(g.out);
  rules.seed = g.seed;
  const auto [kept, report] = filter_assets(assets, rules);
  for (const RigAsset& a : kept) save_rig((dir / (a.name + ".rig")).string(), a);

  std::ofstream rej(dir / "rejects.csv");
  if (!rej) throw Error("cannot write " + (dir / "rejects.csv").string());
  rej << "asset,rule,detail,measured\n";
  for (const auto& d : report.decisions) {
    if (d.kept) continue;
    std::string measured;
    for (const auto& [k, v] : d.measured) measured += (measured.empty() ? "" : ";") + k + "=" + format_double(v);
    rej << csv_field(d.name) << ',' << d.rule << ',' << csv_field(d.detail) << ',' << csv_field(measured) << "\n";
  }
  for (const auto& f : failures) rej << csv_field(f.substr(0, f.find(':'))) << ",parse," << csv_field(f) << ",\n";
  if (!g.quiet)
    std::cout << "kept " << kept.size() << " of " << assets.size() << " assets, rejected " << report.rejected()
              << ", unreadable " << failures.size() << "\n";
  return failures.empty() ? kOk : kPartial;
}

int cmd_stats(const Globals& g, const std::string& in_dir) {
  std::vector<std::string> failures;
  const DatasetStats s = dataset_stats(load_dir(in_dir, failures));
  nlohmann::json j;
  j["assets"] = s.assets;
  j["categories"] = s.categories;
  nlohmann::json hist = nlohmann::json::array();
  for (int b = 0; b < kHistogramBins; ++b)
    hist.push_back({{"from", b * kHistogramBinWidth}, {"to", (b + 1) * kHistogramBinWidth}, {"count", s.joint_histogram[b]}});
  j["joint_histogram"] = hist;
  j["over_64_joints"] = s.overflow;

  std::cout << "assets " << s.assets << "\n\ncategory counts\n";
  for (const auto& [name, n] : s.categories) std::cout << "  " << name << "  " << n << "\n";
  std::cout << "\njoints per shape\n";
  for (int b = 0; b < kHistogramBins; ++b)
    std::cout << "  [" << b * kHistogramBinWidth << ", " << (b + 1) * kHistogramBinWidth << ")  " << s.joint_histogram[b] << "\n";
  std::cout << "  > 64  " << s.overflow << "\n";
  if (!g.out.empty()) {
    std::ofstream out(g.out);
    if (!out) throw Error("cannot write " + g.out);
    out << j.dump(2) << "\n";
  }
  return failures.empty() ? kOk : kPartial;
}

int cmd_train(const Globals& g, const std::string& data_dir, const std::string& loss_csv, int steps_override) {
  require_out(g, "train");
  TrainConfig cfg;
  if (!g.config.empty()) {
    cfg = load_train_config(g.config);
  } else {
    cfg.model = ModelConfig::toy();
  }
  cfg.seed = g.seed;
  cfg.workers = g.workers;
  if (steps_override > 0) cfg.steps = steps_override;
  cfg.validate();
  std::vector<std::string> failures;
  const std::vector<RigAsset> assets = load_dir(data_dir, failures);
  Model<float> model(cfg.model, derive_seed(cfg.seed, "model-init"));
  FitOptions opts;
  opts.checkpoint_path = g.out;
  opts.loss_csv_path = loss_csv.empty() ? g.out + ".loss.csv" : loss_csv;
  if (!g.quiet) opts.log = &std::cout;
  const FitResult r = fit(model, assets, cfg, opts);
  if (!g.quiet)
    std::cout << "trained " << cfg.steps << " steps on " << assets.size() - r.skipped.size() << " assets in " << r.seconds
              << " s; checkpoint " << g.out << "\n";
  return failures.empty() && r.skipped.empty() ? kOk : kPartial;
}

struct RigOptions {
  std::string ckpt;
  std::vector<std::string> meshes;
  std::string trace;
  int max_joints = 0;
  int sampling_steps = 0;
  std::string parent_mode = "argmax";
  double temperature = 1.0;
  bool no_stop = false;
  bool no_kv_cache = false;
  double clip = kDefaultSampleClip;
};

TriMesh load_mesh_any(const fs::path& p) {
  if (p.extension() == ".rig") return load_rig(p.string()).asset.mesh;
  return load_obj(p.string());
}

/// Loads a checkpoint; with --config the stored model must match the configured one.
std::unique_ptr<Model<float>> open_model(const Globals& g, const std::string& ckpt) {
  if (g.config.empty()) return load_model(ckpt);
  const TrainConfig cfg = load_train_config(g.config);
  return load_model(ckpt, &cfg.model);
}

int cmd_rig(const Globals& g, const RigOptions& o) {
  require_out(g, "rig");
  const std::unique_ptr<Model<float>> model = open_model(g, o.ckpt);
  GenerationConfig gen;
  gen.max_joints = o.max_joints;
  gen.sampling_steps = o.sampling_steps;
  gen.temperature = o.temperature;
  gen.stop_enabled = !o.no_stop;
  gen.use_kv_cache = !o.no_kv_cache;
  gen.clip_denoised = o.clip;
  if (o.parent_mode == "argmax")
    gen.parent_mode = ParentMode::Argmax;
  else if (o.parent_mode == "sample")
    gen.parent_mode = ParentMode::Sample;
  else
    throw Error("--parent-mode must be argmax or sample");

  std::vector<TriMesh> meshes;
  std::vector<std::string> names, failures;
  for (const auto& m : o.meshes) {
    try {
      meshes.push_back(load_mesh_any(m));
      names.push_back(fs::path(m).stem().string());
    } catch (const Error& e) {
      std::cerr << "error: " << m << ": " << e.what() << "\n";
      failures.push_back(m);
    }
  }
  // one mesh: --out is the rig file; several: --out is a directory
  const bool single = o.meshes.size() == 1;
  if (!single) ensure_dir(g.out);
  const std::vector<BatchItem> items = single && !meshes.empty()
                                           ? std::vector<BatchItem>{}
                                           : rig_batch(*model, meshes, g.seed, gen, g.workers);
  auto report = [&](const std::string& name, const TriMesh& mesh, const RigResult& r, const fs::path& out,
                    const fs::path& trace) {
    RigAsset a;
    a.name = name;
    a.mesh = mesh;
    a.skeleton = r.skeleton;
    a.vertex_skinning = vertex_skinning(r, mesh);
    save_rig(out.string(), a);
    double step_ms = 0;
    for (const auto& s : r.trace) step_ms += s.milliseconds;
    std::cout << name << ": " << r.skeleton.size() << " joints" << (r.truncated ? " (capacity reached)" : "") << ", "
              << std::fixed << std::setprecision(3) << r.seconds << " s, " << std::setprecision(2)
              << (r.trace.empty() ? 0.0 : step_ms / r.trace.size()) << " ms/step" << std::defaultfloat
              << std::setprecision(6) << "\n";
    if (!trace.empty()) {
      std::ofstream t(trace);
      if (!t) throw Error("cannot write " + trace.string());
      write_trace_csv(t, r);
    }
  };
  if (single && !meshes.empty()) {
    const RigResult r = rig(*model, meshes[0], mesh_seed(g.seed, meshes[0]), gen);
    report(names[0], meshes[0], r, g.out, o.trace);
  } else {
    if (!o.trace.empty()) ensure_dir(o.trace);
    for (size_t i = 0; i < items.size(); ++i) {
      if (!items[i].result) {
        std::cerr << "error: " << names[i] << ": " << items[i].error << "\n";
        failures.push_back(names[i]);
        continue;
      }
      report(names[i], meshes[i], *items[i].result, fs::path(g.out) / (names[i] + ".rig"),
             o.trace.empty() ? fs::path() : fs::path(o.trace) / (names[i] + ".csv"));
    }
  }
  if (failures.size() == o.meshes.size()) return kHardError;
  return failures.empty() ? kOk : kPartial;
}

int cmd_eval(const Globals& g, const std::string& pred_dir, const std::string& gt_dir, const std::string& json_path,
             const std::string& ckpt, MetricConfig metrics) {
  require_out(g, "eval");
  metrics.validate();
  std::vector<std::string> failures;
  const std::vector<RigAsset> gts = load_dir(gt_dir, failures);
  std::unique_ptr<Model<float>> model;
  if (!ckpt.empty()) model = open_model(g, ckpt);

  std::vector<std::pair<std::string, SkeletonReport>> rows;
  double connect = 0, skin_prec = 0, skin_rec = 0, skin_l1 = 0;
  int teacher_forced = 0;
  for (const RigAsset& gt : gts) {
    const fs::path pred_path = fs::path(pred_dir) / (gt.name + ".rig");
    try {
      const RigAsset pred = load_rig(pred_path.string()).asset;
      // both skeletons in the GT shape's normalized frame
      const NormalizationTransform t = normalization_for(gt.mesh);
      rows.emplace_back(gt.name, evaluate_skeleton(transform_skeleton(pred.skeleton, t), transform_skeleton(gt.skeleton, t), metrics));
      if (model) {
        const auto [acc, skin] = teacher_forced_scores(*model, gt, g.seed, metrics);
        connect += acc;
        skin_prec += skin.precision;
        skin_rec += skin.recall;
        skin_l1 += skin.avg_l1;
        ++teacher_forced;
      }
    } catch (const Error& e) {
      std::cerr << "error: " << gt.name << ": " << e.what() << "\n";
      failures.push_back(gt.name);
    }
  }
  std::ofstream csv(g.out);
  if (!csv) throw Error("cannot write " + g.out);
  write_report_csv(csv, rows, metrics);
  nlohmann::json j = aggregate_report(rows, metrics);
  if (teacher_forced > 0)
    j["teacher_forced"] = {{"shapes", teacher_forced},
                           {"connectivity_accuracy", connect / teacher_forced},
                           {"skinning_precision", skin_prec / teacher_forced},
                           {"skinning_recall", skin_rec / teacher_forced},
                           {"skinning_avg_l1", skin_l1 / teacher_forced}};
  j["failures"] = failures;
  const std::string jp = json_path.empty() ? g.out + ".json" : json_path;
  std::ofstream js(jp);
  if (!js) throw Error("cannot write " + jp);
  js << j.dump(2) << "\n";
  if (!g.quiet) std::cout << j["mean"].dump() << "\n";
  if (rows.empty() && !gts.empty()) return kHardError;
  return failures.empty() ? kOk : kPartial;
}

/// Pose file: one line per posed joint, "index rx ry rz" (axis-angle vector,
/// radians, in the parent frame). Unlisted joints keep the identity.
Pose read_pose(const std::string& path, int K) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open pose " + path);
  Pose pose = Pose::identity(K);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    int k = -1;
    Vec3 aa;
    if (!(ls >> k)) continue;
    if (!(ls >> aa.x() >> aa.y() >> aa.z())) throw ParseError("expected 'index rx ry rz'", lineno);
    if (k < 0 || k >= K) throw ParseError("joint " + std::to_string(k) + " out of range for " + std::to_string(K) + " joints", lineno);
    const double angle = aa.norm();
    pose.local_rotations[k] = angle > 0 ? Mat3(Eigen::AngleAxisd(angle, aa / angle)) : Mat3::Identity();
  }
  return pose;
}

int cmd_deform(const Globals& g, const std::string& rig_path, const std::string& pose_path, bool identity) {
  require_out(g, "deform");
  const RigAsset a = load_rig(rig_path).asset;
  if (a.vertex_skinning.empty()) throw Error(rig_path + " carries no skinning");
  if (!identity && pose_path.empty()) throw Error("deform needs --pose or --identity");
  const Pose pose = identity ? Pose::identity(a.skeleton.size()) : read_pose(pose_path, a.skeleton.size());
  const auto [mesh, sk] = apply_pose(a.mesh, a.skeleton, a.vertex_skinning, pose);
  if (fs::path(g.out).extension() == ".rig") {
    RigAsset posed = a;
    posed.mesh = mesh;
    posed.skeleton = sk;
    save_rig(g.out, posed);
  } else {
    save_obj(g.out, mesh);
  }
  if (!g.quiet) std::cout << "wrote " << g.out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"autorig: skeleton and skinning generation for 3D meshes"};
  app.require_subcommand(1);
  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "Training config file (key = value lines)");
    sub->add_option("--seed", g.seed, "Root seed; all randomness uses named substreams of it");
    sub->add_option("--workers", g.workers, "Worker threads (1 is fully deterministic)")->check(CLI::PositiveNumber);
    sub->add_option("--out", g.out, "Output file or directory");
    sub->add_flag("--quiet", g.quiet, "Suppress progress output");
  };

  int n = 16, min_joints = 4, max_joints = 16;
  auto* synth = app.add_subcommand("synth", "Generate procedural rigged assets");
  synth->add_option("--n", n, "Number of assets");
  synth->add_option("--min-joints", min_joints);
  synth->add_option("--max-joints", max_joints);
  add_globals(synth);

  std::string in_dir;
  FilterRules rules;
  auto* filter = app.add_subcommand("filter", "Apply the dataset filtering rules; writes kept assets and rejects.csv");
  filter->add_option("in_dir", in_dir)->required();
  filter->add_option("--max-joints", rules.max_joints);
  filter->add_option("--align-distance", rules.alignment_distance);
  filter->add_option("--align-fraction", rules.alignment_fraction);
  filter->add_option("--min-vertices", rules.min_vertices);
  filter->add_option("--min-faces", rules.min_faces);
  add_globals(filter);

  auto* stats = app.add_subcommand("stats", "Category counts and joint-count histogram");
  stats->add_option("in_dir", in_dir)->required();
  add_globals(stats);

  std::string data_dir, loss_csv;
  int steps = 0;
  auto* train = app.add_subcommand("train", "Train a model; --out is the checkpoint path");
  train->add_option("data_dir", data_dir)->required();
  train->add_option("--loss-csv", loss_csv, "Loss curve CSV (default: <out>.loss.csv)");
  train->add_option("--steps", steps, "Override the configured step count");
  add_globals(train);

  RigOptions ro;
  auto* rigc = app.add_subcommand("rig", "Generate skeleton and skinning for meshes (.obj or .rig)");
  rigc->add_option("--ckpt", ro.ckpt)->required();
  rigc->add_option("meshes", ro.meshes)->required();
  rigc->add_option("--trace", ro.trace, "Per-step trace CSV (a directory for several meshes)");
  rigc->add_option("--max-joints", ro.max_joints);
  rigc->add_option("--sampling-steps", ro.sampling_steps);
  rigc->add_option("--parent-mode", ro.parent_mode, "argmax or sample");
  rigc->add_option("--temperature", ro.temperature);
  rigc->add_option("--clip", ro.clip, "Clamp of the implied clean joint while sampling (0 disables)");
  rigc->add_flag("--no-stop", ro.no_stop, "Ignore the stop signal and fill the capacity");
  rigc->add_flag("--no-kv-cache", ro.no_kv_cache, "Recompute the full sequence every step");
  add_globals(rigc);

  std::string pred_dir, gt_dir, json_path, eval_ckpt;
  MetricConfig metrics;
  auto* eval = app.add_subcommand("eval", "Compare predicted rigs with GT rigs; --out is the CSV");
  eval->add_option("--pred", pred_dir)->required();
  eval->add_option("--gt", gt_dir)->required();
  eval->add_option("--json", json_path, "Aggregate JSON (default: <out>.json)");
  eval->add_option("--ckpt", eval_ckpt, "Also report teacher-forced connectivity and skinning of this model");
  eval->add_option("--tau", metrics.match_threshold);
  eval->add_option("--bone-samples", metrics.bone_samples);
  eval->add_option("--influence-threshold", metrics.influence_threshold);
  add_globals(eval);

  std::string rig_path, pose_path;
  bool identity = false;
  auto* deform = app.add_subcommand("deform", "Pose a rigged mesh with linear blend skinning");
  deform->add_option("--rig", rig_path)->required();
  deform->add_option("--pose", pose_path, "Lines 'joint rx ry rz' (axis-angle, radians)");
  deform->add_flag("--identity", identity);
  add_globals(deform);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kHardError;
  }

  try {
    if (*synth) return cmd_synth(g, n, min_joints, max_joints);
    if (*filter) return cmd_filter(g, in_dir, rules);
    if (*stats) return cmd_stats(g, in_dir);
    if (*train) return cmd_train(g, data_dir, loss_csv, steps);
    if (*rigc) return cmd_rig(g, ro);
    if (*eval) return cmd_eval(g, pred_dir, gt_dir, json_path, eval_ckpt, metrics);
    if (*deform) return cmd_deform(g, rig_path, pose_path, identity);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kHardError;
  }
  return kHardError;
}
