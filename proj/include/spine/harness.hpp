// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifests, experiment configuration and the three experiment
// protocols (edge fidelity, semantic localization, pose inversion), with
// CSV and plot-data output.

#pragma once

#include "spine/checkpoint.hpp"
#include "spine/distill.hpp"
#include "spine/features.hpp"
#include "spine/gff.hpp"
#include "spine/io.hpp"
#include "spine/localization.hpp"
#include "spine/spine.hpp"

#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace spine {

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

enum class CameraConvention { OpenCV, OpenGL };

inline std::string_view to_string(CameraConvention c) {
  return c == CameraConvention::OpenCV ? "opencv" : "opengl";
}

/// Maps between OpenGL (y up, looking down -z) and OpenCV camera axes by
/// negating the camera y and z columns. The map is its own inverse.
inline PoseSE3 flip_yz(const PoseSE3& p) {
  Mat3 r = p.rotation.matrix();
  r.col(1) *= -1.0;
  r.col(2) *= -1.0;
  return {Rotation::unchecked(r), p.translation};
}

struct ManifestFrame {
  std::string image;                 // relative to the manifest directory
  std::optional<std::string> depth;  // raw float32, same size as the image
  std::optional<std::string> labels; // 16-bit label PNG
  PoseSE3 pose;                      // camera-to-world, OpenCV axes
  CameraIntrinsics intrinsics;
};

struct DatasetManifest {
  CameraConvention convention = CameraConvention::OpenCV;
  std::vector<ManifestFrame> frames;
  fs::path root;  // directory holding the manifest

  fs::path resolve(const std::string& rel) const { return root / rel; }
};

inline constexpr int kManifestVersion = 1;

/// Parses a manifest document. `root` resolves relative paths; when
/// `check_files` is set every referenced file must exist.
inline DatasetManifest manifest_from_json(const json& j, const fs::path& root, bool check_files) {
  if (!j.is_object()) throw ParseError("manifest", "expected a JSON object");
  if (j.value("schema", "") != "spine.manifest")
    throw ParseError("manifest.schema", "expected 'spine.manifest'");
  if (!j.contains("version") || !j["version"].is_number_integer() ||
      j["version"].get<int>() != kManifestVersion)
    throw ParseError("manifest.version", "unsupported schema version");
  DatasetManifest m;
  m.root = root;
  const std::string conv = j.value("convention", "opencv");
  if (conv == "opencv") {
    m.convention = CameraConvention::OpenCV;
  } else if (conv == "opengl") {
    m.convention = CameraConvention::OpenGL;
  } else {
    throw ParseError("manifest.convention", "expected 'opencv' or 'opengl', got '" + conv + "'");
  }
  std::optional<CameraIntrinsics> shared;
  if (j.contains("intrinsics")) shared = intrinsics_from_json(j["intrinsics"], "manifest.intrinsics");
  if (!j.contains("frames") || !j["frames"].is_array())
    throw ParseError("manifest.frames", "expected an array of frames");

  const json& frames = j["frames"];
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string at = "frames[" + std::to_string(i) + "]";
    const json& f = frames[i];
    if (!f.is_object()) throw ParseError(at, "expected an object");
    ManifestFrame fr;
    if (!f.contains("file_path") || !f["file_path"].is_string())
      throw ParseError(at + ".file_path", "missing image path");
    fr.image = f["file_path"].get<std::string>();
    auto optional_path = [&](const char* key) -> std::optional<std::string> {
      if (!f.contains(key)) return std::nullopt;
      if (!f[key].is_string()) throw ParseError(at + "." + key, "expected a string");
      return f[key].get<std::string>();
    };
    fr.depth = optional_path("depth_path");
    fr.labels = optional_path("label_path");
    if (!f.contains("transform_matrix")) throw ParseError(at + ".transform_matrix", "missing transform");
    const PoseSE3 raw = pose_from_json(f["transform_matrix"], at + ".transform_matrix");
    fr.pose = m.convention == CameraConvention::OpenGL ? flip_yz(raw) : raw;
    if (f.contains("intrinsics")) {
      fr.intrinsics = intrinsics_from_json(f["intrinsics"], at + ".intrinsics");
    } else if (shared) {
      fr.intrinsics = *shared;
    } else {
      throw ParseError(at + ".intrinsics", "no per-frame or shared intrinsics");
    }
    if (check_files) {
      auto exists = [&](const std::optional<std::string>& p, const char* key) {
        if (p && !fs::exists(root / *p))
          throw ParseError(at + "." + key, "file not found: " + (root / *p).string());
      };
      exists(fr.image, "file_path");
      exists(fr.depth, "depth_path");
      exists(fr.labels, "label_path");
    }
    m.frames.push_back(std::move(fr));
  }
  return m;
}

inline DatasetManifest load_manifest(const fs::path& path, bool check_files = true) {
  const json j = parse_json(read_text_file(path), path.string());
  return manifest_from_json(j, path.parent_path(), check_files);
}

/// Writes poses back in the manifest's own convention.
inline json manifest_to_json(const DatasetManifest& m) {
  json frames = json::array();
  for (const auto& f : m.frames) {
    json o = {{"file_path", f.image},
              {"transform_matrix",
               pose_json(m.convention == CameraConvention::OpenGL ? flip_yz(f.pose) : f.pose)},
              {"intrinsics", intrinsics_json(f.intrinsics)}};
    if (f.depth) o["depth_path"] = *f.depth;
    if (f.labels) o["label_path"] = *f.labels;
    frames.push_back(o);
  }
  return {{"schema", "spine.manifest"},
          {"version", kManifestVersion},
          {"convention", std::string(to_string(m.convention))},
          {"frames", frames}};
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  write_text_file(path, manifest_to_json(m).dump(2));
}

struct LoadedFrame {
  RGBDImage image;
  LabelMap labels;
};

/// Reads a frame's RGB, depth and labels. Depth and labels are required.
inline LoadedFrame load_frame(const DatasetManifest& m, std::size_t index) {
  require(index < m.frames.size(), "load_frame: frame index out of range");
  const ManifestFrame& f = m.frames[index];
  const std::string at = "frames[" + std::to_string(index) + "]";
  if (!f.depth) throw ParseError(at + ".depth_path", "frame has no depth");
  if (!f.labels) throw ParseError(at + ".label_path", "frame has no labels");
  LoadedFrame out;
  out.image.rgb = read_png_unit(m.resolve(f.image));
  out.image.width = out.image.rgb.width;
  out.image.height = out.image.rgb.height;
  if (out.image.width != f.intrinsics.width || out.image.height != f.intrinsics.height)
    throw ParseError(at + ".file_path", "image size does not match the intrinsics");
  out.image.depth = read_depth_f32(m.resolve(*f.depth), out.image.width, out.image.height);
  out.labels = read_label_png(m.resolve(*f.labels));
  if (!out.labels.same_size(out.image.width, out.image.height))
    throw ParseError(at + ".label_path", "label image size does not match");
  return out;
}

/// Renders every pose and writes frame_NNNN.{png,depth.f32,labels.png}
/// plus transforms.json into `dir`.
inline DatasetManifest render_dataset(const Scene& scene, const CameraIntrinsics& k,
                                      const std::vector<PoseSE3>& poses, const fs::path& dir) {
  fs::create_directories(dir);
  DatasetManifest m;
  m.root = dir;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "frame_%04zu", i);
    const RenderOutput r = render_full(scene, k, poses[i]);
    ManifestFrame f{std::string(stem) + ".png", std::string(stem) + ".depth.f32",
                    std::string(stem) + ".labels.png", poses[i], k};
    write_png8(dir / f.image, r.image.rgb);
    write_depth_f32(dir / *f.depth, r.image.depth);
    write_label_png(dir / *f.labels, r.labels);
    m.frames.push_back(f);
  }
  save_manifest(m, dir / "transforms.json");
  return m;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

inline constexpr int kExperimentConfigVersion = 1;

struct ExperimentConfig {
  std::string scene_name = "default";
  std::optional<std::string> scene_path;  // load instead of generating
  std::uint64_t scene_seed = 0;
  int primitives = 24;
  int classes = 8;

  std::vector<std::string> backbones{"visual", "geom"};
  std::vector<std::string> representations{"oracle"};
  int image_size = 96;
  double fov_deg = 55.0;
  double orbit_radius = 3.2;
  double elevation_min = 22.0;
  double elevation_max = 38.0;
  int eval_poses = 100;
  std::vector<double> thresholds = default_gff_thresholds();

  std::uint64_t feature_seed = 1;
  std::uint64_t pose_seed = 7;
  std::uint64_t train_seed = 0;
  int feature_dim = kDefaultFeatureDim;
  int language_dim = kDefaultLanguageDim;

  // Distillation (localization and field representations).
  int distill_views = 4;
  int distill_iterations = 2000;
  int distill_image_size = 128;

  // Inversion benchmark.
  std::string bench_backbone = "geom";
  int train_poses = 32;
  int query_poses = 16;
  int inverse_iterations = 1000;
  double inverse_learning_rate = 3e-3;
  int inverse_components = 1;
  double low_init_rot_deg = 30.0;
  double low_init_trans = 0.5;
  double medium_init_rot_deg = 100.0;
  double medium_init_trans = 1.0;
  double success_rot_deg = 5.0;
  double success_trans = 0.1;

  std::string output_dir = "out";

  void validate() const {
    require(eval_poses >= 1 && query_poses >= 1 && train_poses >= 1, "config: pose counts must be >= 1");
    require(image_size >= 16 && distill_image_size >= 16, "config: image size must be >= 16");
    require(fov_deg > 0.0 && fov_deg < 180.0, "config: fov must lie in (0, 180)");
    require(orbit_radius > 0.0, "config: orbit radius must be positive");
    require(elevation_min <= elevation_max, "config: elevation range is empty");
    require(distill_views >= 2, "config: distillation needs at least two views");
    require(!backbones.empty(), "config: at least one backbone is required");
    for (const auto& b : backbones)
      if (b != "identity") parse_backbone(b);
    parse_backbone(bench_backbone);
    for (const auto& r : representations)
      require(r == "oracle" || r == "field", "config: representation must be 'oracle' or 'field'");
    for (double t : thresholds) require(t >= 0.0 && t <= 1.0, "config: thresholds must lie in [0,1]");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
      require(thresholds[i] >= thresholds[i - 1], "config: thresholds must be ascending");
  }
};

inline json config_to_json(const ExperimentConfig& c) {
  json j = {{"schema", "spine.experiment"},
            {"version", kExperimentConfigVersion},
            {"scene_name", c.scene_name},
            {"scene_seed", c.scene_seed},
            {"primitives", c.primitives},
            {"classes", c.classes},
            {"backbones", c.backbones},
            {"representations", c.representations},
            {"image_size", c.image_size},
            {"fov_deg", c.fov_deg},
            {"orbit_radius", c.orbit_radius},
            {"elevation_min", c.elevation_min},
            {"elevation_max", c.elevation_max},
            {"eval_poses", c.eval_poses},
            {"thresholds", c.thresholds},
            {"feature_seed", c.feature_seed},
            {"pose_seed", c.pose_seed},
            {"train_seed", c.train_seed},
            {"feature_dim", c.feature_dim},
            {"language_dim", c.language_dim},
            {"distill_views", c.distill_views},
            {"distill_iterations", c.distill_iterations},
            {"distill_image_size", c.distill_image_size},
            {"bench_backbone", c.bench_backbone},
            {"train_poses", c.train_poses},
            {"query_poses", c.query_poses},
            {"inverse_iterations", c.inverse_iterations},
            {"inverse_learning_rate", c.inverse_learning_rate},
            {"inverse_components", c.inverse_components},
            {"low_init_rot_deg", c.low_init_rot_deg},
            {"low_init_trans", c.low_init_trans},
            {"medium_init_rot_deg", c.medium_init_rot_deg},
            {"medium_init_trans", c.medium_init_trans},
            {"success_rot_deg", c.success_rot_deg},
            {"success_trans", c.success_trans},
            {"output_dir", c.output_dir}};
  if (c.scene_path) j["scene_path"] = *c.scene_path;
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("config", "expected a JSON object");
  if (j.value("schema", "spine.experiment") != "spine.experiment")
    throw ParseError("config.schema", "expected 'spine.experiment'");
  if (j.value("version", kExperimentConfigVersion) != kExperimentConfigVersion)
    throw ParseError("config.version", "unsupported schema version");
  ExperimentConfig c;
  const json known = config_to_json(c);
  for (const auto& [key, value] : j.items())
    if (key != "scene_path" && !known.contains(key)) throw ParseError("config." + key, "unknown key");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception& e) {
      throw ParseError(std::string("config.") + key, e.what());
    }
  };
  get("scene_name", c.scene_name);
  if (j.contains("scene_path")) {
    std::string p;
    get("scene_path", p);
    c.scene_path = p;
  }
  get("scene_seed", c.scene_seed);
  get("primitives", c.primitives);
  get("classes", c.classes);
  get("backbones", c.backbones);
  get("representations", c.representations);
  get("image_size", c.image_size);
  get("fov_deg", c.fov_deg);
  get("orbit_radius", c.orbit_radius);
  get("elevation_min", c.elevation_min);
  get("elevation_max", c.elevation_max);
  get("eval_poses", c.eval_poses);
  get("thresholds", c.thresholds);
  get("feature_seed", c.feature_seed);
  get("pose_seed", c.pose_seed);
  get("train_seed", c.train_seed);
  get("feature_dim", c.feature_dim);
  get("language_dim", c.language_dim);
  get("distill_views", c.distill_views);
  get("distill_iterations", c.distill_iterations);
  get("distill_image_size", c.distill_image_size);
  get("bench_backbone", c.bench_backbone);
  get("train_poses", c.train_poses);
  get("query_poses", c.query_poses);
  get("inverse_iterations", c.inverse_iterations);
  get("inverse_learning_rate", c.inverse_learning_rate);
  get("inverse_components", c.inverse_components);
  get("low_init_rot_deg", c.low_init_rot_deg);
  get("low_init_trans", c.low_init_trans);
  get("medium_init_rot_deg", c.medium_init_rot_deg);
  get("medium_init_trans", c.medium_init_trans);
  get("success_rot_deg", c.success_rot_deg);
  get("success_trans", c.success_trans);
  get("output_dir", c.output_dir);
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError("config", e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  return config_from_json(parse_json(read_text_file(path), path.string()));
}

inline Scene experiment_scene(const ExperimentConfig& c) {
  if (c.scene_path) return load_scene(*c.scene_path);
  SceneSpec spec;
  spec.primitive_count = c.primitives;
  spec.class_count = c.classes;
  return generate_scene(spec, c.scene_seed);
}

inline CameraIntrinsics experiment_intrinsics(const ExperimentConfig& c, int size) {
  return CameraIntrinsics::from_fov(size, size, c.fov_deg);
}

/// Orbit poses with one azimuth per equal-width bin (jittered inside the
/// bin) and elevation uniform in the configured band.
inline std::vector<PoseSE3> stratified_orbit_poses(int count, double radius, double el_min,
                                                   double el_max, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PoseSE3> out;
  const double bin = 360.0 / count;
  for (int i = 0; i < count; ++i) {
    const double az = (i + rng.uniform()) * bin;
    const double el = rng.uniform(el_min, el_max);
    out.push_back(orbit_pose(az, el, radius));
  }
  return out;
}

/// Evenly spaced azimuths alternating between the two ends of the
/// elevation band.
inline std::vector<PoseSE3> training_orbit_poses(int count, double radius, double el_min,
                                                 double el_max) {
  std::vector<PoseSE3> out;
  for (int i = 0; i < count; ++i)
    out.push_back(orbit_pose(i * 360.0 / count, i % 2 ? el_min : el_max, radius));
  return out;
}

/// Distillation views: evenly spaced azimuths at the middle elevation.
inline std::vector<PoseSE3> distill_orbit_poses(int count, double radius, double elevation) {
  std::vector<PoseSE3> out;
  for (int i = 0; i < count; ++i) out.push_back(orbit_pose(i * 360.0 / count, elevation, radius));
  return out;
}

// ---------------------------------------------------------------------------
// CSV and plot data
// ---------------------------------------------------------------------------

/// Shortest round-trip-safe decimal for a double; "nan" for NaN.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  for (int prec = 6; prec < 17; ++prec) {
    char shorter[32];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
    if (std::strtod(shorter, nullptr) == v) return shorter;
  }
  return buf;
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(std::vector<std::string> row) {
    require(row.size() == header_.size(), "csv: row width does not match the header");
    rows_.push_back(std::move(row));
  }

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  void save(const fs::path& path) const { write_text_file(path, str()); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> y_err;
};

/// {"series": [{name, x, y, y_err}, ...]}; NaN values become null.
inline json emit_plot_data(const std::vector<PlotSeries>& series) {
  auto arr = [](const std::vector<double>& v) {
    json a = json::array();
    for (double d : v) a.push_back(std::isfinite(d) ? json(d) : json(nullptr));
    return a;
  };
  json out = {{"series", json::array()}};
  for (const auto& s : series)
    out["series"].push_back({{"name", s.name}, {"x", arr(s.x)}, {"y", arr(s.y)}, {"y_err", arr(s.y_err)}});
  return out;
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
};

/// Mean and population standard deviation over the finite entries.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  double s = 0.0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++r.count;
    }
  if (r.count == 0) return r;
  r.mean = s / static_cast<double>(r.count);
  double ss = 0.0;
  for (double x : v)
    if (std::isfinite(x)) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(r.count));
  return r;
}

// ---------------------------------------------------------------------------
// Shared experiment pieces
// ---------------------------------------------------------------------------

/// Renders the distillation views, extracts oracle features and trains a
/// field for one backbone.
inline TrainResult distill_for_backbone(const Scene& scene, const ExperimentConfig& c,
                                        BackboneKind kind) {
  const CameraIntrinsics k = experiment_intrinsics(c, c.distill_image_size);
  std::vector<TrainingView> views;
  for (const PoseSE3& p : distill_orbit_poses(c.distill_views, c.orbit_radius,
                                              0.5 * (c.elevation_min + c.elevation_max))) {
    const RenderOutput r = render_full(scene, k, p);
    views.push_back({p, k, r.image,
                     extract_features(r.image, r.labels, kind, c.feature_dim, c.feature_seed),
                     extract_language_features(r.labels, c.language_dim, c.feature_seed)});
  }
  FieldConfig fc;
  fc.grid.bounds = scene.bounds;
  fc.spatial_dim = c.feature_dim;
  fc.language_dim = c.language_dim;
  TrainConfig tc;
  tc.iterations = c.distill_iterations;
  tc.seed = c.train_seed;
  return train_field(views, fc, tc);
}

// ---------------------------------------------------------------------------
// Edge fidelity experiment
// ---------------------------------------------------------------------------

struct GffRow {
  std::string backbone;
  std::string representation;
  double threshold = 0.0;
  std::size_t edges_sem = 0;  // summed over poses
  std::size_t edges_rgb = 0;
  MeanStd gff;                // over poses where it is defined
};

struct GffExperimentResult {
  std::vector<GffRow> rows;
  CsvTable csv{{"scene", "backbone", "representation", "threshold", "edges_sem", "edges_rgb", "gff"}};
  std::vector<PlotSeries> plot;
};

/// For every backbone and representation: render each evaluation pose,
/// build the semantic image, PCA to three channels and sweep the thresholds.
/// The "identity" backbone uses the RGB image itself as a control.
inline GffExperimentResult run_gff_experiment(const ExperimentConfig& c) {
  c.validate();
  const Scene scene = experiment_scene(c);
  const CameraIntrinsics k = experiment_intrinsics(c, c.image_size);
  const auto poses = stratified_orbit_poses(c.eval_poses, c.orbit_radius, c.elevation_min,
                                            c.elevation_max, c.pose_seed);
  std::vector<RenderOutput> renders;
  for (const auto& p : poses) renders.push_back(render_full(scene, k, p));

  GffExperimentResult res;
  for (const auto& bname : c.backbones) {
    for (const auto& rep : c.representations) {
      const bool identity = bname == "identity";
      if (identity && rep != "oracle") continue;
      std::optional<SemanticFieldParams> field;
      if (rep == "field") field = distill_for_backbone(scene, c, parse_backbone(bname)).params;

      const std::size_t nt = c.thresholds.size();
      std::vector<std::vector<double>> per_pose(nt);
      std::vector<std::size_t> sem(nt, 0), rgb(nt, 0);
      for (std::size_t i = 0; i < poses.size(); ++i) {
        const RenderOutput& r = renders[i];
        ImageD sem_img;
        if (identity) {
          sem_img = r.image.rgb;
        } else {
          const FeatureImage f =
              field ? render_semantic_image(*field, r.image, k, poses[i]).spatial
                    : extract_features(r.image, r.labels, parse_backbone(bname), c.feature_dim,
                                       c.feature_seed);
          sem_img = pca_project(f, 3).projection;
        }
        const auto curve = gff_curve(sem_img, r.image.rgb, c.thresholds);
        for (std::size_t t = 0; t < nt; ++t) {
          sem[t] += curve[t].edges_sem;
          rgb[t] += curve[t].edges_rgb;
          per_pose[t].push_back(curve[t].gff);
        }
      }
      PlotSeries s{bname + "/" + rep, {}, {}, {}};
      for (std::size_t t = 0; t < nt; ++t) {
        GffRow row{bname, rep, c.thresholds[t], sem[t], rgb[t], mean_std(per_pose[t])};
        res.csv.add({c.scene_name, bname, rep, format_number(row.threshold),
                     std::to_string(row.edges_sem), std::to_string(row.edges_rgb),
                     format_number(row.gff.mean)});
        s.x.push_back(row.threshold);
        s.y.push_back(row.gff.mean);
        s.y_err.push_back(row.gff.std);
        res.rows.push_back(row);
      }
      res.plot.push_back(s);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Localization experiment
// ---------------------------------------------------------------------------

struct LocalizationExperimentResult {
  CsvTable csv{{"scene", "backbone", "representation", "pose_id", "class", "ssim", "psnr"}};
  std::vector<PlotSeries> plot;  // per backbone: x = class, y = mean SSIM / PSNR
  struct Summary {
    std::string backbone;
    MeanStd ssim;
    MeanStd psnr;
  };
  std::vector<Summary> summary;
};

inline LocalizationExperimentResult run_localization_experiment(const ExperimentConfig& c) {
  c.validate();
  const Scene scene = experiment_scene(c);
  const CameraIntrinsics k = experiment_intrinsics(c, c.image_size);
  const auto poses = stratified_orbit_poses(c.eval_poses, c.orbit_radius, c.elevation_min,
                                            c.elevation_max, c.pose_seed);
  LocalizationExperimentResult res;
  for (const auto& bname : c.backbones) {
    if (bname == "identity") continue;
    const SemanticFieldParams field = distill_for_backbone(scene, c, parse_backbone(bname)).params;
    const auto rows = evaluate_localization(field, scene, k, poses, c.feature_seed);
    std::vector<double> ssims, psnrs;
    const int classes = scene.class_count();
    std::vector<std::vector<double>> by_class_ssim(classes), by_class_psnr(classes);
    for (const auto& r : rows) {
      res.csv.add({c.scene_name, bname, "field", std::to_string(r.pose_id), std::to_string(r.label),
                   format_number(r.ssim), format_number(r.psnr)});
      ssims.push_back(r.ssim);
      psnrs.push_back(r.psnr);
      by_class_ssim[r.label].push_back(r.ssim);
      by_class_psnr[r.label].push_back(r.psnr);
    }
    res.summary.push_back({bname, mean_std(ssims), mean_std(psnrs)});
    PlotSeries ss{bname + "/ssim", {}, {}, {}}, ps{bname + "/psnr", {}, {}, {}};
    for (int cl = 0; cl < classes; ++cl) {
      const MeanStd a = mean_std(by_class_ssim[cl]), b = mean_std(by_class_psnr[cl]);
      ss.x.push_back(cl);
      ss.y.push_back(a.mean);
      ss.y_err.push_back(a.std);
      ps.x.push_back(cl);
      ps.y.push_back(b.mean);
      ps.y_err.push_back(b.std);
    }
    res.plot.push_back(ss);
    res.plot.push_back(ps);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Inversion report
// ---------------------------------------------------------------------------

inline json pose_errors_json(const PoseErrors& e) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"rotation_deg", num(e.rotation_deg)}, {"translation", num(e.translation)}};
}

/// Poses are camera-to-world 4x4 matrices in OpenCV axes; absent poses and
/// errors are null.
inline json inversion_report_json(const InversionReport& r) {
  auto opt_pose = [](const std::optional<PoseSE3>& p) { return p ? pose_json(*p) : json(nullptr); };
  const bool failed = r.status == InversionStatus::Failed;
  return {{"schema", "spine.inversion_report"},
          {"version", 1},
          {"status", std::string(to_string(r.status))},
          {"coarse_pose", failed ? json(nullptr) : pose_json(r.coarse)},
          {"fine_pose", opt_pose(r.fine)},
          {"ground_truth", opt_pose(r.ground_truth)},
          {"coarse_errors", pose_errors_json(r.coarse_errors)},
          {"fine_errors", pose_errors_json(r.fine_errors)},
          {"inliers", r.inliers},
          {"matches", r.matches},
          {"rounds", r.rounds},
          {"message", r.message}};
}

// ---------------------------------------------------------------------------
// Inversion benchmark
// ---------------------------------------------------------------------------

struct BenchmarkRecord {
  std::string arm;
  int pose_id = 0;
  PoseErrors init;   // NaN for the SPINE arm (no initial guess)
  PoseErrors coarse; // the starting estimate of the fine stage
  PoseErrors fine;
  InversionStatus status = InversionStatus::Failed;
  int inliers = 0;
  int matches = 0;
  int rounds = 0;
  bool success = false;
};

struct ArmSummary {
  std::string arm;
  double init_rot_deg = 0.0;
  double init_trans = 0.0;
  int queries = 0;
  int fine_ok = 0;
  int successes = 0;
  double success_rate = 0.0;
  int improved = 0;  // fine-ok cases with both errors strictly below the start
  MeanStd rot_all, trans_all;  // over fine-ok queries
  MeanStd rot_ok, trans_ok;    // over successful queries
};

struct BenchmarkResult {
  std::vector<BenchmarkRecord> records;
  std::vector<ArmSummary> arms;
  CsvTable csv{{"scene", "backbone", "arm", "pose_id", "init_rot_deg", "init_trans",
                "start_rot_deg", "start_trans", "fine_rot_deg", "fine_trans", "status",
                "inliers", "matches", "rounds", "success"}};
  json summary;

  const ArmSummary& arm(const std::string& name) const {
    for (const auto& a : arms)
      if (a.arm == name) return a;
    throw InvalidArgument("benchmark: unknown arm '" + name + "'");
  }
};

inline ArmSummary summarize_arm(const std::string& name, double rot, double trans,
                                const std::vector<BenchmarkRecord>& recs) {
  ArmSummary s{name, rot, trans};
  std::vector<double> ra, ta, ro, to;
  for (const auto& r : recs) {
    if (r.arm != name) continue;
    ++s.queries;
    if (r.status != InversionStatus::FineOk) continue;
    ++s.fine_ok;
    ra.push_back(r.fine.rotation_deg);
    ta.push_back(r.fine.translation);
    if (r.fine.rotation_deg < r.coarse.rotation_deg && r.fine.translation < r.coarse.translation)
      ++s.improved;
    if (r.success) {
      ++s.successes;
      ro.push_back(r.fine.rotation_deg);
      to.push_back(r.fine.translation);
    }
  }
  s.success_rate = s.queries ? static_cast<double>(s.successes) / s.queries : 0.0;
  s.rot_all = mean_std(ra);
  s.trans_all = mean_std(ta);
  s.rot_ok = mean_std(ro);
  s.trans_ok = mean_std(to);
  return s;
}

inline json arm_summary_json(const ArmSummary& a) {
  auto ms = [](const MeanStd& m) {
    return json{{"mean", std::isfinite(m.mean) ? json(m.mean) : json(nullptr)},
                {"std", std::isfinite(m.std) ? json(m.std) : json(nullptr)},
                {"count", m.count}};
  };
  return {{"arm", a.arm},
          {"init_rot_deg", a.init_rot_deg},
          {"init_trans", a.init_trans},
          {"queries", a.queries},
          {"fine_ok", a.fine_ok},
          {"successes", a.successes},
          {"success_rate", a.success_rate},
          {"improved", a.improved},
          {"fine_rot_deg_unfiltered", ms(a.rot_all)},
          {"fine_trans_unfiltered", ms(a.trans_all)},
          {"fine_rot_deg_successful", ms(a.rot_ok)},
          {"fine_trans_successful", ms(a.trans_ok)}};
}

inline constexpr const char* kArmSpine = "spine";
inline constexpr const char* kArmLowInit = "baseline-low";
inline constexpr const char* kArmMediumInit = "baseline-medium";

/// Trains the inverse model on rendered training poses, then runs three arms
/// per query: SPINE (coarse model, no initial guess) and the refinement
/// stage alone from low- and medium-error perturbations of the truth.
inline BenchmarkResult run_inversion_benchmark(const ExperimentConfig& c) {
  c.validate();
  const Scene scene = experiment_scene(c);
  const CameraIntrinsics k = experiment_intrinsics(c, c.image_size);
  const BackboneKind kind = parse_backbone(c.bench_backbone);
  auto features = [&](const RenderOutput& r) {
    return extract_features(r.image, r.labels, kind, c.feature_dim, c.feature_seed);
  };

  std::vector<InverseSample> train;
  for (const PoseSE3& p :
       training_orbit_poses(c.train_poses, c.orbit_radius, c.elevation_min, c.elevation_max))
    train.push_back({global_embedding(features(render_full(scene, k, p)), kind), p});
  InverseModelConfig mc;
  mc.components = c.inverse_components;
  InverseTrainConfig tc;
  tc.iterations = c.inverse_iterations;
  tc.learning_rate = c.inverse_learning_rate;
  tc.seed = c.train_seed;
  const InverseModelParams model = train_inverse_model(train, mc, tc).params;

  const ViewSynthesizer synth = oracle_synthesizer(scene, k, kind, c.feature_dim, c.feature_seed);
  InversionConfig ic;
  ic.ransac.seed = derive_seed(c.pose_seed, 0x5A);
  const auto queries = stratified_orbit_poses(c.query_poses, c.orbit_radius, c.elevation_min,
                                              c.elevation_max, derive_seed(c.pose_seed, 0x0E));

  BenchmarkResult res;
  auto success = [&](const PoseErrors& e) {
    return e.rotation_deg < c.success_rot_deg && e.translation < c.success_trans;
  };
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const PoseSE3& gt = queries[q];
    const FeatureImage qf = features(render_full(scene, k, gt));
    const int id = static_cast<int>(q);

    const InversionReport rep = invert(qf, kind, model, synth, k, ic, gt);
    BenchmarkRecord spine{kArmSpine, id, {}, rep.coarse_errors, rep.fine_errors, rep.status,
                          rep.inliers, rep.matches, rep.rounds, false};
    spine.success = rep.status == InversionStatus::FineOk && success(rep.fine_errors);
    res.records.push_back(spine);

    auto baseline = [&](const char* arm, double rot, double trans, std::uint64_t tag) {
      const PoseSE3 init = perturb_pose(gt, rot, trans, derive_seed(c.pose_seed, tag + q));
      const RefineResult rr = refine_pose(qf, synth, k, init, ic);
      BenchmarkRecord b{arm, id, pose_errors(init, gt), pose_errors(init, gt), {},
                        rr.pose ? InversionStatus::FineOk : InversionStatus::CoarseOnly,
                        rr.inliers, rr.matches, rr.rounds, false};
      if (rr.pose) b.fine = pose_errors(*rr.pose, gt);
      b.success = rr.pose && success(b.fine);
      res.records.push_back(b);
    };
    baseline(kArmLowInit, c.low_init_rot_deg, c.low_init_trans, 0x10000);
    baseline(kArmMediumInit, c.medium_init_rot_deg, c.medium_init_trans, 0x20000);
  }

  // Deterministic row order: arm, then pose id.
  for (const char* arm : {kArmSpine, kArmLowInit, kArmMediumInit})
    for (const auto& r : res.records) {
      if (r.arm != arm) continue;
      res.csv.add({c.scene_name, c.bench_backbone, r.arm, std::to_string(r.pose_id),
                   format_number(r.init.rotation_deg), format_number(r.init.translation),
                   format_number(r.coarse.rotation_deg), format_number(r.coarse.translation),
                   format_number(r.fine.rotation_deg), format_number(r.fine.translation),
                   std::string(to_string(r.status)), std::to_string(r.inliers),
                   std::to_string(r.matches), std::to_string(r.rounds), r.success ? "1" : "0"});
    }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  res.arms = {summarize_arm(kArmSpine, nan, nan, res.records),
              summarize_arm(kArmLowInit, c.low_init_rot_deg, c.low_init_trans, res.records),
              summarize_arm(kArmMediumInit, c.medium_init_rot_deg, c.medium_init_trans, res.records)};
  res.summary = {{"schema", "spine.benchmark"},
                 {"version", 1},
                 {"scene", c.scene_name},
                 {"backbone", c.bench_backbone},
                 {"success_rot_deg", c.success_rot_deg},
                 {"success_trans", c.success_trans},
                 {"arms", json::array()}};
  for (const auto& a : res.arms) {
    json j = arm_summary_json(a);
    if (a.arm == kArmSpine) {
      j["init_rot_deg"] = nullptr;
      j["init_trans"] = nullptr;
    }
    res.summary["arms"].push_back(j);
  }
  return res;
}

}  // namespace spine
