// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// spine: command-line front end for scene generation, rendering, feature
// extraction, training, inversion and the experiment protocols.
//
// Relative output paths are placed under $SPINE_OUTPUT_ROOT (default: the
// working directory). Exit codes: 0 ok, 2 validation error, 3 experiment
// failure.

#include "spine/harness.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <functional>
#include <iostream>

namespace {

using namespace spine;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitFailure = 3;

fs::path output_root() {
  const char* env = std::getenv("SPINE_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path(".");
}

fs::path output_path(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : output_root() / path;
}

/// Accepts a dataset directory or the manifest file itself.
fs::path manifest_path(const std::string& p) {
  return fs::is_directory(p) ? fs::path(p) / "transforms.json" : fs::path(p);
}

struct QueryImage {
  RGBDImage image;
  LabelMap labels;
  CameraIntrinsics intrinsics;
  std::optional<PoseSE3> ground_truth;
};

/// Reads a query PNG and its depth and label sidecars. When a manifest next
/// to the image lists it, intrinsics and the ground-truth pose come from
/// there; otherwise intrinsics follow from the field of view.
QueryImage load_query_image(const fs::path& png, double fov_deg) {
  const std::string s = png.string();
  require(s.size() > 4 && s.ends_with(".png"), "invert: query must be a .png file");
  const std::string stem = s.substr(0, s.size() - 4);
  QueryImage q;
  q.image.rgb = read_png_unit(png);
  q.image.width = q.image.rgb.width;
  q.image.height = q.image.rgb.height;
  q.image.depth = read_depth_f32(stem + ".depth.f32", q.image.width, q.image.height);
  q.labels = read_label_png(stem + ".labels.png");
  require(q.labels.same_size(q.image.width, q.image.height), "invert: label sidecar size mismatch");
  q.intrinsics = CameraIntrinsics::from_fov(q.image.width, q.image.height, fov_deg);
  const fs::path manifest = png.parent_path() / "transforms.json";
  if (fs::exists(manifest)) {
    const DatasetManifest m = load_manifest(manifest, false);
    for (const auto& f : m.frames)
      if (fs::path(f.image).filename() == png.filename()) {
        q.intrinsics = f.intrinsics;
        q.ground_truth = f.pose;
      }
  }
  return q;
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

// Options shared by the experiment subcommands.
struct ExperimentOptions {
  std::string config;
  std::string out_dir;
  std::uint64_t seed = 0;
  int poses = 0;
  std::vector<std::string> backbones;
};

void add_experiment_options(CLI::App* app, ExperimentOptions& o) {
  app->add_option("--config", o.config, "experiment config JSON")->check(CLI::ExistingFile);
  app->add_option("--out-dir", o.out_dir, "output directory under the output root");
  app->add_option("--seed", o.seed, "evaluation pose seed");
  app->add_option("--poses", o.poses, "number of evaluation poses");
  app->add_option("--backbones", o.backbones, "backbones to evaluate (visual, geom, identity)");
}

ExperimentConfig resolve_config(const ExperimentOptions& o, const CLI::App* app) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (app->count("--seed")) c.pose_seed = o.seed;
  if (app->count("--out-dir")) c.output_dir = o.out_dir;
  if (o.poses > 0) {
    c.eval_poses = o.poses;
    c.query_poses = o.poses;
  }
  if (!o.backbones.empty()) c.backbones = o.backbones;
  c.validate();
  const fs::path dir = output_path(c.output_dir);
  fs::create_directories(dir);
  write_json(dir / "config.json", config_to_json(c));
  return c;
}

FeatureImage frame_features(const DatasetManifest& m, std::size_t i, BackboneKind kind, int dim,
                            std::uint64_t seed) {
  const LoadedFrame f = load_frame(m, i);
  return extract_features(f.image, f.labels, kind, dim, seed);
}

int run(int argc, char** argv) {
  CLI::App app{"SPINE semantic distillation and pose inversion"};
  app.require_subcommand(1);

  // gen-scene ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-scene", "generate a random Gaussian scene");
  std::string gen_out = "scene.json";
  std::uint64_t gen_seed = 0;
  SceneSpec gen_spec;
  gen->add_option("--out", gen_out, "scene JSON path");
  gen->add_option("--seed", gen_seed, "scene seed");
  gen->add_option("--primitives", gen_spec.primitive_count, "number of primitives");
  gen->add_option("--classes", gen_spec.class_count, "number of semantic classes");
  gen->callback([&] {
    const fs::path out = output_path(gen_out);
    save_scene(generate_scene(gen_spec, gen_seed), out);
    std::cout << out.string() << "\n";
  });

  // render ------------------------------------------------------------------
  auto* render = app.add_subcommand("render", "render an orbit dataset with a manifest");
  std::string r_scene, r_out = "dataset", r_conv = "opencv";
  std::uint64_t r_seed = 0;
  int r_poses = 8, r_size = 96;
  double r_fov = 55.0, r_radius = 3.2, r_el_min = 22.0, r_el_max = 38.0;
  render->add_option("--scene", r_scene, "scene JSON")->required()->check(CLI::ExistingFile);
  render->add_option("--out-dir", r_out, "dataset directory");
  render->add_option("--seed", r_seed, "pose sampling seed");
  render->add_option("--poses", r_poses, "number of views")->check(CLI::PositiveNumber);
  render->add_option("--size", r_size, "image width and height")->check(CLI::Range(16, 4096));
  render->add_option("--fov", r_fov, "horizontal field of view in degrees");
  render->add_option("--radius", r_radius, "orbit radius");
  render->add_option("--el-min", r_el_min, "minimum elevation in degrees");
  render->add_option("--el-max", r_el_max, "maximum elevation in degrees");
  render->add_option("--convention", r_conv, "manifest camera convention")
      ->check(CLI::IsMember({"opencv", "opengl"}));
  render->callback([&] {
    require(r_el_min <= r_el_max, "render: elevation range is empty");
    const Scene scene = load_scene(r_scene);
    const auto k = CameraIntrinsics::from_fov(r_size, r_size, r_fov);
    const auto poses = stratified_orbit_poses(r_poses, r_radius, r_el_min, r_el_max, r_seed);
    const fs::path dir = output_path(r_out);
    DatasetManifest m = render_dataset(scene, k, poses, dir);
    m.convention = r_conv == "opengl" ? CameraConvention::OpenGL : CameraConvention::OpenCV;
    save_manifest(m, dir / "transforms.json");
    std::cout << (dir / "transforms.json").string() << "\n";
  });

  // extract -----------------------------------------------------------------
  auto* extract = app.add_subcommand("extract", "run a backbone oracle on a dataset frame");
  std::string x_manifest, x_out = "features.bin", x_backbone = "geom", x_preview;
  std::size_t x_frame = 0;
  int x_dim = kDefaultFeatureDim;
  std::uint64_t x_seed = 1;
  extract->add_option("--views", x_manifest, "dataset directory or manifest")->required()->check(CLI::ExistingPath);
  extract->add_option("--frame", x_frame, "frame index");
  extract->add_option("--backbone", x_backbone, "visual or geom");
  extract->add_option("--dim", x_dim, "feature dimension")->check(CLI::PositiveNumber);
  extract->add_option("--seed", x_seed, "feature seed");
  extract->add_option("--out", x_out, "feature image path");
  extract->add_option("--preview", x_preview, "PCA preview PNG path");
  extract->callback([&] {
    const DatasetManifest m = load_manifest(manifest_path(x_manifest));
    const FeatureImage f = frame_features(m, x_frame, parse_backbone(x_backbone), x_dim, x_seed);
    save_feature_image(f, output_path(x_out));
    if (!x_preview.empty()) write_png8(output_path(x_preview), pca_project(f, 3).visualization());
    std::cout << output_path(x_out).string() << "\n";
  });

  // distill -----------------------------------------------------------------
  auto* distill = app.add_subcommand("distill", "distill oracle features into a semantic field");
  std::string d_manifest, d_scene, d_out = "field.ckpt", d_backbone = "visual";
  int d_iters = 2000, d_dim = kDefaultFeatureDim, d_ldim = kDefaultLanguageDim;
  std::uint64_t d_seed = 0, d_fseed = 1;
  distill->add_option("--views", d_manifest, "dataset directory or manifest")->required()->check(CLI::ExistingPath);
  distill->add_option("--scene", d_scene, "scene JSON (field bounds)")->required()->check(CLI::ExistingFile);
  distill->add_option("--backbone", d_backbone, "visual or geom");
  distill->add_option("--iters", d_iters, "optimizer steps")->check(CLI::PositiveNumber);
  distill->add_option("--dim", d_dim, "spatial feature dimension")->check(CLI::PositiveNumber);
  distill->add_option("--language-dim", d_ldim, "language feature dimension")->check(CLI::PositiveNumber);
  distill->add_option("--seed", d_seed, "training seed");
  distill->add_option("--feature-seed", d_fseed, "oracle feature seed");
  distill->add_option("--out", d_out, "checkpoint path");
  distill->callback([&] {
    const DatasetManifest m = load_manifest(manifest_path(d_manifest));
    const Scene scene = load_scene(d_scene);
    const BackboneKind kind = parse_backbone(d_backbone);
    std::vector<TrainingView> views;
    for (std::size_t i = 0; i < m.frames.size(); ++i) {
      const LoadedFrame f = load_frame(m, i);
      views.push_back({m.frames[i].pose, m.frames[i].intrinsics, f.image,
                       extract_features(f.image, f.labels, kind, d_dim, d_fseed),
                       extract_language_features(f.labels, d_ldim, d_fseed)});
    }
    FieldConfig fc;
    fc.grid.bounds = scene.bounds;
    fc.spatial_dim = d_dim;
    fc.language_dim = d_ldim;
    TrainConfig tc;
    tc.iterations = d_iters;
    tc.seed = d_seed;
    const TrainResult r = train_field(views, fc, tc);
    const json meta = {{"backbone", std::string(to_string(kind))}, {"feature_seed", d_fseed}};
    save_field(r.params, r.loss_trace, output_path(d_out), meta);
    std::cout << "loss " << format_number(r.initial.shifted(tc.weights)) << " -> "
              << format_number(r.final.shifted(tc.weights)) << "\n";
  });

  // train-inverse -----------------------------------------------------------
  auto* tinv = app.add_subcommand("train-inverse", "train the coarse pose regression model");
  std::string t_manifest, t_out = "inverse.ckpt", t_backbone = "geom";
  int t_iters = 1000, t_dim = kDefaultFeatureDim, t_components = 1;
  double t_lr = 3e-3;
  std::uint64_t t_seed = 0, t_fseed = 1;
  tinv->add_option("--views", t_manifest, "dataset directory or manifest")->required()->check(CLI::ExistingPath);
  tinv->add_option("--backbone", t_backbone, "visual or geom");
  tinv->add_option("--iters", t_iters, "optimizer steps")->check(CLI::PositiveNumber);
  tinv->add_option("--lr", t_lr, "learning rate");
  tinv->add_option("--components", t_components, "mixture components")->check(CLI::PositiveNumber);
  tinv->add_option("--dim", t_dim, "feature dimension")->check(CLI::PositiveNumber);
  tinv->add_option("--seed", t_seed, "training seed");
  tinv->add_option("--feature-seed", t_fseed, "oracle feature seed");
  tinv->add_option("--out", t_out, "checkpoint path");
  tinv->callback([&] {
    const DatasetManifest m = load_manifest(manifest_path(t_manifest));
    const BackboneKind kind = parse_backbone(t_backbone);
    std::vector<InverseSample> data;
    for (std::size_t i = 0; i < m.frames.size(); ++i)
      data.push_back({global_embedding(frame_features(m, i, kind, t_dim, t_fseed), kind),
                      m.frames[i].pose});
    InverseModelConfig mc;
    mc.components = t_components;
    InverseTrainConfig tc;
    tc.iterations = t_iters;
    tc.learning_rate = t_lr;
    tc.seed = t_seed;
    const InverseTrainResult r = train_inverse_model(data, mc, tc);
    const json meta = {{"backbone", std::string(to_string(kind))},
                       {"feature_dim", t_dim},
                       {"feature_seed", t_fseed}};
    save_inverse_model(r.params, r.loss_trace, output_path(t_out), meta);
    std::cout << "loss " << format_number(r.loss_trace.front()) << " -> "
              << format_number(r.loss_trace.back()) << "\n";
  });

  // invert ------------------------------------------------------------------
  auto* inv = app.add_subcommand("invert", "estimate the camera pose of a query image");
  std::string i_query, i_scene, i_model, i_field, i_out = "report.json";
  int i_rounds = 3;
  double i_fov = 55.0;
  std::uint64_t i_seed = 0;
  inv->add_option("--query", i_query, "query PNG with .depth.f32 and .labels.png sidecars")
      ->required()
      ->check(CLI::ExistingFile);
  inv->add_option("--scene", i_scene, "scene JSON")->required()->check(CLI::ExistingFile);
  inv->add_option("--inv-model", i_model, "inverse model checkpoint")->required()->check(CLI::ExistingFile);
  inv->add_option("--ckpt", i_field, "semantic field checkpoint for rendered-view features")
      ->check(CLI::ExistingFile);
  inv->add_option("--fov", i_fov, "horizontal field of view when no manifest lists the query");
  inv->add_option("--rounds", i_rounds, "maximum refinement rounds")->check(CLI::PositiveNumber);
  inv->add_option("--seed", i_seed, "RANSAC seed");
  inv->add_option("--report", i_out, "report JSON path");
  bool inv_failed = false;
  inv->callback([&] {
    const QueryImage qi = load_query_image(i_query, i_fov);
    const Scene scene = load_scene(i_scene);
    const Checkpoint ck = load_checkpoint(i_model, "inverse");
    const InverseModelParams model = inverse_from_checkpoint(ck, i_model);
    const json meta = ck.header.value("meta", json::object());
    const BackboneKind kind = parse_backbone(meta.value("backbone", std::string("geom")));
    const int dim = meta.value("feature_dim", kDefaultFeatureDim);
    const std::uint64_t fseed = meta.value("feature_seed", std::uint64_t{1});
    const FeatureImage query = extract_features(qi.image, qi.labels, kind, dim, fseed);

    std::optional<SemanticFieldParams> field;
    if (!i_field.empty()) field = load_field(i_field);
    const ViewSynthesizer synth = field ? field_synthesizer(scene, *field, qi.intrinsics)
                                        : oracle_synthesizer(scene, qi.intrinsics, kind, dim, fseed);
    InversionConfig ic;
    ic.max_rounds = i_rounds;
    ic.ransac.seed = i_seed;
    const InversionReport rep = invert(query, kind, model, synth, qi.intrinsics, ic, qi.ground_truth);
    write_json(output_path(i_out), inversion_report_json(rep));
    std::cout << to_string(rep.status) << " rot " << format_number(rep.fine_errors.rotation_deg)
              << " deg, trans " << format_number(rep.fine_errors.translation) << "\n";
    inv_failed = rep.status == InversionStatus::Failed;
  });

  // gff ---------------------------------------------------------------------
  auto* gffc = app.add_subcommand("gff", "edge fidelity sweep over thresholds");
  ExperimentOptions g_opts;
  add_experiment_options(gffc, g_opts);
  gffc->callback([&] {
    const ExperimentConfig c = resolve_config(g_opts, gffc);
    const GffExperimentResult r = run_gff_experiment(c);
    const fs::path dir = output_path(c.output_dir);
    r.csv.save(dir / "gff.csv");
    write_json(dir / "gff_plot.json", emit_plot_data(r.plot));
    std::cout << (dir / "gff.csv").string() << "\n";
  });

  // localize ----------------------------------------------------------------
  auto* loc = app.add_subcommand("localize", "semantic localization with distilled fields");
  ExperimentOptions l_opts;
  add_experiment_options(loc, l_opts);
  loc->callback([&] {
    const ExperimentConfig c = resolve_config(l_opts, loc);
    const LocalizationExperimentResult r = run_localization_experiment(c);
    const fs::path dir = output_path(c.output_dir);
    r.csv.save(dir / "localization.csv");
    write_json(dir / "localization_plot.json", emit_plot_data(r.plot));
    json summary = json::array();
    for (const auto& s : r.summary) {
      summary.push_back({{"backbone", s.backbone},
                         {"ssim_mean", s.ssim.mean},
                         {"ssim_std", s.ssim.std},
                         {"psnr_mean", s.psnr.mean},
                         {"psnr_std", s.psnr.std},
                         {"count", s.ssim.count}});
      std::cout << s.backbone << " ssim " << format_number(s.ssim.mean) << " psnr "
                << format_number(s.psnr.mean) << "\n";
    }
    write_json(dir / "localization_summary.json", summary);
  });

  // bench -------------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "pose inversion benchmark");
  ExperimentOptions b_opts;
  add_experiment_options(bench, b_opts);
  bench->callback([&] {
    const ExperimentConfig c = resolve_config(b_opts, bench);
    const BenchmarkResult r = run_inversion_benchmark(c);
    const fs::path dir = output_path(c.output_dir);
    r.csv.save(dir / "benchmark.csv");
    write_json(dir / "benchmark_summary.json", r.summary);
    PlotSeries s{"success_rate", {}, {}, {}};
    for (std::size_t i = 0; i < r.arms.size(); ++i) {
      s.x.push_back(static_cast<double>(i));
      s.y.push_back(r.arms[i].success_rate);
      s.y_err.push_back(0.0);
      std::cout << r.arms[i].arm << " success " << r.arms[i].successes << "/"
                << r.arms[i].queries << "\n";
    }
    write_json(dir / "benchmark_plot.json", emit_plot_data({s}));
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }
  return inv_failed ? kExitFailure : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const spine::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return kExitFailure;
  }
}
