// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Drives the spine executable end to end through a shell.

#include "spine/checkpoint.hpp"
#include "spine/harness.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <string>

using namespace spine;

namespace {

const fs::path& root() {
  static const fs::path r = [] {
    fs::path p = fs::temp_directory_path() / "spine_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    ::setenv("SPINE_OUTPUT_ROOT", p.c_str(), 1);
    return p;
  }();
  return r;
}

int run(const std::string& args) {
  root();
  const std::string cmd = std::string(SPINE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string at(const std::string& rel) { return (root() / rel).string(); }

// Scene plus a small rendered dataset shared by the tests below.
void ensure_dataset() {
  static const bool done = [] {
    EXPECT_EQ(run("gen-scene --seed 0 --out scene.json"), 0);
    EXPECT_EQ(run("render --scene " + at("scene.json") + " --out-dir data --poses 6 --size 48 --seed 2"), 0);
    return true;
  }();
  (void)done;
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("render"), 2);
  EXPECT_EQ(run("render --scene /nonexistent/scene.json"), 2);
  EXPECT_EQ(run("gen-scene --seed notanumber"), 2);
}

TEST(Cli, EverySubcommandAcceptsSeed) {
  for (const char* sub : {"gen-scene", "render", "extract", "distill", "train-inverse", "gff",
                          "localize", "invert", "bench"}) {
    const std::string cmd = std::string(SPINE_CLI_PATH) + " " + sub + " --help";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    ASSERT_NE(pipe, nullptr);
    std::string text;
    char buf[512];
    while (std::fgets(buf, sizeof buf, pipe)) text += buf;
    EXPECT_EQ(::pclose(pipe), 0) << sub;
    EXPECT_NE(text.find("--seed"), std::string::npos) << sub;
  }
}

TEST(Cli, GenSceneIsDeterministicUnderOutputRoot) {
  ASSERT_EQ(run("gen-scene --seed 5 --out a.json"), 0);
  ASSERT_EQ(run("gen-scene --seed 5 --out b.json"), 0);
  ASSERT_EQ(run("gen-scene --seed 6 --out c.json"), 0);
  EXPECT_EQ(read_text_file(root() / "a.json"), read_text_file(root() / "b.json"));
  EXPECT_NE(read_text_file(root() / "a.json"), read_text_file(root() / "c.json"));
  EXPECT_NO_THROW(load_scene(root() / "a.json"));
  EXPECT_EQ(run("gen-scene --primitives 0 --out d.json"), 2);
}

TEST(Cli, RenderAndExtract) {
  ensure_dataset();
  const DatasetManifest m = load_manifest(root() / "data" / "transforms.json");
  EXPECT_EQ(m.frames.size(), 6u);
  ASSERT_EQ(run("extract --views " + at("data") + " --frame 2 --dim 16 --out f.bin --preview f.png"), 0);
  const FeatureImage f = load_feature_image(root() / "f.bin");
  EXPECT_EQ(f.width, 48);
  EXPECT_EQ(f.channels, 16);
  EXPECT_TRUE(fs::exists(root() / "f.png"));
  EXPECT_EQ(run("extract --views " + at("data") + " --frame 99 --out g.bin"), 2);
  EXPECT_EQ(run("extract --views " + at("data") + " --backbone vit --out g.bin"), 2);
}

TEST(Cli, OpenGlManifestRoundTrips) {
  ensure_dataset();
  ASSERT_EQ(run("render --scene " + at("scene.json") +
                " --out-dir data_gl --poses 2 --size 32 --seed 2 --convention opengl"),
            0);
  const json j = parse_json(read_text_file(root() / "data_gl" / "transforms.json"), "gl");
  EXPECT_EQ(j["convention"], "opengl");
  const DatasetManifest gl = load_manifest(root() / "data_gl" / "transforms.json");
  const auto poses = stratified_orbit_poses(2, 3.2, 22.0, 38.0, 2);
  EXPECT_LT((gl.frames[1].pose.matrix() - poses[1].matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Cli, TrainInverseAndInvert) {
  ensure_dataset();
  ASSERT_EQ(run("train-inverse --views " + at("data") + " --iters 200 --dim 32 --out inv.ckpt"), 0);
  const InverseModelParams model = load_inverse_model(root() / "inv.ckpt");
  EXPECT_EQ(model.config.embedding_dim, kDefaultEmbeddingDim);

  ASSERT_EQ(run("invert --query " + at("data/frame_0003.png") + " --scene " + at("scene.json") +
                " --inv-model " + at("inv.ckpt") + " --report rep.json --seed 1"),
            0);
  const json rep = parse_json(read_text_file(root() / "rep.json"), "report");
  EXPECT_EQ(rep["schema"], "spine.inversion_report");
  EXPECT_TRUE(rep["status"] == "fine-ok" || rep["status"] == "coarse-only");
  EXPECT_FALSE(rep["ground_truth"].is_null());
  EXPECT_FALSE(rep["coarse_pose"].is_null());

  EXPECT_EQ(run("invert --query " + at("scene.json") + " --scene " + at("scene.json") +
                " --inv-model " + at("inv.ckpt")),
            2);
  EXPECT_EQ(run("invert --query " + at("data/frame_0003.png") + " --scene " + at("scene.json") +
                " --inv-model " + at("scene.json")),
            2);
}

TEST(Cli, DivergentTrainingIsExperimentFailure) {
  ensure_dataset();
  EXPECT_EQ(run("train-inverse --views " + at("data") + " --iters 20 --dim 8 --lr 1e300 --out bad.ckpt"), 3);
  EXPECT_FALSE(fs::exists(root() / "bad.ckpt"));
}

TEST(Cli, DistillWritesLoadableField) {
  ensure_dataset();
  ASSERT_EQ(run("distill --views " + at("data") + " --scene " + at("scene.json") +
                " --iters 20 --dim 8 --language-dim 4 --out field.ckpt"),
            0);
  const SemanticFieldParams p = load_field(root() / "field.ckpt");
  EXPECT_EQ(p.config.spatial_dim, 8);
  EXPECT_EQ(p.config.language_dim, 4);
}

TEST(Cli, ExperimentConfigValidation) {
  write_text_file(root() / "bad_config.json", R"({"image_sise": 64})");
  EXPECT_EQ(run("gff --config " + at("bad_config.json")), 2);
  EXPECT_EQ(run("bench --backbones vit"), 2);

  write_text_file(root() / "small.json", R"({"image_size": 32, "thresholds": [0.1, 0.2]})");
  ASSERT_EQ(run("gff --config " + at("small.json") + " --poses 2 --seed 3 --out-dir gff_run"), 0);
  ExperimentConfig c;
  c.image_size = 32;
  c.thresholds = {0.1, 0.2};
  c.eval_poses = 2;
  c.pose_seed = 3;
  EXPECT_EQ(read_text_file(root() / "gff_run" / "gff.csv"), run_gff_experiment(c).csv.str());
  const ExperimentConfig saved = load_config(root() / "gff_run" / "config.json");
  EXPECT_EQ(saved.eval_poses, 2);
  EXPECT_EQ(saved.pose_seed, 3u);
  EXPECT_TRUE(fs::exists(root() / "gff_run" / "gff_plot.json"));
}
