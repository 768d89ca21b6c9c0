#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>

#include "fixtures.hpp"

using namespace depthforge;
using depthforge::testing::TempDir;
using depthforge::testing::read_bytes;
namespace fs = std::filesystem;
using pipeline::PipelineConfig;

namespace {

PipelineConfig small_config(int size = 64) {
  PipelineConfig cfg;
  cfg.stream.working_width = size;
  cfg.stream.working_height = size;
  cfg.patches.patch_size = size / 2;
  cfg.seed = 3;
  return cfg;
}

// Simulated 13-frame pan at `size` px written in stream layout.
void make_stream(const fs::path& root, int size = 64, int frames = 13) {
  pipeline::cmd_simulate(depthforge::testing::desk_stream(frames, size), root, small_config(size));
}

std::set<std::string> files_under(const fs::path& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.insert(fs::relative(e.path(), root).generic_string());
  }
  return out;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DEPTHFORGE_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsAreValidAndRoundTrip) {
  const PipelineConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.stream.working_width, 256);
  EXPECT_EQ(cfg.frame_sets.k_half, 3);
  EXPECT_EQ(cfg.frame_sets.interval, 2);
  EXPECT_EQ(cfg.registration.outer_iterations, 30);
  EXPECT_EQ(cfg.patches.n_crops, 6);
  EXPECT_EQ(cfg.patches.patch_size, 128);
  EXPECT_DOUBLE_EQ(cfg.patches.max_missing_ratio, 0.05);

  PipelineConfig custom = small_config();
  custom.registration.weights.photometric = 0.25;
  custom.registration.pairwise_full = true;
  custom.fusion.z_gate = 0.1;
  custom.noise.sigma_disparity = 0.3;
  custom.workers = 4;
  const nlohmann::json j = custom.to_json();
  const PipelineConfig back = PipelineConfig::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(back.workers, 4);
  EXPECT_FALSE(custom.to_json(false).contains("workers"));
  EXPECT_EQ(PipelineConfig::from_json(nlohmann::json::object()).to_json(), PipelineConfig().to_json());
}

TEST(Config, RejectsInvalidValues) {
  auto rejects = [](const nlohmann::json& j) {
    EXPECT_THROW(PipelineConfig::from_json(j), ConfigError) << j.dump();
  };
  rejects({{"workers", 0}});
  rejects({{"val_fraction", 1.5}});
  rejects({{"frame_sets", {{"k_half", 0}}}});
  rejects({{"frame_sets", {{"max_target_missing", -0.1}}}});
  rejects({{"patches", {{"max_missing_ratio", 2.0}}}});
  rejects({{"patches", {{"n_crops", 0}}}});
  rejects({{"fusion", {{"radius", 0.0}}}});
  rejects({{"registration", {{"top_k", 0}}}});
  rejects({{"registration", {{"huber_scale", "mad"}}}});
  rejects({{"metrics", {{"ssim_window", 10}}}});
  rejects({{"noise", {{"speckle_rate", 1.5}}}});
  rejects({{"working_size", {64}}});
  rejects({{"workers", "many"}});
  rejects({{"regsitration", nlohmann::json::object()}});
  rejects({{"fusion", {{"radius", 1.0}, {"m", 8}}}});
  rejects(nlohmann::json::array());
}

TEST(Config, LoadFromFile) {
  TempDir dir("cfg");
  std::ofstream(dir / "ok.json") << R"({"seed": 9, "frame_sets": {"k_half": 2}})";
  const PipelineConfig cfg = pipeline::load_config(dir / "ok.json");
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.frame_sets.k_half, 2);
  std::ofstream(dir / "bad.json") << "{ nope";
  EXPECT_THROW(pipeline::load_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(pipeline::load_config(dir / "missing.json"), ConfigError);
}

TEST(WeightMap, RoundTripAndTruncation) {
  TempDir dir("wm");
  Image<double> w(5, 3);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.25 * static_cast<double>(i);
  pipeline::write_weight_map(dir / "w.bin", w);
  EXPECT_EQ(fs::file_size(dir / "w.bin"), 12u + 15u * 4u);
  const Image<double> back = pipeline::read_weight_map(dir / "w.bin");
  EXPECT_EQ(back, w);
  const std::string bytes = read_bytes(dir / "w.bin");
  std::ofstream(dir / "t.bin", std::ios::binary) << bytes.substr(0, 20);
  EXPECT_THROW(pipeline::read_weight_map(dir / "t.bin"), LoadError);
  std::ofstream(dir / "x.bin", std::ios::binary) << "XXXX";
  EXPECT_THROW(pipeline::read_weight_map(dir / "x.bin"), LoadError);
}

TEST(Split, DeterministicAndNearTargetFraction) {
  std::size_t val = 0;
  for (long id = 0; id < 20000; ++id) {
    const std::string s = pipeline::split_of(5, id, 0.1);
    EXPECT_EQ(s, pipeline::split_of(5, id, 0.1));
    val += s == "val";
  }
  EXPECT_NEAR(val / 20000.0, 0.1, 0.01);
  EXPECT_EQ(pipeline::split_of(5, 1, 0.0), "train");
  EXPECT_EQ(pipeline::split_of(5, 1, 1.0), "val");
}

TEST(Generate, ThirteenFramesGiveOneSetWithAllOutputsListed) {
  TempDir dir("gen");
  make_stream(dir / "stream");
  const auto m = pipeline::cmd_generate(dir / "stream", dir / "out", small_config());
  ASSERT_EQ(m.sets.size(), 1u);
  EXPECT_EQ(m.sets[0].target_id, 6);
  EXPECT_EQ(m.sets[0].status, "ok") << m.sets[0].error;
  ASSERT_TRUE(m.sets[0].ssim.has_value());
  ASSERT_TRUE(m.sets[0].structure_loss.has_value());
  EXPECT_GT(m.sets[0].coverage, 0.9);

  const auto on_disk = files_under(dir / "out");
  std::set<std::string> listed(m.files.begin(), m.files.end());
  listed.insert("manifest.json");
  EXPECT_EQ(on_disk, listed);
  EXPECT_TRUE(on_disk.count("gt_depth/000006.png"));
  EXPECT_TRUE(on_disk.count("weights/000006.bin"));
  EXPECT_TRUE(on_disk.count("diagnostics/000006.json"));

  const auto j = read_json(dir / "out" / "manifest.json");
  EXPECT_EQ(j["command"], "generate");
  EXPECT_EQ(j["version"], pipeline::kVersion);
  EXPECT_EQ(j["advisory"]["lambda_s"], 5.0);
  EXPECT_EQ(j["sets"].size(), 1u);
  EXPECT_EQ(j["summary"]["status_counts"]["ok"], 1);
  EXPECT_TRUE(j["runtime"].contains("stage_seconds"));
  EXPECT_FALSE(j["config"].contains("workers"));

  const DepthImage gt = io::read_depth_png(dir / "out" / "gt_depth" / "000006.png");
  EXPECT_EQ(gt.width(), 64);
  const Image<double> w = pipeline::read_weight_map(dir / "out" / "weights" / "000006.bin");
  for (std::size_t i = 0; i < gt.size(); ++i) EXPECT_EQ(gt[i] > 0.0, w[i] > 0.0);
}

TEST(Generate, EmptyDirectoryGivesEmptyManifest) {
  TempDir dir("gen");
  fs::create_directories(dir / "empty");
  const auto m = pipeline::cmd_generate(dir / "empty", dir / "out", small_config());
  EXPECT_TRUE(m.sets.empty());
  EXPECT_TRUE(fs::exists(dir / "out" / "manifest.json"));
  EXPECT_EQ(read_json(dir / "out" / "manifest.json")["summary"]["sets"], 0);
  EXPECT_THROW(pipeline::cmd_generate(dir / "missing", dir / "out2", small_config()), LoadError);
}

TEST(Generate, BadNeighborIsExcludedAndRunContinues) {
  TempDir dir("gen");
  make_stream(dir / "stream", 48, 15);
  // Frame 12 neighbors targets 6 (+6) and 8 (+4) but not 7.
  io::write_depth_png(dir / "stream" / "depth" / "000012.png", DepthImage(48, 48));
  const auto m = pipeline::cmd_generate(dir / "stream", dir / "out", small_config(48));
  ASSERT_EQ(m.sets.size(), 3u);
  EXPECT_EQ(m.sets[0].status, "excluded-neighbors");
  EXPECT_EQ(m.sets[0].excluded_offsets, std::vector<int>{6});
  EXPECT_EQ(m.sets[1].status, "ok");
  EXPECT_EQ(m.sets[2].status, "excluded-neighbors");
  EXPECT_EQ(m.sets[2].excluded_offsets, std::vector<int>{4});
  EXPECT_EQ(m.summary["status_counts"]["excluded-neighbors"], 2);
}

TEST(Generate, EmptyTargetFailsOnlyItsSet) {
  TempDir dir("gen");
  make_stream(dir / "stream", 48, 14);
  // Targets 6 and 7; allow an empty target through the eligibility filter.
  io::write_depth_png(dir / "stream" / "depth" / "000007.png", DepthImage(48, 48));
  PipelineConfig cfg = small_config(48);
  cfg.frame_sets.max_target_missing = 1.0;
  const auto m = pipeline::cmd_generate(dir / "stream", dir / "out", cfg);
  ASSERT_EQ(m.sets.size(), 2u);
  EXPECT_EQ(m.sets[0].status, "ok");
  EXPECT_EQ(m.sets[1].status, "failed");
  EXPECT_FALSE(m.sets[1].error.empty());
  EXPECT_EQ(m.warnings.size(), 1u);
  EXPECT_FALSE(fs::exists(dir / "out" / "gt_depth" / "000007.png"));
}

TEST(Generate, WorkerCountDoesNotChangeOutputs) {
  TempDir dir("gen");
  make_stream(dir / "stream", 48, 15);
  PipelineConfig cfg = small_config(48);
  cfg.workers = 1;
  const auto a = pipeline::cmd_generate(dir / "stream", dir / "a", cfg);
  cfg.workers = 3;
  const auto b = pipeline::cmd_generate(dir / "stream", dir / "b", cfg);
  EXPECT_EQ(pipeline::without_runtime(a.to_json()), pipeline::without_runtime(b.to_json()));
  for (const auto& f : a.files) EXPECT_EQ(read_bytes(dir / "a" / f), read_bytes(dir / "b" / f)) << f;
}

TEST(Evaluate, SelfComparisonAndConstantOffset) {
  TempDir dir("eval");
  std::mt19937_64 rng(1);
  fs::create_directories(dir / "ref");
  fs::create_directories(dir / "pred");
  for (int i = 0; i < 4; ++i) {
    DepthImage d = depthforge::testing::random_depth(rng, 24, 24, 0.5, 3.0, 0.1);
    for (double& z : d) z = std::round(z * 1000.0) / 1000.0;
    io::write_depth_png(dir / "ref" / frame_filename(i), d);
    for (double& z : d) z = z > 0.0 ? z + 0.010 : 0.0;
    io::write_depth_png(dir / "pred" / frame_filename(i), d);
  }
  const auto self = pipeline::cmd_evaluate(dir / "ref", dir / "ref");
  EXPECT_EQ(self.images.size(), 4u);
  EXPECT_NEAR(self.mean.ssim, 1.0, 1e-12);
  EXPECT_EQ(self.mean.rmse, 0.0);
  EXPECT_EQ(self.mean.mae, 0.0);
  EXPECT_EQ(self.mean.structure_loss, 0.0);

  const auto off = pipeline::cmd_evaluate(dir / "pred", dir / "ref");
  EXPECT_NEAR(off.mean.mae, 0.010, 1e-9);
  EXPECT_NEAR(off.mean.rmse, 0.010, 1e-9);
  double sum = 0.0;
  for (const auto& [name, r] : off.images) sum += r.ssim;
  EXPECT_NEAR(off.mean.ssim, sum / 4.0, 1e-12);
  const auto j = off.to_json();
  EXPECT_EQ(j["count"], 4);
  EXPECT_EQ(j["mask_policy"], "intersection");
}

TEST(Evaluate, AggregatesMatchPerImageValues) {
  TempDir dir("eval");
  std::mt19937_64 rng(2);
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  for (int i = 0; i < 5; ++i) {
    io::write_depth_png(dir / "a" / frame_filename(i), depthforge::testing::random_depth(rng, 20, 16));
    io::write_depth_png(dir / "b" / frame_filename(i), depthforge::testing::random_depth(rng, 20, 16));
  }
  io::write_depth_png(dir / "a" / "000099.png", DepthImage(20, 16, 1.0));  // no partner
  const auto r = pipeline::cmd_evaluate(dir / "a", dir / "b");
  ASSERT_EQ(r.images.size(), 5u);
  std::vector<double> rm;
  double mae_sum = 0.0, sl_sum = 0.0;
  for (const auto& [name, m] : r.images) {
    rm.push_back(m.rmse);
    mae_sum += m.mae;
    sl_sum += m.structure_loss;
  }
  std::sort(rm.begin(), rm.end());
  EXPECT_NEAR(r.mean.mae, mae_sum / 5.0, 1e-12);
  EXPECT_NEAR(r.mean.structure_loss, sl_sum / 5.0, 1e-12);
  EXPECT_EQ(r.median.rmse, rm[2]);
}

TEST(Evaluate, NothingInCommonIsAnError) {
  TempDir dir("eval");
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  io::write_depth_png(dir / "a" / "000001.png", DepthImage(4, 4, 1.0));
  io::write_depth_png(dir / "b" / "000002.png", DepthImage(4, 4, 1.0));
  EXPECT_THROW(pipeline::cmd_evaluate(dir / "a", dir / "b"), EmptyComparisonError);
  EXPECT_THROW(pipeline::cmd_evaluate(dir / "a", dir / "a", "union"), ConfigError);
}

TEST(Simulate, PlaneFixtureAndPoses) {
  TempDir dir("sim");
  std::mt19937_64 rng(4);
  std::vector<PoseSE3> cams{PoseSE3()};
  for (int i = 0; i < 3; ++i) cams.push_back(depthforge::testing::random_motion(rng, 1, 5, 0.01, 0.05));
  const sim::SceneSpec spec = depthforge::testing::plane_scene(2.0, cams, 32);
  PipelineConfig cfg = small_config(32);
  const auto m = pipeline::cmd_simulate(spec, dir / "a", cfg);
  EXPECT_EQ(m.summary["frames"], 4);

  const DepthImage clean = io::read_depth_png(dir / "a" / "clean_depth" / "000000.png");
  for (double z : clean) EXPECT_DOUBLE_EQ(z, 2.0);
  const auto poses = pipeline::read_poses(dir / "a" / "poses.json");
  ASSERT_EQ(poses.size(), cams.size());
  for (std::size_t i = 0; i < cams.size(); ++i) {
    EXPECT_LT((poses[i].matrix() - cams[i].matrix()).cwiseAbs().maxCoeff(), 1e-12);
  }
  cfg.workers = 2;
  pipeline::cmd_simulate(spec, dir / "b", cfg);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(read_bytes(dir / "a" / "depth" / frame_filename(i)), read_bytes(dir / "b" / "depth" / frame_filename(i)));
  }
  const auto frames = load_stream(dir / "a", cfg.stream);
  EXPECT_EQ(frames.size(), 4u);

  sim::SceneSpec bad = spec;
  bad.primitives.clear();
  EXPECT_THROW(pipeline::cmd_simulate(bad, dir / "c", cfg), InvalidSpecError);
}

TEST(Patches, DensePairsHalfMissingAndUnpaired) {
  TempDir dir("patch");
  std::mt19937_64 rng(5);
  fs::create_directories(dir / "in");
  fs::create_directories(dir / "gt");
  io::write_depth_png(dir / "in" / "000001.png", depthforge::testing::random_depth(rng, 256, 256));
  io::write_depth_png(dir / "gt" / "000001.png", depthforge::testing::random_depth(rng, 256, 256));
  DepthImage holes(256, 256, 1.0);
  for (int y = 0; y < 256; ++y) {
    for (int x = 0; x < 256; ++x) {
      if ((x / 2 + y / 2) % 2) holes(x, y) = 0.0;
    }
  }
  io::write_depth_png(dir / "in" / "000002.png", holes);
  io::write_depth_png(dir / "gt" / "000002.png", holes);
  io::write_depth_png(dir / "in" / "000003.png", holes);  // no gt

  PipelineConfig cfg;
  const auto m = pipeline::cmd_patches(dir / "in", dir / "gt", dir / "out", cfg);
  EXPECT_EQ(m.summary["patches"], 6);
  EXPECT_EQ(m.summary["pairs"], 2);
  ASSERT_EQ(m.warnings.size(), 2u);
  const auto index = read_json(dir / "out" / "index.json");
  ASSERT_EQ(index.size(), 6u);
  for (const auto& e : index) {
    EXPECT_EQ(e["source_id"], 1);
    const DepthImage p = io::read_depth_png(dir / "out" / e["gt"].get<std::string>());
    EXPECT_EQ(p.width(), 128);
  }
  const auto on_disk = files_under(dir / "out");
  std::set<std::string> listed(m.files.begin(), m.files.end());
  listed.insert("manifest.json");
  EXPECT_EQ(on_disk, listed);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("--version"), 0);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("generate --output " + (dir / "o").string()), 1);
  std::ofstream(dir / "bad.json") << R"({"workers": 0})";
  fs::create_directories(dir / "empty");
  EXPECT_EQ(run_cli("generate -i " + (dir / "empty").string() + " -o " + (dir / "o").string() + " --config " +
                    (dir / "bad.json").string()),
            1);
  EXPECT_EQ(run_cli("generate -i " + (dir / "missing").string() + " -o " + (dir / "o").string()), 2);
  EXPECT_EQ(run_cli("generate -i " + (dir / "empty").string() + " -o " + (dir / "o").string()), 0);
  EXPECT_EQ(run_cli("evaluate -i " + (dir / "empty").string() + " --gt " + (dir / "empty").string()), 2);
  std::ofstream(dir / "scene.json") << "{}";
  EXPECT_EQ(run_cli("simulate --scene " + (dir / "scene.json").string() + " -o " + (dir / "s").string()), 1);
}

TEST(Cli, SimulateThenGenerateThenEvaluate) {
  TempDir dir("cli");
  std::ofstream(dir / "scene.json") << sim::scene_to_json(depthforge::testing::desk_stream(13, 48)).dump();
  std::ofstream(dir / "cfg.json") << small_config(48).to_json().dump();
  const std::string cfg = " --config " + (dir / "cfg.json").string();
  ASSERT_EQ(run_cli("simulate --scene " + (dir / "scene.json").string() + " -o " + (dir / "s").string() + cfg), 0);
  ASSERT_EQ(run_cli("generate -i " + (dir / "s").string() + " -o " + (dir / "g").string() + cfg + " --workers 2"), 0);
  ASSERT_TRUE(fs::exists(dir / "g" / "gt_depth" / "000006.png"));
  ASSERT_EQ(run_cli("evaluate -i " + (dir / "g" / "gt_depth").string() + " --gt " +
                    (dir / "s" / "clean_depth").string() + " -o " + (dir / "report.json").string()),
            0);
  const auto report = read_json(dir / "report.json");
  EXPECT_EQ(report["count"], 1);
  EXPECT_GT(report["mean"]["ssim"].get<double>(), 0.5);
  ASSERT_EQ(run_cli("patches -i " + (dir / "s").string() + " -g " + (dir / "g").string() + " -o " +
                    (dir / "p").string() + cfg),
            0);
  EXPECT_TRUE(fs::exists(dir / "p" / "index.json"));
}
