// Builds a small synthetic desk stream, then runs simulate -> generate -> evaluate
// the same way the CLI would:
//
//   desk_stream_demo <output_dir> [size]
//
// The scene spec is also written to <output_dir>/scene.json so it can be fed to
// `depthforge simulate --scene`.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <string>

#include "depthforge/depthforge.hpp"

using namespace depthforge;
namespace fs = std::filesystem;

namespace {

sim::Texture noise_texture(std::uint64_t seed, Color a, Color b, double scale) {
  sim::Texture t;
  t.kind = sim::TextureKind::kNoise;
  t.seed = seed;
  t.color_a = a;
  t.color_b = b;
  t.scale = scale;
  return t;
}

sim::SceneSpec desk_stream(int size, int frames) {
  sim::SceneSpec spec;
  const double s = size / 256.0;
  spec.intr = {200.0 * s, 200.0 * s, 128.0 * s, 128.0 * s, size, size};

  sim::Plane back{{0.0, 0.0, 1.8}, {0.0, 0.0, -1.0}, {1.0, 0.0, 0.0}};
  back.texture = noise_texture(11, {0.95, 0.85, 0.7}, {0.1, 0.2, 0.35}, 0.12);
  sim::Plane floor{{0.0, 0.5, 0.0}, {0.0, -1.0, 0.0}, {1.0, 0.0, 0.0}};
  floor.texture = noise_texture(23, {0.8, 0.75, 0.6}, {0.15, 0.1, 0.05}, 0.08);
  sim::Plane left{{-0.75, 0.0, 0.0}, {1.0, 0.0, 0.0}, {0.0, 0.0, 1.0}};
  left.texture = noise_texture(37, {0.7, 0.9, 0.7}, {0.05, 0.25, 0.1}, 0.1);
  sim::Sphere ball{{0.2, 0.1, 1.2}, 0.25};
  ball.texture = noise_texture(41, {1.0, 0.6, 0.5}, {0.2, 0.05, 0.1}, 0.06);
  spec.primitives = {back, floor, left, ball};

  // Slow sideways pan with a little yaw, like a handheld sweep.
  for (int f = 0; f < frames; ++f) {
    const double t = f - (frames - 1) / 2.0;
    const double yaw = 0.6 * t * std::numbers::pi / 180.0;
    spec.trajectory.push_back(se3_exp(Twist(Eigen::Vector3d(0.0, yaw, 0.0), Eigen::Vector3d(0.012 * t, 0.0, 0.0))));
  }
  return spec;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: desk_stream_demo <output_dir> [size]\n";
    return 1;
  }
  const fs::path root = argv[1];
  const int size = argc > 2 ? std::stoi(argv[2]) : 128;

  const sim::SceneSpec spec = desk_stream(size, 13);
  fs::create_directories(root);
  std::ofstream(root / "scene.json") << sim::scene_to_json(spec).dump(2) << '\n';

  pipeline::PipelineConfig cfg;
  cfg.stream.working_width = size;
  cfg.stream.working_height = size;
  cfg.patches.patch_size = size / 2;
  cfg.seed = 7;
  pipeline::Logger log(true);

  pipeline::cmd_simulate(spec, root / "stream", cfg, &log);
  const auto gen = pipeline::cmd_generate(root / "stream", root / "gt", cfg, &log);
  std::cout << "generate: " << gen.summary.dump() << '\n';

  // Score the fused GT and the raw noisy input against the clean render.
  const auto gt_report = pipeline::cmd_evaluate(root / "gt" / "gt_depth", root / "stream" / "clean_depth");
  const auto noisy_report = pipeline::cmd_evaluate(root / "stream" / "depth", root / "stream" / "clean_depth");
  std::cout << "fused GT vs clean:   " << gt_report.mean.to_json().dump() << '\n';
  std::cout << "noisy input vs clean: " << noisy_report.mean.to_json().dump() << '\n';
  return 0;
}
