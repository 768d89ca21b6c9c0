#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "depthforge/depthforge.hpp"

namespace depthforge::testing {

inline double deg(double d) { return d * std::numbers::pi / 180.0; }

inline Intrinsics desk_intrinsics(int size = 256) {
  const double s = size / 256.0;
  return {200.0 * s, 200.0 * s, 128.0 * s, 128.0 * s, size, size};
}

inline sim::Texture noise_texture(std::uint64_t seed, Color a, Color b, double scale) {
  sim::Texture t;
  t.kind = sim::TextureKind::kNoise;
  t.seed = seed;
  t.color_a = a;
  t.color_b = b;
  t.scale = scale;
  return t;
}

// Random rigid motion with rotation angle in [min_deg, max_deg] and translation
// norm in [min_t, max_t].
inline PoseSE3 random_motion(std::mt19937_64& rng, double min_deg, double max_deg, double min_t, double max_t) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Eigen::Vector3d axis = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  const Eigen::Vector3d dir = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  const double angle = deg(min_deg + (max_deg - min_deg) * u(rng));
  const double t = min_t + (max_t - min_t) * u(rng);
  return se3_exp(Twist(axis * angle, Eigen::Vector3d::Zero())) * PoseSE3(Eigen::Matrix3d::Identity(), dir * t);
}

// Three textured planes (back wall, floor, left wall) and a textured sphere seen
// by a target camera at the origin plus `neighbors` cameras at random poses.
inline sim::SceneSpec desk_scene(std::uint64_t seed, int neighbors = 6, int size = 256) {
  sim::SceneSpec spec;
  spec.intr = desk_intrinsics(size);
  sim::Plane back;
  back.origin = {0.0, 0.0, 1.8};
  back.normal = {0.0, 0.0, -1.0};
  back.u_axis = {1.0, 0.0, 0.0};
  back.texture = noise_texture(11, {0.95, 0.85, 0.7}, {0.1, 0.2, 0.35}, 0.12);
  sim::Plane floor;
  floor.origin = {0.0, 0.5, 0.0};
  floor.normal = {0.0, -1.0, 0.0};
  floor.u_axis = {1.0, 0.0, 0.0};
  floor.texture = noise_texture(23, {0.8, 0.75, 0.6}, {0.15, 0.1, 0.05}, 0.08);
  sim::Plane left;
  left.origin = {-0.75, 0.0, 0.0};
  left.normal = {1.0, 0.0, 0.0};
  left.u_axis = {0.0, 0.0, 1.0};
  left.texture = noise_texture(37, {0.7, 0.9, 0.7}, {0.05, 0.25, 0.1}, 0.1);
  sim::Sphere ball;
  ball.center = {0.2, 0.1, 1.2};
  ball.radius = 0.25;
  ball.texture = noise_texture(41, {1.0, 0.6, 0.5}, {0.2, 0.05, 0.1}, 0.06);
  spec.primitives = {back, floor, left, ball};

  std::mt19937_64 rng(seed);
  spec.trajectory.push_back(PoseSE3::identity());
  for (int j = 0; j < neighbors; ++j) spec.trajectory.push_back(random_motion(rng, 3.0, 10.0, 0.05, 0.2));
  return spec;
}

// A slow sideways pan through the desk scene: frame f is yawed 0.6 deg and
// shifted 12 mm per step relative to the middle frame.
inline sim::SceneSpec desk_stream(int frames, int size = 96) {
  sim::SceneSpec spec = desk_scene(1, 0, size);
  spec.trajectory.clear();
  for (int f = 0; f < frames; ++f) {
    const double t = f - (frames - 1) / 2.0;
    spec.trajectory.push_back(se3_exp(Twist(Eigen::Vector3d(0.0, deg(0.6 * t), 0.0), Eigen::Vector3d(0.012 * t, 0.0, 0.0))));
  }
  return spec;
}

// A fronto-parallel textured plane at `distance` meters seen by `views` cameras.
inline sim::SceneSpec plane_scene(double distance, std::vector<PoseSE3> cameras, int size = 256) {
  sim::SceneSpec spec;
  spec.intr = desk_intrinsics(size);
  sim::Plane p;
  p.origin = {0.0, 0.0, distance};
  p.normal = {0.0, 0.0, -1.0};
  p.u_axis = {1.0, 0.0, 0.0};
  p.texture = noise_texture(5, {0.9, 0.9, 0.9}, {0.1, 0.1, 0.1}, 0.1);
  spec.primitives = {p};
  spec.trajectory = std::move(cameras);
  return spec;
}

// Frame set with frame 0 as the target and the remaining frames as neighbors.
inline LocalFrameSet frame_set_from(const std::vector<RgbdFrame>& frames) {
  LocalFrameSet set;
  set.target = frames.front();
  for (std::size_t j = 1; j < frames.size(); ++j) {
    set.neighbors.push_back(frames[j]);
    set.offsets.push_back(static_cast<int>(j));
  }
  return set;
}

inline FrameSetPoses true_poses(const sim::SceneRender& render) {
  FrameSetPoses poses(render.frames.size() - 1);
  for (std::size_t j = 1; j < render.frames.size(); ++j) poses.neighbor_to_target[j - 1] = render.relative(j, 0);
  return poses;
}

inline std::vector<RgbdFrame> with_noise(std::vector<RgbdFrame> frames, const sim::NoiseModel& model) {
  for (auto& f : frames) {
    sim::NoiseModel m = model;
    m.seed = sim::frame_seed(model.seed, f.id);
    f.depth = sim::simulate_kinect_noise(f.depth, f.intr, m);
  }
  return frames;
}

inline DepthImage random_depth(std::mt19937_64& rng, int w, int h, double lo = 0.5, double hi = 4.0,
                               double missing = 0.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::uniform_real_distribution<double> m(0.0, 1.0);
  DepthImage d(w, h);
  for (auto& z : d) z = m(rng) < missing ? 0.0 : u(rng);
  return d;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("depthforge_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace depthforge::testing
