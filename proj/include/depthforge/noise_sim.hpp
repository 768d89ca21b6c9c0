#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "depthforge/camera.hpp"
#include "depthforge/errors.hpp"
#include "depthforge/frame_store.hpp"
#include "depthforge/image.hpp"

namespace depthforge::sim {

enum class TextureKind { kSolid, kChecker, kGradient, kNoise };

// Procedural texture evaluated on 2D surface coordinates in meters.
struct Texture {
  TextureKind kind = TextureKind::kChecker;
  Color color_a{0.9, 0.9, 0.9};
  Color color_b{0.1, 0.1, 0.1};
  double scale = 0.1;  // checker cell / gradient period / noise feature size (meters)
  std::uint64_t seed = 1;

  Color at(double u, double v) const;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double lattice_value(std::int64_t i, std::int64_t j, std::uint64_t seed) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(i) * 0x632be59bd9b4e019ULL ^
                                                       static_cast<std::uint64_t>(j)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Smooth value noise in [0, 1].
inline double value_noise(double u, double v, std::uint64_t seed) {
  const double fu = std::floor(u);
  const double fv = std::floor(v);
  const auto i = static_cast<std::int64_t>(fu);
  const auto j = static_cast<std::int64_t>(fv);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  const double a = smooth(u - fu);
  const double b = smooth(v - fv);
  const double v00 = lattice_value(i, j, seed);
  const double v10 = lattice_value(i + 1, j, seed);
  const double v01 = lattice_value(i, j + 1, seed);
  const double v11 = lattice_value(i + 1, j + 1, seed);
  return (1 - b) * ((1 - a) * v00 + a * v10) + b * ((1 - a) * v01 + a * v11);
}

}  // namespace detail

inline Color Texture::at(double u, double v) const {
  switch (kind) {
    case TextureKind::kSolid:
      return color_a;
    case TextureKind::kChecker: {
      const auto cu = static_cast<std::int64_t>(std::floor(u / scale));
      const auto cv = static_cast<std::int64_t>(std::floor(v / scale));
      return ((cu + cv) & 1) == 0 ? color_a : color_b;
    }
    case TextureKind::kGradient: {
      const double t = u / scale - std::floor(u / scale);
      return (1.0 - t) * color_a + t * color_b;
    }
    case TextureKind::kNoise: {
      double n = 0.0;
      double amp = 0.5;
      double freq = 1.0 / scale;
      double norm = 0.0;
      for (int octave = 0; octave < 3; ++octave) {
        n += amp * detail::value_noise(u * freq, v * freq, seed + static_cast<std::uint64_t>(octave));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
      }
      n /= norm;
      return (1.0 - n) * color_a + n * color_b;
    }
  }
  return color_a;
}

// Plane through `origin` with unit `normal`; half_extent <= 0 means unbounded.
struct Plane {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  Eigen::Vector3d u_axis = Eigen::Vector3d::UnitX();
  Eigen::Vector2d half_extent = Eigen::Vector2d::Zero();
  Texture texture;
};

struct Sphere {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 1.0;
  Texture texture;
};

// Axis-aligned box in its own frame, placed by `pose` (box -> world).
struct Box {
  PoseSE3 pose;
  Eigen::Vector3d half_size = Eigen::Vector3d::Ones();
  Texture texture;
};

using Primitive = std::variant<Plane, Sphere, Box>;

struct SceneSpec {
  std::vector<Primitive> primitives;
  std::vector<PoseSE3> trajectory;  // camera -> world, one per frame
  Intrinsics intr;
};

struct NoiseModel {
  double sigma_disparity = 0.5;
  double dropout_grazing_deg = 80.0;  // >= 90 disables grazing dropout
  double speckle_rate = 0.005;
  std::uint64_t seed = 0;
  double baseline = 35.130;  // meters * disparity units
};

struct Hit {
  double s = std::numeric_limits<double>::infinity();  // ray parameter; equals camera depth
  double u = 0.0;  // surface texture coordinates
  double v = 0.0;
  const Texture* texture = nullptr;

  Color color() const { return texture ? texture->at(u, v) : Color::Zero(); }
};

namespace detail {

// Ray o + s d, nearest hit with s > eps.
constexpr double kMinHit = 1e-9;

inline Eigen::Vector3d orthonormal_v(const Eigen::Vector3d& n, const Eigen::Vector3d& u) {
  return n.cross(u);
}

inline std::optional<Hit> intersect(const Plane& p, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  const double denom = p.normal.dot(d);
  if (std::abs(denom) < 1e-15) return std::nullopt;
  const double s = p.normal.dot(p.origin - o) / denom;
  if (!(s > kMinHit)) return std::nullopt;
  const Eigen::Vector3d x = o + s * d - p.origin;
  const Eigen::Vector3d v_axis = orthonormal_v(p.normal, p.u_axis);
  const double u = x.dot(p.u_axis);
  const double v = x.dot(v_axis);
  if (p.half_extent.x() > 0.0 && std::abs(u) > p.half_extent.x()) return std::nullopt;
  if (p.half_extent.y() > 0.0 && std::abs(v) > p.half_extent.y()) return std::nullopt;
  return Hit{s, u, v, &p.texture};
}

inline std::optional<Hit> intersect(const Sphere& sp, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  const Eigen::Vector3d oc = o - sp.center;
  const double a = d.squaredNorm();
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - sp.radius * sp.radius;
  const double disc = b * b - a * c;
  if (disc < 0.0) return std::nullopt;
  const double root = std::sqrt(disc);
  double s = (-b - root) / a;
  if (!(s > kMinHit)) s = (-b + root) / a;
  if (!(s > kMinHit)) return std::nullopt;
  const Eigen::Vector3d n = (o + s * d - sp.center) / sp.radius;
  const double lon = std::atan2(n.x(), n.z());
  const double lat = std::asin(std::clamp(n.y(), -1.0, 1.0));
  return Hit{s, lon * sp.radius, lat * sp.radius, &sp.texture};
}

inline std::optional<Hit> intersect(const Box& box, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  const PoseSE3 inv = box.pose.inverse();
  const Eigen::Vector3d lo = inv * o;
  const Eigen::Vector3d ld = inv.rotation() * d;
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int axis_near = 0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(ld[a]) < 1e-15) {
      if (std::abs(lo[a]) > box.half_size[a]) return std::nullopt;
      continue;
    }
    double t0 = (-box.half_size[a] - lo[a]) / ld[a];
    double t1 = (box.half_size[a] - lo[a]) / ld[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_near) {
      t_near = t0;
      axis_near = a;
    }
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || !(t_near > kMinHit)) return std::nullopt;
  const Eigen::Vector3d x = lo + t_near * ld;
  const int ua = (axis_near + 1) % 3;
  const int va = (axis_near + 2) % 3;
  return Hit{t_near, x[ua], x[va], &box.texture};
}

inline bool contains(const Primitive& prim, const Eigen::Vector3d& p) {
  if (const auto* s = std::get_if<Sphere>(&prim)) return (p - s->center).norm() < s->radius;
  if (const auto* b = std::get_if<Box>(&prim)) {
    const Eigen::Vector3d l = b->pose.inverse() * p;
    return (l.cwiseAbs().array() < b->half_size.array()).all();
  }
  return false;
}

}  // namespace detail

inline void validate(const SceneSpec& spec) {
  if (spec.primitives.empty()) throw InvalidSpecError("scene needs at least one primitive");
  if (spec.trajectory.empty()) throw InvalidSpecError("scene needs at least one camera pose");
  if (!spec.intr.valid()) throw InvalidSpecError("scene intrinsics are invalid");
  for (const auto& prim : spec.primitives) {
    if (const auto* s = std::get_if<Sphere>(&prim); s && !(s->radius > 0.0)) {
      throw InvalidSpecError("sphere radius must be positive");
    }
    if (const auto* p = std::get_if<Plane>(&prim)) {
      if (std::abs(p->normal.norm() - 1.0) > 1e-9 || std::abs(p->u_axis.norm() - 1.0) > 1e-9 ||
          std::abs(p->normal.dot(p->u_axis)) > 1e-9) {
        throw InvalidSpecError("plane normal and u_axis must be orthonormal");
      }
    }
  }
  for (std::size_t f = 0; f < spec.trajectory.size(); ++f) {
    for (const auto& prim : spec.primitives) {
      if (detail::contains(prim, spec.trajectory[f].translation())) {
        throw InvalidSpecError("camera " + std::to_string(f) + " is inside a primitive");
      }
    }
  }
}

struct SceneRender {
  std::vector<RgbdFrame> frames;
  std::vector<PoseSE3> camera_poses;  // camera -> world

  // Transform taking points in frame `source`'s camera into frame `target`'s camera.
  PoseSE3 relative(std::size_t source, std::size_t target) const {
    return camera_poses[target].inverse() * camera_poses[source];
  }
};

// Analytic nearest-hit ray casting through every pixel center.
inline RgbdFrame render_view(const SceneSpec& spec, const PoseSE3& camera, long id) {
  const Intrinsics& k = spec.intr;
  RgbdFrame frame{id, ColorImage(k.width, k.height, Color::Zero()), DepthImage(k.width, k.height), k};
  const Eigen::Vector3d origin = camera.translation();
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const Eigen::Vector3d dir_cam((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
      const Eigen::Vector3d dir = camera.rotation() * dir_cam;
      Hit best;
      for (const auto& prim : spec.primitives) {
        const auto hit = std::visit([&](const auto& p) { return detail::intersect(p, origin, dir); }, prim);
        if (hit && hit->s < best.s) best = *hit;
      }
      if (std::isfinite(best.s)) {
        frame.depth(x, y) = best.s;
        frame.color(x, y) = best.color().cwiseMax(0.0).cwiseMin(1.0);
      }
    }
  }
  return frame;
}

inline SceneRender render_scene(const SceneSpec& spec) {
  validate(spec);
  SceneRender out;
  out.camera_poses = spec.trajectory;
  for (std::size_t f = 0; f < spec.trajectory.size(); ++f) {
    out.frames.push_back(render_view(spec, spec.trajectory[f], static_cast<long>(f)));
  }
  return out;
}

// Per-frame seed so noise does not depend on processing order.
inline std::uint64_t frame_seed(std::uint64_t seed, long frame_id) {
  return detail::splitmix64(seed ^ detail::splitmix64(static_cast<std::uint64_t>(frame_id)));
}

// Disparity-domain Kinect-style corruption:
//   z' = B / round(B / z + e + 0.5),  e ~ N(0, sigma_disparity)
// then grazing-angle dropout (from clean-depth normals) and i.i.d. speckle holes.
inline DepthImage simulate_kinect_noise(const DepthImage& clean, const Intrinsics& intr,
                                        const NoiseModel& model) {
  require_same_shape(clean, DepthImage(intr.width, intr.height), "simulate_kinect_noise");
  std::mt19937_64 rng(model.seed);
  std::normal_distribution<double> jitter(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double cos_limit = std::cos(model.dropout_grazing_deg * std::numbers::pi / 180.0);
  const bool grazing = model.dropout_grazing_deg < 90.0;

  DepthImage out(clean.width(), clean.height());
  for (int y = 0; y < clean.height(); ++y) {
    for (int x = 0; x < clean.width(); ++x) {
      const double e = model.sigma_disparity * jitter(rng);
      const double speckle = uniform(rng);
      const double z = clean(x, y);
      if (!(z > 0.0)) continue;
      if (speckle < model.speckle_rate) continue;
      if (grazing) {
        const Eigen::Vector3d n = depth_normal(clean, intr, x, y);
        if (n.squaredNorm() > 0.0) {
          const Eigen::Vector3d ray = -unproject_pixel(x, y, z, intr).normalized();
          if (std::abs(n.dot(ray)) < cos_limit) continue;
        }
      }
      const double q = std::round(model.baseline / z + e + 0.5);
      if (q > 0.0) out(x, y) = model.baseline / q;
    }
  }
  return out;
}

// ---- JSON ------------------------------------------------------------------

namespace detail {

inline Eigen::Vector3d vec3(const nlohmann::json& j, const char* key) {
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw InvalidSpecError(std::string(key) + " must be a 3-vector");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

inline nlohmann::json to_json(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

}  // namespace detail

inline PoseSE3 pose_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 16) throw InvalidSpecError("pose must be 16 numbers (4x4 row-major)");
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = j[static_cast<std::size_t>(4 * r + c)].get<double>();
  }
  try {
    return PoseSE3::from_matrix(m);
  } catch (const InputShapeError& e) {
    throw InvalidSpecError(e.what());
  }
}

inline nlohmann::json pose_to_json(const PoseSE3& pose) {
  const Eigen::Matrix4d m = pose.matrix();
  nlohmann::json out = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) out.push_back(m(r, c));
  }
  return out;
}

inline Texture texture_from_json(const nlohmann::json& j) {
  Texture t;
  if (j.is_null()) return t;
  const std::string kind = j.value("kind", "checker");
  if (kind == "solid") t.kind = TextureKind::kSolid;
  else if (kind == "checker") t.kind = TextureKind::kChecker;
  else if (kind == "gradient") t.kind = TextureKind::kGradient;
  else if (kind == "noise") t.kind = TextureKind::kNoise;
  else throw InvalidSpecError("unknown texture kind '" + kind + "'");
  if (j.contains("color_a")) t.color_a = detail::vec3(j, "color_a");
  if (j.contains("color_b")) t.color_b = detail::vec3(j, "color_b");
  t.scale = j.value("scale", t.scale);
  t.seed = j.value("seed", t.seed);
  if (!(t.scale > 0.0)) throw InvalidSpecError("texture scale must be positive");
  return t;
}

inline nlohmann::json texture_to_json(const Texture& t) {
  static constexpr const char* kNames[] = {"solid", "checker", "gradient", "noise"};
  return {{"kind", kNames[static_cast<int>(t.kind)]},
          {"color_a", detail::to_json(t.color_a)},
          {"color_b", detail::to_json(t.color_b)},
          {"scale", t.scale},
          {"seed", t.seed}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec spec;
  try {
    const auto& k = j.at("intrinsics");
    spec.intr = Intrinsics{k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                           k.at("cy").get<double>(), j.at("width").get<int>(), j.at("height").get<int>()};
    for (const auto& p : j.at("primitives")) {
      const std::string type = p.at("type").get<std::string>();
      const Texture tex = texture_from_json(p.value("texture", nlohmann::json()));
      if (type == "plane") {
        Plane plane;
        plane.origin = detail::vec3(p, "origin");
        plane.normal = detail::vec3(p, "normal").normalized();
        if (p.contains("u_axis")) {
          plane.u_axis = detail::vec3(p, "u_axis").normalized();
        } else {
          const Eigen::Vector3d helper =
              std::abs(plane.normal.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
          plane.u_axis = (helper - helper.dot(plane.normal) * plane.normal).normalized();
        }
        if (p.contains("half_extent")) {
          plane.half_extent = {p["half_extent"].at(0).get<double>(), p["half_extent"].at(1).get<double>()};
        }
        plane.texture = tex;
        spec.primitives.emplace_back(plane);
      } else if (type == "sphere") {
        spec.primitives.emplace_back(Sphere{detail::vec3(p, "center"), p.at("radius").get<double>(), tex});
      } else if (type == "box") {
        spec.primitives.emplace_back(Box{pose_from_json(p.at("pose")), detail::vec3(p, "half_size"), tex});
      } else {
        throw InvalidSpecError("unknown primitive type '" + type + "'");
      }
    }
    for (const auto& pose : j.at("trajectory")) spec.trajectory.push_back(pose_from_json(pose));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidSpecError(std::string("scene schema: ") + e.what());
  }
  validate(spec);
  return spec;
}

inline nlohmann::json scene_to_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["width"] = spec.intr.width;
  j["height"] = spec.intr.height;
  j["intrinsics"] = {{"fx", spec.intr.fx}, {"fy", spec.intr.fy}, {"cx", spec.intr.cx}, {"cy", spec.intr.cy}};
  j["primitives"] = nlohmann::json::array();
  for (const auto& prim : spec.primitives) {
    nlohmann::json p;
    if (const auto* pl = std::get_if<Plane>(&prim)) {
      p = {{"type", "plane"}, {"origin", detail::to_json(pl->origin)}, {"normal", detail::to_json(pl->normal)},
           {"u_axis", detail::to_json(pl->u_axis)}, {"half_extent", {pl->half_extent.x(), pl->half_extent.y()}},
           {"texture", texture_to_json(pl->texture)}};
    } else if (const auto* s = std::get_if<Sphere>(&prim)) {
      p = {{"type", "sphere"}, {"center", detail::to_json(s->center)}, {"radius", s->radius},
           {"texture", texture_to_json(s->texture)}};
    } else if (const auto* b = std::get_if<Box>(&prim)) {
      p = {{"type", "box"}, {"pose", pose_to_json(b->pose)}, {"half_size", detail::to_json(b->half_size)},
           {"texture", texture_to_json(b->texture)}};
    }
    j["primitives"].push_back(p);
  }
  j["trajectory"] = nlohmann::json::array();
  for (const auto& pose : spec.trajectory) j["trajectory"].push_back(pose_to_json(pose));
  return j;
}

inline NoiseModel noise_from_json(const nlohmann::json& j, NoiseModel base = {}) {
  base.sigma_disparity = j.value("sigma_disparity", base.sigma_disparity);
  base.dropout_grazing_deg = j.value("dropout_grazing_deg", base.dropout_grazing_deg);
  base.speckle_rate = j.value("speckle_rate", base.speckle_rate);
  base.seed = j.value("seed", base.seed);
  base.baseline = j.value("baseline", base.baseline);
  if (base.sigma_disparity < 0.0 || base.speckle_rate < 0.0 || base.speckle_rate > 1.0) {
    throw InvalidSpecError("noise model: sigma must be >= 0 and speckle_rate in [0, 1]");
  }
  return base;
}

inline nlohmann::json noise_to_json(const NoiseModel& m) {
  return {{"sigma_disparity", m.sigma_disparity}, {"dropout_grazing_deg", m.dropout_grazing_deg},
          {"speckle_rate", m.speckle_rate}, {"seed", m.seed}, {"baseline", m.baseline}};
}

}  // namespace depthforge::sim
