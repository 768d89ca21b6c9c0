#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "depthforge/errors.hpp"
#include "depthforge/image.hpp"

namespace depthforge {

using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;

// Pinhole intrinsics. Pixel centers sit at integer coordinates.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  bool valid() const noexcept {
    return fx > 0.0 && fy > 0.0 && width >= 1 && height >= 1 && cx >= 0.0 &&
           cx < width && cy >= 0.0 && cy < height && std::isfinite(fx) &&
           std::isfinite(fy);
  }

  void validate() const {
    if (!valid()) {
      throw InputShapeError("invalid intrinsics: fx=" + std::to_string(fx) +
                            " fy=" + std::to_string(fy) + " cx=" + std::to_string(cx) +
                            " cy=" + std::to_string(cy) + " size=" + std::to_string(width) +
                            "x" + std::to_string(height));
    }
  }

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

inline Intrinsics scale_intrinsics(const Intrinsics& intr, int new_width, int new_height) {
  if (new_width < 1 || new_height < 1) {
    throw InputShapeError("scale_intrinsics: target size must be at least 1x1");
  }
  const double sx = static_cast<double>(new_width) / intr.width;
  const double sy = static_cast<double>(new_height) / intr.height;
  return Intrinsics{intr.fx * sx, intr.fy * sy, intr.cx * sx, intr.cy * sy, new_width,
                    new_height};
}

// Skew-symmetric cross-product matrix.
inline Eigen::Matrix3d hat(const Eigen::Vector3d& w) {
  Eigen::Matrix3d k;
  k << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return k;
}

// Rigid transform x -> R x + t.
class PoseSE3 {
 public:
  PoseSE3() : rotation_(Eigen::Matrix3d::Identity()), translation_(Eigen::Vector3d::Zero()) {}
  PoseSE3(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
      : rotation_(rotation), translation_(translation) {}

  static PoseSE3 identity() { return {}; }

  // Rejects matrices whose rotation block is not a proper rotation to 1e-9.
  static PoseSE3 from_matrix(const Eigen::Matrix4d& m) {
    const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
    const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    const double det = r.determinant();
    if (!(ortho < 1e-9) || std::abs(det - 1.0) > 1e-9) {
      throw InputShapeError("pose matrix rotation block is not orthonormal with det +1");
    }
    return {r, m.topRightCorner<3, 1>()};
  }

  const Eigen::Matrix3d& rotation() const noexcept { return rotation_; }
  const Eigen::Vector3d& translation() const noexcept { return translation_; }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation_;
    m.topRightCorner<3, 1>() = translation_;
    return m;
  }

  Eigen::Vector3d operator*(const Eigen::Vector3d& x) const { return rotation_ * x + translation_; }

  PoseSE3 operator*(const PoseSE3& other) const {
    return {rotation_ * other.rotation_, rotation_ * other.translation_ + translation_};
  }

  PoseSE3 inverse() const {
    const Eigen::Matrix3d rt = rotation_.transpose();
    return {rt, -(rt * translation_)};
  }

  // Geodesic rotation angle in radians.
  double angle() const {
    const double c = std::clamp((rotation_.trace() - 1.0) * 0.5, -1.0, 1.0);
    return std::acos(c);
  }

 private:
  Eigen::Matrix3d rotation_;
  Eigen::Vector3d translation_;
};

inline PoseSE3 compose(const PoseSE3& a, const PoseSE3& b) { return a * b; }
inline PoseSE3 inverse(const PoseSE3& p) { return p.inverse(); }

// Rotation error between two poses in radians and translation error in meters.
struct PoseError {
  double rotation_rad = 0.0;
  double translation_m = 0.0;
};

inline PoseError pose_error(const PoseSE3& estimate, const PoseSE3& truth) {
  const PoseSE3 delta = estimate.inverse() * truth;
  return {delta.angle(), (estimate.translation() - truth.translation()).norm()};
}

// se(3) tangent vector: rotation (axis * angle, radians) then translation (meters).
struct Twist {
  Vector6d coeffs = Vector6d::Zero();

  Twist() = default;
  explicit Twist(const Vector6d& c) : coeffs(c) {}
  Twist(const Eigen::Vector3d& rotation, const Eigen::Vector3d& translation) {
    coeffs << rotation, translation;
  }

  Eigen::Vector3d rotation() const { return coeffs.head<3>(); }
  Eigen::Vector3d translation() const { return coeffs.tail<3>(); }
};

inline PoseSE3 se3_exp(const Twist& tw) {
  const Eigen::Vector3d w = tw.rotation();
  const Eigen::Vector3d v = tw.translation();
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Eigen::Matrix3d k = hat(w);
  const Eigen::Matrix3d k2 = k * k;
  double a, b, c;  // sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3
  if (theta < 1e-5) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
    c = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
    c = (theta - std::sin(theta)) / (theta2 * theta);
  }
  const Eigen::Matrix3d r = Eigen::Matrix3d::Identity() + a * k + b * k2;
  const Eigen::Matrix3d jac = Eigen::Matrix3d::Identity() + b * k + c * k2;
  return {r, jac * v};
}

inline Twist se3_log(const PoseSE3& pose) {
  const Eigen::Matrix3d& r = pose.rotation();
  const double theta = pose.angle();
  if (theta > std::numbers::pi - 1e-6) {
    throw NonUniqueLogError("se3_log: rotation angle too close to pi for a unique logarithm");
  }
  const Eigen::Vector3d skew(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double theta2 = theta * theta;
  Eigen::Vector3d w;
  double d;  // coefficient of K^2 in the inverse left Jacobian
  if (theta < 1e-5) {
    w = 0.5 * (1.0 + theta2 / 6.0) * skew;
    d = 1.0 / 12.0 + theta2 / 720.0;
  } else {
    w = theta / (2.0 * std::sin(theta)) * skew;
    d = (1.0 - theta * std::sin(theta) / (2.0 * (1.0 - std::cos(theta)))) / theta2;
  }
  const Eigen::Matrix3d k = hat(w);
  const Eigen::Matrix3d jac_inv = Eigen::Matrix3d::Identity() - 0.5 * k + d * k * k;
  return {w, jac_inv * pose.translation()};
}

struct Point3Colored {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Color color = Color::Zero();
};

using PointCloud = std::vector<Point3Colored>;

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double z = 0.0;
};

inline Projection project(const Eigen::Vector3d& point, const Intrinsics& intr) {
  if (!(point.z() > 0.0)) {
    throw BehindCameraError("project: point has non-positive depth " + std::to_string(point.z()));
  }
  return {intr.fx * point.x() / point.z() + intr.cx, intr.fy * point.y() / point.z() + intr.cy,
          point.z()};
}

inline Eigen::Vector3d unproject_pixel(double u, double v, double z, const Intrinsics& intr) {
  return {(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z};
}

// One point per nonzero depth pixel, in row-major pixel order.
inline PointCloud unproject(const DepthImage& depth, const ColorImage& color,
                            const Intrinsics& intr) {
  require_same_shape(depth, color, "unproject");
  if (depth.width() != intr.width || depth.height() != intr.height) {
    throw InputShapeError("unproject: depth size does not match intrinsics");
  }
  PointCloud cloud;
  cloud.reserve(count_valid(depth));
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      const double z = depth(x, y);
      if (z > 0.0) cloud.push_back({unproject_pixel(x, y, z, intr), color(x, y)});
    }
  }
  return cloud;
}

inline PointCloud transform(const PointCloud& cloud, const PoseSE3& pose) {
  PointCloud out;
  out.reserve(cloud.size());
  for (const auto& p : cloud) out.push_back({pose * p.position, p.color});
  return out;
}

namespace detail {

// Central difference of 3D points along one image axis, one-sided at holes/borders.
inline std::optional<Eigen::Vector3d> point_derivative(const DepthImage& depth, const Intrinsics& intr,
                                                       int x, int y, int dx, int dy) {
  auto point_at = [&](int px, int py) -> std::optional<Eigen::Vector3d> {
    if (!depth.contains(px, py) || !(depth(px, py) > 0.0)) return std::nullopt;
    return unproject_pixel(px, py, depth(px, py), intr);
  };
  const auto center = point_at(x, y);
  const auto fwd = point_at(x + dx, y + dy);
  const auto bwd = point_at(x - dx, y - dy);
  if (fwd && bwd) return (*fwd - *bwd) * 0.5;
  if (fwd && center) return *fwd - *center;
  if (bwd && center) return *center - *bwd;
  return std::nullopt;
}

}  // namespace detail

// Camera-facing unit normal from depth, or zero when the neighborhood is too sparse.
inline Eigen::Vector3d depth_normal(const DepthImage& depth, const Intrinsics& intr, int x, int y) {
  const auto du = detail::point_derivative(depth, intr, x, y, 1, 0);
  const auto dv = detail::point_derivative(depth, intr, x, y, 0, 1);
  if (!du || !dv) return Eigen::Vector3d::Zero();
  Eigen::Vector3d n = du->cross(*dv);
  const double norm = n.norm();
  if (!(norm > 0.0)) return Eigen::Vector3d::Zero();
  n /= norm;
  if (n.dot(unproject_pixel(x, y, depth(x, y), intr)) > 0.0) n = -n;
  return n;
}

}  // namespace depthforge
