#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <tuple>
#include <vector>

#include "depthforge/camera.hpp"
#include "depthforge/frame_store.hpp"
#include "depthforge/image.hpp"

namespace depthforge {

// Left uninitialized on purpose so large buffers allocate without a fill pass.
struct Splat {
  double z;
  double sq_dist;  // squared pixel distance from the projected point to the pixel center
  std::uint32_t point_index;  // color and position are looked up in the source cloud

  // Total order used for retention; independent of insertion order.
  friend bool operator<(const Splat& a, const Splat& b) {
    return std::tie(a.z, a.sq_dist, a.point_index) < std::tie(b.z, b.sq_dist, b.point_index);
  }
};

// Per pixel, the up-to-m nearest-in-z splats, sorted ascending by (z, sq_dist, point index).
class SplatBuffer {
 public:
  SplatBuffer() = default;
  SplatBuffer(int width, int height, double radius, int max_splats)
      : width_(width), height_(height), radius_(radius), max_splats_(max_splats),
        counts_(static_cast<std::size_t>(width) * height, 0),
        slots_(new Splat[static_cast<std::size_t>(width) * height * max_splats]) {}

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  double radius() const noexcept { return radius_; }
  int max_splats() const noexcept { return max_splats_; }

  std::span<const Splat> at(int x, int y) const {
    const std::size_t i = static_cast<std::size_t>(y) * width_ + x;
    return {slots_.get() + i * max_splats_, counts_[i]};
  }

  void insert(int x, int y, const Splat& s) {
    const std::size_t i = static_cast<std::size_t>(y) * width_ + x;
    Splat* list = slots_.get() + i * max_splats_;
    std::uint16_t& n = counts_[i];
    int pos;
    if (n < max_splats_) {
      pos = n++;
    } else if (s < list[n - 1]) {
      pos = n - 1;
    } else {
      return;
    }
    while (pos > 0 && s < list[pos - 1]) {
      list[pos] = list[pos - 1];
      --pos;
    }
    list[pos] = s;
  }

  std::size_t covered_pixels() const {
    return static_cast<std::size_t>(
        std::count_if(counts_.begin(), counts_.end(), [](auto c) { return c > 0; }));
  }

 private:
  int width_ = 0;
  int height_ = 0;
  double radius_ = 1.0;
  int max_splats_ = 1;
  std::vector<std::uint16_t> counts_;
  std::unique_ptr<Splat[]> slots_;
};

namespace detail {

// Integer floor/ceil for values well inside the int range.
inline int floor_int(double a) {
  const int t = static_cast<int>(a);
  return t > a ? t - 1 : t;
}
inline int ceil_int(double a) {
  const int t = static_cast<int>(a);
  return t < a ? t + 1 : t;
}

}  // namespace detail

// Each point splats onto every in-bounds integer pixel center strictly within
// radius pixels of its projection. Points with z <= 0 are dropped.
inline SplatBuffer rasterize_points(const PointCloud& cloud, const Intrinsics& intr,
                                    double radius = 1.0, int max_splats = 8) {
  if (!(radius > 0.0) || max_splats < 1) {
    throw InputShapeError("rasterize_points: radius must be > 0 and m >= 1");
  }
  SplatBuffer buffer(intr.width, intr.height, radius, max_splats);
  const double r2 = radius * radius;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d& p = cloud[i].position;
    if (!(p.z() > 0.0)) continue;
    const double inv_z = 1.0 / p.z();
    const double u = intr.fx * p.x() * inv_z + intr.cx;
    const double v = intr.fy * p.y() * inv_z + intr.cy;
    if (!(u > -radius - 1.0 && u < intr.width + radius && v > -radius - 1.0 && v < intr.height + radius)) continue;
    const int x_lo = std::max(0, detail::ceil_int(u - radius));
    const int x_hi = std::min(intr.width - 1, detail::floor_int(u + radius));
    const int y_lo = std::max(0, detail::ceil_int(v - radius));
    const int y_hi = std::min(intr.height - 1, detail::floor_int(v + radius));
    for (int y = y_lo; y <= y_hi; ++y) {
      const double dy = y - v;
      for (int x = x_lo; x <= x_hi; ++x) {
        const double dx = x - u;
        const double sq = dx * dx + dy * dy;
        if (sq < r2) buffer.insert(x, y, {p.z(), sq, static_cast<std::uint32_t>(i)});
      }
    }
  }
  return buffer;
}

struct FuseOptions {
  // Drop splats deeper than the pixel's nearest splat by more than this (meters); 0 disables.
  double z_gate = 0.0;
};

struct FusedDepth {
  DepthImage depth;          // 0 where no splat landed
  Image<double> weight_sum;  // sum of raw exponential weights per pixel
  double coverage = 0.0;     // fraction of pixels with at least one splat
};

// Exponentially weighted splat average per pixel:
//   w_k = exp(-sq_dist_k / R^2),  depth = sum_k (w_k / sum_j w_j) z_k
inline FusedDepth fuse_depth(const SplatBuffer& buffer, const FuseOptions& opts = {}) {
  const int w = buffer.width();
  const int h = buffer.height();
  const double inv_r2 = 1.0 / (buffer.radius() * buffer.radius());
  FusedDepth out{DepthImage(w, h), Image<double>(w, h), 0.0};
  std::size_t covered = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto splats = buffer.at(x, y);
      if (splats.empty()) continue;
      const double z_max = opts.z_gate > 0.0 ? splats.front().z + opts.z_gate : INFINITY;
      double wsum = 0.0;
      double zsum = 0.0;
      for (const Splat& s : splats) {
        if (s.z > z_max) break;
        const double wk = std::exp(-s.sq_dist * inv_r2);
        wsum += wk;
        zsum += wk * s.z;
      }
      out.depth(x, y) = zsum / wsum;
      out.weight_sum(x, y) = wsum;
      ++covered;
    }
  }
  out.coverage = w * h > 0 ? static_cast<double>(covered) / (static_cast<double>(w) * h) : 0.0;
  return out;
}

struct RenderedView {
  DepthImage depth;  // 0 = not covered
  ColorImage color;  // meaningful where depth > 0
};

// Rasterize then fuse; color uses the same normalized weights as depth.
inline RenderedView render_view(const PointCloud& cloud, const Intrinsics& intr,
                                double radius = 1.0, int max_splats = 8) {
  const SplatBuffer buffer = rasterize_points(cloud, intr, radius, max_splats);
  const double inv_r2 = 1.0 / (radius * radius);
  RenderedView view{DepthImage(intr.width, intr.height), ColorImage(intr.width, intr.height, Color::Zero())};
  for (int y = 0; y < intr.height; ++y) {
    for (int x = 0; x < intr.width; ++x) {
      const auto splats = buffer.at(x, y);
      if (splats.empty()) continue;
      double wsum = 0.0;
      double zsum = 0.0;
      Color csum = Color::Zero();
      for (const Splat& s : splats) {
        const double wk = std::exp(-s.sq_dist * inv_r2);
        wsum += wk;
        zsum += wk * s.z;
        csum += wk * cloud[s.point_index].color;
      }
      view.depth(x, y) = zsum / wsum;
      view.color(x, y) = csum / wsum;
    }
  }
  return view;
}

inline DepthImage render_depth(const PointCloud& cloud, const Intrinsics& intr,
                               double radius = 1.0, int max_splats = 8) {
  return fuse_depth(rasterize_points(cloud, intr, radius, max_splats)).depth;
}

struct RenderedColor {
  ColorImage color;
  Mask covered;
};

inline RenderedColor render_color(const PointCloud& cloud, const Intrinsics& intr,
                                  double radius = 1.0, int max_splats = 8) {
  RenderedView view = render_view(cloud, intr, radius, max_splats);
  Mask covered(intr.width, intr.height, 0);
  for (std::size_t i = 0; i < covered.size(); ++i) covered[i] = view.depth[i] > 0.0 ? 1 : 0;
  return {std::move(view.color), std::move(covered)};
}

struct FusionOptions {
  double radius = 1.0;
  int max_splats = 8;
  double z_gate = 0.0;
};

struct GtDepth {
  FusedDepth fused;
  // Set when every neighbor was excluded and the result is the target's self-render.
  bool self_render_only = false;
};

// Merge the target cloud with every non-excluded aligned neighbor cloud and fuse
// into the target view.
inline GtDepth generate_gt_depth(const LocalFrameSet& set, const FrameSetPoses& poses,
                                 const FusionOptions& opts = {}) {
  if (poses.size() != set.neighbors.size()) {
    throw InputShapeError("generate_gt_depth: one pose per neighbor required");
  }
  PointCloud merged = set.target.cloud();
  std::size_t used = 0;
  for (std::size_t j = 0; j < set.neighbors.size(); ++j) {
    if (poses.excluded[j]) continue;
    const PointCloud moved = transform(set.neighbors[j].cloud(), poses.neighbor_to_target[j]);
    merged.insert(merged.end(), moved.begin(), moved.end());
    ++used;
  }
  const SplatBuffer buffer = rasterize_points(merged, set.target.intr, opts.radius, opts.max_splats);
  return {fuse_depth(buffer, FuseOptions{opts.z_gate}), used == 0};
}

}  // namespace depthforge
