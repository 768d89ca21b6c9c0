#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "depthforge/camera.hpp"
#include "depthforge/errors.hpp"
#include "depthforge/frame_store.hpp"

namespace depthforge {

// Unit-norm descriptors (one column per valid pixel) with their 3D points.
struct DescriptorField {
  Eigen::MatrixXd descriptors;  // dim x count
  PointCloud points;
  std::vector<int> pixel_index;  // row-major pixel index in the source frame
  int width = 0;

  std::size_t size() const noexcept { return points.size(); }
  int dim() const noexcept { return static_cast<int>(descriptors.rows()); }
};

struct DescriptorOptions {
  int dim = 32;
  std::uint64_t projection_seed = 0x5eed;
};

namespace detail {

constexpr int kRawDescriptorDim = 25 + 3 + 1 + 2;

inline Eigen::MatrixXd random_projection(int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd p(dim, kRawDescriptorDim);
  for (int c = 0; c < p.cols(); ++c) {
    for (int r = 0; r < p.rows(); ++r) p(r, c) = normal(rng);
  }
  return p / std::sqrt(static_cast<double>(dim));
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

}  // namespace detail

// Per valid pixel: mean-subtracted 5x5 gray patch, depth normal, median-normalized
// depth and gray gradient magnitude at two scales, randomly projected to `dim`
// dimensions and L2-normalized.
inline DescriptorField compute_descriptors(const RgbdFrame& frame, const DescriptorOptions& opts = {}) {
  const DepthImage& depth = frame.depth;
  const int w = depth.width();
  const int h = depth.height();
  require_same_shape(depth, frame.color, "compute_descriptors");

  std::vector<double> valid_depths;
  for (double z : depth) {
    if (z > 0.0) valid_depths.push_back(z);
  }
  if (valid_depths.empty()) throw EmptyFieldError("compute_descriptors: frame has no valid depth");
  const double median = detail::median_of(valid_depths);

  Image<double> g(w, h);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = gray(frame.color[i]);
  auto gat = [&](int x, int y) { return g(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)); };

  const Eigen::MatrixXd projection = detail::random_projection(opts.dim, opts.projection_seed);
  DescriptorField field;
  field.width = w;
  field.descriptors.resize(opts.dim, static_cast<Eigen::Index>(valid_depths.size()));
  field.points.reserve(valid_depths.size());
  field.pixel_index.reserve(valid_depths.size());

  Eigen::Matrix<double, detail::kRawDescriptorDim, 1> raw;
  Eigen::Index col = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double z = depth(x, y);
      if (!(z > 0.0)) continue;
      int k = 0;
      double mean = 0.0;
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) mean += gat(x + dx, y + dy);
      }
      mean /= 25.0;
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) raw[k++] = gat(x + dx, y + dy) - mean;
      }
      const Eigen::Vector3d n = depth_normal(depth, frame.intr, x, y);
      raw[k++] = 0.5 * n.x();
      raw[k++] = 0.5 * n.y();
      raw[k++] = 0.5 * n.z();
      raw[k++] = 0.5 * (z / median - 1.0);
      const double g1x = 0.5 * (gat(x + 1, y) - gat(x - 1, y));
      const double g1y = 0.5 * (gat(x, y + 1) - gat(x, y - 1));
      const double g2x = 0.25 * (gat(x + 2, y) - gat(x - 2, y));
      const double g2y = 0.25 * (gat(x, y + 2) - gat(x, y - 2));
      raw[k++] = 2.0 * std::hypot(g1x, g1y);
      raw[k++] = 2.0 * std::hypot(g2x, g2y);

      Eigen::VectorXd d = projection * raw;
      const double norm = d.norm();
      if (norm > 1e-12) {
        d /= norm;
      } else {
        d.setZero();
        d[0] = 1.0;
      }
      field.descriptors.col(col++) = d;
      field.points.push_back({unproject_pixel(x, y, z, frame.intr), frame.color(x, y)});
      field.pixel_index.push_back(y * w + x);
    }
  }
  return field;
}

// 1 - d1/d2; an ambiguous pair with d2 == 0 gets weight 0.
inline double ratio_weight(double d1, double d2) {
  if (!(d2 > 0.0)) return 0.0;
  return std::clamp(1.0 - d1 / d2, 0.0, 1.0);
}

struct Correspondence {
  Point3Colored target;
  Point3Colored source;
  double weight = 0.0;
  int target_pixel = 0;
  int source_pixel = 0;
};

using CorrespondenceSet = std::vector<Correspondence>;

struct MatchOptions {
  // Pixel-grid subsampling of the candidate sets (1 keeps every pixel).
  int target_stride = 1;
  int source_stride = 1;
  // When set, only pairs whose 3D distance after mapping the source point by
  // source_to_target is below this radius are considered.
  std::optional<double> radius;
  PoseSE3 source_to_target;
  bool mutual = true;
};

namespace detail {

inline std::vector<Eigen::Index> stride_sample(const DescriptorField& f, int stride) {
  std::vector<Eigen::Index> idx;
  idx.reserve(f.size() / static_cast<std::size_t>(stride * stride) + 1);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const int p = f.pixel_index[i];
    if ((p % f.width) % stride == 0 && (p / f.width) % stride == 0) {
      idx.push_back(static_cast<Eigen::Index>(i));
    }
  }
  return idx;
}

struct Nearest {
  double d1 = std::numeric_limits<double>::infinity();
  double d2 = std::numeric_limits<double>::infinity();
  Eigen::Index best = -1;
  int best_pixel = std::numeric_limits<int>::max();
  int second_pixel = std::numeric_limits<int>::max();

  void offer(double d, Eigen::Index s, int pixel) {
    if (d < d1 || (d == d1 && pixel < best_pixel)) {
      d2 = d1;
      second_pixel = best_pixel;
      d1 = d;
      best = s;
      best_pixel = pixel;
    } else if (d < d2 || (d == d2 && pixel < second_pixel)) {
      d2 = d;
      second_pixel = pixel;
    }
  }
  bool has_two() const noexcept { return std::isfinite(d2); }
};

struct BestTarget {
  double d = std::numeric_limits<double>::infinity();
  Eigen::Index t = -1;
  int pixel = std::numeric_limits<int>::max();

  void offer(double dist, Eigen::Index target, int target_pixel) {
    if (dist < d || (dist == d && target_pixel < pixel)) {
      d = dist;
      t = target;
      pixel = target_pixel;
    }
  }
};

inline double unit_distance(double dot) { return std::sqrt(std::max(0.0, 2.0 - 2.0 * dot)); }

}  // namespace detail

// Ratio-test correspondences from target to source: each target descriptor's
// first and second nearest source descriptors give w = 1 - d1/d2; survivors of
// the mutual-nearest filter are ranked by w and the best top_k are kept.
inline CorrespondenceSet match(const DescriptorField& target, const DescriptorField& source,
                               std::size_t top_k, const MatchOptions& opts = {}) {
  if (target.size() == 0) throw EmptyFieldError("match: empty target descriptor field");
  if (top_k < 1) throw InputShapeError("match: top_k must be >= 1");
  if (target.dim() != source.dim()) throw InputShapeError("match: descriptor dimensions differ");
  const auto t_idx = detail::stride_sample(target, std::max(1, opts.target_stride));
  const auto s_idx = detail::stride_sample(source, std::max(1, opts.source_stride));
  if (s_idx.size() < 2) throw InsufficientSourceError("match: source needs at least 2 descriptors");

  std::vector<detail::Nearest> nearest(t_idx.size());
  std::vector<detail::BestTarget> reverse(s_idx.size());

  if (!opts.radius) {
    Eigen::MatrixXd s_desc(source.dim(), static_cast<Eigen::Index>(s_idx.size()));
    for (std::size_t j = 0; j < s_idx.size(); ++j) s_desc.col(static_cast<Eigen::Index>(j)) = source.descriptors.col(s_idx[j]);
    std::vector<int> s_pixel(s_idx.size());
    for (std::size_t j = 0; j < s_idx.size(); ++j) s_pixel[j] = source.pixel_index[static_cast<std::size_t>(s_idx[j])];
    // Track similarities (clamped dots) and convert to distances afterwards;
    // the map dot -> sqrt(2 - 2 dot) is decreasing so ranking is unchanged.
    std::vector<detail::Nearest> best_dot(t_idx.size());
    std::vector<detail::BestTarget> reverse_dot(s_idx.size());
    constexpr std::size_t kBlock = 256;
    Eigen::MatrixXd t_block;
    Eigen::MatrixXd dots;
    for (std::size_t b0 = 0; b0 < t_idx.size(); b0 += kBlock) {
      const std::size_t nb = std::min(kBlock, t_idx.size() - b0);
      t_block.resize(target.dim(), static_cast<Eigen::Index>(nb));
      for (std::size_t i = 0; i < nb; ++i) t_block.col(static_cast<Eigen::Index>(i)) = target.descriptors.col(t_idx[b0 + i]);
      dots.noalias() = s_desc.transpose() * t_block;
      for (std::size_t i = 0; i < nb; ++i) {
        const int t_pixel = target.pixel_index[static_cast<std::size_t>(t_idx[b0 + i])];
        const double* col = dots.col(static_cast<Eigen::Index>(i)).data();
        auto& nn = best_dot[b0 + i];
        for (std::size_t j = 0; j < s_idx.size(); ++j) {
          const double neg = -std::min(col[j], 1.0);
          if (neg <= nn.d2) nn.offer(neg, static_cast<Eigen::Index>(j), s_pixel[j]);
          if (neg <= reverse_dot[j].d) reverse_dot[j].offer(neg, static_cast<Eigen::Index>(b0 + i), t_pixel);
        }
      }
    }
    auto to_distance = [](double neg) { return std::isfinite(neg) ? detail::unit_distance(-neg) : neg; };
    for (std::size_t i = 0; i < t_idx.size(); ++i) {
      nearest[i] = best_dot[i];
      nearest[i].d1 = to_distance(best_dot[i].d1);
      nearest[i].d2 = to_distance(best_dot[i].d2);
    }
    for (std::size_t j = 0; j < s_idx.size(); ++j) {
      reverse[j] = reverse_dot[j];
      reverse[j].d = to_distance(reverse_dot[j].d);
    }
  } else {
    const double r = *opts.radius;
    const double inv_cell = 1.0 / r;
    auto cell_of = [&](const Eigen::Vector3d& p) {
      return std::array<std::int64_t, 3>{static_cast<std::int64_t>(std::floor(p.x() * inv_cell)),
                                         static_cast<std::int64_t>(std::floor(p.y() * inv_cell)),
                                         static_cast<std::int64_t>(std::floor(p.z() * inv_cell))};
    };
    auto key_of = [](std::int64_t x, std::int64_t y, std::int64_t z) {
      return (x * 73856093) ^ (y * 19349663) ^ (z * 83492791);
    };
    std::vector<Eigen::Vector3d> moved(s_idx.size());
    std::unordered_map<std::int64_t, std::vector<std::size_t>> grid;
    for (std::size_t j = 0; j < s_idx.size(); ++j) {
      moved[j] = opts.source_to_target * source.points[static_cast<std::size_t>(s_idx[j])].position;
      const auto c = cell_of(moved[j]);
      grid[key_of(c[0], c[1], c[2])].push_back(j);
    }
    // Targets grouped by cell share one candidate list and one descriptor product.
    std::map<std::array<std::int64_t, 3>, std::vector<std::size_t>> target_cells;
    for (std::size_t i = 0; i < t_idx.size(); ++i) {
      target_cells[cell_of(target.points[static_cast<std::size_t>(t_idx[i])].position)].push_back(i);
    }
    const double r2 = r * r;
    std::vector<std::size_t> candidates;
    Eigen::MatrixXd t_block;
    Eigen::MatrixXd s_block;
    Eigen::MatrixXd dots;
    for (const auto& [c, members] : target_cells) {
      candidates.clear();
      for (std::int64_t dz = -1; dz <= 1; ++dz) {
        for (std::int64_t dy = -1; dy <= 1; ++dy) {
          for (std::int64_t dx = -1; dx <= 1; ++dx) {
            const auto it = grid.find(key_of(c[0] + dx, c[1] + dy, c[2] + dz));
            if (it == grid.end()) continue;
            for (std::size_t j : it->second) {
              const auto cj = cell_of(moved[j]);
              if (cj[0] == c[0] + dx && cj[1] == c[1] + dy && cj[2] == c[2] + dz) candidates.push_back(j);
            }
          }
        }
      }
      if (candidates.empty()) continue;
      std::sort(candidates.begin(), candidates.end());
      t_block.resize(target.dim(), static_cast<Eigen::Index>(members.size()));
      for (std::size_t m = 0; m < members.size(); ++m) t_block.col(static_cast<Eigen::Index>(m)) = target.descriptors.col(t_idx[members[m]]);
      s_block.resize(source.dim(), static_cast<Eigen::Index>(candidates.size()));
      for (std::size_t n = 0; n < candidates.size(); ++n) s_block.col(static_cast<Eigen::Index>(n)) = source.descriptors.col(s_idx[candidates[n]]);
      dots.noalias() = s_block.transpose() * t_block;
      for (std::size_t m = 0; m < members.size(); ++m) {
        const std::size_t i = members[m];
        const Eigen::Vector3d& tp = target.points[static_cast<std::size_t>(t_idx[i])].position;
        const int t_pixel = target.pixel_index[static_cast<std::size_t>(t_idx[i])];
        for (std::size_t n = 0; n < candidates.size(); ++n) {
          const std::size_t j = candidates[n];
          if ((moved[j] - tp).squaredNorm() >= r2) continue;
          const double d = detail::unit_distance(dots(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m)));
          nearest[i].offer(d, static_cast<Eigen::Index>(j), source.pixel_index[static_cast<std::size_t>(s_idx[j])]);
          reverse[j].offer(d, static_cast<Eigen::Index>(i), t_pixel);
        }
      }
    }
  }

  CorrespondenceSet kept;
  for (std::size_t i = 0; i < t_idx.size(); ++i) {
    const auto& nn = nearest[i];
    if (nn.best < 0 || !nn.has_two()) continue;
    if (opts.mutual && reverse[static_cast<std::size_t>(nn.best)].t != static_cast<Eigen::Index>(i)) continue;
    const auto ti = static_cast<std::size_t>(t_idx[i]);
    const auto si = static_cast<std::size_t>(s_idx[static_cast<std::size_t>(nn.best)]);
    kept.push_back({target.points[ti], source.points[si], ratio_weight(nn.d1, nn.d2),
                    target.pixel_index[ti], source.pixel_index[si]});
  }
  std::sort(kept.begin(), kept.end(), [](const Correspondence& a, const Correspondence& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    if (a.target_pixel != b.target_pixel) return a.target_pixel < b.target_pixel;
    return a.source_pixel < b.source_pixel;
  });
  if (kept.size() > top_k) kept.resize(top_k);
  return kept;
}

}  // namespace depthforge
