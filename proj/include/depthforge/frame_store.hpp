#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "depthforge/camera.hpp"
#include "depthforge/errors.hpp"
#include "depthforge/image.hpp"
#include "depthforge/png_io.hpp"

namespace depthforge {

struct RgbdFrame {
  long id = 0;
  ColorImage color;
  DepthImage depth;  // meters, 0 = missing
  Intrinsics intr;

  int width() const noexcept { return depth.width(); }
  int height() const noexcept { return depth.height(); }

  PointCloud cloud() const { return unproject(depth, color, intr); }
};

// A target frame and its fixed-offset neighbors; offsets[j] = neighbors[j].id - target.id.
struct LocalFrameSet {
  RgbdFrame target;
  std::vector<RgbdFrame> neighbors;
  std::vector<int> offsets;

  std::size_t size() const noexcept { return neighbors.size(); }
};

// Estimated neighbor-to-target transforms; the target's own pose is the identity.
struct FrameSetPoses {
  std::vector<PoseSE3> neighbor_to_target;
  std::vector<bool> excluded;

  FrameSetPoses() = default;
  explicit FrameSetPoses(std::size_t k)
      : neighbor_to_target(k, PoseSE3::identity()), excluded(k, false) {}

  static PoseSE3 target() { return PoseSE3::identity(); }
  std::size_t size() const noexcept { return neighbor_to_target.size(); }
};

struct PatchPair {
  DepthImage input_patch;
  DepthImage gt_patch;
  long source_id = 0;
  int origin_x = 0;
  int origin_y = 0;
};

// Nearest-neighbor resampling with the pixel mapping implied by scale_intrinsics
// (destination x samples source x * src_w / dst_w), so missing depth never mixes.
inline DepthImage resize_depth(const DepthImage& src, int width, int height) {
  if (src.width() == width && src.height() == height) return src;
  DepthImage dst(width, height);
  const double sx = static_cast<double>(src.width()) / width;
  const double sy = static_cast<double>(src.height()) / height;
  for (int y = 0; y < height; ++y) {
    const int ys = std::clamp(static_cast<int>(std::lround(y * sy)), 0, src.height() - 1);
    for (int x = 0; x < width; ++x) {
      const int xs = std::clamp(static_cast<int>(std::lround(x * sx)), 0, src.width() - 1);
      dst(x, y) = src(xs, ys);
    }
  }
  return dst;
}

// Bilinear resampling on the same pixel mapping as resize_depth.
inline ColorImage resize_color(const ColorImage& src, int width, int height) {
  if (src.width() == width && src.height() == height) return src;
  ColorImage dst(width, height);
  const double sx = static_cast<double>(src.width()) / width;
  const double sy = static_cast<double>(src.height()) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp(y * sy, 0.0, src.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double ay = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp(x * sx, 0.0, src.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double ax = fx - x0;
      dst(x, y) = (1 - ay) * ((1 - ax) * src(x0, y0) + ax * src(x1, y0)) +
                  ay * ((1 - ax) * src(x0, y1) + ax * src(x1, y1));
    }
  }
  return dst;
}

inline RgbdFrame resize_frame(const RgbdFrame& frame, int width, int height) {
  if (frame.width() == width && frame.height() == height) return frame;
  return {frame.id, resize_color(frame.color, width, height),
          resize_depth(frame.depth, width, height),
          scale_intrinsics(frame.intr, width, height)};
}

struct StreamOptions {
  // 0 keeps the native depth resolution.
  int working_width = 256;
  int working_height = 256;
};

// intrinsics.txt: 9 reals (row-major 3x3 K), optional trailing "width height".
struct IntrinsicsFile {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::optional<std::pair<int, int>> size;
};

inline IntrinsicsFile read_intrinsics_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(-1, "missing intrinsics file " + path.string());
  std::vector<double> values;
  double v;
  while (in >> v) values.push_back(v);
  if (values.size() != 9 && values.size() != 11) {
    throw LoadError(-1, "intrinsics file must hold 9 reals plus an optional width height pair: " +
                            path.string());
  }
  IntrinsicsFile k;
  k.fx = values[0];
  k.cx = values[2];
  k.fy = values[4];
  k.cy = values[5];
  if (values.size() == 11) k.size = std::pair{static_cast<int>(values[9]), static_cast<int>(values[10])};
  return k;
}

inline void write_intrinsics_file(const std::filesystem::path& path, const Intrinsics& intr) {
  std::ofstream out(path);
  out.precision(17);
  out << intr.fx << " 0 " << intr.cx << "\n0 " << intr.fy << " " << intr.cy << "\n0 0 1\n"
      << intr.width << " " << intr.height << "\n";
  if (!out) throw Error("failed writing " + path.string());
}

inline std::string frame_filename(long id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06ld.png", id);
  return buf;
}

// Parses "%06d.png"-style names; anything else is ignored.
inline std::optional<long> parse_frame_id(const std::filesystem::path& file) {
  if (file.extension() != ".png") return std::nullopt;
  const std::string stem = file.stem().string();
  if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  long id = 0;
  std::from_chars(stem.data(), stem.data() + stem.size(), id);
  return id;
}

inline std::vector<long> list_frame_ids(const std::filesystem::path& dir) {
  std::vector<long> ids;
  if (!std::filesystem::is_directory(dir)) return ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (auto id = parse_frame_id(entry.path())) ids.push_back(*id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::vector<RgbdFrame> load_stream(const std::filesystem::path& root,
                                          const StreamOptions& opts = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw LoadError(-1, "not a directory: " + root.string());
  const std::vector<long> ids = list_frame_ids(root / "depth");
  if (ids.empty()) return {};

  const IntrinsicsFile kfile = read_intrinsics_file(root / "intrinsics.txt");
  std::vector<RgbdFrame> frames;
  frames.reserve(ids.size());
  for (long id : ids) {
    RgbdFrame frame;
    frame.id = id;
    const fs::path color_path = root / "color" / frame_filename(id);
    try {
      frame.depth = io::read_depth_png(root / "depth" / frame_filename(id));
      if (!fs::exists(color_path)) throw LoadError(id, "missing color image " + color_path.string());
      frame.color = io::read_color_png(color_path);
    } catch (const LoadError&) {
      throw;
    } catch (const Error& e) {
      throw LoadError(id, e.what());
    }
    const int w = frame.depth.width();
    const int h = frame.depth.height();
    if (kfile.size && (kfile.size->first != w || kfile.size->second != h)) {
      throw LoadError(id, "depth size " + std::to_string(w) + "x" + std::to_string(h) +
                              " does not match intrinsics size");
    }
    frame.intr = Intrinsics{kfile.fx, kfile.fy, kfile.cx, kfile.cy, w, h};
    if (!frame.intr.valid()) throw LoadError(id, "intrinsics invalid for the depth resolution");
    if (!frame.color.same_shape(frame.depth)) frame.color = resize_color(frame.color, w, h);
    for (double& z : frame.depth) {
      if (z > 20.0) z = 0.0;
    }
    if (opts.working_width > 0 && opts.working_height > 0) {
      frame = resize_frame(frame, opts.working_width, opts.working_height);
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

struct FrameSetOptions {
  int k_half = 3;
  int interval = 2;
  int target_stride = 1;
  // Targets with a larger missing-depth ratio are skipped.
  double max_target_missing = 0.9;
};

inline std::vector<int> neighbor_offsets(int k_half, int interval) {
  std::vector<int> offsets;
  for (int s = k_half; s >= 1; --s) offsets.push_back(-s * interval);
  for (int s = 1; s <= k_half; ++s) offsets.push_back(s * interval);
  return offsets;
}

inline std::vector<LocalFrameSet> build_frame_sets(const std::vector<RgbdFrame>& stream,
                                                   const FrameSetOptions& opts = {}) {
  if (opts.k_half < 1 || opts.interval < 1 || opts.target_stride < 1) {
    throw InputShapeError("build_frame_sets: k_half, interval and target_stride must be >= 1");
  }
  std::map<long, std::size_t> by_id;
  for (std::size_t i = 0; i < stream.size(); ++i) by_id.emplace(stream[i].id, i);
  const std::vector<int> offsets = neighbor_offsets(opts.k_half, opts.interval);

  std::vector<LocalFrameSet> sets;
  std::size_t eligible = 0;
  for (const RgbdFrame& target : stream) {
    const bool complete = std::all_of(offsets.begin(), offsets.end(), [&](int off) {
      auto it = by_id.find(target.id + off);
      return it != by_id.end() && stream[it->second].depth.same_shape(target.depth);
    });
    if (!complete) continue;
    if (missing_ratio(target.depth) > opts.max_target_missing) continue;
    if (eligible++ % static_cast<std::size_t>(opts.target_stride) != 0) continue;
    LocalFrameSet set;
    set.target = target;
    set.offsets = offsets;
    for (int off : offsets) set.neighbors.push_back(stream[by_id.at(target.id + off)]);
    sets.push_back(std::move(set));
  }
  return sets;
}

struct PatchOptions {
  int n_crops = 6;
  int patch_size = 128;
  double max_missing_ratio = 0.05;
  int max_retries = 50;
  std::uint64_t seed = 0;
};

inline DepthImage crop(const DepthImage& src, int x0, int y0, int w, int h) {
  DepthImage out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out(x, y) = src(x0 + x, y0 + y);
  }
  return out;
}

// Seeded random crops whose GT missing ratio is strictly below the threshold.
inline std::vector<PatchPair> extract_patches(const DepthImage& input, const DepthImage& gt,
                                              const PatchOptions& opts, long source_id = 0) {
  require_same_shape(input, gt, "extract_patches");
  const int p = opts.patch_size;
  if (p < 1 || p > gt.width() || p > gt.height()) {
    throw InputShapeError("extract_patches: patch size " + std::to_string(p) +
                          " exceeds image " + std::to_string(gt.width()) + "x" +
                          std::to_string(gt.height()));
  }
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<int> ox(0, gt.width() - p);
  std::uniform_int_distribution<int> oy(0, gt.height() - p);
  std::vector<PatchPair> out;
  for (int c = 0; c < opts.n_crops; ++c) {
    for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
      const int x0 = ox(rng);
      const int y0 = oy(rng);
      DepthImage g = crop(gt, x0, y0, p, p);
      if (missing_ratio(g) < opts.max_missing_ratio) {
        out.push_back({crop(input, x0, y0, p, p), std::move(g), source_id, x0, y0});
        break;
      }
    }
  }
  return out;
}

}  // namespace depthforge
