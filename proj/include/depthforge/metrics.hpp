#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthforge/errors.hpp"
#include "depthforge/image.hpp"

namespace depthforge {

// Pixels that are nonzero in both images.
inline Mask intersection_mask(const DepthImage& a, const DepthImage& b) {
  require_same_shape(a, b, "intersection_mask");
  Mask m(a.width(), a.height(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (a[i] > 0.0 && b[i] > 0.0) ? 1 : 0;
  return m;
}

inline std::size_t mask_count(const Mask& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), static_cast<unsigned char>(1)));
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double min_coverage = 0.5;
};

// Mean local SSIM with a Gaussian window restricted to the mask. Local statistics
// use the masked window weights renormalized to one; windows whose masked weight
// is below min_coverage of the full kernel are skipped. The dynamic range L is
// the largest depth on the mask over both images.
inline double ssim(const DepthImage& a, const DepthImage& b, const Mask& mask, const SsimOptions& opts = {}) {
  require_same_shape(a, b, "ssim");
  require_same_shape(a, mask, "ssim");
  if (mask_count(mask) == 0) throw UndefinedMetricError("ssim: empty mask");

  const int half = opts.window / 2;
  std::vector<double> kernel(static_cast<std::size_t>(opts.window * opts.window));
  double ksum = 0.0;
  for (int dy = -half; dy <= half; ++dy) {
    for (int dx = -half; dx <= half; ++dx) {
      const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * opts.sigma * opts.sigma));
      kernel[static_cast<std::size_t>((dy + half) * opts.window + dx + half)] = g;
      ksum += g;
    }
  }
  for (double& g : kernel) g /= ksum;

  double range = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask[i]) range = std::max({range, a[i], b[i]});
  }
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);

  const int w = a.width();
  const int h = a.height();
  double total = 0.0;
  std::size_t windows = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double wsum = 0.0;
      double sa = 0.0;
      double sb = 0.0;
      for (int dy = -half; dy <= half; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -half; dx <= half; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w || !mask(xx, yy)) continue;
          const double g = kernel[static_cast<std::size_t>((dy + half) * opts.window + dx + half)];
          wsum += g;
          sa += g * a(xx, yy);
          sb += g * b(xx, yy);
        }
      }
      if (wsum <= 0.0 || wsum < opts.min_coverage) continue;
      const double mu_a = sa / wsum;
      const double mu_b = sb / wsum;
      double vaa = 0.0;
      double vbb = 0.0;
      double vab = 0.0;
      for (int dy = -half; dy <= half; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -half; dx <= half; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w || !mask(xx, yy)) continue;
          const double g = kernel[static_cast<std::size_t>((dy + half) * opts.window + dx + half)];
          const double da = a(xx, yy) - mu_a;
          const double db = b(xx, yy) - mu_b;
          vaa += g * da * da;
          vbb += g * db * db;
          vab += g * da * db;
        }
      }
      vaa /= wsum;
      vbb /= wsum;
      vab /= wsum;
      const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * vab + c2);
      const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (vaa + vbb + c2);
      total += num / den;
      ++windows;
    }
  }
  if (windows == 0) throw UndefinedMetricError("ssim: no window reaches the coverage threshold");
  return total / static_cast<double>(windows);
}

inline double ssim(const DepthImage& a, const DepthImage& b, const SsimOptions& opts = {}) {
  return ssim(a, b, intersection_mask(a, b), opts);
}

inline double rmse(const DepthImage& a, const DepthImage& b, const Mask& mask) {
  require_same_shape(a, b, "rmse");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    const double d = a[i] - b[i];
    sum += d * d;
    ++n;
  }
  if (n == 0) throw UndefinedMetricError("rmse: empty mask");
  return std::sqrt(sum / static_cast<double>(n));
}

inline double mae(const DepthImage& a, const DepthImage& b, const Mask& mask) {
  require_same_shape(a, b, "mae");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    sum += std::abs(a[i] - b[i]);
    ++n;
  }
  if (n == 0) throw UndefinedMetricError("mae: empty mask");
  return sum / static_cast<double>(n);
}

inline double rmse(const DepthImage& a, const DepthImage& b) { return rmse(a, b, intersection_mask(a, b)); }
inline double mae(const DepthImage& a, const DepthImage& b) { return mae(a, b, intersection_mask(a, b)); }

// Gradient magnitude by central differences, one-sided where a neighbor is
// missing or outside the image; missing pixels have gradient 0.
inline Image<double> gradient_magnitude(const DepthImage& d) {
  const int w = d.width();
  const int h = d.height();
  Image<double> out(w, h);
  auto valid = [&](int x, int y) { return d.contains(x, y) && d(x, y) > 0.0; };
  auto derivative = [&](int x, int y, int dx, int dy) {
    const bool f = valid(x + dx, y + dy);
    const bool b = valid(x - dx, y - dy);
    if (f && b) return 0.5 * (d(x + dx, y + dy) - d(x - dx, y - dy));
    if (f) return d(x + dx, y + dy) - d(x, y);
    if (b) return d(x, y) - d(x - dx, y - dy);
    return 0.0;
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!valid(x, y)) continue;
      out(x, y) = std::hypot(derivative(x, y, 1, 0), derivative(x, y, 0, 1));
    }
  }
  return out;
}

// Windowed maximum over a (2r+1)^2 neighborhood clipped at the borders.
inline Image<double> window_max(const Image<double>& src, int window) {
  const int r = window / 2;
  const int w = src.width();
  const int h = src.height();
  Image<double> rows(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m = src(x, y);
      for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) m = std::max(m, src(xx, y));
      rows(x, y) = m;
    }
  }
  Image<double> out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double m = rows(x, y);
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) m = std::max(m, rows(x, yy));
      out(x, y) = m;
    }
  }
  return out;
}

// Mean over all pixels of (max-window |grad pred| - max-window |grad ref|)^2.
inline double structure_loss(const DepthImage& pred, const DepthImage& ref, int window = 5) {
  require_same_shape(pred, ref, "structure_loss");
  if (pred.empty()) return 0.0;
  const Image<double> mp = window_max(gradient_magnitude(pred), window);
  const Image<double> mr = window_max(gradient_magnitude(ref), window);
  double sum = 0.0;
  for (std::size_t i = 0; i < mp.size(); ++i) {
    const double d = mp[i] - mr[i];
    sum += d * d;
  }
  return sum / static_cast<double>(mp.size());
}

struct MetricsReport {
  double ssim = 0.0;
  double rmse = 0.0;            // meters
  double mae = 0.0;             // meters
  double structure_loss = 0.0;  // meters^2 / px^2
  std::size_t valid_pixels = 0;
  std::string mask_policy = "intersection";

  nlohmann::json to_json() const {
    return {{"ssim", ssim},
            {"rmse", rmse},
            {"mae", mae},
            {"structure_loss", structure_loss},
            {"valid_pixels", valid_pixels},
            {"mask_policy", mask_policy}};
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.ssim = j.at("ssim").get<double>();
    r.rmse = j.at("rmse").get<double>();
    r.mae = j.at("mae").get<double>();
    r.structure_loss = j.at("structure_loss").get<double>();
    r.valid_pixels = j.at("valid_pixels").get<std::size_t>();
    r.mask_policy = j.value("mask_policy", "intersection");
    return r;
  }
};

struct MetricsOptions {
  SsimOptions ssim;
  int structure_window = 5;
};

inline MetricsReport evaluate_pair(const DepthImage& pred, const DepthImage& ref, const MetricsOptions& opts = {}) {
  const Mask mask = intersection_mask(pred, ref);
  MetricsReport r;
  r.valid_pixels = mask_count(mask);
  if (r.valid_pixels == 0) throw UndefinedMetricError("evaluate_pair: no pixel valid in both images");
  r.ssim = ssim(pred, ref, mask, opts.ssim);
  r.rmse = rmse(pred, ref, mask);
  r.mae = mae(pred, ref, mask);
  r.structure_loss = structure_loss(pred, ref, opts.structure_window);
  return r;
}

}  // namespace depthforge
