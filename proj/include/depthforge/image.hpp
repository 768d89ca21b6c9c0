#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "depthforge/errors.hpp"

namespace depthforge {

// Dense row-major image. Pixel (x, y) is column x, row y.
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(int width, int height, const T& fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    assert(width >= 0 && height >= 0);
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }
  bool contains(int x, int y) const noexcept {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  std::span<T> pixels() noexcept { return data_; }
  std::span<const T> pixels() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  template <typename U>
  bool same_shape(const Image<U>& other) const noexcept {
    return width_ == other.width() && height_ == other.height();
  }

  friend bool operator==(const Image& a, const Image& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.data_ == b.data_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using Color = Eigen::Vector3d;

// Depth in meters, 0 means missing.
using DepthImage = Image<double>;
// RGB in [0, 1].
using ColorImage = Image<Color>;
using Mask = Image<unsigned char>;

inline double gray(const Color& c) {
  return 0.299 * c.x() + 0.587 * c.y() + 0.114 * c.z();
}

inline std::size_t count_valid(const DepthImage& depth) {
  return static_cast<std::size_t>(
      std::count_if(depth.begin(), depth.end(), [](double z) { return z > 0.0; }));
}

inline double missing_ratio(const DepthImage& depth) {
  if (depth.empty()) return 1.0;
  return 1.0 - static_cast<double>(count_valid(depth)) / static_cast<double>(depth.size());
}

template <typename A, typename B>
void require_same_shape(const Image<A>& a, const Image<B>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw InputShapeError(std::string(what) + ": image dimensions differ (" +
                          std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                          " vs " + std::to_string(b.width()) + "x" +
                          std::to_string(b.height()) + ")");
  }
}

}  // namespace depthforge
