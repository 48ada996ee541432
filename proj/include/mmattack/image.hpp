#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmattack/errors.hpp"

namespace mmattack {

inline constexpr int kChannels = 3;
inline constexpr int kGridLevels = 255;

struct ImageShape {
  int height = 0;
  int width = 0;

  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const noexcept { return pixels() * kChannels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

inline std::string to_string(const ImageShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x3";
}

// Dense height x width x 3 array in row-major HWC order. No range invariant;
// used for gradients and surrogate inputs.
class PixelArray {
 public:
  PixelArray() = default;
  explicit PixelArray(ImageShape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {
    if (shape.height < 0 || shape.width < 0) throw InvalidArgument("negative image dimensions");
  }
  PixelArray(ImageShape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw InvalidArgument("pixel buffer of size " + std::to_string(data_.size()) +
                            " does not match shape " + to_string(shape_));
    }
  }

  const ImageShape& shape() const noexcept { return shape_; }
  int height() const noexcept { return shape_.height; }
  int width() const noexcept { return shape_.width; }
  std::size_t size() const noexcept { return data_.size(); }

  double& at(int row, int col, int ch) { return data_[index(row, col, ch)]; }
  double at(int row, int col, int ch) const { return data_[index(row, col, ch)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  std::size_t index(int row, int col, int ch) const noexcept {
    return (static_cast<std::size_t>(row) * shape_.width + col) * kChannels + ch;
  }

  PixelArray& operator+=(const PixelArray& other) {
    require_same_shape(other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  PixelArray& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  void require_same_shape(const PixelArray& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw InvalidArgument(std::string(what) + ": shape mismatch " + to_string(shape_) + " vs " +
                            to_string(other.shape_));
    }
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const PixelArray&, const PixelArray&) = default;

 private:
  ImageShape shape_{};
  std::vector<double> data_;
};

inline double l1_norm(const PixelArray& a) {
  double s = 0.0;
  for (double v : a.values()) s += std::abs(v);
  return s;
}

inline double l2_norm(const PixelArray& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

inline double dot(const PixelArray& a, const PixelArray& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs_diff(const PixelArray& a, const PixelArray& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// A natural or adversarial image: finite pixels in [0,1].
class Image {
 public:
  Image() = default;
  Image(std::string id, PixelArray pixels) : id_(std::move(id)), pixels_(std::move(pixels)) { validate(); }

  const std::string& id() const noexcept { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }
  const ImageShape& shape() const noexcept { return pixels_.shape(); }
  const PixelArray& pixels() const noexcept { return pixels_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  void validate() const {
    for (double v : pixels_.values()) {
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
        throw InvalidArgument("image '" + id_ + "' has a pixel outside [0,1]");
      }
    }
  }

  std::string id_;
  PixelArray pixels_;
};

// 8-bit grid helpers: code k represents the value k/255.
inline double grid_value(int code) { return static_cast<double>(code) / kGridLevels; }

inline int nearest_code(double v) {
  const long k = std::lround(v * kGridLevels);
  return static_cast<int>(std::clamp(k, 0L, static_cast<long>(kGridLevels)));
}

inline bool on_grid(double v) { return grid_value(nearest_code(v)) == v; }

inline Image image_from_codes(std::string id, ImageShape shape, std::span<const std::uint8_t> codes) {
  if (codes.size() != shape.size()) throw InvalidArgument("code buffer does not match image shape");
  std::vector<double> data(codes.size());
  std::transform(codes.begin(), codes.end(), data.begin(), [](std::uint8_t c) { return grid_value(c); });
  return Image(std::move(id), PixelArray(shape, std::move(data)));
}

inline std::vector<std::uint8_t> image_codes(const Image& image) {
  std::vector<std::uint8_t> codes(image.pixels().size());
  const auto vals = image.pixels().values();
  std::transform(vals.begin(), vals.end(), codes.begin(),
                 [](double v) { return static_cast<std::uint8_t>(nearest_code(v)); });
  return codes;
}

}  // namespace mmattack
