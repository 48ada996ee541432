#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "mmattack/errors.hpp"
#include "mmattack/image.hpp"

namespace mmattack {

struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};

  static Normalization identity() { return {}; }
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

namespace detail {

struct Tap {
  int lo, hi;
  double w_lo, w_hi;
};

// Half-pixel-centre bilinear taps along one axis, no antialiasing.
inline std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = lo + 1 < in ? lo + 1 : in - 1;
    const double frac = src - lo;
    taps[o] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace detail

// Differentiable bilinear resize followed by per-channel normalization.
// Linear in its input, so backward is the exact transpose.
class Preprocessor {
 public:
  Preprocessor(ImageShape input_resolution, Normalization norm) : out_(input_resolution), norm_(norm) {
    if (out_.height <= 0 || out_.width <= 0) throw InvalidArgument("input resolution must be positive");
    for (double s : norm_.std)
      if (!(s > 0.0)) throw InvalidArgument("normalization std must be positive");
  }

  const ImageShape& output_shape() const noexcept { return out_; }
  const Normalization& normalization() const noexcept { return norm_; }

  PixelArray forward(const PixelArray& x) const {
    const auto rows = detail::bilinear_taps(x.height(), out_.height);
    const auto cols = detail::bilinear_taps(x.width(), out_.width);
    PixelArray y(out_);
    for (int r = 0; r < out_.height; ++r) {
      const auto& tr = rows[r];
      for (int c = 0; c < out_.width; ++c) {
        const auto& tc = cols[c];
        for (int ch = 0; ch < kChannels; ++ch) {
          const double v = tr.w_lo * (tc.w_lo * x.at(tr.lo, tc.lo, ch) + tc.w_hi * x.at(tr.lo, tc.hi, ch)) +
                           tr.w_hi * (tc.w_lo * x.at(tr.hi, tc.lo, ch) + tc.w_hi * x.at(tr.hi, tc.hi, ch));
          y.at(r, c, ch) = (v - norm_.mean[ch]) / norm_.std[ch];
        }
      }
    }
    return y;
  }

  // Vector-Jacobian product: maps a gradient on the model input back to pixels.
  PixelArray backward(ImageShape input_shape, const PixelArray& grad_out) const {
    if (grad_out.shape() != out_) throw InvalidArgument("preprocess backward: gradient shape mismatch");
    const auto rows = detail::bilinear_taps(input_shape.height, out_.height);
    const auto cols = detail::bilinear_taps(input_shape.width, out_.width);
    PixelArray g(input_shape);
    for (int r = 0; r < out_.height; ++r) {
      const auto& tr = rows[r];
      for (int c = 0; c < out_.width; ++c) {
        const auto& tc = cols[c];
        for (int ch = 0; ch < kChannels; ++ch) {
          const double go = grad_out.at(r, c, ch) / norm_.std[ch];
          g.at(tr.lo, tc.lo, ch) += go * tr.w_lo * tc.w_lo;
          g.at(tr.lo, tc.hi, ch) += go * tr.w_lo * tc.w_hi;
          g.at(tr.hi, tc.lo, ch) += go * tr.w_hi * tc.w_lo;
          g.at(tr.hi, tc.hi, ch) += go * tr.w_hi * tc.w_hi;
        }
      }
    }
    return g;
  }

 private:
  ImageShape out_;
  Normalization norm_;
};

}  // namespace mmattack
