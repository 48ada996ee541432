#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "mmattack/image.hpp"

namespace mmattack {

// Synthetic natural-looking image on the 8-bit grid: a few smooth colour
// gradients and blobs. With `face` set, a bright square sits on a darker patch
// in the centre (what the toy detectors fire on).
inline Image make_toy_image(std::uint64_t seed, ImageShape shape = {32, 32}, bool face = false,
                            std::string id = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PixelArray p(shape);
  double base[3], gx[3], gy[3];
  for (int ch = 0; ch < kChannels; ++ch) {
    base[ch] = 0.25 + 0.5 * u(rng);
    gx[ch] = 0.3 * (u(rng) - 0.5);
    gy[ch] = 0.3 * (u(rng) - 0.5);
  }
  struct Blob {
    double cy, cx, radius, amp[3];
  };
  std::vector<Blob> blobs(3);
  for (auto& b : blobs) {
    b.cy = u(rng);
    b.cx = u(rng);
    b.radius = 0.1 + 0.2 * u(rng);
    for (double& a : b.amp) a = 0.4 * (u(rng) - 0.5);
  }
  for (int r = 0; r < shape.height; ++r) {
    const double y = (r + 0.5) / shape.height;
    for (int c = 0; c < shape.width; ++c) {
      const double x = (c + 0.5) / shape.width;
      for (int ch = 0; ch < kChannels; ++ch) {
        double v = base[ch] + gx[ch] * (x - 0.5) + gy[ch] * (y - 0.5);
        for (const auto& b : blobs) {
          const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
          v += b.amp[ch] * std::exp(-d2 / (2.0 * b.radius * b.radius));
        }
        v += 0.02 * std::sin(2.0 * std::numbers::pi * (3.0 * x + 2.0 * y + 0.1 * ch));
        p.at(r, c, ch) = grid_value(nearest_code(v));
      }
    }
  }
  if (face) {
    // dark 16x16 surround with a bright 8x8 core, centred (for 32x32 images)
    const int cy = shape.height / 2, cx = shape.width / 2;
    const int outer = shape.height / 4, inner = shape.height / 8;
    for (int r = cy - outer; r < cy + outer; ++r)
      for (int c = cx - outer; c < cx + outer; ++c) {
        const bool core = r >= cy - inner && r < cy + inner && c >= cx - inner && c < cx + inner;
        for (int ch = 0; ch < kChannels; ++ch) p.at(r, c, ch) = grid_value(core ? 250 : 20);
      }
  }
  if (id.empty()) id = "toy-" + std::to_string(seed);
  return Image(std::move(id), std::move(p));
}

}  // namespace mmattack
