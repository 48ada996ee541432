#pragma once

// Shared oracles and test doubles. Nothing here calls into the attack engine:
// finite differences, FGSM and random baselines are computed directly.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "mmattack/image.hpp"
#include "mmattack/objectives.hpp"
#include "mmattack/surrogates.hpp"

namespace mmattack::testing {

inline PixelArray random_pixels(std::uint64_t seed, ImageShape shape, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  PixelArray p(shape);
  for (auto& v : p.values()) v = u(rng);
  return p;
}

inline Image random_image(std::uint64_t seed, ImageShape shape = {16, 16}) {
  return Image("rand-" + std::to_string(seed), random_pixels(seed, shape, 0.1, 0.9));
}

inline double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

struct FdReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

// Central finite differences on `coords` random coordinates of x.
inline FdReport finite_difference_check(const std::function<double(const PixelArray&)>& f, const PixelArray& grad,
                                        const PixelArray& x, std::size_t coords = 100, std::uint64_t seed = 1,
                                        double h = 1e-6) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(coords, idx.size()));
  FdReport rep;
  for (std::size_t i : idx) {
    PixelArray plus = x, minus = x;
    plus[i] += h;
    minus[i] -= h;
    const double fd = (f(plus) - f(minus)) / (2.0 * h);
    rep.max_relative_error = std::max(rep.max_relative_error, relative_error(fd, grad[i]));
    ++rep.coordinates;
  }
  return rep;
}

inline double cosine(const PixelArray& a, const PixelArray& b) {
  return dot(a, b) / (l2_norm(a) * l2_norm(b));
}

// Uniform noise in [-eps, eps], clipped to [0,1].
inline Image random_perturbation(const Image& natural, double eps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-eps, eps);
  PixelArray p = natural.pixels();
  for (auto& v : p.values()) v = std::clamp(v + u(rng), 0.0, 1.0);
  return Image(natural.id(), std::move(p));
}

// One signed-gradient step of size eps from the natural image.
inline Image fgsm_step(const Image& natural, const LossObjective& objective, double eps) {
  const LossEval e = objective.evaluate(natural.pixels());
  PixelArray p = natural.pixels();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double s = e.grad[i] > 0 ? 1.0 : (e.grad[i] < 0 ? -1.0 : 0.0);
    p[i] = std::clamp(p[i] + eps * s, 0.0, 1.0);
  }
  return Image(natural.id(), std::move(p));
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Scalar probe of an adapter's output, with its pixel gradient.
inline std::pair<double, PixelArray> adapter_probe(const Surrogate& s, const PixelArray& x) {
  switch (s.kind()) {
    case SurrogateKind::encoder: {
      auto [e, g] = as_encoder(s).encode_pullback(x, [](const EmbeddingVector& e) {
        std::vector<double> c(e.values.size());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::cos(0.7 * i);
        return c;
      });
      double v = 0.0;
      for (std::size_t i = 0; i < e.values.size(); ++i) v += std::cos(0.7 * i) * e.values[i];
      return {v, g};
    }
    case SurrogateKind::captioner: {
      const auto& cap = as_captioner(s);
      auto r = cap.caption_loglik_grad(x, "Describe this image", cap.tokenize("a photo of a cat"));
      double v = 0.0;
      for (double lp : r.token_logprobs) v += lp;
      return {v, r.grad};
    }
    case SurrogateKind::detector: {
      auto [d, g] = as_detector(s).detect_pullback(x, [](const std::vector<DetectionOutput>& d) {
        return std::vector<double>(d.size(), 1.0);
      });
      double v = 0.0;
      for (const auto& det : d) v += det.score;
      return {v, g};
    }
  }
  return {};
}

// Detector with a fixed candidate list and no pixel dependence.
class FixedDetector final : public FaceDetector {
 public:
  FixedDetector(std::string id, std::vector<double> scores)
      : FaceDetector(SurrogateInfo{std::move(id), SurrogateKind::detector, {4, 4}, Normalization::identity(), true}),
        scores_(std::move(scores)) {}

  double decision_threshold() const override { return 0.5; }

  std::vector<DetectionOutput> detect(const PixelArray& x) const override { return detect_pullback(x, nullptr).first; }

  std::pair<std::vector<DetectionOutput>, PixelArray> detect_pullback(const PixelArray& x,
                                                                      const Cotangent& cotangent) const override {
    std::vector<DetectionOutput> d;
    for (std::size_t i = 0; i < scores_.size(); ++i) d.push_back({{static_cast<int>(i), 0, 0, 1, 1}, {0, 0, 1, 1}, scores_[i]});
    if (cotangent) cotangent(d);
    return {d, PixelArray(x.shape())};
  }

 private:
  std::vector<double> scores_;
};

}  // namespace mmattack::testing
