#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmattack/dct.hpp"
#include "mmattack/errors.hpp"
#include "mmattack/image.hpp"
#include "mmattack/objectives.hpp"

namespace mmattack {

// l-infinity constraint set. epsilon must sit on the 1/255 grid so that the
// constraint survives 8-bit export exactly.
struct AttackBudget {
  double epsilon = 16.0 / 255.0;
  int iterations = 500;
  double step_size = 16.0 / 255.0 / 15.0;
  std::string norm = "linf";

  static AttackBudget from_numerator(int epsilon_numerator, int iterations) {
    const double eps = grid_value(epsilon_numerator);
    return {eps, iterations, eps / 15.0, "linf"};
  }

  int epsilon_numerator() const { return static_cast<int>(std::lround(epsilon * kGridLevels)); }

  void validate() const {
    if (norm != "linf") throw ConfigError("attack.norm", "only the linf threat model is supported");
    if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("attack.epsilon", "must lie in (0, 1]");
    if (grid_value(epsilon_numerator()) != epsilon) {
      throw ConfigError("attack.epsilon", "must be an integer multiple of 1/255");
    }
    if (iterations < 1) throw ConfigError("attack.iterations", "must be >= 1");
    if (!std::isfinite(step_size) || step_size < 0.0) throw ConfigError("attack.step_size", "must be finite and >= 0");
  }

  nlohmann::json to_json() const {
    return {{"epsilon_numerator", epsilon_numerator()}, {"iterations", iterations}, {"step_size", step_size},
            {"norm", norm}};
  }
};

struct OptimizerConfig {
  int spectrum_samples = 20;
  double spectrum_rho = 0.5;
  double spectrum_sigma = 16.0 / 255.0;
  // Decay of both the outer sign momentum and the inner common-weakness momentum.
  double outer_momentum = 1.0;
  double inner_step_size = 16.0 / 255.0 / 15.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (spectrum_samples < 1) throw ConfigError("attack.optimizer.spectrum_samples", "must be >= 1");
    if (!std::isfinite(spectrum_rho) || spectrum_rho < 0.0 || spectrum_rho >= 1.0) {
      throw ConfigError("attack.optimizer.spectrum_rho", "must lie in [0, 1)");
    }
    if (!std::isfinite(spectrum_sigma) || spectrum_sigma < 0.0) {
      throw ConfigError("attack.optimizer.spectrum_sigma", "must be finite and >= 0");
    }
    if (!std::isfinite(outer_momentum) || outer_momentum < 0.0 || outer_momentum > 1.0) {
      throw ConfigError("attack.optimizer.outer_momentum", "must lie in [0, 1]");
    }
    if (!std::isfinite(inner_step_size) || inner_step_size < 0.0) {
      throw ConfigError("attack.optimizer.inner_step_size", "must be finite and >= 0");
    }
  }

  nlohmann::json to_json() const {
    return {{"spectrum_samples", spectrum_samples}, {"spectrum_rho", spectrum_rho},
            {"spectrum_sigma", spectrum_sigma},     {"outer_momentum", outer_momentum},
            {"inner_step_size", inner_step_size},   {"rng_seed", rng_seed}};
  }
};

struct AttackResult {
  Image adversarial;
  Image natural;
  std::vector<double> loss_trace;
  std::map<std::string, double> per_surrogate_final;
  bool quantized_ok = false;
  AttackBudget budget;
  OptimizerConfig config;
  nlohmann::json objective;
};

// Coordinate-wise clamp into the epsilon ball around x_nat, then into [0,1].
inline PixelArray project_linf(const PixelArray& x, const PixelArray& x_nat, double epsilon) {
  x.require_same_shape(x_nat, "project_linf");
  if (!(epsilon > 0.0)) throw InvalidArgument("project_linf: epsilon must be positive");
  PixelArray r = x;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double lo = std::max(x_nat[i] - epsilon, 0.0);
    const double hi = std::min(x_nat[i] + epsilon, 1.0);
    r[i] = std::clamp(r[i], lo, hi);
  }
  return r;
}

inline Image project_linf(const Image& x, const Image& x_nat, double epsilon) {
  return Image(x.id(), project_linf(x.pixels(), x_nat.pixels(), epsilon));
}

// One draw of the spectrum simulation: x -> idct2(dct2(x + noise) * mask),
// applied per channel. The map is affine with a symmetric linear part, so the
// pullback applies the same mask to the incoming gradient.
class SpectrumDraw {
 public:
  SpectrumDraw(std::shared_ptr<const Dct2Plan> plan, const OptimizerConfig& config, std::mt19937_64& rng)
      : plan_(std::move(plan)) {
    const int h = plan_->rows(), w = plan_->cols();
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> mask(1.0 - config.spectrum_rho, 1.0 + config.spectrum_rho);
    for (int ch = 0; ch < kChannels; ++ch) {
      Plane n(h, w), m(h, w);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) n(r, c) = config.spectrum_sigma * noise(rng);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) m(r, c) = config.spectrum_rho == 0.0 ? 1.0 : mask(rng);
      noise_.push_back(std::move(n));
      mask_.push_back(std::move(m));
    }
  }

  PixelArray apply(const PixelArray& x) const { return filter(x, true); }
  PixelArray pullback(const PixelArray& grad) const { return filter(grad, false); }

 private:
  PixelArray filter(const PixelArray& x, bool add_noise) const {
    if (x.height() != plan_->rows() || x.width() != plan_->cols()) throw InvalidArgument("spectrum draw shape mismatch");
    PixelArray out(x.shape());
    for (int ch = 0; ch < kChannels; ++ch) {
      Plane p = channel_plane(x, ch);
      if (add_noise) p += noise_[ch];
      set_channel_plane(out, ch, plan_->inverse(plan_->forward(p).cwiseProduct(mask_[ch])));
    }
    return out;
  }

  std::shared_ptr<const Dct2Plan> plan_;
  std::vector<Plane> noise_;
  std::vector<Plane> mask_;
};

// The transformed copy is a surrogate input, not an iterate: it may leave [0,1].
inline PixelArray spectrum_transform(const PixelArray& x, const OptimizerConfig& config, std::mt19937_64& rng) {
  auto plan = std::make_shared<const Dct2Plan>(x.height(), x.width());
  return SpectrumDraw(std::move(plan), config, rng).apply(x);
}

// Region the inner common-weakness iterates are clipped to.
struct BallConstraint {
  const PixelArray* natural = nullptr;
  double epsilon = 0.0;
};

namespace detail {

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline LossEval checked_eval(const MemberLoss& loss, const PixelArray& x) {
  LossEval e = loss.eval(x);
  if (!std::isfinite(e.value)) throw DivergenceError(-1, loss.surrogate_id, "non-finite loss value");
  if (e.grad.shape() != x.shape()) throw InvalidArgument("loss '" + loss.surrogate_id + "' returned a misshaped gradient");
  if (!e.grad.all_finite()) throw DivergenceError(-1, loss.surrogate_id, "non-finite gradient");
  return e;
}

inline void clip(PixelArray& x, const BallConstraint& ball) {
  if (ball.natural) x = project_linf(x, *ball.natural, ball.epsilon);
}

}  // namespace detail

// Common-weakness direction for one iterate. A reverse signed step against the
// ensemble gradient moves toward a nearby low point; the surrogates are then
// visited in order, each gradient L2-normalized and folded into an inner
// momentum that also drives a signed forward step. Returns the inner momentum.
inline PixelArray cwa_gradient(const PixelArray& x, const std::vector<MemberLoss>& losses,
                               const OptimizerConfig& config, const BallConstraint& ball = {}) {
  if (losses.empty()) throw InvalidArgument("cwa_gradient: no surrogate losses");
  const double step = config.inner_step_size;

  PixelArray cur = x;
  if (step > 0.0) {
    PixelArray ensemble_grad(x.shape());
    for (const auto& l : losses) ensemble_grad += detail::checked_eval(l, x).grad;
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] -= step * detail::sign(ensemble_grad[i]);
    detail::clip(cur, ball);
  }

  PixelArray momentum(x.shape());
  for (const auto& l : losses) {
    const LossEval e = detail::checked_eval(l, cur);
    const double norm = l2_norm(e.grad);
    for (std::size_t i = 0; i < momentum.size(); ++i) {
      momentum[i] = config.outer_momentum * momentum[i] + (norm > 0.0 ? e.grad[i] / norm : 0.0);
    }
    if (step > 0.0) {
      for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += step * detail::sign(momentum[i]);
      detail::clip(cur, ball);
    }
  }
  return momentum;
}

// SSA-CWA outer loop: per iteration, average the common-weakness direction over
// spectrum draws, fold it into an L1-normalized sign momentum, take a signed
// step, and project back into the constraint set.
inline AttackResult run_attack(const Image& natural, const LossObjective& objective, const AttackBudget& budget,
                               const OptimizerConfig& config) {
  budget.validate();
  config.validate();
  const auto& nat = natural.pixels();
  const auto members = objective.member_losses();
  auto plan = std::make_shared<const Dct2Plan>(nat.height(), nat.width());
  std::mt19937_64 rng(config.rng_seed);
  const BallConstraint ball{&nat, budget.epsilon};

  PixelArray x = nat;
  PixelArray momentum(nat.shape());
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(budget.iterations));

  for (int t = 0; t < budget.iterations; ++t) {
    try {
      PixelArray direction(nat.shape());
      for (int s = 0; s < config.spectrum_samples; ++s) {
        const SpectrumDraw draw(plan, config, rng);
        std::vector<MemberLoss> transformed;
        transformed.reserve(members.size());
        for (const auto& m : members) {
          transformed.push_back({m.surrogate_id, [&draw, &m](const PixelArray& y) {
                                   LossEval e = m.eval(draw.apply(y));
                                   e.grad = draw.pullback(e.grad);
                                   return e;
                                 }});
        }
        direction += cwa_gradient(x, transformed, config, ball);
      }
      direction *= 1.0 / config.spectrum_samples;

      const double n1 = l1_norm(direction);
      for (std::size_t i = 0; i < x.size(); ++i) {
        momentum[i] = config.outer_momentum * momentum[i] + (n1 > 0.0 ? direction[i] / n1 : 0.0);
        x[i] += budget.step_size * detail::sign(momentum[i]);
      }
      x = project_linf(x, nat, budget.epsilon);

      const double v = objective.value(x);
      if (!std::isfinite(v)) throw DivergenceError(t, "", "non-finite objective at the clean iterate");
      trace.push_back(v);
    } catch (const DivergenceError& e) {
      if (e.iteration() >= 0) throw;
      throw e.at_iteration(t);
    }
  }

  AttackResult result;
  result.natural = natural;
  result.adversarial = Image(natural.id(), std::move(x));
  result.loss_trace = std::move(trace);
  for (const auto& m : members) result.per_surrogate_final[m.surrogate_id] = m.eval(result.adversarial.pixels()).value;
  result.budget = budget;
  result.config = config;
  result.objective = objective.describe();
  return result;
}

// Rounds the adversarial image to the 8-bit grid, pulls any code that left the
// epsilon ball back to the nearest admissible code, and re-verifies the
// constraint on the exported values.
inline AttackResult quantize_and_verify(AttackResult result) {
  const auto& nat = result.natural.pixels();
  const auto& adv = result.adversarial.pixels();
  nat.require_same_shape(adv, "quantize_and_verify");
  const int m = result.budget.epsilon_numerator();
  const double eps = result.budget.epsilon;

  PixelArray q(adv.shape());
  bool ok = true;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    int k = nearest_code(adv[i]);
    if (on_grid(nat[i])) {
      const int n = nearest_code(nat[i]);
      k = std::clamp(k, std::max(n - m, 0), std::min(n + m, kGridLevels));
      ok = ok && std::abs(k - n) <= m;
    } else {
      while (k > 0 && grid_value(k) - nat[i] > eps) --k;
      while (k < kGridLevels && nat[i] - grid_value(k) > eps) ++k;
      ok = ok && std::abs(grid_value(k) - nat[i]) <= eps;
    }
    q[i] = grid_value(k);
  }
  assert(ok && "re-projected code left the epsilon ball");
  result.adversarial = Image(result.adversarial.id(), std::move(q));
  result.quantized_ok = ok;
  return result;
}

// Exact l-infinity check on the 8-bit grid; natural pixels that are off-grid
// fall back to a floating-point comparison.
inline bool within_linf_ball(const Image& adversarial, const Image& natural, int epsilon_numerator) {
  const auto& a = adversarial.pixels();
  const auto& n = natural.pixels();
  if (a.shape() != n.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (on_grid(a[i]) && on_grid(n[i])) {
      if (std::abs(nearest_code(a[i]) - nearest_code(n[i])) > epsilon_numerator) return false;
    } else if (std::abs(a[i] - n[i]) > grid_value(epsilon_numerator)) {
      return false;
    }
  }
  return true;
}

}  // namespace mmattack
