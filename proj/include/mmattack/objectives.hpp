#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmattack/errors.hpp"
#include "mmattack/image.hpp"
#include "mmattack/surrogates.hpp"

namespace mmattack {

struct LossEval {
  double value = 0.0;
  PixelArray grad;
};

// One surrogate's contribution to an objective, as a function of the pixels.
struct MemberLoss {
  std::string surrogate_id;
  std::function<LossEval(const PixelArray&)> eval;
};

inline constexpr double kScoreClamp = 1e-6;

struct TargetSentence {
  std::string text;
  std::string prompt;
  std::map<std::string, std::vector<int>> tokens;  // per surrogate id
};

// Tokenizes the target with every captioner in the ensemble.
inline TargetSentence make_target_sentence(const std::string& text, const std::string& prompt,
                                           const SurrogateEnsemble& ensemble) {
  TargetSentence t{text, prompt, {}};
  for (const auto& m : ensemble.members()) {
    const auto& cap = as_captioner(*m);
    auto ids = cap.tokenize(text);
    if (ids.empty()) {
      throw ConfigError("objective.target.text", "target \"" + text + "\" is not tokenizable by surrogate '" +
                                                     m->id() + "'");
    }
    if (cap.decode(ids) != text) {
      throw ConfigError("objective.target.text",
                        "target does not round-trip through the tokenizer of surrogate '" + m->id() + "'");
    }
    t.tokens.emplace(m->id(), std::move(ids));
  }
  return t;
}

namespace detail {

inline void require_differentiable(const Surrogate& s) {
  if (!s.differentiable()) {
    throw UnsupportedSurrogate("surrogate '" + s.id() + "' has no differentiable path to pixel space");
  }
}

// ||f(x) - anchor_embedding||^2 and its pixel gradient.
inline LossEval divergence_term(const ImageEncoder& enc, const PixelArray& x, const std::vector<double>& anchor) {
  double value = 0.0;
  auto [emb, grad] = enc.encode_pullback(x, [&](const EmbeddingVector& e) {
    if (e.values.size() != anchor.size()) throw InvalidArgument("embedding dimension changed between calls");
    std::vector<double> cot(e.values.size());
    for (std::size_t i = 0; i < cot.size(); ++i) {
      const double d = e.values[i] - anchor[i];
      value += d * d;
      cot[i] = 2.0 * d;
    }
    return cot;
  });
  return {value, std::move(grad)};
}

inline LossEval caption_term(const Captioner& cap, const PixelArray& x, const std::string& prompt,
                             const std::vector<int>& tokens) {
  auto eval = cap.caption_loglik_grad(x, prompt, tokens);
  double value = 0.0;
  for (double lp : eval.token_logprobs) value += lp;
  return {value, std::move(eval.grad)};
}

inline double clamped_score(double s) { return std::clamp(s, kScoreClamp, 1.0 - kScoreClamp); }

// Sum of -log(1 - s) over the selected candidates. `selected(dets)` returns a
// 0/1 mask in detect() order; an empty selector means every candidate.
inline LossEval evasion_term(const FaceDetector& det, const PixelArray& x,
                             const std::function<std::vector<bool>(const std::vector<DetectionOutput>&)>& selected) {
  double value = 0.0;
  auto [dets, grad] = det.detect_pullback(x, [&](const std::vector<DetectionOutput>& d) {
    const auto mask = selected ? selected(d) : std::vector<bool>(d.size(), true);
    std::vector<double> cot(d.size(), 0.0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!mask[i]) continue;
      const double s = d[i].score;
      value += -std::log(1.0 - clamped_score(s));
      if (s > kScoreClamp && s < 1.0 - kScoreClamp) cot[i] = 1.0 / (1.0 - s);
    }
    return cot;
  });
  return {value, std::move(grad)};
}

inline void accumulate(LossEval& total, const LossEval& term, double weight = 1.0) {
  total.value += weight * term.value;
  if (total.grad.size() == 0) {
    total.grad = term.grad;
    total.grad *= weight;
  } else {
    for (std::size_t i = 0; i < total.grad.size(); ++i) total.grad[i] += weight * term.grad[i];
  }
}

}  // namespace detail

// Sum over encoders of ||f_i(x) - f_i(anchor)||^2.
inline LossEval embedding_divergence(const PixelArray& x, const PixelArray& anchor, const SurrogateEnsemble& ensemble) {
  x.require_same_shape(anchor, "embedding_divergence");
  LossEval total{0.0, PixelArray(x.shape())};
  for (const auto& m : ensemble.members()) {
    const auto& enc = as_encoder(*m);
    detail::require_differentiable(enc);
    detail::accumulate(total, detail::divergence_term(enc, x, enc.encode(anchor).values));
  }
  return total;
}

// Reuses the embedding objective against the backbones of linear-probe toxicity
// classifiers.
inline LossEval toxicity_evasion(const PixelArray& x, const PixelArray& anchor, const SurrogateEnsemble& ensemble) {
  return embedding_divergence(x, anchor, ensemble);
}

// Sum over captioners and target tokens of log p(y_t | x, prompt, y_<t).
inline LossEval targeted_caption_loglik(const PixelArray& x, const TargetSentence& target,
                                        const SurrogateEnsemble& ensemble) {
  LossEval total{0.0, PixelArray(x.shape())};
  for (const auto& m : ensemble.members()) {
    const auto& cap = as_captioner(*m);
    detail::require_differentiable(cap);
    const auto it = target.tokens.find(m->id());
    if (it == target.tokens.end()) {
      throw ConfigError("objective.target", "target has no tokenization for surrogate '" + m->id() + "'");
    }
    detail::accumulate(total, detail::caption_term(cap, x, target.prompt, it->second));
  }
  return total;
}

// Sum over detectors and their candidates of BCE(score, 0). This is the value
// to minimize; its gradient points toward higher detector confidence.
inline LossEval detector_evasion(const PixelArray& x, const SurrogateEnsemble& ensemble) {
  LossEval total{0.0, PixelArray(x.shape())};
  for (const auto& m : ensemble.members()) {
    const auto& det = as_detector(*m);
    detail::require_differentiable(det);
    detail::accumulate(total, detail::evasion_term(det, x, nullptr));
  }
  return total;
}

enum class ObjectiveKind { embedding_divergence, targeted_caption, detector_evasion };
enum class Direction { maximize, minimize };

inline const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::embedding_divergence: return "embedding_divergence";
    case ObjectiveKind::targeted_caption: return "targeted_caption";
    case ObjectiveKind::detector_evasion: return "detector_evasion";
  }
  return "embedding_divergence";
}

inline const char* to_string(Direction d) { return d == Direction::maximize ? "maximize" : "minimize"; }

// An objective bound to its ensemble. member_losses() and evaluate() follow the
// ascent convention: larger is always better for the attacker, so minimize
// objectives are negated internally.
class LossObjective {
 public:
  static LossObjective embedding_divergence(SurrogateEnsemble ensemble, const Image& anchor,
                                            std::vector<double> weights = {}) {
    LossObjective o(ObjectiveKind::embedding_divergence, std::move(ensemble), Direction::maximize, std::move(weights));
    o.anchor_ = anchor;
    for (const auto& m : o.ensemble_.members()) {
      const auto& enc = as_encoder(*m);
      detail::require_differentiable(enc);
      o.anchor_embeddings_.push_back(enc.encode(anchor.pixels()).values);
    }
    return o;
  }

  static LossObjective toxicity_evasion(SurrogateEnsemble ensemble, const Image& anchor,
                                        std::vector<double> weights = {}) {
    auto o = embedding_divergence(std::move(ensemble), anchor, std::move(weights));
    o.label_ = "toxicity_evasion";
    return o;
  }

  static LossObjective targeted_caption(SurrogateEnsemble ensemble, TargetSentence target,
                                        std::vector<double> weights = {}) {
    LossObjective o(ObjectiveKind::targeted_caption, std::move(ensemble), Direction::maximize, std::move(weights));
    for (const auto& m : o.ensemble_.members()) {
      detail::require_differentiable(as_captioner(*m));
      if (!target.tokens.count(m->id()) || target.tokens.at(m->id()).empty()) {
        throw ConfigError("objective.target", "target has no tokenization for surrogate '" + m->id() + "'");
      }
    }
    o.target_ = std::move(target);
    return o;
  }

  // Candidate set per detector: candidates above the detector's own threshold at
  // `reference`, plus the current highest-scoring candidate. Without a
  // reference every candidate counts.
  static LossObjective detector_evasion(SurrogateEnsemble ensemble, std::optional<Image> reference = std::nullopt,
                                        std::vector<double> weights = {}) {
    LossObjective o(ObjectiveKind::detector_evasion, std::move(ensemble), Direction::minimize, std::move(weights));
    for (const auto& m : o.ensemble_.members()) {
      const auto& det = as_detector(*m);
      detail::require_differentiable(det);
      std::set<int> live;
      if (reference) {
        for (const auto& d : det.detect(reference->pixels()))
          if (d.score > det.decision_threshold()) live.insert(d.anchor.index);
      }
      o.live_candidates_.push_back(std::move(live));
    }
    o.anchor_ = std::move(reference);
    return o;
  }

  ObjectiveKind kind() const noexcept { return kind_; }
  Direction direction() const noexcept { return direction_; }
  const std::string& label() const noexcept { return label_; }
  const SurrogateEnsemble& ensemble() const noexcept { return ensemble_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const std::optional<Image>& anchor() const noexcept { return anchor_; }
  const std::optional<TargetSentence>& target() const noexcept { return target_; }

  // Unweighted, unsigned value of member i (the quantity the equations sum).
  LossEval member_raw(std::size_t i, const PixelArray& x) const {
    const auto& s = ensemble_[i];
    switch (kind_) {
      case ObjectiveKind::embedding_divergence:
        return detail::divergence_term(as_encoder(s), x, anchor_embeddings_[i]);
      case ObjectiveKind::targeted_caption:
        return detail::caption_term(as_captioner(s), x, target_->prompt, target_->tokens.at(s.id()));
      case ObjectiveKind::detector_evasion: {
        const auto& live = live_candidates_[i];
        const bool all = !anchor_.has_value();
        return detail::evasion_term(as_detector(s), x, [&](const std::vector<DetectionOutput>& d) {
          std::vector<bool> mask(d.size(), all);
          if (all || d.empty()) return mask;
          std::size_t best = 0;
          for (std::size_t k = 0; k < d.size(); ++k) {
            if (live.count(d[k].anchor.index)) mask[k] = true;
            if (d[k].score > d[best].score) best = k;
          }
          mask[best] = true;
          return mask;
        });
      }
    }
    throw InvalidArgument("unknown objective kind");
  }

  // Per-surrogate losses in the ascent convention, weights applied.
  std::vector<MemberLoss> member_losses() const {
    std::vector<MemberLoss> out;
    for (std::size_t i = 0; i < ensemble_.size(); ++i) {
      const double scale = sign() * weights_[i];
      out.push_back({ensemble_[i].id(), [this, i, scale](const PixelArray& x) {
                       LossEval e = member_raw(i, x);
                       e.value *= scale;
                       e.grad *= scale;
                       return e;
                     }});
    }
    return out;
  }

  LossEval evaluate(const PixelArray& x) const {
    LossEval total{0.0, PixelArray(x.shape())};
    for (const auto& m : member_losses()) detail::accumulate(total, m.eval(x));
    return total;
  }

  double value(const PixelArray& x) const { return evaluate(x).value; }

  nlohmann::json describe() const {
    nlohmann::json j{{"kind", to_string(kind_)},
                     {"label", label_},
                     {"surrogates", ensemble_.ids()},
                     {"direction", to_string(direction_)},
                     {"weights", weights_}};
    if (target_) j["target"] = {{"text", target_->text}, {"prompt", target_->prompt}};
    return j;
  }

 private:
  LossObjective(ObjectiveKind kind, SurrogateEnsemble ensemble, Direction direction, std::vector<double> weights)
      : kind_(kind), label_(to_string(kind)), ensemble_(std::move(ensemble)), direction_(direction),
        weights_(std::move(weights)) {
    if (weights_.empty()) weights_.assign(ensemble_.size(), 1.0);
    if (weights_.size() != ensemble_.size()) {
      throw ConfigError("objective.weights", "expected " + std::to_string(ensemble_.size()) + " weights, got " +
                                                 std::to_string(weights_.size()));
    }
    for (double w : weights_)
      if (!std::isfinite(w) || w < 0.0) throw ConfigError("objective.weights", "weights must be finite and >= 0");
  }

  double sign() const noexcept { return direction_ == Direction::maximize ? 1.0 : -1.0; }

  ObjectiveKind kind_;
  std::string label_;
  SurrogateEnsemble ensemble_;
  Direction direction_;
  std::vector<double> weights_;
  std::optional<Image> anchor_;
  std::optional<TargetSentence> target_;
  std::vector<std::vector<double>> anchor_embeddings_;
  std::vector<std::set<int>> live_candidates_;
};

}  // namespace mmattack
