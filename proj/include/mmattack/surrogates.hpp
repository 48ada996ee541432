#pragma once

#include <array>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmattack/errors.hpp"
#include "mmattack/image.hpp"
#include "mmattack/preprocess.hpp"

namespace mmattack {

enum class SurrogateKind { encoder, captioner, detector };

inline const char* to_string(SurrogateKind k) {
  switch (k) {
    case SurrogateKind::encoder: return "encoder";
    case SurrogateKind::captioner: return "captioner";
    case SurrogateKind::detector: return "detector";
  }
  return "encoder";
}

inline SurrogateKind surrogate_kind_from_string(const std::string& s) {
  if (s == "encoder") return SurrogateKind::encoder;
  if (s == "captioner") return SurrogateKind::captioner;
  if (s == "detector") return SurrogateKind::detector;
  throw InvalidArgument("unknown surrogate kind '" + s + "'");
}

struct SurrogateInfo {
  std::string id;
  SurrogateKind kind = SurrogateKind::encoder;
  // {0,0} means the adapter consumes the image at its native resolution.
  ImageShape input_resolution{};
  Normalization normalization{};
  bool reentrant = false;
};

struct EmbeddingVector {
  std::vector<double> values;
  std::string surrogate_id;

  int dim() const noexcept { return static_cast<int>(values.size()); }
};

struct AnchorBox {
  int index = 0;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // in model-input pixels
};

struct DetectionOutput {
  AnchorBox anchor;
  std::array<double, 4> box{};  // x0, y0, x1, y1 in image pixels, clipped to bounds
  double score = 0.0;
};

struct CaptionEval {
  std::vector<double> token_logprobs;
  PixelArray grad;  // d(sum of token log-probabilities)/d pixels
};

// Common base for all adapters. Weights are frozen after construction and every
// forward is a pure function of its input.
class Surrogate {
 public:
  explicit Surrogate(SurrogateInfo info)
      : info_(std::move(info)), pre_(resolution_or(info_.input_resolution, {1, 1}), info_.normalization) {}
  virtual ~Surrogate() = default;

  Surrogate(const Surrogate&) = delete;
  Surrogate& operator=(const Surrogate&) = delete;

  const SurrogateInfo& info() const noexcept { return info_; }
  const std::string& id() const noexcept { return info_.id; }
  SurrogateKind kind() const noexcept { return info_.kind; }

  // False for adapters that cannot supply pixel gradients.
  virtual bool differentiable() const { return true; }

  bool native_resolution() const noexcept {
    return info_.input_resolution.height == 0 || info_.input_resolution.width == 0;
  }

  ImageShape model_shape(const ImageShape& image) const {
    return native_resolution() ? image : info_.input_resolution;
  }

  PixelArray preprocess(const PixelArray& x) const { return preprocessor_for(x.shape()).forward(x); }

  PixelArray preprocess_backward(const ImageShape& image, const PixelArray& grad) const {
    return preprocessor_for(image).backward(image, grad);
  }

 private:
  static ImageShape resolution_or(ImageShape r, ImageShape fallback) {
    return (r.height == 0 || r.width == 0) ? fallback : r;
  }

  Preprocessor preprocessor_for(const ImageShape& image) const {
    return native_resolution() ? Preprocessor(image, info_.normalization) : pre_;
  }

  SurrogateInfo info_;
  Preprocessor pre_;
};

// Image encoder f(x) -> embedding.
class ImageEncoder : public Surrogate {
 public:
  using Cotangent = std::function<std::vector<double>(const EmbeddingVector&)>;

  using Surrogate::Surrogate;

  virtual EmbeddingVector encode(const PixelArray& x) const = 0;

  // Single forward + reverse pass: returns the embedding and J^T c, where the
  // cotangent c is computed from the embedding by the caller.
  virtual std::pair<EmbeddingVector, PixelArray> encode_pullback(const PixelArray& x,
                                                                 const Cotangent& cotangent) const = 0;
};

// Vision-conditioned language model exposing teacher-forced token likelihoods.
class Captioner : public Surrogate {
 public:
  using Surrogate::Surrogate;

  virtual int vocab_size() const = 0;
  // Empty when the text contains words outside the adapter's vocabulary.
  virtual std::vector<int> tokenize(const std::string& text) const = 0;
  virtual std::string decode(std::span<const int> tokens) const = 0;
  // Adapter-owned chat template around the shared prompt text.
  virtual std::string wrap_prompt(const std::string& prompt) const = 0;

  virtual std::vector<double> caption_loglik(const PixelArray& x, const std::string& prompt,
                                             std::span<const int> tokens) const = 0;
  virtual CaptionEval caption_loglik_grad(const PixelArray& x, const std::string& prompt,
                                          std::span<const int> tokens) const = 0;
  virtual std::vector<int> greedy_decode(const PixelArray& x, const std::string& prompt, int max_tokens) const = 0;
};

// Face detector emitting one candidate per anchor.
class FaceDetector : public Surrogate {
 public:
  using Cotangent = std::function<std::vector<double>(const std::vector<DetectionOutput>&)>;

  using Surrogate::Surrogate;

  virtual double decision_threshold() const = 0;
  virtual std::vector<DetectionOutput> detect(const PixelArray& x) const = 0;
  // Cotangent returns d loss / d score for every candidate, in detect() order.
  virtual std::pair<std::vector<DetectionOutput>, PixelArray> detect_pullback(const PixelArray& x,
                                                                              const Cotangent& cotangent) const = 0;
};

namespace detail {
template <class T>
const T& require_kind(const Surrogate& s, const char* op) {
  const auto* p = dynamic_cast<const T*>(&s);
  if (!p) {
    throw InterfaceError(std::string(op) + " is not supported by surrogate '" + s.id() + "' of kind " +
                         to_string(s.kind()));
  }
  return *p;
}
}  // namespace detail

inline const ImageEncoder& as_encoder(const Surrogate& s) { return detail::require_kind<ImageEncoder>(s, "encode"); }
inline const Captioner& as_captioner(const Surrogate& s) {
  return detail::require_kind<Captioner>(s, "caption_loglik");
}
inline const FaceDetector& as_detector(const Surrogate& s) { return detail::require_kind<FaceDetector>(s, "detect"); }

inline EmbeddingVector encode(const Surrogate& s, const PixelArray& x) { return as_encoder(s).encode(x); }

inline std::vector<double> caption_loglik(const Surrogate& s, const PixelArray& x, const std::string& prompt,
                                          std::span<const int> tokens) {
  return as_captioner(s).caption_loglik(x, prompt, tokens);
}

inline std::vector<DetectionOutput> detect(const Surrogate& s, const PixelArray& x) {
  return as_detector(s).detect(x);
}

// Ordered, non-empty, single-kind collection of adapters with unique ids.
class SurrogateEnsemble {
 public:
  explicit SurrogateEnsemble(std::vector<std::shared_ptr<const Surrogate>> members) : members_(std::move(members)) {
    if (members_.empty()) throw InvalidArgument("surrogate ensemble must not be empty");
    std::set<std::string> ids;
    for (const auto& m : members_) {
      if (!m) throw InvalidArgument("null surrogate in ensemble");
      if (m->kind() != members_.front()->kind()) {
        throw InvalidArgument("surrogate ensemble mixes kinds: '" + m->id() + "' is " + to_string(m->kind()) +
                              ", expected " + to_string(members_.front()->kind()));
      }
      if (!ids.insert(m->id()).second) throw InvalidArgument("duplicate surrogate id '" + m->id() + "'");
    }
  }

  SurrogateKind kind() const noexcept { return members_.front()->kind(); }
  std::size_t size() const noexcept { return members_.size(); }
  const Surrogate& operator[](std::size_t i) const { return *members_[i]; }
  const std::vector<std::shared_ptr<const Surrogate>>& members() const noexcept { return members_; }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& m : members_) out.push_back(m->id());
    return out;
  }

 private:
  std::vector<std::shared_ptr<const Surrogate>> members_;
};

}  // namespace mmattack
