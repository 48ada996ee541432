#pragma once

// Small differentiable surrogates used by the test and acceptance suites. They
// implement the same adapter interfaces a pretrained backbone would.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "mmattack/nn.hpp"
#include "mmattack/surrogates.hpp"

namespace mmattack {

namespace detail {

inline nn::Vec flatten(const PixelArray& a) {
  return Eigen::Map<const nn::Vec>(a.data().data(), static_cast<Eigen::Index>(a.size()));
}

inline PixelArray unflatten(const ImageShape& shape, const nn::Vec& v) {
  return PixelArray(shape, std::vector<double>(v.data(), v.data() + v.size()));
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

// FNV-1a; stable across platforms, used to hash prompt words into embedding rows.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

// Multi-layer perceptron over the preprocessed, flattened image.
class MlpEncoder final : public ImageEncoder {
 public:
  MlpEncoder(SurrogateInfo info, nn::Mlp mlp) : ImageEncoder(std::move(info)), mlp_(std::move(mlp)) {}

  const nn::Mlp& mlp() const noexcept { return mlp_; }

  EmbeddingVector encode(const PixelArray& x) const override {
    const nn::Vec e = mlp_.forward(detail::flatten(preprocess(x)));
    return {std::vector<double>(e.data(), e.data() + e.size()), id()};
  }

  std::pair<EmbeddingVector, PixelArray> encode_pullback(const PixelArray& x,
                                                         const Cotangent& cotangent) const override {
    const PixelArray input = preprocess(x);
    nn::Mlp::Tape tape;
    const nn::Vec e = mlp_.forward(detail::flatten(input), &tape);
    EmbeddingVector emb{std::vector<double>(e.data(), e.data() + e.size()), id()};
    const auto cot = cotangent(emb);
    if (cot.size() != emb.values.size()) throw InvalidArgument("cotangent size mismatch");
    const nn::Vec g = mlp_.backward(tape, Eigen::Map<const nn::Vec>(cot.data(), static_cast<Eigen::Index>(cot.size())));
    return {std::move(emb), preprocess_backward(x.shape(), detail::unflatten(input.shape(), g))};
  }

  nlohmann::json weights_json() const { return {{"arch", "mlp_encoder"}, {"layers", nn::to_json(mlp_)}}; }

 private:
  nn::Mlp mlp_;
};

// f(x) = flatten(preprocess(x)).
class IdentityEncoder final : public ImageEncoder {
 public:
  using ImageEncoder::ImageEncoder;

  EmbeddingVector encode(const PixelArray& x) const override { return {preprocess(x).data(), id()}; }

  std::pair<EmbeddingVector, PixelArray> encode_pullback(const PixelArray& x,
                                                         const Cotangent& cotangent) const override {
    const PixelArray input = preprocess(x);
    EmbeddingVector emb{input.data(), id()};
    auto cot = cotangent(emb);
    if (cot.size() != emb.values.size()) throw InvalidArgument("cotangent size mismatch");
    return {std::move(emb), preprocess_backward(x.shape(), PixelArray(input.shape(), std::move(cot)))};
  }
};

struct CaptionerWeights {
  std::vector<std::string> vocab;
  std::string prompt_template;  // "{prompt}" is replaced by the shared prompt text
  nn::Dense vision;             // flattened model input -> visual state
  nn::Mat visual_to_context;
  nn::Mat token_to_context;
  nn::Mat token_embedding;   // (vocab + 1) x embed; last row is the begin-of-sequence token
  nn::Mat prompt_embedding;  // buckets x context
  nn::Mat output;            // vocab x context
  nn::Vec output_bias;
};

// Tiny vision-conditioned next-token model:
//   h   = tanh(V x + b)
//   c_t = tanh(A h + B e(y_{t-1}) + p)
//   p(y_t | ...) = softmax(O c_t + o)
// where p is the mean prompt-word embedding of the wrapped prompt.
class ToyCaptioner final : public Captioner {
 public:
  ToyCaptioner(SurrogateInfo info, CaptionerWeights w) : Captioner(std::move(info)), w_(std::move(w)) {
    for (std::size_t i = 0; i < w_.vocab.size(); ++i) index_.emplace(w_.vocab[i], static_cast<int>(i));
    const auto v = static_cast<Eigen::Index>(w_.vocab.size());
    if (index_.size() != w_.vocab.size()) throw InvalidArgument("captioner vocabulary has duplicate words");
    if (w_.output.rows() != v || w_.output_bias.size() != v || w_.token_embedding.rows() != v + 1) {
      throw InvalidArgument("captioner weight shapes do not match vocabulary");
    }
  }

  const CaptionerWeights& weights() const noexcept { return w_; }

  int vocab_size() const override { return static_cast<int>(w_.vocab.size()); }

  std::vector<int> tokenize(const std::string& text) const override {
    std::vector<int> out;
    for (const auto& word : detail::split_words(text)) {
      const auto it = index_.find(word);
      if (it == index_.end()) return {};
      out.push_back(it->second);
    }
    return out;
  }

  std::string decode(std::span<const int> tokens) const override {
    std::string out;
    for (int t : tokens) {
      if (t < 0 || t >= vocab_size()) throw InvalidArgument("token id out of range for '" + id() + "'");
      if (!out.empty()) out += ' ';
      out += w_.vocab[t];
    }
    return out;
  }

  std::string wrap_prompt(const std::string& prompt) const override {
    std::string out = w_.prompt_template;
    const auto pos = out.find("{prompt}");
    if (pos != std::string::npos) out.replace(pos, 8, prompt);
    return out;
  }

  std::vector<double> caption_loglik(const PixelArray& x, const std::string& prompt,
                                     std::span<const int> tokens) const override {
    return run(x, prompt, tokens, false).token_logprobs;
  }

  CaptionEval caption_loglik_grad(const PixelArray& x, const std::string& prompt,
                                  std::span<const int> tokens) const override {
    return run(x, prompt, tokens, true);
  }

  std::vector<int> greedy_decode(const PixelArray& x, const std::string& prompt, int max_tokens) const override {
    const nn::Vec h = nn::activate(nn::Activation::tanh, w_.vision.weight * detail::flatten(preprocess(x)) + w_.vision.bias);
    const nn::Vec p = prompt_vector(prompt);
    std::vector<int> out;
    int prev = vocab_size();
    for (int t = 0; t < max_tokens; ++t) {
      const nn::Vec c = context(h, prev, p);
      const nn::Vec logits = w_.output * c + w_.output_bias;
      Eigen::Index best = 0;
      logits.maxCoeff(&best);
      out.push_back(static_cast<int>(best));
      prev = static_cast<int>(best);
    }
    return out;
  }

  nlohmann::json weights_json() const {
    return {{"arch", "toy_captioner"},
            {"vocab", w_.vocab},
            {"prompt_template", w_.prompt_template},
            {"vision", {{"weight", nn::to_json(w_.vision.weight)}, {"bias", nn::to_json(w_.vision.bias)}}},
            {"visual_to_context", nn::to_json(w_.visual_to_context)},
            {"token_to_context", nn::to_json(w_.token_to_context)},
            {"token_embedding", nn::to_json(w_.token_embedding)},
            {"prompt_embedding", nn::to_json(w_.prompt_embedding)},
            {"output", nn::to_json(w_.output)},
            {"output_bias", nn::to_json(w_.output_bias)}};
  }

 private:
  nn::Vec prompt_vector(const std::string& prompt) const {
    nn::Vec p = nn::Vec::Zero(w_.prompt_embedding.cols());
    const auto words = detail::split_words(wrap_prompt(prompt));
    if (words.empty()) return p;
    for (const auto& word : words) {
      const auto row = static_cast<Eigen::Index>(detail::fnv1a(word) % static_cast<std::uint64_t>(w_.prompt_embedding.rows()));
      p += w_.prompt_embedding.row(row).transpose();
    }
    return p / static_cast<double>(words.size());
  }

  nn::Vec context(const nn::Vec& h, int prev, const nn::Vec& p) const {
    const nn::Vec z = w_.visual_to_context * h + w_.token_to_context * w_.token_embedding.row(prev).transpose() + p;
    return z.array().tanh().matrix();
  }

  CaptionEval run(const PixelArray& x, const std::string& prompt, std::span<const int> tokens, bool with_grad) const {
    for (int t : tokens) {
      if (t < 0 || t >= vocab_size()) throw InvalidArgument("token id out of range for '" + id() + "'");
    }
    const PixelArray input = preprocess(x);
    const nn::Vec h = nn::activate(nn::Activation::tanh, w_.vision.weight * detail::flatten(input) + w_.vision.bias);
    const nn::Vec p = prompt_vector(prompt);

    CaptionEval out;
    nn::Vec grad_h = nn::Vec::Zero(h.size());
    int prev = vocab_size();
    for (int t : tokens) {
      const nn::Vec c = context(h, prev, p);
      const nn::Vec logp = nn::log_softmax(w_.output * c + w_.output_bias);
      out.token_logprobs.push_back(logp(t));
      if (with_grad) {
        nn::Vec dlogits = -logp.array().exp().matrix();
        dlogits(t) += 1.0;
        const nn::Vec dc = (w_.output.transpose() * dlogits).cwiseProduct((1.0 - c.array().square()).matrix());
        grad_h += w_.visual_to_context.transpose() * dc;
      }
      prev = t;
    }
    if (with_grad) {
      const nn::Vec dz = grad_h.cwiseProduct((1.0 - h.array().square()).matrix());
      const nn::Vec dinput = w_.vision.weight.transpose() * dz;
      out.grad = preprocess_backward(x.shape(), detail::unflatten(input.shape(), dinput));
    }
    return out;
  }

  CaptionerWeights w_;
  std::unordered_map<std::string, int> index_;
};

// Emits the uniform distribution over its vocabulary regardless of the image.
class UniformCaptioner final : public Captioner {
 public:
  UniformCaptioner(SurrogateInfo info, std::vector<std::string> vocab)
      : Captioner(std::move(info)), vocab_(std::move(vocab)) {
    if (vocab_.empty()) throw InvalidArgument("uniform captioner needs a vocabulary");
  }

  int vocab_size() const override { return static_cast<int>(vocab_.size()); }

  std::vector<int> tokenize(const std::string& text) const override {
    std::vector<int> out;
    for (const auto& word : detail::split_words(text)) {
      const auto it = std::find(vocab_.begin(), vocab_.end(), word);
      if (it == vocab_.end()) return {};
      out.push_back(static_cast<int>(it - vocab_.begin()));
    }
    return out;
  }

  std::string decode(std::span<const int> tokens) const override {
    std::string out;
    for (int t : tokens) {
      if (t < 0 || t >= vocab_size()) throw InvalidArgument("token id out of range for '" + id() + "'");
      if (!out.empty()) out += ' ';
      out += vocab_[t];
    }
    return out;
  }

  std::string wrap_prompt(const std::string& prompt) const override { return prompt; }

  std::vector<double> caption_loglik(const PixelArray&, const std::string&, std::span<const int> tokens) const override {
    return std::vector<double>(tokens.size(), std::log(1.0 / vocab_size()));
  }

  CaptionEval caption_loglik_grad(const PixelArray& x, const std::string& prompt,
                                  std::span<const int> tokens) const override {
    return {caption_loglik(x, prompt, tokens), PixelArray(x.shape())};
  }

  std::vector<int> greedy_decode(const PixelArray&, const std::string&, int max_tokens) const override {
    return std::vector<int>(static_cast<std::size_t>(std::max(max_tokens, 0)), 0);
  }

  const std::vector<std::string>& vocab() const noexcept { return vocab_; }

 private:
  std::vector<std::string> vocab_;
};

// Sliding-window detector: every window of the grayscale model input is scored
// by a shared two-layer head ending in a sigmoid.
class ToyDetector final : public FaceDetector {
 public:
  ToyDetector(SurrogateInfo info, int window, int stride, nn::Mlp head, double threshold)
      : FaceDetector(std::move(info)), window_(window), stride_(stride), head_(std::move(head)), threshold_(threshold) {
    if (window_ <= 0 || stride_ <= 0) throw InvalidArgument("detector window and stride must be positive");
    if (head_.in() != window_ * window_ || head_.out() != 1) throw InvalidArgument("detector head shape mismatch");
    if (native_resolution()) throw InvalidArgument("toy detector needs a fixed input resolution");
    const auto& r = this->info().input_resolution;
    if (r.height < window_ || r.width < window_) throw InvalidArgument("detector window exceeds input resolution");
  }

  double decision_threshold() const override { return threshold_; }
  int window() const noexcept { return window_; }
  int stride() const noexcept { return stride_; }
  const nn::Mlp& head() const noexcept { return head_; }

  std::vector<AnchorBox> anchors() const {
    const auto& r = info().input_resolution;
    std::vector<AnchorBox> out;
    for (int y = 0; y + window_ <= r.height; y += stride_)
      for (int x = 0; x + window_ <= r.width; x += stride_)
        out.push_back({static_cast<int>(out.size()), double(x), double(y), double(x + window_), double(y + window_)});
    return out;
  }

  std::vector<DetectionOutput> detect(const PixelArray& x) const override {
    return detect_pullback(x, nullptr).first;
  }

  std::pair<std::vector<DetectionOutput>, PixelArray> detect_pullback(const PixelArray& x,
                                                                      const Cotangent& cotangent) const override {
    const PixelArray input = preprocess(x);
    const auto& r = info().input_resolution;
    nn::Mat gray(r.height, r.width);
    for (int i = 0; i < r.height; ++i)
      for (int j = 0; j < r.width; ++j)
        gray(i, j) = (input.at(i, j, 0) + input.at(i, j, 1) + input.at(i, j, 2)) / 3.0;

    const auto boxes = anchors();
    std::vector<DetectionOutput> dets;
    std::vector<nn::Mlp::Tape> tapes(boxes.size());
    const double sx = static_cast<double>(x.width()) / r.width;
    const double sy = static_cast<double>(x.height()) / r.height;
    for (std::size_t a = 0; a < boxes.size(); ++a) {
      const auto& b = boxes[a];
      const nn::Vec s = head_.forward(patch(gray, b), cotangent ? &tapes[a] : nullptr);
      DetectionOutput d;
      d.anchor = b;
      d.box = {std::clamp(b.x0 * sx, 0.0, double(x.width())), std::clamp(b.y0 * sy, 0.0, double(x.height())),
               std::clamp(b.x1 * sx, 0.0, double(x.width())), std::clamp(b.y1 * sy, 0.0, double(x.height()))};
      d.score = s(0);
      dets.push_back(d);
    }
    if (!cotangent) return {std::move(dets), PixelArray()};

    const auto dscores = cotangent(dets);
    if (dscores.size() != dets.size()) throw InvalidArgument("detector cotangent size mismatch");
    nn::Mat dgray = nn::Mat::Zero(r.height, r.width);
    for (std::size_t a = 0; a < boxes.size(); ++a) {
      if (dscores[a] == 0.0) continue;
      const nn::Vec g = head_.backward(tapes[a], nn::Vec::Constant(1, dscores[a]));
      const auto& b = boxes[a];
      const int x0 = static_cast<int>(b.x0), y0 = static_cast<int>(b.y0);
      for (int i = 0; i < window_; ++i)
        for (int j = 0; j < window_; ++j) dgray(y0 + i, x0 + j) += g(i * window_ + j);
    }
    PixelArray dinput(input.shape());
    for (int i = 0; i < r.height; ++i)
      for (int j = 0; j < r.width; ++j)
        for (int ch = 0; ch < kChannels; ++ch) dinput.at(i, j, ch) = dgray(i, j) / 3.0;
    return {std::move(dets), preprocess_backward(x.shape(), dinput)};
  }

  nlohmann::json weights_json() const {
    return {{"arch", "toy_detector"}, {"window", window_}, {"stride", stride_}, {"threshold", threshold_},
            {"head", nn::to_json(head_)}};
  }

 private:
  nn::Vec patch(const nn::Mat& gray, const AnchorBox& b) const {
    nn::Vec p(window_ * window_);
    const int x0 = static_cast<int>(b.x0), y0 = static_cast<int>(b.y0);
    for (int i = 0; i < window_; ++i)
      for (int j = 0; j < window_; ++j) p(i * window_ + j) = gray(y0 + i, x0 + j);
    return p;
  }

  int window_;
  int stride_;
  nn::Mlp head_;
  double threshold_;
};

// ---------------------------------------------------------------------------
// Builders for the built-in toy suite.

// Encoder whose first layer mixes a feature bank shared across the whole
// family (smooth low-frequency patterns defined in continuous image
// coordinates) with member-specific random filters. The deeper layers are
// family weights plus a smaller member-specific part. Members therefore share
// part of their sensitivity, the way pretrained backbones do, and each also
// has directions no other member responds to.
struct FamilyEncoderParams {
  std::uint64_t family_seed = 7;
  std::uint64_t member_seed = 1;
  int shared_features = 24;
  int hidden = 32;
  int embedding = 16;
  double specific_mix = 1.0;
  double deep_specific_mix = 0.3;
  double gain = 2.0;
};

inline nn::Mlp make_family_mlp(ImageShape resolution, const FamilyEncoderParams& p) {
  const int in = static_cast<int>(resolution.size());
  constexpr int kFreq = 4;
  std::mt19937_64 family(p.family_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> coef(static_cast<std::size_t>(p.shared_features) * kFreq * kFreq * kChannels);
  for (auto& c : coef) c = normal(family);

  std::mt19937_64 member(p.member_seed);
  nn::Mat w1(p.hidden, in);
  for (int j = 0; j < p.hidden; ++j) {
    nn::Vec row = nn::Vec::Zero(in);
    if (j < p.shared_features) {
      for (int r = 0; r < resolution.height; ++r) {
        const double u = (r + 0.5) / resolution.height;
        for (int c = 0; c < resolution.width; ++c) {
          const double v = (c + 0.5) / resolution.width;
          for (int ch = 0; ch < kChannels; ++ch) {
            double s = 0.0;
            for (int a = 0; a < kFreq; ++a)
              for (int b = 0; b < kFreq; ++b)
                s += coef[((static_cast<std::size_t>(j) * kFreq + a) * kFreq + b) * kChannels + ch] *
                     std::cos(std::numbers::pi * a * u) * std::cos(std::numbers::pi * b * v);
            row((r * resolution.width + c) * kChannels + ch) = s;
          }
        }
      }
      row /= row.norm();
    }
    nn::Vec specific(in);
    for (int i = 0; i < in; ++i) specific(i) = normal(member);
    specific /= specific.norm();
    row += (j < p.shared_features ? p.specific_mix : 1.0) * specific;
    w1.row(j) = (p.gain * row / row.norm()).transpose();
  }
  // deeper layers: family weights blended with member-specific noise
  const double sd = 1.0 / std::sqrt(double(p.hidden));
  const double blend = 1.0 / std::sqrt(1.0 + p.deep_specific_mix * p.deep_specific_mix);
  const nn::Mat fam_w2 = nn::random_matrix(family, p.hidden, p.hidden, sd);
  const nn::Mat fam_w3 = nn::random_matrix(family, p.embedding, p.hidden, sd);
  nn::Vec b1 = nn::random_vector(member, p.hidden, 0.1);
  nn::Mat w2 = blend * (fam_w2 + p.deep_specific_mix * nn::random_matrix(member, p.hidden, p.hidden, sd));
  nn::Vec b2 = nn::random_vector(member, p.hidden, 0.1);
  nn::Mat w3 = blend * (fam_w3 + p.deep_specific_mix * nn::random_matrix(member, p.embedding, p.hidden, sd));
  nn::Vec b3 = nn::Vec::Zero(p.embedding);
  return nn::Mlp({{w1, b1, nn::Activation::tanh}, {w2, b2, nn::Activation::tanh}, {w3, b3, nn::Activation::identity}});
}

inline CaptionerWeights make_toy_captioner_weights(ImageShape resolution, std::vector<std::string> vocab,
                                                   std::string prompt_template, std::uint64_t seed) {
  const int in = static_cast<int>(resolution.size());
  constexpr int kVisual = 24, kContext = 24, kEmbed = 12, kBuckets = 16;
  const int v = static_cast<int>(vocab.size());
  std::mt19937_64 rng(seed);
  CaptionerWeights w;
  w.vocab = std::move(vocab);
  w.prompt_template = std::move(prompt_template);
  w.vision = {nn::random_matrix(rng, kVisual, in, 2.0 / std::sqrt(double(in))), nn::random_vector(rng, kVisual, 0.1),
              nn::Activation::tanh};
  w.visual_to_context = nn::random_matrix(rng, kContext, kVisual, 2.0 / std::sqrt(double(kVisual)));
  w.token_to_context = nn::random_matrix(rng, kContext, kEmbed, 1.0 / std::sqrt(double(kEmbed)));
  w.token_embedding = nn::random_matrix(rng, v + 1, kEmbed, 1.0);
  w.prompt_embedding = nn::random_matrix(rng, kBuckets, kContext, 0.3);
  w.output = nn::random_matrix(rng, v, kContext, 2.0 / std::sqrt(double(kContext)));
  w.output_bias = nn::random_vector(rng, v, 0.1);
  return w;
}

// Hand-built head that fires on a bright square centred in the window and
// surrounded by darker pixels.
inline nn::Mlp make_bright_square_head(int window, double gain = 10.0) {
  const int lo = window / 4, hi = lo + window / 2;
  nn::Vec centre = nn::Vec::Zero(window * window), ring = nn::Vec::Zero(window * window);
  for (int i = 0; i < window; ++i)
    for (int j = 0; j < window; ++j) {
      const bool inside = i >= lo && i < hi && j >= lo && j < hi;
      (inside ? centre : ring)(i * window + j) = 1.0;
    }
  centre /= centre.sum();
  ring /= ring.sum();
  nn::Mat w1(2, window * window);
  w1.row(0) = gain * (centre - ring).transpose();  // contrast
  w1.row(1) = gain * centre.transpose();           // brightness
  nn::Vec b1(2);
  b1 << -0.3 * gain, -0.7 * gain;
  nn::Mat w2(1, 2);
  w2 << 3.0, 3.0;
  // fires only when both contrast and brightness are high
  nn::Vec b2 = nn::Vec::Constant(1, -4.0);
  return nn::Mlp({{w1, b1, nn::Activation::tanh}, {w2, b2, nn::Activation::sigmoid}});
}

}  // namespace mmattack
