#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "mmattack/errors.hpp"

namespace mmattack::nn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Activation { identity, tanh, relu, sigmoid };

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw InvalidArgument("unknown activation '" + s + "'");
}

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "identity";
}

inline Vec activate(Activation a, const Vec& z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::tanh: return z.array().tanh().matrix();
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::sigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
  }
  return z;
}

// d activation / d z expressed through the output y = act(z).
inline Vec activation_slope(Activation a, const Vec& z, const Vec& y) {
  switch (a) {
    case Activation::identity: return Vec::Ones(z.size());
    case Activation::tanh: return (1.0 - y.array().square()).matrix();
    case Activation::relu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::sigmoid: return (y.array() * (1.0 - y.array())).matrix();
  }
  return Vec::Ones(z.size());
}

struct Dense {
  Mat weight;  // out x in
  Vec bias;
  Activation activation = Activation::identity;

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }
};

// Feed-forward stack with an explicit tape for reverse mode.
class Mlp {
 public:
  struct Tape {
    std::vector<Vec> inputs;
    std::vector<Vec> pre;
    std::vector<Vec> post;
  };

  Mlp() = default;
  explicit Mlp(std::vector<Dense> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.weight.rows()) throw InvalidArgument("dense layer bias size mismatch");
      if (i > 0 && l.in() != layers_[i - 1].out()) throw InvalidArgument("dense layer chain size mismatch");
    }
  }

  const std::vector<Dense>& layers() const noexcept { return layers_; }
  int in() const { return layers_.empty() ? 0 : layers_.front().in(); }
  int out() const { return layers_.empty() ? 0 : layers_.back().out(); }

  Vec forward(const Vec& x, Tape* tape = nullptr) const {
    if (x.size() != in()) throw InvalidArgument("mlp input size mismatch");
    Vec h = x;
    if (tape) *tape = Tape{};
    for (const auto& l : layers_) {
      Vec z = l.weight * h + l.bias;
      Vec y = activate(l.activation, z);
      if (tape) {
        tape->inputs.push_back(h);
        tape->pre.push_back(z);
        tape->post.push_back(y);
      }
      h = std::move(y);
    }
    return h;
  }

  Vec backward(const Tape& tape, const Vec& grad_out) const {
    Vec g = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const auto& l = layers_[i];
      g = g.cwiseProduct(activation_slope(l.activation, tape.pre[i], tape.post[i]));
      g = l.weight.transpose() * g;
    }
    return g;
  }

 private:
  std::vector<Dense> layers_;
};

inline Mat random_matrix(std::mt19937_64& rng, int rows, int cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

inline Vec random_vector(std::mt19937_64& rng, int n, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

// JSON encoding: matrices as row-major nested arrays.
inline nlohmann::json to_json(const Mat& m) {
  auto rows = nlohmann::json::array();
  for (int r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json to_json(const Vec& v) {
  auto arr = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

inline Mat mat_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty() || !j.front().is_array()) throw InvalidArgument("expected a non-empty matrix");
  const auto rows = static_cast<int>(j.size());
  const auto cols = static_cast<int>(j.front().size());
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (j[r].size() != static_cast<std::size_t>(cols)) throw InvalidArgument("ragged matrix");
    for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  if (!m.allFinite()) throw InvalidArgument("matrix contains non-finite values");
  return m;
}

inline Vec vec_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw InvalidArgument("expected an array");
  Vec v(static_cast<int>(j.size()));
  for (int i = 0; i < v.size(); ++i) v(i) = j[i].get<double>();
  if (!v.allFinite()) throw InvalidArgument("vector contains non-finite values");
  return v;
}

inline nlohmann::json to_json(const Mlp& mlp) {
  auto layers = nlohmann::json::array();
  for (const auto& l : mlp.layers()) {
    layers.push_back({{"weight", to_json(l.weight)}, {"bias", to_json(l.bias)}, {"activation", to_string(l.activation)}});
  }
  return layers;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw InvalidArgument("expected a non-empty layer list");
  std::vector<Dense> layers;
  for (const auto& l : j) {
    layers.push_back(Dense{mat_from_json(l.at("weight")), vec_from_json(l.at("bias")),
                           activation_from_string(l.value("activation", "identity"))});
  }
  return Mlp(std::move(layers));
}

inline Vec log_softmax(const Vec& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

}  // namespace mmattack::nn
