#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmattack/errors.hpp"
#include "mmattack/toy_models.hpp"

namespace mmattack {

// One entry of a surrogate registry file.
struct SurrogateSpec {
  std::string id;
  SurrogateKind kind = SurrogateKind::encoder;
  // "builtin:<name>" or a path to a weights document.
  std::string weights;
  std::optional<ImageShape> resolution;
  std::optional<Normalization> normalization;
};

namespace detail {

inline const Normalization kHalfNorm{{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
inline const Normalization kClipNorm{{0.48145466, 0.4578275, 0.40821073}, {0.26862954, 0.26130258, 0.27577711}};
inline const Normalization kImagenetNorm{{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}};

inline const std::vector<std::string>& toy_vocab() {
  static const std::vector<std::string> v{"a", "photo", "of", "cat", "dog", "castle", "panda", "man", "woman", "face"};
  return v;
}

struct BuiltinDefault {
  SurrogateKind kind;
  ImageShape resolution;
  Normalization norm;
};

inline const std::map<std::string, BuiltinDefault>& builtin_defaults() {
  static const std::map<std::string, BuiltinDefault> d{
      {"toy-encoder-a", {SurrogateKind::encoder, {16, 16}, kHalfNorm}},
      {"toy-encoder-b", {SurrogateKind::encoder, {16, 16}, kClipNorm}},
      {"toy-encoder-c", {SurrogateKind::encoder, {16, 16}, kImagenetNorm}},
      {"toy-linear-encoder", {SurrogateKind::encoder, {8, 8}, Normalization::identity()}},
      {"identity-encoder", {SurrogateKind::encoder, {0, 0}, Normalization::identity()}},
      {"toy-captioner", {SurrogateKind::captioner, {16, 16}, kHalfNorm}},
      {"toy-captioner-b", {SurrogateKind::captioner, {12, 12}, kClipNorm}},
      {"uniform-captioner", {SurrogateKind::captioner, {8, 8}, Normalization::identity()}},
      {"toy-detector", {SurrogateKind::detector, {16, 16}, Normalization::identity()}},
      {"toy-detector-b", {SurrogateKind::detector, {16, 16}, Normalization::identity()}},
  };
  return d;
}

inline std::vector<std::string> builtin_names() {
  std::vector<std::string> out;
  for (const auto& [name, _] : builtin_defaults()) out.push_back(name);
  return out;
}

inline std::shared_ptr<Surrogate> make_builtin(const std::string& name, SurrogateInfo info) {
  const auto& r = info.input_resolution;
  if (name == "toy-encoder-a") return std::make_shared<MlpEncoder>(info, make_family_mlp(r, {.member_seed = 101}));
  if (name == "toy-encoder-b") return std::make_shared<MlpEncoder>(info, make_family_mlp(r, {.member_seed = 202}));
  if (name == "toy-encoder-c") return std::make_shared<MlpEncoder>(info, make_family_mlp(r, {.member_seed = 303}));
  if (name == "toy-linear-encoder") {
    std::mt19937_64 rng(404);
    const int in = static_cast<int>(r.size());
    return std::make_shared<MlpEncoder>(
        info, nn::Mlp({{nn::random_matrix(rng, 16, in, 1.0 / std::sqrt(double(in))), nn::Vec::Zero(16),
                        nn::Activation::identity}}));
  }
  if (name == "identity-encoder") return std::make_shared<IdentityEncoder>(info);
  if (name == "toy-captioner") {
    return std::make_shared<ToyCaptioner>(
        info, make_toy_captioner_weights(r, toy_vocab(), "USER: <image> {prompt} ASSISTANT:", 505));
  }
  if (name == "toy-captioner-b") {
    auto vocab = toy_vocab();
    std::reverse(vocab.begin(), vocab.end());
    return std::make_shared<ToyCaptioner>(
        info, make_toy_captioner_weights(r, vocab, "### Human: <Img> {prompt} ### Assistant:", 606));
  }
  if (name == "uniform-captioner") return std::make_shared<UniformCaptioner>(info, toy_vocab());
  if (name == "toy-detector") return std::make_shared<ToyDetector>(info, 8, 4, make_bright_square_head(8), 0.5);
  if (name == "toy-detector-b") return std::make_shared<ToyDetector>(info, 8, 2, make_bright_square_head(8, 8.0), 0.5);
  throw RegistryError(name, builtin_names());
}

inline std::shared_ptr<Surrogate> make_from_weights(const nlohmann::json& doc, SurrogateInfo info) {
  const auto arch = doc.at("arch").get<std::string>();
  if (arch == "mlp_encoder") return std::make_shared<MlpEncoder>(info, nn::mlp_from_json(doc.at("layers")));
  if (arch == "toy_captioner") {
    CaptionerWeights w;
    w.vocab = doc.at("vocab").get<std::vector<std::string>>();
    w.prompt_template = doc.at("prompt_template").get<std::string>();
    w.vision = {nn::mat_from_json(doc.at("vision").at("weight")), nn::vec_from_json(doc.at("vision").at("bias")),
                nn::Activation::tanh};
    w.visual_to_context = nn::mat_from_json(doc.at("visual_to_context"));
    w.token_to_context = nn::mat_from_json(doc.at("token_to_context"));
    w.token_embedding = nn::mat_from_json(doc.at("token_embedding"));
    w.prompt_embedding = nn::mat_from_json(doc.at("prompt_embedding"));
    w.output = nn::mat_from_json(doc.at("output"));
    w.output_bias = nn::vec_from_json(doc.at("output_bias"));
    return std::make_shared<ToyCaptioner>(info, std::move(w));
  }
  if (arch == "toy_detector") {
    return std::make_shared<ToyDetector>(info, doc.at("window").get<int>(), doc.at("stride").get<int>(),
                                         nn::mlp_from_json(doc.at("head")), doc.at("threshold").get<double>());
  }
  throw InvalidArgument("unknown arch '" + arch + "'");
}

}  // namespace detail

// Builds an adapter in evaluation mode. Built-in toy weights are generated
// deterministically from fixed seeds; file weights are read from JSON.
inline std::shared_ptr<const Surrogate> load_surrogate(const SurrogateSpec& spec) {
  constexpr std::string_view kBuiltin = "builtin:";
  SurrogateInfo info{spec.id, spec.kind, spec.resolution.value_or(ImageShape{}),
                     spec.normalization.value_or(Normalization::identity()), false};

  if (spec.weights.starts_with(kBuiltin)) {
    const std::string name = spec.weights.substr(kBuiltin.size());
    const auto& defaults = detail::builtin_defaults();
    const auto it = defaults.find(name);
    if (it == defaults.end()) throw RegistryError(name, detail::builtin_names());
    if (it->second.kind != spec.kind) {
      throw InvalidArgument("surrogate '" + spec.id + "' declared as " + to_string(spec.kind) + " but builtin:" + name +
                            " is a " + to_string(it->second.kind));
    }
    if (!spec.resolution) info.input_resolution = it->second.resolution;
    if (!spec.normalization) info.normalization = it->second.norm;
    return detail::make_builtin(name, std::move(info));
  }

  std::ifstream in(spec.weights);
  if (!in) throw LoadError(spec.weights, "file not found or unreadable");
  std::shared_ptr<Surrogate> s;
  try {
    const auto doc = nlohmann::json::parse(in);
    if (!spec.resolution && doc.contains("input_resolution")) {
      const auto r = doc.at("input_resolution").get<std::vector<int>>();
      if (r.size() != 2) throw InvalidArgument("input_resolution must be [height, width]");
      info.input_resolution = {r[0], r[1]};
    }
    if (!spec.normalization && doc.contains("mean")) {
      info.normalization = {doc.at("mean").get<std::array<double, 3>>(), doc.at("std").get<std::array<double, 3>>()};
    }
    s = detail::make_from_weights(doc, std::move(info));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(spec.weights, std::string("corrupt weights document: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw LoadError(spec.weights, std::string("invalid weights: ") + e.what());
  }
  if (s->kind() != spec.kind) {
    throw LoadError(spec.weights, std::string("weights describe a ") + to_string(s->kind()) + ", registry says " +
                                      to_string(spec.kind));
  }
  return s;
}

// Serializes a toy adapter's weights, including its preprocessing constants.
inline nlohmann::json export_weights(const Surrogate& s) {
  nlohmann::json doc;
  if (const auto* e = dynamic_cast<const MlpEncoder*>(&s)) doc = e->weights_json();
  else if (const auto* c = dynamic_cast<const ToyCaptioner*>(&s)) doc = c->weights_json();
  else if (const auto* d = dynamic_cast<const ToyDetector*>(&s)) doc = d->weights_json();
  else throw UnsupportedSurrogate("surrogate '" + s.id() + "' has no exportable weights");
  const auto& info = s.info();
  doc["input_resolution"] = {info.input_resolution.height, info.input_resolution.width};
  doc["mean"] = info.normalization.mean;
  doc["std"] = info.normalization.std;
  return doc;
}

// Maps surrogate ids to specs. Always contains the built-in toy suite; registry
// files add or override entries.
class SurrogateRegistry {
 public:
  SurrogateRegistry() {
    for (const auto& [name, d] : detail::builtin_defaults()) {
      specs_[name] = SurrogateSpec{name, d.kind, "builtin:" + name, std::nullopt, std::nullopt};
    }
  }

  static SurrogateRegistry from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string(), "registry file not readable");
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string(), std::string("malformed registry: ") + e.what());
    }
    SurrogateRegistry reg;
    reg.add_document(doc, path.parent_path());
    return reg;
  }

  // Document: {"surrogates": [{id, kind, weights, resolution?, normalization?}]}.
  void add_document(const nlohmann::json& doc, const std::filesystem::path& base_dir = {}) {
    const auto& list = doc.at("surrogates");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto& e = list[i];
      const std::string where = "surrogates[" + std::to_string(i) + "]";
      try {
        SurrogateSpec spec;
        spec.id = e.at("id").get<std::string>();
        spec.kind = surrogate_kind_from_string(e.at("kind").get<std::string>());
        spec.weights = e.at("weights").get<std::string>();
        if (!spec.weights.starts_with("builtin:") && !base_dir.empty() &&
            std::filesystem::path(spec.weights).is_relative()) {
          spec.weights = (base_dir / spec.weights).string();
        }
        if (e.contains("resolution")) {
          const auto r = e.at("resolution").get<std::vector<int>>();
          if (r.size() != 2) throw ConfigError(where + ".resolution", "expected [height, width]");
          spec.resolution = ImageShape{r[0], r[1]};
        }
        if (e.contains("normalization")) {
          spec.normalization = Normalization{e.at("normalization").at("mean").get<std::array<double, 3>>(),
                                             e.at("normalization").at("std").get<std::array<double, 3>>()};
        }
        specs_[spec.id] = std::move(spec);
      } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(where, ex.what());
      } catch (const InvalidArgument& ex) {
        throw ConfigError(where, ex.what());
      }
    }
  }

  bool contains(const std::string& id) const { return specs_.count(id) != 0; }

  const SurrogateSpec& spec(const std::string& id) const {
    const auto it = specs_.find(id);
    if (it == specs_.end()) throw RegistryError(id, ids());
    return it->second;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : specs_) out.push_back(id);
    return out;
  }

  // Each call hands out an independent adapter instance.
  std::shared_ptr<const Surrogate> load(const std::string& id) const { return load_surrogate(spec(id)); }

  SurrogateEnsemble ensemble(const std::vector<std::string>& ids) const {
    std::vector<std::shared_ptr<const Surrogate>> members;
    for (const auto& id : ids) members.push_back(load(id));
    return SurrogateEnsemble(std::move(members));
  }

 private:
  std::map<std::string, SurrogateSpec> specs_;
};

}  // namespace mmattack
