#pragma once

// Declarative run configuration shared by the attack and evaluate commands.
// Every field error carries a dotted path into the document.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmattack/attack_engine.hpp"
#include "mmattack/errors.hpp"
#include "mmattack/export.hpp"
#include "mmattack/harness/evaluate.hpp"
#include "mmattack/registry.hpp"

namespace mmattack {

inline constexpr int kRunConfigVersion = 1;

struct ObjectiveSpec {
  std::string kind = "embedding_divergence";
  std::string target_text;    // targeted_caption only
  std::string target_prompt;  // defaults to the evaluation prompt
  std::vector<double> weights;
};

struct DataSpec {
  std::string source = "toy";  // "toy" (generated) or "dataset" (on disk)
  std::filesystem::path root;
  std::string dataset;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  ImageShape image_shape{32, 32};  // toy source only
  bool face = false;               // toy source only
};

struct TargetSpec {
  std::string id;
  std::string kind = "stub";  // "stub" or "openai"
  std::string response;       // stub
  harness::HttpTargetConfig http;
  double rate_limit_per_minute = 0.0;  // 0 disables limiting
};

struct EvaluationSpec {
  std::string condition;
  std::vector<harness::Variant> variants{harness::Variant::adversarial};
  std::vector<std::string> prompts{harness::kDescribePrompt};
  std::vector<TargetSpec> targets;
  std::vector<std::string> common_phrases;
  std::map<std::string, std::vector<std::string>> target_phrases;
  harness::RetryPolicy retry;
};

struct RunConfig {
  std::filesystem::path base_dir;  // relative paths resolve here

  AttackBudget budget;
  OptimizerConfig optimizer;
  ObjectiveSpec objective;
  std::vector<std::string> surrogates;
  std::optional<std::filesystem::path> registry;

  DataSpec data;

  std::filesystem::path output_dir = "out";
  std::filesystem::path store = "out/records.jsonl";
  std::filesystem::path manifest = "out/review/manifest.json";

  EvaluationSpec evaluation;

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() || base_dir.empty() ? p : (base_dir / p).lexically_normal();
  }
};

namespace detail {

inline std::string join_path(const std::string& where, const std::string& key) {
  return where.empty() ? key : where + "." + key;
}

template <typename T>
T field(const nlohmann::json& obj, const std::string& where, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(join_path(where, key), std::string("wrong type: ") + e.what());
  }
}

inline const nlohmann::json& section(const nlohmann::json& doc, const std::string& where, const std::string& key) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!doc.contains(key)) return empty;
  const auto& s = doc.at(key);
  if (!s.is_object()) throw ConfigError(join_path(where, key), "expected an object");
  return s;
}

inline void reject_unknown(const nlohmann::json& obj, const std::string& where,
                           std::initializer_list<const char*> known) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(join_path(where, key), "unknown field");
  }
}

inline int epsilon_numerator(const nlohmann::json& attack) {
  if (attack.contains("epsilon_numerator") && attack.contains("epsilon")) {
    throw ConfigError("attack.epsilon", "give epsilon or epsilon_numerator, not both");
  }
  if (attack.contains("epsilon")) {
    const double eps = field<double>(attack, "attack", "epsilon", 0.0);
    const long k = std::lround(eps * kGridLevels);
    if (std::abs(eps * kGridLevels - static_cast<double>(k)) > 1e-9) {
      throw ConfigError("attack.epsilon", "must be an integer multiple of 1/255");
    }
    return static_cast<int>(k);
  }
  return field<int>(attack, "attack", "epsilon_numerator", 16);
}

inline TargetSpec parse_target(const nlohmann::json& t, const std::string& where) {
  if (!t.is_object()) throw ConfigError(where, "expected an object");
  TargetSpec spec;
  spec.id = field<std::string>(t, where, "id", "");
  if (spec.id.empty()) throw ConfigError(where + ".id", "required");
  spec.kind = field<std::string>(t, where, "kind", "stub");
  spec.rate_limit_per_minute = field<double>(t, where, "rate_limit_per_minute", 0.0);
  if (!(spec.rate_limit_per_minute >= 0.0)) throw ConfigError(where + ".rate_limit_per_minute", "must be >= 0");
  if (spec.kind == "stub") {
    reject_unknown(t, where, {"id", "kind", "response", "rate_limit_per_minute"});
    spec.response = field<std::string>(t, where, "response", "");
  } else if (spec.kind == "openai") {
    reject_unknown(t, where,
                   {"id", "kind", "base_url", "path", "model", "api_key_env", "max_tokens", "timeout_seconds",
                    "model_update", "rate_limit_per_minute"});
    auto& h = spec.http;
    h.id = spec.id;
    h.base_url = field<std::string>(t, where, "base_url", "");
    h.path = field<std::string>(t, where, "path", h.path);
    h.model = field<std::string>(t, where, "model", "");
    h.api_key_env = field<std::string>(t, where, "api_key_env", "");
    h.max_tokens = field<int>(t, where, "max_tokens", h.max_tokens);
    h.timeout_seconds = field<int>(t, where, "timeout_seconds", h.timeout_seconds);
    h.model_update = field<std::string>(t, where, "model_update", "");
    for (const char* k : {"base_url", "model", "api_key_env"}) {
      if (!t.contains(k)) throw ConfigError(where + "." + k, "required for openai targets");
    }
  } else {
    throw ConfigError(where + ".kind", "unknown target kind '" + spec.kind + "' (expected stub or openai)");
  }
  return spec;
}

}  // namespace detail

// Parses and validates a config document. Surrogate ids are checked against
// the registry here so a typo fails before any image is touched.
inline RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {}) {
  using detail::field;
  if (!doc.is_object()) throw ConfigError("", "config must be a JSON object");
  detail::reject_unknown(doc, "", {"version", "attack", "data", "output", "evaluation"});
  if (field<int>(doc, "", "version", kRunConfigVersion) != kRunConfigVersion) {
    throw ConfigError("version", "expected " + std::to_string(kRunConfigVersion));
  }
  RunConfig cfg;
  cfg.base_dir = base_dir;

  const auto& attack = detail::section(doc, "", "attack");
  detail::reject_unknown(attack, "attack",
                         {"epsilon", "epsilon_numerator", "iterations", "step_size", "optimizer", "objective",
                          "surrogates", "registry"});
  cfg.budget = AttackBudget::from_numerator(detail::epsilon_numerator(attack), 500);
  cfg.budget.iterations = field<int>(attack, "attack", "iterations", 500);
  if (attack.contains("step_size")) cfg.budget.step_size = field<double>(attack, "attack", "step_size", 0.0);
  cfg.budget.validate();

  const auto& opt = detail::section(attack, "attack", "optimizer");
  detail::reject_unknown(opt, "attack.optimizer",
                         {"spectrum_samples", "spectrum_rho", "spectrum_sigma", "outer_momentum", "inner_step_size"});
  auto& o = cfg.optimizer;
  o.spectrum_samples = field<int>(opt, "attack.optimizer", "spectrum_samples", o.spectrum_samples);
  o.spectrum_rho = field<double>(opt, "attack.optimizer", "spectrum_rho", o.spectrum_rho);
  o.spectrum_sigma = field<double>(opt, "attack.optimizer", "spectrum_sigma", cfg.budget.epsilon);
  o.outer_momentum = field<double>(opt, "attack.optimizer", "outer_momentum", o.outer_momentum);
  o.inner_step_size = field<double>(opt, "attack.optimizer", "inner_step_size", cfg.budget.step_size);
  o.validate();

  const auto& obj = detail::section(attack, "attack", "objective");
  detail::reject_unknown(obj, "attack.objective", {"kind", "target", "prompt", "weights"});
  cfg.objective.kind = field<std::string>(obj, "attack.objective", "kind", cfg.objective.kind);
  if (cfg.objective.kind != "embedding_divergence" && cfg.objective.kind != "toxicity_evasion" &&
      cfg.objective.kind != "targeted_caption" && cfg.objective.kind != "detector_evasion") {
    throw ConfigError("attack.objective.kind", "unknown objective '" + cfg.objective.kind + "'");
  }
  cfg.objective.target_text = field<std::string>(obj, "attack.objective", "target", "");
  cfg.objective.target_prompt = field<std::string>(obj, "attack.objective", "prompt", harness::kDescribePrompt);
  cfg.objective.weights = field<std::vector<double>>(obj, "attack.objective", "weights", {});
  if (cfg.objective.kind == "targeted_caption" && cfg.objective.target_text.empty()) {
    throw ConfigError("attack.objective.target", "required for targeted_caption");
  }

  cfg.surrogates = field<std::vector<std::string>>(attack, "attack", "surrogates", {});
  if (cfg.surrogates.empty()) throw ConfigError("attack.surrogates", "at least one surrogate id is required");
  if (attack.contains("registry")) cfg.registry = field<std::string>(attack, "attack", "registry", "");
  const auto registry = cfg.registry ? SurrogateRegistry::from_file(cfg.resolve(*cfg.registry)) : SurrogateRegistry();
  for (std::size_t i = 0; i < cfg.surrogates.size(); ++i) {
    const auto& id = cfg.surrogates[i];
    if (!registry.contains(id)) {
      std::string known;
      for (const auto& k : registry.ids()) known += (known.empty() ? "" : ", ") + k;
      throw ConfigError("attack.surrogates[" + std::to_string(i) + "]",
                        "unknown surrogate id '" + id + "' (known: " + known + ")");
    }
  }

  const auto& data = detail::section(doc, "", "data");
  detail::reject_unknown(data, "data", {"source", "root", "dataset", "n", "seed", "image_shape", "face"});
  cfg.data.source = field<std::string>(data, "data", "source", "toy");
  cfg.data.n = field<std::size_t>(data, "data", "n", 1);
  cfg.data.seed = field<std::uint64_t>(data, "data", "seed", 0);
  if (cfg.data.source == "toy") {
    const auto shape = field<std::vector<int>>(data, "data", "image_shape", {32, 32});
    if (shape.size() != 2 || shape[0] < 8 || shape[1] < 8) {
      throw ConfigError("data.image_shape", "expected [height, width], each >= 8");
    }
    cfg.data.image_shape = {shape[0], shape[1]};
    cfg.data.face = field<bool>(data, "data", "face", false);
  } else if (cfg.data.source == "dataset") {
    cfg.data.root = field<std::string>(data, "data", "root", "");
    cfg.data.dataset = field<std::string>(data, "data", "dataset", "");
    if (cfg.data.root.empty()) throw ConfigError("data.root", "required for dataset source");
    if (cfg.data.dataset.empty()) throw ConfigError("data.dataset", "required for dataset source");
  } else {
    throw ConfigError("data.source", "expected toy or dataset");
  }

  const auto& out = detail::section(doc, "", "output");
  detail::reject_unknown(out, "output", {"dir", "store", "manifest"});
  cfg.output_dir = field<std::string>(out, "output", "dir", cfg.output_dir.string());
  cfg.store = field<std::string>(out, "output", "store", (cfg.output_dir / "records.jsonl").string());
  cfg.manifest = field<std::string>(out, "output", "manifest", (cfg.output_dir / "review" / "manifest.json").string());

  const auto& ev = detail::section(doc, "", "evaluation");
  detail::reject_unknown(ev, "evaluation",
                         {"condition", "variants", "prompts", "prompt_sweep", "targets", "rejection_phrases", "retry"});
  auto& e = cfg.evaluation;
  e.condition = field<std::string>(ev, "evaluation", "condition", cfg.objective.kind);
  if (ev.contains("variants")) {
    e.variants.clear();
    const auto names = field<std::vector<std::string>>(ev, "evaluation", "variants", {});
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto v = harness::variant_from_string(names[i]);
      if (!v) throw ConfigError("evaluation.variants[" + std::to_string(i) + "]", "expected natural or adversarial");
      e.variants.push_back(*v);
    }
  }
  if (ev.contains("prompts") && field<bool>(ev, "evaluation", "prompt_sweep", false)) {
    throw ConfigError("evaluation.prompt_sweep", "give prompts or prompt_sweep, not both");
  }
  if (field<bool>(ev, "evaluation", "prompt_sweep", false)) e.prompts = harness::prompt_sweep();
  e.prompts = field<std::vector<std::string>>(ev, "evaluation", "prompts", e.prompts);
  if (e.prompts.empty()) throw ConfigError("evaluation.prompts", "at least one prompt is required");

  if (ev.contains("targets")) {
    const auto& ts = ev.at("targets");
    if (!ts.is_array()) throw ConfigError("evaluation.targets", "expected an array");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const std::string where = "evaluation.targets[" + std::to_string(i) + "]";
      auto t = detail::parse_target(ts[i], where);
      if (!seen.insert(t.id).second) throw ConfigError(where + ".id", "duplicate target id '" + t.id + "'");
      e.targets.push_back(std::move(t));
    }
  }

  const auto& phrases = detail::section(ev, "evaluation", "rejection_phrases");
  detail::reject_unknown(phrases, "evaluation.rejection_phrases", {"common", "per_target"});
  e.common_phrases = field<std::vector<std::string>>(phrases, "evaluation.rejection_phrases", "common", {});
  e.target_phrases = field<std::map<std::string, std::vector<std::string>>>(phrases, "evaluation.rejection_phrases",
                                                                           "per_target", {});

  const auto& retry = detail::section(ev, "evaluation", "retry");
  detail::reject_unknown(retry, "evaluation.retry", {"max_retries", "base_delay_ms", "max_delay_ms"});
  e.retry.max_retries = field<int>(retry, "evaluation.retry", "max_retries", e.retry.max_retries);
  e.retry.base_delay = std::chrono::milliseconds(
      field<long>(retry, "evaluation.retry", "base_delay_ms", static_cast<long>(e.retry.base_delay.count())));
  e.retry.max_delay = std::chrono::milliseconds(
      field<long>(retry, "evaluation.retry", "max_delay_ms", static_cast<long>(e.retry.max_delay.count())));
  if (e.retry.max_retries < 0) throw ConfigError("evaluation.retry.max_retries", "must be >= 0");
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error&) {
    throw ConfigError(path.string(), "config file not readable");
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string(), std::string("malformed JSON: ") + e.what());
  }
  return parse_run_config(doc, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

}  // namespace mmattack
