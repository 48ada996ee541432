#pragma once

// Command-line front end. run_cli() is the whole program minus main(), so tests
// can drive it in-process with captured streams.
//
// Exit codes: 0 ok, 1 unexpected error, 2 configuration or input error,
// 3 optimizer divergence, 4 target service failure, 5 pending verdicts.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mmattack/attack_engine.hpp"
#include "mmattack/errors.hpp"
#include "mmattack/export.hpp"
#include "mmattack/harness/client.hpp"
#include "mmattack/harness/dataset.hpp"
#include "mmattack/harness/evaluate.hpp"
#include "mmattack/harness/metrics.hpp"
#include "mmattack/harness/records.hpp"
#include "mmattack/harness/review.hpp"
#include "mmattack/objectives.hpp"
#include "mmattack/png_io.hpp"
#include "mmattack/registry.hpp"
#include "mmattack/run_config.hpp"
#include "mmattack/toy_data.hpp"

namespace mmattack::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kService = 4, kPending = 5 };

inline constexpr const char* kVersion = "0.1.0";

// Scalar fields a flag may override. Applied to the document before parsing so
// derived defaults (step size from epsilon, for instance) follow the override.
struct Overrides {
  std::optional<int> epsilon_numerator;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
  std::optional<std::string> out;
};

inline RunConfig load_config(const std::filesystem::path& path, const Overrides& o) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string(), std::string("malformed JSON: ") + e.what());
  } catch (const IoError&) {
    throw ConfigError(path.string(), "config file not readable");
  }
  if (!doc.is_object()) throw ConfigError(path.string(), "config must be a JSON object");
  if (o.epsilon_numerator) {
    doc["attack"].erase("epsilon");
    doc["attack"]["epsilon_numerator"] = *o.epsilon_numerator;
  }
  if (o.iterations) doc["attack"]["iterations"] = *o.iterations;
  if (o.seed) doc["data"]["seed"] = *o.seed;
  if (o.n) doc["data"]["n"] = *o.n;
  auto cfg = parse_run_config(doc, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
  if (o.out) {
    // a command-line output dir is taken relative to the working directory
    cfg.output_dir = std::filesystem::absolute(*o.out);
    if (!doc["output"].contains("store")) cfg.store = cfg.output_dir / "records.jsonl";
    if (!doc["output"].contains("manifest")) cfg.manifest = cfg.output_dir / "review" / "manifest.json";
  }
  return cfg;
}

// Natural images selected by the data section, in a fixed order.
inline std::vector<Image> select_images(const RunConfig& cfg) {
  if (cfg.data.source == "toy") {
    std::vector<Image> out;
    for (std::size_t i = 0; i < cfg.data.n; ++i) {
      const auto seed = cfg.data.seed + i;
      out.push_back(make_toy_image(seed, cfg.data.image_shape, cfg.data.face, "toy-" + std::to_string(seed)));
    }
    return out;
  }
  return harness::load_dataset(cfg.resolve(cfg.data.root), cfg.data.dataset, cfg.data.n, cfg.data.seed);
}

inline std::vector<std::string> select_image_ids(const RunConfig& cfg) {
  if (cfg.data.source == "toy") {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < cfg.data.n; ++i) ids.push_back("toy-" + std::to_string(cfg.data.seed + i));
    return ids;
  }
  if (cfg.data.n == 0) return {};
  return harness::read_dataset_index(cfg.resolve(cfg.data.root), cfg.data.dataset).sample(cfg.data.n, cfg.data.seed);
}

// Per-image optimizer seed: a function of the run seed and the image id only,
// so adding images to a run does not change the others.
inline std::uint64_t image_seed(std::uint64_t run_seed, const std::string& image_id) {
  return std::stoull(fnv1a_hex(std::to_string(run_seed) + ":" + image_id), nullptr, 16);
}

inline SurrogateRegistry make_registry(const RunConfig& cfg) {
  return cfg.registry ? SurrogateRegistry::from_file(cfg.resolve(*cfg.registry)) : SurrogateRegistry();
}

inline LossObjective make_objective(const RunConfig& cfg, const SurrogateEnsemble& ensemble, const Image& natural) {
  const auto& spec = cfg.objective;
  if (spec.kind == "embedding_divergence") {
    return LossObjective::embedding_divergence(ensemble, natural, spec.weights);
  }
  if (spec.kind == "toxicity_evasion") return LossObjective::toxicity_evasion(ensemble, natural, spec.weights);
  if (spec.kind == "targeted_caption") {
    return LossObjective::targeted_caption(ensemble, make_target_sentence(spec.target_text, spec.target_prompt, ensemble),
                                           spec.weights);
  }
  return LossObjective::detector_evasion(ensemble, natural, spec.weights);
}

inline int cmd_attack(const RunConfig& cfg, std::ostream& out) {
  const auto registry = make_registry(cfg);
  const auto ensemble = registry.ensemble(cfg.surrogates);
  const auto images = select_images(cfg);
  const auto dir = cfg.resolve(cfg.output_dir);
  for (const auto& natural : images) {
    // build the objective before writing anything so a bad target fails cleanly
    const auto objective = make_objective(cfg, ensemble, natural);
    auto optimizer = cfg.optimizer;
    optimizer.rng_seed = image_seed(cfg.data.seed, natural.id());
    auto result = quantize_and_verify(run_attack(natural, objective, cfg.budget, optimizer));
    if (!result.quantized_ok || !within_linf_ball(result.adversarial, natural, cfg.budget.epsilon_numerator())) {
      throw DivergenceError(-1, "", "image '" + natural.id() + "' left the epsilon ball after quantization");
    }
    write_atomically(dir / "natural" / (natural.id() + ".png"),
                     [&](const std::filesystem::path& tmp) { write_png(tmp, natural); });
    const auto paths = export_attack_result(result, dir / "adversarial");
    out << natural.id() << ": " << paths.image.string() << " final loss "
        << (result.loss_trace.empty() ? 0.0 : result.loss_trace.back()) << "\n";
  }
  out << images.size() << " image(s) attacked, epsilon " << cfg.budget.epsilon_numerator() << "/255\n";
  return kOk;
}

inline std::shared_ptr<harness::TargetClient> make_client(const TargetSpec& t) {
  if (t.kind == "stub") return std::make_shared<harness::StubClient>(t.id, t.response);
  return std::make_shared<harness::OpenAiCompatibleClient>(t.http);
}

inline int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  const auto& ev = cfg.evaluation;
  if (ev.targets.empty()) throw ConfigError("evaluation.targets", "at least one target is required");
  // every client is built (and its credential read) before the first query
  std::vector<harness::EvaluationTarget> targets;
  for (const auto& t : ev.targets) {
    targets.push_back({make_client(t), t.rate_limit_per_minute > 0
                                           ? std::make_shared<harness::RateLimiter>(t.rate_limit_per_minute)
                                           : nullptr});
  }

  const auto dir = cfg.resolve(cfg.output_dir);
  const harness::ImageStore images{dir};
  std::vector<harness::EvaluationItem> items;
  for (const auto& id : select_image_ids(cfg)) {
    for (const auto variant : ev.variants) {
      harness::EvaluationItem item;
      item.image_id = id;
      item.variant = variant;
      item.png_path = variant == harness::Variant::natural ? images.natural(id) : images.adversarial(id);
      if (!std::filesystem::exists(item.png_path)) {
        throw IngestionError("image " + item.png_path.string() + " not found; run the attack command first");
      }
      if (variant == harness::Variant::adversarial) {
        item.condition = ev.condition;
        item.surrogate_subset = cfg.surrogates;
        const auto sidecar = nlohmann::json::parse(read_text(dir / "adversarial" / (id + ".json")));
        item.config_hash = sidecar.value("config_hash", "");
      } else {
        item.condition = "no_attack";
      }
      items.push_back(std::move(item));
    }
  }

  harness::EvaluationOptions options;
  options.retry = ev.retry;
  for (const auto& p : ev.common_phrases) options.phrases.add_common(p);
  for (const auto& [target, list] : ev.target_phrases)
    for (const auto& p : list) options.phrases.add(target, p);
  const harness::RecordStore store(cfg.resolve(cfg.store));
  for (const auto& r : store.load()) options.skip_record_ids.insert(r.record_id);

  const auto records = harness::run_evaluation(items, targets, ev.prompts, store, options);
  std::size_t flagged = 0;
  for (const auto& r : records) flagged += r.auto_rejected;
  out << records.size() << " record(s) appended to " << store.path().string();
  const auto planned = items.size() * targets.size() * ev.prompts.size();
  if (planned > records.size()) out << " (" << planned - records.size() << " already present)";
  out << ", " << flagged << " flagged as rejected\n";
  return kOk;
}

inline int cmd_report(const std::filesystem::path& store_path, const std::optional<std::string>& json_path,
                      std::ostream& out) {
  const auto report = harness::compute_metrics(harness::RecordStore(store_path).load());
  out << harness::render_table(report);
  if (json_path) write_text_atomically(*json_path, harness::to_json(report).dump(2) + "\n");
  return kOk;
}

inline int cmd_review_export(const std::filesystem::path& store_path, const std::filesystem::path& images_root,
                             const std::filesystem::path& manifest_path, std::ostream& out) {
  const auto records = harness::RecordStore(store_path).load();
  harness::export_review_manifest(records, harness::ImageStore{images_root}, manifest_path);
  out << records.size() << " entr" << (records.size() == 1 ? "y" : "ies") << " written to " << manifest_path.string()
      << "\n";
  return kOk;
}

inline int cmd_review_import(const std::filesystem::path& manifest_path, const std::filesystem::path& store_path,
                             bool allow_override, std::ostream& out) {
  const auto result = harness::import_verdicts_into_store(manifest_path, harness::RecordStore(store_path), allow_override);
  out << result.changed.size() << " verdict(s) updated\n";
  return kOk;
}

// Writes a generated dataset in the on-disk layout the dataset source reads.
inline int cmd_make_toy_dataset(const std::filesystem::path& root, const std::string& name, std::size_t count,
                                std::uint64_t seed, int size, bool face, std::ostream& out) {
  if (count == 0) throw ConfigError("--count", "must be >= 1");
  if (size < 8) throw ConfigError("--size", "must be >= 8");
  const auto dir = root / name;
  std::string index;
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "%06zu", i);
    write_atomically(dir / "images" / (std::string(id) + ".png"), [&](const std::filesystem::path& tmp) {
      write_png(tmp, make_toy_image(seed + i, {size, size}, face, id));
    });
    index += std::string(id) + "\n";
  }
  write_text_atomically(dir / "index.txt", index);
  out << count << " image(s) written to " << dir.string() << "\n";
  return kOk;
}

inline int cmd_list_surrogates(const std::optional<std::string>& registry_path, std::ostream& out) {
  const auto registry = registry_path ? SurrogateRegistry::from_file(*registry_path) : SurrogateRegistry();
  for (const auto& id : registry.ids()) {
    const auto& spec = registry.spec(id);
    out << id << "\t" << to_string(spec.kind) << "\t" << spec.weights << "\n";
  }
  return kOk;
}

// Maps library errors onto exit codes. The message goes to `err`.
template <typename F>
int guarded(F&& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const RegistryError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const LoadError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ValidationError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kConfig;
  } catch (const IngestionError& e) {
    err << "input error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingCredential& e) {
    // raised while building clients, before any query was sent
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const UnsupportedSurrogate& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InterfaceError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const ServiceError& e) {
    err << "service error: " << e.what() << "\n";
    return kService;
  } catch (const PendingVerdictsError& e) {
    err << e.what() << "\n";
    return kPending;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transfer attacks against multimodal models, with an offline evaluation harness", "mmattack"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Overrides ov;
  auto add_overrides = [&](CLI::App* sub, bool attack_flags) {
    if (attack_flags) {
      sub->add_option("--epsilon-numerator", ov.epsilon_numerator, "Override attack.epsilon_numerator (epsilon = k/255)");
      sub->add_option("--iterations", ov.iterations, "Override attack.iterations");
    }
    sub->add_option("--seed", ov.seed, "Override data.seed");
    sub->add_option("--n", ov.n, "Override data.n");
    sub->add_option("--out", ov.out, "Override output.dir (relative to the working directory)");
  };

  std::string config_path;
  auto* attack = app.add_subcommand("attack", "Craft adversarial images for the configured data");
  attack->add_option("config", config_path, "Run config (JSON)")->required();
  add_overrides(attack, true);

  auto* evaluate = app.add_subcommand("evaluate", "Query targets with attack outputs and append records");
  evaluate->add_option("config", config_path, "Run config (JSON)")->required();
  add_overrides(evaluate, false);

  std::string store_path;
  std::optional<std::string> json_path;
  auto* report = app.add_subcommand("report", "Print success and rejection rates from a record store");
  report->add_option("store", store_path, "Record store (JSON lines)")->required();
  report->add_option("--json", json_path, "Also write the report as JSON to this path");

  std::string images_root, manifest_path;
  auto* rexport = app.add_subcommand("review-export", "Write a review manifest for a record store");
  rexport->add_option("store", store_path, "Record store")->required();
  rexport->add_option("--images", images_root, "Attack output dir holding natural/ and adversarial/")->required();
  rexport->add_option("--manifest", manifest_path, "Manifest path to write")->required();

  bool allow_override = false;
  auto* rimport = app.add_subcommand("review-import", "Apply reviewed verdicts from a manifest to a record store");
  rimport->add_option("manifest", manifest_path, "Reviewed manifest")->required();
  rimport->add_option("store", store_path, "Record store to update")->required();
  rimport->add_flag("--allow-override", allow_override, "Allow changing verdicts that are already terminal");

  std::string ds_root, ds_name;
  std::size_t ds_count = 0;
  std::uint64_t ds_seed = 0;
  int ds_size = 32;
  bool ds_face = false;
  auto* mkds = app.add_subcommand("make-toy-dataset", "Write a synthetic image dataset in the on-disk layout");
  mkds->add_option("root", ds_root, "Dataset root")->required();
  mkds->add_option("name", ds_name, "Dataset name")->required();
  mkds->add_option("--count", ds_count, "Number of images")->required();
  mkds->add_option("--seed", ds_seed, "First image seed");
  mkds->add_option("--size", ds_size, "Image side length in pixels");
  mkds->add_flag("--face", ds_face, "Draw the bright square the toy detectors fire on");

  std::optional<std::string> registry_path;
  auto* list = app.add_subcommand("list-surrogates", "Show surrogate ids known to a registry");
  list->add_option("--registry", registry_path, "Registry file (defaults to the built-in toy suite)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    // help and version land here too, with exit status 0
    return app.exit(e, out, err) == 0 ? kOk : kConfig;
  }

  return guarded(
      [&]() -> int {
        if (attack->parsed()) return cmd_attack(load_config(config_path, ov), out);
        if (evaluate->parsed()) return cmd_evaluate(load_config(config_path, ov), out);
        if (report->parsed()) return cmd_report(store_path, json_path, out);
        if (rexport->parsed()) return cmd_review_export(store_path, images_root, manifest_path, out);
        if (rimport->parsed()) return cmd_review_import(manifest_path, store_path, allow_override, out);
        if (mkds->parsed()) return cmd_make_toy_dataset(ds_root, ds_name, ds_count, ds_seed, ds_size, ds_face, out);
        return cmd_list_surrogates(registry_path, out);
      },
      err);
}

}  // namespace mmattack::cli
