#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmattack/errors.hpp"
#include "mmattack/export.hpp"
#include "mmattack/harness/records.hpp"

namespace mmattack::harness {

inline constexpr int kManifestVersion = 1;

// Where attack outputs live: <root>/natural/<image_id>.png and
// <root>/adversarial/<image_id>.png.
struct ImageStore {
  std::filesystem::path root;

  std::filesystem::path natural(const std::string& image_id) const { return root / "natural" / (image_id + ".png"); }
  std::filesystem::path adversarial(const std::string& image_id) const {
    return root / "adversarial" / (image_id + ".png");
  }
};

inline std::string proposed_verdict(const EvaluationRecord& r) {
  if (is_terminal(r.verdict)) return to_string(r.verdict);
  return r.auto_rejected ? "rejected" : "pending";
}

// Builds the manifest document. Image paths are relative to `manifest_dir`
// so the manifest and the images can move together.
inline nlohmann::json build_review_manifest(const std::vector<EvaluationRecord>& records, const ImageStore& images,
                                            const std::filesystem::path& manifest_dir) {
  auto rel = [&](const std::filesystem::path& p) {
    return std::filesystem::relative(std::filesystem::absolute(p), std::filesystem::absolute(manifest_dir)).generic_string();
  };
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& r : records) {
    const auto nat = images.natural(r.image_id);
    const auto adv = images.adversarial(r.image_id);
    if (!std::filesystem::exists(nat)) {
      throw IoError("record '" + r.record_id + "': natural image " + nat.string() + " is missing");
    }
    const bool has_adv = std::filesystem::exists(adv);
    if (r.variant == Variant::adversarial && !has_adv) {
      throw IoError("record '" + r.record_id + "': adversarial image " + adv.string() + " is missing");
    }
    entries.push_back({{"record_id", r.record_id},
                       {"target_id", r.target_id},
                       {"variant", to_string(r.variant)},
                       {"prompt", r.prompt},
                       {"natural_image", rel(nat)},
                       {"adversarial_image", has_adv ? nlohmann::json(rel(adv)) : nlohmann::json(nullptr)},
                       {"response_text", r.response_text},
                       {"proposed_verdict", proposed_verdict(r)},
                       {"verdict", to_string(r.verdict)},
                       {"adjudicator", r.adjudicator}});
  }
  return {{"manifest_version", kManifestVersion}, {"entries", entries}};
}

inline void export_review_manifest(const std::vector<EvaluationRecord>& records, const ImageStore& images,
                                   const std::filesystem::path& manifest_path) {
  const auto dir = manifest_path.has_parent_path() ? manifest_path.parent_path() : std::filesystem::path(".");
  std::filesystem::create_directories(dir);
  write_text_atomically(manifest_path, build_review_manifest(records, images, dir).dump(2) + "\n");
}

struct ImportResult {
  std::vector<EvaluationRecord> records;
  std::vector<std::string> changed;  // record ids whose verdict moved
};

// Applies manifest verdicts to `records`. Everything is validated before any
// record changes; on error the input is untouched.
inline ImportResult import_verdicts(const nlohmann::json& manifest, const std::vector<EvaluationRecord>& records,
                                    bool allow_override = false, const std::string& at = now_utc()) {
  if (!manifest.is_object()) throw ValidationError("manifest", "expected a JSON object");
  if (!manifest.contains("manifest_version") || manifest["manifest_version"] != kManifestVersion) {
    throw ValidationError("manifest_version", "expected " + std::to_string(kManifestVersion));
  }
  if (!manifest.contains("entries") || !manifest["entries"].is_array()) {
    throw ValidationError("entries", "expected an array");
  }
  ImportResult out{records, {}};
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < out.records.size(); ++i) index[out.records[i].record_id] = i;

  const auto& entries = manifest["entries"];
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string where = "entries[" + std::to_string(i) + "]";
    const auto& e = entries[i];
    if (!e.is_object() || !e.contains("record_id") || !e["record_id"].is_string()) {
      throw ValidationError(where + ".record_id", "missing");
    }
    const auto id = e["record_id"].get<std::string>();
    const auto it = index.find(id);
    if (it == index.end()) throw ValidationError(where + ".record_id", "unknown record id '" + id + "'");
    if (!e.contains("verdict") || !e["verdict"].is_string()) throw ValidationError(where + ".verdict", "missing");
    const auto text = e["verdict"].get<std::string>();
    const auto verdict = verdict_from_string(text);
    if (!verdict) {
      throw ValidationError(where + ".verdict", "'" + text + "' is not one of success, failure, rejected");
    }
    auto& r = out.records[it->second];
    if (*verdict == r.verdict) continue;
    const std::string adjudicator = e.value("adjudicator", "");
    apply_verdict(r, *verdict, adjudicator, allow_override, at, where);
    out.changed.push_back(id);
  }
  return out;
}

// Imports a manifest file into a record store. The store is rewritten only if
// some verdict changed.
inline ImportResult import_verdicts_into_store(const std::filesystem::path& manifest_path, const RecordStore& store,
                                               bool allow_override = false) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest", std::string("malformed JSON: ") + e.what());
  }
  auto result = import_verdicts(manifest, store.load(), allow_override);
  if (!result.changed.empty()) store.rewrite(result.records);
  return result;
}

}  // namespace mmattack::harness
