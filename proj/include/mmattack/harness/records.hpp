#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmattack/errors.hpp"
#include "mmattack/export.hpp"

namespace mmattack::harness {

inline constexpr int kRecordSchemaVersion = 1;

enum class Variant { natural, adversarial };
enum class Verdict { pending, success, failure, rejected };

inline const char* to_string(Variant v) { return v == Variant::natural ? "natural" : "adversarial"; }

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::pending: return "pending";
    case Verdict::success: return "success";
    case Verdict::failure: return "failure";
    case Verdict::rejected: return "rejected";
  }
  return "pending";
}

inline std::optional<Variant> variant_from_string(const std::string& s) {
  if (s == "natural") return Variant::natural;
  if (s == "adversarial") return Variant::adversarial;
  return std::nullopt;
}

inline std::optional<Verdict> verdict_from_string(const std::string& s) {
  if (s == "pending") return Verdict::pending;
  if (s == "success") return Verdict::success;
  if (s == "failure") return Verdict::failure;
  if (s == "rejected") return Verdict::rejected;
  return std::nullopt;
}

inline bool is_terminal(Verdict v) { return v != Verdict::pending; }

// UTC, second resolution, e.g. 2023-09-12T08:30:00Z.
inline std::string iso8601_utc(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string now_utc() { return iso8601_utc(std::chrono::system_clock::now()); }

struct Provenance {
  std::string config_hash;
  int retries = 0;
  std::string model_update;  // the target's advertised model/update date, if known
  std::string harness_version = "1";

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct VerdictChange {
  Verdict from = Verdict::pending;
  Verdict to = Verdict::pending;
  std::string adjudicator;
  std::string at;
  bool override_terminal = false;

  friend bool operator==(const VerdictChange&, const VerdictChange&) = default;
};

struct EvaluationRecord {
  std::string record_id;
  std::string image_id;
  Variant variant = Variant::adversarial;
  std::string target_id;
  std::string prompt;
  std::string response_text;
  bool auto_rejected = false;
  Verdict verdict = Verdict::pending;
  std::string adjudicator;
  std::string timestamp;
  // Attack condition label, e.g. "no_attack", "image_embedding", "eps32".
  std::string condition;
  // Surrogate ids the adversarial image was crafted on; empty for natural.
  std::vector<std::string> surrogate_subset;
  Provenance provenance;
  std::vector<VerdictChange> history;

  friend bool operator==(const EvaluationRecord&, const EvaluationRecord&) = default;
};

// Checks the record-level invariants.
inline void validate(const EvaluationRecord& r, const std::string& where = "record") {
  if (r.record_id.empty()) throw ValidationError(where + ".record_id", "must not be empty");
  if (r.verdict == Verdict::success && r.variant != Variant::adversarial) {
    throw ValidationError(where + ".verdict", "a natural image cannot be an attack success");
  }
  if (r.auto_rejected && (r.verdict == Verdict::success || r.verdict == Verdict::failure)) {
    const bool overridden = std::any_of(r.history.begin(), r.history.end(),
                                        [](const VerdictChange& c) { return c.override_terminal; });
    if (!overridden) {
      throw ValidationError(where + ".verdict",
                            "auto-rejected record needs an explicit override to become " + std::string(to_string(r.verdict)));
    }
  }
}

// Moves a record's verdict. pending -> terminal is always allowed; changing a
// terminal verdict (or a verdict proposed by the rejection heuristic) needs
// `allow_override`. Every change is appended to the record's history.
inline void apply_verdict(EvaluationRecord& r, Verdict to, const std::string& adjudicator, bool allow_override,
                          const std::string& at = now_utc(), const std::string& where = "record") {
  if (to == r.verdict) return;
  if (to == Verdict::pending) throw ValidationError(where + ".verdict", "a verdict cannot return to pending");
  if (adjudicator.empty()) throw ValidationError(where + ".adjudicator", "a verdict change must name its adjudicator");
  if (to == Verdict::success && r.variant != Variant::adversarial) {
    throw ValidationError(where + ".verdict", "a natural image cannot be an attack success");
  }
  const bool terminal = is_terminal(r.verdict);
  const bool against_heuristic = r.auto_rejected && to != Verdict::rejected;
  if ((terminal || against_heuristic) && !allow_override) {
    throw ValidationError(where + ".verdict", "record '" + r.record_id + "' is " + to_string(r.verdict) +
                                                  (r.auto_rejected ? " (auto-rejected)" : "") +
                                                  "; changing it requires the override flag");
  }
  r.history.push_back({r.verdict, to, adjudicator, at, terminal || against_heuristic});
  r.verdict = to;
  r.adjudicator = adjudicator;
}

inline nlohmann::json to_json(const EvaluationRecord& r) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& c : r.history) {
    history.push_back({{"from", to_string(c.from)},
                       {"to", to_string(c.to)},
                       {"adjudicator", c.adjudicator},
                       {"at", c.at},
                       {"override", c.override_terminal}});
  }
  return {{"schema_version", kRecordSchemaVersion},
          {"record_id", r.record_id},
          {"image_id", r.image_id},
          {"variant", to_string(r.variant)},
          {"target_id", r.target_id},
          {"prompt", r.prompt},
          {"response_text", r.response_text},
          {"auto_rejected", r.auto_rejected},
          {"verdict", to_string(r.verdict)},
          {"adjudicator", r.adjudicator},
          {"timestamp", r.timestamp},
          {"condition", r.condition},
          {"surrogate_subset", r.surrogate_subset},
          {"provenance",
           {{"config_hash", r.provenance.config_hash},
            {"retries", r.provenance.retries},
            {"model_update", r.provenance.model_update},
            {"harness_version", r.provenance.harness_version}}},
          {"history", history}};
}

inline EvaluationRecord record_from_json(const nlohmann::json& j, const std::string& where = "record") {
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kRecordSchemaVersion) {
      throw ValidationError(where + ".schema_version", "unsupported version " + std::to_string(version));
    }
    EvaluationRecord r;
    r.record_id = j.at("record_id").get<std::string>();
    r.image_id = j.at("image_id").get<std::string>();
    const auto variant = variant_from_string(j.at("variant").get<std::string>());
    if (!variant) throw ValidationError(where + ".variant", "expected natural or adversarial");
    r.variant = *variant;
    r.target_id = j.at("target_id").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.response_text = j.at("response_text").get<std::string>();
    r.auto_rejected = j.at("auto_rejected").get<bool>();
    const auto verdict = verdict_from_string(j.at("verdict").get<std::string>());
    if (!verdict) throw ValidationError(where + ".verdict", "unknown verdict '" + j.at("verdict").get<std::string>() + "'");
    r.verdict = *verdict;
    r.adjudicator = j.value("adjudicator", "");
    r.timestamp = j.value("timestamp", "");
    r.condition = j.value("condition", "");
    r.surrogate_subset = j.value("surrogate_subset", std::vector<std::string>{});
    if (j.contains("provenance")) {
      const auto& p = j.at("provenance");
      r.provenance.config_hash = p.value("config_hash", "");
      r.provenance.retries = p.value("retries", 0);
      r.provenance.model_update = p.value("model_update", "");
      r.provenance.harness_version = p.value("harness_version", "1");
    }
    for (const auto& c : j.value("history", nlohmann::json::array())) {
      VerdictChange ch;
      ch.from = verdict_from_string(c.at("from").get<std::string>()).value_or(Verdict::pending);
      ch.to = verdict_from_string(c.at("to").get<std::string>()).value_or(Verdict::pending);
      ch.adjudicator = c.at("adjudicator").get<std::string>();
      ch.at = c.at("at").get<std::string>();
      ch.override_terminal = c.at("override").get<bool>();
      r.history.push_back(std::move(ch));
    }
    validate(r, where);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where, e.what());
  }
}

// Stable id from the fields that identify a query.
inline std::string make_record_id(const std::string& image_id, Variant variant, const std::string& target_id,
                                  const std::string& prompt, const std::string& condition) {
  const nlohmann::json key{image_id, to_string(variant), target_id, prompt, condition};
  return target_id + "-" + image_id + "-" + to_string(variant) + "-" + fnv1a_hex(key.dump()).substr(0, 8);
}

// JSON-lines record store. Evaluation runs only append; importing verdicts
// rewrites the whole file through a temporary file and a rename.
class RecordStore {
 public:
  explicit RecordStore(std::filesystem::path path) : path_(std::move(path)) {}

  const std::filesystem::path& path() const noexcept { return path_; }

  std::vector<EvaluationRecord> load() const {
    std::vector<EvaluationRecord> out;
    if (!std::filesystem::exists(path_)) return out;
    std::ifstream in(path_);
    if (!in) throw IoError("cannot read record store '" + path_.string() + "'");
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string where = path_.filename().string() + ":" + std::to_string(n);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError(where, std::string("malformed JSON: ") + e.what());
      }
      out.push_back(record_from_json(j, where));
    }
    return out;
  }

  void append(const EvaluationRecord& r) const {
    validate(r);
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    if (!out) throw IoError("cannot append to record store '" + path_.string() + "'");
    out << to_json(r).dump() << '\n';
    out.flush();
    if (!out) throw IoError("append to '" + path_.string() + "' failed");
  }

  void rewrite(const std::vector<EvaluationRecord>& records) const {
    std::string text;
    for (const auto& r : records) {
      validate(r);
      text += to_json(r).dump();
      text += '\n';
    }
    write_text_atomically(path_, text);
  }

 private:
  std::filesystem::path path_;
};

}  // namespace mmattack::harness
