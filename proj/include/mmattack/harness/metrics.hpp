#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "mmattack/harness/records.hpp"

namespace mmattack::harness {

// Exact count ratio. Rates are never stored as floating point.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Rational of(std::int64_t n, std::int64_t d) {
    if (d <= 0) throw InvalidArgument("rational denominator must be positive");
    const auto g = std::gcd(n, d);
    return {n / (g ? g : 1), d / (g ? g : 1)};
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  // "22%" when the percentage is whole, otherwise two decimals ("33.33%").
  std::string percent() const {
    if ((100 * num) % den == 0) return std::to_string(100 * num / den) + "%";
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * value() << "%";
    return s.str();
  }

  friend bool operator==(const Rational& a, const Rational& b) { return a.num * b.den == b.num * a.den; }
};

struct RateCounts {
  std::int64_t n = 0;
  std::int64_t success = 0;
  std::int64_t rejected = 0;

  Rational success_rate() const { return Rational::of(success, n); }
  Rational rejection_rate() const { return Rational::of(rejected, n); }
};

struct MetricsRow {
  std::string target_id;
  std::string condition;
  RateCounts counts;
};

struct AblationRow {
  std::string target_id;
  std::vector<std::string> surrogate_subset;
  RateCounts counts;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;          // sorted by (target_id, condition)
  std::vector<AblationRow> ablation;     // adversarial records only

  bool empty() const noexcept { return rows.empty(); }
};

inline std::string condition_label(const EvaluationRecord& r) {
  if (!r.condition.empty()) return r.condition;
  return r.variant == Variant::natural ? "no_attack" : "attack";
}

inline std::string subset_key(const std::vector<std::string>& ids) {
  std::string key;
  for (const auto& id : ids) key += (key.empty() ? "" : "+") + id;
  return key;
}

// Pure function of the records. Pending verdicts are an error: every counted
// record needs a human (or service) decision.
inline MetricsReport compute_metrics(const std::vector<EvaluationRecord>& records) {
  std::vector<std::string> pending;
  for (const auto& r : records)
    if (r.verdict == Verdict::pending) pending.push_back(r.record_id);
  if (!pending.empty()) throw PendingVerdictsError(std::move(pending));

  std::map<std::pair<std::string, std::string>, RateCounts> by_condition;
  std::map<std::pair<std::string, std::vector<std::string>>, RateCounts> by_subset;
  auto count = [](RateCounts& c, const EvaluationRecord& r) {
    ++c.n;
    c.success += r.verdict == Verdict::success;
    c.rejected += r.verdict == Verdict::rejected;
  };
  for (const auto& r : records) {
    count(by_condition[{r.target_id, condition_label(r)}], r);
    if (r.variant == Variant::adversarial && !r.surrogate_subset.empty()) {
      auto subset = r.surrogate_subset;
      std::sort(subset.begin(), subset.end());
      count(by_subset[{r.target_id, subset}], r);
    }
  }
  MetricsReport report;
  for (const auto& [key, c] : by_condition) report.rows.push_back({key.first, key.second, c});
  for (const auto& [key, c] : by_subset) report.ablation.push_back({key.first, key.second, c});
  return report;
}

inline nlohmann::json rate_json(const Rational& r) {
  return {{"numerator", r.num}, {"denominator", r.den}, {"percent", r.percent()}};
}

inline nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json rows = nlohmann::json::array(), ablation = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"target_id", r.target_id},
                    {"condition", r.condition},
                    {"n", r.counts.n},
                    {"success", r.counts.success},
                    {"rejected", r.counts.rejected},
                    {"success_rate", rate_json(r.counts.success_rate())},
                    {"rejection_rate", rate_json(r.counts.rejection_rate())}});
  }
  for (const auto& a : report.ablation) {
    ablation.push_back({{"target_id", a.target_id},
                        {"surrogate_subset", a.surrogate_subset},
                        {"n", a.counts.n},
                        {"success", a.counts.success},
                        {"success_rate", rate_json(a.counts.success_rate())}});
  }
  return {{"rows", rows}, {"ablation", ablation}};
}

// Plain-text table, one row per (target, condition):
//   target | condition | n | Attack Success Rate | Rejection Rate
inline std::string render_table(const MetricsReport& report) {
  std::vector<std::vector<std::string>> cells{{"Target", "Condition", "n", "Attack Success Rate", "Rejection Rate"}};
  for (const auto& r : report.rows) {
    cells.push_back({r.target_id, r.condition, std::to_string(r.counts.n), r.counts.success_rate().percent(),
                     r.counts.rejection_rate().percent()});
  }
  std::vector<std::size_t> width(5, 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream out;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << " | ";
      // rate columns stay unpadded so a row reads "22% | 5%"
      out << std::left << std::setw(static_cast<int>(i < 3 ? width[i] : 0)) << row[i];
    }
    out << '\n';
  }
  if (!report.ablation.empty()) {
    out << "\nSurrogate ablation\n";
    for (const auto& a : report.ablation) {
      out << a.target_id << " | " << subset_key(a.surrogate_subset) << " | " << a.counts.n << " | "
          << a.counts.success_rate().percent() << '\n';
    }
  }
  return out.str();
}

}  // namespace mmattack::harness
