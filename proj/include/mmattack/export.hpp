#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>

#include "json.hpp"

#include "mmattack/attack_engine.hpp"
#include "mmattack/errors.hpp"
#include "mmattack/png_io.hpp"

namespace mmattack {

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

// Writes through a sibling temporary file and renames it into place, so readers
// never observe a partial file.
inline void write_atomically(const std::filesystem::path& path,
                             const std::function<void(const std::filesystem::path&)>& writer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  try {
    writer(tmp);
    std::filesystem::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw;
  }
}

inline void write_text_atomically(const std::filesystem::path& path, const std::string& text) {
  write_atomically(path, [&](const std::filesystem::path& tmp) {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out << text;
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  });
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Hash of everything that determines an attack run besides the image itself.
inline std::string attack_config_hash(const AttackResult& r) {
  const nlohmann::json doc{{"budget", r.budget.to_json()}, {"optimizer", r.config.to_json()}, {"objective", r.objective}};
  return fnv1a_hex(doc.dump());
}

inline nlohmann::json sidecar_json(const AttackResult& r) {
  return {{"id", r.adversarial.id()},
          {"epsilon_numerator", r.budget.epsilon_numerator()},
          {"iterations", r.budget.iterations},
          {"config_hash", attack_config_hash(r)},
          {"loss_trace", r.loss_trace},
          {"per_surrogate_final", r.per_surrogate_final},
          {"quantized_ok", r.quantized_ok},
          {"budget", r.budget.to_json()},
          {"optimizer", r.config.to_json()},
          {"objective", r.objective}};
}

struct ExportPaths {
  std::filesystem::path image;
  std::filesystem::path sidecar;
};

// Exports a quantized result as <dir>/<id>.png plus <dir>/<id>.json. Refuses
// results that have not passed quantize_and_verify.
inline ExportPaths export_attack_result(const AttackResult& r, const std::filesystem::path& dir) {
  if (!r.quantized_ok) throw InvalidArgument("result '" + r.adversarial.id() + "' is not quantized and verified");
  const ExportPaths paths{dir / (r.adversarial.id() + ".png"), dir / (r.adversarial.id() + ".json")};
  write_atomically(paths.image, [&](const std::filesystem::path& tmp) { write_png(tmp, r.adversarial); });
  write_text_atomically(paths.sidecar, sidecar_json(r).dump(2) + "\n");
  return paths;
}

}  // namespace mmattack
