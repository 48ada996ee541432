#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mmattack/errors.hpp"
#include "mmattack/png_io.hpp"

namespace mmattack::harness {

// On-disk layout of a dataset named <name> under <root>:
//
//   <root>/<name>/index.txt        one image id per line
//   <root>/<name>/images/<id>.png  8-bit RGB
inline constexpr const char* kDatasetLayout = "<root>/<name>/index.txt and <root>/<name>/images/<id>.png";

struct DatasetIndex {
  std::filesystem::path dir;
  std::vector<std::string> ids;

  std::filesystem::path image_path(const std::string& id) const { return dir / "images" / (id + ".png"); }

  // Seeded sample without replacement, in index order.
  std::vector<std::string> sample(std::size_t n, std::uint64_t seed) const {
    if (n > ids.size()) {
      throw IngestionError("requested " + std::to_string(n) + " images but dataset '" + dir.string() + "' has " +
                           std::to_string(ids.size()));
    }
    std::vector<std::string> out;
    out.reserve(n);
    std::mt19937_64 rng(seed);
    std::sample(ids.begin(), ids.end(), std::back_inserter(out), n, rng);
    return out;
  }
};

inline DatasetIndex read_dataset_index(const std::filesystem::path& root, const std::string& name) {
  DatasetIndex idx{root / name, {}};
  const auto index_file = idx.dir / "index.txt";
  std::ifstream in(index_file);
  if (!in) {
    throw IngestionError("dataset '" + name + "' not found: expected " + index_file.string() + " (layout " +
                         kDatasetLayout + ")");
  }
  std::set<std::string> seen;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    if (!seen.insert(line).second) throw IngestionError("dataset '" + name + "' lists id '" + line + "' twice");
    idx.ids.push_back(line);
  }
  return idx;
}

// Loads a seeded sample of n images. Image ids are the index ids.
inline std::vector<Image> load_dataset(const std::filesystem::path& root, const std::string& name, std::size_t n,
                                       std::uint64_t seed) {
  if (n == 0) return {};
  const auto idx = read_dataset_index(root, name);
  std::vector<Image> out;
  for (const auto& id : idx.sample(n, seed)) {
    const auto path = idx.image_path(id);
    if (!std::filesystem::exists(path)) {
      throw IngestionError("dataset '" + name + "' is missing " + path.string() + " (layout " + kDatasetLayout + ")");
    }
    out.push_back(read_png(path, id));
  }
  return out;
}

}  // namespace mmattack::harness
