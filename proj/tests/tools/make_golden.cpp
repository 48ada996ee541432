// Regenerates tests/data/golden_embeddings.json. Run only when a built-in
// encoder is deliberately changed; the surrogate tests compare against it.
#include <fstream>
#include <iostream>

#include "mmattack/registry.hpp"
#include "mmattack/toy_data.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_golden <output.json>\n";
    return 2;
  }
  using namespace mmattack;
  const SurrogateRegistry reg;
  const auto image = make_toy_image(42, {24, 24}, false, "golden");
  nlohmann::json doc{{"image_seed", 42}, {"image_shape", {24, 24}}, {"embeddings", nlohmann::json::object()}};
  for (const char* id : {"toy-encoder-a", "toy-encoder-b", "toy-encoder-c", "toy-linear-encoder"}) {
    doc["embeddings"][id] = encode(*reg.load(id), image.pixels()).values;
  }
  std::ofstream(argv[1]) << doc.dump(1) << "\n";
}
