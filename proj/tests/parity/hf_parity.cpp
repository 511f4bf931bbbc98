// Compares the model against logits from the Hugging Face GPT-2 implementation
// for the same weights. Usage: midinf_hf_parity WEIGHTS.wtm REFERENCE.json

#include <cmath>
#include <cstdio>
#include <fstream>

#include "midinf/model.hpp"

using namespace midinf;

int main(int argc, char** argv) {
  if (argc != 3) {
    std::fprintf(stderr, "usage: %s WEIGHTS.wtm REFERENCE.json\n", argv[0]);
    return 2;
  }
  const auto ref = nlohmann::json::parse(std::ifstream(argv[2]));
  const ModelConfig config = load_manifest_config(argv[1]).value();
  const Model model(config, std::make_shared<WeightStore>(load_weights(argv[1])));
  const auto tokens = ref.at("tokens").get<std::vector<TokenId>>();
  const auto expected = ref.at("logits").get<std::vector<std::vector<float>>>();

  const LogitMatrix full = model.forward_full(tokens);
  KVCache cache(config);
  double worst_full = 0, worst_cached = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto step = model.forward_step(tokens[t], cache);
    for (int v = 0; v < config.vocab_size; ++v) {
      worst_full = std::max(worst_full, double(std::abs(full.row(static_cast<int>(t))[v] - expected[t][v])));
      worst_cached = std::max(worst_cached, double(std::abs(step[v] - expected[t][v])));
    }
  }
  std::printf("max |diff| vs reference: batched %.3g, cached %.3g\n", worst_full, worst_cached);
  return worst_full < 1e-4 && worst_cached < 1e-4 ? 0 : 1;
}
