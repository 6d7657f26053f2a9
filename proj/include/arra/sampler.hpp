#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "arra/armodel.hpp"
#include "arra/tensor.hpp"
#include "arra/tokenizers.hpp"

// Generation never sees the foundation encoders or the projection head: this
// header pulls in only the AR model and the tokenizers, so the alignment
// machinery is unreachable from the sampling call graph.

namespace arra::samp {

struct SampleConfig {
  double temperature = 1.0;
  int top_k = 32;
  double cfg_scale = 2.0;
  uint64_t seed = 0;
  bool greedy = false;  // argmax decode; drawn from no RNG stream

  void validate(int image_vocab) const;  // temperature > 0, 1 <= top_k <= image_vocab, cfg_scale >= 0
  nlohmann::json to_json() const;
  static SampleConfig from_json(const nlohmann::json& j);
};

// uncond + scale * (cond - uncond). scale 1 returns cond verbatim and scale 0
// returns uncond verbatim, so the guided row is bit-identical to the single
// branch at those scales.
std::vector<double> cfg_logits(const std::vector<double>& cond, const std::vector<double>& uncond, double scale);

// Exactly grid_len image tokens (combined-vocab ids) for a <BOS>-prefixed text
// prompt. Sampling considers only the image-id range; with cfg_scale != 1 a
// paired <UNCOND> prompt of the same width decodes in lockstep, seeing every
// sampled token the conditional branch sees (the conditional branch is skipped
// entirely at cfg_scale 0, the unconditional one at 1). mechanism rep feeds
// the <REP> token after <BOI>, mirroring the training layout.
std::vector<int> sample_tokens(const ar::ArModel& model, const std::vector<int>& prompt_ids,
                               const tok::CombinedVocab& vocab, int grid_len, const SampleConfig& config,
                               ar::Mechanism mechanism = ar::Mechanism::none);

// encode_text -> sample_tokens -> derasterize -> VQ decode; canvas x canvas x 3
// in [0, 1]. tokens_out, when given, receives the sampled combined ids.
num::Tensor generate_image(const ar::ArModel& model, const tok::VqTokenizer& vq, const std::string& caption,
                           const SampleConfig& config, ar::Mechanism mechanism = ar::Mechanism::none,
                           std::vector<int>* tokens_out = nullptr);

}  // namespace arra::samp
