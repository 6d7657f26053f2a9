#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "arra/rng.hpp"
#include "arra/tensor.hpp"
#include "arra/tokenizers.hpp"

namespace arra::ar {

enum class Role : uint8_t { text, boi, image, rep, pad };

// Alignment mechanism; build_sequence only cares whether <REP> is inserted,
// the rest of the distinction lives in the alignment module.
enum class Mechanism { none, rep, hybnext };

std::string to_string(Mechanism m);
Mechanism mechanism_from_string(const std::string& s);

struct TokenSequence {
  std::vector<int> ids;    // combined vocab
  std::vector<Role> roles;  // parallel to ids
  int64_t size() const { return static_cast<int64_t>(ids.size()); }
  void validate() const;  // role alignment, image contiguity, <REP> placement
};

// Layout [<BOS>, text..., <BOI>, (<REP> when mechanism=rep), image..., <EOI>].
// text_ids must start with <BOS> (the text tokenizer emits it); <PAD> ids in
// the text span keep the pad role. image_ids are combined-vocab ids and must
// number grid_len exactly.
TokenSequence build_sequence(const std::vector<int>& text_ids, const std::vector<int>& image_ids, Mechanism mechanism,
                             const tok::CombinedVocab& vocab, int grid_len);

// Caption-only sequence for language-model pretraining.
TokenSequence text_sequence(const std::vector<int>& text_ids);

// Condition-dropout text span: [<BOS>, <UNCOND>, <PAD>...] padded to `width`
// so conditional and unconditional sequences keep identical positions.
std::vector<int> uncond_text(int width);

// Per-position loss weights: weight[t] gates the prediction of ids[t+1].
// Image-token targets and <EOI> count; the conditioning prefix does not
// unless loss_on_text adds the text-role targets (pads never count).
std::vector<double> loss_mask(const TokenSequence& seq, bool loss_on_text = false);

struct ArConfig {
  int layers = 4;
  int h_model = 128;
  int heads = 4;
  int mlp_mult = 2;
  int vocab = 89;  // 25 text + 64 image codes
  int max_len = 64;
  num::Dtype dtype = num::Dtype::f32;
  std::string mode_tag = "t2i";  // or "text_only" after caption-only pretraining
  void validate() const;
  nlohmann::json to_json() const;
  static ArConfig from_json(const nlohmann::json& j);
};

struct ForwardOutput {
  num::Tensor logits;               // n x |V|
  std::vector<num::Tensor> hidden;  // L+1 entries; [0] embeddings, [i] block i output
};

// Incremental decoding state: per-layer key/value rows plus a detached weight
// snapshot so decoding never touches autodiff graphs.
struct KvCache {
  num::Params frozen;
  std::vector<num::Tensor> k, v;  // per layer, len x h_model
  int64_t len = 0;
};

class ArModel {
 public:
  ArModel(ArConfig config, num::Rng& rng);

  const ArConfig& config() const { return cfg_; }
  num::Params& params() { return params_; }
  const num::Params& params() const { return params_; }

  ForwardOutput forward(const TokenSequence& seq, const num::Params& p) const;
  ForwardOutput forward(const TokenSequence& seq) const;  // frozen weights, no graph

  KvCache make_cache() const;
  // One token in, next-token logits (1 x |V|) out; appends to the cache.
  // Produces the same values as the matching row of a full forward.
  num::Tensor decode_step(int id, KvCache& cache) const;

  void save(const std::filesystem::path& path) const;
  static ArModel load(const std::filesystem::path& path);

 private:
  explicit ArModel(ArConfig config) : cfg_(std::move(config)) {}
  ArConfig cfg_;
  num::Params params_;
};

num::Tensor causal_mask(int64_t n, num::Dtype dtype);

// Mean cross-entropy of next-token prediction over the positions loss_mask
// selects.
num::Tensor ar_loss(const num::Tensor& logits, const TokenSequence& seq, bool loss_on_text = false);

// Mean of squared logsumexp over positions with nonzero weight.
num::Tensor z_loss(const num::Tensor& logits, const std::vector<double>& weights);

}  // namespace arra::ar
