#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "arra/optim.hpp"
#include "arra/rng.hpp"
#include "arra/tensor.hpp"

namespace arra::tok {

// Special tokens hold the low ids; grammar words follow densely.
enum Special : int { kPad = 0, kBos = 1, kBoi = 2, kEoi = 3, kUncond = 4, kRep = 5 };
inline constexpr int kNumSpecials = 6;

class TextVocab {
 public:
  static TextVocab build();  // over the caption grammar

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int id(const std::string& token) const;          // ParseError on unknown words
  const std::string& token(int id) const;

  // [<BOS>, word ids...]; ParseError for out-of-vocabulary words (position =
  // byte offset of the word), ConfigError when the caption exceeds max_len
  std::vector<int> encode_text(const std::string& caption, int max_len = 16) const;
  std::string decode_text(const std::vector<int>& ids) const;  // drops specials

  nlohmann::json to_json() const;  // {token: id}
  static TextVocab from_json(const nlohmann::json& j);

 private:
  std::map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Text ids occupy [0, text_size); image tokens follow as text_size + code.
struct CombinedVocab {
  int text_size = 0;
  int codebook_size = 0;
  int total() const { return text_size + codebook_size; }
  bool is_image(int id) const { return id >= text_size && id < total(); }
  int to_image_id(int code) const;  // ShapeError outside [0, codebook_size)
  int to_code(int id) const;        // ShapeError unless is_image(id)
};

std::vector<int> rasterize(const std::vector<int>& codes, const CombinedVocab& vocab);
std::vector<int> derasterize(const std::vector<int>& ids, const CombinedVocab& vocab, int h, int w);

struct VqConfig {
  int canvas = 32;
  int compression = 8;  // pixels per code along each axis
  int codebook_size = 64;
  int code_dim = 16;
  int hidden = 64;
  num::Dtype dtype = num::Dtype::f32;
  int grid_side() const { return canvas / compression; }
  void validate() const;
  nlohmann::json to_json() const;
  static VqConfig from_json(const nlohmann::json& j);
};

// Patch-MLP autoencoder around a vector-quantization bottleneck. Features and
// codes are laid out raster row-major over the (H/c)x(W/c) grid.
class VqTokenizer {
 public:
  VqTokenizer(VqConfig config, num::Rng& rng);

  const VqConfig& config() const { return config_; }
  num::Params& params() { return params_; }
  const num::Params& params() const { return params_; }
  const num::Tensor& codebook() const { return params_.at("codebook"); }

  // image (side x side x 3, side divisible by compression) -> (h*w) x d
  num::Tensor encode(const num::Tensor& image) const;
  // nearest codebook indices plus their vectors; ties take the lowest index
  std::pair<std::vector<int>, num::Tensor> quantize(const num::Tensor& features) const;
  // codes -> decoded image, clamped to [0,1]; ShapeError on ids outside [0,K)
  num::Tensor decode_codes(const std::vector<int>& codes, int canvas = 0) const;

  std::vector<int> encode_to_codes(const num::Tensor& image) const;

  void save(const std::filesystem::path& path) const;
  static VqTokenizer load(const std::filesystem::path& path);

 private:
  friend class VqTrainer;
  explicit VqTokenizer(VqConfig config) : config_(config) {}
  num::Tensor encoder_forward(const num::Tensor& patches, const num::Params& p) const;
  num::Tensor decoder_forward(const num::Tensor& zq, const num::Params& p) const;

  VqConfig config_;
  num::Params params_;
  std::vector<int64_t> usage_;  // per-code lifetime usage counts
};

struct VqStepLosses {
  double recon = 0.0;
  double codebook = 0.0;
  double commit = 0.0;
  double total = 0.0;
};

class VqTrainer {
 public:
  VqTrainer(VqTokenizer& tokenizer, num::AdamWConfig opt, uint64_t seed, double commit_beta = 0.25,
            int64_t reseed_interval = 200);
  VqStepLosses step(const std::vector<num::Tensor>& images);
  int64_t steps_taken() const { return opt_.steps_taken(); }

 private:
  VqTokenizer& tok_;
  num::AdamW opt_;
  num::Rng rng_;
  double commit_beta_;
  int64_t reseed_interval_;
  std::vector<int64_t> window_usage_;
};

}  // namespace arra::tok
