#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "arra/corpus.hpp"
#include "arra/optim.hpp"
#include "arra/rng.hpp"
#include "arra/tensor.hpp"
#include "arra/tokenizers.hpp"

namespace arra::found {

enum class EncoderKind { cross_modal, vision_only };
enum class AggMode { cls, avgpool, concat };

std::string to_string(EncoderKind k);
std::string to_string(AggMode m);
EncoderKind encoder_kind_from_string(const std::string& s);
AggMode agg_mode_from_string(const std::string& s);

struct FoundationConfig {
  EncoderKind kind = EncoderKind::cross_modal;
  int canvas = 32;
  int patch = 8;
  int dim = 32;  // D, width of both towers
  int heads = 4;
  int layers = 2;
  int mlp_mult = 2;
  int max_text = 16;        // text tower budget (cross-modal)
  double mask_ratio = 0.5;  // patch corruption rate (vision-only training)
  num::Dtype dtype = num::Dtype::f32;
  int patch_rows() const { return (canvas / patch) * (canvas / patch); }
  void validate() const;
  nlohmann::json to_json() const;
  static FoundationConfig from_json(const nlohmann::json& j);
};

// The external-encoder stand-in: a small bidirectional transformer over 8px
// patches. The cross-modal variant adds a learned CLS row and a text tower
// and trains contrastively; the vision-only variant trains by masked-patch
// reconstruction. After pretraining the encoder is used frozen.
class FoundationEncoder {
 public:
  FoundationEncoder(FoundationConfig config, num::Rng& rng);

  const FoundationConfig& config() const { return config_; }
  num::Params& params() { return params_; }
  const num::Params& params() const { return params_; }

  // frozen paths (no graph retained)
  num::Tensor encode_image_patches(const num::Tensor& image) const;     // N x D
  num::Tensor encode_text_global(const std::string& caption) const;     // 1 x D, unit norm
  num::Tensor encode_text_global(const std::vector<int>& text_ids) const;

  // differentiable towers over explicit parameters (used in pretraining)
  num::Tensor image_tower(const num::Tensor& image, const num::Params& p) const;
  num::Tensor text_tower(const std::vector<int>& text_ids, const num::Params& p) const;

  // full pretraining loss graphs, exposed for gradient checking
  num::Tensor contrastive_loss(const std::vector<corpus::Sample>& batch, const num::Params& p) const;
  num::Tensor recon_loss(const std::vector<num::Tensor>& corrupted, const std::vector<num::Tensor>& clean,
                         const num::Params& p) const;

  void save(const std::filesystem::path& path) const;
  static FoundationEncoder load(const std::filesystem::path& path);

 private:
  explicit FoundationEncoder(FoundationConfig config) : config_(config) {}
  FoundationConfig config_;
  num::Params params_;
  tok::TextVocab vocab_ = tok::TextVocab::build();
};

// cls: row 0 / avgpool: mean over patch rows / concat: [cls ‖ avgpool].
// Result is L2-normalized; a norm below 1e-8 raises rather than dividing.
num::Tensor aggregate(const num::Tensor& patch_features, AggMode mode, EncoderKind kind);

// Symmetric InfoNCE over row-aligned B x D embedding matrices. temp is a
// 1-element logit scale; pair i is the positive for row/column i.
num::Tensor info_nce(const num::Tensor& img_emb, const num::Tensor& txt_emb, const num::Tensor& temp);

class FoundationTrainer {
 public:
  FoundationTrainer(FoundationEncoder& encoder, num::AdamWConfig opt, uint64_t seed);

  // symmetric InfoNCE between CLS-image and mean-text embeddings; requires a
  // batch of at least 2
  double contrastive_step(const std::vector<corpus::Sample>& batch);
  // masked-patch reconstruction; loss over every patch of every image
  double recon_step(const std::vector<num::Tensor>& images);

  int64_t steps_taken() const { return opt_.steps_taken(); }

 private:
  FoundationEncoder& enc_;
  num::AdamW opt_;
  num::Rng rng_;
};

}  // namespace arra::found
