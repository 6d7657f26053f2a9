#include "arra/foundation.hpp"

#include <algorithm>
#include <cmath>

#include "arra/container.hpp"
#include "arra/error.hpp"
#include "arra/transformer.hpp"

namespace arra::found {

using num::Tensor;

std::string to_string(EncoderKind k) { return k == EncoderKind::cross_modal ? "cross_modal" : "vision_only"; }

std::string to_string(AggMode m) {
  switch (m) {
    case AggMode::cls: return "cls";
    case AggMode::avgpool: return "avgpool";
    case AggMode::concat: return "concat";
  }
  return "cls";
}

EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "cross_modal") return EncoderKind::cross_modal;
  if (s == "vision_only") return EncoderKind::vision_only;
  throw ConfigError("unknown encoder kind '" + s + "'");
}

AggMode agg_mode_from_string(const std::string& s) {
  if (s == "cls") return AggMode::cls;
  if (s == "avgpool") return AggMode::avgpool;
  if (s == "concat") return AggMode::concat;
  throw ConfigError("unknown aggregation mode '" + s + "'");
}

void FoundationConfig::validate() const {
  if (canvas <= 0 || patch <= 0 || canvas % patch != 0)
    throw ConfigError("canvas " + std::to_string(canvas) + " not divisible by patch " + std::to_string(patch));
  if (dim <= 0 || heads <= 0 || dim % heads != 0) throw ConfigError("dim must be a positive multiple of heads");
  if (layers <= 0 || mlp_mult <= 0 || max_text <= 1) throw ConfigError("bad tower dimensions");
  if (mask_ratio < 0.0 || mask_ratio > 1.0) throw ConfigError("mask_ratio outside [0,1]");
}

FoundationEncoder::FoundationEncoder(FoundationConfig config, num::Rng& rng) : config_(config) {
  config_.validate();
  const int64_t d = config_.dim;
  const int64_t patch_dim = static_cast<int64_t>(config_.patch) * config_.patch * 3;
  const int64_t img_rows = config_.patch_rows() + (config_.kind == EncoderKind::cross_modal ? 1 : 0);

  params_["img/patch_w"] = Tensor::randn({patch_dim, d}, rng, "init/found/img/patch_w",
                                         1.0 / std::sqrt(static_cast<double>(patch_dim)), config_.dtype, true);
  params_["img/patch_b"] = Tensor::zeros({1, d}, config_.dtype, true);
  params_["img/pos"] = Tensor::randn({img_rows, d}, rng, "init/found/img/pos", 0.02, config_.dtype, true);
  for (int i = 0; i < config_.layers; ++i)
    num::init_block_params(params_, "img/blk" + std::to_string(i), d, config_.mlp_mult, rng, config_.dtype);

  if (config_.kind == EncoderKind::cross_modal) {
    params_["img/cls"] = Tensor::randn({1, d}, rng, "init/found/img/cls", 0.02, config_.dtype, true);
    params_["txt/emb"] = Tensor::randn({vocab_.size(), d}, rng, "init/found/txt/emb", 0.02, config_.dtype, true);
    params_["txt/pos"] = Tensor::randn({config_.max_text, d}, rng, "init/found/txt/pos", 0.02, config_.dtype, true);
    for (int i = 0; i < config_.layers; ++i)
      num::init_block_params(params_, "txt/blk" + std::to_string(i), d, config_.mlp_mult, rng, config_.dtype);
    params_["temp"] = Tensor::full({1}, 10.0, config_.dtype, true);
  } else {
    params_["rec/w"] =
        Tensor::randn({d, patch_dim}, rng, "init/found/rec/w", 1.0 / std::sqrt(static_cast<double>(d)), config_.dtype,
                      true);
    params_["rec/b"] = Tensor::zeros({1, patch_dim}, config_.dtype, true);
  }
}

namespace {

Tensor tower_from_patches(const Tensor& patches, const num::Params& p, const FoundationConfig& cfg) {
  Tensor x = add_rowvec(matmul(patches, p.at("img/patch_w")), p.at("img/patch_b"));
  if (cfg.kind == EncoderKind::cross_modal) x = num::concat_rows({p.at("img/cls"), x});
  x = add(x, p.at("img/pos"));
  for (int i = 0; i < cfg.layers; ++i) x = num::transformer_block(x, p, "img/blk" + std::to_string(i), cfg.heads);
  return layer_norm_rows(x);
}

Tensor mean_rows(const Tensor& x) {
  const int64_t n = x.dim(0);
  return matmul(Tensor::full({1, n}, 1.0 / static_cast<double>(n), x.dtype()), x);
}

num::Params detached(const num::Params& params) {
  num::Params out;
  for (const auto& [name, t] : params) out.emplace(name, t.detach());
  return out;
}

}  // namespace

Tensor FoundationEncoder::image_tower(const Tensor& image, const num::Params& p) const {
  if (image.shape().size() != 3 || image.dim(0) != config_.canvas || image.dim(1) != config_.canvas ||
      image.dim(2) != 3)
    throw ShapeError("foundation: expected " + std::to_string(config_.canvas) + "px image, got " +
                     Tensor::shape_str(image.shape()));
  return tower_from_patches(patchify(image.detach().to_dtype(config_.dtype), config_.patch), p, config_);
}

Tensor FoundationEncoder::text_tower(const std::vector<int>& text_ids, const num::Params& p) const {
  if (text_ids.empty()) throw ShapeError("foundation: empty text");
  if (static_cast<int>(text_ids.size()) > config_.max_text)
    throw ShapeError("foundation: text of " + std::to_string(text_ids.size()) + " tokens exceeds max_text " +
                     std::to_string(config_.max_text));
  Tensor x = embedding(p.at("txt/emb"), text_ids);
  x = add(x, slice_rows(p.at("txt/pos"), 0, static_cast<int64_t>(text_ids.size())));
  for (int i = 0; i < config_.layers; ++i) x = num::transformer_block(x, p, "txt/blk" + std::to_string(i), config_.heads);
  return layer_norm_rows(x);
}

Tensor FoundationEncoder::encode_image_patches(const Tensor& image) const {
  return image_tower(image, detached(params_));
}

Tensor FoundationEncoder::encode_text_global(const std::string& caption) const {
  return encode_text_global(vocab_.encode_text(caption, config_.max_text));
}

Tensor FoundationEncoder::encode_text_global(const std::vector<int>& text_ids) const {
  if (config_.kind != EncoderKind::cross_modal)
    throw ConfigError("text encoding requires the cross-modal encoder");
  return l2_normalize_rows(mean_rows(text_tower(text_ids, detached(params_))));
}

Tensor aggregate(const Tensor& patch_features, AggMode mode, EncoderKind kind) {
  const bool has_cls = kind == EncoderKind::cross_modal;
  if (!has_cls && mode != AggMode::avgpool)
    throw ConfigError(to_string(mode) + " aggregation needs a CLS row; the vision-only encoder has none");
  const int64_t n = patch_features.dim(0);
  if (n < (has_cls ? 2 : 1)) throw ShapeError("aggregate: too few feature rows");

  Tensor result;
  switch (mode) {
    case AggMode::cls:
      result = slice_rows(patch_features, 0, 1);
      break;
    case AggMode::avgpool:
      result = mean_rows(has_cls ? slice_rows(patch_features, 1, n) : patch_features);
      break;
    case AggMode::concat:
      result = num::concat_cols({slice_rows(patch_features, 0, 1), mean_rows(slice_rows(patch_features, 1, n))});
      break;
  }
  return l2_normalize_rows(result, 1e-8);
}

Tensor info_nce(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& temp) {
  const int64_t b = img_emb.dim(0);
  if (b < 2) throw ConfigError("contrastive loss needs a batch of at least 2, got " + std::to_string(b));
  Tensor logits = scale_by(matmul(img_emb, transpose(txt_emb)), temp);
  std::vector<int> targets(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) targets[static_cast<size_t>(i)] = static_cast<int>(i);
  const std::vector<double> weights(static_cast<size_t>(b), 1.0);
  Tensor i2t = cross_entropy_rows(logits, targets, weights);
  Tensor t2i = cross_entropy_rows(transpose(logits), targets, weights);
  return mul_scalar(add(i2t, t2i), 0.5);
}

Tensor FoundationEncoder::contrastive_loss(const std::vector<corpus::Sample>& batch, const num::Params& p) const {
  if (config_.kind != EncoderKind::cross_modal)
    throw ConfigError("contrastive pretraining requires the cross-modal encoder");
  if (batch.size() < 2)
    throw ConfigError("contrastive loss needs a batch of at least 2, got " + std::to_string(batch.size()));
  std::vector<Tensor> img_rows, txt_rows;
  img_rows.reserve(batch.size());
  txt_rows.reserve(batch.size());
  for (const corpus::Sample& s : batch) {
    img_rows.push_back(l2_normalize_rows(slice_rows(image_tower(s.image, p), 0, 1)));
    txt_rows.push_back(
        l2_normalize_rows(mean_rows(text_tower(vocab_.encode_text(s.caption, config_.max_text), p))));
  }
  return info_nce(concat_rows(img_rows), concat_rows(txt_rows), p.at("temp"));
}

Tensor FoundationEncoder::recon_loss(const std::vector<Tensor>& corrupted, const std::vector<Tensor>& clean,
                                     const num::Params& p) const {
  if (config_.kind != EncoderKind::vision_only)
    throw ConfigError("reconstruction pretraining requires the vision-only encoder");
  if (corrupted.empty() || corrupted.size() != clean.size()) throw ShapeError("recon loss: mismatched batch");
  Tensor acc;
  for (size_t i = 0; i < corrupted.size(); ++i) {
    Tensor feats = tower_from_patches(corrupted[i], p, config_);
    Tensor pred = add_rowvec(matmul(feats, p.at("rec/w")), p.at("rec/b"));
    Tensor diff = sub(pred, clean[i].detach());
    Tensor mse = mean_all(mul(diff, diff));
    acc = acc.defined() ? add(acc, mse) : mse;
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(corrupted.size()));
}

FoundationTrainer::FoundationTrainer(FoundationEncoder& encoder, num::AdamWConfig opt, uint64_t seed)
    : enc_(encoder), opt_(opt), rng_(seed) {}

double FoundationTrainer::contrastive_step(const std::vector<corpus::Sample>& batch) {
  auto fn = [&](const num::Params& p) { return enc_.contrastive_loss(batch, p); };
  auto [loss, grads] = num::forward_backward(fn, enc_.params());
  opt_.step(enc_.params(), grads);

  auto temp = enc_.params().at("temp").mutable_data();
  temp[0] = std::clamp(temp[0], 1.0, 100.0);
  enc_.params().at("temp").round_to_dtype();
  return loss;
}

double FoundationTrainer::recon_step(const std::vector<Tensor>& images) {
  if (images.empty()) throw ConfigError("recon step: empty batch");
  const FoundationConfig& cfg = enc_.config();
  const int rows = cfg.patch_rows();
  const auto masked_count = static_cast<int>(std::floor(cfg.mask_ratio * rows));

  std::vector<Tensor> clean, corrupted;
  for (const Tensor& img : images) {
    Tensor patches = patchify(img.detach().to_dtype(cfg.dtype), cfg.patch);
    clean.push_back(patches);

    // partial Fisher-Yates pick of masked patch rows
    std::vector<int64_t> order(static_cast<size_t>(rows));
    for (int i = 0; i < rows; ++i) order[static_cast<size_t>(i)] = i;
    for (int i = 0; i < masked_count; ++i) {
      const auto j = i + rng_.uniform_int("recon/mask", rows - i);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    std::vector<double> data(patches.data().begin(), patches.data().end());
    const int64_t cols = patches.dim(1);
    for (int i = 0; i < masked_count; ++i)
      for (int64_t c = 0; c < cols; ++c) data[static_cast<size_t>(order[static_cast<size_t>(i)] * cols + c)] = 0.5;
    corrupted.push_back(Tensor::from_data(patches.shape(), std::move(data), patches.dtype()));
  }

  auto fn = [&](const num::Params& p) { return enc_.recon_loss(corrupted, clean, p); };
  auto [loss, grads] = num::forward_backward(fn, enc_.params());
  opt_.step(enc_.params(), grads);
  return loss;
}

nlohmann::json FoundationConfig::to_json() const {
  return {{"encoder_kind", to_string(kind)},
          {"canvas", canvas},
          {"patch_size", patch},
          {"D", dim},
          {"heads", heads},
          {"layers", layers},
          {"mlp_mult", mlp_mult},
          {"max_text", max_text},
          {"mask_ratio", mask_ratio}};
}

FoundationConfig FoundationConfig::from_json(const nlohmann::json& j) {
  FoundationConfig cfg;
  cfg.kind = encoder_kind_from_string(j.at("encoder_kind").get<std::string>());
  cfg.canvas = j.at("canvas").get<int>();
  cfg.patch = j.at("patch_size").get<int>();
  cfg.dim = j.at("D").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.mlp_mult = j.at("mlp_mult").get<int>();
  cfg.max_text = j.at("max_text").get<int>();
  cfg.mask_ratio = j.at("mask_ratio").get<double>();
  cfg.validate();
  return cfg;
}

void FoundationEncoder::save(const std::filesystem::path& path) const {
  num::Container c;
  c.meta["kind"] = "foundation";
  c.meta["config"] = config_.to_json();
  for (const auto& [name, t] : params_) c.add(name, t);
  c.save(path);
}

FoundationEncoder FoundationEncoder::load(const std::filesystem::path& path) {
  num::Container c = num::Container::load(path);
  if (c.meta.value("kind", "") != "foundation")
    throw IntegrityError(path.string() + " is not a foundation encoder checkpoint");
  FoundationEncoder enc(FoundationConfig::from_json(c.meta.at("config")));
  for (const std::string& name : c.order) {
    const Tensor& t = c.at(name);
    enc.params_.emplace(name, Tensor::from_data(t.shape(), {t.data().begin(), t.data().end()}, t.dtype(), true));
  }
  return enc;
}

}  // namespace arra::found
