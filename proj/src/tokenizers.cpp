#include "arra/tokenizers.hpp"

#include <algorithm>
#include <cmath>

#include "arra/container.hpp"
#include "arra/corpus.hpp"
#include "arra/error.hpp"

namespace arra::tok {

using num::Tensor;

namespace {

const std::array<std::string, kNumSpecials> kSpecialNames{"<PAD>", "<BOS>", "<BOI>", "<EOI>", "<UNCOND>", "<REP>"};

}  // namespace

TextVocab TextVocab::build() {
  TextVocab v;
  for (const std::string& s : kSpecialNames) {
    v.token_to_id_.emplace(s, static_cast<int>(v.id_to_token_.size()));
    v.id_to_token_.push_back(s);
  }
  for (const std::string& w : corpus::grammar_words()) {
    v.token_to_id_.emplace(w, static_cast<int>(v.id_to_token_.size()));
    v.id_to_token_.push_back(w);
  }
  return v;
}

int TextVocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) throw ParseError("word '" + token + "' is not in the vocabulary", 0);
  return it->second;
}

const std::string& TextVocab::token(int id) const {
  if (id < 0 || id >= size()) throw ShapeError("token id " + std::to_string(id) + " outside vocabulary");
  return id_to_token_[static_cast<size_t>(id)];
}

std::vector<int> TextVocab::encode_text(const std::string& caption, int max_len) const {
  std::vector<int> ids{kBos};
  size_t i = 0;
  while (i < caption.size()) {
    while (i < caption.size() && caption[i] == ' ') ++i;
    if (i >= caption.size()) break;
    const size_t start = i;
    while (i < caption.size() && caption[i] != ' ') ++i;
    const std::string word = caption.substr(start, i - start);
    auto it = token_to_id_.find(word);
    if (it == token_to_id_.end()) throw ParseError("word '" + word + "' is not in the vocabulary", start);
    ids.push_back(it->second);
  }
  if (static_cast<int>(ids.size()) > max_len)
    throw ConfigError("caption needs " + std::to_string(ids.size()) + " tokens but max_text is " +
                      std::to_string(max_len));
  return ids;
}

std::string TextVocab::decode_text(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < kNumSpecials) continue;
    if (!out.empty()) out += " ";
    out += token(id);
  }
  return out;
}

nlohmann::json TextVocab::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [token, id] : token_to_id_) j[token] = id;
  return j;
}

TextVocab TextVocab::from_json(const nlohmann::json& j) {
  TextVocab v;
  v.id_to_token_.resize(j.size());
  for (const auto& [token, id] : j.items()) {
    const int i = id.get<int>();
    if (i < 0 || i >= static_cast<int>(j.size())) throw IntegrityError("vocab: id " + std::to_string(i) + " not dense");
    v.token_to_id_.emplace(token, i);
    v.id_to_token_[static_cast<size_t>(i)] = token;
  }
  for (const std::string& t : v.id_to_token_)
    if (t.empty()) throw IntegrityError("vocab: ids are not dense from 0");
  return v;
}

int CombinedVocab::to_image_id(int code) const {
  if (code < 0 || code >= codebook_size) throw ShapeError("code " + std::to_string(code) + " outside codebook");
  return text_size + code;
}

int CombinedVocab::to_code(int id) const {
  if (!is_image(id)) throw ShapeError("id " + std::to_string(id) + " is not an image token");
  return id - text_size;
}

std::vector<int> rasterize(const std::vector<int>& codes, const CombinedVocab& vocab) {
  std::vector<int> ids;
  ids.reserve(codes.size());
  for (int c : codes) ids.push_back(vocab.to_image_id(c));
  return ids;
}

std::vector<int> derasterize(const std::vector<int>& ids, const CombinedVocab& vocab, int h, int w) {
  if (static_cast<int>(ids.size()) != h * w)
    throw ShapeError("derasterize: " + std::to_string(ids.size()) + " ids for a " + std::to_string(h) + "x" +
                     std::to_string(w) + " grid");
  std::vector<int> codes;
  codes.reserve(ids.size());
  for (int id : ids) codes.push_back(vocab.to_code(id));
  return codes;
}

void VqConfig::validate() const {
  if (canvas <= 0 || compression <= 0 || canvas % compression != 0)
    throw ConfigError("canvas " + std::to_string(canvas) + " not divisible by compression " +
                      std::to_string(compression));
  if (codebook_size < 2) throw ConfigError("codebook needs at least 2 codes");
  if (code_dim <= 0 || hidden <= 0) throw ConfigError("code_dim and hidden must be positive");
}

VqTokenizer::VqTokenizer(VqConfig config, num::Rng& rng) : config_(config) {
  config_.validate();
  const int64_t patch_dim = static_cast<int64_t>(config_.compression) * config_.compression * 3;
  const int64_t hid = config_.hidden, d = config_.code_dim, k = config_.codebook_size;
  auto w = [&](const std::string& name, int64_t rows, int64_t cols) {
    params_[name] =
        Tensor::randn({rows, cols}, rng, "init/vq/" + name, 1.0 / std::sqrt(static_cast<double>(rows)), config_.dtype,
                      true);
  };
  w("enc/w1", patch_dim, hid);
  w("enc/w2", hid, d);
  w("dec/w1", d, hid);
  w("dec/w2", hid, patch_dim);
  params_["enc/b1"] = Tensor::zeros({1, hid}, config_.dtype, true);
  params_["enc/b2"] = Tensor::zeros({1, d}, config_.dtype, true);
  params_["dec/b1"] = Tensor::zeros({1, hid}, config_.dtype, true);
  params_["dec/b2"] = Tensor::zeros({1, patch_dim}, config_.dtype, true);
  params_["codebook"] = Tensor::randn({k, d}, rng, "init/vq/codebook", 0.1, config_.dtype, true);
  usage_.assign(static_cast<size_t>(k), 0);
}

Tensor VqTokenizer::encoder_forward(const Tensor& patches, const num::Params& p) const {
  Tensor h = gelu(add_rowvec(matmul(patches, p.at("enc/w1")), p.at("enc/b1")));
  return add_rowvec(matmul(h, p.at("enc/w2")), p.at("enc/b2"));
}

Tensor VqTokenizer::decoder_forward(const Tensor& zq, const num::Params& p) const {
  Tensor h = gelu(add_rowvec(matmul(zq, p.at("dec/w1")), p.at("dec/b1")));
  return add_rowvec(matmul(h, p.at("dec/w2")), p.at("dec/b2"));
}

Tensor VqTokenizer::encode(const Tensor& image) const {
  if (image.shape().size() != 3 || image.dim(2) != 3 || image.dim(0) != image.dim(1) ||
      image.dim(0) % config_.compression != 0)
    throw ShapeError("vq encode: image " + Tensor::shape_str(image.shape()) + " not divisible by compression " +
                     std::to_string(config_.compression));
  Tensor patches = patchify(image.detach(), config_.compression);
  num::Params frozen;
  for (const auto& [name, t] : params_) frozen.emplace(name, t.detach());
  return encoder_forward(patches, frozen);
}

std::pair<std::vector<int>, Tensor> VqTokenizer::quantize(const Tensor& features) const {
  auto [idx, zq] = num::nearest_code_st(features, codebook().detach());
  return {std::move(idx), std::move(zq)};
}

Tensor VqTokenizer::decode_codes(const std::vector<int>& codes, int canvas) const {
  if (canvas == 0) canvas = config_.canvas;
  const int side = canvas / config_.compression;
  if (canvas % config_.compression != 0 || static_cast<int>(codes.size()) != side * side)
    throw ShapeError("vq decode: " + std::to_string(codes.size()) + " codes for canvas " + std::to_string(canvas));
  for (int c : codes)
    if (c < 0 || c >= config_.codebook_size) throw ShapeError("vq decode: code " + std::to_string(c) + " outside [0," +
                                                              std::to_string(config_.codebook_size) + ")");
  num::Params frozen;
  for (const auto& [name, t] : params_) frozen.emplace(name, t.detach());
  Tensor zq = embedding(frozen.at("codebook"), codes);
  Tensor flat = decoder_forward(zq, frozen);
  Tensor image = unpatchify(flat, canvas, canvas, config_.compression);
  std::vector<double> clamped(image.data().begin(), image.data().end());
  for (double& v : clamped) v = std::clamp(v, 0.0, 1.0);
  return Tensor::from_data(image.shape(), std::move(clamped), image.dtype());
}

std::vector<int> VqTokenizer::encode_to_codes(const Tensor& image) const {
  return quantize(encode(image)).first;
}

nlohmann::json VqConfig::to_json() const {
  return {{"canvas", canvas},
          {"compression", compression},
          {"codebook_size", codebook_size},
          {"code_dim", code_dim},
          {"hidden", hidden}};
}

VqConfig VqConfig::from_json(const nlohmann::json& j) {
  VqConfig cfg;
  cfg.canvas = j.at("canvas").get<int>();
  cfg.compression = j.at("compression").get<int>();
  cfg.codebook_size = j.at("codebook_size").get<int>();
  cfg.code_dim = j.at("code_dim").get<int>();
  cfg.hidden = j.at("hidden").get<int>();
  cfg.validate();
  return cfg;
}

void VqTokenizer::save(const std::filesystem::path& path) const {
  num::Container c;
  c.meta["kind"] = "vq_tokenizer";
  c.meta["config"] = config_.to_json();
  for (const auto& [name, t] : params_) c.add(name, t);
  std::vector<double> usage(usage_.begin(), usage_.end());
  const auto usage_len = static_cast<int64_t>(usage.size());
  c.add("usage", Tensor::from_data({usage_len}, std::move(usage), num::Dtype::f64));
  c.save(path);
}

VqTokenizer VqTokenizer::load(const std::filesystem::path& path) {
  num::Container c = num::Container::load(path);
  if (c.meta.value("kind", "") != "vq_tokenizer")
    throw IntegrityError(path.string() + " is not a vq tokenizer checkpoint");
  VqTokenizer tok(VqConfig::from_json(c.meta.at("config")));
  for (const std::string& name : c.order) {
    if (name == "usage") continue;
    Tensor t = c.at(name).detach();
    tok.params_.emplace(name, Tensor::from_data(t.shape(), {t.data().begin(), t.data().end()}, t.dtype(), true));
  }
  const Tensor& usage = c.at("usage");
  tok.usage_.assign(usage.data().begin(), usage.data().end());
  return tok;
}

VqTrainer::VqTrainer(VqTokenizer& tokenizer, num::AdamWConfig opt, uint64_t seed, double commit_beta,
                     int64_t reseed_interval)
    : tok_(tokenizer),
      opt_(opt),
      rng_(seed),
      commit_beta_(commit_beta),
      reseed_interval_(reseed_interval),
      window_usage_(static_cast<size_t>(tokenizer.config().codebook_size), 0) {}

VqStepLosses VqTrainer::step(const std::vector<Tensor>& images) {
  if (images.empty()) throw ConfigError("vq train step: empty batch");
  std::vector<Tensor> patch_parts;
  patch_parts.reserve(images.size());
  for (const Tensor& img : images) patch_parts.push_back(patchify(img.detach(), tok_.config().compression));
  Tensor patches = concat_rows(patch_parts);

  VqStepLosses losses;
  std::vector<int> indices;
  auto fn = [&](const num::Params& p) {
    Tensor f = tok_.encoder_forward(patches, p);
    auto [idx, zq] = num::nearest_code_st(f, p.at("codebook").detach());
    indices = idx;
    Tensor recon_flat = tok_.decoder_forward(zq, p);
    Tensor diff = sub(recon_flat, patches);
    Tensor recon = mean_all(mul(diff, diff));

    Tensor selected = embedding(p.at("codebook"), idx);
    Tensor cb_diff = sub(selected, f.detach());
    Tensor codebook_loss = mean_all(mul(cb_diff, cb_diff));

    Tensor commit_diff = sub(f, zq.detach());
    Tensor commit = mean_all(mul(commit_diff, commit_diff));

    losses.recon = recon.item();
    losses.codebook = codebook_loss.item();
    losses.commit = commit.item();
    return add(add(recon, codebook_loss), mul_scalar(commit, commit_beta_));
  };
  auto [total, grads] = num::forward_backward(fn, tok_.params_);
  losses.total = total;
  opt_.step(tok_.params_, grads);

  for (int idx : indices) {
    ++tok_.usage_[static_cast<size_t>(idx)];
    ++window_usage_[static_cast<size_t>(idx)];
  }

  // codes unused across the window get re-seeded from current encoder outputs
  if (reseed_interval_ > 0 && opt_.steps_taken() % reseed_interval_ == 0) {
    Tensor f = tok_.encoder_forward(patches.detach(), [&] {
      num::Params frozen;
      for (const auto& [name, t] : tok_.params_) frozen.emplace(name, t.detach());
      return frozen;
    }());
    auto cb = tok_.params_.at("codebook").mutable_data();
    const int64_t d = tok_.config().code_dim;
    for (size_t k = 0; k < window_usage_.size(); ++k) {
      if (window_usage_[k] != 0) continue;
      const int64_t row = rng_.uniform_int("vq/reseed", f.dim(0));
      for (int64_t j = 0; j < d; ++j) cb[k * static_cast<size_t>(d) + static_cast<size_t>(j)] = f.at({row, j});
    }
    tok_.params_.at("codebook").round_to_dtype();
    std::fill(window_usage_.begin(), window_usage_.end(), 0);
  }
  return losses;
}

}  // namespace arra::tok
