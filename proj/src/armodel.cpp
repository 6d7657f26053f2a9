#include "arra/armodel.hpp"

#include <cmath>

#include "arra/container.hpp"
#include "arra/error.hpp"
#include "arra/transformer.hpp"

namespace arra::ar {

using num::Tensor;

std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::none: return "none";
    case Mechanism::rep: return "rep";
    case Mechanism::hybnext: return "hybnext";
  }
  return "none";
}

Mechanism mechanism_from_string(const std::string& s) {
  if (s == "none") return Mechanism::none;
  if (s == "rep") return Mechanism::rep;
  if (s == "hybnext") return Mechanism::hybnext;
  throw ConfigError("unknown mechanism '" + s + "'");
}

void TokenSequence::validate() const {
  if (ids.empty() || ids.size() != roles.size()) throw ShapeError("token sequence: ids and roles must align");
  int64_t first_image = -1, last_image = -1, rep_count = 0;
  for (int64_t t = 0; t < size(); ++t) {
    if (roles[static_cast<size_t>(t)] == Role::image) {
      if (first_image < 0) first_image = t;
      last_image = t;
    }
    if (roles[static_cast<size_t>(t)] == Role::rep) ++rep_count;
  }
  if (first_image >= 0)
    for (int64_t t = first_image; t <= last_image; ++t)
      if (roles[static_cast<size_t>(t)] != Role::image)
        throw ShapeError("token sequence: image tokens not contiguous");
  if (rep_count > 1) throw ShapeError("token sequence: more than one <REP>");
  if (rep_count == 1) {
    if (first_image < 1 || roles[static_cast<size_t>(first_image - 1)] != Role::rep)
      throw ShapeError("token sequence: <REP> must sit immediately before the image tokens");
  }
}

TokenSequence build_sequence(const std::vector<int>& text_ids, const std::vector<int>& image_ids, Mechanism mechanism,
                             const tok::CombinedVocab& vocab, int grid_len) {
  if (text_ids.empty() || text_ids.front() != tok::kBos)
    throw ConfigError("build_sequence: text ids must start with <BOS>");
  if (static_cast<int>(image_ids.size()) != grid_len)
    throw ShapeError("build_sequence: " + std::to_string(image_ids.size()) + " image ids for a grid of " +
                     std::to_string(grid_len));
  TokenSequence seq;
  seq.ids.reserve(text_ids.size() + image_ids.size() + 3);
  for (int id : text_ids) {
    seq.ids.push_back(id);
    seq.roles.push_back(id == tok::kPad ? Role::pad : Role::text);
  }
  seq.ids.push_back(tok::kBoi);
  seq.roles.push_back(Role::boi);
  if (mechanism == Mechanism::rep) {
    seq.ids.push_back(tok::kRep);
    seq.roles.push_back(Role::rep);
  }
  for (int id : image_ids) {
    if (!vocab.is_image(id))
      throw ShapeError("build_sequence: id " + std::to_string(id) + " is not an image token");
    seq.ids.push_back(id);
    seq.roles.push_back(Role::image);
  }
  seq.ids.push_back(tok::kEoi);
  seq.roles.push_back(Role::text);
  seq.validate();
  return seq;
}

TokenSequence text_sequence(const std::vector<int>& text_ids) {
  if (text_ids.empty() || text_ids.front() != tok::kBos)
    throw ConfigError("text_sequence: text ids must start with <BOS>");
  TokenSequence seq;
  for (int id : text_ids) {
    seq.ids.push_back(id);
    seq.roles.push_back(id == tok::kPad ? Role::pad : Role::text);
  }
  return seq;
}

std::vector<double> loss_mask(const TokenSequence& seq, bool loss_on_text) {
  if (seq.size() < 2) throw ShapeError("loss mask: sequence of length " + std::to_string(seq.size()));
  std::vector<double> w(static_cast<size_t>(seq.size() - 1), 0.0);
  for (size_t t = 0; t + 1 < seq.ids.size(); ++t) {
    const Role target_role = seq.roles[t + 1];
    const int target_id = seq.ids[t + 1];
    if (target_role == Role::image || target_id == tok::kEoi)
      w[t] = 1.0;
    else if (loss_on_text && target_role == Role::text && target_id != tok::kBos)
      w[t] = 1.0;
  }
  return w;
}

std::vector<int> uncond_text(int width) {
  if (width < 2) throw ConfigError("uncond text span needs width >= 2");
  std::vector<int> ids(static_cast<size_t>(width), tok::kPad);
  ids[0] = tok::kBos;
  ids[1] = tok::kUncond;
  return ids;
}

void ArConfig::validate() const {
  if (layers <= 0 || h_model <= 0 || heads <= 0 || h_model % heads != 0 || mlp_mult <= 0)
    throw ConfigError("bad transformer dimensions");
  if (vocab <= tok::kNumSpecials) throw ConfigError("vocab smaller than the special tokens");
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  if (mode_tag != "t2i" && mode_tag != "text_only") throw ConfigError("mode_tag must be t2i or text_only");
}

ArModel::ArModel(ArConfig config, num::Rng& rng) : cfg_(std::move(config)) {
  cfg_.validate();
  const int64_t h = cfg_.h_model, v = cfg_.vocab;
  params_["emb"] = Tensor::randn({v, h}, rng, "init/ar/emb", 0.02, cfg_.dtype, true);
  params_["pos"] = Tensor::randn({cfg_.max_len, h}, rng, "init/ar/pos", 0.02, cfg_.dtype, true);
  for (int i = 0; i < cfg_.layers; ++i)
    num::init_block_params(params_, "blk" + std::to_string(i), h, cfg_.mlp_mult, rng, cfg_.dtype);
  params_["head/w"] = Tensor::randn({h, v}, rng, "init/ar/head_w", 0.02, cfg_.dtype, true);
  params_["head/b"] = Tensor::zeros({1, v}, cfg_.dtype, true);
}

Tensor causal_mask(int64_t n, num::Dtype dtype) {
  std::vector<double> m(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) m[static_cast<size_t>(i * n + j)] = -1e30;
  return Tensor::from_data({n, n}, std::move(m), dtype);
}

ForwardOutput ArModel::forward(const TokenSequence& seq, const num::Params& p) const {
  const int64_t n = seq.size();
  if (n < 1 || n > cfg_.max_len)
    throw ShapeError("forward: sequence length " + std::to_string(n) + " outside [1, " +
                     std::to_string(cfg_.max_len) + "]");
  if (seq.ids.size() != seq.roles.size()) throw ShapeError("forward: ids and roles must align");
  for (int id : seq.ids)
    if (id < 0 || id >= cfg_.vocab)
      throw ShapeError("forward: id " + std::to_string(id) + " outside vocab " + std::to_string(cfg_.vocab));

  ForwardOutput out;
  out.hidden.reserve(static_cast<size_t>(cfg_.layers) + 1);
  Tensor x = add(embedding(p.at("emb"), seq.ids), slice_rows(p.at("pos"), 0, n));
  out.hidden.push_back(x);
  const Tensor mask = causal_mask(n, cfg_.dtype);
  for (int i = 0; i < cfg_.layers; ++i) {
    x = num::transformer_block(x, p, "blk" + std::to_string(i), cfg_.heads, &mask);
    out.hidden.push_back(x);
  }
  out.logits = add_rowvec(matmul(layer_norm_rows(x), p.at("head/w")), p.at("head/b"));
  return out;
}

namespace {

num::Params detached(const num::Params& params) {
  num::Params out;
  for (const auto& [name, t] : params) out.emplace(name, t.detach());
  return out;
}

}  // namespace

ForwardOutput ArModel::forward(const TokenSequence& seq) const { return forward(seq, detached(params_)); }

KvCache ArModel::make_cache() const {
  KvCache cache;
  cache.frozen = detached(params_);
  cache.k.resize(static_cast<size_t>(cfg_.layers));
  cache.v.resize(static_cast<size_t>(cfg_.layers));
  return cache;
}

// One-row recomputation of the full forward: every op below is row-local and
// mirrors multihead_attention / transformer_block exactly, so the logits match
// the corresponding row of a whole-sequence forward.
Tensor ArModel::decode_step(int id, KvCache& cache) const {
  if (id < 0 || id >= cfg_.vocab)
    throw ShapeError("decode_step: id " + std::to_string(id) + " outside vocab " + std::to_string(cfg_.vocab));
  if (cache.len >= cfg_.max_len)
    throw ShapeError("decode_step: sequence budget of " + std::to_string(cfg_.max_len) + " exhausted");
  const num::Params& p = cache.frozen;
  const int64_t hd = cfg_.h_model / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor x = add(embedding(p.at("emb"), {id}), slice_rows(p.at("pos"), cache.len, cache.len + 1));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string prefix = "blk" + std::to_string(l);
    Tensor a = layer_norm_rows(x);
    Tensor q = add_rowvec(matmul(a, p.at(prefix + "/attn/wq")), p.at(prefix + "/attn/bq"));
    Tensor k = add_rowvec(matmul(a, p.at(prefix + "/attn/wk")), p.at(prefix + "/attn/bk"));
    Tensor v = add_rowvec(matmul(a, p.at(prefix + "/attn/wv")), p.at(prefix + "/attn/bv"));
    auto& ck = cache.k[static_cast<size_t>(l)];
    auto& cv = cache.v[static_cast<size_t>(l)];
    ck = ck.defined() ? num::concat_rows({ck, k}) : k;
    cv = cv.defined() ? num::concat_rows({cv, v}) : v;

    std::vector<Tensor> contexts;
    contexts.reserve(static_cast<size_t>(cfg_.heads));
    for (int i = 0; i < cfg_.heads; ++i) {
      Tensor qi = slice_cols(q, i * hd, (i + 1) * hd);
      Tensor ki = slice_cols(ck, i * hd, (i + 1) * hd);
      Tensor vi = slice_cols(cv, i * hd, (i + 1) * hd);
      Tensor scores = mul_scalar(matmul(qi, transpose(ki)), scale);
      contexts.push_back(matmul(softmax_rows(scores), vi));
    }
    Tensor ctx = num::concat_cols(contexts);
    x = add(x, add_rowvec(matmul(ctx, p.at(prefix + "/attn/wo")), p.at(prefix + "/attn/bo")));
    Tensor mid = gelu(add_rowvec(matmul(layer_norm_rows(x), p.at(prefix + "/mlp/w1")), p.at(prefix + "/mlp/b1")));
    x = add(x, add_rowvec(matmul(mid, p.at(prefix + "/mlp/w2")), p.at(prefix + "/mlp/b2")));
  }
  ++cache.len;
  return add_rowvec(matmul(layer_norm_rows(x), p.at("head/w")), p.at("head/b"));
}

nlohmann::json ArConfig::to_json() const {
  return {{"L", layers},       {"h_model", h_model}, {"heads", heads},
          {"mlp_mult", mlp_mult}, {"vocab", vocab},     {"max_len", max_len},
          {"dtype", num::dtype_name(dtype)}, {"mode_tag", mode_tag}};
}

ArConfig ArConfig::from_json(const nlohmann::json& j) {
  ArConfig cfg;
  cfg.layers = j.at("L").get<int>();
  cfg.h_model = j.at("h_model").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.mlp_mult = j.at("mlp_mult").get<int>();
  cfg.vocab = j.at("vocab").get<int>();
  cfg.max_len = j.at("max_len").get<int>();
  cfg.mode_tag = j.at("mode_tag").get<std::string>();
  cfg.dtype = j.at("dtype").get<std::string>() == "f64" ? num::Dtype::f64 : num::Dtype::f32;
  cfg.validate();
  return cfg;
}

void ArModel::save(const std::filesystem::path& path) const {
  num::Container c;
  c.meta["kind"] = "ar_model";
  c.meta["config"] = cfg_.to_json();
  for (const auto& [name, t] : params_) c.add(name, t);
  c.save(path);
}

ArModel ArModel::load(const std::filesystem::path& path) {
  num::Container c = num::Container::load(path);
  if (c.meta.value("kind", "") != "ar_model")
    throw IntegrityError(path.string() + " is not an AR model checkpoint");
  ArModel model(ArConfig::from_json(c.meta.at("config")));
  for (const std::string& name : c.order) {
    const Tensor& t = c.at(name);
    model.params_.emplace(name, Tensor::from_data(t.shape(), {t.data().begin(), t.data().end()}, t.dtype(), true));
  }
  return model;
}

Tensor ar_loss(const Tensor& logits, const TokenSequence& seq, bool loss_on_text) {
  const int64_t n = seq.size();
  if (logits.dim(0) != n) throw ShapeError("ar_loss: logits rows do not match the sequence");
  std::vector<int> targets(seq.ids.begin() + 1, seq.ids.end());
  return cross_entropy_rows(slice_rows(logits, 0, n - 1), targets, loss_mask(seq, loss_on_text));
}

Tensor z_loss(const Tensor& logits, const std::vector<double>& weights) {
  if (static_cast<int64_t>(weights.size()) != logits.dim(0))
    throw ShapeError("z_loss: need one weight per logits row");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0) throw NumericalError("z_loss: no positions selected");
  Tensor lse = logsumexp_rows(logits);
  Tensor masked = mul(mul(lse, lse), Tensor::from_data({logits.dim(0), 1}, weights, logits.dtype()));
  return mul_scalar(sum_all(masked), 1.0 / wsum);
}

}  // namespace arra::ar
