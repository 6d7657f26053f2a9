#include "arra/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "arra/error.hpp"
#include "arra/rng.hpp"

namespace arra::samp {

void SampleConfig::validate(int image_vocab) const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (top_k < 1) throw ConfigError("top_k must be at least 1");
  if (top_k > image_vocab)
    throw ConfigError("top_k " + std::to_string(top_k) + " exceeds the image vocabulary of " +
                      std::to_string(image_vocab));
  if (cfg_scale < 0.0) throw ConfigError("cfg_scale must be nonnegative");
}

nlohmann::json SampleConfig::to_json() const {
  return {{"temperature", temperature}, {"top_k", top_k}, {"cfg_scale", cfg_scale}, {"seed", seed},
          {"greedy", greedy}};
}

SampleConfig SampleConfig::from_json(const nlohmann::json& j) {
  SampleConfig c;
  c.temperature = j.at("temperature").get<double>();
  c.top_k = j.at("top_k").get<int>();
  c.cfg_scale = j.at("cfg_scale").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.greedy = j.at("greedy").get<bool>();
  return c;
}

std::vector<double> cfg_logits(const std::vector<double>& cond, const std::vector<double>& uncond, double scale) {
  if (cond.size() != uncond.size()) throw ShapeError("cfg_logits: branch widths differ");
  if (scale == 1.0) return cond;
  if (scale == 0.0) return uncond;
  std::vector<double> out(cond.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + scale * (cond[i] - uncond[i]);
  return out;
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Sampling over the image-id range only; everything outside it is treated as
// masked to -inf. Ties resolve toward the lower id.
int pick_image_token(const std::vector<double>& logits, const tok::CombinedVocab& vocab, const SampleConfig& config,
                     num::Rng& rng) {
  const int lo = vocab.text_size;
  const int hi = vocab.total();
  double best = kNegInf;
  for (int id = lo; id < hi; ++id) {
    const double v = logits[static_cast<size_t>(id)];
    if (std::isnan(v)) throw NumericalError("sampler: non-finite logits over the image vocabulary");
    if (v > best) best = v;
  }
  if (best == kNegInf || !std::isfinite(best))
    throw NumericalError("sampler: every image-vocabulary logit is masked or unusable");
  if (config.greedy) {
    for (int id = lo; id < hi; ++id)
      if (logits[static_cast<size_t>(id)] == best) return id;
  }

  std::vector<std::pair<double, int>> cand;
  cand.reserve(static_cast<size_t>(hi - lo));
  for (int id = lo; id < hi; ++id) cand.emplace_back(logits[static_cast<size_t>(id)], id);
  std::sort(cand.begin(), cand.end(),
            [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  cand.resize(static_cast<size_t>(std::min<int>(config.top_k, hi - lo)));

  double norm = 0.0;
  std::vector<double> weight(cand.size());
  for (size_t i = 0; i < cand.size(); ++i) {
    weight[i] = std::exp((cand[i].first - best) / config.temperature);
    norm += weight[i];
  }
  const double u = rng.uniform("sample/pick");
  double acc = 0.0;
  for (size_t i = 0; i < cand.size(); ++i) {
    acc += weight[i] / norm;
    if (u < acc) return cand[i].second;
  }
  return cand.back().second;
}

std::vector<double> row_values(const num::Tensor& row) { return {row.data().begin(), row.data().end()}; }

}  // namespace

std::vector<int> sample_tokens(const ar::ArModel& model, const std::vector<int>& prompt_ids,
                               const tok::CombinedVocab& vocab, int grid_len, const SampleConfig& config,
                               ar::Mechanism mechanism) {
  if (model.config().mode_tag != "t2i")
    throw ConfigError("sampling needs a t2i model, got mode_tag '" + model.config().mode_tag + "'");
  if (vocab.total() != model.config().vocab)
    throw ConfigError("sampler: vocabulary " + std::to_string(vocab.total()) + " does not match the model's " +
                      std::to_string(model.config().vocab));
  config.validate(vocab.codebook_size);
  if (grid_len < 1) throw ConfigError("sampler: grid_len must be positive");
  if (prompt_ids.empty() || prompt_ids.front() != tok::kBos)
    throw ConfigError("sampler: prompt must start with <BOS>");
  for (int id : prompt_ids)
    if (id < 0 || id >= vocab.text_size) throw ConfigError("sampler: prompt may hold text ids only");
  const bool rep = mechanism == ar::Mechanism::rep;
  const int64_t prefix = static_cast<int64_t>(prompt_ids.size()) + 1 + (rep ? 1 : 0);
  if (prefix + grid_len - 1 > model.config().max_len)
    throw ConfigError("sampler: prompt needs " + std::to_string(prefix + grid_len - 1) +
                      " positions, model max_len is " + std::to_string(model.config().max_len));

  const bool use_cond = config.cfg_scale != 0.0;
  const bool use_uncond = config.cfg_scale != 1.0;
  std::optional<ar::KvCache> ccache, ucache;
  num::Tensor clog, ulog;
  if (use_cond) {
    ccache = model.make_cache();
    for (int id : prompt_ids) clog = model.decode_step(id, *ccache);
    clog = model.decode_step(tok::kBoi, *ccache);
    if (rep) clog = model.decode_step(tok::kRep, *ccache);
  }
  if (use_uncond) {
    ucache = model.make_cache();
    for (int id : ar::uncond_text(static_cast<int>(prompt_ids.size()))) ulog = model.decode_step(id, *ucache);
    ulog = model.decode_step(tok::kBoi, *ucache);
    if (rep) ulog = model.decode_step(tok::kRep, *ucache);
  }

  num::Rng rng(config.seed);
  std::vector<int> out;
  out.reserve(static_cast<size_t>(grid_len));
  for (int t = 0; t < grid_len; ++t) {
    std::vector<double> guided;
    if (use_cond && use_uncond)
      guided = cfg_logits(row_values(clog), row_values(ulog), config.cfg_scale);
    else
      guided = row_values(use_cond ? clog : ulog);
    const int picked = pick_image_token(guided, vocab, config, rng);
    out.push_back(picked);
    if (t + 1 < grid_len) {
      if (use_cond) clog = model.decode_step(picked, *ccache);
      if (use_uncond) ulog = model.decode_step(picked, *ucache);
    }
  }
  return out;
}

num::Tensor generate_image(const ar::ArModel& model, const tok::VqTokenizer& vq, const std::string& caption,
                           const SampleConfig& config, ar::Mechanism mechanism, std::vector<int>* tokens_out) {
  const tok::TextVocab tv = tok::TextVocab::build();
  const tok::CombinedVocab vocab{tv.size(), vq.config().codebook_size};
  const int side = vq.config().grid_side();
  const std::vector<int> prompt = tv.encode_text(caption, static_cast<int>(model.config().max_len));
  std::vector<int> tokens = sample_tokens(model, prompt, vocab, side * side, config, mechanism);
  std::vector<int> codes = tok::derasterize(tokens, vocab, side, side);
  if (tokens_out) *tokens_out = std::move(tokens);
  return vq.decode_codes(codes);
}

}  // namespace arra::samp
