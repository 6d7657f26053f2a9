#include "arra/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <thread>

#include "arra/error.hpp"

namespace arra::train {

using num::Tensor;

std::string to_string(Regime r) {
  switch (r) {
    case Regime::arra_base: return "arra_base";
    case Regime::arra: return "arra";
    case Regime::arra_adapt: return "arra_adapt";
    case Regime::baseline: return "baseline";
  }
  throw ConfigError("unknown regime");
}

Regime regime_from_string(const std::string& s) {
  if (s == "arra_base") return Regime::arra_base;
  if (s == "arra") return Regime::arra;
  if (s == "arra_adapt") return Regime::arra_adapt;
  if (s == "baseline") return Regime::baseline;
  throw ConfigError("unknown regime '" + s + "'");
}

void TrainConfig::validate() const {
  model.validate();
  corpus.validate();
  alignment.validate(model.layers);
  if (optimizer.lr <= 0.0) throw ConfigError("optimizer.lr must be positive");
  if (cond_dropout_p < 0.0 || cond_dropout_p >= 1.0) throw ConfigError("cond_dropout_p outside [0, 1)");
  if (regime == Regime::baseline && alignment.mechanism != ar::Mechanism::none)
    throw ConfigError("baseline regime forces alignment.mechanism none");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (dataset_size < 1) throw ConfigError("dataset_size must be at least 1");
  if (held_out_size < 0) throw ConfigError("held_out_size must be nonnegative");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (model.mode_tag == "text_only") {
    if (regime != Regime::arra_base)
      throw ConfigError("caption pretraining (mode_tag text_only) runs under regime arra_base");
    if (alignment.mechanism != ar::Mechanism::none)
      throw ConfigError("caption pretraining cannot use an alignment mechanism");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"regime", train::to_string(regime)},
          {"alignment", alignment.to_json()},
          {"model", model.to_json()},
          {"optimizer", optimizer.to_json()},
          {"corpus", corpus.to_json()},
          {"batch_size", batch_size},
          {"steps", steps},
          {"cond_dropout_p", cond_dropout_p},
          {"seed", seed},
          {"dataset_size", dataset_size},
          {"held_out_size", held_out_size},
          {"loss_on_text", loss_on_text},
          {"threads", threads}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.regime = regime_from_string(j.at("regime").get<std::string>());
  c.alignment = align::AlignmentConfig::from_json(j.at("alignment"));
  c.model = ar::ArConfig::from_json(j.at("model"));
  c.optimizer = num::AdamWConfig::from_json(j.at("optimizer"));
  c.corpus = arra::corpus::CorpusConfig::from_json(j.at("corpus"));
  c.batch_size = j.at("batch_size").get<int>();
  c.steps = j.at("steps").get<int64_t>();
  c.cond_dropout_p = j.at("cond_dropout_p").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.dataset_size = j.at("dataset_size").get<int>();
  c.held_out_size = j.at("held_out_size").get<int>();
  c.loss_on_text = j.at("loss_on_text").get<bool>();
  c.threads = j.at("threads").get<int>();
  c.validate();
  return c;
}

std::string config_fingerprint(const nlohmann::json& config) {
  const uint64_t h = num::Rng::hash_name(std::string(kCodeVersion) + "|" + config.dump());
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<uint64_t> held_out_scene_seeds(const TrainConfig& config) {
  num::Rng rng(config.seed);
  std::vector<uint64_t> seeds(static_cast<size_t>(config.held_out_size));
  for (auto& s : seeds) s = rng.bits("data/heldout");
  return seeds;
}

namespace {

void check_same_field(const std::string& name, int64_t want, int64_t got) {
  if (want != got)
    throw ConfigError("init_model: checkpoint " + name + " is " + std::to_string(got) + ", config wants " +
                      std::to_string(want));
}

// index-ordered work pool; first exception wins and is rethrown on the caller
template <typename F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex mu;
  std::exception_ptr err;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i; (i = next.fetch_add(1)) < n;) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace

ar::ArModel init_model(const TrainConfig& config, const InitPaths& paths) {
  config.validate();
  num::Rng rng(config.seed);
  ar::ArModel fresh(config.model, rng);
  if (config.regime == Regime::arra_base || config.regime == Regime::baseline) return fresh;

  const bool adapt = config.regime == Regime::arra_adapt;
  const std::filesystem::path& src_path = adapt ? paths.t2i_lm : paths.text_lm;
  if (src_path.empty())
    throw ConfigError("init_model: regime " + train::to_string(config.regime) + " needs a source checkpoint");
  ar::ArModel src = ar::ArModel::load(src_path);
  const std::string expect = adapt ? "t2i" : "text_only";
  if (src.config().mode_tag != expect)
    throw ConfigError("init_model: checkpoint " + src_path.string() + ": expected mode_tag '" + expect +
                      "', found '" + src.config().mode_tag + "'");
  check_same_field("layers", config.model.layers, src.config().layers);
  check_same_field("h_model", config.model.h_model, src.config().h_model);
  check_same_field("heads", config.model.heads, src.config().heads);
  check_same_field("mlp_mult", config.model.mlp_mult, src.config().mlp_mult);
  check_same_field("vocab", config.model.vocab, src.config().vocab);
  check_same_field("max_len", config.model.max_len, src.config().max_len);

  const int64_t text_rows = tok::TextVocab::build().size();
  for (auto& [name, t] : fresh.params()) {
    const Tensor& s = src.params().at(name);
    if (s.numel() != t.numel()) throw IntegrityError("init_model: size mismatch for '" + name + "'");
    auto dst = t.mutable_data();
    if (!adapt && name == "emb") {
      // text rows carried over, image-token rows stay at their fresh init
      std::copy(s.data().begin(), s.data().begin() + text_rows * t.dim(1), dst.begin());
    } else {
      std::copy(s.data().begin(), s.data().end(), dst.begin());
    }
    t.round_to_dtype();
  }
  return fresh;
}

nlohmann::json MetricRecord::to_json() const {
  return {{"step", step}, {"loss", loss}, {"ar", ar},         {"gva", gva},
          {"z", z},       {"mean_cos", mean_cos}, {"wall_ms", wall_ms}};
}

MetricRecord MetricRecord::from_json(const nlohmann::json& j) {
  MetricRecord r;
  r.step = j.at("step").get<int64_t>();
  r.loss = j.at("loss").get<double>();
  r.ar = j.at("ar").get<double>();
  r.gva = j.at("gva").get<double>();
  r.z = j.at("z").get<double>();
  r.mean_cos = j.at("mean_cos").get<double>();
  r.wall_ms = j.at("wall_ms").get<double>();
  return r;
}

void RunManifest::save(const std::filesystem::path& path) const {
  nlohmann::json j{{"config", config}, {"content_hash", content_hash}, {"checkpoint", checkpoint}};
  nlohmann::json arr = nlohmann::json::array();
  for (const MetricRecord& r : records) arr.push_back(r.to_json());
  j["records"] = std::move(arr);
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out.good()) throw IntegrityError("failed writing manifest " + path.string());
}

RunManifest RunManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in.good()) throw IntegrityError("cannot read manifest " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  RunManifest m;
  m.config = j.at("config");
  m.content_hash = j.at("content_hash").get<std::string>();
  m.checkpoint = j.at("checkpoint").get<std::string>();
  for (const auto& rj : j.at("records")) m.records.push_back(MetricRecord::from_json(rj));
  return m;
}

Trainer::Trainer(TrainConfig config, ar::ArModel model, std::optional<tok::VqTokenizer> vq,
                 std::optional<found::FoundationEncoder> encoder, std::filesystem::path run_dir)
    : cfg_(std::move(config)),
      model_(std::move(model)),
      vq_(std::move(vq)),
      enc_(std::move(encoder)),
      run_dir_(std::move(run_dir)),
      opt_(cfg_.optimizer),
      rng_(cfg_.seed) {
  cfg_.validate();
  if (model_.config().to_json() != cfg_.model.to_json())
    throw ConfigError("trainer: model architecture does not match config.model");
  t2i_ = cfg_.model.mode_tag == "t2i";
  align_ = t2i_ && cfg_.alignment.mechanism != ar::Mechanism::none;

  if (t2i_) {
    if (!vq_) throw ConfigError("trainer: t2i training needs a VQ tokenizer");
    if (vq_->config().canvas != cfg_.corpus.canvas)
      throw ConfigError("trainer: VQ canvas " + std::to_string(vq_->config().canvas) + " vs corpus canvas " +
                        std::to_string(cfg_.corpus.canvas));
    vocab_ = tok::CombinedVocab{text_vocab_.size(), vq_->config().codebook_size};
    if (vocab_.total() != cfg_.model.vocab)
      throw ConfigError("trainer: model vocab " + std::to_string(cfg_.model.vocab) + " != text " +
                        std::to_string(vocab_.text_size) + " + codebook " + std::to_string(vocab_.codebook_size));
    grid_len_ = vq_->config().grid_side() * vq_->config().grid_side();
  }
  if (align_) {
    if (!enc_) throw ConfigError("trainer: the alignment loss needs a foundation encoder");
    if (enc_->config().kind != cfg_.alignment.encoder)
      throw ConfigError("trainer: encoder kind " + found::to_string(enc_->config().kind) +
                        " but the alignment config expects " + found::to_string(cfg_.alignment.encoder));
    if (enc_->config().canvas != cfg_.corpus.canvas)
      throw ConfigError("trainer: encoder canvas " + std::to_string(enc_->config().canvas) + " vs corpus canvas " +
                        std::to_string(cfg_.corpus.canvas));
    d_out_ = cfg_.alignment.d_out(enc_->config().dim);
  }

  params_ = model_.params();  // shared storage: optimizer updates reach the model
  if (align_)
    align::init_projection(params_, cfg_.alignment.projection, cfg_.model.h_model, d_out_, rng_, cfg_.model.dtype);

  num::Rng data_rng(cfg_.seed);
  std::vector<uint64_t> seeds(static_cast<size_t>(cfg_.dataset_size));
  for (auto& s : seeds) s = data_rng.bits("data/train");
  items_.resize(seeds.size());
  parallel_for(static_cast<int>(seeds.size()), cfg_.threads, [&](int i) { items_[i] = make_item(seeds[i]); });
  const std::vector<uint64_t> hseeds = held_out_scene_seeds(cfg_);
  held_.resize(hseeds.size());
  parallel_for(static_cast<int>(hseeds.size()), cfg_.threads, [&](int i) { held_[i] = make_item(hseeds[i]); });

  manifest_.config = cfg_.to_json();
  manifest_.content_hash = config_fingerprint(manifest_.config);
  if (!run_dir_.empty()) std::filesystem::create_directories(run_dir_);
}

Trainer::Item Trainer::make_item(uint64_t scene_seed) const {
  arra::corpus::Sample s = arra::corpus::generate_scene(scene_seed, cfg_.corpus);
  Item it;
  it.caption = s.caption;
  it.text_ids = text_vocab_.encode_text(s.caption, cfg_.model.max_len);
  if (t2i_) {
    it.image_ids = tok::rasterize(vq_->encode_to_codes(s.image), vocab_);
    if (align_) {
      Tensor feats = enc_->encode_image_patches(s.image);
      Tensor agg = found::aggregate(feats, cfg_.alignment.aggregation, enc_->config().kind);
      it.f_gf.assign(agg.data().begin(), agg.data().end());
    }
  }
  return it;
}

ar::TokenSequence Trainer::item_sequence(const Item& it, bool dropped) const {
  if (!t2i_) return ar::text_sequence(it.text_ids);
  const std::vector<int> text = dropped ? ar::uncond_text(static_cast<int>(it.text_ids.size())) : it.text_ids;
  return ar::build_sequence(text, it.image_ids, cfg_.alignment.mechanism, vocab_, grid_len_);
}

Trainer::SampleOut Trainer::sample_pass(const Item& it, bool dropped) const {
  const ar::TokenSequence seq = item_sequence(it, dropped);
  const bool lot = t2i_ ? cfg_.loss_on_text : true;
  SampleOut out;
  auto fn = [&](const num::Params& p) -> Tensor {
    ar::ForwardOutput fwd = model_.forward(seq, p);
    Tensor ar_term = ar::ar_loss(fwd.logits, seq, lot);
    Tensor z = ar::z_loss(num::slice_rows(fwd.logits, 0, seq.size() - 1), ar::loss_mask(seq, lot));
    Tensor gva;
    if (align_) {
      const std::vector<int64_t> pos = align::select_alignment_positions(seq, cfg_.alignment.mechanism);
      Tensor f_gf = Tensor::from_data({1, static_cast<int64_t>(it.f_gf.size())}, it.f_gf, cfg_.model.dtype);
      gva = align::gva_loss(fwd, pos, f_gf, cfg_.alignment, p);
      out.gva = gva.item();
      out.cos = align::mean_alignment_cosine(fwd, pos, f_gf, cfg_.alignment, p);
    }
    out.ar = ar_term.item();
    out.z = z.item();
    return align::composite_loss(ar_term, gva, z, cfg_.alignment);
  };
  num::LossAndGrads res = num::forward_backward(fn, params_);
  out.loss = res.loss;
  out.grads = std::move(res.grads);
  return out;
}

MetricRecord Trainer::train_step() {
  const auto t0 = std::chrono::steady_clock::now();
  const int b_n = cfg_.batch_size;
  std::vector<int64_t> idx(static_cast<size_t>(b_n));
  for (auto& v : idx) v = rng_.uniform_int("train/batch", static_cast<int64_t>(items_.size()));
  std::vector<char> dropped(static_cast<size_t>(b_n), 0);
  if (t2i_)
    for (auto& d : dropped) d = rng_.uniform("train/drop") < cfg_.cond_dropout_p ? 1 : 0;

  const int64_t step_no = opt_.steps_taken() + 1;
  std::vector<SampleOut> outs(static_cast<size_t>(b_n));
  for (SampleOut& o : outs) o.loss = std::numeric_limits<double>::quiet_NaN();  // null in the dump until evaluated
  auto abort_with_dump = [&](const std::string& why) {
    dump_batch(step_no, idx, dropped, outs);
    std::string msg = "trainer: " + why + " at step " + std::to_string(step_no);
    if (!run_dir_.empty()) msg += " (batch dumped under " + run_dir_.string() + ")";
    throw NumericalError(msg);
  };
  try {
    parallel_for(b_n, cfg_.threads, [&](int b) {
      outs[static_cast<size_t>(b)] =
          sample_pass(items_[static_cast<size_t>(idx[static_cast<size_t>(b)])], dropped[static_cast<size_t>(b)] != 0);
    });
  } catch (const NumericalError& e) {
    abort_with_dump(std::string("batch evaluation failed (") + e.what() + ")");
  }

  MetricRecord rec;
  rec.step = step_no;
  for (const SampleOut& o : outs) {
    rec.loss += o.loss;
    rec.ar += o.ar;
    rec.gva += o.gva;
    rec.z += o.z;
    rec.mean_cos += o.cos;
  }
  const double inv = 1.0 / b_n;
  rec.loss *= inv;
  rec.ar *= inv;
  rec.gva *= inv;
  rec.z *= inv;
  rec.mean_cos *= inv;
  if (!std::isfinite(rec.loss)) abort_with_dump("non-finite loss");

  std::map<std::string, std::vector<double>> grads;
  for (const auto& [name, t] : params_) grads.emplace(name, std::vector<double>(static_cast<size_t>(t.numel()), 0.0));
  for (const SampleOut& o : outs)
    for (const auto& [name, g] : o.grads) {
      std::vector<double>& acc = grads.at(name);
      for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * inv;
    }
  opt_.step(params_, grads);

  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  manifest_.records.push_back(rec);
  append_metrics(rec);
  return rec;
}

void Trainer::run() {
  while (opt_.steps_taken() < cfg_.steps) train_step();
  if (!run_dir_.empty()) {
    save_checkpoint(run_dir_ / "checkpoint_final.bin");
    manifest_.checkpoint = "checkpoint_final.bin";
    manifest_.save(run_dir_ / "manifest.json");
  }
}

void Trainer::append_metrics(const MetricRecord& rec) {
  if (run_dir_.empty()) return;
  if (!metrics_out_.is_open()) metrics_out_.open(run_dir_ / "metrics.jsonl", std::ios::app);
  metrics_out_ << rec.to_json().dump() << '\n';
  metrics_out_.flush();
}

void Trainer::trim_metrics(int64_t upto) {
  manifest_.records.clear();
  if (run_dir_.empty()) return;
  if (metrics_out_.is_open()) metrics_out_.close();
  const std::filesystem::path mpath = run_dir_ / "metrics.jsonl";
  if (std::filesystem::exists(mpath)) {
    std::ifstream in(mpath);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      MetricRecord r = MetricRecord::from_json(nlohmann::json::parse(line));
      if (r.step <= upto) manifest_.records.push_back(r);
    }
  }
  std::ofstream out(mpath, std::ios::trunc);
  for (const MetricRecord& r : manifest_.records) out << r.to_json().dump() << '\n';
}

void Trainer::dump_batch(int64_t step, const std::vector<int64_t>& idx, const std::vector<char>& dropped,
                         const std::vector<SampleOut>& outs) const {
  if (run_dir_.empty()) return;
  nlohmann::json j{{"step", step}};
  nlohmann::json rows = nlohmann::json::array();
  for (size_t b = 0; b < idx.size(); ++b)
    rows.push_back({{"index", idx[b]},
                    {"dropped", dropped[b] != 0},
                    {"caption", items_[static_cast<size_t>(idx[b])].caption},
                    {"loss", outs[b].loss},
                    {"ar", outs[b].ar},
                    {"gva", outs[b].gva},
                    {"z", outs[b].z}});
  j["batch"] = std::move(rows);
  std::ofstream out(run_dir_ / ("nan_dump_step_" + std::to_string(step) + ".json"), std::ios::trunc);
  out << j.dump(2) << '\n';
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  num::Container c;
  c.meta["kind"] = "train_state";
  c.meta["config"] = cfg_.to_json();
  c.meta["step"] = opt_.steps_taken();
  nlohmann::json counters = nlohmann::json::object();
  for (const auto& [k, v] : rng_.counters()) counters[k] = v;
  c.meta["rng"] = counters;
  for (const auto& [name, t] : params_) c.add(name, t);
  opt_.save_state(c);
  c.save(path);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  num::Container c = num::Container::load(path);
  if (c.meta.value("kind", "") != "train_state")
    throw IntegrityError(path.string() + " is not a trainer checkpoint");
  if (c.meta.at("config") != cfg_.to_json())
    throw ConfigError("trainer: checkpoint config does not match this run's config");
  for (auto& [name, t] : params_) {
    const Tensor& s = c.at(name);
    if (s.numel() != t.numel()) throw IntegrityError("trainer: size mismatch for '" + name + "'");
    auto dst = t.mutable_data();
    std::copy(s.data().begin(), s.data().end(), dst.begin());
    t.round_to_dtype();
  }
  const int64_t saved_step = c.meta.at("step").get<int64_t>();
  opt_ = num::AdamW(cfg_.optimizer);
  if (saved_step > 0) opt_.load_state(c, params_);
  rng_ = num::Rng(cfg_.seed);
  for (const auto& [k, v] : c.meta.at("rng").items()) rng_.set_counter(k, v.get<uint64_t>());
  trim_metrics(saved_step);
}

void Trainer::export_model(const std::filesystem::path& path) const { model_.save(path); }

double Trainer::held_out_mean_cosine() const {
  if (!align_) throw ConfigError("trainer: no alignment mechanism, nothing to report");
  if (held_.empty()) throw ConfigError("trainer: held_out_size is 0");
  num::Params snap;
  for (const auto& [k, t] : params_) snap.emplace(k, t.detach());
  std::vector<double> vals(held_.size(), 0.0);
  parallel_for(static_cast<int>(held_.size()), cfg_.threads, [&](int i) {
    const Item& it = held_[static_cast<size_t>(i)];
    const ar::TokenSequence seq = item_sequence(it, false);
    ar::ForwardOutput fwd = model_.forward(seq, snap);
    const std::vector<int64_t> pos = align::select_alignment_positions(seq, cfg_.alignment.mechanism);
    Tensor f_gf = Tensor::from_data({1, static_cast<int64_t>(it.f_gf.size())}, it.f_gf, cfg_.model.dtype);
    vals[static_cast<size_t>(i)] = align::mean_alignment_cosine(fwd, pos, f_gf, cfg_.alignment, snap);
  });
  double acc = 0.0;
  for (double v : vals) acc += v;
  return acc / static_cast<double>(vals.size());
}

}  // namespace arra::train
