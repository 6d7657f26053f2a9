// Pipeline orchestration for the shape-world laboratory. Every stage writes
// into a flat workspace, content-addressed by the fingerprint of the config
// that produced it, so reruns and ablation cells reuse finished artifacts.
//
//   workspace/data/<fp>/       rendered PNG corpus + manifest.jsonl
//   workspace/tokenizer/<fp>/  vq.bin
//   workspace/encoder/<fp>/    encoder.bin
//   workspace/lm/<fp>/         caption-pretrained model.bin
//   workspace/runs/<fp>/       metrics.jsonl, checkpoint, model.bin, eval.json
//   workspace/samples/<fp>/    PNGs + JSON sidecars
//   workspace/ablate/<fp>/     report.csv / report.json

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "arra/alignment.hpp"
#include "arra/armodel.hpp"
#include "arra/corpus.hpp"
#include "arra/error.hpp"
#include "arra/foundation.hpp"
#include "arra/image_io.hpp"
#include "arra/metrics.hpp"
#include "arra/sampler.hpp"
#include "arra/tokenizers.hpp"
#include "arra/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace arra;

namespace {

// ---------------------------------------------------------------- config ----

json default_experiment() {
  train::TrainConfig tc;

  train::TrainConfig lm;
  lm.model.mode_tag = "text_only";
  lm.alignment.mechanism = ar::Mechanism::none;
  lm.steps = 400;
  lm.cond_dropout_p = 0.0;
  lm.dataset_size = 2048;
  lm.held_out_size = 0;
  lm.seed = 1;

  tok::VqConfig vc;
  found::FoundationConfig fc;
  fc.max_text = 24;  // room for three-object captions (21 ids)

  num::AdamWConfig stage_opt;
  stage_opt.lr = 1e-3;
  stage_opt.warmup_steps = 20;

  samp::SampleConfig sc;

  return {{"data", {{"count", 64}, {"seed", 0}}},
          {"vq",
           {{"config", vc.to_json()},
            {"optimizer", stage_opt.to_json()},
            {"steps", 800},
            {"batch_size", 16},
            {"images", 512},
            {"seed", 11}}},
          {"encoder",
           {{"config", fc.to_json()},
            {"optimizer", stage_opt.to_json()},
            {"steps", 600},
            {"batch_size", 16},
            {"samples", 512},
            {"seed", 12}}},
          {"text_lm", lm.to_json()},
          {"train", tc.to_json()},
          {"adapt_from", ""},
          {"sample", {{"config", sc.to_json()}, {"captions", json::array({"a red square at center"})}, {"seed", 0}}},
          {"eval", {{"config", sc.to_json()}, {"seed", 1}, {"limit", 0}}}};
}

// overrides may only refine keys that exist in the defaults, so typos fail
// loudly instead of silently training the wrong thing
void deep_merge(json& base, const json& overlay, const std::string& at) {
  if (!overlay.is_object() || !base.is_object()) {
    base = overlay;
    return;
  }
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    const std::string here = at.empty() ? it.key() : at + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + here + "'");
    deep_merge(base[it.key()], it.value(), here);
  }
}

json& resolve_path(json& root, const std::string& dotted) {
  json* node = &root;
  size_t start = 0;
  while (true) {
    const size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(key))
      throw ConfigError("config path '" + dotted + "' does not resolve to a field");
    node = &(*node)[key];
    if (dot == std::string::npos) return *node;
    start = dot + 1;
  }
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

struct Experiment {
  json j;  // fully merged config
  fs::path ws;

  train::TrainConfig train_cfg;
  train::TrainConfig lm_cfg;
  tok::VqConfig vq_cfg;
  found::FoundationConfig enc_cfg;

  json stage_json(const char* stage) const {
    return {{"stage", stage}, {"spec", j.at(stage)}, {"corpus", j.at("train").at("corpus")}};
  }
  json eval_encoder_json() const {
    json spec = j.at("encoder");
    spec["config"]["encoder_kind"] = found::to_string(found::EncoderKind::cross_modal);
    return {{"stage", "encoder"}, {"spec", spec}, {"corpus", j.at("train").at("corpus")}};
  }

  fs::path data_dir() const { return ws / "data" / train::config_fingerprint(stage_json("data")); }
  fs::path vq_dir() const { return ws / "tokenizer" / train::config_fingerprint(stage_json("vq")); }
  fs::path enc_dir() const { return ws / "encoder" / train::config_fingerprint(stage_json("encoder")); }
  fs::path eval_enc_dir() const { return ws / "encoder" / train::config_fingerprint(eval_encoder_json()); }
  fs::path lm_dir() const { return ws / "lm" / train::config_fingerprint(lm_cfg.to_json()); }
  fs::path run_dir() const { return ws / "runs" / train::config_fingerprint(train_cfg.to_json()); }
};

Experiment make_experiment(json merged, fs::path ws) {
  // the caption LM must share the transformer spine it hands to the t2i model
  for (const char* key : {"L", "h_model", "heads", "mlp_mult", "vocab", "max_len", "dtype"})
    merged["text_lm"]["model"][key] = merged["train"]["model"][key];

  Experiment e;
  e.j = std::move(merged);
  e.ws = std::move(ws);
  e.train_cfg = train::TrainConfig::from_json(e.j.at("train"));
  e.lm_cfg = train::TrainConfig::from_json(e.j.at("text_lm"));
  e.vq_cfg = tok::VqConfig::from_json(e.j.at("vq").at("config"));
  e.enc_cfg = found::FoundationConfig::from_json(e.j.at("encoder").at("config"));
  samp::SampleConfig::from_json(e.j.at("sample").at("config")).validate(e.vq_cfg.codebook_size);
  samp::SampleConfig::from_json(e.j.at("eval").at("config")).validate(e.vq_cfg.codebook_size);

  if (e.train_cfg.model.mode_tag == "t2i") {
    const int want = tok::TextVocab::build().size() + e.vq_cfg.codebook_size;
    if (e.train_cfg.model.vocab != want)
      throw ConfigError("train.model.vocab is " + std::to_string(e.train_cfg.model.vocab) + " but text + codebook = " +
                        std::to_string(want));
  }
  return e;
}

Experiment load_experiment(const std::string& config_path, const std::string& workspace, int64_t seed_override,
                           bool deterministic) {
  json merged = default_experiment();
  if (!config_path.empty()) deep_merge(merged, read_json_file(config_path), "");
  if (seed_override >= 0) merged["train"]["seed"] = static_cast<uint64_t>(seed_override);
  if (deterministic) {
    merged["train"]["threads"] = 1;
    merged["text_lm"]["threads"] = 1;
  }
  return make_experiment(std::move(merged), fs::path(workspace));
}

// ------------------------------------------------------------- utilities ----

fs::path require_artifact(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p))
    throw DependencyError("missing artifact " + p.string() + "; produce it with `" + producer + "`");
  return p;
}

bool stage_done(const fs::path& dir) { return fs::exists(dir / "manifest.json"); }

void write_stage_manifest(const fs::path& dir, const json& cfg, std::vector<train::MetricRecord> records,
                          const std::string& artifact) {
  train::RunManifest m;
  m.config = cfg;
  m.content_hash = train::config_fingerprint(cfg);
  m.records = std::move(records);
  m.checkpoint = artifact;
  m.save(dir / "manifest.json");
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<corpus::Sample> scene_batch(const corpus::CorpusConfig& cc, uint64_t seed0, int n) {
  std::vector<corpus::Sample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(corpus::generate_scene(seed0 + static_cast<uint64_t>(i), cc));
  return out;
}

// --------------------------------------------------------------- stages -----

fs::path cmd_gen_data(const Experiment& e) {
  const fs::path dir = e.data_dir();
  if (stage_done(dir)) {
    std::cout << "[gen-data] reusing " << dir << "\n";
    return dir;
  }
  fs::create_directories(dir);
  const auto& spec = e.j.at("data");
  const int count = spec.at("count").get<int>();
  const auto seed = spec.at("seed").get<uint64_t>();
  std::ofstream manifest(dir / "manifest.jsonl");
  for (int i = 0; i < count; ++i) {
    const corpus::Sample s = corpus::generate_scene(seed + static_cast<uint64_t>(i), e.train_cfg.corpus);
    char name[32];
    std::snprintf(name, sizeof name, "img_%04d.png", i);
    corpus::write_png(dir / name, s.image);
    manifest << json{{"file", name}, {"caption", s.caption}, {"category_id", s.category_id}}.dump() << '\n';
  }
  write_stage_manifest(dir, e.stage_json("data"), {}, "manifest.jsonl");
  std::cout << "[gen-data] wrote " << count << " samples to " << dir << "\n";
  return dir;
}

fs::path cmd_train_tokenizer(const Experiment& e) {
  const fs::path dir = e.vq_dir();
  if (stage_done(dir)) {
    std::cout << "[train-tokenizer] reusing " << dir << "\n";
    return dir;
  }
  fs::create_directories(dir);
  const auto& spec = e.j.at("vq");
  const auto seed = spec.at("seed").get<uint64_t>();
  const int n_images = spec.at("images").get<int>();
  const int batch = spec.at("batch_size").get<int>();
  const auto steps = spec.at("steps").get<int64_t>();

  std::vector<num::Tensor> images;
  images.reserve(static_cast<size_t>(n_images));
  for (const corpus::Sample& s : scene_batch(e.train_cfg.corpus, seed, n_images)) images.push_back(s.image);

  num::Rng rng(seed);
  tok::VqTokenizer vq(e.vq_cfg, rng);
  tok::VqTrainer trainer(vq, num::AdamWConfig::from_json(spec.at("optimizer")), seed);
  std::vector<train::MetricRecord> records;
  for (int64_t step = 0; step < steps; ++step) {
    std::vector<num::Tensor> pick;
    pick.reserve(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b)
      pick.push_back(images[static_cast<size_t>(rng.uniform_int("vq/batch", n_images))]);
    const tok::VqStepLosses losses = trainer.step(pick);
    train::MetricRecord rec;
    rec.step = step + 1;
    rec.loss = losses.total;
    records.push_back(rec);
  }
  vq.save(dir / "vq.bin");
  write_stage_manifest(dir, e.stage_json("vq"), std::move(records), "vq.bin");
  std::cout << "[train-tokenizer] " << steps << " steps -> " << dir << "\n";
  return dir;
}

fs::path build_encoder(const Experiment& e, const json& stage_cfg, const fs::path& dir) {
  if (stage_done(dir)) {
    std::cout << "[train-encoder] reusing " << dir << "\n";
    return dir;
  }
  fs::create_directories(dir);
  const json& spec = stage_cfg.at("spec");
  const auto seed = spec.at("seed").get<uint64_t>();
  const int n_samples = spec.at("samples").get<int>();
  const int batch = spec.at("batch_size").get<int>();
  const auto steps = spec.at("steps").get<int64_t>();
  const found::FoundationConfig cfg = found::FoundationConfig::from_json(spec.at("config"));

  const std::vector<corpus::Sample> samples = scene_batch(e.train_cfg.corpus, seed, n_samples);
  num::Rng rng(seed);
  found::FoundationEncoder enc(cfg, rng);
  found::FoundationTrainer trainer(enc, num::AdamWConfig::from_json(spec.at("optimizer")), seed);
  std::vector<train::MetricRecord> records;
  for (int64_t step = 0; step < steps; ++step) {
    double loss = 0.0;
    if (cfg.kind == found::EncoderKind::cross_modal) {
      std::vector<corpus::Sample> pick;
      for (int b = 0; b < batch; ++b)
        pick.push_back(samples[static_cast<size_t>(rng.uniform_int("enc/batch", n_samples))]);
      loss = trainer.contrastive_step(pick);
    } else {
      std::vector<num::Tensor> pick;
      for (int b = 0; b < batch; ++b)
        pick.push_back(samples[static_cast<size_t>(rng.uniform_int("enc/batch", n_samples))].image);
      loss = trainer.recon_step(pick);
    }
    train::MetricRecord rec;
    rec.step = step + 1;
    rec.loss = loss;
    records.push_back(rec);
  }
  enc.save(dir / "encoder.bin");
  write_stage_manifest(dir, stage_cfg, std::move(records), "encoder.bin");
  std::cout << "[train-encoder] " << steps << " steps (" << found::to_string(cfg.kind) << ") -> " << dir << "\n";
  return dir;
}

fs::path cmd_train_encoder(const Experiment& e) {
  const fs::path dir = build_encoder(e, e.stage_json("encoder"), e.enc_dir());
  // evaluation always scores with a contrastive encoder, so a vision-only
  // alignment encoder gets a cross-modal twin
  if (e.enc_cfg.kind != found::EncoderKind::cross_modal) build_encoder(e, e.eval_encoder_json(), e.eval_enc_dir());
  return dir;
}

fs::path cmd_pretrain_lm(const Experiment& e) {
  const fs::path dir = e.lm_dir();
  if (stage_done(dir)) {
    std::cout << "[pretrain-lm] reusing " << dir << "\n";
    return dir;
  }
  fs::create_directories(dir);
  fs::remove(dir / "metrics.jsonl");
  train::Trainer t(e.lm_cfg, train::init_model(e.lm_cfg), std::nullopt, std::nullopt, dir);
  t.run();
  t.export_model(dir / "model.bin");
  std::cout << "[pretrain-lm] " << e.lm_cfg.steps << " steps -> " << dir << "\n";
  return dir;
}

fs::path cmd_train(const Experiment& e) {
  const fs::path dir = e.run_dir();
  if (stage_done(dir) && fs::exists(dir / "model.bin")) {
    std::cout << "[train] reusing " << dir << "\n";
    return dir;
  }
  fs::create_directories(dir);
  fs::remove(dir / "metrics.jsonl");
  const train::TrainConfig& cfg = e.train_cfg;
  const bool t2i = cfg.model.mode_tag == "t2i";
  const bool align = t2i && cfg.alignment.mechanism != ar::Mechanism::none;

  std::optional<tok::VqTokenizer> vq;
  if (t2i) vq = tok::VqTokenizer::load(require_artifact(e.vq_dir() / "vq.bin", "train-tokenizer"));
  std::optional<found::FoundationEncoder> enc;
  if (align) enc = found::FoundationEncoder::load(require_artifact(e.enc_dir() / "encoder.bin", "train-encoder"));

  train::InitPaths paths;
  if (cfg.regime == train::Regime::arra) paths.text_lm = require_artifact(e.lm_dir() / "model.bin", "pretrain-lm");
  if (cfg.regime == train::Regime::arra_adapt) {
    const std::string from = e.j.at("adapt_from").get<std::string>();
    if (from.empty()) throw ConfigError("regime arra_adapt needs adapt_from to point at a t2i model");
    paths.t2i_lm = require_artifact(fs::path(from).is_absolute() ? fs::path(from) : e.ws / from, "train");
  }

  train::Trainer t(cfg, train::init_model(cfg, paths), std::move(vq), std::move(enc), dir);
  t.run();
  t.export_model(dir / "model.bin");
  std::cout << "[train] " << cfg.steps << " steps -> " << dir << "\n";
  return dir;
}

fs::path cmd_sample(const Experiment& e) {
  const fs::path run = e.run_dir();
  const ar::ArModel model = ar::ArModel::load(require_artifact(run / "model.bin", "train"));
  const tok::VqTokenizer vq = tok::VqTokenizer::load(require_artifact(e.vq_dir() / "vq.bin", "train-tokenizer"));

  const auto& spec = e.j.at("sample");
  const auto seed = spec.at("seed").get<uint64_t>();
  const auto captions = spec.at("captions").get<std::vector<std::string>>();
  if (captions.empty()) throw ConfigError("sample.captions is empty");

  const fs::path dir = e.ws / "samples" / train::config_fingerprint(e.train_cfg.to_json());
  fs::create_directories(dir);
  for (size_t i = 0; i < captions.size(); ++i) {
    samp::SampleConfig sc = samp::SampleConfig::from_json(spec.at("config"));
    sc.seed = seed + i;
    std::vector<int> tokens;
    const num::Tensor img =
        samp::generate_image(model, vq, captions[i], sc, e.train_cfg.alignment.mechanism, &tokens);
    char name[32];
    std::snprintf(name, sizeof name, "img_%03zu", i);
    corpus::write_png(dir / (std::string(name) + ".png"), img);
    write_json_file(dir / (std::string(name) + ".json"),
                    {{"caption", captions[i]}, {"seed", sc.seed}, {"config", sc.to_json()}, {"tokens", tokens}});
  }
  write_stage_manifest(dir, {{"stage", "sample"}, {"spec", spec}, {"run", train::config_fingerprint(e.train_cfg.to_json())}},
                       {}, "");
  std::cout << "[sample] " << captions.size() << " images -> " << dir << "\n";
  return dir;
}

json cmd_eval(const Experiment& e) {
  const fs::path run = e.run_dir();
  if (fs::exists(run / "eval.json")) {
    std::cout << "[eval] reusing " << run / "eval.json" << "\n";
    return read_json_file(run / "eval.json");
  }
  const ar::ArModel model = ar::ArModel::load(require_artifact(run / "model.bin", "train"));
  const tok::VqTokenizer vq = tok::VqTokenizer::load(require_artifact(e.vq_dir() / "vq.bin", "train-tokenizer"));
  const found::FoundationEncoder enc =
      found::FoundationEncoder::load(require_artifact(e.eval_enc_dir() / "encoder.bin", "train-encoder"));

  const auto& spec = e.j.at("eval");
  const auto seed = spec.at("seed").get<uint64_t>();
  const int limit = spec.at("limit").get<int>();
  std::vector<uint64_t> scene_seeds = train::held_out_scene_seeds(e.train_cfg);
  if (limit > 0 && limit < static_cast<int>(scene_seeds.size())) scene_seeds.resize(static_cast<size_t>(limit));
  const int n = static_cast<int>(scene_seeds.size());
  if (n < 2) throw ConfigError("eval needs at least 2 held-out captions; raise train.held_out_size");

  std::vector<num::Tensor> generated(static_cast<size_t>(n)), real(static_cast<size_t>(n));
  std::vector<std::string> captions(static_cast<size_t>(n));
  parallel_for(n, e.train_cfg.threads, [&](int i) {
    const corpus::Sample s = corpus::generate_scene(scene_seeds[static_cast<size_t>(i)], e.train_cfg.corpus);
    samp::SampleConfig sc = samp::SampleConfig::from_json(spec.at("config"));
    sc.seed = seed + static_cast<uint64_t>(i);
    real[static_cast<size_t>(i)] = s.image;
    captions[static_cast<size_t>(i)] = s.caption;
    generated[static_cast<size_t>(i)] = samp::generate_image(model, vq, s.caption, sc, e.train_cfg.alignment.mechanism);
  });

  const double fd = metrics::frechet_distance(metrics::features_for(generated, enc, "generated"),
                                              metrics::features_for(real, enc, "corpus"));
  const double clip = metrics::clip_score(generated, captions, enc);
  double mssim = 0.0;
  for (int i = 0; i < n; ++i)
    mssim += metrics::ms_ssim(generated[static_cast<size_t>(i)], real[static_cast<size_t>(i)]);
  mssim /= n;
  const metrics::AttributeAccuracy acc = metrics::attribute_accuracy(generated, captions, e.train_cfg.corpus.palette);

  json report{{"fingerprint", train::config_fingerprint(e.train_cfg.to_json())},
              {"n", n},
              {"sample", spec.at("config")},
              {"metrics",
               {{"frechet", fd},
                {"clip_score", clip},
                {"ms_ssim", mssim},
                {"object_recall", acc.object_recall},
                {"position_accuracy", acc.position_accuracy},
                {"color_accuracy", acc.color_accuracy},
                {"exact_match", acc.exact_match}}}};
  write_json_file(run / "eval.json", report);
  std::cout << "[eval] n=" << n << " frechet=" << fd << " clip=" << clip << " ms_ssim=" << mssim
            << " exact_match=" << acc.exact_match << " -> " << run / "eval.json" << "\n";
  return report;
}

// --------------------------------------------------------------- ablate -----

struct GridRow {
  int cell = 0;
  uint64_t seed = 0;
  std::map<std::string, json> axis_values;
  json experiment;  // fully merged, patched
};

std::vector<GridRow> expand_grid(const json& grid, const std::string& workspace) {
  json base = default_experiment();
  if (grid.contains("base")) deep_merge(base, grid.at("base"), "base");

  struct Axis {
    std::string name;
    std::vector<std::map<std::string, json>> options;  // each option: path -> value
  };
  std::vector<Axis> axes;
  if (grid.contains("axes"))
    for (auto it = grid.at("axes").begin(); it != grid.at("axes").end(); ++it) {
      Axis axis;
      axis.name = it.key();
      if (!it.value().is_array() || it.value().empty())
        throw ConfigError("axis '" + it.key() + "' must be a non-empty array");
      for (const json& option : it.value()) {
        std::map<std::string, json> patch;
        if (option.is_object())
          for (auto po = option.begin(); po != option.end(); ++po) patch[po.key()] = po.value();
        else
          patch[axis.name] = option;
        axis.options.push_back(std::move(patch));
      }
      axes.push_back(std::move(axis));
    }
  std::vector<uint64_t> seeds = grid.value("seeds", std::vector<uint64_t>{0});
  if (seeds.empty()) throw ConfigError("seeds must be non-empty");

  // every axis path must resolve before anything trains
  for (const Axis& axis : axes)
    for (const auto& option : axis.options)
      for (const auto& [path, value] : option) (void)resolve_path(base, path);

  size_t cells = 1;
  for (const Axis& axis : axes) cells *= axis.options.size();
  std::cout << "[ablate] grid: " << cells << " cells x " << seeds.size() << " seeds = " << cells * seeds.size()
            << " rows\n";

  std::vector<GridRow> rows;
  for (size_t c = 0; c < cells; ++c) {
    json patched = base;
    std::map<std::string, json> values;
    size_t rest = c;
    for (const Axis& axis : axes) {
      const auto& option = axis.options[rest % axis.options.size()];
      rest /= axis.options.size();
      json shown;
      for (const auto& [path, value] : option) {
        resolve_path(patched, path) = value;
        shown[path] = value;
      }
      values[axis.name] = option.size() == 1 ? option.begin()->second : shown;
    }
    for (uint64_t seed : seeds) {
      GridRow row;
      row.cell = static_cast<int>(c);
      row.seed = seed;
      row.axis_values = values;
      row.experiment = patched;
      row.experiment["train"]["seed"] = seed;
      // validate now so a bad cell aborts before any training starts
      (void)make_experiment(row.experiment, fs::path(workspace));
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void cmd_ablate(const std::string& grid_path, const std::string& workspace, bool deterministic, int parallel) {
  if (grid_path.empty()) throw ConfigError("ablate needs --config pointing at a grid file");
  const json grid = read_json_file(grid_path);
  std::vector<GridRow> rows = expand_grid(grid, workspace);
  if (deterministic)
    for (GridRow& row : rows) {
      row.experiment["train"]["threads"] = 1;
      row.experiment["text_lm"]["threads"] = 1;
    }

  // build shared upstream artifacts once, keyed by content hash, so parallel
  // cells never race on them
  std::map<std::string, const GridRow*> vq_builds, enc_builds, lm_builds;
  for (const GridRow& row : rows) {
    Experiment e = make_experiment(row.experiment, fs::path(workspace));
    vq_builds.emplace(e.vq_dir().string(), &row);
    enc_builds.emplace(e.enc_dir().string(), &row);
    if (e.train_cfg.regime == train::Regime::arra) lm_builds.emplace(e.lm_dir().string(), &row);
  }
  for (const auto& [dir, row] : vq_builds) cmd_train_tokenizer(make_experiment(row->experiment, workspace));
  for (const auto& [dir, row] : enc_builds) cmd_train_encoder(make_experiment(row->experiment, workspace));
  for (const auto& [dir, row] : lm_builds) cmd_pretrain_lm(make_experiment(row->experiment, workspace));

  std::vector<json> results(rows.size());
  parallel_for(static_cast<int>(rows.size()), parallel, [&](int i) {
    const GridRow& row = rows[static_cast<size_t>(i)];
    Experiment e = make_experiment(row.experiment, fs::path(workspace));
    cmd_train(e);
    const json eval = cmd_eval(e);
    json r{{"cell", row.cell},
           {"seed", row.seed},
           {"fingerprint", train::config_fingerprint(e.train_cfg.to_json())},
           {"metrics", eval.at("metrics")}};
    const auto& records = train::RunManifest::load(e.run_dir() / "manifest.json").records;
    r["final_loss"] = records.empty() ? 0.0 : records.back().loss;
    r["final_mean_cos"] = records.empty() ? 0.0 : records.back().mean_cos;
    for (const auto& [axis, value] : row.axis_values) r["axes"][axis] = value;
    results[static_cast<size_t>(i)] = std::move(r);
  });

  const fs::path out = fs::path(workspace) / "ablate" / train::config_fingerprint(grid);
  fs::create_directories(out);
  write_json_file(out / "report.json", {{"grid", grid}, {"rows", results}});

  std::vector<std::string> axis_names;
  for (const auto& [axis, value] : rows.front().axis_values) axis_names.push_back(axis);
  const std::vector<std::string> metric_names{"frechet",        "clip_score",     "ms_ssim",    "object_recall",
                                              "position_accuracy", "color_accuracy", "exact_match"};
  std::ofstream csv(out / "report.csv");
  csv << "cell,seed,fingerprint";
  for (const auto& a : axis_names) csv << ',' << csv_cell(a);
  for (const auto& m : metric_names) csv << ',' << m;
  csv << ",final_loss,final_mean_cos\n";
  for (const json& r : results) {
    csv << r.at("cell").get<int>() << ',' << r.at("seed").get<uint64_t>() << ','
        << r.at("fingerprint").get<std::string>();
    for (const auto& a : axis_names) {
      const json& v = r.at("axes").at(a);
      csv << ',' << csv_cell(v.is_string() ? v.get<std::string>() : v.dump());
    }
    for (const auto& m : metric_names) csv << ',' << r.at("metrics").at(m).get<double>();
    csv << ',' << r.at("final_loss").get<double>() << ',' << r.at("final_mean_cos").get<double>() << '\n';
  }
  std::cout << "[ablate] " << results.size() << " rows -> " << out << "\n";
}

// --------------------------------------------------------------- report -----

void cmd_report(const fs::path& dir) {
  struct Row {
    std::string group, run_fp;
    uint64_t seed = 0;
    train::RunManifest manifest;
    json eval;  // null when the run was never evaluated
  };
  std::vector<Row> all;
  if (fs::is_directory(dir))
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_directory() || !fs::exists(entry.path() / "manifest.json")) continue;
      Row row;
      row.manifest = train::RunManifest::load(entry.path() / "manifest.json");
      row.run_fp = row.manifest.content_hash;
      json sans_seed = row.manifest.config;
      row.seed = sans_seed.value("seed", uint64_t{0});
      sans_seed.erase("seed");
      row.group = train::config_fingerprint(sans_seed);
      if (fs::exists(entry.path() / "eval.json")) row.eval = read_json_file(entry.path() / "eval.json");
      all.push_back(std::move(row));
    }
  if (all.empty()) throw DependencyError("no run manifests under " + dir.string() + "; produce them with `train`");

  std::map<std::string, std::vector<const Row*>> groups;
  for (const Row& row : all) groups[row.group].push_back(&row);

  auto stats = [](const std::vector<double>& v) -> std::pair<double, double> {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {mean, v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0};
  };

  const std::vector<std::string> metric_names{"frechet",        "clip_score",     "ms_ssim",    "object_recall",
                                              "position_accuracy", "color_accuracy", "exact_match"};
  // lower is better only for these
  auto lower_better = [](const std::string& m) { return m == "frechet" || m == "final_loss"; };

  json summary = json::array();
  fs::create_directories(dir / "loss_curves");
  for (const auto& [group, members] : groups) {
    json g{{"group", group}, {"seeds", json::array()}, {"runs", json::array()}};
    std::map<std::string, std::vector<double>> series;
    for (const Row* row : members) {
      g["seeds"].push_back(row->seed);
      g["runs"].push_back(row->run_fp);
      if (!row->manifest.records.empty()) series["final_loss"].push_back(row->manifest.records.back().loss);
      if (!row->eval.is_null())
        for (const auto& m : metric_names) series[m].push_back(row->eval.at("metrics").at(m).get<double>());

      std::ofstream curve(dir / "loss_curves" / (row->run_fp + "_seed" + std::to_string(row->seed) + ".csv"));
      curve << "step,loss,ar,gva,z,mean_cos\n";
      for (const train::MetricRecord& rec : row->manifest.records)
        curve << rec.step << ',' << rec.loss << ',' << rec.ar << ',' << rec.gva << ',' << rec.z << ','
              << rec.mean_cos << '\n';
    }
    g["config"] = members.front()->manifest.config;
    g["config"].erase("seed");
    for (const auto& [name, values] : series) {
      const auto [mean, sd] = stats(values);
      g["metrics"][name] = {{"mean", mean}, {"stddev", sd}, {"n", values.size()}};
    }
    summary.push_back(std::move(g));
  }

  json best;
  for (const std::string& m : metric_names) {
    std::string best_group;
    double best_val = 0.0;
    for (const json& g : summary) {
      if (!g.contains("metrics") || !g.at("metrics").contains(m)) continue;
      const double v = g.at("metrics").at(m).at("mean").get<double>();
      if (best_group.empty() || (lower_better(m) ? v < best_val : v > best_val)) {
        best_group = g.at("group").get<std::string>();
        best_val = v;
      }
    }
    if (!best_group.empty()) best[m] = {{"group", best_group}, {"mean", best_val}};
  }

  write_json_file(dir / "summary.json", {{"groups", summary}, {"best", best}});
  std::ofstream csv(dir / "summary.csv");
  csv << "group,n_seeds";
  for (const auto& m : metric_names) csv << ',' << m << "_mean," << m << "_stddev";
  csv << ",final_loss_mean,final_loss_stddev\n";
  for (const json& g : summary) {
    csv << g.at("group").get<std::string>() << ',' << g.at("seeds").size();
    auto cell = [&](const std::string& name) {
      if (g.contains("metrics") && g.at("metrics").contains(name)) {
        csv << ',' << g.at("metrics").at(name).at("mean").get<double>() << ','
            << g.at("metrics").at(name).at("stddev").get<double>();
      } else {
        csv << ",,";
      }
    };
    for (const auto& m : metric_names) cell(m);
    cell("final_loss");
    csv << '\n';
  }
  std::cout << "[report] " << groups.size() << " config groups, " << all.size() << " runs -> " << dir / "summary.json"
            << "\n";
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"ARRA shape-world laboratory"};
  app.require_subcommand(1);

  std::string config_path, workspace = "workspace";
  int64_t seed_override = -1;
  bool deterministic = false;
  int parallel = 1;
  std::string report_dir;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON (defaults merged underneath)");
    sub->add_option("--workspace", workspace, "artifact directory")->capture_default_str();
    sub->add_option("--seed", seed_override, "override train.seed");
    sub->add_flag("--deterministic", deterministic, "force single-threaded training");
    return sub;
  };

  auto* gen_data = add_common(app.add_subcommand("gen-data", "render a PNG corpus with captions"));
  auto* train_tok = add_common(app.add_subcommand("train-tokenizer", "fit the VQ tokenizer"));
  auto* train_enc = add_common(app.add_subcommand("train-encoder", "pretrain the foundation encoder"));
  auto* pretrain = add_common(app.add_subcommand("pretrain-lm", "caption-only language model pretraining"));
  auto* train_cmd = add_common(app.add_subcommand("train", "train the t2i model"));
  auto* sample = add_common(app.add_subcommand("sample", "generate images for captions"));
  auto* eval = add_common(app.add_subcommand("eval", "score generations on the held-out captions"));
  auto* ablate = add_common(app.add_subcommand("ablate", "run an ablation grid"));
  ablate->add_option("--parallel", parallel, "concurrent grid cells")->capture_default_str();
  auto* report = app.add_subcommand("report", "aggregate run manifests into a summary");
  report->add_option("--workspace", workspace, "artifact directory")->capture_default_str();
  report->add_option("--dir", report_dir, "manifest directory (defaults to <workspace>/runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  auto experiment = [&] { return load_experiment(config_path, workspace, seed_override, deterministic); };
  if (gen_data->parsed()) cmd_gen_data(experiment());
  if (train_tok->parsed()) cmd_train_tokenizer(experiment());
  if (train_enc->parsed()) cmd_train_encoder(experiment());
  if (pretrain->parsed()) cmd_pretrain_lm(experiment());
  if (train_cmd->parsed()) cmd_train(experiment());
  if (sample->parsed()) cmd_sample(experiment());
  if (eval->parsed()) cmd_eval(experiment());
  if (ablate->parsed()) cmd_ablate(config_path, workspace, deterministic, parallel);
  if (report->parsed()) cmd_report(report_dir.empty() ? fs::path(workspace) / "runs" : fs::path(report_dir));
  return 0;
}

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const IntegrityError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
