#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "arra/alignment.hpp"
#include "arra/armodel.hpp"
#include "arra/corpus.hpp"
#include "arra/foundation.hpp"
#include "arra/optim.hpp"
#include "arra/rng.hpp"
#include "arra/tokenizers.hpp"

namespace arra::train {

inline constexpr const char* kCodeVersion = "arra-0.1.0";

enum class Regime { arra_base, arra, arra_adapt, baseline };
std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct TrainConfig {
  Regime regime = Regime::arra_base;
  align::AlignmentConfig alignment;
  ar::ArConfig model;
  num::AdamWConfig optimizer;
  corpus::CorpusConfig corpus;
  int batch_size = 32;
  int64_t steps = 2000;
  double cond_dropout_p = 0.1;
  uint64_t seed = 0;
  int dataset_size = 4096;
  int held_out_size = 256;
  bool loss_on_text = false;
  int threads = 4;

  // baseline must carry mechanism none; mode_tag text_only (caption
  // pretraining) is restricted to regime arra_base without alignment
  void validate() const;
  nlohmann::json to_json() const;  // every field materialized
  static TrainConfig from_json(const nlohmann::json& j);
};

std::string config_fingerprint(const nlohmann::json& config);

// Scene seeds of the held-out split, derivable from the config alone (the
// evaluation stage regenerates the same captions without a Trainer).
std::vector<uint64_t> held_out_scene_seeds(const TrainConfig& config);

// Regime-specific model construction. arra loads a caption-pretrained
// text_only checkpoint and refreshes the image-token embedding rows from the
// seed; arra_adapt loads a t2i checkpoint wholesale; arra_base and baseline
// initialize from the seed alone.
struct InitPaths {
  std::filesystem::path text_lm;  // regime arra
  std::filesystem::path t2i_lm;   // regime arra_adapt
};
ar::ArModel init_model(const TrainConfig& config, const InitPaths& paths = {});

struct MetricRecord {
  int64_t step = 0;
  double loss = 0.0;
  double ar = 0.0;
  double gva = 0.0;
  double z = 0.0;
  double mean_cos = 0.0;  // 0 when no alignment mechanism is active
  double wall_ms = 0.0;
  nlohmann::json to_json() const;
  static MetricRecord from_json(const nlohmann::json& j);
};

struct RunManifest {
  nlohmann::json config;
  std::string content_hash;
  std::vector<MetricRecord> records;
  std::string checkpoint;  // final checkpoint, relative to the run directory
  void save(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

// One optimization run. Owns the model and the projection head phi, samples
// batches from a pre-tokenized in-memory dataset, and emits one metric record
// per step (metrics.jsonl under run_dir; an empty run_dir disables file
// output). The VQ tokenizer and foundation encoder are frozen throughout.
// Per-sample gradients are reduced in index order, so results do not depend
// on the thread count.
class Trainer {
 public:
  Trainer(TrainConfig config, ar::ArModel model, std::optional<tok::VqTokenizer> vq,
          std::optional<found::FoundationEncoder> encoder, std::filesystem::path run_dir = {});

  const TrainConfig& config() const { return cfg_; }
  const ar::ArModel& model() const { return model_; }
  num::Params& params() { return params_; }  // theta + phi, storage shared with the model
  const RunManifest& manifest() const { return manifest_; }
  int64_t step() const { return opt_.steps_taken(); }

  // One AdamW update; NumericalError on a non-finite loss after dumping the
  // offending batch to run_dir.
  MetricRecord train_step();
  void run();  // steps to config.steps, then writes manifest + final checkpoint

  void save_checkpoint(const std::filesystem::path& path) const;
  // Exact resume: weights, optimizer moments, RNG counters, metric history.
  void load_checkpoint(const std::filesystem::path& path);
  void export_model(const std::filesystem::path& path) const;

  // Mean of the alignment-cosine diagnostic over the held-out split.
  double held_out_mean_cosine() const;

 private:
  struct Item {
    std::vector<int> text_ids;
    std::vector<int> image_ids;
    std::vector<double> f_gf;
    std::string caption;
  };
  struct SampleOut {
    double loss = 0.0, ar = 0.0, gva = 0.0, z = 0.0, cos = 0.0;
    std::map<std::string, std::vector<double>> grads;
  };

  Item make_item(uint64_t scene_seed) const;
  ar::TokenSequence item_sequence(const Item& it, bool dropped) const;
  SampleOut sample_pass(const Item& it, bool dropped) const;
  void append_metrics(const MetricRecord& rec);
  void trim_metrics(int64_t upto);
  void dump_batch(int64_t step, const std::vector<int64_t>& idx, const std::vector<char>& dropped,
                  const std::vector<SampleOut>& outs) const;

  TrainConfig cfg_;
  ar::ArModel model_;
  std::optional<tok::VqTokenizer> vq_;
  std::optional<found::FoundationEncoder> enc_;
  std::filesystem::path run_dir_;
  tok::TextVocab text_vocab_ = tok::TextVocab::build();
  tok::CombinedVocab vocab_;
  int grid_len_ = 0;
  int d_out_ = 0;
  bool t2i_ = false;
  bool align_ = false;
  num::Params params_;
  num::AdamW opt_;
  num::Rng rng_;
  std::vector<Item> items_, held_;
  RunManifest manifest_;
  std::ofstream metrics_out_;
};

}  // namespace arra::train
