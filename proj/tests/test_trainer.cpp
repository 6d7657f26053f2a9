#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <vector>

#include "arra/error.hpp"
#include "arra/tokenizers.hpp"
#include "arra/trainer.hpp"

using namespace arra;
namespace fs = std::filesystem;

namespace {

const tok::VqTokenizer& shared_vq() {
  static tok::VqTokenizer vq = [] {
    num::Rng rng(11);
    tok::VqConfig vc;
    vc.codebook_size = 32;
    vc.code_dim = 8;
    vc.hidden = 16;
    return tok::VqTokenizer(vc, rng);
  }();
  return vq;
}

const found::FoundationEncoder& shared_enc() {
  static found::FoundationEncoder enc = [] {
    num::Rng rng(12);
    found::FoundationConfig fc;
    fc.dim = 16;
    fc.heads = 2;
    fc.layers = 1;
    fc.max_text = 24;
    return found::FoundationEncoder(fc, rng);
  }();
  return enc;
}

train::TrainConfig tiny_config(uint64_t seed) {
  train::TrainConfig c;
  c.model.layers = 2;
  c.model.h_model = 32;
  c.model.heads = 2;
  c.model.vocab = 25 + 32;
  c.seed = seed;
  c.batch_size = 4;
  c.steps = 10;
  c.dataset_size = 24;
  c.held_out_size = 6;
  c.threads = 2;
  c.optimizer.lr = 1e-3;
  return c;
}

train::Trainer make_trainer(const train::TrainConfig& c, fs::path dir = {}) {
  const bool needs_vq = c.model.mode_tag == "t2i";
  const bool needs_enc = needs_vq && c.alignment.mechanism != ar::Mechanism::none;
  return train::Trainer(c, train::init_model(c),
                        needs_vq ? std::optional(shared_vq()) : std::nullopt,
                        needs_enc ? std::optional(shared_enc()) : std::nullopt, std::move(dir));
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "arra_trainer_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_data(const num::Tensor& a, const num::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin());
}

std::map<std::string, std::vector<double>> snapshot(const num::Params& p) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : p) out.emplace(name, std::vector<double>(t.data().begin(), t.data().end()));
  return out;
}

}  // namespace

TEST_CASE("train config validation and serialization") {
  train::TrainConfig c;
  CHECK_NOTHROW(c.validate());
  nlohmann::json j = c.to_json();
  for (const char* key : {"regime", "alignment", "model", "optimizer", "corpus", "batch_size", "steps",
                          "cond_dropout_p", "seed", "dataset_size", "held_out_size", "loss_on_text", "threads"})
    CHECK(j.contains(key));
  CHECK(train::TrainConfig::from_json(j).to_json() == j);

  auto bad = c;
  bad.optimizer.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.cond_dropout_p = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.cond_dropout_p = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.regime = train::Regime::baseline;  // mechanism still hybnext
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.alignment.mechanism = ar::Mechanism::none;
  CHECK_NOTHROW(bad.validate());
  bad = c;
  bad.model.mode_tag = "text_only";
  bad.regime = train::Regime::arra;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.regime = train::Regime::arra_base;
  CHECK_THROWS_AS(bad.validate(), ConfigError);  // alignment still active
  bad.alignment.mechanism = ar::Mechanism::none;
  CHECK_NOTHROW(bad.validate());
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.threads = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  for (auto r : {train::Regime::arra_base, train::Regime::arra, train::Regime::arra_adapt, train::Regime::baseline})
    CHECK(train::regime_from_string(train::to_string(r)) == r);
  CHECK_THROWS_AS(train::regime_from_string("sft"), ConfigError);
  CHECK(train::config_fingerprint(j).size() == 16);
}

TEST_CASE("init_model regimes") {
  const fs::path dir = fresh_dir("init_model");
  auto cfg = tiny_config(7);

  ar::ArModel a = train::init_model(cfg);
  ar::ArModel b = train::init_model(cfg);
  for (const auto& [name, t] : a.params()) CHECK(same_data(t, b.params().at(name)));

  // caption-pretrained source for the arra regime
  ar::ArConfig tcfg = cfg.model;
  tcfg.mode_tag = "text_only";
  num::Rng r(99);
  ar::ArModel text_lm(tcfg, r);
  text_lm.save(dir / "text.bin");

  auto arra_cfg = cfg;
  arra_cfg.regime = train::Regime::arra;
  train::InitPaths paths;
  paths.text_lm = dir / "text.bin";
  ar::ArModel m = train::init_model(arra_cfg, paths);
  CHECK(m.config().mode_tag == "t2i");

  const auto& emb = m.params().at("emb");
  const auto& src_emb = text_lm.params().at("emb");
  const auto& fresh_emb = a.params().at("emb");
  const int64_t h = emb.dim(1);
  const int64_t text_rows = 25;
  bool text_match = true, image_match_fresh = true, image_match_src = true;
  for (int64_t i = 0; i < emb.numel(); ++i) {
    const bool text_part = i < text_rows * h;
    if (text_part && emb.data()[i] != src_emb.data()[i]) text_match = false;
    if (!text_part && emb.data()[i] != fresh_emb.data()[i]) image_match_fresh = false;
    if (!text_part && emb.data()[i] != src_emb.data()[i]) image_match_src = false;
  }
  CHECK(text_match);
  CHECK(image_match_fresh);   // image rows come from the seed, not the checkpoint
  CHECK_FALSE(image_match_src);
  CHECK(same_data(m.params().at("blk0/attn/wq"), text_lm.params().at("blk0/attn/wq")));
  CHECK(same_data(m.params().at("head/w"), text_lm.params().at("head/w")));

  // wrong tags
  a.save(dir / "t2i.bin");
  auto bad_paths = paths;
  bad_paths.text_lm = dir / "t2i.bin";
  CHECK_THROWS_WITH_AS(train::init_model(arra_cfg, bad_paths), doctest::Contains("expected mode_tag 'text_only'"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(train::init_model(arra_cfg, bad_paths), doctest::Contains("found 't2i'"), ConfigError);

  auto adapt_cfg = cfg;
  adapt_cfg.regime = train::Regime::arra_adapt;
  train::InitPaths adapt_paths;
  adapt_paths.t2i_lm = dir / "t2i.bin";
  ar::ArModel ad = train::init_model(adapt_cfg, adapt_paths);
  for (const auto& [name, t] : ad.params()) CHECK(same_data(t, a.params().at(name)));  // no fresh rows

  adapt_paths.t2i_lm = dir / "text.bin";
  CHECK_THROWS_WITH_AS(train::init_model(adapt_cfg, adapt_paths), doctest::Contains("expected mode_tag 't2i'"),
                       ConfigError);
  CHECK_THROWS_AS(train::init_model(arra_cfg, train::InitPaths{}), ConfigError);

  // architecture mismatch against the checkpoint
  auto wide = arra_cfg;
  wide.model.h_model = 64;
  CHECK_THROWS_AS(train::init_model(wide, paths), ConfigError);
}

TEST_CASE("lambda zero matches the baseline weight trajectory") {
  auto ca = tiny_config(13);
  ca.alignment.lambda = 0.0;
  ca.steps = 20;
  auto cb = tiny_config(13);
  cb.regime = train::Regime::baseline;
  cb.alignment.mechanism = ar::Mechanism::none;
  cb.steps = 20;

  train::Trainer ta = make_trainer(ca);
  train::Trainer tb = make_trainer(cb);
  for (int s = 0; s < 20; ++s) {
    train::MetricRecord ra = ta.train_step();
    train::MetricRecord rb = tb.train_step();
    CHECK(ra.loss == rb.loss);
    CHECK(ra.ar == rb.ar);
    CHECK(ra.z == rb.z);
  }
  double max_diff = 0.0;
  for (const auto& [name, t] : tb.model().params()) {
    const num::Tensor& u = ta.model().params().at(name);
    REQUIRE(u.numel() == t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) max_diff = std::max(max_diff, std::abs(t.data()[i] - u.data()[i]));
  }
  CHECK(max_diff == 0.0);
  CHECK(ta.params().count("proj/w1") == 1);  // phi exists, just receives no signal
  CHECK(tb.params().count("proj/w1") == 0);
}

TEST_CASE("condition dropout wiring") {
  auto c0 = tiny_config(21);
  c0.cond_dropout_p = 0.0;
  c0.optimizer.weight_decay = 0.0;
  c0.steps = 6;
  train::Trainer t0 = make_trainer(c0);
  const auto before = snapshot(t0.params());
  for (int s = 0; s < 6; ++s) t0.train_step();
  const auto& emb = t0.params().at("emb");
  const int64_t h = emb.dim(1);
  auto row_equal = [&](const num::Tensor& e, int row) {
    const auto& init = before.at("emb");
    for (int64_t i = row * h; i < (row + 1) * h; ++i)
      if (e.data()[i] != init[static_cast<size_t>(i)]) return false;
    return true;
  };
  CHECK(row_equal(emb, tok::kPad));     // pads only ever appear in dropped spans
  CHECK(row_equal(emb, tok::kUncond));  // p=0: no <UNCOND> span ever built
  CHECK_FALSE(row_equal(emb, 6));       // "a" appears in every caption

  auto c1 = c0;
  c1.cond_dropout_p = 0.7;
  train::Trainer t1 = make_trainer(c1);
  for (int s = 0; s < 6; ++s) t1.train_step();
  CHECK_FALSE(row_equal(t1.params().at("emb"), tok::kUncond));
}

TEST_CASE("seed determinism across thread counts") {
  auto c = tiny_config(31);
  c.steps = 6;
  auto c4 = c;
  c4.threads = 4;
  train::Trainer a = make_trainer(c);
  train::Trainer b = make_trainer(c4);
  for (int s = 0; s < 6; ++s) {
    train::MetricRecord ra = a.train_step();
    train::MetricRecord rb = b.train_step();
    CHECK(ra.step == rb.step);
    CHECK(ra.loss == rb.loss);
    CHECK(ra.ar == rb.ar);
    CHECK(ra.gva == rb.gva);
    CHECK(ra.z == rb.z);
    CHECK(ra.mean_cos == rb.mean_cos);
  }
  for (const auto& [name, t] : a.params()) CHECK(same_data(t, b.params().at(name)));
  CHECK(a.held_out_mean_cosine() == b.held_out_mean_cosine());
}

TEST_CASE("mid-run resume reproduces the uninterrupted run") {
  auto c = tiny_config(41);
  c.steps = 10;
  const fs::path dir_a = fresh_dir("resume_a");
  const fs::path dir_b = fresh_dir("resume_b");

  train::Trainer a = make_trainer(c, dir_a);
  a.run();
  CHECK(a.step() == 10);
  CHECK(fs::exists(dir_a / "checkpoint_final.bin"));

  {
    train::Trainer b1 = make_trainer(c, dir_b);
    for (int s = 0; s < 5; ++s) b1.train_step();
    b1.save_checkpoint(dir_b / "mid.bin");
  }
  train::Trainer b2 = make_trainer(c, dir_b);
  b2.load_checkpoint(dir_b / "mid.bin");
  CHECK(b2.step() == 5);
  CHECK(b2.manifest().records.size() == 5);
  for (int s = 0; s < 5; ++s) b2.train_step();

  for (const auto& [name, t] : a.params()) CHECK(same_data(t, b2.params().at(name)));
  REQUIRE(b2.manifest().records.size() == 10);
  for (size_t i = 0; i < 10; ++i) {
    const train::MetricRecord& ra = a.manifest().records[i];
    const train::MetricRecord& rb = b2.manifest().records[i];
    CHECK(ra.step == rb.step);
    CHECK(ra.loss == rb.loss);
    CHECK(ra.ar == rb.ar);
    CHECK(ra.gva == rb.gva);
    CHECK(ra.z == rb.z);
    CHECK(ra.mean_cos == rb.mean_cos);
  }

  // manifest artifact round trip
  train::RunManifest m = train::RunManifest::load(dir_a / "manifest.json");
  CHECK(m.config == c.to_json());
  CHECK(m.content_hash == train::config_fingerprint(c.to_json()));
  CHECK(m.records.size() == 10);
  CHECK(m.checkpoint == "checkpoint_final.bin");
}

TEST_CASE("checkpoint round trip and corruption") {
  auto c = tiny_config(51);
  c.steps = 4;
  const fs::path dir = fresh_dir("ckpt");
  train::Trainer t = make_trainer(c);
  for (int s = 0; s < 4; ++s) t.train_step();
  t.save_checkpoint(dir / "state.bin");

  train::Trainer u = make_trainer(c);
  u.load_checkpoint(dir / "state.bin");
  for (const auto& [name, p] : t.params()) CHECK(same_data(p, u.params().at(name)));

  // identical forward outputs after the round trip
  const tok::TextVocab vocab = tok::TextVocab::build();
  const ar::TokenSequence seq = ar::text_sequence(vocab.encode_text("a red square at center"));
  CHECK(same_data(t.model().forward(seq).logits, u.model().forward(seq).logits));

  // truncation breaks the container integrity check
  std::ifstream in(dir / "state.bin", std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  REQUIRE(bytes.size() > 64);
  std::ofstream out(dir / "broken.bin", std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 48));
  out.close();
  CHECK_THROWS_AS(u.load_checkpoint(dir / "broken.bin"), IntegrityError);

  // a different run config refuses the checkpoint
  train::Trainer v = make_trainer(tiny_config(52));
  CHECK_THROWS_AS(v.load_checkpoint(dir / "state.bin"), ConfigError);
}

TEST_CASE("frozen components stay frozen") {
  const auto vq_before = snapshot(shared_vq().params());
  const auto enc_before = snapshot(shared_enc().params());
  auto c = tiny_config(55);
  c.steps = 6;
  train::Trainer t = make_trainer(c);
  for (int s = 0; s < 6; ++s) t.train_step();
  CHECK(snapshot(shared_vq().params()) == vq_before);
  CHECK(snapshot(shared_enc().params()) == enc_before);
}

TEST_CASE("non-finite loss aborts with a batch dump") {
  auto c = tiny_config(61);
  const fs::path dir = fresh_dir("nan_run");
  train::Trainer t = make_trainer(c, dir);
  // logits around 1e20 keep the cross entropy finite but push the squared
  // logsumexp of the z term past the f32 range
  auto head = t.params().at("head/w").mutable_data();
  for (size_t i = 0; i < head.size(); ++i) head[i] = i % 2 ? 1e20 : -1e20;
  t.params().at("head/w").round_to_dtype();
  CHECK_THROWS_AS(t.train_step(), NumericalError);
  REQUIRE(fs::exists(dir / "nan_dump_step_1.json"));
  std::ifstream in(dir / "nan_dump_step_1.json");
  nlohmann::json dump = nlohmann::json::parse(in);
  CHECK(dump.at("step") == 1);
  REQUIRE(dump.at("batch").size() == 4);
  CHECK(dump.at("batch")[0].contains("caption"));
  CHECK(dump.at("batch")[0].contains("loss"));
}

TEST_CASE("metrics land in one record per step") {
  auto c = tiny_config(65);
  c.steps = 4;
  const fs::path dir = fresh_dir("metrics");
  train::Trainer t = make_trainer(c, dir);
  t.run();
  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  int64_t expect_step = 1;
  while (std::getline(in, line)) {
    train::MetricRecord r = train::MetricRecord::from_json(nlohmann::json::parse(line));
    CHECK(r.step == expect_step++);
    CHECK(std::isfinite(r.loss));
    CHECK(r.wall_ms > 0.0);
  }
  CHECK(expect_step == 5);
}

TEST_CASE("training reduces the composite loss") {
  auto c = tiny_config(71);
  c.steps = 60;
  c.dataset_size = 4;
  c.held_out_size = 4;
  c.cond_dropout_p = 0.0;
  c.optimizer.lr = 3e-3;
  c.optimizer.warmup_steps = 10;
  train::Trainer t = make_trainer(c);
  std::vector<double> losses;
  for (int s = 0; s < 60; ++s) losses.push_back(t.train_step().loss);
  auto mean_of = [&](size_t from, size_t to) {
    double acc = 0.0;
    for (size_t i = from; i < to; ++i) acc += losses[i];
    return acc / static_cast<double>(to - from);
  };
  CHECK(mean_of(50, 60) < mean_of(0, 10));
  for (double l : losses) CHECK(std::isfinite(l));
  const double hc = t.held_out_mean_cosine();
  CHECK(hc >= -1.0);
  CHECK(hc <= 1.0);
}

TEST_CASE("rep mechanism trains end to end") {
  auto c = tiny_config(75);
  c.alignment.mechanism = ar::Mechanism::rep;
  c.steps = 3;
  train::Trainer t = make_trainer(c);
  for (int s = 0; s < 3; ++s) {
    train::MetricRecord r = t.train_step();
    CHECK(std::isfinite(r.loss));
    CHECK(r.gva > 0.0);
  }
}

TEST_CASE("caption-only pretraining runs without image artifacts") {
  auto c = tiny_config(81);
  c.model.mode_tag = "text_only";
  c.alignment.mechanism = ar::Mechanism::none;
  c.steps = 40;
  c.dataset_size = 16;
  c.optimizer.lr = 3e-3;
  c.optimizer.warmup_steps = 10;
  train::Trainer t = make_trainer(c);
  std::vector<double> losses;
  for (int s = 0; s < 40; ++s) {
    train::MetricRecord r = t.train_step();
    losses.push_back(r.loss);
    CHECK(r.gva == 0.0);
    CHECK(r.mean_cos == 0.0);
  }
  CHECK(losses.back() < losses.front());

  const fs::path dir = fresh_dir("pretrain");
  t.export_model(dir / "text_lm.bin");
  CHECK(ar::ArModel::load(dir / "text_lm.bin").config().mode_tag == "text_only");
  CHECK_THROWS_AS(t.held_out_mean_cosine(), ConfigError);
}
