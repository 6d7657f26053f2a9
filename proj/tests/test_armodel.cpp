#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "arra/armodel.hpp"
#include "arra/container.hpp"
#include "arra/error.hpp"
#include "arra/optim.hpp"
#include "arra/tensor.hpp"
#include "arra/tokenizers.hpp"
#include "arra/transformer.hpp"

using namespace arra;
using namespace arra::num;
using namespace arra::ar;

namespace {

const tok::CombinedVocab kVocab{25, 64};

ArModel small_model(uint64_t seed, int h = 64, int layers = 2, int max_len = 32, Dtype dtype = Dtype::f32) {
  ArConfig cfg;
  cfg.h_model = h;
  cfg.layers = layers;
  cfg.heads = 4;
  cfg.max_len = max_len;
  cfg.dtype = dtype;
  Rng rng(seed);
  return ArModel(cfg, rng);
}

TokenSequence demo_sequence(int images = 8) {
  std::vector<int> text = {tok::kBos, 6, 9, 14};
  std::vector<int> img;
  for (int i = 0; i < images; ++i) img.push_back(25 + (i * 7) % 64);
  return build_sequence(text, img, Mechanism::hybnext, kVocab, images);
}

bool rows_equal(const Tensor& a, const Tensor& b, int64_t row_a, int64_t row_b) {
  for (int64_t j = 0; j < a.dim(1); ++j)
    if (a.at({row_a, j}) != b.at({row_b, j})) return false;
  return true;
}

int argmax_row(const Tensor& logits) {
  int best = 0;
  for (int64_t j = 1; j < logits.dim(1); ++j)
    if (logits.at({0, j}) > logits.at({0, best})) best = static_cast<int>(j);
  return best;
}

}  // namespace

TEST_CASE("build_sequence layouts") {
  tok::TextVocab tv = tok::TextVocab::build();
  std::vector<int> text = tv.encode_text("a red square at top left");  // <BOS> + 6 words
  REQUIRE(text.size() == 7);
  std::vector<int> img;
  for (int i = 0; i < 16; ++i) img.push_back(kVocab.to_image_id(i));

  TokenSequence hyb = build_sequence(text, img, Mechanism::hybnext, kVocab, 16);
  CHECK(hyb.size() == 25);
  CHECK(hyb.ids.front() == tok::kBos);
  CHECK(hyb.ids[7] == tok::kBoi);
  CHECK(hyb.roles[7] == Role::boi);
  for (int t = 8; t < 24; ++t) CHECK(hyb.roles[static_cast<size_t>(t)] == Role::image);
  CHECK(hyb.ids.back() == tok::kEoi);

  TokenSequence rep = build_sequence(text, img, Mechanism::rep, kVocab, 16);
  CHECK(rep.size() == 26);
  CHECK(rep.ids[8] == tok::kRep);
  CHECK(rep.roles[8] == Role::rep);
  int rep_roles = 0;
  for (Role r : rep.roles) rep_roles += r == Role::rep ? 1 : 0;
  CHECK(rep_roles == 1);

  TokenSequence none = build_sequence(text, img, Mechanism::none, kVocab, 16);
  CHECK(none.size() == 25);

  img.pop_back();
  CHECK_THROWS_AS(build_sequence(text, img, Mechanism::hybnext, kVocab, 16), ShapeError);
  CHECK_THROWS_AS(build_sequence({6, 9}, {25, 26}, Mechanism::none, kVocab, 2), ConfigError);
  CHECK_THROWS_AS(build_sequence(text, {25, 4}, Mechanism::none, kVocab, 2), ShapeError);

  // pads in the text span keep the pad role
  TokenSequence padded = build_sequence({tok::kBos, tok::kUncond, tok::kPad, tok::kPad}, {25, 26}, Mechanism::none,
                                        kVocab, 2);
  CHECK(padded.roles[2] == Role::pad);
  CHECK(padded.roles[3] == Role::pad);
}

TEST_CASE("loss mask selects image and <EOI> targets") {
  tok::TextVocab tv = tok::TextVocab::build();
  std::vector<int> text = tv.encode_text("a red square at top left");
  std::vector<int> img;
  for (int i = 0; i < 16; ++i) img.push_back(25 + i);

  TokenSequence hyb = build_sequence(text, img, Mechanism::hybnext, kVocab, 16);
  auto mask = loss_mask(hyb);
  REQUIRE(mask.size() == 24);
  double ones = 0;
  for (double w : mask) ones += w;
  CHECK(ones == 17.0);  // 16 image targets + <EOI>
  for (int t = 0; t < 7; ++t) CHECK(mask[static_cast<size_t>(t)] == 0.0);  // text and <BOI> targets
  for (int t = 7; t < 24; ++t) CHECK(mask[static_cast<size_t>(t)] == 1.0);

  auto with_text = loss_mask(hyb, true);
  double ones_t = 0;
  for (double w : with_text) ones_t += w;
  CHECK(ones_t == 23.0);  // adds the 6 caption-word targets, still not <BOI>
  CHECK(with_text[6] == 0.0);

  TokenSequence rep = build_sequence(text, img, Mechanism::rep, kVocab, 16);
  auto rep_mask = loss_mask(rep);
  CHECK(rep_mask[7] == 0.0);  // <REP> target stays structural
  double rep_ones = 0;
  for (double w : rep_mask) rep_ones += w;
  CHECK(rep_ones == 17.0);

  // caption-only sequence trains nothing unless loss_on_text
  TokenSequence caption = text_sequence(text);
  auto silent = loss_mask(caption);
  for (double w : silent) CHECK(w == 0.0);
  auto spoken = loss_mask(caption, true);
  double spoken_ones = 0;
  for (double w : spoken) spoken_ones += w;
  CHECK(spoken_ones == 6.0);
}

TEST_CASE("forward shapes and validation") {
  ArModel model = small_model(5);
  TokenSequence seq = demo_sequence();
  ForwardOutput out = model.forward(seq);
  CHECK(out.logits.shape() == std::vector<int64_t>{seq.size(), 89});
  CHECK(out.hidden.size() == 3);  // embeddings + 2 blocks
  CHECK(out.hidden[0].shape() == std::vector<int64_t>{seq.size(), 64});

  TokenSequence one{{tok::kBos}, {Role::text}};
  CHECK(model.forward(one).logits.shape() == std::vector<int64_t>{1, 89});

  TokenSequence bad{{5000}, {Role::text}};
  CHECK_THROWS_AS(model.forward(bad), ShapeError);
  TokenSequence long_seq;
  for (int i = 0; i < 40; ++i) {
    long_seq.ids.push_back(tok::kBos);
    long_seq.roles.push_back(Role::text);
  }
  CHECK_THROWS_AS(model.forward(long_seq), ShapeError);

  ForwardOutput again = model.forward(seq);
  for (int64_t t = 0; t < seq.size(); ++t) CHECK(rows_equal(out.logits, again.logits, t, t));
}

TEST_CASE("causality over 100 random perturbations") {
  ArModel model = small_model(7);
  Rng rng(99);
  TokenSequence base = demo_sequence(12);  // length 18
  ForwardOutput ref = model.forward(base);

  for (int trial = 0; trial < 100; ++trial) {
    const auto pos = 1 + rng.uniform_int("causality/pos", base.size() - 1);
    const auto new_id = static_cast<int>(rng.uniform_int("causality/id", 89));
    TokenSequence mutated = base;
    mutated.ids[static_cast<size_t>(pos)] = new_id;
    ForwardOutput out = model.forward(mutated);
    for (int64_t t = 0; t < pos; ++t) {
      bool same = rows_equal(ref.logits, out.logits, t, t);
      CHECK(same);
      if (!same) return;
    }
  }
}

TEST_CASE("fresh model cross-entropy sits near log |V|") {
  ArConfig cfg;
  Rng rng(13);
  ArModel model(cfg, rng);
  tok::TextVocab tv = tok::TextVocab::build();
  std::vector<int> img;
  for (int i = 0; i < 16; ++i) img.push_back(25 + (i * 11) % 64);
  TokenSequence seq = build_sequence(tv.encode_text("a blue circle at center"), img, Mechanism::hybnext, kVocab, 16);
  const double ce = ar_loss(model.forward(seq).logits, seq).item();
  CHECK(ce > std::log(89.0) - 0.5);
  CHECK(ce < std::log(89.0) + 0.5);
}

TEST_CASE("ar_loss oracles") {
  TokenSequence seq = build_sequence({tok::kBos, 6}, {25, 26}, Mechanism::none, kVocab, 2);
  REQUIRE(seq.size() == 6);

  // one-hot logits on the correct targets drive the loss to zero
  std::vector<double> hot(static_cast<size_t>(6 * 89), 0.0);
  for (int t = 0; t < 5; ++t) hot[static_cast<size_t>(t * 89 + seq.ids[static_cast<size_t>(t + 1)])] = 50.0;
  CHECK(ar_loss(Tensor::from_data({6, 89}, hot, Dtype::f64), seq).item() < 1e-6);

  // uniform logits give exactly log |V|
  const double uni = ar_loss(Tensor::zeros({6, 89}, Dtype::f64), seq).item();
  CHECK(uni == doctest::Approx(std::log(89.0)).epsilon(1e-12));

  // hand-computed three-position case over a 4-token vocab
  TokenSequence tiny;
  tiny.ids = {1, 2, 2, 3};
  tiny.roles = {Role::text, Role::image, Role::image, Role::text};  // final id is <EOI>
  std::vector<double> vals = {0.3, -1.2, 0.8, 0.0,  //
                              2.0, 0.1, -0.4, 1.0,  //
                              -0.5, 0.6, 0.2, 1.4,  //
                              0.0, 0.0, 0.0, 0.0};
  Tensor logits = Tensor::from_data({4, 4}, vals, Dtype::f64);
  double expect = 0.0;
  const int targets[3] = {2, 2, 3};
  for (int t = 0; t < 3; ++t) {
    double z = 0.0;
    for (int vtok = 0; vtok < 4; ++vtok) z += std::exp(vals[static_cast<size_t>(t * 4 + vtok)]);
    expect += std::log(z) - vals[static_cast<size_t>(t * 4 + targets[t])];
  }
  expect /= 3.0;
  CHECK(ar_loss(logits, tiny).item() == doctest::Approx(expect).epsilon(1e-12));

  // no selected positions: caption-only sequence without loss_on_text
  TokenSequence caption = text_sequence({tok::kBos, 6, 7});
  CHECK_THROWS_AS(ar_loss(Tensor::zeros({3, 89}, Dtype::f64), caption), NumericalError);
}

TEST_CASE("z_loss definition and gradient") {
  // width-1 rows make logsumexp the logit itself
  CHECK(z_loss(Tensor::zeros({2, 1}, Dtype::f64), {1.0, 1.0}).item() == 0.0);
  CHECK(z_loss(Tensor::from_data({1, 1}, {2.0}, Dtype::f64), {1.0}).item() == doctest::Approx(4.0).epsilon(1e-12));
  // masked-out rows do not contribute
  Tensor two = Tensor::from_data({2, 1}, {2.0, 9.0}, Dtype::f64);
  CHECK(z_loss(two, {1.0, 0.0}).item() == doctest::Approx(4.0).epsilon(1e-12));
  CHECK_THROWS_AS(z_loss(two, {0.0, 0.0}), NumericalError);

  Rng rng(3);
  Params p;
  p["x"] = Tensor::randn({3, 5}, rng, "zl", 1.0, Dtype::f64, true);
  auto fn = [](const Params& q) { return z_loss(q.at("x"), {1.0, 0.0, 1.0}); };
  CHECK(finite_difference_check(fn, p, 1e-5).max_rel_err < 1e-4);
}

TEST_CASE("full-model gradient check on the composite loss") {
  ArConfig cfg;
  cfg.h_model = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.vocab = 12;
  cfg.max_len = 8;
  cfg.dtype = Dtype::f64;
  Rng rng(21);
  ArModel model(cfg, rng);

  TokenSequence seq;
  seq.ids = {1, 6, 2, 8, 9, 3};
  seq.roles = {Role::text, Role::text, Role::boi, Role::image, Role::image, Role::text};
  auto fn = [&](const Params& p) {
    ForwardOutput out = model.forward(seq, p);
    Tensor ce = ar_loss(out.logits, seq);
    Tensor zl = z_loss(slice_rows(out.logits, 0, seq.size() - 1), loss_mask(seq));
    return add(ce, mul_scalar(zl, 1e-5));
  };
  auto report = finite_difference_check(fn, model.params(), 1e-5);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("memorizing one sequence and decoding it back") {
  ArConfig cfg;
  cfg.h_model = 32;
  cfg.layers = 2;
  cfg.heads = 4;
  cfg.max_len = 16;
  Rng rng(31);
  ArModel model(cfg, rng);

  TokenSequence seq = build_sequence({tok::kBos, 6}, {30, 45, 60, 25}, Mechanism::none, kVocab, 4);
  AdamWConfig oc;
  oc.lr = 1e-2;
  oc.warmup_steps = 10;
  oc.weight_decay = 0.0;
  AdamW opt(oc);
  double loss = 0.0;
  for (int step = 0; step < 300; ++step) {
    auto fn = [&](const Params& p) { return ar_loss(model.forward(seq, p).logits, seq); };
    auto [l, grads] = forward_backward(fn, model.params());
    opt.step(model.params(), grads);
    loss = l;
    if (loss < 1e-3) break;
  }
  CHECK(loss < 1e-2);

  // greedy decode must reproduce the memorized image tokens and <EOI>
  KvCache cache = model.make_cache();
  Tensor logits = model.decode_step(tok::kBos, cache);
  logits = model.decode_step(6, cache);
  logits = model.decode_step(tok::kBoi, cache);
  const int expect[5] = {30, 45, 60, 25, tok::kEoi};
  for (int i = 0; i < 5; ++i) {
    const int next = argmax_row(logits);
    CHECK(next == expect[i]);
    if (i + 1 < 5) logits = model.decode_step(next, cache);
  }
}

TEST_CASE("incremental decoding matches the full forward") {
  ArConfig cfg;
  Rng rng(41);
  ArModel model(cfg, rng);
  TokenSequence seq = demo_sequence(8);  // length 14
  Tensor full = model.forward(seq).logits;

  KvCache cache = model.make_cache();
  for (int64_t t = 0; t < seq.size(); ++t) {
    Tensor row = model.decode_step(seq.ids[static_cast<size_t>(t)], cache);
    CHECK(rows_equal(full, row, t, 0));
  }
  CHECK(cache.len == seq.size());

  KvCache tiny_budget = model.make_cache();
  ArConfig small_cfg;
  small_cfg.max_len = 2;
  Rng rng2(43);
  ArModel small(small_cfg, rng2);
  KvCache c2 = small.make_cache();
  small.decode_step(tok::kBos, c2);
  small.decode_step(6, c2);
  CHECK_THROWS_AS(small.decode_step(7, c2), ShapeError);
  CHECK_THROWS_AS(model.decode_step(-1, tiny_budget), ShapeError);
}

TEST_CASE("hidden states expose each block's output") {
  ArModel model = small_model(47);
  TokenSequence seq = demo_sequence(6);
  ForwardOutput out = model.forward(seq);

  Params frozen;
  for (const auto& [name, t] : model.params()) frozen.emplace(name, t.detach());
  Tensor mask = causal_mask(seq.size(), model.config().dtype);
  Tensor rec1 = transformer_block(out.hidden[0], frozen, "blk0", model.config().heads, &mask);
  for (int64_t t = 0; t < seq.size(); ++t) CHECK(rows_equal(out.hidden[1], rec1, t, t));
  Tensor rec2 = transformer_block(rec1, frozen, "blk1", model.config().heads, &mask);
  for (int64_t t = 0; t < seq.size(); ++t) CHECK(rows_equal(out.hidden[2], rec2, t, t));
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "arra_armodel_test";
  fs::create_directories(dir);

  ArModel model = small_model(53);
  TokenSequence seq = demo_sequence(5);
  Tensor before = model.forward(seq).logits;

  const fs::path path = dir / "model.arra";
  model.save(path);
  ArModel loaded = ArModel::load(path);
  CHECK(loaded.config().h_model == 64);
  CHECK(loaded.config().layers == 2);
  CHECK(loaded.config().mode_tag == "t2i");
  Tensor after = loaded.forward(seq).logits;
  for (int64_t t = 0; t < seq.size(); ++t) CHECK(rows_equal(before, after, t, t));

  Container stranger;
  stranger.meta["kind"] = "foundation";
  stranger.save(dir / "other.arra");
  CHECK_THROWS_AS(ArModel::load(dir / "other.arra"), IntegrityError);

  fs::remove_all(dir);
}
