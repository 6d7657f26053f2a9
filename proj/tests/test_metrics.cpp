#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "arra/corpus.hpp"
#include "arra/error.hpp"
#include "arra/foundation.hpp"
#include "arra/metrics.hpp"
#include "arra/rng.hpp"

using namespace arra;

namespace {

metrics::FeatureSet column_set(const std::vector<double>& values, std::string tag) {
  return {num::Tensor::from_data({static_cast<int64_t>(values.size()), 1}, values, num::Dtype::f64),
          std::move(tag)};
}

metrics::FeatureSet gaussian_set(double mu, double sigma, int n, uint64_t seed, std::string tag) {
  num::Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = mu + sigma * rng.normal("draw");
  return column_set(v, std::move(tag));
}

num::Tensor noisy(const num::Tensor& image, num::Rng& rng, double sigma) {
  const double amp = sigma * std::sqrt(3.0);  // uniform on [-amp, amp] has stddev sigma
  std::vector<double> v(image.data().begin(), image.data().end());
  for (double& x : v) x += amp * (2.0 * rng.uniform("noise") - 1.0);
  return num::Tensor::from_data(image.shape(), std::move(v), num::Dtype::f64);
}

corpus::SceneSpec one_object(int shape, int color, int cell) {
  corpus::SceneSpec spec;
  spec.objects.push_back({shape, color, cell});
  return spec;
}

}  // namespace

TEST_CASE("frechet distance matches the 1-D Gaussian closed form") {
  // fitted from 10^4 draws each; exact value (0-2)^2 + (1-1.5)^2 = 4.25
  const auto a = gaussian_set(0.0, 1.0, 10000, 5, "a");
  const auto b = gaussian_set(2.0, 1.5, 10000, 6, "b");
  const double d = metrics::frechet_distance(a, b);
  CHECK(d == doctest::Approx(4.25).epsilon(0.02));
}

TEST_CASE("frechet distance basics") {
  num::Rng rng(9);
  std::vector<double> v(200);
  for (double& x : v) x = rng.normal("x");
  const metrics::FeatureSet a{num::Tensor::from_data({50, 4}, v, num::Dtype::f64), "a"};
  CHECK(metrics::frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-6));

  std::vector<double> w = v;
  for (double& x : w) x = 0.3 - 0.8 * x;
  const metrics::FeatureSet b{num::Tensor::from_data({50, 4}, w, num::Dtype::f64), "b"};
  CHECK(metrics::frechet_distance(a, b) == doctest::Approx(metrics::frechet_distance(b, a)).epsilon(1e-8));
  CHECK(metrics::frechet_distance(a, b) > 0.01);

  // same fitted moments, different sample order
  std::vector<double> perm = v;
  std::swap_ranges(perm.begin(), perm.begin() + 4, perm.begin() + 4);
  const metrics::FeatureSet p{num::Tensor::from_data({50, 4}, perm, num::Dtype::f64), "p"};
  CHECK(metrics::frechet_distance(a, p) < 1e-10);
}

TEST_CASE("frechet distance rejects bad feature sets") {
  CHECK_THROWS_AS(metrics::frechet_distance(column_set({1.0}, "one"), column_set({1.0, 2.0}, "two")), ConfigError);
  const auto bad = column_set({1.0, std::nan("")}, "nan");
  CHECK_THROWS_AS(metrics::frechet_distance(bad, column_set({1.0, 2.0}, "ok")), NumericalError);
  const metrics::FeatureSet wide{num::Tensor::from_data({2, 2}, {0.0, 0.0, 1.0, 1.0}, num::Dtype::f64), "wide"};
  CHECK_THROWS_AS(metrics::frechet_distance(wide, column_set({1.0, 2.0}, "narrow")), ShapeError);
}

TEST_CASE("ms_ssim identities and ordering") {
  const num::Tensor x = corpus::render(one_object(1, 2, 4));
  CHECK(metrics::ms_ssim(x, x) == doctest::Approx(1.0).epsilon(1e-6));

  num::Rng rng(13);
  const num::Tensor jittered = noisy(x, rng, 0.01 / std::sqrt(3.0));
  std::vector<double> inv(x.data().begin(), x.data().end());
  for (double& v : inv) v = 1.0 - v;
  const num::Tensor inverted = num::Tensor::from_data(x.shape(), std::move(inv), num::Dtype::f64);

  const double close = metrics::ms_ssim(x, jittered);
  const double far = metrics::ms_ssim(x, inverted);
  CHECK(far < close);
  CHECK(close > 0.9);
  CHECK(metrics::ms_ssim(jittered, x) == doctest::Approx(close).epsilon(1e-8));

  const num::Tensor other = corpus::render(one_object(0, 0, 0));
  CHECK(metrics::ms_ssim(x, other) < metrics::ms_ssim(x, jittered));
}

TEST_CASE("ms_ssim rejects bad shapes") {
  const num::Tensor x = corpus::render(one_object(0, 0, 0));
  CHECK_THROWS_AS(metrics::ms_ssim(x, num::Tensor::zeros({32, 32})), ShapeError);
  CHECK_THROWS_AS(metrics::ms_ssim(num::Tensor::zeros({8, 8, 3}), num::Tensor::zeros({8, 8, 3})), ConfigError);
}

TEST_CASE("detect_attributes round-trips every one-object spec") {
  for (int shape = 0; shape < 4; ++shape)
    for (int color = 0; color < 6; ++color)
      for (int cell = 0; cell < 9; ++cell) {
        const corpus::SceneSpec spec = one_object(shape, color, cell);
        CHECK(metrics::detect_attributes(corpus::render(spec)) == spec);
      }
}

TEST_CASE("detect_attributes round-trips full scenes") {
  corpus::CorpusConfig cc;
  for (uint64_t seed = 0; seed < 64; ++seed) {
    const corpus::Sample s = corpus::generate_scene(seed, cc);
    CHECK(metrics::detect_attributes(s.image) == *s.spec);
  }
}

TEST_CASE("detect_attributes reports empty on background") {
  const num::Tensor bg = num::Tensor::full({32, 32, 3}, corpus::kBackground[0], num::Dtype::f64);
  CHECK(metrics::detect_attributes(bg).objects.empty());
}

TEST_CASE("detect_attributes survives uniform noise") {
  corpus::CorpusConfig cc;
  num::Rng rng(77);
  int recovered = 0;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    const corpus::Sample s = corpus::generate_scene(seed, cc);
    if (metrics::detect_attributes(noisy(s.image, rng, 0.05)) == *s.spec) ++recovered;
  }
  CHECK(recovered >= 990);
}

TEST_CASE("detect_attributes is translation-consistent") {
  for (int cell = 0; cell < 9; ++cell) {
    const corpus::SceneSpec found = metrics::detect_attributes(corpus::render(one_object(3, 4, cell)));
    REQUIRE(found.objects.size() == 1);
    CHECK(found.objects[0].shape == 3);
    CHECK(found.objects[0].color == 4);
    CHECK(found.objects[0].cell == cell);
  }
}

TEST_CASE("detect_attributes rejects bad canvases") {
  CHECK_THROWS_AS(metrics::detect_attributes(num::Tensor::zeros({32, 32})), ShapeError);
  CHECK_THROWS_AS(metrics::detect_attributes(num::Tensor::zeros({16, 16, 3})), ConfigError);
}

TEST_CASE("attribute accuracy on constructed batches") {
  corpus::CorpusConfig cc;
  std::vector<num::Tensor> images;
  std::vector<std::string> captions;
  for (uint64_t seed = 100; seed < 108; ++seed) {
    const corpus::Sample s = corpus::generate_scene(seed, cc);
    images.push_back(s.image);
    captions.push_back(s.caption);
  }
  const metrics::AttributeAccuracy perfect = metrics::attribute_accuracy(images, captions);
  CHECK(perfect.object_recall == 1.0);
  CHECK(perfect.position_accuracy == 1.0);
  CHECK(perfect.color_accuracy == 1.0);
  CHECK(perfect.exact_match == 1.0);
  CHECK(perfect.to_json().at("exact_match").get<double>() == 1.0);

  const num::Tensor bg = num::Tensor::full({32, 32, 3}, corpus::kBackground[0], num::Dtype::f64);
  const metrics::AttributeAccuracy nothing =
      metrics::attribute_accuracy({bg}, {"a red square at center"});
  CHECK(nothing.object_recall == 0.0);
  CHECK(nothing.position_accuracy == 0.0);
  CHECK(nothing.exact_match == 0.0);

  // right shape and cell, wrong color
  const metrics::AttributeAccuracy wrong_color =
      metrics::attribute_accuracy({corpus::render(one_object(0, 1, 4))}, {"a red square at center"});
  CHECK(wrong_color.object_recall == 1.0);
  CHECK(wrong_color.color_accuracy == 0.0);
  CHECK(wrong_color.exact_match == 0.0);

  const metrics::AttributeAccuracy half = metrics::attribute_accuracy(
      {corpus::render(one_object(0, 0, 4)), corpus::render(one_object(1, 1, 4))},
      {"a red square at center", "a red square at center"});
  CHECK(half.exact_match == 0.5);

  CHECK_THROWS_AS(metrics::attribute_accuracy(images, {"a red square at center"}), ShapeError);
  CHECK_THROWS_AS(metrics::attribute_accuracy({}, {}), ConfigError);
  CHECK_THROWS_AS(metrics::attribute_accuracy({bg}, {"a purple blob at center"}), ParseError);
}

TEST_CASE("clip_score equals the hand-built cosine and discriminates after training") {
  found::FoundationConfig fc;
  fc.dim = 16;
  fc.heads = 2;
  fc.layers = 1;
  fc.max_text = 24;
  num::Rng rng(21);
  found::FoundationEncoder enc(fc, rng);

  corpus::CorpusConfig cc;
  const corpus::Sample s = corpus::generate_scene(7, cc);
  const num::Tensor img_emb =
      found::aggregate(enc.encode_image_patches(s.image), found::AggMode::cls, found::EncoderKind::cross_modal);
  const num::Tensor txt_emb = enc.encode_text_global(s.caption);
  double dot = 0.0;
  for (size_t k = 0; k < img_emb.data().size(); ++k) dot += img_emb.data()[k] * txt_emb.data()[k];
  CHECK(metrics::clip_score({s.image}, {s.caption}, enc) == doctest::Approx(dot).epsilon(1e-12));

  CHECK_THROWS_AS(metrics::clip_score({s.image}, {}, enc), ShapeError);
  CHECK_THROWS_AS(metrics::clip_score({}, {}, enc), ConfigError);
  found::FoundationConfig vc = fc;
  vc.kind = found::EncoderKind::vision_only;
  num::Rng vrng(22);
  const found::FoundationEncoder vonly(vc, vrng);
  CHECK_THROWS_AS(metrics::clip_score({s.image}, {s.caption}, vonly), ConfigError);

  num::AdamWConfig oc;
  oc.lr = 1e-3;
  oc.warmup_steps = 10;
  found::FoundationTrainer trainer(enc, oc, 4);
  std::vector<corpus::Sample> batch;
  for (uint64_t seed = 0; seed < 8; ++seed) batch.push_back(corpus::generate_scene(seed, cc));
  for (int step = 0; step < 80; ++step) trainer.contrastive_step(batch);

  std::vector<num::Tensor> images;
  std::vector<std::string> matched, shuffled;
  for (uint64_t seed = 400; seed < 420; ++seed) {
    const corpus::Sample t = corpus::generate_scene(seed, cc);
    images.push_back(t.image);
    matched.push_back(t.caption);
  }
  shuffled = matched;
  std::rotate(shuffled.begin(), shuffled.begin() + 1, shuffled.end());
  const double own = metrics::clip_score(images, matched, enc);
  const double off = metrics::clip_score(images, shuffled, enc);
  CHECK(own >= -1.0);
  CHECK(own <= 1.0);
  CHECK(own > off);
}

TEST_CASE("features_for stacks CLS rows") {
  found::FoundationConfig fc;
  fc.dim = 16;
  fc.heads = 2;
  fc.layers = 1;
  num::Rng rng(25);
  const found::FoundationEncoder enc(fc, rng);
  corpus::CorpusConfig cc;
  std::vector<num::Tensor> images;
  for (uint64_t seed = 30; seed < 47; ++seed) images.push_back(corpus::generate_scene(seed, cc).image);
  const metrics::FeatureSet fs = metrics::features_for(images, enc, "probe");
  CHECK(fs.features.shape() == std::vector<int64_t>{17, 16});
  CHECK(fs.source == "probe");
  for (int64_t i = 0; i < 17; ++i) {
    double norm = 0.0;
    for (int64_t j = 0; j < 16; ++j) {
      const double v = fs.features.data()[static_cast<size_t>(i * 16 + j)];
      norm += v * v;
    }
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK(metrics::frechet_distance(fs, fs) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK_THROWS_AS(metrics::features_for({}, enc, "empty"), ConfigError);
}
