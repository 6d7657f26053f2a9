#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "arra/corpus.hpp"
#include "arra/error.hpp"
#include "arra/image_io.hpp"

using namespace arra;
using namespace arra::corpus;

namespace {

CorpusConfig one_object_config() {
  CorpusConfig c;
  c.min_objects = c.max_objects = 1;
  return c;
}

}  // namespace

TEST_CASE("seed 0 with a one-object config matches the golden sample") {
  Sample s = generate_scene(0, one_object_config());
  REQUIRE(s.spec.has_value());
  REQUIRE(s.spec->objects.size() == 1);
  CHECK(s.spec->objects[0] == ObjectSpec{2, 0, 0});  // red triangle, top left
  CHECK(s.caption == "a red triangle at top left");
  CHECK(s.category_id == 12);
}

TEST_CASE("same seed twice gives byte-identical samples") {
  CorpusConfig cfg;
  Sample a = generate_scene(7, cfg);
  Sample b = generate_scene(7, cfg);
  CHECK(a.caption == b.caption);
  CHECK(a.spec == b.spec);
  CHECK(a.category_id == b.category_id);
  REQUIRE(a.image.numel() == b.image.numel());
  for (size_t i = 0; i < a.image.data().size(); ++i) CHECK(a.image.data()[i] == b.image.data()[i]);
}

TEST_CASE("neighboring seeds give distinct specs at least 99% of the time") {
  auto count_adjacent_collisions = [](const CorpusConfig& cfg) {
    int same = 0;
    SceneSpec prev = *generate_scene(0, cfg).spec;
    for (uint64_t seed = 1; seed < 1000; ++seed) {
      SceneSpec cur = *generate_scene(seed, cfg).spec;
      if (cur == prev) ++same;
      prev = std::move(cur);
    }
    return same;
  };
  CHECK(count_adjacent_collisions(one_object_config()) <= 10);
  CHECK(count_adjacent_collisions(CorpusConfig{}) <= 10);
}

TEST_CASE("renderer fills the shape mask with the exact palette color") {
  SceneSpec spec;
  spec.objects = {{0, 0, 0}};  // red square at top left
  num::Tensor img = render(spec);
  // square mask: rows/cols 1..8 inside the 10px cell that starts at (1,1)
  CHECK(img.at({2, 2, 0}) == 1.0);
  CHECK(img.at({2, 2, 1}) == 0.0);
  CHECK(img.at({2, 2, 2}) == 0.0);
  CHECK(img.at({9, 9, 0}) == 1.0);
  // cell border and everything outside the mask stays background
  const double bg = static_cast<double>(static_cast<float>(0.1));
  CHECK(img.at({1, 1, 0}) == bg);   // margin row inside the cell
  CHECK(img.at({0, 0, 0}) == bg);   // canvas border
  CHECK(img.at({16, 16, 0}) == bg);  // center cell untouched
  CHECK(img.at({31, 31, 2}) == bg);
}

TEST_CASE("empty-adjacent cells remain background exactly") {
  SceneSpec spec;
  spec.objects = {{1, 2, 4}};  // blue circle at center
  num::Tensor img = render(spec);
  const double bg = static_cast<double>(static_cast<float>(0.1));
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 11; ++x)  // everything left of the center cell column
      for (int ch = 0; ch < 3; ++ch) CHECK(img.at({y, x, ch}) == bg);
}

TEST_CASE("render is a pure function of the spec") {
  SceneSpec spec;
  spec.objects = {{3, 4, 1}, {2, 5, 6}, {1, 1, 8}};
  num::Tensor a = render(spec);
  num::Tensor b = render(spec);
  for (size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("render rejects shared cells") {
  SceneSpec spec;
  spec.objects = {{0, 0, 3}, {1, 1, 3}};
  CHECK_THROWS_AS(render(spec), ConfigError);
}

TEST_CASE("renderer scales to a 64px canvas") {
  SceneSpec spec;
  spec.objects = {{0, 1, 4}};  // green square at center
  spec.canvas = 64;
  num::Tensor img = render(spec);
  CHECK(img.dim(0) == 64);
  // center cell starts at 2 + 20 + 20 = 22 on the 64px canvas; the square
  // mask covers rows/cols 2..17 within the 20px cell
  CHECK(img.at({30, 30, 1}) == 1.0);
  CHECK(img.at({30, 30, 0}) == 0.0);
  CHECK_THROWS_AS(render(SceneSpec{{{0, 0, 0}}, 48}), ConfigError);
}

TEST_CASE("caption parses back to the spec") {
  SceneSpec spec = parse_caption("a red square at top left");
  REQUIRE(spec.objects.size() == 1);
  CHECK(spec.objects[0] == ObjectSpec{0, 0, 0});

  SceneSpec two = parse_caption("a cyan cross at center and a yellow circle at bottom right");
  REQUIRE(two.objects.size() == 2);
  CHECK(two.objects[0] == ObjectSpec{3, 5, 4});
  CHECK(two.objects[1] == ObjectSpec{1, 3, 8});
}

TEST_CASE("caption round trip is exact over the full one-object space") {
  for (int shape = 0; shape < 4; ++shape)
    for (int color = 0; color < 6; ++color)
      for (int cell = 0; cell < 9; ++cell) {
        SceneSpec spec;
        spec.objects = {{shape, color, cell}};
        CHECK(parse_caption(caption_for(spec)) == spec);
      }
}

TEST_CASE("caption round trip holds for 1000 random specs") {
  CorpusConfig cfg;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    num::Rng rng(seed);
    SceneSpec spec = random_scene(rng, cfg);
    CHECK(parse_caption(caption_for(spec)) == spec);
  }
}

TEST_CASE("out-of-grammar captions raise a positioned parse error") {
  try {
    parse_caption("a purple blob somewhere");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.position == 2);  // the word "purple"
    CHECK(std::string(e.what()).find("color") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_caption(""), ParseError);
  CHECK_THROWS_AS(parse_caption("a red square at"), ParseError);
  CHECK_THROWS_AS(parse_caption("a red square at nowhere"), ParseError);
  CHECK_THROWS_AS(parse_caption("a red square at top"), ParseError);
  // same cell twice violates the scene invariant
  CHECK_THROWS_AS(parse_caption("a red square at center and a blue circle at center"), ParseError);
}

TEST_CASE("category ids are a 24-class bijection") {
  std::set<int> seen;
  for (int shape = 0; shape < 4; ++shape)
    for (int color = 0; color < 6; ++color) {
      const int id = category_id({shape, color, 0});
      CHECK(id >= 0);
      CHECK(id < 24);
      seen.insert(id);
      ObjectSpec back = object_from_category(id);
      CHECK(back.shape == shape);
      CHECK(back.color == color);
    }
  CHECK(seen.size() == 24);
}

TEST_CASE("png io round trips rendered images bit-exactly") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "arra_corpus_png_test.png";
  SceneSpec spec;
  spec.objects = {{1, 4, 2}, {0, 3, 6}};
  num::Tensor img = render(spec);
  write_png(path, img);
  num::Tensor back = read_png(path);
  REQUIRE(back.shape() == img.shape());
  // palette values are multiples of 1/255 after quantization; a second pass
  // must be stable
  write_png(path, back);
  num::Tensor again = read_png(path);
  for (size_t i = 0; i < back.data().size(); ++i) CHECK(back.data()[i] == again.data()[i]);
  fs::remove(path);
}

TEST_CASE("resize center-crops then nearest-neighbors") {
  // 4x6 image: left half zeros, right half ones; crop keeps columns 1..4
  std::vector<double> v(4 * 6 * 3, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 3; x < 6; ++x)
      for (int ch = 0; ch < 3; ++ch) v[static_cast<size_t>((y * 6 + x) * 3 + ch)] = 1.0;
  num::Tensor img = num::Tensor::from_data({4, 6, 3}, std::move(v));
  num::Tensor out = resize_to_canvas(img, 32);
  CHECK(out.dim(0) == 32);
  CHECK(out.at({0, 0, 0}) == 0.0);    // source column 1
  CHECK(out.at({0, 31, 0}) == 1.0);   // source column 4
}

TEST_CASE("pair stream yields manifest order and names bad lines") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "arra_pairs_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  SUBCASE("empty manifest gives an empty stream") {
    std::ofstream(dir / "manifest.jsonl").close();
    PairStream stream(dir, 32);
    Sample s;
    CHECK_FALSE(stream.next(s));
  }

  SUBCASE("three records arrive in order") {
    for (int i = 0; i < 3; ++i) {
      SceneSpec spec;
      spec.objects = {{i % 4, i % 6, i}};
      write_png(dir / ("img" + std::to_string(i) + ".png"), render(spec));
    }
    std::ofstream m(dir / "manifest.jsonl");
    m << R"({"file": "img0.png", "caption": "first", "category_id": 3})" << "\n";
    m << R"({"file": "img1.png", "caption": "second"})" << "\n";
    m << R"({"file": "img2.png", "caption": "third"})" << "\n";
    m.close();
    PairStream stream(dir, 32);
    Sample s;
    REQUIRE(stream.next(s));
    CHECK(s.caption == "first");
    CHECK(s.category_id == 3);
    CHECK_FALSE(s.spec.has_value());
    CHECK(s.image.dim(0) == 32);
    REQUIRE(stream.next(s));
    CHECK(s.caption == "second");
    CHECK(s.category_id == -1);
    REQUIRE(stream.next(s));
    CHECK(s.caption == "third");
    CHECK_FALSE(stream.next(s));
  }

  SUBCASE("missing image fails at its line after earlier yields") {
    SceneSpec spec;
    spec.objects = {{0, 0, 0}};
    write_png(dir / "ok.png", render(spec));
    std::ofstream m(dir / "manifest.jsonl");
    m << R"({"file": "ok.png", "caption": "fine"})" << "\n";
    m << R"({"file": "gone.png", "caption": "broken"})" << "\n";
    m.close();
    PairStream stream(dir, 32);
    Sample s;
    REQUIRE(stream.next(s));
    CHECK(s.caption == "fine");
    try {
      stream.next(s);
      FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }

  SUBCASE("malformed json names the line") {
    std::ofstream m(dir / "manifest.jsonl");
    m << R"({"file": "x.png", "caption": "ok"})" << "\n";
    m << "not json" << "\n";
    m.close();
    write_png(dir / "x.png", render(SceneSpec{{{0, 0, 0}}, 32}));
    PairStream stream(dir, 32);
    Sample s;
    REQUIRE(stream.next(s));
    try {
      stream.next(s);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
      CHECK(e.position == 2);
    }
  }

  SUBCASE("missing manifest is a dependency error") {
    fs::remove(dir / "manifest.jsonl");
    CHECK_THROWS_AS(PairStream(dir, 32), DependencyError);
  }

  fs::remove_all(dir);
}
