#include "arra/corpus.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "arra/error.hpp"
#include "arra/image_io.hpp"

namespace arra::corpus {

namespace {

// The 3x3 grid scales with the canvas: unit = canvas/32, border = unit,
// cells = 10*unit pixels. Cell (row, col) starts at unit*(1 + 10*row) etc.
int canvas_unit(int canvas) {
  if (canvas < 32 || canvas % 32 != 0)
    throw ConfigError("canvas side must be a positive multiple of 32, got " + std::to_string(canvas));
  return canvas / 32;
}

// pixel-mask predicates, parameterized by cell size so shapes scale
bool shape_mask(int shape, int y, int x, int s) {
  const double c = (s - 1) / 2.0;
  switch (shape) {
    case 0:  // square with a one-unit margin
      return y >= 1 && y <= s - 2 && x >= 1 && x <= s - 2;
    case 1: {  // circle
      const double r = s / 2.0 - 1.0;
      const double dy = y - c, dx = x - c;
      return dy * dy + dx * dx <= r * r;
    }
    case 2: {  // triangle, apex up
      if (y < 1 || y > s - 2) return false;
      const double half = 0.5 + (y - 1) * (c - 1.5) / (s - 3);
      return std::abs(x - c) <= half;
    }
    case 3: {  // cross
      if (y < 1 || y > s - 2 || x < 1 || x > s - 2) return false;
      const double t = s / 10.0;
      return std::abs(y - c) <= t || std::abs(x - c) <= t;
    }
    default:
      return false;
  }
}

struct Word {
  std::string text;
  size_t pos;  // byte offset in the source string
};

std::vector<Word> split_words(const std::string& text) {
  std::vector<Word> words;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    if (i >= text.size()) break;
    size_t start = i;
    while (i < text.size() && text[i] != ' ') ++i;
    words.push_back({text.substr(start, i - start), start});
  }
  return words;
}

template <size_t N>
int index_of(const std::array<std::string_view, N>& names, const std::string& word) {
  for (size_t i = 0; i < N; ++i)
    if (names[i] == word) return static_cast<int>(i);
  return -1;
}

}  // namespace

void SceneSpec::validate() const {
  if (objects.empty() || objects.size() > 3)
    throw ConfigError("scene must hold 1 to 3 objects, got " + std::to_string(objects.size()));
  (void)canvas_unit(canvas);
  for (const ObjectSpec& o : objects) {
    if (o.shape < 0 || o.shape >= 4) throw ConfigError("shape index " + std::to_string(o.shape) + " out of range");
    if (o.color < 0 || o.color >= 6) throw ConfigError("color index " + std::to_string(o.color) + " out of range");
    if (o.cell < 0 || o.cell >= 9) throw ConfigError("cell index " + std::to_string(o.cell) + " out of range");
  }
  for (size_t i = 0; i + 1 < objects.size(); ++i)
    for (size_t j = i + 1; j < objects.size(); ++j)
      if (objects[i].cell == objects[j].cell)
        throw ConfigError("two objects share cell " + std::to_string(objects[i].cell));
}

void CorpusConfig::validate() const {
  (void)canvas_unit(canvas);
  if (min_objects < 1 || max_objects > 3 || min_objects > max_objects)
    throw ConfigError("object count range [" + std::to_string(min_objects) + "," + std::to_string(max_objects) +
                      "] outside 1..3");
}

nlohmann::json CorpusConfig::to_json() const {
  nlohmann::json pal = nlohmann::json::array();
  for (const Rgb& c : palette) pal.push_back({c[0], c[1], c[2]});
  return {{"canvas", canvas}, {"min_objects", min_objects}, {"max_objects", max_objects}, {"palette", pal}};
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.canvas = j.at("canvas").get<int>();
  c.min_objects = j.at("min_objects").get<int>();
  c.max_objects = j.at("max_objects").get<int>();
  const auto& pal = j.at("palette");
  if (pal.size() != c.palette.size()) throw ConfigError("palette must list 6 colors");
  for (size_t i = 0; i < c.palette.size(); ++i)
    for (size_t k = 0; k < 3; ++k) c.palette[i][k] = pal.at(i).at(k).get<double>();
  return c;
}

int category_id(const ObjectSpec& obj) { return obj.shape * 6 + obj.color; }

ObjectSpec object_from_category(int category) {
  if (category < 0 || category >= 24) throw ConfigError("category " + std::to_string(category) + " outside 0..23");
  return {category / 6, category % 6, 0};
}

std::string caption_for(const SceneSpec& spec) {
  spec.validate();
  std::string out;
  for (size_t i = 0; i < spec.objects.size(); ++i) {
    const ObjectSpec& o = spec.objects[i];
    if (i) out += " and ";
    out += "a ";
    out += kColorNames[static_cast<size_t>(o.color)];
    out += " ";
    out += kShapeNames[static_cast<size_t>(o.shape)];
    out += " at ";
    out += kPositionNames[static_cast<size_t>(o.cell)];
  }
  return out;
}

SceneSpec parse_caption(const std::string& text, int canvas) {
  const std::vector<Word> words = split_words(text);
  size_t i = 0;
  auto fail = [&](const std::string& msg) -> ParseError {
    const size_t pos = i < words.size() ? words[i].pos : text.size();
    return ParseError(msg, pos);
  };
  auto take = [&]() -> const std::string& {
    if (i >= words.size()) throw fail("unexpected end of caption");
    return words[i++].text;
  };

  SceneSpec spec;
  spec.canvas = canvas;
  while (true) {
    if (take() != "a") {
      --i;
      throw fail("expected 'a'");
    }
    ObjectSpec obj;
    obj.color = index_of(kColorNames, take());
    if (obj.color < 0) {
      --i;
      throw fail("expected a color");
    }
    obj.shape = index_of(kShapeNames, take());
    if (obj.shape < 0) {
      --i;
      throw fail("expected a shape");
    }
    if (take() != "at") {
      --i;
      throw fail("expected 'at'");
    }
    std::string position = take();
    if (position != "center") {
      if (position != "top" && position != "middle" && position != "bottom") {
        --i;
        throw fail("expected a position");
      }
      position += " " + take();
    }
    std::string pos_copy = position;  // kPositionNames holds string_views
    obj.cell = index_of(kPositionNames, pos_copy);
    if (obj.cell < 0) {
      --i;
      throw fail("unknown position '" + position + "'");
    }
    spec.objects.push_back(obj);
    if (i >= words.size()) break;
    if (take() != "and") {
      --i;
      throw fail("expected 'and'");
    }
  }

  std::sort(spec.objects.begin(), spec.objects.end(),
            [](const ObjectSpec& a, const ObjectSpec& b) { return a.cell < b.cell; });
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    i = words.size();
    throw fail(e.what());
  }
  return spec;
}

num::Tensor render(const SceneSpec& spec, const Palette& palette) {
  spec.validate();
  const int canvas = spec.canvas;
  const int unit = canvas_unit(canvas);
  const int cell_px = 10 * unit;

  std::vector<double> pixels(static_cast<size_t>(canvas) * canvas * 3);
  for (int y = 0; y < canvas; ++y)
    for (int x = 0; x < canvas; ++x)
      for (int ch = 0; ch < 3; ++ch)
        pixels[(static_cast<size_t>(y) * canvas + x) * 3 + ch] = kBackground[static_cast<size_t>(ch)];

  for (const ObjectSpec& o : spec.objects) {
    const int row = o.cell / 3, col = o.cell % 3;
    const int oy = unit * (1 + 10 * row), ox = unit * (1 + 10 * col);
    const Rgb& rgb = palette[static_cast<size_t>(o.color)];
    for (int y = 0; y < cell_px; ++y)
      for (int x = 0; x < cell_px; ++x)
        if (shape_mask(o.shape, y, x, cell_px))
          for (int ch = 0; ch < 3; ++ch)
            pixels[(static_cast<size_t>(oy + y) * canvas + ox + x) * 3 + ch] = rgb[static_cast<size_t>(ch)];
  }
  return num::Tensor::from_data({canvas, canvas, 3}, std::move(pixels));
}

SceneSpec random_scene(num::Rng& rng, const CorpusConfig& config) {
  config.validate();
  const int count =
      config.min_objects + static_cast<int>(rng.uniform_int("scene/count", config.max_objects - config.min_objects + 1));
  std::vector<int> free_cells{0, 1, 2, 3, 4, 5, 6, 7, 8};
  SceneSpec spec;
  spec.canvas = config.canvas;
  for (int k = 0; k < count; ++k) {
    ObjectSpec obj;
    const auto pick = static_cast<size_t>(rng.uniform_int("scene/cell", static_cast<int64_t>(free_cells.size())));
    obj.cell = free_cells[pick];
    free_cells.erase(free_cells.begin() + static_cast<int64_t>(pick));
    obj.shape = static_cast<int>(rng.uniform_int("scene/shape", 4));
    obj.color = static_cast<int>(rng.uniform_int("scene/color", 6));
    spec.objects.push_back(obj);
  }
  std::sort(spec.objects.begin(), spec.objects.end(),
            [](const ObjectSpec& a, const ObjectSpec& b) { return a.cell < b.cell; });
  return spec;
}

Sample generate_scene(uint64_t seed, const CorpusConfig& config) {
  num::Rng rng(seed);
  Sample s;
  s.spec = random_scene(rng, config);
  s.caption = caption_for(*s.spec);
  s.image = render(*s.spec, config.palette);
  s.category_id = category_id(s.spec->objects.front());
  return s;
}

std::vector<std::string> grammar_words() {
  std::vector<std::string> words{"a", "and", "at"};
  for (auto n : kColorNames) words.emplace_back(n);
  for (auto n : kShapeNames) words.emplace_back(n);
  for (std::string_view n : {"top", "middle", "bottom", "left", "center", "right"}) words.emplace_back(n);
  return words;
}

PairStream::PairStream(const std::filesystem::path& dir, int canvas) : dir_(dir), canvas_(canvas) {
  (void)canvas_unit(canvas);
  const std::filesystem::path manifest = dir / "manifest.jsonl";
  manifest_.open(manifest);
  if (!manifest_) throw DependencyError("missing manifest: " + manifest.string());
}

bool PairStream::next(Sample& out) {
  std::string line;
  while (std::getline(manifest_, line)) {
    ++line_;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
      out.caption = record.at("caption").get<std::string>();
      out.category_id = record.value("category_id", -1);
      const std::filesystem::path file = dir_ / record.at("file").get<std::string>();
      if (!std::filesystem::exists(file))
        throw IntegrityError("manifest line " + std::to_string(line_) + ": missing image " + file.string());
      out.image = resize_to_canvas(read_png(file), canvas_);
      out.spec.reset();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_) + ": " + e.what(), line_);
    }
    return true;
  }
  return false;
}

}  // namespace arra::corpus
