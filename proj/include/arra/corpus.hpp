#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "arra/rng.hpp"
#include "arra/tensor.hpp"

namespace arra::corpus {

// Closed enumerations; indices are load-bearing (category ids, vocab order).
inline constexpr std::array<std::string_view, 4> kShapeNames{"square", "circle", "triangle", "cross"};
inline constexpr std::array<std::string_view, 6> kColorNames{"red", "green", "blue", "yellow", "magenta", "cyan"};
inline constexpr std::array<std::string_view, 9> kPositionNames{"top left",    "top center",    "top right",
                                                                "middle left", "center",        "middle right",
                                                                "bottom left", "bottom center", "bottom right"};

using Rgb = std::array<double, 3>;
using Palette = std::array<Rgb, 6>;

// Unit RGB corners; palettes may remap values (a second "domain" for transfer
// experiments) but the six names are fixed so captions never change.
inline constexpr Palette kDefaultPalette{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}}};
inline constexpr Rgb kBackground{0.1, 0.1, 0.1};

struct ObjectSpec {
  int shape = 0;  // index into kShapeNames
  int color = 0;  // index into kColorNames
  int cell = 0;   // 0..8, row-major over the 3x3 grid
  auto operator<=>(const ObjectSpec&) const = default;
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;  // canonical order: ascending cell
  int canvas = 32;
  bool operator==(const SceneSpec&) const = default;
  void validate() const;  // 1..3 objects, distinct cells, indices in range
};

struct CorpusConfig {
  int canvas = 32;  // multiple of 32; the grid and shapes scale with it
  int min_objects = 1;
  int max_objects = 3;
  Palette palette = kDefaultPalette;
  void validate() const;
  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j);
};

struct Sample {
  num::Tensor image;  // canvas x canvas x 3, values in [0,1]
  std::string caption;
  std::optional<SceneSpec> spec;  // absent for ingested external data
  int category_id = -1;
};

// (shape, color) <-> class index, 24 classes
int category_id(const ObjectSpec& obj);
ObjectSpec object_from_category(int category);

std::string caption_for(const SceneSpec& spec);
SceneSpec parse_caption(const std::string& text, int canvas = 32);

num::Tensor render(const SceneSpec& spec, const Palette& palette = kDefaultPalette);
SceneSpec random_scene(num::Rng& rng, const CorpusConfig& config);
Sample generate_scene(uint64_t seed, const CorpusConfig& config);

// words the caption grammar can produce, in vocab order
std::vector<std::string> grammar_words();

// Streams samples from a directory holding PNGs plus manifest.jsonl, one
// {"file", "caption", "category_id"?} object per line. Errors name the line.
class PairStream {
 public:
  PairStream(const std::filesystem::path& dir, int canvas);
  bool next(Sample& out);

 private:
  std::filesystem::path dir_;
  std::ifstream manifest_;
  int canvas_;
  size_t line_ = 0;
};

}  // namespace arra::corpus
