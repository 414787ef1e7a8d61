#pragma once

// Procedural scenes of colored geometric shapes with deterministic captions
// and exact per-entity masks. Rendering is integer-exact and hard-edged; a
// sample is a pure function of (spec, seed), so datasets are reproducible
// byte for byte.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokedit/common.hpp"
#include "tokedit/grammar.hpp"
#include "tokedit/image.hpp"
#include "tokedit/rng.hpp"

namespace tokedit {



struct PixelMask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;

  PixelMask() = default;
  PixelMask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}
  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  size_t count() const {
    size_t n = 0;
    for (auto b : v) n += b ? 1 : 0;
    return n;
  }
  bool operator==(const PixelMask& o) const { return h == o.h && w == o.w && v == o.v; }
};

// Alternating run lengths over the row-major flattened mask, starting with
// the number of leading zeros.
inline std::vector<int> rle_encode(const PixelMask& m) {
  std::vector<int> runs;
  uint8_t cur = 0;
  int len = 0;
  for (size_t i = 0; i < m.v.size(); i++) {
    uint8_t b = m.v[i] ? 1 : 0;
    if (b == cur) {
      len++;
    } else {
      runs.push_back(len);
      cur = b;
      len = 1;
    }
  }
  runs.push_back(len);
  return runs;
}

inline PixelMask rle_decode(const std::vector<int>& runs, int h, int w) {
  PixelMask m(h, w);
  size_t pos = 0;
  uint8_t cur = 0;
  for (int len : runs) {
    TOKEDIT_CHECK(len >= 0 && pos + static_cast<size_t>(len) <= m.v.size(), FormatError,
                  "rle_decode: runs exceed mask size");
    for (int i = 0; i < len; i++) m.v[pos++] = cur;
    cur = cur ? 0 : 1;
  }
  TOKEDIT_CHECK(pos == m.v.size(), FormatError, "rle_decode: runs cover %zu of %zu", pos,
                m.v.size());
  return m;
}

struct EntitySpec {
  Shape shape = Shape::Circle;
  ColorName color = ColorName::Red;
  int cx = 0, cy = 0;
  int half_extent = 0;
  int draw_order = 0;
};

struct SceneSpec {
  Background background = Background::PlainDark;
  std::vector<EntitySpec> entities;
  uint64_t seed = 0;
};

struct Sample {
  ImageRGB image;
  std::string caption;
  std::vector<PixelMask> entity_masks;
  std::vector<std::string> entity_nouns;
};

enum class EditKind { Appearance, Replacement };

struct ManipulationCase {
  Sample source;
  SceneSpec source_spec;
  std::string target_text;
  std::string prompt_word;
  EditKind edit_kind = EditKind::Appearance;
  bool use_vision_guidance = true;
  Sample target_oracle;
  int edited_entity_index = 0;
};

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline bool entity_covers(const EntitySpec& e, int x, int y) {
  int dx = x - e.cx, dy = y - e.cy, h = e.half_extent;
  switch (e.shape) {
    case Shape::Circle:
      return dx * dx + dy * dy <= h * h;
    case Shape::Square:
      return std::abs(dx) <= h && std::abs(dy) <= h;
    case Shape::Triangle:
      // vertices (cx, cy-h), (cx-h, cy+h), (cx+h, cy+h)
      return dy >= -h && dy <= h && 2 * std::abs(dx) <= dy + h;
  }
  return false;
}

inline bool entity_in_bounds(const EntitySpec& e, int size) {
  return e.half_extent > 0 && e.cx - e.half_extent >= 0 && e.cx + e.half_extent < size &&
         e.cy - e.half_extent >= 0 && e.cy + e.half_extent < size;
}

// Patterns carry a per-scene phase (derived from the scene seed) so they do
// not align with the token grid; identical cells everywhere would leave most
// of the codebook idle.
inline void paint_background(ImageRGB& img, Background bg, uint64_t scene_seed) {
  uint64_t h = splitmix64(scene_seed ^ 0xb6c0ff5e);
  int px = static_cast<int>(h % 8);
  int py = static_cast<int>((h >> 8) % 8);
  int ps = static_cast<int>((h >> 16) % 16);
  auto set = [&](int y, int x, uint8_t r, uint8_t g, uint8_t b) {
    img.at(y, x, 0) = r / 255.0f;
    img.at(y, x, 1) = g / 255.0f;
    img.at(y, x, 2) = b / 255.0f;
  };
  for (int y = 0; y < img.h; y++)
    for (int x = 0; x < img.w; x++) {
      switch (bg) {
        case Background::PlainDark:
          set(y, x, 18, 18, 22);
          break;
        case Background::LightDots: {
          int dx = (x + px) % 8, dy = (y + py) % 8;
          if ((dx == 3 || dx == 4) && (dy == 3 || dy == 4))
            set(y, x, 72, 72, 84);
          else
            set(y, x, 18, 18, 22);
          break;
        }
        case Background::DarkStripes:
          if ((x + y + ps) % 16 < 8)
            set(y, x, 32, 32, 40);
          else
            set(y, x, 12, 12, 16);
          break;
      }
    }
}

// ---------------------------------------------------------------------------
// Rendering / captions
// ---------------------------------------------------------------------------

inline Sample render_scene(const SceneSpec& spec);
inline std::string make_caption(const SceneSpec& spec);

inline std::vector<const EntitySpec*> caption_order(const SceneSpec& spec) {
  std::vector<const EntitySpec*> order;
  for (const auto& e : spec.entities) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](const EntitySpec* a, const EntitySpec* b) {
    if (a->cx != b->cx) return a->cx < b->cx;
    return a->cy < b->cy;
  });
  return order;
}

inline std::string make_caption(const SceneSpec& spec) {
  std::string caption;
  auto order = caption_order(spec);
  for (size_t i = 0; i < order.size(); i++) {
    if (i) caption += " and ";
    caption += "a ";
    caption += color_word(order[i]->color);
    caption += " ";
    caption += shape_word(order[i]->shape);
  }
  return caption;
}

// Inverse of make_caption: (color, shape) pairs in left-to-right order.
inline std::vector<std::pair<ColorName, Shape>> parse_caption(const std::string& caption) {
  std::vector<std::string> words;
  std::istringstream iss(caption);
  std::string w;
  while (iss >> w) words.push_back(w);
  std::vector<std::pair<ColorName, Shape>> out;
  size_t i = 0;
  while (i < words.size()) {
    TOKEDIT_CHECK(words[i] == "a" && i + 2 < words.size() + 1 && i + 2 <= words.size(),
                  FormatError, "caption fragment malformed at word %zu", i);
    ColorName c;
    Shape s;
    TOKEDIT_CHECK(color_from_word(words[i + 1], &c), FormatError, "bad color word '%s'",
                  words[i + 1].c_str());
    TOKEDIT_CHECK(shape_from_word(words[i + 2], &s), FormatError, "bad shape word '%s'",
                  words[i + 2].c_str());
    out.emplace_back(c, s);
    i += 3;
    if (i < words.size()) {
      TOKEDIT_CHECK(words[i] == "and", FormatError, "expected 'and', got '%s'", words[i].c_str());
      i++;
    }
  }
  return out;
}

inline Sample render_scene(const SceneSpec& spec) {
  TOKEDIT_CHECK(!spec.entities.empty() && spec.entities.size() <= 3, PlacementError,
                "scene must contain 1-3 entities, got %zu", spec.entities.size());
  for (const auto& e : spec.entities)
    TOKEDIT_CHECK(entity_in_bounds(e, kImageSize), PlacementError,
                  "entity out of bounds (cx=%d cy=%d h=%d)", e.cx, e.cy, e.half_extent);

  Sample s;
  s.image = ImageRGB(kImageSize, kImageSize);
  paint_background(s.image, spec.background, spec.seed);

  s.entity_masks.assign(spec.entities.size(), PixelMask(kImageSize, kImageSize));
  for (size_t i = 0; i < spec.entities.size(); i++) {
    const auto& e = spec.entities[i];
    for (int y = e.cy - e.half_extent; y <= e.cy + e.half_extent; y++)
      for (int x = e.cx - e.half_extent; x <= e.cx + e.half_extent; x++)
        if (entity_covers(e, x, y)) s.entity_masks[i].at(y, x) = 1;
    s.entity_nouns.push_back(shape_word(e.shape));
  }

  // exact disjointness; overlapping specs are rejected, not silently layered
  for (int y = 0; y < kImageSize; y++)
    for (int x = 0; x < kImageSize; x++) {
      int cover = 0;
      for (const auto& m : s.entity_masks) cover += m.at(y, x) ? 1 : 0;
      TOKEDIT_CHECK(cover <= 1, PlacementError, "entities overlap at (%d,%d)", x, y);
    }

  std::vector<size_t> order(spec.entities.size());
  for (size_t i = 0; i < order.size(); i++) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return spec.entities[a].draw_order < spec.entities[b].draw_order;
  });
  for (size_t oi : order) {
    auto rgb = color_rgb_f(spec.entities[oi].color);
    for (int y = 0; y < kImageSize; y++)
      for (int x = 0; x < kImageSize; x++)
        if (s.entity_masks[oi].at(y, x)) {
          s.image.at(y, x, 0) = rgb[0];
          s.image.at(y, x, 1) = rgb[1];
          s.image.at(y, x, 2) = rgb[2];
        }
  }

  s.caption = make_caption(spec);
  return s;
}

// ---------------------------------------------------------------------------
// Scene sampling
// ---------------------------------------------------------------------------

struct SceneSamplerOptions {
  int min_entities = 1;
  int max_entities = 3;
  int min_half_extent = 6;
  int max_half_extent = 13;
  int margin = 2;   // from image border
  int gap = 2;      // between bounding boxes
  int max_attempts = 1000;
};

// Entities get distinct shapes (at most one circle/square/triangle per
// scene), which keeps prompt words unambiguous within a scene.
inline SceneSpec sample_scene_spec(Rng& rng, uint64_t scene_seed,
                                   const SceneSamplerOptions& opt = {}) {
  SceneSpec spec;
  spec.seed = scene_seed;
  spec.background = static_cast<Background>(rng.uniform_int(0, kNumBackgrounds - 1));
  int n = rng.uniform_int(opt.min_entities, opt.max_entities);
  std::vector<int> shapes = {0, 1, 2};
  rng.shuffle(shapes);

  for (int i = 0; i < n; i++) {
    EntitySpec e;
    e.shape = static_cast<Shape>(shapes[static_cast<size_t>(i)]);
    e.color = static_cast<ColorName>(rng.uniform_int(0, kNumColors - 1));
    e.draw_order = i;
    bool placed = false;
    for (int attempt = 0; attempt < opt.max_attempts; attempt++) {
      e.half_extent = rng.uniform_int(opt.min_half_extent, opt.max_half_extent);
      int lo = opt.margin + e.half_extent;
      int hi = kImageSize - 1 - opt.margin - e.half_extent;
      e.cx = rng.uniform_int(lo, hi);
      e.cy = rng.uniform_int(lo, hi);
      bool ok = true;
      for (const auto& other : spec.entities) {
        int sep = e.half_extent + other.half_extent + opt.gap;
        if (std::abs(e.cx - other.cx) <= sep && std::abs(e.cy - other.cy) <= sep) {
          ok = false;
          break;
        }
      }
      if (ok) {
        placed = true;
        break;
      }
    }
    TOKEDIT_CHECK(placed, PlacementError,
                  "could not place entity %d disjointly after %d attempts", i, opt.max_attempts);
    spec.entities.push_back(e);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Edit cases
// ---------------------------------------------------------------------------

inline ManipulationCase make_edit_case(const Sample& sample, const SceneSpec& spec,
                                       EditKind kind, Rng& rng) {
  TOKEDIT_CHECK(!spec.entities.empty(), PlacementError, "make_edit_case: empty scene");
  int e = rng.uniform_int(0, static_cast<int>(spec.entities.size()) - 1);
  SceneSpec edited = spec;
  if (kind == EditKind::Appearance) {
    int old_color = static_cast<int>(spec.entities[static_cast<size_t>(e)].color);
    int shift = rng.uniform_int(1, kNumColors - 1);
    edited.entities[static_cast<size_t>(e)].color =
        static_cast<ColorName>((old_color + shift) % kNumColors);
  } else {
    int old_shape = static_cast<int>(spec.entities[static_cast<size_t>(e)].shape);
    int shift = rng.uniform_int(1, kNumShapes - 1);
    edited.entities[static_cast<size_t>(e)].shape =
        static_cast<Shape>((old_shape + shift) % kNumShapes);
  }

  ManipulationCase mc;
  mc.source = sample;
  mc.source_spec = spec;
  mc.edit_kind = kind;
  mc.use_vision_guidance = (kind == EditKind::Appearance);
  mc.prompt_word = shape_word(spec.entities[static_cast<size_t>(e)].shape);
  mc.target_text = make_caption(edited);
  mc.target_oracle = render_scene(edited);
  mc.edited_entity_index = e;
  return mc;
}

// ---------------------------------------------------------------------------
// Dataset persistence
// dir/
//   MANIFEST      magic, format version, root seed, count
//   meta.jsonl    one record per sample: caption, spec, RLE masks, nouns
//   images/{id}.png
// ---------------------------------------------------------------------------

struct Dataset {
  uint64_t root_seed = 0;
  std::vector<SceneSpec> specs;
  std::vector<Sample> samples;

  size_t size() const { return samples.size(); }
};

constexpr const char* kDatasetMagic = "TOKEDIT-DATASET";
constexpr int kDatasetVersion = 1;

inline nlohmann::json spec_to_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["background"] = background_name(spec.background);
  j["seed"] = spec.seed;
  j["entities"] = nlohmann::json::array();
  for (const auto& e : spec.entities) {
    j["entities"].push_back({{"shape", shape_word(e.shape)},
                             {"color", color_word(e.color)},
                             {"cx", e.cx},
                             {"cy", e.cy},
                             {"half_extent", e.half_extent},
                             {"draw_order", e.draw_order}});
  }
  return j;
}

inline SceneSpec spec_from_json(const nlohmann::json& j) {
  SceneSpec spec;
  TOKEDIT_CHECK(background_from_name(j.at("background").get<std::string>(), &spec.background),
                FormatError, "unknown background");
  spec.seed = j.at("seed").get<uint64_t>();
  for (const auto& je : j.at("entities")) {
    EntitySpec e;
    TOKEDIT_CHECK(shape_from_word(je.at("shape").get<std::string>(), &e.shape), FormatError,
                  "unknown shape word");
    TOKEDIT_CHECK(color_from_word(je.at("color").get<std::string>(), &e.color), FormatError,
                  "unknown color word");
    e.cx = je.at("cx").get<int>();
    e.cy = je.at("cy").get<int>();
    e.half_extent = je.at("half_extent").get<int>();
    e.draw_order = je.at("draw_order").get<int>();
    spec.entities.push_back(e);
  }
  return spec;
}

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  TOKEDIT_CHECK(ds.specs.size() == ds.samples.size(), ShapeError, "dataset: specs/samples differ");
  fs::create_directories(fs::path(dir) / "images");

  std::ofstream manifest(fs::path(dir) / "MANIFEST");
  TOKEDIT_CHECK(manifest.good(), IoError, "cannot write MANIFEST in %s", dir.c_str());
  manifest << kDatasetMagic << " v" << kDatasetVersion << "\n";
  manifest << "root_seed " << ds.root_seed << "\n";
  manifest << "count " << ds.samples.size() << "\n";
  manifest.close();

  std::ofstream meta(fs::path(dir) / "meta.jsonl");
  TOKEDIT_CHECK(meta.good(), IoError, "cannot write meta.jsonl in %s", dir.c_str());
  for (size_t i = 0; i < ds.samples.size(); i++) {
    const Sample& s = ds.samples[i];
    nlohmann::json j;
    j["id"] = i;
    j["caption"] = s.caption;
    j["nouns"] = s.entity_nouns;
    j["spec"] = spec_to_json(ds.specs[i]);
    j["masks"] = nlohmann::json::array();
    for (const auto& m : s.entity_masks) j["masks"].push_back(rle_encode(m));
    meta << j.dump() << "\n";
    write_png((fs::path(dir) / "images" / (std::to_string(i) + ".png")).string(), s.image);
  }
}

inline Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "MANIFEST");
  TOKEDIT_CHECK(manifest.good(), IoError, "cannot open MANIFEST in %s", dir.c_str());
  std::string magic, version;
  manifest >> magic >> version;
  TOKEDIT_CHECK(magic == kDatasetMagic, FormatError, "bad dataset magic '%s'", magic.c_str());
  TOKEDIT_CHECK(version == "v" + std::to_string(kDatasetVersion), FormatError,
                "unsupported dataset version '%s'", version.c_str());
  Dataset ds;
  std::string key;
  size_t count = 0;
  manifest >> key >> ds.root_seed;
  TOKEDIT_CHECK(key == "root_seed", FormatError, "MANIFEST missing root_seed");
  manifest >> key >> count;
  TOKEDIT_CHECK(key == "count", FormatError, "MANIFEST missing count");

  std::ifstream meta(fs::path(dir) / "meta.jsonl");
  TOKEDIT_CHECK(meta.good(), IoError, "cannot open meta.jsonl in %s", dir.c_str());
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("meta.jsonl parse error: ") + e.what());
    }
    Sample s;
    s.caption = j.at("caption").get<std::string>();
    s.entity_nouns = j.at("nouns").get<std::vector<std::string>>();
    for (const auto& jr : j.at("masks"))
      s.entity_masks.push_back(rle_decode(jr.get<std::vector<int>>(), kImageSize, kImageSize));
    size_t id = j.at("id").get<size_t>();
    s.image = read_png((fs::path(dir) / "images" / (std::to_string(id) + ".png")).string());
    ds.specs.push_back(spec_from_json(j.at("spec")));
    ds.samples.push_back(std::move(s));
  }
  TOKEDIT_CHECK(ds.samples.size() == count, FormatError, "dataset count %zu != MANIFEST %zu",
                ds.samples.size(), count);
  return ds;
}

// ---------------------------------------------------------------------------
// Generation driver + fixed 90/10 split
// ---------------------------------------------------------------------------

inline Dataset generate_dataset(size_t n, uint64_t root_seed,
                                const SceneSamplerOptions& opt = {}) {
  Dataset ds;
  ds.root_seed = root_seed;
  for (size_t i = 0; i < n; i++) {
    uint64_t scene_seed = derive_seed(root_seed, "synthdata.scene", i);
    Rng rng(scene_seed);
    SceneSpec spec = sample_scene_spec(rng, scene_seed, opt);
    ds.specs.push_back(spec);
    ds.samples.push_back(render_scene(spec));
  }
  return ds;
}

inline bool is_validation_index(uint64_t root_seed, size_t index) {
  return derive_seed(root_seed, "synthdata.split", index) % 10 == 0;
}

}  // namespace tokedit
