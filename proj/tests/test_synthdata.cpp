#include <algorithm>
#include <filesystem>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "tokedit/synthdata.hpp"

using namespace tokedit;

namespace {
SceneSpec single_red_circle() {
  SceneSpec spec;
  spec.background = Background::PlainDark;
  EntitySpec e;
  e.shape = Shape::Circle;
  e.color = ColorName::Red;
  e.cx = 32;
  e.cy = 32;
  e.half_extent = 10;
  spec.entities.push_back(e);
  return spec;
}
}  // namespace

TEST_CASE("single red circle renders a disc with an exact mask") {
  Sample s = render_scene(single_red_circle());
  auto rgb = color_rgb_f(ColorName::Red);
  int on = 0;
  for (int y = 0; y < kImageSize; y++)
    for (int x = 0; x < kImageSize; x++) {
      bool inside = (x - 32) * (x - 32) + (y - 32) * (y - 32) <= 100;
      REQUIRE(s.entity_masks[0].at(y, x) == (inside ? 1 : 0));
      if (inside) {
        on++;
        REQUIRE(s.image.at(y, x, 0) == rgb[0]);
        REQUIRE(s.image.at(y, x, 1) == rgb[1]);
        REQUIRE(s.image.at(y, x, 2) == rgb[2]);
      }
    }
  REQUIRE(on > 0);
  REQUIRE(s.caption == "a red circle");
  REQUIRE(s.entity_nouns == std::vector<std::string>{"circle"});
}

TEST_CASE("rendering is deterministic") {
  Sample a = render_scene(single_red_circle());
  Sample b = render_scene(single_red_circle());
  REQUIRE(images_equal(a.image, b.image));
  REQUIRE(a.entity_masks[0] == b.entity_masks[0]);
}

TEST_CASE("generated scenes have pairwise-disjoint masks") {
  // exhaustive pixel scan over many generated scenes
  for (uint64_t seed = 0; seed < 50; seed++) {
    Rng rng(derive_seed(99, "test.scene", seed));
    SceneSpec spec = sample_scene_spec(rng, seed);
    Sample s = render_scene(spec);
    for (int y = 0; y < kImageSize; y++)
      for (int x = 0; x < kImageSize; x++) {
        int cover = 0;
        for (const auto& m : s.entity_masks) cover += m.at(y, x) ? 1 : 0;
        REQUIRE(cover <= 1);
      }
  }
}

TEST_CASE("overlapping spec is rejected") {
  SceneSpec spec = single_red_circle();
  EntitySpec e2 = spec.entities[0];
  e2.shape = Shape::Square;
  e2.cx = 34;  // overlaps the circle
  spec.entities.push_back(e2);
  REQUIRE_THROWS_AS(render_scene(spec), PlacementError);

  SceneSpec oob = single_red_circle();
  oob.entities[0].cx = 2;  // circle pokes out of bounds
  REQUIRE_THROWS_AS(render_scene(oob), PlacementError);
}

TEST_CASE("caption orders entities left to right") {
  SceneSpec spec;
  EntitySpec blue_square{Shape::Square, ColorName::Blue, 12, 30, 6, 0};
  EntitySpec green_tri{Shape::Triangle, ColorName::Green, 50, 30, 6, 1};
  spec.entities = {green_tri, blue_square};  // listed right-to-left
  REQUIRE(make_caption(spec) == "a blue square and a green triangle");
}

TEST_CASE("caption is invariant to entity list permutations") {
  SceneSpec spec;
  spec.entities = {
      {Shape::Circle, ColorName::Red, 12, 12, 6, 0},
      {Shape::Square, ColorName::Cyan, 32, 40, 7, 1},
      {Shape::Triangle, ColorName::White, 52, 20, 6, 2},
  };
  std::string expect = make_caption(spec);
  std::vector<int> perm = {0, 1, 2};
  do {
    SceneSpec p = spec;
    p.entities = {spec.entities[static_cast<size_t>(perm[0])],
                  spec.entities[static_cast<size_t>(perm[1])],
                  spec.entities[static_cast<size_t>(perm[2])]};
    REQUIRE(make_caption(p) == expect);
  } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST_CASE("caption parses back to the originating multiset in order") {
  for (uint64_t seed = 0; seed < 30; seed++) {
    Rng rng(derive_seed(7, "test.parse", seed));
    SceneSpec spec = sample_scene_spec(rng, seed);
    auto parsed = parse_caption(make_caption(spec));
    auto order = caption_order(spec);
    REQUIRE(parsed.size() == order.size());
    for (size_t i = 0; i < parsed.size(); i++) {
      REQUIRE(parsed[i].first == order[i]->color);
      REQUIRE(parsed[i].second == order[i]->shape);
    }
  }
}

TEST_CASE("appearance edit changes one color word and keeps guidance on") {
  SceneSpec spec = single_red_circle();
  Sample s = render_scene(spec);
  Rng rng(5);
  ManipulationCase mc = make_edit_case(s, spec, EditKind::Appearance, rng);
  REQUIRE(mc.use_vision_guidance);
  REQUIRE(mc.prompt_word == "circle");
  auto parsed = parse_caption(mc.target_text);
  REQUIRE(parsed.size() == 1);
  REQUIRE(parsed[0].second == Shape::Circle);
  REQUIRE(parsed[0].first != ColorName::Red);

  // oracle touches only the edited entity's footprint
  for (int y = 0; y < kImageSize; y++)
    for (int x = 0; x < kImageSize; x++)
      if (!s.entity_masks[0].at(y, x))
        for (int c = 0; c < 3; c++)
          REQUIRE(mc.target_oracle.image.at(y, x, c) == s.image.at(y, x, c));
}

TEST_CASE("replacement edit changes one shape word and disables guidance") {
  SceneSpec spec = single_red_circle();
  Sample s = render_scene(spec);
  Rng rng(6);
  ManipulationCase mc = make_edit_case(s, spec, EditKind::Replacement, rng);
  REQUIRE_FALSE(mc.use_vision_guidance);
  REQUIRE(mc.prompt_word == "circle");
  auto parsed = parse_caption(mc.target_text);
  REQUIRE(parsed.size() == 1);
  REQUIRE(parsed[0].second != Shape::Circle);
  REQUIRE(parsed[0].first == ColorName::Red);

  // outside the union of old and new footprints the oracle equals the source
  const PixelMask& oldm = s.entity_masks[0];
  const PixelMask& newm = mc.target_oracle.entity_masks[0];
  for (int y = 0; y < kImageSize; y++)
    for (int x = 0; x < kImageSize; x++)
      if (!oldm.at(y, x) && !newm.at(y, x))
        for (int c = 0; c < 3; c++)
          REQUIRE(mc.target_oracle.image.at(y, x, c) == s.image.at(y, x, c));
}

TEST_CASE("rle round-trips masks") {
  for (uint64_t seed = 0; seed < 20; seed++) {
    Rng rng(derive_seed(3, "test.rle", seed));
    SceneSpec spec = sample_scene_spec(rng, seed);
    Sample s = render_scene(spec);
    for (const auto& m : s.entity_masks) {
      auto runs = rle_encode(m);
      REQUIRE(rle_decode(runs, m.h, m.w) == m);
    }
  }
  // degenerate masks
  PixelMask empty(8, 8);
  REQUIRE(rle_decode(rle_encode(empty), 8, 8) == empty);
  PixelMask fullm(8, 8);
  std::fill(fullm.v.begin(), fullm.v.end(), 1);
  REQUIRE(rle_decode(rle_encode(fullm), 8, 8) == fullm);
}

TEST_CASE("dataset write/read round-trips 100 samples") {
  auto dir = std::filesystem::temp_directory_path() / "tokedit_ds_test";
  std::filesystem::remove_all(dir);
  Dataset ds = generate_dataset(100, 20240701);
  write_dataset(ds, dir.string());
  Dataset back = read_dataset(dir.string());
  REQUIRE(back.root_seed == ds.root_seed);
  REQUIRE(back.size() == ds.size());
  for (size_t i = 0; i < ds.size(); i++) {
    REQUIRE(images_equal(back.samples[i].image, ds.samples[i].image));
    REQUIRE(back.samples[i].caption == ds.samples[i].caption);
    REQUIRE(back.samples[i].entity_nouns == ds.samples[i].entity_nouns);
    REQUIRE(back.samples[i].entity_masks.size() == ds.samples[i].entity_masks.size());
    for (size_t m = 0; m < ds.samples[i].entity_masks.size(); m++)
      REQUIRE(back.samples[i].entity_masks[m] == ds.samples[i].entity_masks[m]);
    REQUIRE(back.specs[i].background == ds.specs[i].background);
    REQUIRE(back.specs[i].seed == ds.specs[i].seed);
    REQUIRE(back.specs[i].entities.size() == ds.specs[i].entities.size());
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("wrong magic header is a format error") {
  auto dir = std::filesystem::temp_directory_path() / "tokedit_ds_badmagic";
  std::filesystem::remove_all(dir);
  Dataset ds = generate_dataset(2, 1);
  write_dataset(ds, dir.string());
  {
    std::ofstream manifest(dir / "MANIFEST");
    manifest << "NOT-A-DATASET v1\nroot_seed 1\ncount 2\n";
  }
  REQUIRE_THROWS_AS(read_dataset(dir.string()), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("generation is reproducible and the split is fixed") {
  Dataset a = generate_dataset(20, 555);
  Dataset b = generate_dataset(20, 555);
  for (size_t i = 0; i < a.size(); i++)
    REQUIRE(images_equal(a.samples[i].image, b.samples[i].image));

  size_t val = 0;
  for (size_t i = 0; i < 1000; i++) val += is_validation_index(555, i) ? 1 : 0;
  REQUIRE(val > 50);
  REQUIRE(val < 200);
  REQUIRE(is_validation_index(555, 3) == is_validation_index(555, 3));
}
