#pragma once

// Closed caption grammar: captions are "a {color} {shape}" fragments joined
// by " and ", entities ordered left to right. Color names map bijectively to
// fixed RGB triples; all palette values are exact multiples of 1/255 so PNG
// round trips are lossless.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tokedit/common.hpp"

namespace tokedit {

enum class Shape : int { Circle = 0, Square = 1, Triangle = 2 };
enum class ColorName : int {
  Red = 0,
  Green = 1,
  Blue = 2,
  Yellow = 3,
  Cyan = 4,
  Magenta = 5,
  Orange = 6,
  White = 7
};
enum class Background : int { PlainDark = 0, LightDots = 1, DarkStripes = 2 };

constexpr int kImageSize = 64;
constexpr int kNumShapes = 3;
constexpr int kNumColors = 8;
constexpr int kNumBackgrounds = 3;

inline const char* shape_word(Shape s) {
  switch (s) {
    case Shape::Circle: return "circle";
    case Shape::Square: return "square";
    case Shape::Triangle: return "triangle";
  }
  throw Error("bad shape");
}

inline const char* color_word(ColorName c) {
  static const char* names[kNumColors] = {"red",  "green",   "blue",   "yellow",
                                          "cyan", "magenta", "orange", "white"};
  return names[static_cast<int>(c)];
}

inline const char* background_name(Background b) {
  switch (b) {
    case Background::PlainDark: return "plain-dark";
    case Background::LightDots: return "light-dots";
    case Background::DarkStripes: return "dark-stripes";
  }
  throw Error("bad background");
}

inline std::array<uint8_t, 3> color_rgb_u8(ColorName c) {
  static const std::array<uint8_t, 3> rgb[kNumColors] = {
      {220, 30, 30},    // red
      {40, 200, 60},    // green
      {40, 80, 230},    // blue
      {235, 220, 40},   // yellow
      {40, 210, 210},   // cyan
      {210, 50, 210},   // magenta
      {240, 140, 20},   // orange
      {245, 245, 245},  // white
  };
  return rgb[static_cast<int>(c)];
}

inline std::array<float, 3> color_rgb_f(ColorName c) {
  auto u = color_rgb_u8(c);
  return {u[0] / 255.0f, u[1] / 255.0f, u[2] / 255.0f};
}

inline bool shape_from_word(const std::string& w, Shape* out) {
  for (int i = 0; i < kNumShapes; i++)
    if (w == shape_word(static_cast<Shape>(i))) {
      *out = static_cast<Shape>(i);
      return true;
    }
  return false;
}

inline bool color_from_word(const std::string& w, ColorName* out) {
  for (int i = 0; i < kNumColors; i++)
    if (w == color_word(static_cast<ColorName>(i))) {
      *out = static_cast<ColorName>(i);
      return true;
    }
  return false;
}

inline bool background_from_name(const std::string& w, Background* out) {
  for (int i = 0; i < kNumBackgrounds; i++)
    if (w == background_name(static_cast<Background>(i))) {
      *out = static_cast<Background>(i);
      return true;
    }
  return false;
}

// Every word that can appear in a caption.
inline std::vector<std::string> grammar_words() {
  std::vector<std::string> words = {"a", "and"};
  for (int i = 0; i < kNumColors; i++) words.push_back(color_word(static_cast<ColorName>(i)));
  for (int i = 0; i < kNumShapes; i++) words.push_back(shape_word(static_cast<Shape>(i)));
  return words;
}

}  // namespace tokedit
