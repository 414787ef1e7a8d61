#pragma once

// Inference-time semantic alignment: entity pixel masks resample bilinearly
// to the token grid (any positive coverage selects the token), entities are
// scored by the mean upsampled prompt-word similarity over their token mask,
// and entities scoring strictly above theta are selected. The word-patch
// baseline thresholds the per-token similarity map with no entity grouping.

#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokedit/common.hpp"
#include "tokedit/dualencoder.hpp"
#include "tokedit/synthdata.hpp"

namespace tokedit {

// Threshold used by full-scale late-interaction models; tied to their
// embedding scale, so desk-scale runs should calibrate (calibrate_theta)
// instead of using it directly.
constexpr float kReferenceTheta = 0.163f;

struct TokenMask {
  int h = 0, w = 0;
  std::vector<uint8_t> selected;

  TokenMask() = default;
  TokenMask(int h_, int w_) : h(h_), w(w_), selected(static_cast<size_t>(h_) * w_, 0) {}
  uint8_t& at(int y, int x) { return selected[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return selected[static_cast<size_t>(y) * w + x]; }
  size_t count() const {
    size_t n = 0;
    for (auto b : selected) n += b ? 1 : 0;
    return n;
  }
  bool empty() const { return count() == 0; }
  bool operator==(const TokenMask& o) const {
    return h == o.h && w == o.w && selected == o.selected;
  }
};

inline TokenMask mask_or(const TokenMask& a, const TokenMask& b) {
  TOKEDIT_CHECK(a.h == b.h && a.w == b.w, ShapeError, "mask_or: shape mismatch");
  TokenMask out(a.h, a.w);
  for (size_t i = 0; i < out.selected.size(); i++)
    out.selected[i] = (a.selected[i] || b.selected[i]) ? 1 : 0;
  return out;
}

enum class SegmentationProvider { GroundTruth, ExternalFile };
enum class AlignmentMethod { SemanticAlignment, WordPatch };

struct AlignmentConfig {
  double theta = 0.0;  // desk-scale default comes from calibrate_theta
  SegmentationProvider provider = SegmentationProvider::GroundTruth;
  AlignmentMethod method = AlignmentMethod::SemanticAlignment;
  std::string external_mask_path;

  void validate() const {
    TOKEDIT_CHECK(std::isfinite(theta), Error, "theta must be finite");
  }
};

struct EntityAlignment {
  TokenMask token_mask;
  double mean_similarity = 0.0;
  bool selected = false;
  bool excluded_empty = false;
};

struct AlignmentResult {
  std::vector<EntityAlignment> entities;
  TokenMask union_mask;
  std::vector<std::string> warnings;

  bool any_selected() const { return !union_mask.empty(); }
};

// ---------------------------------------------------------------------------
// Pixel mask -> token mask. Bilinear resample with the area-consistent
// kernel, then select strictly positive cells. Weights are nonnegative and
// cover every input pixel, so any nonempty pixel mask yields a nonempty
// token mask, and OR over disjoint masks commutes with conversion.
// ---------------------------------------------------------------------------

inline TokenMask pixel_mask_to_token_mask(const PixelMask& mask, int h, int w) {
  TOKEDIT_CHECK(h >= 1 && w >= 1 && h <= mask.h && w <= mask.w, ShapeError,
                "pixel_mask_to_token_mask: %dx%d -> %dx%d", mask.h, mask.w, h, w);
  std::vector<float> plane(mask.v.size());
  for (size_t i = 0; i < mask.v.size(); i++) plane[i] = mask.v[i] ? 1.0f : 0.0f;
  auto res = resample_plane(plane, mask.h, mask.w, h, w);
  TokenMask out(h, w);
  for (size_t i = 0; i < res.size(); i++) out.selected[i] = res[i] > 0.0f ? 1 : 0;
  return out;
}

// Similarity map from the critic grid (4x4) up to the token grid.
inline std::vector<float> upsample_similarity(const std::vector<float>& map, int src, int h,
                                              int w) {
  TOKEDIT_CHECK(map.size() == static_cast<size_t>(src) * src, ShapeError,
                "upsample_similarity: map is not %dx%d", src, src);
  return resample_plane(map, src, src, h, w);
}

// ---------------------------------------------------------------------------
// Entity selection
// ---------------------------------------------------------------------------

inline AlignmentResult select_entities(const ImageRGB& image,
                                       const std::vector<PixelMask>& entity_masks,
                                       const std::string& prompt_word, const DualEncoder& critic,
                                       const AlignmentConfig& cfg, int grid_h, int grid_w) {
  cfg.validate();
  TOKEDIT_CHECK(!entity_masks.empty(), ShapeError, "select_entities: no entity masks");
  TOKEDIT_CHECK(critic.vocab().has_word(prompt_word), VocabError,
                "prompt word '%s' not in vocabulary", prompt_word.c_str());

  auto sim4 = critic.token_similarity(image, prompt_word);
  auto sim = upsample_similarity(sim4, critic.config().grid, grid_h, grid_w);

  AlignmentResult out;
  out.union_mask = TokenMask(grid_h, grid_w);
  for (size_t e = 0; e < entity_masks.size(); e++) {
    TOKEDIT_CHECK(entity_masks[e].h == image.h && entity_masks[e].w == image.w, ShapeError,
                  "entity mask %zu is %dx%d but image is %dx%d", e, entity_masks[e].h,
                  entity_masks[e].w, image.h, image.w);
    EntityAlignment ea;
    ea.token_mask = pixel_mask_to_token_mask(entity_masks[e], grid_h, grid_w);
    if (ea.token_mask.empty()) {
      ea.excluded_empty = true;
      ea.mean_similarity = -std::numeric_limits<double>::infinity();
      out.warnings.push_back(
          format_str("entity %zu has an empty token mask and was excluded", e));
      out.entities.push_back(std::move(ea));
      continue;
    }
    double acc = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < ea.token_mask.selected.size(); i++)
      if (ea.token_mask.selected[i]) {
        acc += sim[i];
        n++;
      }
    ea.mean_similarity = acc / static_cast<double>(n);
    ea.selected = ea.mean_similarity > cfg.theta;  // strictly above
    if (ea.selected) out.union_mask = mask_or(out.union_mask, ea.token_mask);
    out.entities.push_back(std::move(ea));
  }
  return out;
}

// Word-patch baseline: per-token threshold, no entity grouping.
inline TokenMask word_patch_alignment(const ImageRGB& image, const std::string& prompt_word,
                                      const DualEncoder& critic, const AlignmentConfig& cfg,
                                      int grid_h, int grid_w) {
  cfg.validate();
  TOKEDIT_CHECK(critic.vocab().has_word(prompt_word), VocabError,
                "prompt word '%s' not in vocabulary", prompt_word.c_str());
  auto sim4 = critic.token_similarity(image, prompt_word);
  auto sim = upsample_similarity(sim4, critic.config().grid, grid_h, grid_w);
  TokenMask out(grid_h, grid_w);
  for (size_t i = 0; i < sim.size(); i++)
    out.selected[i] = sim[i] > cfg.theta ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Mask providers. The external format is one JSON record per line with the
// same RLE runs the dataset uses.
// ---------------------------------------------------------------------------

inline std::vector<PixelMask> read_mask_file(const std::string& path, int h, int w) {
  std::ifstream is(path);
  TOKEDIT_CHECK(is.good(), IoError, "cannot open mask file %s", path.c_str());
  std::vector<PixelMask> masks;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("mask file parse error: ") + e.what());
    }
    masks.push_back(rle_decode(j.at("rle").get<std::vector<int>>(), h, w));
  }
  TOKEDIT_CHECK(!masks.empty(), FormatError, "mask file %s holds no masks", path.c_str());
  return masks;
}

inline void write_mask_file(const std::string& path, const std::vector<PixelMask>& masks) {
  std::ofstream os(path);
  TOKEDIT_CHECK(os.good(), IoError, "cannot write mask file %s", path.c_str());
  for (const auto& m : masks) {
    nlohmann::json j;
    j["rle"] = rle_encode(m);
    os << j.dump() << "\n";
  }
}

inline std::vector<PixelMask> get_entity_masks(const Sample& sample,
                                               const AlignmentConfig& cfg) {
  std::vector<PixelMask> masks;
  if (cfg.provider == SegmentationProvider::GroundTruth) {
    masks = sample.entity_masks;
  } else {
    masks = read_mask_file(cfg.external_mask_path, sample.image.h, sample.image.w);
  }
  for (const auto& m : masks)
    TOKEDIT_CHECK(m.h == sample.image.h && m.w == sample.image.w, ShapeError,
                  "mask %dx%d does not match image %dx%d", m.h, m.w, sample.image.h,
                  sample.image.w);
  return masks;
}

// ---------------------------------------------------------------------------
// Threshold calibration: sweep candidate thresholds and keep the one that
// best separates prompt-matching entities from the rest (per-entity accuracy
// over the validation scenes); ties resolve to the smallest threshold.
// ---------------------------------------------------------------------------

inline double calibrate_theta(const std::vector<Sample>& samples, const DualEncoder& critic,
                              int grid_h, int grid_w) {
  TOKEDIT_CHECK(!samples.empty(), Error, "calibrate_theta: no samples");
  std::vector<std::pair<double, bool>> scored;  // (mean similarity, matches prompt)
  AlignmentConfig cfg;
  cfg.theta = -2.0;  // select everything; we only need the means
  for (const auto& s : samples) {
    std::vector<std::string> prompts;
    for (const auto& noun : s.entity_nouns)
      if (std::find(prompts.begin(), prompts.end(), noun) == prompts.end())
        prompts.push_back(noun);
    for (const auto& prompt : prompts) {
      auto res = select_entities(s.image, s.entity_masks, prompt, critic, cfg, grid_h, grid_w);
      for (size_t e = 0; e < res.entities.size(); e++) {
        if (res.entities[e].excluded_empty) continue;
        scored.emplace_back(res.entities[e].mean_similarity, s.entity_nouns[e] == prompt);
      }
    }
  }
  TOKEDIT_CHECK(!scored.empty(), Error, "calibrate_theta: no scored entities");
  std::vector<double> candidates;
  candidates.push_back(-1.0);
  std::vector<double> means;
  for (auto& [m, pos] : scored) means.push_back(m);
  std::sort(means.begin(), means.end());
  for (size_t i = 0; i + 1 < means.size(); i++)
    candidates.push_back(0.5 * (means[i] + means[i + 1]));
  candidates.push_back(1.0);

  double best_theta = candidates[0];
  size_t best_correct = 0;
  for (double theta : candidates) {
    size_t correct = 0;
    for (auto& [m, pos] : scored) correct += ((m > theta) == pos) ? 1 : 0;
    if (correct > best_correct) {
      best_correct = correct;
      best_theta = theta;
    }
  }
  return best_theta;
}

}  // namespace tokedit
