#pragma once

// End-to-end manipulation: encode the image to tokens, align entities against
// the prompt word, regenerate only the selected token positions conditioned
// on the target text (plus grayscale guidance when requested), decode.
// Positions outside the selected union are forced to their original tokens,
// so preservation there is bit-exact.

#include <string>
#include <vector>

#include "tokedit/alignment.hpp"
#include "tokedit/artransformer.hpp"
#include "tokedit/common.hpp"
#include "tokedit/dualencoder.hpp"
#include "tokedit/vqae.hpp"

namespace tokedit {

struct ManipulationRequest {
  ImageRGB image;
  std::string target_text;
  std::string prompt_word;
  bool use_vision_guidance = false;
  SamplingConfig sampling;
  AlignmentConfig alignment;
};

struct ManipulationResult {
  ImageRGB output;
  TokenGrid tokens_before, tokens_after;
  AlignmentResult alignment;
  bool nothing_selected = false;  // empty selection: output == reconstruction
  uint64_t seed = 0;
  std::vector<double> candidate_scores;  // per rerank candidate, when used
};

class Pipeline {
 public:
  Pipeline(const Vqae& vq, const ArTransformer& transformer, const DualEncoder& critic)
      : vq_(&vq), tf_(&transformer), critic_(&critic) {
    TOKEDIT_CHECK(transformer.grid_h() == vq.config().h && transformer.grid_w() == vq.config().w,
                  DependencyError, "transformer grid %dx%d vs vqae %dx%d", transformer.grid_h(),
                  transformer.grid_w(), vq.config().h, vq.config().w);
  }

  const Vqae& vqae() const { return *vq_; }
  const ArTransformer& transformer() const { return *tf_; }
  const DualEncoder& critic() const { return *critic_; }

  ImageRGB reconstruct(const ImageRGB& image) const { return vq_->reconstruct(image); }

  ManipulationResult manipulate(const ManipulationRequest& req,
                                const std::vector<PixelMask>& entity_masks) const {
    const Vocabulary& vocab = tf_->vocab();
    TextSequence text = vocab.encode_text(req.target_text);  // rejects OOV words
    int gh = vq_->config().h, gw = vq_->config().w;

    ManipulationResult res;
    res.seed = req.sampling.seed;
    res.tokens_before = vq_->tokenize(req.image);

    if (req.alignment.method == AlignmentMethod::WordPatch) {
      res.alignment.union_mask =
          word_patch_alignment(req.image, req.prompt_word, *critic_, req.alignment, gh, gw);
    } else {
      res.alignment = select_entities(req.image, entity_masks, req.prompt_word, *critic_,
                                      req.alignment, gh, gw);
    }

    if (!res.alignment.any_selected()) {
      // nothing to manipulate: reported explicitly, never silently "edited"
      res.nothing_selected = true;
      res.tokens_after = res.tokens_before;
      res.output = vq_->decode_tokens(res.tokens_after);
      return res;
    }

    std::vector<uint8_t> fixed(static_cast<size_t>(gh) * gw, 0);
    for (size_t i = 0; i < fixed.size(); i++)
      fixed[i] = res.alignment.union_mask.selected[i] ? 0 : 1;

    TokenGrid gray;
    const TokenGrid* gray_ptr = nullptr;
    if (req.use_vision_guidance) {
      gray = vq_->grayscale_guidance_tokens(req.image);
      gray_ptr = &gray;
    }

    SampleResult sampled = sample_tokens(*tf_, text, gray_ptr, fixed, res.tokens_before,
                                         req.sampling, vq_, critic_);
    res.tokens_after = sampled.tokens;
    res.candidate_scores = std::move(sampled.candidate_scores);

    for (size_t i = 0; i < fixed.size(); i++)
      TOKEDIT_CHECK(!fixed[i] || res.tokens_after.indices[i] == res.tokens_before.indices[i],
                    Error, "token preservation violated at cell %zu", i);

    res.output = vq_->decode_tokens(res.tokens_after);
    return res;
  }

 private:
  const Vqae* vq_;
  const ArTransformer* tf_;
  const DualEncoder* critic_;
};

// The content-preservation pathway: manipulate with the image's own caption
// as target text, the edited entity's noun as prompt word, and guidance on.
inline ManipulationRequest positive_text_request(const ManipulationCase& mc,
                                                 const SamplingConfig& sampling,
                                                 const AlignmentConfig& alignment) {
  ManipulationRequest req;
  req.image = mc.source.image;
  req.target_text = mc.source.caption;
  req.prompt_word = mc.prompt_word;
  req.use_vision_guidance = true;
  req.sampling = sampling;
  req.alignment = alignment;
  return req;
}

inline ManipulationRequest edit_request(const ManipulationCase& mc,
                                        const SamplingConfig& sampling,
                                        const AlignmentConfig& alignment) {
  ManipulationRequest req;
  req.image = mc.source.image;
  req.target_text = mc.target_text;
  req.prompt_word = mc.prompt_word;
  req.use_vision_guidance = mc.use_vision_guidance;
  req.sampling = sampling;
  req.alignment = alignment;
  return req;
}

}  // namespace tokedit
