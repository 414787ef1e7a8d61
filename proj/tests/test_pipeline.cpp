#include <catch2/catch_amalgamated.hpp>

#include "tokedit/pipeline.hpp"

using namespace tokedit;

namespace {
struct Fixture {
  Vocabulary vocab{128};
  Vqae vq;
  ModelConfig mc;
  DualEncoder critic;
  ArTransformer tf;
  Pipeline pipe;
  Sample sample;
  SceneSpec spec;

  Fixture()
      : vq(CodebookConfig{}, 3),
        mc(small_cfg()),
        critic(DualEncoderConfig{}, vocab, EncoderRole::Critic, 5),
        tf(mc, vocab, 8, 8, 7),
        pipe(vq, tf, critic) {
    spec.entities = {{Shape::Circle, ColorName::Red, 20, 20, 8, 0},
                     {Shape::Square, ColorName::Blue, 46, 46, 8, 1}};
    sample = render_scene(spec);
  }

  static ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.ffn_mult = 2;
    return cfg;
  }

  ManipulationRequest base_request(double theta) const {
    ManipulationRequest req;
    req.image = sample.image;
    req.target_text = "a green circle and a blue square";
    req.prompt_word = "circle";
    req.use_vision_guidance = true;
    req.sampling.seed = 42;
    req.alignment.theta = theta;
    return req;
  }
};
}  // namespace

TEST_CASE("empty selection is an explicit no-op equal to reconstruction") {
  Fixture f;
  ManipulationRequest req = f.base_request(/*theta=*/1.0);  // nothing clears 1.0
  ManipulationResult res = f.pipe.manipulate(req, f.sample.entity_masks);
  REQUIRE(res.nothing_selected);
  REQUIRE(res.alignment.union_mask.empty());
  REQUIRE(res.tokens_after == res.tokens_before);
  ImageRGB recon = f.pipe.reconstruct(f.sample.image);
  REQUIRE(images_equal(res.output, recon));
}

TEST_CASE("tokens outside the selected union are preserved bit-exactly") {
  Fixture f;
  ManipulationRequest req = f.base_request(/*theta=*/-1.0);  // everything selected
  ManipulationResult res = f.pipe.manipulate(req, f.sample.entity_masks);
  REQUIRE_FALSE(res.nothing_selected);
  REQUIRE(res.alignment.any_selected());
  for (int i = 0; i < 64; i++)
    if (!res.alignment.union_mask.selected[static_cast<size_t>(i)])
      REQUIRE(res.tokens_after.indices[static_cast<size_t>(i)] ==
              res.tokens_before.indices[static_cast<size_t>(i)]);
}

TEST_CASE("manipulation is deterministic given the request seed") {
  Fixture f;
  ManipulationRequest req = f.base_request(-1.0);
  ManipulationResult a = f.pipe.manipulate(req, f.sample.entity_masks);
  ManipulationResult b = f.pipe.manipulate(req, f.sample.entity_masks);
  REQUIRE(a.tokens_after == b.tokens_after);
  REQUIRE(images_equal(a.output, b.output));

  req.sampling.seed = 43;
  ManipulationResult c = f.pipe.manipulate(req, f.sample.entity_masks);
  REQUIRE(a.tokens_after.indices != c.tokens_after.indices);
}

TEST_CASE("reconstruction is deterministic") {
  Fixture f;
  ImageRGB a = f.pipe.reconstruct(f.sample.image);
  ImageRGB b = f.pipe.reconstruct(f.sample.image);
  REQUIRE(images_equal(a, b));
}

TEST_CASE("out-of-vocabulary target text is rejected") {
  Fixture f;
  ManipulationRequest req = f.base_request(-1.0);
  req.target_text = "a crimson circle";
  REQUIRE_THROWS_AS(f.pipe.manipulate(req, f.sample.entity_masks), VocabError);
}

TEST_CASE("word-patch method drives the pipeline through the same contract") {
  Fixture f;
  ManipulationRequest req = f.base_request(-1.0);
  req.alignment.method = AlignmentMethod::WordPatch;
  ManipulationResult res = f.pipe.manipulate(req, f.sample.entity_masks);
  REQUIRE(res.alignment.union_mask.count() == 64);  // theta=-1 selects all cells
  req.alignment.theta = 1.0;
  ManipulationResult none = f.pipe.manipulate(req, f.sample.entity_masks);
  REQUIRE(none.nothing_selected);
}

TEST_CASE("reranking returns candidate scores") {
  Fixture f;
  ManipulationRequest req = f.base_request(-1.0);
  req.sampling.rerank_candidates = 3;
  ManipulationResult res = f.pipe.manipulate(req, f.sample.entity_masks);
  REQUIRE(res.candidate_scores.size() == 3);
  // the returned grid is the best-scoring candidate
  double best = *std::max_element(res.candidate_scores.begin(), res.candidate_scores.end());
  std::string caption = req.target_text;
  double got = f.critic.global_similarity(f.vq.decode_tokens(res.tokens_after), caption);
  REQUIRE(got == Catch::Approx(best).margin(1e-9));
}

TEST_CASE("grid mismatch between stages is a dependency error") {
  Vocabulary vocab(128);
  Vqae vq;
  ModelConfig mc = Fixture::small_cfg();
  ArTransformer tf(mc, vocab, 4, 4, 9);  // wrong grid
  DualEncoder critic(DualEncoderConfig{}, vocab, EncoderRole::Critic, 5);
  REQUIRE_THROWS_AS(Pipeline(vq, tf, critic), DependencyError);
}
