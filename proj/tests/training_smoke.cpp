// Memorization sanity runs: each stage overfits a tiny dataset quickly.
// Slower than unit tests, far faster than the acceptance sweep.

#include <catch2/catch_amalgamated.hpp>

#include "tokedit/artransformer.hpp"
#include "tokedit/dualencoder.hpp"
#include "tokedit/evalharness.hpp"
#include "tokedit/vqae.hpp"

using namespace tokedit;

TEST_CASE("vqae memorizes a single image") {
  SceneSpec spec;
  spec.entities = {{Shape::Circle, ColorName::Orange, 24, 28, 9, 0},
                   {Shape::Square, ColorName::Cyan, 48, 48, 7, 1}};
  Sample s = render_scene(spec);

  Vqae model(CodebookConfig{}, 11);
  VqaeTrainConfig cfg;
  cfg.epochs = 500;
  cfg.batch_size = 1;
  cfg.lr = 2e-3;
  cfg.revival_interval = 200;
  cfg.seed = 11;
  auto report = train_vqae(model, {s.image}, cfg, [](int64_t, const Vqae::StepLosses&, double) {});
  REQUIRE(report.epoch_loss.front() > report.epoch_loss.back());
  cfg.epochs = 300;
  cfg.lr = 5e-4;  // settle phase
  train_vqae(model, {s.image}, cfg, [](int64_t, const Vqae::StepLosses&, double) {});

  ImageRGB recon = model.reconstruct(s.image);
  double mse = image_mse(recon, s.image);
  INFO("overfit reconstruction mse " << mse);
  REQUIRE(mse < 1e-3);

  // decode(tokens) re-encodes to the same tokens once the model has settled
  TokenGrid t = model.tokenize(s.image);
  TokenGrid t2 = model.tokenize(model.decode_tokens(t));
  int agree = 0;
  for (int i = 0; i < 64; i++)
    agree += t.indices[static_cast<size_t>(i)] == t2.indices[static_cast<size_t>(i)] ? 1 : 0;
  REQUIRE(agree >= 60);
}

TEST_CASE("transformer memorizes sixteen samples") {
  Vocabulary vocab(128);
  Vqae vq(CodebookConfig{}, 21);  // untrained tokens are still deterministic targets
  vq.params().freeze();

  Dataset ds = generate_dataset(16, 2024);
  std::vector<TransformerCacheItem> items;
  for (size_t i = 0; i < ds.size(); i++) {
    TransformerCacheItem it;
    it.text = vocab.encode_text(ds.samples[i].caption);
    it.image = vq.tokenize(ds.samples[i].image);
    it.gray = vq.grayscale_guidance_tokens(ds.samples[i].image);
    items.push_back(std::move(it));
  }

  ModelConfig mc;  // full-size stage-2 config
  ArTransformer model(mc, vocab, 8, 8, 31);
  TransformerTrainConfig tc;
  tc.epochs = 300;
  tc.batch_size = 16;
  tc.peak_lr = 1.2e-3;
  tc.warmup_steps = 30;
  tc.seed = 31;
  tc.weights.l4 = 0.0;  // pure autoregressive memorization
  auto report = train_transformer(model, items, vq, nullptr, tc,
                                  [](int64_t, const LossValues&, double) {});
  REQUIRE(report.epoch_loss.front() > report.epoch_loss.back());

  // teacher-forced accuracy on the image segment
  int correct = 0, total = 0;
  SequenceLayout lay = make_layout(false, vocab.text_len(), 8, 8);
  for (const auto& it : items) {
    auto ids = build_sequence_ids(vocab, it.text, nullptr, &it.image, lay);
    auto logits = model.forward_logits(ids, lay);
    int V = vocab.total_size();
    for (int i = 0; i < 64; i++) {
      int pos = lay.image_begin - 1 + i;  // predicts image token i
      const float* row = &logits[static_cast<size_t>(pos) * V];
      int best = 0;
      for (int v = 1; v < V; v++)
        if (row[v] > row[best]) best = v;
      total++;
      correct += best == vocab.image_id_offset() + it.image.indices[static_cast<size_t>(i)] ? 1
                                                                                            : 0;
    }
  }
  double acc = static_cast<double>(correct) / total;
  INFO("teacher-forced image token accuracy " << acc);
  REQUIRE(acc > 0.95);
}

TEST_CASE("dual encoder separates matched from mismatched pairs after a short run") {
  Vocabulary vocab(128);
  Dataset ds = generate_dataset(160, 7070);
  std::vector<ImageRGB> images;
  std::vector<std::string> captions;
  for (size_t i = 0; i < 128; i++) {
    images.push_back(ds.samples[i].image);
    captions.push_back(ds.samples[i].caption);
  }
  DualEncoder enc(DualEncoderConfig{}, vocab, EncoderRole::Critic, 41);
  DualTrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 32;
  cfg.seed = 41;
  auto report = train_dual(enc, images, captions, cfg,
                           [](int64_t, const DualLosses&, double) {});
  REQUIRE(report.epoch_loss.front() > report.epoch_loss.back());

  double matched = 0.0, mismatched = 0.0;
  int n = 0;
  for (size_t i = 128; i < 158; i++) {
    matched += enc.global_similarity(ds.samples[i].image, ds.samples[i].caption);
    mismatched += enc.global_similarity(ds.samples[i].image, ds.samples[i + 1].caption);
    n++;
  }
  INFO("matched " << matched / n << " vs mismatched " << mismatched / n);
  REQUIRE(matched / n > mismatched / n);
}

TEST_CASE("classifier learns shape and color labels") {
  Dataset ds = generate_dataset(200, 909);
  std::vector<ImageRGB> crops;
  std::vector<int> labels;
  classifier_training_set(ds, &crops, &labels);
  ShapeClassifier clf(3);
  ClassifierTrainConfig cfg;
  cfg.epochs = 6;
  cfg.seed = 3;
  train_classifier(clf, crops, labels, cfg);
  REQUIRE(clf.trained());

  Dataset held = generate_dataset(40, 910);
  std::vector<ImageRGB> hc;
  std::vector<int> hl;
  classifier_training_set(held, &hc, &hl);
  int correct = 0;
  for (size_t i = 0; i < hc.size(); i++) {
    auto p = clf.posterior(hc[i]);
    int best = 0;
    for (int c = 1; c < kClassifierClasses; c++)
      if (p[static_cast<size_t>(c)] > p[static_cast<size_t>(best)]) best = c;
    correct += best == hl[i] ? 1 : 0;
  }
  double acc = static_cast<double>(correct) / static_cast<double>(hc.size());
  INFO("held-out crop accuracy " << acc);
  REQUIRE(acc > 0.8);
}
