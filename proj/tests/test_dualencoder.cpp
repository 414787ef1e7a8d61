#include <catch2/catch_amalgamated.hpp>

#include "tokedit/dualencoder.hpp"
#include "tokedit/synthdata.hpp"

using namespace tokedit;

namespace {
const Vocabulary& vocab() {
  static Vocabulary v(128);
  return v;
}

DualEncoder fresh(EncoderRole role, uint64_t seed) {
  return DualEncoder(DualEncoderConfig{}, vocab(), role, seed);
}

ImageRGB random_image(Rng& rng) {
  ImageRGB img(64, 64);
  for (auto& v : img.data) v = rng.uniform_f(0.0f, 1.0f);
  return img;
}
}  // namespace

TEST_CASE("embeddings are unit-norm and deterministic") {
  DualEncoder enc = fresh(EncoderRole::Critic, 1);
  Rng rng(2);
  for (int trial = 0; trial < 20; trial++) {
    ImageRGB img = random_image(rng);
    auto [global, tokens] = enc.embed_image(img);
    double n = 0;
    for (float v : global) n += (double)v * v;
    REQUIRE(std::sqrt(n) == Catch::Approx(1.0).margin(1e-5));
    int d = enc.config().embed_dim;
    for (int t = 0; t < enc.config().grid * enc.config().grid; t++) {
      double tn = 0;
      for (int c = 0; c < d; c++) tn += (double)tokens[t * d + c] * tokens[t * d + c];
      REQUIRE(std::sqrt(tn) == Catch::Approx(1.0).margin(1e-5));
    }
    auto [global2, tokens2] = enc.embed_image(img);
    REQUIRE(global == global2);
    REQUIRE(tokens == tokens2);
  }
  auto [tg, tw] = enc.embed_text("a red circle and a blue square");
  double n = 0;
  for (float v : tg) n += (double)v * v;
  REQUIRE(std::sqrt(n) == Catch::Approx(1.0).margin(1e-5));
  (void)tw;
}

TEST_CASE("global similarity is a cosine in [-1,1] and self-consistent") {
  DualEncoder enc = fresh(EncoderRole::Critic, 3);
  Rng rng(4);
  for (int trial = 0; trial < 50; trial++) {
    ImageRGB img = random_image(rng);
    double s1 = enc.global_similarity(img, "a red circle");
    double s2 = enc.global_similarity(img, "a red circle");
    REQUIRE(s1 == s2);
    REQUIRE(s1 >= -1.0 - 1e-6);
    REQUIRE(s1 <= 1.0 + 1e-6);
  }
}

TEST_CASE("token similarity maps are bounded and reject OOV words") {
  DualEncoder enc = fresh(EncoderRole::Critic, 5);
  Rng rng(6);
  ImageRGB img = random_image(rng);
  auto map = enc.token_similarity(img, "circle");
  REQUIRE(map.size() == 16);
  for (float v : map) {
    REQUIRE(v >= -1.0f - 1e-5f);
    REQUIRE(v <= 1.0f + 1e-5f);
  }
  REQUIRE_THROWS_AS(enc.token_similarity(img, "zeppelin"), VocabError);
}

TEST_CASE("single-pair symmetric InfoNCE is zero") {
  DualEncoder enc = fresh(EncoderRole::Critic, 7);
  nn::AdamW opt(enc.params(), 0.0, 0.9, 0.98);  // lr 0: inspect loss only
  Rng rng(8);
  ImageRGB img = random_image(rng);
  auto losses =
      dual_train_step(enc, images_to_tensor({img}), {vocab().encode_text("a red circle")}, opt);
  REQUIRE(losses.global_nce == Catch::Approx(0.0).margin(1e-6));
  REQUIRE(losses.token_nce == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("batch permutation leaves the loss unchanged") {
  Rng rng(9);
  std::vector<ImageRGB> imgs;
  std::vector<TextSequence> texts;
  std::vector<std::string> caps = {"a red circle", "a blue square", "a green triangle",
                                   "a white circle"};
  for (int i = 0; i < 4; i++) {
    imgs.push_back(random_image(rng));
    texts.push_back(vocab().encode_text(caps[static_cast<size_t>(i)]));
  }
  DualEncoder enc = fresh(EncoderRole::Critic, 10);
  nn::AdamW opt(enc.params(), 0.0, 0.9, 0.98);
  auto base = dual_train_step(enc, images_to_tensor(imgs), texts, opt);

  std::vector<ImageRGB> imgs_p = {imgs[2], imgs[0], imgs[3], imgs[1]};
  std::vector<TextSequence> texts_p = {texts[2], texts[0], texts[3], texts[1]};
  auto perm = dual_train_step(enc, images_to_tensor(imgs_p), texts_p, opt);
  REQUIRE(perm.total == Catch::Approx(base.total).epsilon(1e-5));
}

TEST_CASE("filip aggregation matches a hand computation") {
  // 2 samples, 2 word slots (second sample has 1 word), 2 image tokens, d=2
  int N = 2, L = 2, G2 = 2;
  std::vector<float> words = {
      1, 0,   // s0 w0
      0, 1,   // s0 w1
      1, 0,   // s1 w0
      0, 0,   // s1 pad
  };
  std::vector<float> tokens = {
      1, 0,   // s0 t0
      0, -1,  // s0 t1
      0, 1,   // s1 t0
      1, 0,   // s1 t1
  };
  Tensor W = Tensor::from_data({N * L, 2}, words, true);
  Tensor T = Tensor::from_data({N * G2, 2}, tokens, false);
  Tensor C = matmul_nt(W, T);
  std::vector<float> mask = {1, 1, 1, 0};
  Tensor s_t2i = filip_aggregate(C, mask, N, L, G2, /*text_to_image=*/true);
  // s_t2i[0][0]: words of s0 vs tokens of s0: w0 max(1,0)=1; w1 max(0,-1)=0 -> 0.5
  REQUIRE(s_t2i.data()[0] == Catch::Approx(0.5));
  // s_t2i[0][1]: w0 vs s1 tokens max(0,1)=1; w1 max(1,0)=1 -> 1.0
  REQUIRE(s_t2i.data()[1] == Catch::Approx(1.0));
  // s_t2i[1][0]: w0 of s1 vs s0 tokens: max(1,0)=1 -> 1.0
  REQUIRE(s_t2i.data()[2] == Catch::Approx(1.0));
  // s_t2i[1][1]: max(0,1)=1 -> 1.0
  REQUIRE(s_t2i.data()[3] == Catch::Approx(1.0));

  Tensor s_i2t = filip_aggregate(C, mask, N, L, G2, /*text_to_image=*/false);
  // s_i2t[0][0]: tokens of s0 vs words of s0: t0 max(1,0)=1; t1 max(0,-1)=0 -> 0.5
  REQUIRE(s_i2t.data()[0] == Catch::Approx(0.5));
  // s_i2t[1][1]: tokens of s1 vs word of s1: t0 max(0)=0; t1 max(1)=1 -> 0.5
  REQUIRE(s_i2t.data()[3] == Catch::Approx(0.5));

  // gradients flow only through argmax entries
  Tensor loss = sum_all(s_t2i);
  loss.backward();
  bool any = false;
  for (float g : W.grad()) any = any || g != 0.0f;
  REQUIRE(any);
}

TEST_CASE("critic and judge instances differ by parameter hash") {
  DualEncoder critic = fresh(EncoderRole::Critic, 100);
  DualEncoder judge = fresh(EncoderRole::Judge, 101);
  REQUIRE(critic.params().value_hash() != judge.params().value_hash());
}

TEST_CASE("dual encoder checkpoints round-trip with role tags") {
  DualEncoder enc = fresh(EncoderRole::Judge, 55);
  auto path = std::filesystem::temp_directory_path() / "tokedit_dual_test.ckpt";
  save_dual(path.string(), enc, vocab().hash(), 77);
  DualEncoder back = load_dual(path.string(), vocab());
  REQUIRE(back.role() == EncoderRole::Judge);
  REQUIRE(back.params().value_hash() == enc.params().value_hash());
  std::filesystem::remove(path);
}

TEST_CASE("logit scale is clamped to [1,100]") {
  DualEncoder enc = fresh(EncoderRole::Critic, 66);
  Tensor t = enc.logit_scale_clamped();
  REQUIRE(t.scalar() >= 1.0f);
  REQUIRE(t.scalar() <= 100.0f);
  REQUIRE(t.scalar() == Catch::Approx(1.0 / 0.07).epsilon(1e-3));
}
