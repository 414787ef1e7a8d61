#pragma once

// Contrastive dual encoder. One architecture serves the global-similarity
// role (semantic loss, CLIP-score, retrieval) and the token-level
// late-interaction role (prompt-word alignment); the critic and judge are
// two independently seeded instances of it.
//
// Image tower: conv trunk to a 4x4 grid of d-dim token embeddings plus a
// mean-pooled global embedding. Text tower: per-word MLP (context-free) with
// mean pooling over word positions; pads contribute nothing. All emitted
// embeddings are unit-norm.

#include <string>
#include <vector>

#include <json.hpp>

#include "tokedit/checkpoint.hpp"
#include "tokedit/common.hpp"
#include "tokedit/image.hpp"
#include "tokedit/nn.hpp"
#include "tokedit/textcodec.hpp"

namespace tokedit {

struct DualEncoderConfig {
  int embed_dim = 64;
  int grid = 4;
  int image_size = kImageSize;
  int word_embed_dim = 48;
  int text_hidden = 96;
};

enum class EncoderRole { Critic, Judge };

inline const char* role_name(EncoderRole r) {
  return r == EncoderRole::Critic ? "critic" : "judge";
}

// ---------------------------------------------------------------------------
// FILIP-style aggregation over the dense word-token cosine matrix.
// C is [N*L, N*G2]: rows are words (sample-major), cols are image tokens
// (sample-major). word_w holds 1 for real words and 0 for pads.
//
// text_to_image=true : s[i,j] = mean over words of sample i of
//                               max over tokens of sample j
// text_to_image=false: s[i,j] = mean over tokens of sample i of
//                               max over words of sample j
// Gradients flow through the argmax entries only.
// ---------------------------------------------------------------------------

inline Tensor filip_aggregate(const Tensor& C, const std::vector<float>& word_w, int N, int L,
                              int G2, bool text_to_image) {
  TOKEDIT_CHECK(C.ndim() == 2 && C.dim(0) == N * L && C.dim(1) == N * G2, ShapeError,
                "filip_aggregate: C must be [N*L, N*G2]");
  TOKEDIT_CHECK(word_w.size() == static_cast<size_t>(N) * L, ShapeError,
                "filip_aggregate: word weights size");
  auto cw = std::make_shared<std::vector<float>>(word_w);
  auto amax = std::make_shared<std::vector<int>>();  // argmax per (i,j,slot)
  auto cn = C.node();
  Tensor out = make_op({N, N}, {C}, [cn, cw, amax, N, L, G2, text_to_image](TensorNode& self) {
    cn->ensure_grad();
    for (int i = 0; i < N; i++)
      for (int j = 0; j < N; j++) {
        float g = self.grad[(size_t)i * N + j];
        if (g == 0.0f) continue;
        if (text_to_image) {
          double wsum = 0.0;
          for (int wpos = 0; wpos < L; wpos++) wsum += (*cw)[(size_t)i * L + wpos];
          if (wsum <= 0.0) continue;
          for (int wpos = 0; wpos < L; wpos++) {
            float ww = (*cw)[(size_t)i * L + wpos];
            if (ww <= 0.0f) continue;
            int t = (*amax)[(((size_t)i * N + j) * L) + wpos];
            cn->grad[((size_t)i * L + wpos) * (N * G2) + (size_t)j * G2 + t] +=
                g * ww / static_cast<float>(wsum);
          }
        } else {
          for (int t = 0; t < G2; t++) {
            int wpos = (*amax)[(((size_t)i * N + j) * G2) + t];
            if (wpos < 0) continue;
            cn->grad[((size_t)j * L + wpos) * (N * G2) + (size_t)i * G2 + t] +=
                g / static_cast<float>(G2);
          }
        }
      }
  });
  if (text_to_image) {
    amax->assign((size_t)N * N * L, 0);
    for (int i = 0; i < N; i++)
      for (int j = 0; j < N; j++) {
        double acc = 0.0, wsum = 0.0;
        for (int wpos = 0; wpos < L; wpos++) {
          float ww = word_w[(size_t)i * L + wpos];
          if (ww <= 0.0f) continue;
          const float* row = &C.data()[((size_t)i * L + wpos) * (N * G2) + (size_t)j * G2];
          int best = 0;
          for (int t = 1; t < G2; t++)
            if (row[t] > row[best]) best = t;
          (*amax)[(((size_t)i * N + j) * L) + wpos] = best;
          acc += static_cast<double>(ww) * row[best];
          wsum += ww;
        }
        out.data()[(size_t)i * N + j] = wsum > 0.0 ? static_cast<float>(acc / wsum) : 0.0f;
      }
  } else {
    amax->assign((size_t)N * N * G2, -1);
    for (int i = 0; i < N; i++)
      for (int j = 0; j < N; j++) {
        double acc = 0.0;
        for (int t = 0; t < G2; t++) {
          int best = -1;
          float bv = 0.0f;
          for (int wpos = 0; wpos < L; wpos++) {
            if (word_w[(size_t)j * L + wpos] <= 0.0f) continue;
            float v = C.data()[((size_t)j * L + wpos) * (N * G2) + (size_t)i * G2 + t];
            if (best < 0 || v > bv) {
              best = wpos;
              bv = v;
            }
          }
          (*amax)[(((size_t)i * N + j) * G2) + t] = best;
          if (best >= 0) acc += bv;
        }
        out.data()[(size_t)i * N + j] = static_cast<float>(acc / G2);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class DualEncoder {
 public:
  DualEncoder(const DualEncoderConfig& cfg, const Vocabulary& vocab, EncoderRole role,
              uint64_t init_seed)
      : cfg_(cfg), role_(role), vocab_(&vocab) {
    Rng rng(derive_seed(init_seed, std::string("dualenc.init.") + role_name(role)));
    c1_ = nn::Conv(params_, "img.c1", 3, 24, 3, 2, 1, rng);   // 64 -> 32
    c2_ = nn::Conv(params_, "img.c2", 24, 48, 3, 2, 1, rng);  // 32 -> 16
    c3_ = nn::Conv(params_, "img.c3", 48, 96, 3, 2, 1, rng);  // 16 -> 8
    c4_ = nn::Conv(params_, "img.c4", 96, 96, 3, 2, 1, rng);  // 8 -> 4
    img_proj_ = nn::Conv(params_, "img.proj", 96, cfg_.embed_dim, 1, 1, 0, rng);
    word_embed_ = nn::EmbeddingTable(params_, "txt.embed", vocab.total_size(),
                                     cfg_.word_embed_dim, rng, 0.1f);
    txt_fc1_ = nn::Linear(params_, "txt.fc1", cfg_.word_embed_dim, cfg_.text_hidden, rng);
    txt_fc2_ = nn::Linear(params_, "txt.fc2", cfg_.text_hidden, cfg_.embed_dim, rng);
    // logit scale kept in log space, clamped to [1, 100] when applied
    logit_scale_ = params_.add("logit_scale",
                               Tensor::full({1}, std::log(1.0f / 0.07f), true), false);
  }

  const DualEncoderConfig& config() const { return cfg_; }
  EncoderRole role() const { return role_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const Vocabulary& vocab() const { return *vocab_; }

  Tensor logit_scale_clamped() const { return clamp_t(exp_log_scale(), 1.0f, 100.0f); }

  // image batch [N,3,S,S] -> (global [N,d], tokens [N*G2, d]); both unit-norm
  std::pair<Tensor, Tensor> embed_image_batch(const Tensor& images) const {
    TOKEDIT_CHECK(images.ndim() == 4 && images.dim(1) == 3 && images.dim(2) == cfg_.image_size &&
                      images.dim(3) == cfg_.image_size,
                  ShapeError, "embed_image: expected [N,3,%d,%d]", cfg_.image_size,
                  cfg_.image_size);
    int N = images.dim(0);
    Tensor x = relu(c1_(images));
    x = relu(c2_(x));
    x = relu(c3_(x));
    x = relu(c4_(x));
    Tensor feats = channels_last(img_proj_(x));  // [N*G2, d]
    Tensor tokens = l2_normalize_rows(feats);
    Tensor pooled = weighted_mean_axis1(
        reshape(feats, {N, cfg_.grid * cfg_.grid, cfg_.embed_dim}),
        std::vector<float>(static_cast<size_t>(N) * cfg_.grid * cfg_.grid, 1.0f));
    Tensor global = l2_normalize_rows(pooled);
    return {global, tokens};
  }

  // texts -> (global [N,d], words [N*L, d], word weights); pads embed to zero
  struct TextEmbeddings {
    Tensor global;            // [N, d]
    Tensor words;             // [N*L, d], unit rows at word positions, zeros at pads
    std::vector<float> mask;  // 1 at word positions
  };

  TextEmbeddings embed_text_batch(const std::vector<TextSequence>& seqs) const {
    TOKEDIT_CHECK(!seqs.empty(), ShapeError, "embed_text: empty batch");
    int N = static_cast<int>(seqs.size());
    int L = vocab_->text_len();
    std::vector<int> flat_ids;
    std::vector<float> mask;
    bool any_word = false;
    for (const auto& s : seqs) {
      TOKEDIT_CHECK(static_cast<int>(s.ids.size()) == L, ShapeError,
                    "embed_text: sequence length %zu", s.ids.size());
      for (int id : s.ids) {
        bool is_word = vocab_->classify(id) == IdKind::Word;
        flat_ids.push_back(is_word ? id : -1);  // pads contribute zero rows
        mask.push_back(is_word ? 1.0f : 0.0f);
        any_word = any_word || is_word;
      }
    }
    TOKEDIT_CHECK(any_word, VocabError, "embed_text: batch contains no words");
    Tensor emb = word_embed_(flat_ids);                 // [N*L, E]
    Tensor feats = txt_fc2_(gelu(txt_fc1_(emb)));       // [N*L, d]
    // zero out pad rows so maxima and means never see them
    Tensor masked = mul(feats, mask_tensor(mask, cfg_.embed_dim));
    TextEmbeddings out;
    out.words = l2_normalize_masked(masked, mask);
    out.global = l2_normalize_rows(
        weighted_mean_axis1(reshape(masked, {N, L, cfg_.embed_dim}), mask));
    out.mask = std::move(mask);
    return out;
  }

  // ---- inference wrappers ----

  std::pair<std::vector<float>, std::vector<float>> embed_image(const ImageRGB& img) const {
    NoGradGuard ng;
    auto [global, tokens] = embed_image_batch(images_to_tensor({img}));
    return {global.value(), tokens.value()};
  }

  std::pair<std::vector<float>, std::vector<float>> embed_text(const std::string& caption) const {
    NoGradGuard ng;
    auto embs = embed_text_batch({vocab_->encode_text(caption)});
    return {embs.global.value(), embs.words.value()};
  }

  double global_similarity(const ImageRGB& img, const std::string& caption) const {
    NoGradGuard ng;
    auto [ig, it] = embed_image(img);
    auto [tg, tw] = embed_text(caption);
    (void)it;
    (void)tw;
    double acc = 0.0;
    for (size_t i = 0; i < ig.size(); i++) acc += static_cast<double>(ig[i]) * tg[i];
    return acc;
  }

  // grid x grid map of cos(token, prompt word); the word embeds context-free.
  std::vector<float> token_similarity(const ImageRGB& img, const std::string& word) const {
    NoGradGuard ng;
    TOKEDIT_CHECK(vocab_->has_word(word), VocabError, "prompt word '%s' not in vocabulary",
                  word.c_str());
    auto [ig, tokens] = embed_image(img);
    (void)ig;
    Tensor emb = word_embed_({vocab_->word_id(word)});
    Tensor feat = l2_normalize_rows(txt_fc2_(gelu(txt_fc1_(emb))));
    int g2 = cfg_.grid * cfg_.grid, d = cfg_.embed_dim;
    std::vector<float> map(static_cast<size_t>(g2), 0.0f);
    for (int t = 0; t < g2; t++) {
      double acc = 0.0;
      for (int c = 0; c < d; c++)
        acc += static_cast<double>(tokens[static_cast<size_t>(t) * d + c]) * feat.data()[c];
      map[static_cast<size_t>(t)] = static_cast<float>(acc);
    }
    return map;
  }

 private:
  Tensor exp_log_scale() const {
    // e^s of the raw log-scale parameter s
    auto sn = logit_scale_.node();
    Tensor out = make_op({1}, {logit_scale_}, [sn](TensorNode& self) {
      if (!sn->requires_grad) return;
      sn->ensure_grad();
      sn->grad[0] += self.grad[0] * self.value[0];
    });
    out.data()[0] = std::exp(logit_scale_.data()[0]);
    return out;
  }

  static Tensor mask_tensor(const std::vector<float>& mask, int d) {
    Tensor m = Tensor::zeros({static_cast<int>(mask.size()), d});
    for (size_t r = 0; r < mask.size(); r++)
      for (int c = 0; c < d; c++) m.data()[r * static_cast<size_t>(d) + c] = mask[r];
    return m;
  }

  // normalize rows with mask=1; leave zero rows untouched
  static Tensor l2_normalize_masked(const Tensor& x, const std::vector<float>& mask) {
    Tensor normed = l2_normalize_rows(x);
    Tensor m = mask_tensor(mask, x.dim(1));
    return mul(normed, m);
  }

  DualEncoderConfig cfg_;
  EncoderRole role_;
  const Vocabulary* vocab_;
  nn::ParamStore params_;
  nn::Conv c1_, c2_, c3_, c4_, img_proj_;
  nn::EmbeddingTable word_embed_;
  nn::Linear txt_fc1_, txt_fc2_;
  Tensor logit_scale_;
};

// ---------------------------------------------------------------------------
// Training: symmetric InfoNCE on globals + symmetric FILIP-style InfoNCE on
// tokens, equal weights.
// ---------------------------------------------------------------------------

struct DualTrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double lr = 1.5e-3;
  uint64_t seed = 1;
};

struct DualLosses {
  double total = 0.0, global_nce = 0.0, token_nce = 0.0;
};

inline Tensor symmetric_infonce(const Tensor& scores_scaled) {
  int N = scores_scaled.dim(0);
  std::vector<int> diag(static_cast<size_t>(N));
  for (int i = 0; i < N; i++) diag[static_cast<size_t>(i)] = i;
  std::vector<float> ones(static_cast<size_t>(N), 1.0f);
  Tensor rows = cross_entropy_mean(scores_scaled, diag, ones);
  Tensor cols = cross_entropy_mean(transpose2d(scores_scaled), diag, ones);
  return scale(add(rows, cols), 0.5f);
}

inline DualLosses dual_train_step(DualEncoder& model, const Tensor& images,
                                  const std::vector<TextSequence>& texts, nn::AdamW& opt) {
  int N = images.dim(0);
  auto [img_global, img_tokens] = model.embed_image_batch(images);
  auto txt = model.embed_text_batch(texts);
  Tensor tau = model.logit_scale_clamped();

  Tensor s_global = scale_by(matmul_nt(img_global, txt.global), tau);  // [N,N] img x txt
  Tensor l_global = symmetric_infonce(s_global);

  int L = model.vocab().text_len();
  int G2 = model.config().grid * model.config().grid;
  Tensor C = matmul_nt(txt.words, img_tokens);  // [N*L, N*G2]
  Tensor s_t2i = filip_aggregate(C, txt.mask, N, L, G2, /*text_to_image=*/true);
  Tensor s_i2t = filip_aggregate(C, txt.mask, N, L, G2, /*text_to_image=*/false);
  Tensor l_token = scale(add(symmetric_infonce(scale_by(s_t2i, tau)),
                             symmetric_infonce(scale_by(s_i2t, tau))),
                         0.5f);

  Tensor loss = add(l_global, l_token);
  DualLosses out;
  out.global_nce = l_global.scalar();
  out.token_nce = l_token.scalar();
  out.total = loss.scalar();
  TOKEDIT_CHECK(std::isfinite(out.total), TrainingError, "dual encoder diverged: loss=%g",
                out.total);
  opt.zero_grad();
  loss.backward();
  opt.step();
  return out;
}

struct DualTrainReport {
  std::vector<double> epoch_loss;
};

template <typename LogFn>
DualTrainReport train_dual(DualEncoder& model, const std::vector<ImageRGB>& images,
                           const std::vector<std::string>& captions, const DualTrainConfig& cfg,
                           LogFn&& log) {
  TOKEDIT_CHECK(images.size() == captions.size() && !images.empty(), TrainingError,
                "train_dual: bad dataset");
  nn::AdamW opt(model.params(), cfg.lr, 0.9, 0.98);
  Rng order_rng(derive_seed(cfg.seed, std::string("dual.order.") + role_name(model.role())));

  std::vector<size_t> idx(images.size());
  for (size_t i = 0; i < idx.size(); i++) idx[i] = i;
  DualTrainReport report;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; epoch++) {
    order_rng.shuffle(idx);
    double sum = 0.0;
    int nb = 0;
    for (size_t off = 0; off + static_cast<size_t>(cfg.batch_size) <= idx.size();
         off += static_cast<size_t>(cfg.batch_size)) {
      std::vector<ImageRGB> bi;
      std::vector<TextSequence> bt;
      for (int i = 0; i < cfg.batch_size; i++) {
        bi.push_back(images[idx[off + static_cast<size_t>(i)]]);
        bt.push_back(model.vocab().encode_text(captions[idx[off + static_cast<size_t>(i)]]));
      }
      auto losses = dual_train_step(model, images_to_tensor(bi), bt, opt);
      sum += losses.total;
      nb++;
      step++;
      log(step, losses, cfg.lr);
    }
    report.epoch_loss.push_back(sum / std::max(1, nb));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline void save_dual(const std::string& path, const DualEncoder& model, uint64_t vocab_hash,
                      uint64_t training_seed) {
  nlohmann::json header;
  header["kind"] = "dualencoder";
  header["role"] = role_name(model.role());
  header["config"] = {{"embed_dim", model.config().embed_dim},
                      {"grid", model.config().grid},
                      {"image_size", model.config().image_size},
                      {"word_embed_dim", model.config().word_embed_dim},
                      {"text_hidden", model.config().text_hidden}};
  header["vocab_hash"] = hash_hex(vocab_hash);
  header["training_seed"] = training_seed;
  header["param_hash"] = hash_hex(model.params().value_hash());
  save_checkpoint(path, header, model.params());
}

inline DualEncoder load_dual(const std::string& path, const Vocabulary& vocab) {
  nlohmann::json header = read_checkpoint_header(path);
  TOKEDIT_CHECK(header.value("kind", "") == "dualencoder", FormatError,
                "checkpoint %s is not a dual encoder", path.c_str());
  DualEncoderConfig cfg;
  cfg.embed_dim = header["config"]["embed_dim"].get<int>();
  cfg.grid = header["config"]["grid"].get<int>();
  cfg.image_size = header["config"]["image_size"].get<int>();
  cfg.word_embed_dim = header["config"]["word_embed_dim"].get<int>();
  cfg.text_hidden = header["config"]["text_hidden"].get<int>();
  EncoderRole role =
      header.value("role", "critic") == std::string("judge") ? EncoderRole::Judge
                                                             : EncoderRole::Critic;
  DualEncoder model(cfg, vocab, role, 0);
  load_checkpoint(path, model.params());
  return model;
}

}  // namespace tokedit
