#pragma once

// Stage 2: causal transformer over the unified sequence
//   [BOT] text(L_t) ([BOV] gray(h*w))? image(h*w)
// Text positions carry learned 1-D embeddings; gray and image positions carry
// learned axial row+col embeddings shared between the two visual segments at
// equal spatial coordinates. Vision guidance is the grayscale token grid and
// is present on a seeded 50% of training samples.
//
// Losses: next-token cross entropies per segment (specials are never loss
// targets), combined as L_ar = l1*L_img + l2*L_gray + l3*L_txt, plus the
// semantic term L_total = L_ar + l4*(1 - cos(critic(G(argmax grid)), critic(text)))
// with straight-through gradients through the argmax.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokedit/checkpoint.hpp"
#include "tokedit/common.hpp"
#include "tokedit/dualencoder.hpp"
#include "tokedit/nn.hpp"
#include "tokedit/textcodec.hpp"
#include "tokedit/vqae.hpp"

namespace tokedit {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int head_dim = 32;
  int ffn_mult = 4;
  float dropout = 0.0f;
  int max_seq_len = 1 + kTextLen + 1 + 64 + 64;

  int model_dim() const { return heads * head_dim; }
  void validate() const {
    TOKEDIT_CHECK(layers > 0 && heads > 0 && head_dim > 0 && ffn_mult > 0, ShapeError,
                  "model config dims must be positive");
  }
};

struct LossWeights {
  double l1 = 7.0 / 9.0;
  double l2 = 1.0 / 9.0;
  double l3 = 1.0 / 9.0;
  double l4 = 5.0;

  void validate() const {
    TOKEDIT_CHECK(l1 >= 0 && l2 >= 0 && l3 >= 0 && l4 >= 0, Error,
                  "loss weights must be nonnegative");
  }
  double ar(double l_img, double l_gray, double l_txt) const {
    return l1 * l_img + l2 * l_gray + l3 * l_txt;
  }
  double total(double l_ar, double l_semantic) const { return l_ar + l4 * l_semantic; }
};

struct SamplingConfig {
  double temperature = 1.0;
  int top_k = 16;
  uint64_t seed = 0;
  int rerank_candidates = 1;

  void validate(int K) const {
    TOKEDIT_CHECK(temperature > 0.0, Error, "temperature must be positive");
    TOKEDIT_CHECK(top_k >= 1 && top_k <= K, Error, "top_k must be in [1, %d]", K);
    TOKEDIT_CHECK(rerank_candidates >= 1, Error, "rerank_candidates must be >= 1");
  }
};

enum class SegTag { Bot, Text, Bov, Gray, Image };

struct SequenceLayout {
  bool guided = false;
  int text_len = kTextLen;
  int grid_h = 8, grid_w = 8;
  int length = 0;
  std::vector<SegTag> tags;
  std::vector<int> pos1d;     // BOT=0, text i -> 1+i, BOV -> 1+text_len; -1 on grid positions
  std::vector<int> row, col;  // spatial coords on gray/image positions; -1 elsewhere
  int gray_begin = -1;
  int image_begin = -1;
};

inline SequenceLayout make_layout(bool guided, int text_len, int grid_h, int grid_w) {
  SequenceLayout lay;
  lay.guided = guided;
  lay.text_len = text_len;
  lay.grid_h = grid_h;
  lay.grid_w = grid_w;
  auto push = [&](SegTag tag, int p1, int r, int c) {
    lay.tags.push_back(tag);
    lay.pos1d.push_back(p1);
    lay.row.push_back(r);
    lay.col.push_back(c);
  };
  push(SegTag::Bot, 0, -1, -1);
  for (int i = 0; i < text_len; i++) push(SegTag::Text, 1 + i, -1, -1);
  if (guided) {
    lay.gray_begin = static_cast<int>(lay.tags.size()) + 1;
    push(SegTag::Bov, 1 + text_len, -1, -1);
    for (int r = 0; r < grid_h; r++)
      for (int c = 0; c < grid_w; c++) push(SegTag::Gray, -1, r, c);
  }
  lay.image_begin = static_cast<int>(lay.tags.size());
  for (int r = 0; r < grid_h; r++)
    for (int c = 0; c < grid_w; c++) push(SegTag::Image, -1, r, c);
  lay.length = static_cast<int>(lay.tags.size());
  return lay;
}

// Unified id sequence for one sample; all segments required by the layout
// must be present.
inline std::vector<int> build_sequence_ids(const Vocabulary& vocab, const TextSequence& text,
                                           const TokenGrid* gray, const TokenGrid* image,
                                           const SequenceLayout& lay) {
  TOKEDIT_CHECK(static_cast<int>(text.ids.size()) == lay.text_len, ShapeError,
                "build_sequence: text length %zu vs layout %d", text.ids.size(), lay.text_len);
  TOKEDIT_CHECK(!lay.guided || (gray && gray->h == lay.grid_h && gray->w == lay.grid_w),
                ShapeError, "build_sequence: guided layout needs a %dx%d gray grid", lay.grid_h,
                lay.grid_w);
  TOKEDIT_CHECK(image && image->h == lay.grid_h && image->w == lay.grid_w, ShapeError,
                "build_sequence: needs a %dx%d image grid", lay.grid_h, lay.grid_w);
  std::vector<int> ids;
  ids.reserve(static_cast<size_t>(lay.length));
  ids.push_back(vocab.bot_id());
  for (int id : text.ids) ids.push_back(id);
  if (lay.guided) {
    ids.push_back(vocab.bov_id());
    for (int t : gray->indices) ids.push_back(vocab.image_id_offset() + t);
  }
  for (int t : image->indices) ids.push_back(vocab.image_id_offset() + t);
  TOKEDIT_CHECK(static_cast<int>(ids.size()) == lay.length, ShapeError,
                "build_sequence: assembled %zu ids for layout length %d", ids.size(), lay.length);
  return ids;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class ArTransformer {
 public:
  ArTransformer(const ModelConfig& cfg, const Vocabulary& vocab, int grid_h, int grid_w,
                uint64_t init_seed)
      : cfg_(cfg), vocab_(&vocab), gh_(grid_h), gw_(grid_w) {
    cfg_.validate();
    int D = cfg_.model_dim();
    Rng rng(derive_seed(init_seed, "artransformer.init"));
    tok_ = nn::EmbeddingTable(params_, "tok", vocab.total_size(), D, rng);
    pos1d_ = nn::EmbeddingTable(params_, "pos1d", vocab.text_len() + 2, D, rng);
    row_ = nn::EmbeddingTable(params_, "pos_row", grid_h, D, rng);
    col_ = nn::EmbeddingTable(params_, "pos_col", grid_w, D, rng);
    int F = cfg_.ffn_mult * D;
    for (int l = 0; l < cfg_.layers; l++) {
      std::string p = "layer" + std::to_string(l);
      Layer layer;
      layer.ln1 = nn::LayerNorm(params_, p + ".ln1", D);
      layer.wq = nn::Linear(params_, p + ".wq", D, D, rng, 0.02f);
      layer.wk = nn::Linear(params_, p + ".wk", D, D, rng, 0.02f);
      layer.wv = nn::Linear(params_, p + ".wv", D, D, rng, 0.02f);
      layer.wo = nn::Linear(params_, p + ".wo", D, D, rng, 0.02f);
      layer.ln2 = nn::LayerNorm(params_, p + ".ln2", D);
      layer.wg = nn::Linear(params_, p + ".ffn_gate", D, F, rng, 0.02f);
      layer.wu = nn::Linear(params_, p + ".ffn_up", D, F, rng, 0.02f);
      layer.wd = nn::Linear(params_, p + ".ffn_down", F, D, rng, 0.02f);
      layers_.push_back(layer);
    }
    lnf_ = nn::LayerNorm(params_, "lnf", D);
    head_ = nn::Linear(params_, "head", D, vocab.total_size(), rng, 0.02f);
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return *vocab_; }
  int grid_h() const { return gh_; }
  int grid_w() const { return gw_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const Tensor& pos_row_table() const { return row_.table; }
  const Tensor& pos_col_table() const { return col_.table; }

  // [B*T, V] next-token logits under teacher forcing.
  Tensor forward_batch(const std::vector<int>& flat_ids, int B, const SequenceLayout& lay,
                       bool training = false, Rng* drop_rng = nullptr) const {
    int T = lay.length;
    TOKEDIT_CHECK(T <= cfg_.max_seq_len, Error, "sequence length %d exceeds max %d", T,
                  cfg_.max_seq_len);
    TOKEDIT_CHECK(static_cast<int>(flat_ids.size()) == B * T, ShapeError,
                  "forward: %zu ids for B=%d T=%d", flat_ids.size(), B, T);
    int D = cfg_.model_dim();
    int H = cfg_.heads;
    float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(cfg_.head_dim));

    std::vector<int> p1(flat_ids.size()), pr(flat_ids.size()), pc(flat_ids.size());
    for (int b = 0; b < B; b++)
      for (int t = 0; t < T; t++) {
        p1[static_cast<size_t>(b) * T + t] = lay.pos1d[static_cast<size_t>(t)];
        pr[static_cast<size_t>(b) * T + t] = lay.row[static_cast<size_t>(t)];
        pc[static_cast<size_t>(b) * T + t] = lay.col[static_cast<size_t>(t)];
      }
    Tensor x2 = add(add(tok_(flat_ids), pos1d_(p1)), add(row_(pr), col_(pc)));
    Tensor x = reshape(x2, {B, T, D});

    Tensor mask = causal_mask(T);
    for (const auto& layer : layers_) {
      Tensor a = layer.ln1(x);
      Tensor qh = split_heads(layer.wq(a), H);
      Tensor kh = split_heads(layer.wk(a), H);
      Tensor vh = split_heads(layer.wv(a), H);
      Tensor s = add_bcast0(scale(bmm(qh, kh, /*trans_b=*/true), inv_sqrt_dh), mask);
      Tensor p = softmax_lastdim(s);
      if (training && cfg_.dropout > 0.0f && drop_rng)
        p = dropout(p, cfg_.dropout, *drop_rng, true);
      Tensor o = layer.wo(merge_heads(bmm(p, vh), H));
      x = add(x, o);
      Tensor h2 = layer.ln2(x);
      Tensor f = layer.wd(mul(gelu(layer.wg(h2)), layer.wu(h2)));
      if (training && cfg_.dropout > 0.0f && drop_rng)
        f = dropout(f, cfg_.dropout, *drop_rng, true);
      x = add(x, f);
    }
    Tensor xf = lnf_(x);
    return reshape(head_(xf), {B * T, vocab_->total_size()});
  }

  // Inference logits for one sequence, [T, V].
  std::vector<float> forward_logits(const std::vector<int>& ids,
                                    const SequenceLayout& lay) const {
    NoGradGuard ng;
    Tensor out = forward_batch(ids, 1, lay);
    return out.value();
  }

  // ---- incremental decode with per-layer KV caches ----

  struct PosRef {
    int pos1d = -1, row = -1, col = -1;
  };

  class Session {
   public:
    Session(const ArTransformer& m, int max_len) : m_(&m), max_len_(max_len) {
      int D = m.cfg_.model_dim();
      kcache_.assign(static_cast<size_t>(m.cfg_.layers), RowMat(max_len, D));
      vcache_.assign(static_cast<size_t>(m.cfg_.layers), RowMat(max_len, D));
      logits_.assign(static_cast<size_t>(m.vocab_->total_size()), 0.0f);
    }

    int fed() const { return t_; }
    const std::vector<float>& logits() const { return logits_; }

    void feed(int token_id, const PosRef& pos) {
      TOKEDIT_CHECK(t_ < max_len_, Error, "session overflow at %d tokens", t_);
      const ArTransformer& m = *m_;
      int D = m.cfg_.model_dim();
      int H = m.cfg_.heads, dh = m.cfg_.head_dim;
      float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

      Eigen::RowVectorXf x(D);
      {
        const float* tok = &m.tok_.table.data()[static_cast<size_t>(token_id) * D];
        for (int i = 0; i < D; i++) x(i) = tok[i];
        auto add_row = [&](const Tensor& table, int idx) {
          if (idx < 0) return;
          const float* r = &table.data()[static_cast<size_t>(idx) * D];
          for (int i = 0; i < D; i++) x(i) += r[i];
        };
        add_row(m.pos1d_.table, pos.pos1d);
        add_row(m.row_.table, pos.row);
        add_row(m.col_.table, pos.col);
      }

      Eigen::RowVectorXf h(D), q(D), attn(D), f;
      for (int l = 0; l < m.cfg_.layers; l++) {
        const Layer& ly = m.layers_[static_cast<size_t>(l)];
        layer_norm_vec(x, ly.ln1, h);
        q.noalias() = h * wmap(ly.wq.w, D, D);
        add_bias(q, ly.wq.b);
        Eigen::RowVectorXf k = h * wmap(ly.wk.w, D, D);
        add_bias(k, ly.wk.b);
        Eigen::RowVectorXf v = h * wmap(ly.wv.w, D, D);
        add_bias(v, ly.wv.b);
        kcache_[static_cast<size_t>(l)].row(t_) = k;
        vcache_[static_cast<size_t>(l)].row(t_) = v;

        attn.setZero(D);
        int n = t_ + 1;
        for (int hd = 0; hd < H; hd++) {
          auto qh = q.segment(hd * dh, dh);
          auto K = kcache_[static_cast<size_t>(l)].topRows(n).middleCols(hd * dh, dh);
          auto V = vcache_[static_cast<size_t>(l)].topRows(n).middleCols(hd * dh, dh);
          Eigen::VectorXf scores = (K * qh.transpose()) * inv_sqrt_dh;
          float mx = scores.maxCoeff();
          double denom = 0.0;
          for (int i = 0; i < n; i++) {
            scores(i) = std::exp(scores(i) - mx);
            denom += scores(i);
          }
          scores *= static_cast<float>(1.0 / denom);
          attn.segment(hd * dh, dh).noalias() = scores.transpose() * V;
        }
        Eigen::RowVectorXf o = attn * wmap(ly.wo.w, D, D);
        add_bias(o, ly.wo.b);
        x += o;

        layer_norm_vec(x, ly.ln2, h);
        int F = m.cfg_.ffn_mult * D;
        Eigen::RowVectorXf g = h * wmap(ly.wg.w, D, F);
        add_bias(g, ly.wg.b);
        Eigen::RowVectorXf u = h * wmap(ly.wu.w, D, F);
        add_bias(u, ly.wu.b);
        constexpr float inv_sqrt2 = 0.7071067811865475f;
        for (int i = 0; i < F; i++)
          g(i) = 0.5f * g(i) * (1.0f + std::erf(g(i) * inv_sqrt2)) * u(i);
        f.noalias() = g * wmap(ly.wd.w, F, D);
        add_bias(f, ly.wd.b);
        x += f;
      }
      layer_norm_vec(x, m.lnf_, h);
      int V = m.vocab_->total_size();
      Eigen::RowVectorXf lg = h * wmap(m.head_.w, D, V);
      add_bias(lg, m.head_.b);
      for (int i = 0; i < V; i++) logits_[static_cast<size_t>(i)] = lg(i);
      t_++;
    }

   private:
    static CMatMap wmap(const Tensor& w, int r, int c) { return CMatMap(w.data(), r, c); }
    static void add_bias(Eigen::RowVectorXf& v, const Tensor& b) {
      if (!b.defined()) return;
      for (int i = 0; i < v.size(); i++) v(i) += b.data()[i];
    }
    static void layer_norm_vec(const Eigen::RowVectorXf& x, const nn::LayerNorm& ln,
                               Eigen::RowVectorXf& out) {
      int d = static_cast<int>(x.size());
      out.resize(d);
      double mean = 0.0;
      for (int i = 0; i < d; i++) mean += x(i);
      mean /= d;
      double var = 0.0;
      for (int i = 0; i < d; i++) {
        double c = x(i) - mean;
        var += c * c;
      }
      var /= d;
      float istd = static_cast<float>(1.0 / std::sqrt(var + 1e-5));
      for (int i = 0; i < d; i++)
        out(i) = (x(i) - static_cast<float>(mean)) * istd * ln.gamma.data()[i] +
                 ln.beta.data()[i];
    }

    const ArTransformer* m_;
    int max_len_;
    int t_ = 0;
    std::vector<RowMat> kcache_, vcache_;
    std::vector<float> logits_;
  };

  PosRef pos_ref(const SequenceLayout& lay, int position) const {
    return PosRef{lay.pos1d[static_cast<size_t>(position)],
                  lay.row[static_cast<size_t>(position)],
                  lay.col[static_cast<size_t>(position)]};
  }

 private:
  struct Layer {
    nn::LayerNorm ln1, ln2;
    nn::Linear wq, wk, wv, wo, wg, wu, wd;
  };

  static Tensor causal_mask(int T) {
    Tensor m = Tensor::zeros({T, T});
    for (int i = 0; i < T; i++)
      for (int j = i + 1; j < T; j++) m.data()[static_cast<size_t>(i) * T + j] = -1e9f;
    return m;
  }

  ModelConfig cfg_;
  const Vocabulary* vocab_;
  int gh_, gw_;
  nn::ParamStore params_;
  nn::EmbeddingTable tok_, pos1d_, row_, col_;
  std::vector<Layer> layers_;
  nn::LayerNorm lnf_;
  nn::Linear head_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct TransformerBatchItem {
  TextSequence text;
  bool guided = false;
  TokenGrid gray;   // valid when guided
  TokenGrid image;
  Tensor critic_text_emb;  // [d] unit-norm, precomputed with the frozen critic
};

struct LossValues {
  double txt = 0.0, gray = 0.0, img = 0.0, semantic = 0.0, ar = 0.0, total = 0.0;
};

struct LossResult {
  LossValues values;
  Tensor total_tensor;
};

namespace detail {
struct GroupLoss {
  Tensor txt, gray, img;
  int n_txt = 0, n_gray = 0, n_img = 0;
  Tensor cos_sum;  // scalar sum of per-sample cosines
  int n = 0;
};

inline GroupLoss group_losses(ArTransformer& model, const std::vector<TransformerBatchItem*>& items,
                              const SequenceLayout& lay, const Vqae* vq, const DualEncoder* critic,
                              bool semantic_on, bool training, Rng* drop_rng) {
  GroupLoss out;
  out.n = static_cast<int>(items.size());
  if (items.empty()) return out;
  const Vocabulary& vocab = model.vocab();
  int B = out.n, T = lay.length;
  std::vector<int> flat;
  flat.reserve(static_cast<size_t>(B) * T);
  for (auto* it : items) {
    auto ids = build_sequence_ids(vocab, it->text, it->guided ? &it->gray : nullptr, &it->image,
                                  lay);
    flat.insert(flat.end(), ids.begin(), ids.end());
  }
  Tensor logits = model.forward_batch(flat, B, lay, training, drop_rng);

  std::vector<int> targets(static_cast<size_t>(B) * T, 0);
  std::vector<float> w_txt(targets.size(), 0.0f), w_gray(targets.size(), 0.0f),
      w_img(targets.size(), 0.0f);
  for (int b = 0; b < B; b++)
    for (int p = 0; p + 1 < T; p++) {
      size_t r = static_cast<size_t>(b) * T + p;
      targets[r] = flat[r + 1];
      switch (lay.tags[static_cast<size_t>(p + 1)]) {
        case SegTag::Text: w_txt[r] = 1.0f; out.n_txt++; break;
        case SegTag::Gray: w_gray[r] = 1.0f; out.n_gray++; break;
        case SegTag::Image: w_img[r] = 1.0f; out.n_img++; break;
        default: break;  // specials are never loss targets
      }
    }
  out.txt = cross_entropy_mean(logits, targets, w_txt);
  out.gray = out.n_gray > 0 ? cross_entropy_mean(logits, targets, w_gray) : Tensor::zeros({1});
  out.img = cross_entropy_mean(logits, targets, w_img);

  if (semantic_on) {
    TOKEDIT_CHECK(vq && critic, DependencyError, "semantic loss needs frozen vqae and critic");
    int G2 = lay.grid_h * lay.grid_w;
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(B) * G2);
    for (int b = 0; b < B; b++)
      for (int i = 0; i < G2; i++)
        rows.push_back(b * T + lay.image_begin - 1 + i);
    Tensor img_logits = slice_cols(gather_rows(logits, rows), vocab.image_id_offset(),
                                   vocab.image_id_offset() + vocab.codebook_size());
    auto [zmix, pred_tokens] = st_argmax_codebook(img_logits, vq->codebook());
    (void)pred_tokens;
    Tensor decoded = vq->decode_batch_raw(channels_first(zmix, B, lay.grid_h, lay.grid_w));
    auto [img_emb, tok_emb] = critic->embed_image_batch(clamp_t(decoded, 0.0f, 1.0f));
    (void)tok_emb;
    Tensor text_embs = Tensor::zeros({B, critic->config().embed_dim});
    for (int b = 0; b < B; b++) {
      const Tensor& e = items[static_cast<size_t>(b)]->critic_text_emb;
      TOKEDIT_CHECK(e.defined() && e.numel() == static_cast<size_t>(critic->config().embed_dim),
                    ShapeError, "missing critic text embedding for batch item");
      std::memcpy(&text_embs.data()[static_cast<size_t>(b) * critic->config().embed_dim],
                  e.data(), sizeof(float) * e.numel());
    }
    out.cos_sum = sum_all(sum_lastdim(mul(img_emb, text_embs)));
  }
  return out;
}
}  // namespace detail

// Mixed guided/unguided batches run as two sub-batches; every mean is taken
// over the combined position counts. Unguided samples contribute L_gray = 0.
inline LossResult compute_losses(ArTransformer& model, std::vector<TransformerBatchItem>& batch,
                                 const Vqae& vq, const DualEncoder* critic,
                                 const LossWeights& weights, bool training = false,
                                 Rng* drop_rng = nullptr) {
  TOKEDIT_CHECK(!batch.empty(), ShapeError, "compute_losses: empty batch");
  weights.validate();
  bool semantic_on = weights.l4 > 0.0;
  std::vector<TransformerBatchItem*> guided, unguided;
  for (auto& it : batch) (it.guided ? guided : unguided).push_back(&it);

  SequenceLayout lay_g = make_layout(true, model.vocab().text_len(), model.grid_h(),
                                     model.grid_w());
  SequenceLayout lay_u = make_layout(false, model.vocab().text_len(), model.grid_h(),
                                     model.grid_w());
  auto g = detail::group_losses(model, guided, lay_g, &vq, critic, semantic_on, training,
                                drop_rng);
  auto u = detail::group_losses(model, unguided, lay_u, &vq, critic, semantic_on, training,
                                drop_rng);

  auto combine = [](const Tensor& a, int na, const Tensor& b, int nb) -> Tensor {
    if (na == 0 && nb == 0) return Tensor::zeros({1});
    if (na == 0) return b;
    if (nb == 0) return a;
    float fa = static_cast<float>(na) / (na + nb);
    float fb = static_cast<float>(nb) / (na + nb);
    return add(scale(a, fa), scale(b, fb));
  };
  Tensor t_txt = combine(g.txt, g.n_txt, u.txt, u.n_txt);
  Tensor t_gray = combine(g.gray, g.n_gray, u.gray, u.n_gray);
  Tensor t_img = combine(g.img, g.n_img, u.img, u.n_img);

  Tensor t_sem = Tensor::zeros({1});
  if (semantic_on) {
    Tensor cos_total = (g.n > 0 && u.n > 0) ? add(g.cos_sum, u.cos_sum)
                       : (g.n > 0 ? g.cos_sum : u.cos_sum);
    // mean over the batch of (1 - cos)
    t_sem = add_scalar(scale(cos_total, -1.0f / static_cast<float>(batch.size())), 1.0f);
  }

  Tensor t_ar = add(add(scale(t_img, static_cast<float>(weights.l1)),
                        scale(t_gray, static_cast<float>(weights.l2))),
                    scale(t_txt, static_cast<float>(weights.l3)));
  Tensor t_total = semantic_on ? add(t_ar, scale(t_sem, static_cast<float>(weights.l4))) : t_ar;

  LossResult res;
  res.values.txt = t_txt.scalar();
  res.values.gray = t_gray.scalar();
  res.values.img = t_img.scalar();
  res.values.semantic = t_sem.scalar();
  res.values.ar = weights.ar(res.values.img, res.values.gray, res.values.txt);
  res.values.total = weights.total(res.values.ar, res.values.semantic);
  TOKEDIT_CHECK(std::isfinite(res.values.total), NumericError,
                "non-finite loss: txt=%g gray=%g img=%g sem=%g", res.values.txt, res.values.gray,
                res.values.img, res.values.semantic);
  res.total_tensor = t_total;
  return res;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Seeded per-(epoch, sample) coin for the 50% vision-guidance assignment.
inline bool guidance_coin(uint64_t seed, uint64_t epoch, uint64_t sample_index) {
  return (derive_seed(seed, "artransformer.guidance", (epoch << 32) ^ sample_index) & 1ull) != 0;
}

struct TransformerTrainConfig {
  int epochs = 8;
  int batch_size = 16;
  double peak_lr = 1e-3;
  int warmup_steps = 100;
  int plateau_patience = 5;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  uint64_t seed = 1;
  LossWeights weights;
};

struct TransformerCacheItem {
  TextSequence text;
  TokenGrid image;
  TokenGrid gray;
  Tensor critic_text_emb;
};

struct TransformerTrainReport {
  std::vector<double> epoch_loss;
};

template <typename LogFn>
TransformerTrainReport train_transformer(ArTransformer& model,
                                         std::vector<TransformerCacheItem>& items,
                                         const Vqae& vq, const DualEncoder* critic,
                                         const TransformerTrainConfig& cfg, LogFn&& log) {
  TOKEDIT_CHECK(!items.empty(), TrainingError, "train_transformer: empty dataset");
  cfg.weights.validate();
  // AdamW with beta2 = 0.96; learning rate warms up linearly and halves on
  // training-loss plateaus.
  nn::AdamW opt(model.params(), cfg.peak_lr, 0.9, 0.96, 1e-8, cfg.weight_decay);
  nn::WarmupPlateauSchedule sched;
  sched.peak_lr = cfg.peak_lr;
  sched.warmup_steps = cfg.warmup_steps;
  sched.patience = cfg.plateau_patience;
  Rng order_rng(derive_seed(cfg.seed, "artransformer.order"));
  Rng drop_rng(derive_seed(cfg.seed, "artransformer.dropout"));

  std::vector<size_t> idx(items.size());
  for (size_t i = 0; i < idx.size(); i++) idx[i] = i;
  TransformerTrainReport report;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; epoch++) {
    order_rng.shuffle(idx);
    double sum = 0.0;
    int nb = 0;
    for (size_t off = 0; off + 1 <= idx.size(); off += static_cast<size_t>(cfg.batch_size)) {
      size_t take = std::min(static_cast<size_t>(cfg.batch_size), idx.size() - off);
      std::vector<TransformerBatchItem> batch;
      for (size_t i = 0; i < take; i++) {
        size_t si = idx[off + i];
        TransformerBatchItem bi;
        bi.text = items[si].text;
        bi.image = items[si].image;
        bi.guided = guidance_coin(cfg.seed, static_cast<uint64_t>(epoch), si);
        if (bi.guided) bi.gray = items[si].gray;
        bi.critic_text_emb = items[si].critic_text_emb;
        batch.push_back(std::move(bi));
      }
      opt.set_lr(sched.lr_for_step(step));
      auto res = compute_losses(model, batch, vq, critic, cfg.weights, /*training=*/true,
                                &drop_rng);
      opt.zero_grad();
      res.total_tensor.backward();
      if (cfg.clip_norm > 0) opt.clip_global_norm(cfg.clip_norm);
      opt.step();
      sum += res.values.total;
      nb++;
      step++;
      log(step, res.values, opt.lr());
    }
    double mean = sum / std::max(1, nb);
    report.epoch_loss.push_back(mean);
    sched.observe_epoch(mean);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sampling. Image positions go in raster order; positions with fixed_mask
// true are forced to the original token (never sampled). Free positions draw
// from the temperature/top-k distribution over image-range ids only.
// ---------------------------------------------------------------------------

struct SampleResult {
  TokenGrid tokens;
  std::vector<double> candidate_scores;  // populated when reranking
};

namespace detail {
inline int sample_image_token(const std::vector<float>& logits, const Vocabulary& vocab,
                              const SamplingConfig& cfg, Rng& rng) {
  int K = vocab.codebook_size();
  int off = vocab.image_id_offset();
  std::vector<std::pair<float, int>> cand(static_cast<size_t>(K));
  for (int k = 0; k < K; k++)
    cand[static_cast<size_t>(k)] = {logits[static_cast<size_t>(off + k)], k};
  std::stable_sort(cand.begin(), cand.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  int keep = std::min(cfg.top_k, K);
  double mx = cand[0].first / cfg.temperature;
  std::vector<double> p(static_cast<size_t>(keep));
  double sum = 0.0;
  for (int i = 0; i < keep; i++) {
    p[static_cast<size_t>(i)] = std::exp(cand[static_cast<size_t>(i)].first / cfg.temperature - mx);
    sum += p[static_cast<size_t>(i)];
  }
  double r = rng.uniform() * sum;
  double acc = 0.0;
  for (int i = 0; i < keep; i++) {
    acc += p[static_cast<size_t>(i)];
    if (r < acc) return cand[static_cast<size_t>(i)].second;
  }
  return cand[static_cast<size_t>(keep - 1)].second;
}

inline TokenGrid sample_once(const ArTransformer& model, const TextSequence& text,
                             const TokenGrid* gray, const std::vector<uint8_t>& fixed_mask,
                             const TokenGrid& original, const SamplingConfig& cfg, Rng& rng) {
  const Vocabulary& vocab = model.vocab();
  SequenceLayout lay = make_layout(gray != nullptr, vocab.text_len(), model.grid_h(),
                                   model.grid_w());
  ArTransformer::Session sess(model, lay.length);
  int p = 0;
  sess.feed(vocab.bot_id(), model.pos_ref(lay, p++));
  for (int id : text.ids) sess.feed(id, model.pos_ref(lay, p++));
  if (gray) {
    sess.feed(vocab.bov_id(), model.pos_ref(lay, p++));
    for (int t : gray->indices) sess.feed(vocab.image_id_offset() + t, model.pos_ref(lay, p++));
  }
  TOKEDIT_CHECK(p == lay.image_begin, Error, "sampling prefix misaligned");

  int G2 = model.grid_h() * model.grid_w();
  TokenGrid out(model.grid_h(), model.grid_w());
  for (int i = 0; i < G2; i++) {
    int tok;
    if (fixed_mask[static_cast<size_t>(i)]) {
      tok = original.indices[static_cast<size_t>(i)];
    } else {
      tok = sample_image_token(sess.logits(), vocab, cfg, rng);
    }
    out.indices[static_cast<size_t>(i)] = tok;
    if (i + 1 < G2) sess.feed(vocab.image_id_offset() + tok, model.pos_ref(lay, p + i));
  }
  return out;
}
}  // namespace detail

inline SampleResult sample_tokens(const ArTransformer& model, const TextSequence& text,
                                  const TokenGrid* gray, const std::vector<uint8_t>& fixed_mask,
                                  const TokenGrid& original, const SamplingConfig& cfg,
                                  const Vqae* vq_for_rerank = nullptr,
                                  const DualEncoder* critic_for_rerank = nullptr) {
  const Vocabulary& vocab = model.vocab();
  cfg.validate(vocab.codebook_size());
  int G2 = model.grid_h() * model.grid_w();
  TOKEDIT_CHECK(static_cast<int>(fixed_mask.size()) == G2, ShapeError,
                "fixed mask has %zu cells, grid has %d", fixed_mask.size(), G2);
  TOKEDIT_CHECK(original.h == model.grid_h() && original.w == model.grid_w(), ShapeError,
                "original grid %dx%d vs model %dx%d", original.h, original.w, model.grid_h(),
                model.grid_w());

  SampleResult res;
  if (cfg.rerank_candidates == 1) {
    Rng rng(derive_seed(cfg.seed, "sample.candidate", 0));
    res.tokens = detail::sample_once(model, text, gray, fixed_mask, original, cfg, rng);
    return res;
  }
  TOKEDIT_CHECK(vq_for_rerank && critic_for_rerank, DependencyError,
                "reranking needs the vqae and critic checkpoints");
  std::string caption = vocab.decode_text(text);
  double best = -1e30;
  for (int c = 0; c < cfg.rerank_candidates; c++) {
    Rng rng(derive_seed(cfg.seed, "sample.candidate", static_cast<uint64_t>(c)));
    TokenGrid grid = detail::sample_once(model, text, gray, fixed_mask, original, cfg, rng);
    double score =
        critic_for_rerank->global_similarity(vq_for_rerank->decode_tokens(grid), caption);
    res.candidate_scores.push_back(score);
    if (score > best) {
      best = score;
      res.tokens = grid;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline void save_transformer(const std::string& path, const ArTransformer& model,
                             const LossWeights& weights, uint64_t vocab_hash,
                             const std::string& vqae_ckpt_hash, uint64_t training_seed) {
  nlohmann::json header;
  header["kind"] = "artransformer";
  header["config"] = {{"layers", model.config().layers},
                      {"heads", model.config().heads},
                      {"head_dim", model.config().head_dim},
                      {"ffn_mult", model.config().ffn_mult},
                      {"dropout", model.config().dropout},
                      {"max_seq_len", model.config().max_seq_len},
                      {"grid_h", model.grid_h()},
                      {"grid_w", model.grid_w()}};
  header["loss_weights"] = {{"l1", weights.l1}, {"l2", weights.l2}, {"l3", weights.l3},
                            {"l4", weights.l4}};
  header["vocab_hash"] = hash_hex(vocab_hash);
  header["vqae_checkpoint_hash"] = vqae_ckpt_hash;
  header["training_seed"] = training_seed;
  header["param_hash"] = hash_hex(model.params().value_hash());
  save_checkpoint(path, header, model.params());
}

inline ArTransformer load_transformer(const std::string& path, const Vocabulary& vocab) {
  nlohmann::json header = read_checkpoint_header(path);
  TOKEDIT_CHECK(header.value("kind", "") == "artransformer", FormatError,
                "checkpoint %s is not a transformer", path.c_str());
  ModelConfig cfg;
  cfg.layers = header["config"]["layers"].get<int>();
  cfg.heads = header["config"]["heads"].get<int>();
  cfg.head_dim = header["config"]["head_dim"].get<int>();
  cfg.ffn_mult = header["config"]["ffn_mult"].get<int>();
  cfg.dropout = header["config"]["dropout"].get<float>();
  cfg.max_seq_len = header["config"]["max_seq_len"].get<int>();
  ArTransformer model(cfg, vocab, header["config"]["grid_h"].get<int>(),
                      header["config"]["grid_w"].get<int>(), 0);
  load_checkpoint(path, model.params());
  return model;
}

}  // namespace tokedit
