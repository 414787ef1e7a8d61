#pragma once

// Stage 1: convolutional encoder/decoder plus a learned codebook. Images
// become 8x8 grids of discrete code indices and back. Grayscale guidance
// tokens reuse the same encoder and codebook.
//
// Training is plain VQ: reconstruction MSE + codebook term ||sg[q]-e||^2 +
// 0.25*commitment ||q-sg[e]||^2, with straight-through gradients across the
// quantizer and periodic revival of dead codes.

#include <string>
#include <vector>

#include <json.hpp>

#include "tokedit/checkpoint.hpp"
#include "tokedit/common.hpp"
#include "tokedit/image.hpp"
#include "tokedit/nn.hpp"
#include "tokedit/rng.hpp"
#include "tokedit/synthdata.hpp"
#include "tokedit/tensor.hpp"

namespace tokedit {

struct CodebookConfig {
  int K = 128;
  int n_z = 32;
  int h = 8, w = 8;
  int image_size = kImageSize;

  void validate() const {
    TOKEDIT_CHECK(K >= 2, ShapeError, "codebook needs K >= 2, got %d", K);
    TOKEDIT_CHECK(h >= 1 && w >= 1, ShapeError, "latent grid must be nonempty");
    TOKEDIT_CHECK(image_size % h == 0 && image_size % w == 0, ShapeError,
                  "image size %d not divisible by latent grid %dx%d", image_size, h, w);
  }
};

struct LatentGrid {
  int h = 0, w = 0, n_z = 0;
  std::vector<float> values;  // (y*w + x)*n_z + c

  LatentGrid() = default;
  LatentGrid(int h_, int w_, int nz)
      : h(h_), w(w_), n_z(nz), values(static_cast<size_t>(h_) * w_ * nz, 0.0f) {}
  float* at(int y, int x) { return &values[(static_cast<size_t>(y) * w + x) * n_z]; }
  const float* at(int y, int x) const { return &values[(static_cast<size_t>(y) * w + x) * n_z]; }
};

struct TokenGrid {
  int h = 0, w = 0;
  std::vector<int> indices;

  TokenGrid() = default;
  TokenGrid(int h_, int w_) : h(h_), w(w_), indices(static_cast<size_t>(h_) * w_, 0) {}
  int& at(int y, int x) { return indices[static_cast<size_t>(y) * w + x]; }
  int at(int y, int x) const { return indices[static_cast<size_t>(y) * w + x]; }
  bool operator==(const TokenGrid& o) const {
    return h == o.h && w == o.w && indices == o.indices;
  }
};

// ---------------------------------------------------------------------------
// Quantization. Distances accumulate in double, in index order, so the
// argmin is stable and ties resolve to the lowest index.
// ---------------------------------------------------------------------------

inline int nearest_code(const float* v, const float* codebook, int K, int n_z) {
  int best = 0;
  double best_d = 0.0;
  for (int c = 0; c < n_z; c++) {
    double d = static_cast<double>(v[c]) - codebook[c];
    best_d += d * d;
  }
  for (int k = 1; k < K; k++) {
    const float* z = codebook + static_cast<size_t>(k) * n_z;
    double dist = 0.0;
    for (int c = 0; c < n_z; c++) {
      double d = static_cast<double>(v[c]) - z[c];
      dist += d * d;
    }
    if (dist < best_d) {
      best_d = dist;
      best = k;
    }
  }
  return best;
}

inline std::pair<LatentGrid, TokenGrid> quantize(const LatentGrid& q, const Tensor& codebook) {
  TOKEDIT_CHECK(codebook.ndim() == 2 && codebook.dim(0) >= 1, ShapeError,
                "quantize: codebook must be [K, n_z]");
  int K = codebook.dim(0), n_z = codebook.dim(1);
  TOKEDIT_CHECK(q.n_z == n_z, ShapeError, "quantize: latent dim %d vs codebook %d", q.n_z, n_z);
  for (float v : q.values)
    TOKEDIT_CHECK(std::isfinite(v), NumericError, "quantize: non-finite latent input");
  for (size_t i = 0; i < codebook.numel(); i++)
    TOKEDIT_CHECK(std::isfinite(codebook.data()[i]), NumericError,
                  "quantize: non-finite codebook");
  LatentGrid qhat(q.h, q.w, n_z);
  TokenGrid tokens(q.h, q.w);
  for (int y = 0; y < q.h; y++)
    for (int x = 0; x < q.w; x++) {
      int k = nearest_code(q.at(y, x), codebook.data(), K, n_z);
      tokens.at(y, x) = k;
      std::memcpy(qhat.at(y, x), &codebook.data()[static_cast<size_t>(k) * n_z],
                  sizeof(float) * n_z);
    }
  return {qhat, tokens};
}

// Batched straight-through quantizer over row vectors [P, n_z]. Forward
// copies the selected codebook rows bit-exactly; backward copies the output
// gradient to the input unchanged. The codebook receives no gradient here
// (its updates come from the codebook loss on gathered rows).
inline std::pair<Tensor, std::vector<int>> quantize_st(const Tensor& qv, const Tensor& codebook) {
  TOKEDIT_CHECK(qv.ndim() == 2 && codebook.ndim() == 2 && qv.dim(1) == codebook.dim(1),
                ShapeError, "quantize_st: [P,n_z] vs codebook [K,n_z]");
  int P = qv.dim(0), n_z = qv.dim(1), K = codebook.dim(0);
  std::vector<int> tokens(static_cast<size_t>(P));
  auto qn = qv.node();
  Tensor out = make_op(qv.shape(), {qv}, [qn](TensorNode& self) {
    qn->ensure_grad();
    for (size_t i = 0; i < self.numel(); i++) qn->grad[i] += self.grad[i];
  });
  for (int p = 0; p < P; p++) {
    const float* v = &qv.data()[static_cast<size_t>(p) * n_z];
    for (int c = 0; c < n_z; c++)
      TOKEDIT_CHECK(std::isfinite(v[c]), NumericError, "quantize_st: non-finite latent");
    int k = nearest_code(v, codebook.data(), K, n_z);
    tokens[static_cast<size_t>(p)] = k;
    std::memcpy(&out.data()[static_cast<size_t>(p) * n_z],
                &codebook.data()[static_cast<size_t>(k) * n_z], sizeof(float) * n_z);
  }
  return {out, tokens};
}

// Straight-through codebook decode for logits over the K codes. Forward
// copies the argmax row bit-exactly (ties to the lowest index); backward
// treats the output as the softmax-weighted codebook mixture
// z = sum_k softmax(logits)_k * Z_k and routes gradients accordingly.
inline std::pair<Tensor, std::vector<int>> st_argmax_codebook(const Tensor& logits,
                                                              const Tensor& codebook) {
  TOKEDIT_CHECK(logits.ndim() == 2 && codebook.ndim() == 2 &&
                    logits.dim(1) == codebook.dim(0),
                ShapeError, "st_argmax_codebook: [P,K] logits vs [K,n_z] codebook");
  int P = logits.dim(0), K = logits.dim(1), n_z = codebook.dim(1);
  std::vector<int> tokens(static_cast<size_t>(P));
  auto ln = logits.node();
  auto zn = codebook.node();
  Tensor out = make_op({P, n_z}, {logits, codebook}, [ln, zn, P, K, n_z](TensorNode& self) {
    // double precision throughout: (a_k - mean_a) cancels heavily
    std::vector<double> probs(static_cast<size_t>(K));
    std::vector<double> a(static_cast<size_t>(K));
    for (int p = 0; p < P; p++) {
      const float* lg = &ln->value[static_cast<size_t>(p) * K];
      const float* g = &self.grad[static_cast<size_t>(p) * n_z];
      double mx = lg[0];
      for (int k = 1; k < K; k++) mx = std::max(mx, static_cast<double>(lg[k]));
      double sum = 0.0;
      for (int k = 0; k < K; k++) {
        probs[static_cast<size_t>(k)] = std::exp(lg[k] - mx);
        sum += probs[static_cast<size_t>(k)];
      }
      for (int k = 0; k < K; k++) probs[static_cast<size_t>(k)] /= sum;
      // a_k = <Z_k, g>
      double mean_a = 0.0;
      for (int k = 0; k < K; k++) {
        const float* z = &zn->value[static_cast<size_t>(k) * n_z];
        double acc = 0.0;
        for (int c = 0; c < n_z; c++) acc += static_cast<double>(z[c]) * g[c];
        a[static_cast<size_t>(k)] = acc;
        mean_a += probs[static_cast<size_t>(k)] * acc;
      }
      if (ln->requires_grad) {
        ln->ensure_grad();
        float* dl = &ln->grad[static_cast<size_t>(p) * K];
        for (int k = 0; k < K; k++)
          dl[k] += static_cast<float>(probs[static_cast<size_t>(k)] *
                                      (a[static_cast<size_t>(k)] - mean_a));
      }
      if (zn->requires_grad) {
        zn->ensure_grad();
        for (int k = 0; k < K; k++) {
          double pk = probs[static_cast<size_t>(k)];
          if (pk == 0.0) continue;
          float* dz = &zn->grad[static_cast<size_t>(k) * n_z];
          for (int c = 0; c < n_z; c++) dz[c] += static_cast<float>(pk * g[c]);
        }
      }
    }
  });
  for (int p = 0; p < P; p++) {
    const float* lg = &logits.data()[static_cast<size_t>(p) * K];
    int best = 0;
    for (int k = 1; k < K; k++)
      if (lg[k] > lg[best]) best = k;
    tokens[static_cast<size_t>(p)] = best;
    std::memcpy(&out.data()[static_cast<size_t>(p) * n_z],
                &codebook.data()[static_cast<size_t>(best) * n_z], sizeof(float) * n_z);
  }
  return {out, tokens};
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct VqaeTrainConfig {
  int epochs = 12;
  int batch_size = 32;
  double lr = 2e-3;
  int revival_interval = 100;  // steps between dead-code revivals
  uint64_t seed = 1;
};

class Vqae {
 public:
  explicit Vqae(const CodebookConfig& cfg = {}, uint64_t init_seed = 1) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(init_seed, "vqae.init"));
    // encoder: 64 -> 32 -> 16 -> 8
    e_in_ = nn::Conv(params_, "enc.in", 3, 32, 3, 1, 1, rng);
    e_d1_ = nn::Conv(params_, "enc.d1", 32, 32, 3, 2, 1, rng);
    e_d2_ = nn::Conv(params_, "enc.d2", 32, 64, 3, 2, 1, rng);
    e_d3_ = nn::Conv(params_, "enc.d3", 64, 64, 3, 2, 1, rng);
    e_r1_ = nn::Conv(params_, "enc.r1", 64, 64, 3, 1, 1, rng);
    e_r2_ = nn::Conv(params_, "enc.r2", 64, 64, 3, 1, 1, rng);
    e_out_ = nn::Conv(params_, "enc.out", 64, cfg_.n_z, 1, 1, 0, rng);
    // decoder: 8 -> 16 -> 32 -> 64. Kept shallow at the grid scale so a
    // changed token only reaches one cell (8 px) beyond its own footprint.
    d_in_ = nn::Conv(params_, "dec.in", cfg_.n_z, 128, 1, 1, 0, rng);
    d_u1_ = nn::Conv(params_, "dec.u1", 128, 64, 3, 1, 1, rng);
    d_u2_ = nn::Conv(params_, "dec.u2", 64, 32, 3, 1, 1, rng);
    d_u3_ = nn::Conv(params_, "dec.u3", 32, 16, 3, 1, 1, rng);
    d_out_ = nn::Conv(params_, "dec.out", 16, 3, 3, 1, 1, rng);
    codebook_ = params_.add("codebook", Tensor::randn({cfg_.K, cfg_.n_z}, rng, 0.5f, true), false);
  }

  const CodebookConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const Tensor& codebook() const { return codebook_; }

  Tensor encode_batch(const Tensor& images) const {
    TOKEDIT_CHECK(images.ndim() == 4 && images.dim(1) == 3 &&
                      images.dim(2) == cfg_.image_size && images.dim(3) == cfg_.image_size,
                  ShapeError, "encode: expected [N,3,%d,%d] input", cfg_.image_size,
                  cfg_.image_size);
    Tensor x = relu(e_in_(images));
    x = relu(e_d1_(x));
    x = relu(e_d2_(x));
    x = relu(e_d3_(x));
    Tensor r = e_r2_(relu(e_r1_(x)));
    x = relu(add(x, r));
    return e_out_(x);  // [N, n_z, h, w]
  }

  // Unclamped decode, used by training losses.
  Tensor decode_batch_raw(const Tensor& qhat) const {
    TOKEDIT_CHECK(qhat.ndim() == 4 && qhat.dim(1) == cfg_.n_z && qhat.dim(2) == cfg_.h &&
                      qhat.dim(3) == cfg_.w,
                  ShapeError, "decode: expected [N,%d,%d,%d] input", cfg_.n_z, cfg_.h, cfg_.w);
    Tensor x = relu(d_in_(qhat));
    x = relu(d_u1_(upsample_nearest2(x)));
    x = relu(d_u2_(upsample_nearest2(x)));
    x = relu(d_u3_(upsample_nearest2(x)));
    return d_out_(x);
  }

  LatentGrid encode(const ImageRGB& img) const {
    NoGradGuard ng;
    Tensor t = encode_batch(images_to_tensor({img}));
    LatentGrid q(cfg_.h, cfg_.w, cfg_.n_z);
    for (int y = 0; y < cfg_.h; y++)
      for (int x = 0; x < cfg_.w; x++)
        for (int c = 0; c < cfg_.n_z; c++)
          q.at(y, x)[c] = t.data()[((static_cast<size_t>(c) * cfg_.h) + y) * cfg_.w + x];
    return q;
  }

  // decode output is clamped into [0,1].
  ImageRGB decode(const LatentGrid& qhat) const {
    NoGradGuard ng;
    Tensor t = Tensor::zeros({1, cfg_.n_z, cfg_.h, cfg_.w});
    for (int y = 0; y < cfg_.h; y++)
      for (int x = 0; x < cfg_.w; x++)
        for (int c = 0; c < cfg_.n_z; c++)
          t.data()[((static_cast<size_t>(c) * cfg_.h) + y) * cfg_.w + x] = qhat.at(y, x)[c];
    return tensor_to_image(decode_batch_raw(t), 0, /*clamp=*/true);
  }

  LatentGrid lookup(const TokenGrid& tokens) const {
    TOKEDIT_CHECK(tokens.h == cfg_.h && tokens.w == cfg_.w, ShapeError,
                  "lookup: token grid %dx%d vs config %dx%d", tokens.h, tokens.w, cfg_.h, cfg_.w);
    LatentGrid q(cfg_.h, cfg_.w, cfg_.n_z);
    for (int y = 0; y < cfg_.h; y++)
      for (int x = 0; x < cfg_.w; x++) {
        int k = tokens.at(y, x);
        TOKEDIT_CHECK(k >= 0 && k < cfg_.K, ShapeError, "lookup: token %d outside codebook", k);
        std::memcpy(q.at(y, x), &codebook_.data()[static_cast<size_t>(k) * cfg_.n_z],
                    sizeof(float) * cfg_.n_z);
      }
    return q;
  }

  TokenGrid tokenize(const ImageRGB& img) const {
    auto [qhat, tokens] = quantize(encode(img), codebook_);
    (void)qhat;
    return tokens;
  }

  ImageRGB decode_tokens(const TokenGrid& tokens) const { return decode(lookup(tokens)); }

  ImageRGB reconstruct(const ImageRGB& img) const { return decode_tokens(tokenize(img)); }

  TokenGrid grayscale_guidance_tokens(const ImageRGB& img) const {
    return tokenize(to_grayscale(img));
  }

  // ---- training ----

  struct StepLosses {
    double total = 0.0, recon = 0.0, codebook = 0.0, commit = 0.0;
  };

  StepLosses train_step(const Tensor& images, nn::AdamW& opt) {
    int N = images.dim(0);
    Tensor q = encode_batch(images);
    Tensor qv = channels_last(q);  // [N*h*w, n_z]
    auto [qhat_st, tokens] = quantize_st(qv, codebook_);
    for (int t : tokens) usage_[static_cast<size_t>(t)]++;
    Tensor rows = gather_rows(codebook_, tokens);
    Tensor recon = decode_batch_raw(channels_first(qhat_st, N, cfg_.h, cfg_.w));

    Tensor l_recon = mse_mean(recon, images);
    Tensor l_code = mse_mean(rows, qv.detach());
    Tensor l_commit = mse_mean(qv, rows.detach());
    Tensor loss = add(l_recon, add(l_code, scale(l_commit, 0.25f)));

    StepLosses out;
    out.recon = l_recon.scalar();
    out.codebook = l_code.scalar();
    out.commit = l_commit.scalar();
    out.total = loss.scalar();
    TOKEDIT_CHECK(std::isfinite(out.total), TrainingError,
                  "vqae diverged: total=%g recon=%g codebook=%g commit=%g", out.total, out.recon,
                  out.codebook, out.commit);

    opt.zero_grad();
    loss.backward();
    opt.step();

    last_batch_latents_ = qv.detach();
    return out;
  }

  // Seed every code from a real encoder output (plus a small jitter) so the
  // quantizer starts on the data manifold instead of collapsing onto a few
  // codes. Runs once; reloads from checkpoints count as initialized.
  void maybe_init_codebook_from_data(const std::vector<ImageRGB>& images, Rng& rng) {
    if (codebook_initialized_) return;
    TOKEDIT_CHECK(!images.empty(), TrainingError, "codebook init: no images");
    NoGradGuard ng;
    Tensor q = encode_batch(images_to_tensor(images));
    Tensor qv = channels_last(q);
    int P = qv.dim(0);
    for (int k = 0; k < cfg_.K; k++) {
      int p = rng.uniform_int(0, P - 1);
      float* dst = &codebook_.data()[static_cast<size_t>(k) * cfg_.n_z];
      const float* src = &qv.data()[static_cast<size_t>(p) * cfg_.n_z];
      for (int c = 0; c < cfg_.n_z; c++) dst[c] = src[c] + rng.normal_f(0.0f, 0.01f);
    }
    codebook_initialized_ = true;
  }

  void mark_codebook_initialized() { codebook_initialized_ = true; }

  // Reinitialize codes unused since the previous revival to encoder outputs
  // sampled from the most recent batch.
  int revive_dead_codes(Rng& rng) {
    if (!last_batch_latents_.defined()) return 0;
    int revived = 0;
    int P = last_batch_latents_.dim(0);
    for (int k = 0; k < cfg_.K; k++) {
      if (usage_[static_cast<size_t>(k)] > 0) continue;
      int p = rng.uniform_int(0, P - 1);
      std::memcpy(&codebook_.data()[static_cast<size_t>(k) * cfg_.n_z],
                  &last_batch_latents_.data()[static_cast<size_t>(p) * cfg_.n_z],
                  sizeof(float) * cfg_.n_z);
      revived++;
    }
    std::fill(usage_.begin(), usage_.end(), 0);
    return revived;
  }

  const CodebookConfig& cfg() const { return cfg_; }

 private:
  CodebookConfig cfg_;
  nn::ParamStore params_;
  nn::Conv e_in_, e_d1_, e_d2_, e_d3_, e_r1_, e_r2_, e_out_;
  nn::Conv d_in_, d_u1_, d_u2_, d_u3_, d_out_;
  Tensor codebook_;
  std::vector<int64_t> usage_ = std::vector<int64_t>(static_cast<size_t>(cfg_.K), 0);
  Tensor last_batch_latents_;
  bool codebook_initialized_ = false;
};

struct VqaeTrainReport {
  std::vector<double> epoch_loss;
  double final_loss = 0.0;
};

// Logger gets one record per step: (step, losses, lr).
template <typename LogFn>
VqaeTrainReport train_vqae(Vqae& model, const std::vector<ImageRGB>& train_images,
                           const VqaeTrainConfig& cfg, LogFn&& log) {
  TOKEDIT_CHECK(!train_images.empty(), TrainingError, "train_vqae: empty dataset");
  nn::AdamW opt(model.params(), cfg.lr, 0.9, 0.999);
  Rng order_rng(derive_seed(cfg.seed, "vqae.order"));
  Rng revive_rng(derive_seed(cfg.seed, "vqae.revive"));

  {
    Rng init_rng(derive_seed(cfg.seed, "vqae.codebook_init"));
    size_t take = std::min<size_t>(train_images.size(), 64);
    std::vector<ImageRGB> first(train_images.begin(),
                                train_images.begin() + static_cast<long>(take));
    model.maybe_init_codebook_from_data(first, init_rng);
  }

  std::vector<size_t> idx(train_images.size());
  for (size_t i = 0; i < idx.size(); i++) idx[i] = i;

  VqaeTrainReport report;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; epoch++) {
    order_rng.shuffle(idx);
    double epoch_sum = 0.0;
    int nb = 0;
    for (size_t off = 0; off + 1 <= idx.size(); off += static_cast<size_t>(cfg.batch_size)) {
      size_t take = std::min(static_cast<size_t>(cfg.batch_size), idx.size() - off);
      std::vector<ImageRGB> batch;
      for (size_t i = 0; i < take; i++) batch.push_back(train_images[idx[off + i]]);
      auto losses = model.train_step(images_to_tensor(batch), opt);
      epoch_sum += losses.total;
      nb++;
      step++;
      log(step, losses, cfg.lr);
      if (cfg.revival_interval > 0 && step % cfg.revival_interval == 0)
        model.revive_dead_codes(revive_rng);
      report.final_loss = losses.total;
    }
    report.epoch_loss.push_back(epoch_sum / std::max(1, nb));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline void save_vqae(const std::string& path, const Vqae& model, uint64_t vocab_hash,
                      uint64_t training_seed) {
  nlohmann::json header;
  header["kind"] = "vqae";
  header["config"] = {{"K", model.config().K},
                      {"n_z", model.config().n_z},
                      {"h", model.config().h},
                      {"w", model.config().w},
                      {"image_size", model.config().image_size}};
  header["vocab_hash"] = hash_hex(vocab_hash);
  header["training_seed"] = training_seed;
  header["param_hash"] = hash_hex(model.params().value_hash());
  save_checkpoint(path, header, model.params());
}

inline Vqae load_vqae(const std::string& path) {
  nlohmann::json header = read_checkpoint_header(path);
  TOKEDIT_CHECK(header.value("kind", "") == "vqae", FormatError,
                "checkpoint %s is not a vqae checkpoint", path.c_str());
  CodebookConfig cfg;
  cfg.K = header["config"]["K"].get<int>();
  cfg.n_z = header["config"]["n_z"].get<int>();
  cfg.h = header["config"]["h"].get<int>();
  cfg.w = header["config"]["w"].get<int>();
  cfg.image_size = header["config"]["image_size"].get<int>();
  Vqae model(cfg);
  load_checkpoint(path, model.params());
  model.mark_codebook_initialized();
  return model;
}

}  // namespace tokedit
