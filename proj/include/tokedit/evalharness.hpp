#pragma once

// Metric suite: CLIP-score (x100), retrieval R@N over 1 positive + 99
// sampled negatives, positive-text L2 error through the full pipeline,
// background MSE outside the dilated edit footprint, alignment IoU, and an
// inception-style score over a 24-way shape-x-color classifier.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokedit/alignment.hpp"
#include "tokedit/checkpoint.hpp"
#include "tokedit/pipeline.hpp"
#include "tokedit/synthdata.hpp"

namespace tokedit {

// ---------------------------------------------------------------------------
// CLIP-score
// ---------------------------------------------------------------------------

using PairScorer = std::function<double(const ImageRGB&, const std::string&)>;

// mean cosine over pairs, reported x100
inline double clip_score(const std::vector<std::pair<ImageRGB, std::string>>& pairs,
                         const PairScorer& scorer) {
  TOKEDIT_CHECK(!pairs.empty(), Error, "clip_score: empty pair list");
  double acc = 0.0;
  for (const auto& [img, caption] : pairs) acc += scorer(img, caption);
  return 100.0 * acc / static_cast<double>(pairs.size());
}

inline double clip_score(const std::vector<std::pair<ImageRGB, std::string>>& pairs,
                         const DualEncoder& judge) {
  return clip_score(pairs, [&judge](const ImageRGB& img, const std::string& cap) {
    return judge.global_similarity(img, cap);
  });
}

// ---------------------------------------------------------------------------
// Retrieval recall. Each image ranks 100 candidates (its positive inserted at
// a seeded position among 99 distinct sampled negatives) by descending score;
// stable sort, so ties keep insertion order. R@N = fraction of images whose
// positive lands in the top N.
// ---------------------------------------------------------------------------

inline std::map<int, double> retrieval_recall(
    const std::vector<ImageRGB>& images, const std::vector<std::string>& positive_texts,
    const std::vector<std::string>& negative_pool, const std::vector<int>& ns,
    const PairScorer& scorer, uint64_t seed, int num_negatives = 99) {
  TOKEDIT_CHECK(images.size() == positive_texts.size() && !images.empty(), ShapeError,
                "retrieval_recall: images/texts mismatch");
  std::vector<int> ranks;
  for (size_t i = 0; i < images.size(); i++) {
    Rng rng(derive_seed(seed, "retrieval.case", i));
    // distinct negatives, none equal to the positive
    std::vector<size_t> pool_idx(negative_pool.size());
    for (size_t p = 0; p < pool_idx.size(); p++) pool_idx[p] = p;
    rng.shuffle(pool_idx);
    std::vector<std::string> negatives;
    for (size_t p : pool_idx) {
      const std::string& cand = negative_pool[p];
      if (cand == positive_texts[i]) continue;
      if (std::find(negatives.begin(), negatives.end(), cand) != negatives.end()) continue;
      negatives.push_back(cand);
      if (static_cast<int>(negatives.size()) == num_negatives) break;
    }
    TOKEDIT_CHECK(static_cast<int>(negatives.size()) == num_negatives, Error,
                  "negative pool too small: %zu distinct negatives for '%s'", negatives.size(),
                  positive_texts[i].c_str());
    int pos_index = rng.uniform_int(0, num_negatives);
    std::vector<std::string> candidates;
    for (int c = 0; c <= num_negatives; c++) {
      if (c == pos_index)
        candidates.push_back(positive_texts[i]);
      if (c < num_negatives) candidates.push_back(negatives[static_cast<size_t>(c)]);
    }
    std::vector<std::pair<double, int>> scored;
    for (size_t c = 0; c < candidates.size(); c++)
      scored.emplace_back(scorer(images[i], candidates[c]), static_cast<int>(c));
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    int rank = 0;
    for (size_t r = 0; r < scored.size(); r++)
      if (scored[r].second == pos_index) {
        rank = static_cast<int>(r) + 1;
        break;
      }
    ranks.push_back(rank);
  }
  std::map<int, double> out;
  for (int n : ns) {
    int hits = 0;
    for (int r : ranks) hits += r <= n ? 1 : 0;
    out[n] = static_cast<double>(hits) / static_cast<double>(ranks.size());
  }
  return out;
}

inline std::map<int, double> retrieval_recall(const std::vector<ImageRGB>& images,
                                              const std::vector<std::string>& positive_texts,
                                              const std::vector<std::string>& negative_pool,
                                              const std::vector<int>& ns,
                                              const DualEncoder& judge, uint64_t seed) {
  return retrieval_recall(
      images, positive_texts, negative_pool, ns,
      [&judge](const ImageRGB& img, const std::string& cap) {
        return judge.global_similarity(img, cap);
      },
      seed);
}

// ---------------------------------------------------------------------------
// Pixel metrics
// ---------------------------------------------------------------------------

inline double masked_mse(const ImageRGB& a, const ImageRGB& b, const PixelMask& region) {
  TOKEDIT_CHECK(a.h == b.h && a.w == b.w && region.h == a.h && region.w == a.w, ShapeError,
                "masked_mse: shape mismatch");
  double acc = 0.0;
  size_t n = 0;
  for (int y = 0; y < a.h; y++)
    for (int x = 0; x < a.w; x++) {
      if (!region.at(y, x)) continue;
      for (int c = 0; c < 3; c++) {
        double d = static_cast<double>(a.at(y, x, c)) - b.at(y, x, c);
        acc += d * d;
      }
      n++;
    }
  return n == 0 ? 0.0 : acc / static_cast<double>(3 * n);
}

inline PixelMask dilate_chebyshev(const PixelMask& mask, int radius) {
  PixelMask out(mask.h, mask.w);
  for (int y = 0; y < mask.h; y++)
    for (int x = 0; x < mask.w; x++) {
      if (!mask.at(y, x)) continue;
      for (int dy = -radius; dy <= radius; dy++)
        for (int dx = -radius; dx <= radius; dx++) {
          int ny = y + dy, nx = x + dx;
          if (ny >= 0 && ny < mask.h && nx >= 0 && nx < mask.w) out.at(ny, nx) = 1;
        }
    }
  return out;
}

// Edit footprint: the edited entity's source mask, plus its oracle mask for
// replacement edits.
inline PixelMask edit_footprint(const ManipulationCase& mc) {
  PixelMask fp = mc.source.entity_masks[static_cast<size_t>(mc.edited_entity_index)];
  const PixelMask& target = mc.target_oracle.entity_masks[static_cast<size_t>(mc.edited_entity_index)];
  for (size_t i = 0; i < fp.v.size(); i++) fp.v[i] = (fp.v[i] || target.v[i]) ? 1 : 0;
  return fp;
}

// Pixels outside the edit footprint dilated by one token cell.
inline PixelMask background_region(const ManipulationCase& mc, int dilation_px = 8) {
  PixelMask dil = dilate_chebyshev(edit_footprint(mc), dilation_px);
  PixelMask out(dil.h, dil.w);
  for (size_t i = 0; i < dil.v.size(); i++) out.v[i] = dil.v[i] ? 0 : 1;
  return out;
}

inline double background_mse(const ManipulationResult& result, const ManipulationCase& mc,
                             int dilation_px = 8) {
  TOKEDIT_CHECK(!mc.source.entity_masks.empty(), Error, "background_mse: case has no masks");
  return masked_mse(result.output, mc.source.image, background_region(mc, dilation_px));
}

// Mean over cases of per-pixel-per-channel squared error between the
// positive-text manipulation output and the source image.
inline double l2_error(const std::vector<ManipulationCase>& cases, const Pipeline& pipe,
                       const SamplingConfig& sampling, const AlignmentConfig& alignment) {
  TOKEDIT_CHECK(!cases.empty(), Error, "l2_error: no cases");
  double acc = 0.0;
  for (size_t i = 0; i < cases.size(); i++) {
    SamplingConfig sc = sampling;
    sc.seed = derive_seed(sampling.seed, "l2.case", i);
    ManipulationRequest req = positive_text_request(cases[i], sc, alignment);
    ManipulationResult res = pipe.manipulate(req, cases[i].source.entity_masks);
    acc += image_mse(res.output, cases[i].source.image);
  }
  return acc / static_cast<double>(cases.size());
}

inline double alignment_iou(const TokenMask& predicted, const TokenMask& oracle) {
  TOKEDIT_CHECK(predicted.h == oracle.h && predicted.w == oracle.w, ShapeError,
                "alignment_iou: %dx%d vs %dx%d", predicted.h, predicted.w, oracle.h, oracle.w);
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < predicted.selected.size(); i++) {
    bool p = predicted.selected[i], o = oracle.selected[i];
    inter += (p && o) ? 1 : 0;
    uni += (p || o) ? 1 : 0;
  }
  if (uni == 0) return 1.0;  // both empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Shape-x-color classifier standing in for the inception network; 24 classes
// (8 colors x 3 shapes), trained on single-entity crops.
// ---------------------------------------------------------------------------

constexpr int kClassifierClasses = kNumColors * kNumShapes;
constexpr int kClassifierInput = 32;

inline int classifier_label(ColorName c, Shape s) {
  return static_cast<int>(c) * kNumShapes + static_cast<int>(s);
}

// Entity bounding box with margin, resampled to the classifier input size.
inline ImageRGB entity_crop(const ImageRGB& image, const EntitySpec& e, int margin = 4) {
  int x0 = std::max(0, e.cx - e.half_extent - margin);
  int x1 = std::min(image.w - 1, e.cx + e.half_extent + margin);
  int y0 = std::max(0, e.cy - e.half_extent - margin);
  int y1 = std::min(image.h - 1, e.cy + e.half_extent + margin);
  ImageRGB crop(y1 - y0 + 1, x1 - x0 + 1);
  for (int y = y0; y <= y1; y++)
    for (int x = x0; x <= x1; x++)
      for (int c = 0; c < 3; c++) crop.at(y - y0, x - x0, c) = image.at(y, x, c);
  return resample_image(crop, kClassifierInput, kClassifierInput);
}

class ShapeClassifier {
 public:
  explicit ShapeClassifier(uint64_t init_seed = 1) {
    Rng rng(derive_seed(init_seed, "classifier.init"));
    c1_ = nn::Conv(params_, "c1", 3, 16, 3, 2, 1, rng);   // 32 -> 16
    c2_ = nn::Conv(params_, "c2", 16, 32, 3, 2, 1, rng);  // 16 -> 8
    c3_ = nn::Conv(params_, "c3", 32, 64, 3, 2, 1, rng);  // 8 -> 4
    // flattened head: shape identity lives in the spatial arrangement
    fc_ = nn::Linear(params_, "fc", 64 * 16, kClassifierClasses, rng);
  }

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  Tensor logits_batch(const Tensor& crops) const {
    TOKEDIT_CHECK(crops.ndim() == 4 && crops.dim(1) == 3 && crops.dim(2) == kClassifierInput &&
                      crops.dim(3) == kClassifierInput,
                  ShapeError, "classifier: expected [N,3,%d,%d]", kClassifierInput,
                  kClassifierInput);
    int N = crops.dim(0);
    Tensor x = relu(c1_(crops));
    x = relu(c2_(x));
    x = relu(c3_(x));
    return fc_(reshape(x, {N, 64 * 16}));
  }

  // posterior over the 24 classes; input images are resampled to 32x32
  std::vector<double> posterior(const ImageRGB& image) const {
    NoGradGuard ng;
    ImageRGB in = (image.h == kClassifierInput && image.w == kClassifierInput)
                      ? image
                      : resample_image(image, kClassifierInput, kClassifierInput);
    Tensor lg = logits_batch(images_to_tensor({in}));
    std::vector<double> p(static_cast<size_t>(kClassifierClasses));
    double mx = lg.data()[0];
    for (int i = 1; i < kClassifierClasses; i++) mx = std::max(mx, (double)lg.data()[i]);
    double sum = 0.0;
    for (int i = 0; i < kClassifierClasses; i++) {
      p[static_cast<size_t>(i)] = std::exp(lg.data()[i] - mx);
      sum += p[static_cast<size_t>(i)];
    }
    for (auto& v : p) v /= sum;
    return p;
  }

 private:
  nn::ParamStore params_;
  nn::Conv c1_, c2_, c3_;
  nn::Linear fc_;
  bool trained_ = false;
};

struct ClassifierTrainConfig {
  int epochs = 6;
  int batch_size = 64;
  double lr = 2e-3;
  uint64_t seed = 1;
};

// crops/labels from every entity of every scene
inline void classifier_training_set(const Dataset& ds, std::vector<ImageRGB>* crops,
                                    std::vector<int>* labels) {
  for (size_t i = 0; i < ds.size(); i++)
    for (const auto& e : ds.specs[i].entities) {
      crops->push_back(entity_crop(ds.samples[i].image, e));
      labels->push_back(classifier_label(e.color, e.shape));
    }
}

inline double train_classifier(ShapeClassifier& model, const std::vector<ImageRGB>& crops,
                               const std::vector<int>& labels,
                               const ClassifierTrainConfig& cfg) {
  TOKEDIT_CHECK(crops.size() == labels.size() && !crops.empty(), TrainingError,
                "train_classifier: bad dataset");
  nn::AdamW opt(model.params(), cfg.lr, 0.9, 0.999);
  Rng order_rng(derive_seed(cfg.seed, "classifier.order"));
  std::vector<size_t> idx(crops.size());
  for (size_t i = 0; i < idx.size(); i++) idx[i] = i;
  double last = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; epoch++) {
    order_rng.shuffle(idx);
    for (size_t off = 0; off + 1 <= idx.size(); off += static_cast<size_t>(cfg.batch_size)) {
      size_t take = std::min(static_cast<size_t>(cfg.batch_size), idx.size() - off);
      std::vector<ImageRGB> batch;
      std::vector<int> targets;
      for (size_t i = 0; i < take; i++) {
        batch.push_back(crops[idx[off + i]]);
        targets.push_back(labels[idx[off + i]]);
      }
      Tensor lg = model.logits_batch(images_to_tensor(batch));
      Tensor loss = cross_entropy_mean(lg, targets,
                                       std::vector<float>(targets.size(), 1.0f));
      last = loss.scalar();
      TOKEDIT_CHECK(std::isfinite(last), TrainingError, "classifier diverged");
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  model.mark_trained();
  return last;
}

inline void save_classifier(const std::string& path, const ShapeClassifier& model,
                            uint64_t training_seed) {
  nlohmann::json header;
  header["kind"] = "classifier";
  header["classes"] = kClassifierClasses;
  header["input"] = kClassifierInput;
  header["training_seed"] = training_seed;
  header["trained"] = model.trained();
  save_checkpoint(path, header, model.params());
}

inline ShapeClassifier load_classifier(const std::string& path) {
  nlohmann::json header = read_checkpoint_header(path);
  TOKEDIT_CHECK(header.value("kind", "") == "classifier", FormatError,
                "checkpoint %s is not a classifier", path.c_str());
  ShapeClassifier model;
  load_checkpoint(path, model.params());
  if (header.value("trained", false)) model.mark_trained();
  return model;
}

// exp(E_x KL(p(y|x) || p(y))) with natural logs.
inline double is_score_from_posteriors(const std::vector<std::vector<double>>& posts) {
  TOKEDIT_CHECK(!posts.empty(), Error, "is_score: no posteriors");
  size_t classes = posts[0].size();
  std::vector<double> marginal(classes, 0.0);
  for (const auto& p : posts) {
    TOKEDIT_CHECK(p.size() == classes, ShapeError, "is_score: ragged posteriors");
    for (size_t c = 0; c < classes; c++) marginal[c] += p[c];
  }
  for (auto& m : marginal) m /= static_cast<double>(posts.size());
  double mean_kl = 0.0;
  for (const auto& p : posts) {
    double kl = 0.0;
    for (size_t c = 0; c < classes; c++) {
      if (p[c] <= 0.0) continue;
      kl += p[c] * std::log(p[c] / std::max(marginal[c], 1e-30));
    }
    mean_kl += kl;
  }
  mean_kl /= static_cast<double>(posts.size());
  return std::exp(mean_kl);
}

inline double is_score(const std::vector<ImageRGB>& images, const ShapeClassifier& classifier) {
  TOKEDIT_CHECK(classifier.trained(), DependencyError, "is_score: classifier is untrained");
  TOKEDIT_CHECK(!images.empty(), Error, "is_score: no images");
  std::vector<std::vector<double>> posts;
  for (const auto& img : images) posts.push_back(classifier.posterior(img));
  return is_score_from_posteriors(posts);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricReport {
  double clip_score = 0.0;
  std::map<int, double> recall_at;
  double l2_error = 0.0;
  double background_mse = 0.0;
  double alignment_iou = 0.0;
  double is_score = 0.0;
  int n_samples = 0;
  uint64_t seed = 0;
  std::map<std::string, std::string> checkpoint_hashes;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["clip_score"] = clip_score;
    nlohmann::json r;
    for (const auto& [n, v] : recall_at) r[std::to_string(n)] = v;
    j["recall_at"] = r;
    j["l2_error"] = l2_error;
    j["background_mse"] = background_mse;
    j["alignment_iou"] = alignment_iou;
    j["is_score"] = is_score;
    j["n_samples"] = n_samples;
    j["seed"] = seed;
    j["checkpoint_hashes"] = checkpoint_hashes;
    return j;
  }

  static std::string csv_header() {
    return "clip_score,r_at_1,r_at_5,r_at_10,r_at_100,l2_error,background_mse,alignment_iou,"
           "is_score,n_samples,seed";
  }

  std::string to_csv_row() const {
    auto r = [&](int n) { return recall_at.count(n) ? recall_at.at(n) : 0.0; };
    return format_str("%.4f,%.4f,%.4f,%.4f,%.4f,%.6f,%.6f,%.4f,%.4f,%d,%llu", clip_score, r(1),
                      r(5), r(10), r(100), l2_error, background_mse, alignment_iou, is_score,
                      n_samples, static_cast<unsigned long long>(seed));
  }
};

}  // namespace tokedit
