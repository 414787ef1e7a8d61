#pragma once

// Run configuration: one JSON file with a section per module. Every value
// has a default; CLI flags override file values. The canonical dump of the
// effective configuration is hashed into every artifact this run emits.

#include <fstream>
#include <string>

#include <json.hpp>

#include "tokedit/alignment.hpp"
#include "tokedit/artransformer.hpp"
#include "tokedit/dualencoder.hpp"
#include "tokedit/evalharness.hpp"
#include "tokedit/synthdata.hpp"
#include "tokedit/vqae.hpp"

namespace tokedit {

struct EvalConfig {
  int n_cases = 200;
  std::vector<int> recall_ns = {1, 5, 10, 100};
  int num_negatives = 99;
  uint64_t pool_seed = 0;
};

struct RunConfig {
  uint64_t root_seed = 42;
  std::string out_dir = "runs/default";

  // synthdata
  size_t n_samples = 2200;
  SceneSamplerOptions sampler;

  // stage configs
  CodebookConfig codebook;
  VqaeTrainConfig vqae_train;
  int vqae_settle_epochs = 4;
  double vqae_settle_lr = 5e-4;

  DualEncoderConfig dual;
  DualTrainConfig dual_train;

  ModelConfig transformer;
  TransformerTrainConfig transformer_train;
  SamplingConfig sampling;

  AlignmentConfig alignment;
  bool theta_from_calibration = true;  // false once alignment.theta is set explicitly

  ClassifierTrainConfig classifier_train;

  EvalConfig eval;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["root_seed"] = root_seed;
    j["out_dir"] = out_dir;
    j["synthdata"] = {{"n_samples", n_samples},
                      {"min_entities", sampler.min_entities},
                      {"max_entities", sampler.max_entities},
                      {"min_half_extent", sampler.min_half_extent},
                      {"max_half_extent", sampler.max_half_extent}};
    j["vqae"] = {{"K", codebook.K},
                 {"n_z", codebook.n_z},
                 {"grid", codebook.h},
                 {"epochs", vqae_train.epochs},
                 {"settle_epochs", vqae_settle_epochs},
                 {"batch_size", vqae_train.batch_size},
                 {"lr", vqae_train.lr},
                 {"settle_lr", vqae_settle_lr},
                 {"revival_interval", vqae_train.revival_interval}};
    j["dualencoder"] = {{"embed_dim", dual.embed_dim},
                        {"grid", dual.grid},
                        {"word_embed_dim", dual.word_embed_dim},
                        {"text_hidden", dual.text_hidden},
                        {"epochs", dual_train.epochs},
                        {"batch_size", dual_train.batch_size},
                        {"lr", dual_train.lr}};
    j["artransformer"] = {{"layers", transformer.layers},
                          {"heads", transformer.heads},
                          {"head_dim", transformer.head_dim},
                          {"ffn_mult", transformer.ffn_mult},
                          {"dropout", transformer.dropout},
                          {"epochs", transformer_train.epochs},
                          {"batch_size", transformer_train.batch_size},
                          {"peak_lr", transformer_train.peak_lr},
                          {"warmup_steps", transformer_train.warmup_steps},
                          {"plateau_patience", transformer_train.plateau_patience},
                          {"weight_decay", transformer_train.weight_decay},
                          {"clip_norm", transformer_train.clip_norm},
                          {"loss_weights",
                           {{"l1", transformer_train.weights.l1},
                            {"l2", transformer_train.weights.l2},
                            {"l3", transformer_train.weights.l3},
                            {"l4", transformer_train.weights.l4}}},
                          {"sampling",
                           {{"temperature", sampling.temperature},
                            {"top_k", sampling.top_k},
                            {"rerank_candidates", sampling.rerank_candidates}}}};
    j["alignment"] = {{"theta", alignment.theta},
                      {"theta_from_calibration", theta_from_calibration},
                      {"provider", alignment.provider == SegmentationProvider::GroundTruth
                                       ? "ground-truth"
                                       : "external-file"},
                      {"method", alignment.method == AlignmentMethod::SemanticAlignment
                                     ? "semantic"
                                     : "word-patch"},
                      {"external_mask_path", alignment.external_mask_path}};
    j["classifier"] = {{"epochs", classifier_train.epochs},
                       {"batch_size", classifier_train.batch_size},
                       {"lr", classifier_train.lr}};
    j["eval"] = {{"n_cases", eval.n_cases},
                 {"recall_ns", eval.recall_ns},
                 {"num_negatives", eval.num_negatives},
                 {"pool_seed", eval.pool_seed}};
    return j;
  }

  std::string hash_hexstr() const { return hash_hex(fnv1a(to_json().dump())); }
};

namespace detail {
template <typename T>
void maybe(const nlohmann::json& j, const char* key, T* out) {
  if (j.contains(key)) *out = j.at(key).get<T>();
}
}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  detail::maybe(j, "root_seed", &c.root_seed);
  detail::maybe(j, "out_dir", &c.out_dir);
  if (j.contains("synthdata")) {
    const auto& s = j.at("synthdata");
    detail::maybe(s, "n_samples", &c.n_samples);
    detail::maybe(s, "min_entities", &c.sampler.min_entities);
    detail::maybe(s, "max_entities", &c.sampler.max_entities);
    detail::maybe(s, "min_half_extent", &c.sampler.min_half_extent);
    detail::maybe(s, "max_half_extent", &c.sampler.max_half_extent);
  }
  if (j.contains("vqae")) {
    const auto& s = j.at("vqae");
    detail::maybe(s, "K", &c.codebook.K);
    detail::maybe(s, "n_z", &c.codebook.n_z);
    if (s.contains("grid")) {
      c.codebook.h = c.codebook.w = s.at("grid").get<int>();
    }
    detail::maybe(s, "epochs", &c.vqae_train.epochs);
    detail::maybe(s, "settle_epochs", &c.vqae_settle_epochs);
    detail::maybe(s, "batch_size", &c.vqae_train.batch_size);
    detail::maybe(s, "lr", &c.vqae_train.lr);
    detail::maybe(s, "settle_lr", &c.vqae_settle_lr);
    detail::maybe(s, "revival_interval", &c.vqae_train.revival_interval);
  }
  if (j.contains("dualencoder")) {
    const auto& s = j.at("dualencoder");
    detail::maybe(s, "embed_dim", &c.dual.embed_dim);
    detail::maybe(s, "grid", &c.dual.grid);
    detail::maybe(s, "word_embed_dim", &c.dual.word_embed_dim);
    detail::maybe(s, "text_hidden", &c.dual.text_hidden);
    detail::maybe(s, "epochs", &c.dual_train.epochs);
    detail::maybe(s, "batch_size", &c.dual_train.batch_size);
    detail::maybe(s, "lr", &c.dual_train.lr);
  }
  if (j.contains("artransformer")) {
    const auto& s = j.at("artransformer");
    detail::maybe(s, "layers", &c.transformer.layers);
    detail::maybe(s, "heads", &c.transformer.heads);
    detail::maybe(s, "head_dim", &c.transformer.head_dim);
    detail::maybe(s, "ffn_mult", &c.transformer.ffn_mult);
    detail::maybe(s, "dropout", &c.transformer.dropout);
    detail::maybe(s, "epochs", &c.transformer_train.epochs);
    detail::maybe(s, "batch_size", &c.transformer_train.batch_size);
    detail::maybe(s, "peak_lr", &c.transformer_train.peak_lr);
    detail::maybe(s, "warmup_steps", &c.transformer_train.warmup_steps);
    detail::maybe(s, "plateau_patience", &c.transformer_train.plateau_patience);
    detail::maybe(s, "weight_decay", &c.transformer_train.weight_decay);
    detail::maybe(s, "clip_norm", &c.transformer_train.clip_norm);
    if (s.contains("loss_weights")) {
      const auto& w = s.at("loss_weights");
      detail::maybe(w, "l1", &c.transformer_train.weights.l1);
      detail::maybe(w, "l2", &c.transformer_train.weights.l2);
      detail::maybe(w, "l3", &c.transformer_train.weights.l3);
      detail::maybe(w, "l4", &c.transformer_train.weights.l4);
    }
    if (s.contains("sampling")) {
      const auto& sp = s.at("sampling");
      detail::maybe(sp, "temperature", &c.sampling.temperature);
      detail::maybe(sp, "top_k", &c.sampling.top_k);
      detail::maybe(sp, "rerank_candidates", &c.sampling.rerank_candidates);
    }
  }
  if (j.contains("alignment")) {
    const auto& s = j.at("alignment");
    if (s.contains("theta") && !s.at("theta").is_null()) {
      c.alignment.theta = s.at("theta").get<double>();
      c.theta_from_calibration = false;
    }
    if (s.contains("provider")) {
      std::string p = s.at("provider").get<std::string>();
      if (p == "ground-truth")
        c.alignment.provider = SegmentationProvider::GroundTruth;
      else if (p == "external-file")
        c.alignment.provider = SegmentationProvider::ExternalFile;
      else
        throw FormatError("unknown segmentation provider '" + p + "'");
    }
    if (s.contains("method")) {
      std::string m = s.at("method").get<std::string>();
      if (m == "semantic")
        c.alignment.method = AlignmentMethod::SemanticAlignment;
      else if (m == "word-patch")
        c.alignment.method = AlignmentMethod::WordPatch;
      else
        throw FormatError("unknown alignment method '" + m + "'");
    }
    detail::maybe(s, "external_mask_path", &c.alignment.external_mask_path);
  }
  if (j.contains("classifier")) {
    const auto& s = j.at("classifier");
    detail::maybe(s, "epochs", &c.classifier_train.epochs);
    detail::maybe(s, "batch_size", &c.classifier_train.batch_size);
    detail::maybe(s, "lr", &c.classifier_train.lr);
  }
  if (j.contains("eval")) {
    const auto& s = j.at("eval");
    detail::maybe(s, "n_cases", &c.eval.n_cases);
    if (s.contains("recall_ns")) c.eval.recall_ns = s.at("recall_ns").get<std::vector<int>>();
    detail::maybe(s, "num_negatives", &c.eval.num_negatives);
    detail::maybe(s, "pool_seed", &c.eval.pool_seed);
  }

  // derived seeds default to substreams of the root
  c.vqae_train.seed = derive_seed(c.root_seed, "cfg.vqae");
  c.dual_train.seed = derive_seed(c.root_seed, "cfg.dual");
  c.transformer_train.seed = derive_seed(c.root_seed, "cfg.transformer");
  c.classifier_train.seed = derive_seed(c.root_seed, "cfg.classifier");
  if (c.eval.pool_seed == 0) c.eval.pool_seed = derive_seed(c.root_seed, "cfg.eval_pool");
  c.transformer.max_seq_len = 1 + kTextLen + 1 + c.codebook.h * c.codebook.w * 2;
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  TOKEDIT_CHECK(is.good(), IoError, "cannot open config %s", path.c_str());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config parse error: ") + e.what());
  }
  return parse_run_config(j);
}

}  // namespace tokedit
