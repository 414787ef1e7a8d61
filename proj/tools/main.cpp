// tokedit: data generation, staged training, manipulation, evaluation, and
// ablations for the synthetic-scene manipulation pipeline, driven by one JSON
// configuration file. Exit codes: 0 success, 1 usage error, 2 dependency or
// format error, 3 numeric or training failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "tokedit/config.hpp"
#include "tokedit/evalharness.hpp"
#include "tokedit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tokedit;

namespace {

std::string resolve_out_dir(const RunConfig& cfg) {
  const char* env = std::getenv("TOKEDIT_OUT_DIR");
  return env && *env ? std::string(env) : cfg.out_dir;
}

struct JsonlLogger {
  std::ofstream os;
  explicit JsonlLogger(const fs::path& path) {
    fs::create_directories(path.parent_path());
    os.open(path);
    TOKEDIT_CHECK(os.good(), IoError, "cannot open log file %s", path.string().c_str());
  }
  void log(nlohmann::json j) { os << j.dump() << "\n"; }
};

struct Paths {
  fs::path root, data, ckpt, logs;
  explicit Paths(const std::string& out) : root(out) {
    data = root / "data";
    ckpt = root / "checkpoints";
    logs = root / "logs";
  }
  fs::path checkpoint(const std::string& stage) const { return ckpt / (stage + ".ckpt"); }
};

Dataset require_dataset(const Paths& p) {
  TOKEDIT_CHECK(fs::exists(p.data / "MANIFEST"), DependencyError,
                "no dataset under %s (run synth-gen first)", p.data.string().c_str());
  return read_dataset(p.data.string());
}

void split_dataset(const Dataset& ds, uint64_t root_seed, Dataset* train, Dataset* val) {
  for (size_t i = 0; i < ds.size(); i++) {
    Dataset* dst = is_validation_index(root_seed, i) ? val : train;
    dst->specs.push_back(ds.specs[i]);
    dst->samples.push_back(ds.samples[i]);
  }
  train->root_seed = val->root_seed = ds.root_seed;
}

std::string require_file(const fs::path& p, const char* what) {
  TOKEDIT_CHECK(fs::exists(p), DependencyError, "missing %s checkpoint: %s (train it first)",
                what, p.string().c_str());
  return p.string();
}

// ---------------------------------------------------------------------------
// loaded checkpoint set
// ---------------------------------------------------------------------------

struct Loaded {
  Vocabulary vocab;
  std::optional<Vqae> vq;
  std::optional<DualEncoder> critic, judge;
  std::optional<ArTransformer> transformer;
  std::optional<ShapeClassifier> classifier;
  double calibrated_theta = 0.0;
  std::map<std::string, std::string> hashes;

  explicit Loaded(int K) : vocab(K) {}
};

Loaded load_stages(const RunConfig& cfg, const Paths& p, bool need_vq, bool need_critic,
                   bool need_judge, bool need_tf, bool need_clf,
                   const std::string& tf_name = "transformer") {
  Loaded l(cfg.codebook.K);
  if (need_vq) {
    auto path = require_file(p.checkpoint("vqae"), "vqae");
    l.vq.emplace(load_vqae(path));
    l.vq->params().freeze();
    l.hashes["vqae"] = hash_hex(file_hash(path));
  }
  if (need_critic) {
    auto path = require_file(p.checkpoint("dual-critic"), "dual-critic");
    l.critic.emplace(load_dual(path, l.vocab));
    l.critic->params().freeze();
    l.hashes["dual-critic"] = hash_hex(file_hash(path));
    auto hdr = read_checkpoint_header(path);
    l.calibrated_theta = hdr.value("calibrated_theta", 0.0);
  }
  if (need_judge) {
    auto path = require_file(p.checkpoint("dual-judge"), "dual-judge");
    l.judge.emplace(load_dual(path, l.vocab));
    l.judge->params().freeze();
    l.hashes["dual-judge"] = hash_hex(file_hash(path));
  }
  if (need_tf) {
    auto path = require_file(p.checkpoint(tf_name), tf_name.c_str());
    l.transformer.emplace(load_transformer(path, l.vocab));
    l.transformer->params().freeze();
    l.hashes["transformer"] = hash_hex(file_hash(path));
  }
  if (need_clf) {
    auto path = require_file(p.checkpoint("classifier"), "classifier");
    l.classifier.emplace(load_classifier(path));
    l.classifier->params().freeze();
    l.hashes["classifier"] = hash_hex(file_hash(path));
  }
  return l;
}

double effective_theta(const RunConfig& cfg, const Loaded& l) {
  return cfg.theta_from_calibration ? l.calibrated_theta : cfg.alignment.theta;
}

// attach the config hash to an existing checkpoint header
void stamp_config_hash(const fs::path& path, const Vocabulary& vocab,
                       const std::string& config_hash) {
  auto hdr = read_checkpoint_header(path.string());
  if (hdr.value("config_hash", "") == config_hash) return;
  hdr["config_hash"] = config_hash;
  std::string kind = hdr.value("kind", "");
  if (kind == "vqae") {
    Vqae m = load_vqae(path.string());
    save_checkpoint(path.string(), hdr, m.params());
  } else if (kind == "dualencoder") {
    DualEncoder m = load_dual(path.string(), vocab);
    save_checkpoint(path.string(), hdr, m.params());
  } else if (kind == "artransformer") {
    ArTransformer m = load_transformer(path.string(), vocab);
    save_checkpoint(path.string(), hdr, m.params());
  } else if (kind == "classifier") {
    ShapeClassifier m = load_classifier(path.string());
    save_checkpoint(path.string(), hdr, m.params());
  }
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_synth_gen(const RunConfig& cfg) {
  Paths p(resolve_out_dir(cfg));
  Dataset ds = generate_dataset(cfg.n_samples, cfg.root_seed, cfg.sampler);
  write_dataset(ds, p.data.string());
  fs::create_directories(p.ckpt);
  std::ofstream vocab_txt(p.ckpt / "vocab.txt");
  vocab_txt << Vocabulary(cfg.codebook.K).describe();
  size_t val = 0;
  for (size_t i = 0; i < ds.size(); i++) val += is_validation_index(cfg.root_seed, i) ? 1 : 0;
  std::cout << "wrote " << ds.size() << " samples (" << ds.size() - val << " train, " << val
            << " val) to " << p.data << "\nconfig hash " << cfg.hash_hexstr() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& stage, double lambda4_override,
              const std::string& tf_name) {
  Paths p(resolve_out_dir(cfg));
  Dataset all = require_dataset(p);
  Dataset train, val;
  split_dataset(all, cfg.root_seed, &train, &val);
  fs::create_directories(p.ckpt);
  std::string config_hash = cfg.hash_hexstr();
  Vocabulary vocab(cfg.codebook.K);
  std::string saved_name = stage == "transformer" ? tf_name : stage;

  if (stage == "vqae") {
    JsonlLogger log(p.logs / "vqae.jsonl");
    std::vector<ImageRGB> images;
    for (const auto& s : train.samples) images.push_back(s.image);
    Vqae model(cfg.codebook, derive_seed(cfg.root_seed, "vqae.model"));
    auto logfn = [&](int64_t step, const Vqae::StepLosses& s, double lr) {
      log.log({{"step", step}, {"total", s.total}, {"recon", s.recon},
               {"codebook", s.codebook}, {"commit", s.commit}, {"lr", lr}});
    };
    train_vqae(model, images, cfg.vqae_train, logfn);
    VqaeTrainConfig settle = cfg.vqae_train;
    settle.epochs = cfg.vqae_settle_epochs;
    settle.lr = cfg.vqae_settle_lr;
    train_vqae(model, images, settle, logfn);
    save_vqae(p.checkpoint("vqae").string(), model, vocab.hash(), cfg.vqae_train.seed);
    double mse = 0.0;
    for (const auto& s : val.samples) mse += image_mse(model.reconstruct(s.image), s.image);
    std::cout << "vqae trained; held-out recon mse " << mse / val.size() << "\n";
  } else if (stage == "dual-critic" || stage == "dual-judge") {
    bool is_critic = stage == "dual-critic";
    JsonlLogger log(p.logs / (stage + ".jsonl"));
    std::vector<ImageRGB> images;
    std::vector<std::string> captions;
    for (const auto& s : train.samples) {
      images.push_back(s.image);
      captions.push_back(s.caption);
    }
    DualEncoder model(cfg.dual, vocab, is_critic ? EncoderRole::Critic : EncoderRole::Judge,
                      derive_seed(cfg.root_seed, is_critic ? "critic.model" : "judge.model"));
    train_dual(model, images, captions, cfg.dual_train,
               [&](int64_t step, const DualLosses& s, double lr) {
                 log.log({{"step", step}, {"total", s.total}, {"global_nce", s.global_nce},
                          {"token_nce", s.token_nce}, {"lr", lr}});
               });
    save_dual(p.checkpoint(stage).string(), model, vocab.hash(), cfg.dual_train.seed);
    if (is_critic) {
      model.params().freeze();
      double theta = calibrate_theta(val.samples, model, cfg.codebook.h, cfg.codebook.w);
      auto path = p.checkpoint(stage).string();
      auto hdr = read_checkpoint_header(path);
      hdr["calibrated_theta"] = theta;
      save_checkpoint(path, hdr, model.params());
      std::cout << "critic trained; calibrated theta " << theta << "\n";
    } else {
      std::cout << "judge trained\n";
    }
  } else if (stage == "transformer") {
    JsonlLogger log(p.logs / (tf_name + ".jsonl"));
    TransformerTrainConfig tc = cfg.transformer_train;
    if (lambda4_override >= 0.0) tc.weights.l4 = lambda4_override;
    bool semantic_on = tc.weights.l4 > 0.0;
    Loaded l = load_stages(cfg, p, true, semantic_on, false, false, false);
    std::map<std::string, Tensor> text_embs;
    std::vector<TransformerCacheItem> items;
    for (const auto& s : train.samples) {
      TransformerCacheItem it;
      it.text = vocab.encode_text(s.caption);
      it.image = l.vq->tokenize(s.image);
      it.gray = l.vq->grayscale_guidance_tokens(s.image);
      if (semantic_on) {
        auto found = text_embs.find(s.caption);
        if (found == text_embs.end()) {
          NoGradGuard ng;
          found = text_embs
                      .emplace(s.caption, l.critic->embed_text_batch({it.text}).global.detach())
                      .first;
        }
        it.critic_text_emb = found->second;
      }
      items.push_back(std::move(it));
    }
    ArTransformer model(cfg.transformer, vocab, cfg.codebook.h, cfg.codebook.w,
                        derive_seed(cfg.root_seed, "tf.model"));
    train_transformer(model, items, *l.vq, semantic_on ? &*l.critic : nullptr, tc,
                      [&](int64_t step, const LossValues& v, double lr) {
                        log.log({{"step", step}, {"total", v.total}, {"ar", v.ar},
                                 {"img", v.img}, {"gray", v.gray}, {"txt", v.txt},
                                 {"semantic", v.semantic}, {"lr", lr}});
                      });
    save_transformer(p.checkpoint(tf_name).string(), model, tc.weights, vocab.hash(),
                     l.hashes["vqae"], tc.seed);
    std::cout << tf_name << " trained (lambda4 " << tc.weights.l4 << ")\n";
  } else if (stage == "classifier") {
    std::vector<ImageRGB> crops;
    std::vector<int> labels;
    classifier_training_set(train, &crops, &labels);
    ShapeClassifier model(derive_seed(cfg.root_seed, "classifier.model"));
    train_classifier(model, crops, labels, cfg.classifier_train);
    save_classifier(p.checkpoint("classifier").string(), model, cfg.classifier_train.seed);
    std::cout << "classifier trained on " << crops.size() << " crops\n";
  } else {
    throw DependencyError("unknown training stage '" + stage + "'");
  }

  stamp_config_hash(p.checkpoint(saved_name), vocab, config_hash);
  return 0;
}

struct EvalOptions {
  std::string split = "val";
  std::string tf_name = "transformer";
  std::optional<AlignmentMethod> method_override;
  std::optional<bool> guidance_override;
  std::string tag = "report";
};

MetricReport run_evaluation(const RunConfig& cfg, const Paths& p, const EvalOptions& opt) {
  Dataset all = require_dataset(p);
  Dataset train, val;
  split_dataset(all, cfg.root_seed, &train, &val);
  const Dataset& eval_ds = opt.split == "train" ? train : val;
  TOKEDIT_CHECK(!eval_ds.samples.empty(), DependencyError, "evaluation split '%s' is empty",
                opt.split.c_str());

  Loaded l = load_stages(cfg, p, true, true, true, true, true, opt.tf_name);
  Pipeline pipe(*l.vq, *l.transformer, *l.critic);
  double theta = effective_theta(cfg, l);

  int n_cases = std::min<int>(cfg.eval.n_cases, static_cast<int>(eval_ds.size()));
  Rng case_rng(derive_seed(cfg.root_seed, "eval.cases"));
  std::vector<ManipulationCase> cases;
  for (int i = 0; i < n_cases; i++)
    cases.push_back(make_edit_case(eval_ds.samples[static_cast<size_t>(i)],
                                   eval_ds.specs[static_cast<size_t>(i)], EditKind::Appearance,
                                   case_rng));

  AlignmentConfig ac = cfg.alignment;
  ac.theta = theta;
  if (opt.method_override) ac.method = *opt.method_override;

  std::vector<ManipulationResult> results;
  std::vector<std::pair<ImageRGB, std::string>> pairs;
  std::vector<ImageRGB> outputs;
  std::vector<std::string> positives;
  for (size_t i = 0; i < cases.size(); i++) {
    SamplingConfig sc = cfg.sampling;
    sc.seed = derive_seed(cfg.root_seed, "eval.sample", i);
    ManipulationRequest req = edit_request(cases[i], sc, ac);
    if (opt.guidance_override) req.use_vision_guidance = *opt.guidance_override;
    results.push_back(pipe.manipulate(req, cases[i].source.entity_masks));
    pairs.emplace_back(results.back().output, cases[i].target_text);
    outputs.push_back(results.back().output);
    positives.push_back(cases[i].target_text);
  }

  MetricReport report;
  report.n_samples = n_cases;
  report.seed = cfg.root_seed;
  report.checkpoint_hashes = l.hashes;
  report.checkpoint_hashes["config"] = cfg.hash_hexstr();
  report.clip_score = clip_score(pairs, *l.judge);

  std::set<std::string> pool;
  for (const auto& s : train.samples) pool.insert(s.caption);
  for (const auto& s : val.samples) pool.insert(s.caption);
  report.recall_at =
      retrieval_recall(outputs, positives, std::vector<std::string>(pool.begin(), pool.end()),
                       cfg.eval.recall_ns, *l.judge, cfg.eval.pool_seed);

  SamplingConfig l2sc = cfg.sampling;
  l2sc.seed = derive_seed(cfg.root_seed, "eval.l2");
  report.l2_error = l2_error(cases, pipe, l2sc, ac);

  double bg = 0.0;
  for (size_t i = 0; i < cases.size(); i++) bg += background_mse(results[i], cases[i]);
  report.background_mse = bg / static_cast<double>(cases.size());

  double iou = 0.0;
  for (size_t i = 0; i < cases.size(); i++) {
    const auto& mc = cases[i];
    TokenMask oracle(cfg.codebook.h, cfg.codebook.w);
    for (size_t e = 0; e < mc.source.entity_nouns.size(); e++)
      if (mc.source.entity_nouns[e] == mc.prompt_word)
        oracle = mask_or(oracle, pixel_mask_to_token_mask(mc.source.entity_masks[e],
                                                          cfg.codebook.h, cfg.codebook.w));
    iou += alignment_iou(results[i].alignment.union_mask, oracle);
  }
  report.alignment_iou = iou / static_cast<double>(cases.size());

  report.is_score = is_score(outputs, *l.classifier);
  return report;
}

int cmd_evaluate(const RunConfig& cfg, const EvalOptions& opt) {
  Paths p(resolve_out_dir(cfg));
  MetricReport report = run_evaluation(cfg, p, opt);
  fs::create_directories(p.root / "eval");
  std::ofstream(p.root / "eval" / (opt.tag + ".json")) << report.to_json().dump(2) << "\n";
  std::ofstream csv(p.root / "eval" / (opt.tag + ".csv"));
  csv << MetricReport::csv_header() << "\n" << report.to_csv_row() << "\n";
  std::cout << report.to_json().dump(2) << "\n"
            << MetricReport::csv_header() << "\n"
            << report.to_csv_row() << "\n";
  return 0;
}

int cmd_manipulate(const RunConfig& cfg, const std::string& image_path, int dataset_id,
                   const std::string& split, const std::string& text,
                   const std::string& prompt_word, bool guidance, uint64_t seed, int rerank,
                   const std::string& masks_path, const std::string& out_name) {
  Paths p(resolve_out_dir(cfg));
  Loaded l = load_stages(cfg, p, true, true, false, true, false);
  Pipeline pipe(*l.vq, *l.transformer, *l.critic);

  ImageRGB image;
  std::vector<PixelMask> masks;
  if (!image_path.empty()) {
    image = read_png(image_path);
    TOKEDIT_CHECK(image.h == cfg.codebook.image_size && image.w == cfg.codebook.image_size,
                  ShapeError, "input image must be %dx%d", cfg.codebook.image_size,
                  cfg.codebook.image_size);
    TOKEDIT_CHECK(!masks_path.empty(), DependencyError,
                  "--image needs --masks (external RLE mask file)");
    masks = read_mask_file(masks_path, image.h, image.w);
  } else {
    Dataset all = require_dataset(p);
    Dataset train, val;
    split_dataset(all, cfg.root_seed, &train, &val);
    const Dataset& ds = split == "train" ? train : val;
    TOKEDIT_CHECK(dataset_id >= 0 && dataset_id < static_cast<int>(ds.size()), DependencyError,
                  "--dataset-id %d outside split '%s' of %zu samples", dataset_id, split.c_str(),
                  ds.size());
    const Sample& s = ds.samples[static_cast<size_t>(dataset_id)];
    image = s.image;
    AlignmentConfig provider_cfg = cfg.alignment;
    if (!masks_path.empty()) {
      provider_cfg.provider = SegmentationProvider::ExternalFile;
      provider_cfg.external_mask_path = masks_path;
    }
    masks = get_entity_masks(s, provider_cfg);
  }

  ManipulationRequest req;
  req.image = image;
  req.target_text = text;
  req.prompt_word = prompt_word;
  req.use_vision_guidance = guidance;
  req.sampling = cfg.sampling;
  req.sampling.seed = seed;
  req.sampling.rerank_candidates = rerank;
  req.alignment = cfg.alignment;
  req.alignment.theta = effective_theta(cfg, l);

  ManipulationResult res = pipe.manipulate(req, masks);

  fs::path dir = p.root / "manipulate" / out_name;
  fs::create_directories(dir);
  write_png((dir / "source.png").string(), image);
  write_png((dir / "output.png").string(), res.output);
  write_png((dir / "reconstruction.png").string(), pipe.reconstruct(image));

  nlohmann::json j;
  j["target_text"] = text;
  j["prompt_word"] = prompt_word;
  j["use_vision_guidance"] = guidance;
  j["seed"] = res.seed;
  j["theta"] = req.alignment.theta;
  j["nothing_selected"] = res.nothing_selected;
  j["candidate_scores"] = res.candidate_scores;
  j["config_hash"] = cfg.hash_hexstr();
  j["checkpoint_hashes"] = l.hashes;
  int changed = 0;
  for (size_t i = 0; i < res.tokens_after.indices.size(); i++)
    changed += res.tokens_after.indices[i] != res.tokens_before.indices[i] ? 1 : 0;
  j["tokens_changed"] = changed;
  nlohmann::json ents = nlohmann::json::array();
  for (const auto& e : res.alignment.entities)
    ents.push_back({{"mean_similarity", e.mean_similarity},
                    {"selected", e.selected},
                    {"token_count", e.token_mask.count()}});
  j["entities"] = ents;
  j["warnings"] = res.alignment.warnings;
  std::ofstream(dir / "result.json") << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\nwrote " << (dir / "output.png") << "\n";
  return 0;
}

int cmd_ablate(RunConfig cfg, const std::string& axis) {
  Paths p(resolve_out_dir(cfg));
  fs::path dir = p.root / "ablate" / axis;
  fs::create_directories(dir);

  auto write_pair = [&](const MetricReport& base, const MetricReport& variant,
                        const std::string& base_tag, const std::string& variant_tag) {
    std::ofstream(dir / (base_tag + ".json")) << base.to_json().dump(2) << "\n";
    std::ofstream(dir / (variant_tag + ".json")) << variant.to_json().dump(2) << "\n";
    nlohmann::json diff;
    diff["axis"] = axis;
    diff[base_tag] = base.to_json();
    diff[variant_tag] = variant.to_json();
    diff["clip_score_delta"] = base.clip_score - variant.clip_score;
    std::ofstream(dir / "pair.json") << diff.dump(2) << "\n";
    std::cout << diff.dump(2) << "\n";
  };

  if (axis == "semantic-loss") {
    require_file(p.checkpoint("transformer"), "transformer");
    if (!fs::exists(p.checkpoint("transformer-sl0")))
      cmd_train(cfg, "transformer", /*lambda4_override=*/0.0, "transformer-sl0");
    EvalOptions base_opt, variant_opt;
    base_opt.tag = "semantic-loss-on";
    variant_opt.tf_name = "transformer-sl0";
    variant_opt.tag = "semantic-loss-off";
    MetricReport base = run_evaluation(cfg, p, base_opt);
    MetricReport variant = run_evaluation(cfg, p, variant_opt);
    write_pair(base, variant, "with_semantic_loss", "without_semantic_loss");
  } else if (axis == "alignment-method") {
    EvalOptions base_opt, variant_opt;
    base_opt.method_override = AlignmentMethod::SemanticAlignment;
    base_opt.tag = "alignment-semantic";
    variant_opt.method_override = AlignmentMethod::WordPatch;
    variant_opt.tag = "alignment-word-patch";
    MetricReport base = run_evaluation(cfg, p, base_opt);
    MetricReport variant = run_evaluation(cfg, p, variant_opt);
    // the inference selector is the only difference: same transformer hash
    TOKEDIT_CHECK(base.checkpoint_hashes.at("transformer") ==
                      variant.checkpoint_hashes.at("transformer"),
                  Error, "ablation isolation violated");
    write_pair(base, variant, "semantic_alignment", "word_patch");
  } else if (axis == "vision-guidance") {
    EvalOptions base_opt, variant_opt;
    base_opt.guidance_override = true;
    base_opt.tag = "guidance-on";
    variant_opt.guidance_override = false;
    variant_opt.tag = "guidance-off";
    MetricReport base = run_evaluation(cfg, p, base_opt);
    MetricReport variant = run_evaluation(cfg, p, variant_opt);
    write_pair(base, variant, "with_guidance", "without_guidance");
  } else {
    throw DependencyError("unknown ablation axis '" + axis + "'");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"entity-level text-guided image manipulation on synthetic scenes"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "path to the JSON run configuration")
      ->required()
      ->check(CLI::ExistingFile);

  auto* synth = app.add_subcommand("synth-gen", "generate the synthetic dataset");

  auto* train = app.add_subcommand("train", "train one stage");
  std::string stage;
  train->add_option("--stage", stage, "vqae | dual-critic | dual-judge | transformer | classifier")
      ->required()
      ->check(CLI::IsMember({"vqae", "dual-critic", "dual-judge", "transformer", "classifier"}));
  double lambda4_override = -1.0;
  train->add_option("--lambda4", lambda4_override, "override the semantic loss weight");
  std::string tf_name = "transformer";
  train->add_option("--transformer-name", tf_name, "checkpoint name for the transformer stage");

  auto* man = app.add_subcommand("manipulate", "edit one image by text");
  std::string image_path, man_split = "val", man_text, man_prompt, masks_path, out_name = "last";
  int dataset_id = -1, rerank = 1;
  bool guidance = true;
  uint64_t man_seed = 0;
  man->add_option("--image", image_path, "path to a 64x64 png (needs --masks)");
  man->add_option("--dataset-id", dataset_id, "index into the chosen dataset split");
  man->add_option("--split", man_split, "train or val")->check(CLI::IsMember({"train", "val"}));
  man->add_option("--text", man_text, "target text")->required();
  man->add_option("--prompt-word", man_prompt, "entity prompt word")->required();
  man->add_flag("--guidance,!--no-guidance", guidance, "use grayscale vision guidance");
  man->add_option("--seed", man_seed, "sampling seed");
  man->add_option("--rerank", rerank, "candidate count for dual-encoder reranking");
  man->add_option("--masks", masks_path, "external RLE mask file");
  man->add_option("--out", out_name, "output subdirectory name");

  auto* eval = app.add_subcommand("evaluate", "run the metric suite");
  EvalOptions eval_opt;
  eval->add_option("--split", eval_opt.split, "train or val")
      ->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--transformer-name", eval_opt.tf_name, "transformer checkpoint name");
  eval->add_option("--tag", eval_opt.tag, "report file tag");

  auto* abl = app.add_subcommand("ablate", "paired evaluation along one axis");
  std::string axis;
  abl->add_option("--axis", axis, "semantic-loss | alignment-method | vision-guidance")
      ->required()
      ->check(CLI::IsMember({"semantic-loss", "alignment-method", "vision-guidance"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = load_run_config(config_path);
    if (synth->parsed()) return cmd_synth_gen(cfg);
    if (train->parsed()) return cmd_train(cfg, stage, lambda4_override, tf_name);
    if (man->parsed()) {
      TOKEDIT_CHECK(!image_path.empty() || dataset_id >= 0, DependencyError,
                    "manipulate needs --image or --dataset-id");
      return cmd_manipulate(cfg, image_path, dataset_id, man_split, man_text, man_prompt,
                            guidance, man_seed, rerank, masks_path, out_name);
    }
    if (eval->parsed()) return cmd_evaluate(cfg, eval_opt);
    if (abl->parsed()) return cmd_ablate(cfg, axis);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const TrainingError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
