#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gift/annotate.hpp"
#include "gift/arithmetic.hpp"
#include "gift/common.hpp"
#include "gift/data.hpp"
#include "gift/eval.hpp"
#include "gift/io.hpp"
#include "gift/model.hpp"
#include "gift/train.hpp"
#include "json.hpp"

namespace gift {

// Resolved parameters for every subcommand; loaded from one JSON config
// file, overridable by CLI flags, and echoed into each run directory.
struct PipelineConfig {
  ModelConfig model;
  unsigned threads = 1;

  struct Pretrain {
    int n_chunks = 1200;
    int operand_lo = 0;
    int operand_hi = 49;
    TrainConfig train;
  } pretrain;

  struct Instruct {
    int n_train = 2000;
    int n_test = 200;
    int operand_lo = 0;
    int operand_hi = 49;
    TrainConfig train;
  } instruct;

  struct Downstream {
    int n_train = 500;
    int n_test = 200;
    int operand_lo = 2;
    int operand_hi = 9;
    int mod_lo = 3;
    int mod_hi = 14;
    double filler_rate = 0.3;
    std::uint64_t seed = 3;
  } downstream;

  struct Annotate {
    std::string teacher_id;  // defaults to the teacher file stem
  } annotate;

  TrainConfig finetune;

  struct Merge {
    MergeRecipe recipe = MergeRecipe::make(RecipeKind::gift);
  } merge;

  struct Eval {
    int n_samples = 16;
    double temperature = 1.0;
    int max_new = 16;
    bool greedy = false;
    std::uint64_t seed = 5;
  } eval;

  struct Analyze {
    std::vector<double> bin_edges = {0.3, 0.9};
    std::vector<double> ge_thresholds = {0.9, 0.9999};
    std::vector<double> lt_thresholds = {0.5};
    double class_q_threshold = 0.9999;
  } analyze;

  PipelineConfig() {
    pretrain.train.learning_rate = 3e-3;
    pretrain.train.epochs = 2;
    pretrain.train.seed = 1;
    instruct.train.learning_rate = 1.5e-3;
    instruct.train.epochs = 3;
    instruct.train.seed = 2;
    finetune.mode = TrainMode::gift;
    finetune.learning_rate = 2e-3;
    finetune.epochs = 8;
    finetune.seed = 4;
  }
};

namespace detail {

inline nlohmann::json train_to_json(const TrainConfig& t) {
  nlohmann::json j = {{"mode", train_mode_name(t.mode)},
                      {"learning_rate", t.learning_rate},
                      {"epochs", t.epochs},
                      {"batch_size", t.batch_size},
                      {"warmup_ratio", t.warmup_ratio},
                      {"rank", t.rank},
                      {"alpha", t.alpha},
                      {"dropout", t.dropout},
                      {"seed", t.seed}};
  if (t.grad_clip) j["grad_clip"] = *t.grad_clip;
  return j;
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "sft") return TrainMode::sft;
  if (s == "gift") return TrainMode::gift;
  if (s == "gift_baset") return TrainMode::gift_baset;
  throw config_error("config: unknown train mode '" + s + "'");
}

inline void train_from_json(const nlohmann::json& j, TrainConfig& t) {
  if (j.contains("mode")) t.mode = train_mode_from_string(j["mode"]);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.warmup_ratio = j.value("warmup_ratio", t.warmup_ratio);
  t.rank = j.value("rank", t.rank);
  t.alpha = j.value("alpha", t.alpha);
  t.dropout = j.value("dropout", t.dropout);
  t.seed = j.value("seed", t.seed);
  if (j.contains("grad_clip") && !j["grad_clip"].is_null())
    t.grad_clip = j["grad_clip"].get<double>();
}

inline RecipeKind recipe_from_string(const std::string& s) {
  if (s == "shadow_ft") return RecipeKind::shadow_ft;
  if (s == "re_adapt") return RecipeKind::re_adapt;
  if (s == "lore_adapt") return RecipeKind::lore_adapt;
  if (s == "gift") return RecipeKind::gift;
  throw config_error("config: unknown merge recipe '" + s + "'");
}

}  // namespace detail

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
  nlohmann::json merge = {{"recipe", recipe_name(c.merge.recipe.kind)},
                          {"lambda_instr", c.merge.recipe.lambda_instr},
                          {"lambda_task", c.merge.recipe.lambda_task}};
  if (c.merge.recipe.svd_rank) merge["svd_rank"] = *c.merge.recipe.svd_rank;
  return {
      {"model",
       {{"vocab_size", c.model.vocab_size},
        {"d_model", c.model.d_model},
        {"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"d_ff", c.model.d_ff},
        {"max_seq", c.model.max_seq}}},
      {"threads", c.threads},
      {"pretrain",
       {{"n_chunks", c.pretrain.n_chunks},
        {"operand_lo", c.pretrain.operand_lo},
        {"operand_hi", c.pretrain.operand_hi},
        {"train", detail::train_to_json(c.pretrain.train)}}},
      {"instruct",
       {{"n_train", c.instruct.n_train},
        {"n_test", c.instruct.n_test},
        {"operand_lo", c.instruct.operand_lo},
        {"operand_hi", c.instruct.operand_hi},
        {"train", detail::train_to_json(c.instruct.train)}}},
      {"downstream",
       {{"n_train", c.downstream.n_train},
        {"n_test", c.downstream.n_test},
        {"operand_lo", c.downstream.operand_lo},
        {"operand_hi", c.downstream.operand_hi},
        {"mod_lo", c.downstream.mod_lo},
        {"mod_hi", c.downstream.mod_hi},
        {"filler_rate", c.downstream.filler_rate},
        {"seed", c.downstream.seed}}},
      {"annotate", {{"teacher_id", c.annotate.teacher_id}}},
      {"finetune", detail::train_to_json(c.finetune)},
      {"merge", merge},
      {"eval",
       {{"n_samples", c.eval.n_samples},
        {"temperature", c.eval.temperature},
        {"max_new", c.eval.max_new},
        {"greedy", c.eval.greedy},
        {"seed", c.eval.seed}}},
      {"analyze",
       {{"bin_edges", c.analyze.bin_edges},
        {"ge_thresholds", c.analyze.ge_thresholds},
        {"lt_thresholds", c.analyze.lt_thresholds},
        {"class_q_threshold", c.analyze.class_q_threshold}}}};
}

inline void pipeline_config_merge_json(PipelineConfig& c, const nlohmann::json& j) {
  if (j.contains("model")) {
    const auto& m = j["model"];
    c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
    c.model.d_model = m.value("d_model", c.model.d_model);
    c.model.n_layers = m.value("n_layers", c.model.n_layers);
    c.model.n_heads = m.value("n_heads", c.model.n_heads);
    c.model.d_ff = m.value("d_ff", c.model.d_ff);
    c.model.max_seq = m.value("max_seq", c.model.max_seq);
  }
  c.threads = j.value("threads", c.threads);
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    c.pretrain.n_chunks = p.value("n_chunks", c.pretrain.n_chunks);
    c.pretrain.operand_lo = p.value("operand_lo", c.pretrain.operand_lo);
    c.pretrain.operand_hi = p.value("operand_hi", c.pretrain.operand_hi);
    if (p.contains("train")) detail::train_from_json(p["train"], c.pretrain.train);
  }
  if (j.contains("instruct")) {
    const auto& p = j["instruct"];
    c.instruct.n_train = p.value("n_train", c.instruct.n_train);
    c.instruct.n_test = p.value("n_test", c.instruct.n_test);
    c.instruct.operand_lo = p.value("operand_lo", c.instruct.operand_lo);
    c.instruct.operand_hi = p.value("operand_hi", c.instruct.operand_hi);
    if (p.contains("train")) detail::train_from_json(p["train"], c.instruct.train);
  }
  if (j.contains("downstream")) {
    const auto& p = j["downstream"];
    c.downstream.n_train = p.value("n_train", c.downstream.n_train);
    c.downstream.n_test = p.value("n_test", c.downstream.n_test);
    c.downstream.operand_lo = p.value("operand_lo", c.downstream.operand_lo);
    c.downstream.operand_hi = p.value("operand_hi", c.downstream.operand_hi);
    c.downstream.mod_lo = p.value("mod_lo", c.downstream.mod_lo);
    c.downstream.mod_hi = p.value("mod_hi", c.downstream.mod_hi);
    c.downstream.filler_rate = p.value("filler_rate", c.downstream.filler_rate);
    c.downstream.seed = p.value("seed", c.downstream.seed);
  }
  if (j.contains("annotate"))
    c.annotate.teacher_id = j["annotate"].value("teacher_id", c.annotate.teacher_id);
  if (j.contains("finetune")) detail::train_from_json(j["finetune"], c.finetune);
  if (j.contains("merge")) {
    const auto& m = j["merge"];
    if (m.contains("recipe"))
      c.merge.recipe =
          MergeRecipe::make(detail::recipe_from_string(m["recipe"]));
    c.merge.recipe.lambda_instr =
        m.value("lambda_instr", c.merge.recipe.lambda_instr);
    c.merge.recipe.lambda_task =
        m.value("lambda_task", c.merge.recipe.lambda_task);
    if (m.contains("svd_rank") && !m["svd_rank"].is_null())
      c.merge.recipe.svd_rank = m["svd_rank"].get<int>();
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    c.eval.n_samples = e.value("n_samples", c.eval.n_samples);
    c.eval.temperature = e.value("temperature", c.eval.temperature);
    c.eval.max_new = e.value("max_new", c.eval.max_new);
    c.eval.greedy = e.value("greedy", c.eval.greedy);
    c.eval.seed = e.value("seed", c.eval.seed);
  }
  if (j.contains("analyze")) {
    const auto& a = j["analyze"];
    if (a.contains("bin_edges"))
      c.analyze.bin_edges = a["bin_edges"].get<std::vector<double>>();
    if (a.contains("ge_thresholds"))
      c.analyze.ge_thresholds = a["ge_thresholds"].get<std::vector<double>>();
    if (a.contains("lt_thresholds"))
      c.analyze.lt_thresholds = a["lt_thresholds"].get<std::vector<double>>();
    c.analyze.class_q_threshold =
        a.value("class_q_threshold", c.analyze.class_q_threshold);
  }
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  PipelineConfig c;
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw io_error("config: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw schema_error("config: invalid JSON in " + path);
  pipeline_config_merge_json(c, j);
  return c;
}

namespace detail {

// Run directories are content-addressed by the resolved-config hash so a
// changed config can never silently overwrite an earlier run.
inline std::filesystem::path make_run_dir(const PipelineConfig& cfg,
                                          const std::string& cmd,
                                          const std::string& out_root) {
  const std::string blob = cmd + ":" + pipeline_config_to_json(cfg).dump();
  const std::string dir = cmd + "-" + hex64(fnv1a64(blob.data(), blob.size())).substr(0, 12);
  std::filesystem::path p = std::filesystem::path(out_root) / dir;
  std::filesystem::create_directories(p);
  std::ofstream echo(p / "config.json", std::ios::binary);
  echo << pipeline_config_to_json(cfg).dump(2) << "\n";
  return p;
}

inline std::vector<WeightedExample> chunks_to_examples(
    const std::vector<std::vector<int>>& chunks) {
  std::vector<WeightedExample> out;
  out.reserve(chunks.size());
  for (const auto& c : chunks) {
    WeightedExample ex;
    ex.prompt = {c.front()};
    ex.target.assign(c.begin() + 1, c.end());
    ex.weights.assign(ex.target.size(), 1.0);
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::string file_stem(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

template <class S>
std::vector<EvalProblem> suite_from_examples(const std::vector<Example>& data) {
  const int eos = Vocab::instance().eos();
  std::vector<EvalProblem> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EvalProblem p;
    p.id = "p" + std::to_string(i);
    p.prompt = data[i].prompt;
    p.gold = data[i].target;
    if (!p.gold.empty() && p.gold.back() == eos) p.gold.pop_back();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace detail

// Stage 1: full-parameter training of the base model on the raw stream.
template <class S>
std::string cmd_pretrain(const PipelineConfig& cfg, const std::string& out_root) {
  const auto dir = detail::make_run_dir(cfg, "pretrain", out_root);
  TaskSpec spec;
  spec.kind = TaskKind::base_stream;
  spec.operand_lo = cfg.pretrain.operand_lo;
  spec.operand_hi = cfg.pretrain.operand_hi;
  spec.n_train = cfg.pretrain.n_chunks;
  spec.max_seq = cfg.model.max_seq;
  const auto chunks =
      gen_base_corpus(spec, derive_seed(cfg.pretrain.train.seed, 0xdadaull));
  const auto examples = detail::chunks_to_examples(chunks);
  TrainConfig tc = cfg.pretrain.train;
  tc.threads = cfg.threads;
  Checkpoint<S> init =
      init_params<S>(cfg.model, derive_seed(tc.seed, 0x1417ull));
  auto [trained, log] = train_full<S>(init, examples, tc);
  save_checkpoint((dir / "base.bin").string(), trained);
  write_train_log((dir / "train_log.txt").string(), log);
  return dir.string();
}

// Stage 2: continue full-parameter training on formatted QA pairs.
template <class S>
std::string cmd_instruct(const PipelineConfig& cfg, const std::string& base_path,
                         const std::string& out_root) {
  const auto dir = detail::make_run_dir(cfg, "instruct", out_root);
  Checkpoint<S> base = load_checkpoint<S>(base_path);
  if (!(base.config == cfg.model))
    throw config_error("instruct: base checkpoint config differs from run config");
  TaskSpec spec;
  spec.kind = TaskKind::instruct_qa;
  spec.operand_lo = cfg.instruct.operand_lo;
  spec.operand_hi = cfg.instruct.operand_hi;
  spec.n_train = cfg.instruct.n_train;
  spec.n_test = cfg.instruct.n_test;
  spec.max_seq = cfg.model.max_seq;
  auto [train_split, test_split] =
      gen_instruct_corpus(spec, derive_seed(cfg.instruct.train.seed, 0xdadaull));
  TrainConfig tc = cfg.instruct.train;
  tc.threads = cfg.threads;
  auto [trained, log] =
      train_full<S>(base, make_sft_batch(train_split), tc);
  save_checkpoint((dir / "instruct.bin").string(), trained);
  write_train_log((dir / "train_log.txt").string(), log);
  write_jsonl((dir / "instruct_test.jsonl").string(), test_split);
  return dir.string();
}

// Stage 3: offline teacher pass. When data_path is empty the downstream
// corpus is generated from the config and both splits are written next to
// the annotations.
template <class S>
std::string cmd_annotate(const PipelineConfig& cfg, const std::string& teacher_path,
                         const std::string& data_path, const std::string& out_root) {
  const auto dir = detail::make_run_dir(cfg, "annotate", out_root);
  Checkpoint<S> teacher = load_checkpoint<S>(teacher_path);
  std::vector<Example> data;
  if (data_path.empty()) {
    TaskSpec spec;
    spec.kind = TaskKind::downstream_mod_mul;
    spec.operand_lo = cfg.downstream.operand_lo;
    spec.operand_hi = cfg.downstream.operand_hi;
    spec.mod_lo = cfg.downstream.mod_lo;
    spec.mod_hi = cfg.downstream.mod_hi;
    spec.filler_rate = cfg.downstream.filler_rate;
    spec.n_train = cfg.downstream.n_train;
    spec.n_test = cfg.downstream.n_test;
    spec.max_seq = cfg.model.max_seq;
    auto [train_split, test_split] = gen_downstream(spec, cfg.downstream.seed);
    std::vector<Example> test_examples;
    for (auto& p : train_split) data.push_back(std::move(p.example));
    for (auto& p : test_split) test_examples.push_back(std::move(p.example));
    write_jsonl((dir / "downstream_train.jsonl").string(), data);
    write_jsonl((dir / "downstream_test.jsonl").string(), test_examples);
  } else {
    data = read_jsonl(data_path);
  }

  const auto t0 = std::chrono::steady_clock::now();
  const auto annotated = annotate_dataset(teacher, data, cfg.threads);
  const std::string teacher_id = cfg.annotate.teacher_id.empty()
                                     ? detail::file_stem(teacher_path)
                                     : cfg.annotate.teacher_id;
  const std::string ann_path = (dir / "annotated.jsonl").string();
  write_annotated_jsonl(ann_path, annotated, teacher_id);

  AnnotationReport report;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.examples = annotated.size();
  for (const auto& a : annotated) report.tokens += a.target.size();
  report.output_bytes = std::filesystem::file_size(ann_path);
  std::ofstream rep(dir / "annotate_report.json", std::ios::binary);
  rep << annotation_report_to_json(report).dump(2) << "\n";
  return dir.string();
}

// Stage 4: adapter training. sft mode consumes plain data; gift modes
// consume annotated data; mismatched schemas are rejected by the readers.
template <class S>
std::string cmd_finetune(const PipelineConfig& cfg, const std::string& model_path,
                         const std::string& data_path, const std::string& out_root) {
  const auto dir = detail::make_run_dir(cfg, "finetune", out_root);
  Checkpoint<S> model = load_checkpoint<S>(model_path);
  std::vector<WeightedExample> data;
  if (cfg.finetune.mode == TrainMode::sft) {
    data = make_sft_batch(read_jsonl(data_path));
  } else {
    data = make_gift_batch(read_annotated_jsonl(data_path).records);
  }
  TrainConfig tc = cfg.finetune;
  tc.threads = cfg.threads;
  auto [adapter, log] = train_adapter<S>(model, data, tc);
  save_adapter((dir / "adapter.bin").string(), adapter);
  write_train_log((dir / "train_log.txt").string(), log);
  return dir.string();
}

// Stage 5: checkpoint-space merge per the configured recipe.
template <class S>
std::string cmd_merge(const PipelineConfig& cfg, const std::string& base_path,
                      const std::string& instruct_path,
                      const std::string& adapter_path, const std::string& out_root) {
  const auto dir = detail::make_run_dir(cfg, "merge", out_root);
  Checkpoint<S> base = load_checkpoint<S>(base_path);
  Checkpoint<S> instruct = load_checkpoint<S>(instruct_path);
  LoraAdapter<S> adapter = load_adapter<S>(adapter_path);
  Checkpoint<S> merged = build_merged(cfg.merge.recipe, base, instruct, adapter);
  save_checkpoint((dir / "merged.bin").string(), merged);
  return dir.string();
}

// Stage 6: stochastic-decoding evaluation over a problem suite.
template <class S>
std::string cmd_eval(const PipelineConfig& cfg, const std::string& model_path,
                     const std::string& suite_path, const std::string& label,
                     const std::string& out_root) {
  const auto dir = detail::make_run_dir(cfg, "eval", out_root);
  Checkpoint<S> model = load_checkpoint<S>(model_path);
  std::vector<Example> suite_data;
  if (suite_path.empty()) {
    TaskSpec spec;
    spec.kind = TaskKind::downstream_mod_mul;
    spec.operand_lo = cfg.downstream.operand_lo;
    spec.operand_hi = cfg.downstream.operand_hi;
    spec.mod_lo = cfg.downstream.mod_lo;
    spec.mod_hi = cfg.downstream.mod_hi;
    spec.filler_rate = cfg.downstream.filler_rate;
    spec.n_train = cfg.downstream.n_train;
    spec.n_test = cfg.downstream.n_test;
    spec.max_seq = cfg.model.max_seq;
    auto [train_split, test_split] = gen_downstream(spec, cfg.downstream.seed);
    (void)train_split;
    for (auto& p : test_split) suite_data.push_back(std::move(p.example));
  } else {
    suite_data = read_jsonl(suite_path);
  }
  const auto suite = detail::suite_from_examples<S>(suite_data);
  const EvalReport report =
      evaluate_suite<S>(model, suite, cfg.eval.n_samples, cfg.eval.temperature,
                        cfg.eval.seed, cfg.eval.max_new, cfg.eval.greedy,
                        cfg.threads);
  const std::string method = label.empty() ? detail::file_stem(model_path) : label;
  std::ofstream rep(dir / "report.json", std::ios::binary);
  rep << eval_report_to_json(report).dump(2) << "\n";
  write_pass_curve_csv((dir / "pass_curve.csv").string(), method, report);
  return dir.string();
}

// Stage 7: learning-signal redistribution plus annotation statistics.
template <class S>
std::string cmd_analyze(const PipelineConfig& cfg, const std::string& base_path,
                        const std::string& adapter_path,
                        const std::string& annotated_path,
                        const std::string& out_root) {
  const auto dir = detail::make_run_dir(cfg, "analyze", out_root);
  Checkpoint<S> base = load_checkpoint<S>(base_path);
  LoraAdapter<S> adapter;
  const LoraAdapter<S>* adapter_ptr = nullptr;
  if (!adapter_path.empty()) {
    adapter = load_adapter<S>(adapter_path);
    adapter_ptr = &adapter;
  }
  const auto annotated = read_annotated_jsonl(annotated_path).records;
  const RedistributionReport redis = signal_redistribution<S>(
      base, adapter_ptr, annotated, cfg.analyze.bin_edges);
  std::ofstream rj(dir / "redistribution.json", std::ios::binary);
  rj << redistribution_to_json(redis).dump(2) << "\n";

  const AnnotationStats stats = confidence_stats(
      annotated, cfg.analyze.ge_thresholds, cfg.analyze.lt_thresholds);
  const Vocab& vocab = Vocab::instance();
  const TokenClassShares shares = token_class_shares(
      annotated, [&vocab](int id) { return vocab.token_class(id); },
      cfg.analyze.class_q_threshold);

  nlohmann::json frac_ge = nlohmann::json::array();
  for (const auto& [t, f] : stats.frac_ge)
    frac_ge.push_back({{"threshold", t}, {"fraction", f}});
  nlohmann::json frac_lt = nlohmann::json::array();
  for (const auto& [t, f] : stats.frac_lt)
    frac_lt.push_back({{"threshold", t}, {"fraction", f}});
  nlohmann::json cls = nlohmann::json::object();
  for (const auto& [name, share] : shares.shares)
    cls[name] = {{"overall", share.overall},
                 {"high_confidence", share.high_confidence},
                 {"enrichment", share.enrichment}};
  std::ofstream sj(dir / "stats.json", std::ios::binary);
  sj << nlohmann::json{{"q_mean", stats.q_mean},
                       {"token_count", stats.token_count},
                       {"frac_ge", frac_ge},
                       {"frac_lt", frac_lt},
                       {"class_q_threshold", shares.q_threshold},
                       {"undefined_high", shares.undefined_high},
                       {"class_shares", cls}}
             .dump(2)
      << "\n";
  return dir.string();
}

}  // namespace gift
