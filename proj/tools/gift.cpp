// Command-line front end for the guided fine-tuning and transfer pipeline:
//   pretrain -> instruct -> annotate -> finetune -> merge -> eval -> analyze
// Each subcommand reads one JSON config file, applies flag overrides, and
// writes its artifacts into a content-addressed run directory.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "gift/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_root = "runs";
  bool wide = false;
  std::optional<unsigned> threads;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--out", args.out_root, "output root directory");
  cmd->add_flag("--wide", args.wide, "run with wide (double) scalars");
  cmd->add_option("--threads", args.threads, "worker thread count");
}

gift::PipelineConfig resolve(const CommonArgs& args) {
  gift::PipelineConfig cfg = gift::load_pipeline_config(args.config_path);
  if (args.threads) cfg.threads = *args.threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"guided fine-tuning and transfer (GIFT) pipeline"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string base_path, instruct_path, adapter_path, model_path;
  std::string data_path, suite_path, annotated_path, teacher_path, label, mode;
  std::string recipe;
  std::optional<double> lambda_instr, lambda_task, learning_rate, temperature;
  std::optional<int> svd_rank, n_samples, epochs;
  std::optional<std::uint64_t> seed;
  bool greedy = false;

  auto* c_pretrain = app.add_subcommand("pretrain", "train the base model");
  add_common(c_pretrain, common);
  c_pretrain->add_option("--seed", seed, "training seed override");

  auto* c_instruct = app.add_subcommand("instruct", "instruction-tune from a base checkpoint");
  add_common(c_instruct, common);
  c_instruct->add_option("--base", base_path, "base checkpoint")->required();
  c_instruct->add_option("--seed", seed, "training seed override");

  auto* c_annotate = app.add_subcommand("annotate", "compute teacher confidence scores");
  add_common(c_annotate, common);
  c_annotate->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  c_annotate->add_option("--data", data_path, "plain dataset to annotate (default: generated downstream train split)");

  auto* c_finetune = app.add_subcommand("finetune", "train a low-rank adapter");
  add_common(c_finetune, common);
  c_finetune->add_option("--model", model_path, "checkpoint to adapt (base or instruct)")->required();
  c_finetune->add_option("--data", data_path, "training data file")->required();
  c_finetune->add_option("--mode", mode, "sft | gift | gift_baset");
  c_finetune->add_option("--lr", learning_rate, "learning rate override");
  c_finetune->add_option("--epochs", epochs, "epoch count override");
  c_finetune->add_option("--seed", seed, "training seed override");

  auto* c_merge = app.add_subcommand("merge", "merge adapter/checkpoint arithmetic");
  add_common(c_merge, common);
  c_merge->add_option("--base", base_path, "base checkpoint")->required();
  c_merge->add_option("--instruct", instruct_path, "instruction checkpoint")->required();
  c_merge->add_option("--adapter", adapter_path, "trained adapter")->required();
  c_merge->add_option("--recipe", recipe, "shadow_ft | re_adapt | lore_adapt | gift");
  c_merge->add_option("--lambda-instr", lambda_instr, "instruction-delta coefficient");
  c_merge->add_option("--lambda-task", lambda_task, "task-delta coefficient");
  c_merge->add_option("--svd-rank", svd_rank, "rank for lore_adapt truncation");

  auto* c_eval = app.add_subcommand("eval", "sample and score a model");
  add_common(c_eval, common);
  c_eval->add_option("--model", model_path, "checkpoint to evaluate")->required();
  c_eval->add_option("--suite", suite_path, "test suite file (default: generated downstream test split)");
  c_eval->add_option("--label", label, "method label for the CSV export");
  c_eval->add_option("--n", n_samples, "samples per problem");
  c_eval->add_option("--temperature", temperature, "sampling temperature");
  c_eval->add_flag("--greedy", greedy, "greedy decoding");
  c_eval->add_option("--seed", seed, "evaluation seed override");

  auto* c_analyze = app.add_subcommand("analyze", "signal redistribution and confidence stats");
  add_common(c_analyze, common);
  c_analyze->add_option("--base", base_path, "base checkpoint")->required();
  c_analyze->add_option("--adapter", adapter_path, "adapter (optional)");
  c_analyze->add_option("--annotated", annotated_path, "annotated dataset")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    gift::PipelineConfig cfg = resolve(common);
    auto run = [&]<class S>() -> std::string {
      if (c_pretrain->parsed()) {
        if (seed) cfg.pretrain.train.seed = *seed;
        return gift::cmd_pretrain<S>(cfg, common.out_root);
      }
      if (c_instruct->parsed()) {
        if (seed) cfg.instruct.train.seed = *seed;
        return gift::cmd_instruct<S>(cfg, base_path, common.out_root);
      }
      if (c_annotate->parsed())
        return gift::cmd_annotate<S>(cfg, teacher_path, data_path, common.out_root);
      if (c_finetune->parsed()) {
        if (!mode.empty()) cfg.finetune.mode = gift::detail::train_mode_from_string(mode);
        if (learning_rate) cfg.finetune.learning_rate = *learning_rate;
        if (epochs) cfg.finetune.epochs = *epochs;
        if (seed) cfg.finetune.seed = *seed;
        return gift::cmd_finetune<S>(cfg, model_path, data_path, common.out_root);
      }
      if (c_merge->parsed()) {
        if (!recipe.empty())
          cfg.merge.recipe =
              gift::MergeRecipe::make(gift::detail::recipe_from_string(recipe));
        if (lambda_instr) cfg.merge.recipe.lambda_instr = *lambda_instr;
        if (lambda_task) cfg.merge.recipe.lambda_task = *lambda_task;
        if (svd_rank) cfg.merge.recipe.svd_rank = *svd_rank;
        return gift::cmd_merge<S>(cfg, base_path, instruct_path, adapter_path,
                                  common.out_root);
      }
      if (c_eval->parsed()) {
        if (n_samples) cfg.eval.n_samples = *n_samples;
        if (temperature) cfg.eval.temperature = *temperature;
        if (greedy) cfg.eval.greedy = true;
        if (seed) cfg.eval.seed = *seed;
        return gift::cmd_eval<S>(cfg, model_path, suite_path, label, common.out_root);
      }
      if (c_analyze->parsed())
        return gift::cmd_analyze<S>(cfg, base_path, adapter_path, annotated_path,
                                    common.out_root);
      throw gift::contract_error("no subcommand selected");
    };
    const std::string dir = common.wide
                                ? run.template operator()<double>()
                                : run.template operator()<float>();
    std::cout << dir << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
