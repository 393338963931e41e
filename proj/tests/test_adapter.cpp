#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "gift/adapter.hpp"
#include "gift/arithmetic.hpp"
#include "gift/transformer.hpp"
#include "test_util.hpp"

using namespace gift;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.d_ff = 32;
  cfg.max_seq = 16;
  return cfg;
}

template <class S>
LoraAdapter<S> random_adapter(const ModelConfig& cfg, std::uint64_t seed,
                              int rank = 4, double alpha = 8.0) {
  auto ad = init_adapter<S>(cfg, default_lora_targets(cfg), rank, alpha, 0.0, seed);
  Rng rng(derive_seed(seed, 0xbbull));
  for (auto& f : ad.factors)
    for (auto& v : f.b->data) v = static_cast<S>(0.02 * rng.normal());
  return ad;
}

}  // namespace

TEST_CASE("fresh adapters are deterministic with zero B") {
  const auto cfg = tiny_config();
  auto a = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.05, 9);
  auto b = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.05, 9);
  REQUIRE(a.targets == b.targets);
  for (std::size_t i = 0; i < a.factors.size(); ++i) {
    CHECK(a.factors[i].a->data == b.factors[i].a->data);
    for (double v : a.factors[i].b->data) CHECK(v == 0.0);
  }
  auto delta = materialize_delta(a);
  for (const auto& t : delta.tensors)
    for (double v : t->data) CHECK(v == 0.0);
}

TEST_CASE("init rejects unknown targets and bad hyperparameters") {
  const auto cfg = tiny_config();
  CHECK_THROWS_AS(init_adapter<double>(cfg, {"layers.9.attn.wq"}, 4, 8, 0, 1),
                  config_error);
  CHECK_THROWS_AS(init_adapter<double>(cfg, {"final_norm.gain"}, 4, 8, 0, 1),
                  config_error);
  CHECK_THROWS_AS(
      init_adapter<double>(cfg, default_lora_targets(cfg), 0, 8, 0, 1),
      config_error);
  CHECK_THROWS_AS(
      init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8, 1.0, 1),
      config_error);
}

TEST_CASE("materialize_delta hand oracle and alpha linearity") {
  ModelConfig cfg;
  cfg.vocab_size = 4;
  cfg.d_model = 2;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 4;
  cfg.max_seq = 4;
  auto ad = init_adapter<double>(cfg, {"layers.0.attn.wq"}, 1, 2.0, 0.0, 1);
  ad.factors[0].a->data = {1.0, 0.0};  // [1 x 2]
  ad.factors[0].b->data = {1.0, 0.0};  // [2 x 1]
  auto delta = materialize_delta(ad);
  REQUIRE(delta.names.size() == 1);
  CHECK(delta.tensors[0]->data == std::vector<double>{2.0, 0.0, 0.0, 0.0});

  ad.alpha = 4.0;
  auto doubled = materialize_delta(ad);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(doubled.tensors[0]->data[i] == 2.0 * delta.tensors[0]->data[i]);
}

TEST_CASE("materialize_delta is linear in A and in B separately") {
  const auto cfg = tiny_config();
  auto ad = random_adapter<double>(cfg, 21);
  auto base_delta = materialize_delta(ad);
  auto ad2 = clone_adapter(ad);
  for (auto& f : ad2.factors)
    for (auto& v : f.a->data) v *= 2.0;
  auto delta_a = materialize_delta(ad2);
  auto ad3 = clone_adapter(ad);
  for (auto& f : ad3.factors)
    for (auto& v : f.b->data) v *= 2.0;
  auto delta_b = materialize_delta(ad3);
  for (std::size_t i = 0; i < base_delta.tensors.size(); ++i)
    for (std::size_t j = 0; j < base_delta.tensors[i]->numel(); ++j) {
      CHECK(delta_a.tensors[i]->data[j] == 2.0 * base_delta.tensors[i]->data[j]);
      CHECK(delta_b.tensors[i]->data[j] == 2.0 * base_delta.tensors[i]->data[j]);
    }
}

TEST_CASE("merge is pure and merging a fresh adapter is the identity") {
  const auto cfg = tiny_config();
  auto ckpt = init_params<double>(cfg, 31);
  const auto hash_before = checkpoint_hash(ckpt);
  auto fresh = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.0, 1);
  auto merged = merge_into(ckpt, fresh);
  CHECK(checkpoints_equal(merged, ckpt));

  auto ad = random_adapter<double>(cfg, 33);
  auto merged2 = merge_into(ckpt, ad);
  CHECK(checkpoint_hash(ckpt) == hash_before);
  CHECK(!checkpoints_equal(merged2, ckpt));
}

TEST_CASE("attached and merged forwards agree within width tolerances") {
  const auto cfg = tiny_config();
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    {
      auto ckpt = init_params<float>(cfg, 100 + trial);
      auto ad = random_adapter<float>(cfg, 200 + trial);
      auto merged = merge_into(ckpt, ad);
      Rng rng(300 + trial);
      std::vector<int> tokens;
      for (int i = 0; i < 9; ++i)
        tokens.push_back(static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1)));
      ForwardOpts<float> opts;
      opts.adapter = &ad;
      auto attached = forward_logits(ckpt, tokens, opts);
      auto direct = forward_logits(merged, tokens);
      for (std::size_t i = 0; i < attached->numel(); ++i)
        CHECK(std::abs(attached->data[i] - direct->data[i]) < 1e-5f);
    }
    {
      auto ckpt = init_params<double>(cfg, 100 + trial);
      auto ad = random_adapter<double>(cfg, 200 + trial);
      auto merged = merge_into(ckpt, ad);
      Rng rng(300 + trial);
      std::vector<int> tokens;
      for (int i = 0; i < 9; ++i)
        tokens.push_back(static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1)));
      ForwardOpts<double> opts;
      opts.adapter = &ad;
      auto attached = forward_logits(ckpt, tokens, opts);
      auto direct = forward_logits(merged, tokens);
      for (std::size_t i = 0; i < attached->numel(); ++i)
        CHECK(std::abs(attached->data[i] - direct->data[i]) < 1e-10);
    }
  }
}

TEST_CASE("merge additivity is exact on dyadic checkpoints") {
  const auto cfg = tiny_config();
  auto base = gift_test::dyadic_checkpoint<double>(cfg, 41);
  auto instruct = gift_test::dyadic_checkpoint<double>(cfg, 42);
  auto ad = init_adapter<double>(cfg, default_lora_targets(cfg), 8, 16.0, 0.0, 43);
  Rng rng(44);
  for (auto& f : ad.factors) {
    for (auto& v : f.a->data)
      v = static_cast<double>(rng.uniform_int(-64, 64)) / 64.0;
    for (auto& v : f.b->data)
      v = static_cast<double>(rng.uniform_int(-64, 64)) / 64.0;
  }
  auto lhs = extract_delta(merge_into(instruct, ad), merge_into(base, ad));
  auto rhs = extract_delta(instruct, base);
  for (std::size_t i = 0; i < lhs.tensors.size(); ++i)
    CHECK(lhs.tensors[i]->data == rhs.tensors[i]->data);
}

TEST_CASE("dropout applies only on the adapter path in train mode") {
  const auto cfg = tiny_config();
  auto ckpt = init_params<double>(cfg, 55);
  auto ad = random_adapter<double>(cfg, 56);
  ad.dropout_p = 0.5;
  std::vector<int> tokens = {1, 2, 3, 4};
  const auto base_hash = checkpoint_hash(ckpt);

  ForwardOpts<double> eval_opts;
  eval_opts.adapter = &ad;
  auto eval_a = forward_logits(ckpt, tokens, eval_opts);
  auto eval_b = forward_logits(ckpt, tokens, eval_opts);
  CHECK(eval_a->data == eval_b->data);  // no dropout outside train mode

  Rng drop1(7), drop2(8);
  ForwardOpts<double> train_opts;
  train_opts.adapter = &ad;
  train_opts.train_mode = true;
  train_opts.dropout_rng = &drop1;
  auto train_a = forward_logits(ckpt, tokens, train_opts);
  train_opts.dropout_rng = &drop2;
  auto train_b = forward_logits(ckpt, tokens, train_opts);
  CHECK(train_a->data != train_b->data);
  CHECK(checkpoint_hash(ckpt) == base_hash);

  // Train mode without an adapter never touches the dropout stream.
  ForwardOpts<double> no_adapter;
  no_adapter.train_mode = true;
  auto plain = forward_logits(ckpt, tokens, no_adapter);
  auto plain_eval = forward_logits(ckpt, tokens);
  CHECK(plain->data == plain_eval->data);
}
