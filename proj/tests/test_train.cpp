#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "gift/annotate.hpp"
#include "gift/train.hpp"
#include "gift/transformer.hpp"
#include "test_util.hpp"

using namespace gift;
using gift_test::rel_err;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.d_ff = 32;
  cfg.max_seq = 32;
  return cfg;
}

std::vector<Example> sample_data(int count, std::uint64_t seed) {
  TaskSpec spec;
  spec.kind = TaskKind::instruct_qa;
  spec.operand_lo = 0;
  spec.operand_hi = 20;
  spec.n_train = count;
  spec.max_seq = 32;
  return gen_instruct_corpus(spec, seed).first;
}

template <class S>
LoraAdapter<S> random_adapter(const ModelConfig& cfg, std::uint64_t seed) {
  auto ad = init_adapter<S>(cfg, default_lora_targets(cfg), 4, 8.0, 0.0, seed);
  Rng rng(derive_seed(seed, 0xbeull));
  for (auto& f : ad.factors)
    for (auto& v : f.b->data) v = static_cast<S>(0.02 * rng.normal());
  return ad;
}

std::vector<AnnotatedExample> with_q(const std::vector<Example>& data, double q) {
  std::vector<AnnotatedExample> out;
  for (const auto& ex : data) {
    AnnotatedExample a;
    a.prompt = ex.prompt;
    a.target = ex.target;
    a.q.assign(ex.target.size(), q);
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace

TEST_CASE("sft loss on a uniform-head model equals ln(vocab)") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 1);
  std::fill(base.at("head.w")->data.begin(), base.at("head.w")->data.end(), 0.0);
  auto adapter = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.0, 2);
  const auto data = sample_data(6, 3);
  const auto report = sft_loss<double>(base, &adapter, data);
  CHECK(report.total == doctest::Approx(std::log(32.0)).epsilon(1e-12));
  CHECK(report.token_count > 0);
  CHECK(report.per_token_loss.size() == report.token_count);
}

TEST_CASE("duplicating every example leaves the mean loss unchanged") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 4);
  const auto data = sample_data(5, 5);
  auto doubled = data;
  doubled.insert(doubled.end(), data.begin(), data.end());
  const double a = sft_loss<double>(base, nullptr, data).total;
  const double b = sft_loss<double>(base, nullptr, doubled).total;
  CHECK(a == b);
}

TEST_CASE("hand-computed two-token loss") {
  // Zeroed model with positional one-hot logits: position rows carry
  // pre-norm vectors whose softmax is computable by hand.
  ModelConfig cfg;
  cfg.vocab_size = 4;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 4;
  cfg.max_seq = 4;
  auto base = init_params<double>(cfg, 0);
  for (auto& t : base.tensors) std::fill(t->data.begin(), t->data.end(), 0.0);
  const double l3 = std::log(3.0);
  // Desired logits at position 0 and 1; both rows share the same rms.
  const std::vector<double> row0 = {0.0, l3, -20.0, -20.0};
  const std::vector<double> row1 = {l3, 0.0, -20.0, -20.0};
  double ms = 0.0;
  for (double x : row0) ms += x * x;
  const double rms = std::sqrt(ms / 4.0 + kRmsNormEps);
  auto& pos = base.at("pos_emb");
  for (int j = 0; j < 4; ++j) {
    pos->data[0 * 4 + j] = row0[static_cast<std::size_t>(j)];
    pos->data[1 * 4 + j] = row1[static_cast<std::size_t>(j)];
  }
  for (int j = 0; j < 4; ++j) base.at("final_norm.gain")->data[j] = rms;
  for (int j = 0; j < 4; ++j) base.at("head.w")->data[j * 4 + j] = 1.0;

  // softmax(row0) puts 3/(4 + 2e-20) on token 1; same for token 0 at row1.
  const double denom = 4.0 + 2.0 * std::exp(-20.0);
  const double p = 3.0 / denom;
  Example ex;
  ex.prompt = {3};
  ex.target = {1, 0};
  const auto report = sft_loss<double>(base, nullptr, {ex});
  const double expect = -(std::log(p) + std::log(p)) / 2.0;
  CHECK(report.total == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("gift loss with unit weights reduces to sft loss") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 7);
  auto adapter = random_adapter<double>(cfg, 8);
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    const auto data = sample_data(6, 50 + trial);
    const auto annotated = with_q(data, 1.0);
    const double g = gift_loss<double>(base, &adapter, annotated).total;
    const double s = sft_loss<double>(base, &adapter, data).total;
    CHECK(std::abs(g - s) < 1e-12);
  }
}

TEST_CASE("zero confidence zeroes the loss and every adapter gradient") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 9);
  auto adapter = random_adapter<double>(cfg, 10);
  const auto annotated = with_q(sample_data(4, 11), 0.0);
  const auto batch = make_gift_batch(annotated);
  const auto bg = adapter_batch_gradients<double>(base, adapter, batch, false, 0);
  CHECK(bg.report.total == 0.0);
  for (const auto& g : bg.grads)
    for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("gradients are bitwise independent of target ids at q = 0") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 12);
  auto adapter = random_adapter<double>(cfg, 13);
  auto annotated = with_q(sample_data(4, 14), 0.7);
  // Zero the final target position, then corrupt the paired batch's target
  // id there. The final position is the one spot where the target id is a
  // pure label: earlier target tokens also feed the model as inputs.
  auto paired = annotated;
  for (std::size_t e = 0; e < annotated.size(); ++e) {
    const std::size_t t = annotated[e].target.size() - 1;
    annotated[e].q[t] = 0.0;
    paired[e].q[t] = 0.0;
    paired[e].target[t] = (paired[e].target[t] + 7) % 32;
  }
  const auto a = adapter_batch_gradients<double>(base, adapter,
                                                 make_gift_batch(annotated), false, 0);
  const auto b = adapter_batch_gradients<double>(base, adapter,
                                                 make_gift_batch(paired), false, 0);
  CHECK(a.report.total == b.report.total);
  REQUIRE(a.grads.size() == b.grads.size());
  for (std::size_t p = 0; p < a.grads.size(); ++p) CHECK(a.grads[p] == b.grads[p]);
}

TEST_CASE("single-token gift gradient equals q times the sft gradient") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 15);
  auto adapter = random_adapter<double>(cfg, 16);
  Example ex;
  ex.prompt = {18, 20};  // "Q:"-ish arbitrary prompt tokens
  ex.target = {7};
  AnnotatedExample ann;
  ann.prompt = ex.prompt;
  ann.target = ex.target;
  ann.q = {0.37};
  const auto g_gift = adapter_batch_gradients<double>(
      base, adapter, make_gift_batch({ann}), false, 0);
  const auto g_sft = adapter_batch_gradients<double>(
      base, adapter, make_sft_batch({ex}), false, 0);
  for (std::size_t p = 0; p < g_gift.grads.size(); ++p)
    for (std::size_t i = 0; i < g_gift.grads[p].size(); ++i) {
      const double want = 0.37 * g_sft.grads[p][i];
      CHECK(std::abs(g_gift.grads[p][i] - want) <=
            1e-10 * std::max(1.0, std::abs(want)));
    }
}

TEST_CASE("gift loss gradients match central finite differences") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 17);
  auto adapter = random_adapter<double>(cfg, 18);
  std::vector<AnnotatedExample> annotated;
  Rng qrng(19);
  for (auto& ex : sample_data(3, 19)) {
    AnnotatedExample a;
    a.prompt = ex.prompt;
    a.target = ex.target;
    for (std::size_t t = 0; t < ex.target.size(); ++t) a.q.push_back(qrng.uniform());
    annotated.push_back(std::move(a));
  }
  const auto batch = make_gift_batch(annotated);
  const auto bg = adapter_batch_gradients<double>(base, adapter, batch, false, 0);

  auto eval = [&]() { return gift_loss<double>(base, &adapter, annotated).total; };
  Rng pick(20);
  auto refs = adapter_param_refs(adapter);
  for (int probe = 0; probe < 60; ++probe) {
    const std::size_t p = pick.next_u64() % refs.size();
    const std::size_t i = pick.next_u64() % refs[p].tensor->numel();
    const double fd = gift_test::central_diff(eval, refs[p].tensor->data[i], 1e-5);
    CHECK(rel_err(bg.grads[p][i], fd) < 1e-4);
  }
}

TEST_CASE("learning-rate schedule endpoints and shape") {
  TrainConfig cfg;
  cfg.learning_rate = 2e-4;
  cfg.warmup_ratio = 0.1;
  const std::size_t total = 200;
  CHECK(lr_schedule(0, total, cfg) == 0.0);
  CHECK(lr_schedule(20, total, cfg) == cfg.learning_rate);  // warmup end
  CHECK(std::abs(lr_schedule(total, total, cfg) - 0.1 * cfg.learning_rate) < 1e-12);
  for (std::size_t s = 0; s < 20; ++s)
    CHECK(lr_schedule(s, total, cfg) <= lr_schedule(s + 1, total, cfg));
  for (std::size_t s = 20; s < total; ++s)
    CHECK(lr_schedule(s, total, cfg) >= lr_schedule(s + 1, total, cfg));
}

TEST_CASE("adamw: no-op on zero gradients without decay, hand first step") {
  const auto cfg = tiny_config();
  {
    auto adapter = random_adapter<double>(cfg, 21);
    auto refs = adapter_param_refs(adapter);
    AdamWParams hp;
    hp.weight_decay = 0.0;
    AdamW<double> opt(refs, hp);
    std::vector<std::vector<double>> zero_grads;
    for (auto& r : refs) zero_grads.emplace_back(r.tensor->numel(), 0.0);
    const auto before = materialize_delta(adapter);
    opt.step(refs, zero_grads, 1e-3);
    const auto after = materialize_delta(adapter);
    for (std::size_t i = 0; i < before.tensors.size(); ++i)
      CHECK(before.tensors[i]->data == after.tensors[i]->data);
  }
  {
    // One step on scalar p = 0 with g = 1: p becomes -lr/(1 + eps).
    auto p = make_param<double>({std::size_t(1)});
    std::vector<ParamRef<double>> refs = {{"p", p}};
    AdamW<double> opt(refs);
    opt.step(refs, {{1.0}}, 1e-2);
    CHECK(rel_err(p->data[0], -1e-2) < 1e-6);
  }
  {
    auto p = make_param<double>({std::size_t(1)});
    std::vector<ParamRef<double>> refs = {{"named_param", p}};
    AdamW<double> opt(refs);
    try {
      opt.step(refs, {{std::nan("")}}, 1e-2);
      FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
      CHECK(std::string(e.what()).find("named_param") != std::string::npos);
    }
  }
}

TEST_CASE("train_adapter: frozen base, determinism, zero epochs") {
  const auto cfg = tiny_config();
  auto base = init_params<float>(cfg, 22);
  const auto base_hash = checkpoint_hash(base);
  const auto data = make_sft_batch(sample_data(12, 23));

  TrainConfig tc;
  tc.mode = TrainMode::sft;
  tc.learning_rate = 1e-3;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.rank = 4;
  tc.alpha = 8.0;
  tc.dropout = 0.05;
  tc.seed = 24;

  auto [ad1, log1] = train_adapter<float>(base, data, tc);
  CHECK(checkpoint_hash(base) == base_hash);
  CHECK(log1.steps.size() == 6);
  CHECK(log1.steps.front().lr == lr_schedule(0, 6, tc));

  auto [ad2, log2] = train_adapter<float>(base, data, tc);
  for (std::size_t i = 0; i < ad1.factors.size(); ++i) {
    CHECK(ad1.factors[i].a->data == ad2.factors[i].a->data);
    CHECK(ad1.factors[i].b->data == ad2.factors[i].b->data);
  }
  for (std::size_t s = 0; s < log1.steps.size(); ++s)
    CHECK(log1.steps[s].loss == log2.steps[s].loss);

  TrainConfig zero = tc;
  zero.epochs = 0;
  auto [fresh, log0] = train_adapter<float>(base, data, zero);
  CHECK(log0.steps.empty());
  for (const auto& t : materialize_delta(fresh).tensors)
    for (float v : t->data) CHECK(v == 0.0f);
  CHECK(checkpoints_equal(merge_into(base, fresh), base));
}

TEST_CASE("training reduces the probe loss on a learnable task") {
  const auto cfg = tiny_config();
  auto base = init_params<float>(cfg, 30);
  const auto data = make_sft_batch(sample_data(24, 31));
  TrainConfig tc;
  tc.mode = TrainMode::sft;
  tc.learning_rate = 3e-3;
  tc.epochs = 8;
  tc.batch_size = 8;
  tc.rank = 4;
  tc.alpha = 8.0;
  tc.dropout = 0.0;
  tc.seed = 32;
  auto [adapter, log] = train_adapter<float>(base, data, tc);
  CHECK(log.probe_loss_end < log.probe_loss_start);
}

TEST_CASE("batch gradients are identical across thread counts") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 33);
  auto adapter = random_adapter<double>(cfg, 34);
  const auto batch = make_sft_batch(sample_data(6, 35));
  const auto a = adapter_batch_gradients<double>(base, adapter, batch, false, 9, 1);
  const auto b = adapter_batch_gradients<double>(base, adapter, batch, false, 9, 3);
  CHECK(a.report.total == b.report.total);
  for (std::size_t p = 0; p < a.grads.size(); ++p) CHECK(a.grads[p] == b.grads[p]);
}

TEST_CASE("full-parameter training updates every tensor") {
  const auto cfg = tiny_config();
  auto start = init_params<float>(cfg, 36);
  TaskSpec spec;
  spec.kind = TaskKind::base_stream;
  spec.operand_lo = 0;
  spec.operand_hi = 20;
  spec.n_train = 8;
  spec.max_seq = 32;
  const auto chunks = gen_base_corpus(spec, 37);
  std::vector<WeightedExample> data;
  for (const auto& c : chunks) {
    WeightedExample ex;
    ex.prompt = {c.front()};
    ex.target.assign(c.begin() + 1, c.end());
    ex.weights.assign(ex.target.size(), 1.0);
    data.push_back(std::move(ex));
  }
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 38;
  auto [trained, log] = train_full<float>(start, data, tc);
  CHECK(log.probe_loss_end < log.probe_loss_start);
  for (std::size_t i = 0; i < trained.tensors.size(); ++i)
    CHECK(trained.tensors[i]->data != start.tensors[i]->data);
}

TEST_CASE("loss input guards") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 40);
  CHECK_THROWS_AS(sft_loss<double>(base, nullptr, {}), contract_error);
  AnnotatedExample bad;
  bad.prompt = {1};
  bad.target = {2, 3};
  bad.q = {0.5};  // length mismatch
  CHECK_THROWS_AS(gift_loss<double>(base, nullptr, {bad}), schema_error);
  TrainConfig tc;
  tc.learning_rate = -1.0;
  CHECK_THROWS_AS(tc.validate(), config_error);
}
