#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gift/adapter.hpp"
#include "gift/annotate.hpp"
#include "gift/common.hpp"
#include "gift/data.hpp"
#include "gift/model.hpp"
#include "gift/parallel.hpp"
#include "gift/rng.hpp"
#include "gift/tensor.hpp"
#include "gift/transformer.hpp"

namespace gift {

enum class TrainMode { sft, gift, gift_baset };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::sft: return "sft";
    case TrainMode::gift: return "gift";
    case TrainMode::gift_baset: return "gift_baset";
  }
  return "?";
}

struct TrainConfig {
  TrainMode mode = TrainMode::sft;
  double learning_rate = 2e-4;
  int epochs = 1;
  int batch_size = 32;
  double warmup_ratio = 0.1;
  int rank = 8;
  double alpha = 16.0;
  double dropout = 0.05;
  double weight_decay = 0.01;
  std::vector<std::string> lora_targets;  // empty = default query/value set
  std::uint64_t seed = 0;
  std::optional<double> grad_clip;
  unsigned threads = 1;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw config_error("train config: learning_rate must be positive");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
      throw config_error("train config: warmup_ratio must lie in [0, 1)");
    if (epochs < 0 || batch_size < 1)
      throw config_error("train config: bad epochs/batch_size");
  }
};

// Linear warmup to learning_rate, then cosine decay to a 10% floor.
inline double lr_schedule(std::size_t step, std::size_t total_steps,
                          const TrainConfig& cfg) {
  if (total_steps == 0) return cfg.learning_rate;
  const auto warmup = static_cast<std::size_t>(
      cfg.warmup_ratio * static_cast<double>(total_steps));
  if (step < warmup)
    return cfg.learning_rate * static_cast<double>(step) /
           static_cast<double>(warmup);
  if (total_steps == warmup) return cfg.learning_rate;
  const double floor = 0.1 * cfg.learning_rate;
  const double phase = static_cast<double>(step - warmup) /
                       static_cast<double>(total_steps - warmup);
  return floor + (cfg.learning_rate - floor) * 0.5 *
                     (1.0 + std::cos(3.141592653589793238462643383279 * phase));
}

struct LossReport {
  std::vector<double> per_token_loss;  // l_t per target token, batch order
  std::vector<double> weights;         // 1 for SFT, q_t for GIFT
  double total = 0.0;                  // sum(w_t * l_t) / token_count
  std::size_t token_count = 0;
};

// One training item: target tokens plus their loss weights.
struct WeightedExample {
  std::vector<int> prompt;
  std::vector<int> target;
  std::vector<double> weights;
};

inline std::vector<WeightedExample> make_sft_batch(
    const std::vector<Example>& data) {
  std::vector<WeightedExample> out;
  out.reserve(data.size());
  for (const auto& ex : data)
    out.push_back({ex.prompt, ex.target,
                   std::vector<double>(ex.target.size(), 1.0)});
  return out;
}

inline std::vector<WeightedExample> make_gift_batch(
    const std::vector<AnnotatedExample>& data) {
  std::vector<WeightedExample> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    if (ex.q.size() != ex.target.size())
      throw schema_error("gift batch: q/target length mismatch");
    out.push_back({ex.prompt, ex.target, ex.q});
  }
  return out;
}

namespace detail {

// Unnormalized weighted negative log-likelihood of one example, built from
// taped primitives so gradients flow when a tape is supplied. Prompt
// positions contribute nothing; only target positions are scored.
template <class S>
struct ExampleLoss {
  TensorPtr<S> loss_sum;            // scalar, sum_t w_t * l_t
  std::vector<double> per_token;    // l_t
  std::size_t tokens = 0;
};

template <class S>
ExampleLoss<S> example_loss(const Checkpoint<S>& params,
                            const WeightedExample& ex,
                            const ForwardOpts<S>& opts) {
  if (ex.prompt.empty() || ex.target.empty())
    throw contract_error("loss: examples need non-empty prompt and target");
  if (ex.weights.size() != ex.target.size())
    throw schema_error("loss: weight/target length mismatch");
  std::vector<int> seq = ex.prompt;
  seq.insert(seq.end(), ex.target.begin(), ex.target.end());
  if (seq.size() > static_cast<std::size_t>(params.config.max_seq))
    throw contract_error("loss: sequence exceeds max_seq");

  Tape<S>* tape = opts.tape;
  TensorPtr<S> logits = forward_logits(params, seq, opts);
  // Rows predicting the target tokens: positions P-1 .. P+T-2.
  TensorPtr<S> target_rows =
      slice_rows(tape, logits, ex.prompt.size() - 1, ex.target.size());
  TensorPtr<S> log_probs = log_softmax_rows(tape, target_rows);
  TensorPtr<S> picked = gather_log_prob<S>(tape, log_probs, ex.target);

  auto w = make_tensor<S>({ex.target.size()});
  for (std::size_t t = 0; t < ex.target.size(); ++t)
    w->data[t] = static_cast<S>(ex.weights[t]);
  TensorPtr<S> loss_sum =
      scale(tape, sum_all(tape, mul(tape, picked, w)), S(-1));

  ExampleLoss<S> out;
  out.loss_sum = loss_sum;
  out.tokens = ex.target.size();
  out.per_token.resize(ex.target.size());
  for (std::size_t t = 0; t < ex.target.size(); ++t)
    out.per_token[t] = -static_cast<double>(picked->data[t]);
  return out;
}

}  // namespace detail

// Loss over a batch without gradients; normalizer is the total number of
// target tokens in the batch.
template <class S>
LossReport weighted_loss(const Checkpoint<S>& base,
                         const LoraAdapter<S>* adapter,
                         std::span<const WeightedExample> batch) {
  if (batch.empty()) throw contract_error("loss: empty batch");
  LossReport report;
  double sum = 0.0;
  ForwardOpts<S> opts;
  opts.adapter = adapter;
  for (const auto& ex : batch) {
    const auto el = detail::example_loss(base, ex, opts);
    sum += static_cast<double>(el.loss_sum->data[0]);
    report.token_count += el.tokens;
    report.per_token_loss.insert(report.per_token_loss.end(),
                                 el.per_token.begin(), el.per_token.end());
    report.weights.insert(report.weights.end(), ex.weights.begin(),
                          ex.weights.end());
  }
  report.total = sum / static_cast<double>(report.token_count);
  return report;
}

template <class S>
LossReport sft_loss(const Checkpoint<S>& base, const LoraAdapter<S>* adapter,
                    const std::vector<Example>& batch) {
  const auto weighted = make_sft_batch(batch);
  return weighted_loss<S>(base, adapter, weighted);
}

template <class S>
LossReport gift_loss(const Checkpoint<S>& base, const LoraAdapter<S>* adapter,
                     const std::vector<AnnotatedExample>& batch) {
  const auto weighted = make_gift_batch(batch);
  return weighted_loss<S>(base, adapter, weighted);
}

template <class S>
struct ParamRef {
  std::string name;
  TensorPtr<S> tensor;
};

template <class S>
std::vector<ParamRef<S>> adapter_param_refs(LoraAdapter<S>& adapter) {
  std::vector<ParamRef<S>> out;
  for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
    out.push_back({adapter.targets[i] + ".lora_a", adapter.factors[i].a});
    out.push_back({adapter.targets[i] + ".lora_b", adapter.factors[i].b});
  }
  return out;
}

template <class S>
std::vector<ParamRef<S>> checkpoint_param_refs(Checkpoint<S>& ckpt) {
  std::vector<ParamRef<S>> out;
  for (std::size_t i = 0; i < ckpt.names.size(); ++i)
    out.push_back({ckpt.names[i], ckpt.tensors[i]});
  return out;
}

template <class S>
struct BatchGradients {
  LossReport report;
  std::vector<std::vector<S>> grads;  // per trainable param, d(loss)/d(param)
};

// Per-example tapes run independently (parallelizable); gradients are
// reduced in example-index order and then normalized by the batch's total
// target-token count, so results do not depend on thread count.
template <class S>
BatchGradients<S> adapter_batch_gradients(const Checkpoint<S>& base,
                                          const LoraAdapter<S>& adapter,
                                          std::span<const WeightedExample> batch,
                                          bool train_mode,
                                          std::uint64_t dropout_seed,
                                          unsigned threads = 1) {
  if (batch.empty()) throw contract_error("gradients: empty batch");
  const std::size_t n = batch.size();
  const std::size_t n_params = adapter.targets.size() * 2;
  std::vector<std::vector<std::vector<S>>> per_example(n);
  std::vector<double> losses(n);
  std::vector<std::size_t> tokens(n);
  std::vector<std::vector<double>> per_token(n);

  parallel_for(n, threads, [&](std::size_t i) {
    LoraAdapter<S> local = clone_adapter(adapter, /*requires_grad=*/true);
    Tape<S> tape;
    Rng drop_rng(derive_seed(dropout_seed, 0xd809ull, i));
    ForwardOpts<S> opts;
    opts.adapter = &local;
    opts.tape = &tape;
    opts.train_mode = train_mode;
    opts.dropout_rng = &drop_rng;
    auto el = detail::example_loss(base, batch[i], opts);
    tape.backward(el.loss_sum);
    auto refs = adapter_param_refs(local);
    per_example[i].resize(n_params);
    for (std::size_t p = 0; p < n_params; ++p) {
      refs[p].tensor->ensure_grad();
      per_example[i][p] = refs[p].tensor->grad;
    }
    losses[i] = static_cast<double>(el.loss_sum->data[0]);
    tokens[i] = el.tokens;
    per_token[i] = std::move(el.per_token);
  });

  BatchGradients<S> out;
  out.grads.resize(n_params);
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss_sum += losses[i];
    out.report.token_count += tokens[i];
    out.report.per_token_loss.insert(out.report.per_token_loss.end(),
                                     per_token[i].begin(), per_token[i].end());
    out.report.weights.insert(out.report.weights.end(),
                              batch[i].weights.begin(), batch[i].weights.end());
    for (std::size_t p = 0; p < n_params; ++p) {
      if (out.grads[p].empty()) out.grads[p].assign(per_example[i][p].size(), S(0));
      for (std::size_t j = 0; j < out.grads[p].size(); ++j)
        out.grads[p][j] += per_example[i][p][j];
    }
  }
  const S inv = static_cast<S>(1.0 / static_cast<double>(out.report.token_count));
  for (auto& g : out.grads)
    for (auto& v : g) v *= inv;
  out.report.total = loss_sum / static_cast<double>(out.report.token_count);
  return out;
}

// Full-parameter variant used by the pretraining and instruct stages.
template <class S>
BatchGradients<S> full_batch_gradients(const Checkpoint<S>& params,
                                       std::span<const WeightedExample> batch,
                                       unsigned threads = 1) {
  if (batch.empty()) throw contract_error("gradients: empty batch");
  const std::size_t n = batch.size();
  const std::size_t n_params = params.names.size();
  std::vector<std::vector<std::vector<S>>> per_example(n);
  std::vector<double> losses(n);
  std::vector<std::size_t> tokens(n);

  parallel_for(n, threads, [&](std::size_t i) {
    Checkpoint<S> local = clone_checkpoint(params, /*requires_grad=*/true);
    Tape<S> tape;
    ForwardOpts<S> opts;
    opts.tape = &tape;
    auto el = detail::example_loss(local, batch[i], opts);
    tape.backward(el.loss_sum);
    per_example[i].resize(n_params);
    for (std::size_t p = 0; p < n_params; ++p) {
      local.tensors[p]->ensure_grad();
      per_example[i][p] = std::move(local.tensors[p]->grad);
    }
    losses[i] = static_cast<double>(el.loss_sum->data[0]);
    tokens[i] = el.tokens;
  });

  BatchGradients<S> out;
  out.grads.resize(n_params);
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss_sum += losses[i];
    out.report.token_count += tokens[i];
    for (std::size_t p = 0; p < n_params; ++p) {
      if (out.grads[p].empty()) out.grads[p].assign(per_example[i][p].size(), S(0));
      for (std::size_t j = 0; j < out.grads[p].size(); ++j)
        out.grads[p][j] += per_example[i][p][j];
    }
  }
  const S inv = static_cast<S>(1.0 / static_cast<double>(out.report.token_count));
  for (auto& g : out.grads)
    for (auto& v : g) v *= inv;
  out.report.total = loss_sum / static_cast<double>(out.report.token_count);
  return out;
}

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam. Moments are kept in double so the update
// rule is identical across scalar widths.
template <class S>
class AdamW {
 public:
  AdamW(const std::vector<ParamRef<S>>& params, AdamWParams hp = {})
      : hp_(hp) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      m_.emplace_back(p.tensor->numel(), 0.0);
      v_.emplace_back(p.tensor->numel(), 0.0);
    }
  }

  void step(const std::vector<ParamRef<S>>& params,
            const std::vector<std::vector<S>>& grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw contract_error("adamw: parameter/gradient arity mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(hp_.beta1, t_);
    const double bc2 = 1.0 - std::pow(hp_.beta2, t_);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& tensor = *params[p].tensor;
      const auto& g = grads[p];
      if (g.size() != tensor.numel())
        throw contract_error("adamw: gradient size mismatch for " + names_[p]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        if (std::isnan(gi))
          throw numeric_error("adamw: NaN gradient in parameter " + names_[p]);
        m_[p][i] = hp_.beta1 * m_[p][i] + (1.0 - hp_.beta1) * gi;
        v_[p][i] = hp_.beta2 * v_[p][i] + (1.0 - hp_.beta2) * gi * gi;
        const double mhat = m_[p][i] / bc1;
        const double vhat = v_[p][i] / bc2;
        double x = static_cast<double>(tensor.data[i]);
        x -= lr * hp_.weight_decay * x;
        x -= lr * mhat / (std::sqrt(vhat) + hp_.eps);
        tensor.data[i] = static_cast<S>(x);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  AdamWParams hp_;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::size_t tokens = 0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  double probe_loss_start = 0.0;
  double probe_loss_end = 0.0;
};

// Line-oriented training log; `seconds` fields are wall-clock and therefore
// vary across runs.
inline void write_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("write_train_log: cannot open " + path);
  out << "probe_loss_start=" << log.probe_loss_start << "\n";
  for (const auto& s : log.steps)
    out << "step=" << s.step << " lr=" << s.lr << " loss=" << s.loss
        << " tokens=" << s.tokens << " seconds=" << s.seconds << "\n";
  out << "probe_loss_end=" << log.probe_loss_end << "\n";
}

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n,
                                                 std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i)
    std::swap(idx[i - 1],
              idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);
  return idx;
}

template <class S>
void clip_gradients(std::vector<std::vector<S>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (const S v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const S k = static_cast<S>(max_norm / norm);
  for (auto& g : grads)
    for (auto& v : g) v *= k;
}

}  // namespace detail

// Adapter training on a frozen base under per-token weights. Deterministic
// given cfg.seed: fixed shuffle and a per-(step, example) dropout stream.
template <class S>
std::pair<LoraAdapter<S>, TrainLog> train_adapter(
    const Checkpoint<S>& base, const std::vector<WeightedExample>& data,
    const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw contract_error("train_adapter: empty dataset");
  const std::vector<std::string> targets =
      cfg.lora_targets.empty() ? default_lora_targets(base.config)
                               : cfg.lora_targets;
  LoraAdapter<S> adapter =
      init_adapter<S>(base.config, targets, cfg.rank, cfg.alpha, cfg.dropout,
                      derive_seed(cfg.seed, 0xadaull));
  TrainLog log;
  const std::size_t steps_per_epoch =
      (data.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
      static_cast<std::size_t>(cfg.batch_size);
  const std::size_t total_steps =
      steps_per_epoch * static_cast<std::size_t>(cfg.epochs);

  const std::size_t probe_n =
      std::min<std::size_t>(data.size(), static_cast<std::size_t>(cfg.batch_size));
  const std::span<const WeightedExample> probe(data.data(), probe_n);
  log.probe_loss_start = weighted_loss<S>(base, &adapter, probe).total;

  auto refs = adapter_param_refs(adapter);
  AdamWParams hp;
  hp.weight_decay = cfg.weight_decay;
  AdamW<S> opt(refs, hp);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = 0;
  std::vector<WeightedExample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order =
        detail::shuffled_indices(data.size(), derive_seed(cfg.seed, 0x5bfull,
                                                          static_cast<std::uint64_t>(epoch)));
    for (std::size_t b = 0; b < data.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      batch.clear();
      for (std::size_t i = b;
           i < std::min(data.size(), b + static_cast<std::size_t>(cfg.batch_size)); ++i)
        batch.push_back(data[order[i]]);
      const double lr = lr_schedule(step, total_steps, cfg);
      auto bg = adapter_batch_gradients<S>(base, adapter, batch,
                                           /*train_mode=*/true,
                                           derive_seed(cfg.seed, 0xd209ull, step),
                                           cfg.threads);
      if (cfg.grad_clip) detail::clip_gradients(bg.grads, *cfg.grad_clip);
      opt.step(refs, bg.grads, lr);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.steps.push_back({static_cast<int>(step), lr, bg.report.total,
                           bg.report.token_count, secs});
      ++step;
    }
  }
  log.probe_loss_end = weighted_loss<S>(base, &adapter, probe).total;
  return {std::move(adapter), std::move(log)};
}

// Full-parameter training (pretraining / instruction tuning); returns an
// updated copy of the starting checkpoint.
template <class S>
std::pair<Checkpoint<S>, TrainLog> train_full(
    const Checkpoint<S>& start, const std::vector<WeightedExample>& data,
    const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw contract_error("train_full: empty dataset");
  Checkpoint<S> params = clone_checkpoint(start);
  TrainLog log;
  const std::size_t steps_per_epoch =
      (data.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
      static_cast<std::size_t>(cfg.batch_size);
  const std::size_t total_steps =
      steps_per_epoch * static_cast<std::size_t>(cfg.epochs);

  const std::size_t probe_n =
      std::min<std::size_t>(data.size(), static_cast<std::size_t>(cfg.batch_size));
  const std::span<const WeightedExample> probe(data.data(), probe_n);
  log.probe_loss_start = weighted_loss<S>(params, nullptr, probe).total;

  auto refs = checkpoint_param_refs(params);
  AdamWParams hp;
  hp.weight_decay = cfg.weight_decay;
  AdamW<S> opt(refs, hp);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t step = 0;
  std::vector<WeightedExample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order =
        detail::shuffled_indices(data.size(), derive_seed(cfg.seed, 0x5bfull,
                                                          static_cast<std::uint64_t>(epoch)));
    for (std::size_t b = 0; b < data.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      batch.clear();
      for (std::size_t i = b;
           i < std::min(data.size(), b + static_cast<std::size_t>(cfg.batch_size)); ++i)
        batch.push_back(data[order[i]]);
      const double lr = lr_schedule(step, total_steps, cfg);
      auto bg = full_batch_gradients<S>(params, batch, cfg.threads);
      if (cfg.grad_clip) detail::clip_gradients(bg.grads, *cfg.grad_clip);
      opt.step(refs, bg.grads, lr);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.steps.push_back({static_cast<int>(step), lr, bg.report.total,
                           bg.report.token_count, secs});
      ++step;
    }
  }
  log.probe_loss_end = weighted_loss<S>(params, nullptr, probe).total;
  return {std::move(params), std::move(log)};
}

}  // namespace gift
