#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gift/adapter.hpp"
#include "gift/common.hpp"
#include "gift/model.hpp"
#include "gift/rng.hpp"
#include "gift/tensor.hpp"

namespace gift {

template <class S>
struct ForwardOpts {
  const LoraAdapter<S>* adapter = nullptr;
  Tape<S>* tape = nullptr;
  bool train_mode = false;  // enables adapter dropout
  Rng* dropout_rng = nullptr;
};

namespace detail {

// Additive causal mask: 0 at or below the diagonal, a large negative
// constant above it, so softmax assigns future positions zero weight.
// Masks are immutable; cache one per sequence length per thread.
template <class S>
TensorPtr<S> causal_mask(std::size_t t) {
  thread_local std::vector<TensorPtr<S>> cache;
  if (t < cache.size() && cache[t]) return cache[t];
  auto mask = make_tensor<S>({t, t});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j)
      mask->data[i * t + j] = static_cast<S>(-1e30);
  if (cache.size() <= t) cache.resize(t + 1);
  cache[t] = mask;
  return mask;
}

// x * W^T plus the scaled low-rank path when this matrix is adapted.
template <class S>
TensorPtr<S> project(const TensorPtr<S>& x, const TensorPtr<S>& w,
                     const std::string& name, const ForwardOpts<S>& opts) {
  Tape<S>* tape = opts.tape;
  TensorPtr<S> y = matmul_nt(tape, x, w);
  const LoraFactors<S>* f =
      opts.adapter ? opts.adapter->find(name) : nullptr;
  if (f != nullptr) {
    TensorPtr<S> ax = x;
    if (opts.train_mode && opts.adapter->dropout_p > 0.0) {
      if (opts.dropout_rng == nullptr)
        throw contract_error("forward: dropout requires an rng in train mode");
      ax = dropout(tape, x, opts.adapter->dropout_p, *opts.dropout_rng);
    }
    TensorPtr<S> low = matmul_nt(tape, matmul_nt(tape, ax, f->a), f->b);
    y = add(tape, y, scale(tape, low, opts.adapter->scaling()));
  }
  return y;
}

}  // namespace detail

// Causal logits over the whole sequence, [len x vocab].
template <class S>
TensorPtr<S> forward_logits(const Checkpoint<S>& ckpt,
                            std::span<const int> tokens,
                            const ForwardOpts<S>& opts = {}) {
  const ModelConfig& cfg = ckpt.config;
  const std::size_t t = tokens.size();
  if (t < 1 || t > static_cast<std::size_t>(cfg.max_seq))
    throw contract_error("forward: sequence length out of range");
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size)
      throw index_error("forward: token id out of vocabulary");
  if (opts.adapter != nullptr && !(opts.adapter->config == cfg))
    throw config_error("forward: adapter config mismatch");

  Tape<S>* tape = opts.tape;
  const std::size_t n_heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t head_dim = static_cast<std::size_t>(cfg.head_dim());
  const S attn_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));

  TensorPtr<S> x = add(tape, embedding_rows(tape, ckpt.at("tok_emb"), tokens),
                       slice_rows(tape, ckpt.at("pos_emb"), 0, t));
  const TensorPtr<S> mask = detail::causal_mask<S>(t);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    TensorPtr<S> h = rms_norm(tape, x, ckpt.at(p + "attn_norm.gain"));
    TensorPtr<S> q = detail::project(h, ckpt.at(p + "attn.wq"), p + "attn.wq", opts);
    TensorPtr<S> k = detail::project(h, ckpt.at(p + "attn.wk"), p + "attn.wk", opts);
    TensorPtr<S> v = detail::project(h, ckpt.at(p + "attn.wv"), p + "attn.wv", opts);

    std::vector<TensorPtr<S>> heads;
    heads.reserve(n_heads);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      TensorPtr<S> qh = slice_cols(tape, q, hd * head_dim, head_dim);
      TensorPtr<S> kh = slice_cols(tape, k, hd * head_dim, head_dim);
      TensorPtr<S> vh = slice_cols(tape, v, hd * head_dim, head_dim);
      TensorPtr<S> scores =
          add(tape, scale(tape, matmul_nt(tape, qh, kh), attn_scale), mask);
      heads.push_back(matmul(tape, softmax_rows(tape, scores), vh));
    }
    TensorPtr<S> attn = detail::project(concat_cols(tape, heads),
                                        ckpt.at(p + "attn.wo"), p + "attn.wo", opts);
    x = add(tape, x, attn);

    TensorPtr<S> h2 = rms_norm(tape, x, ckpt.at(p + "mlp_norm.gain"));
    TensorPtr<S> m1 =
        silu(tape, detail::project(h2, ckpt.at(p + "mlp.w1"), p + "mlp.w1", opts));
    TensorPtr<S> m2 = detail::project(m1, ckpt.at(p + "mlp.w2"), p + "mlp.w2", opts);
    x = add(tape, x, m2);
  }

  x = rms_norm(tape, x, ckpt.at("final_norm.gain"));
  return detail::project(x, ckpt.at("head.w"), "head.w", opts);
}

struct SampleOpts {
  double temperature = 1.0;
  int max_new = 16;
  bool greedy = false;  // argmax decoding, ties broken by lowest token id
  int eos_id = 2;
};

// Autoregressive sampling; returns prompt plus generated tokens.
template <class S>
std::vector<int> sample_sequence(const Checkpoint<S>& ckpt,
                                 std::span<const int> prompt,
                                 const SampleOpts& opts, std::uint64_t rng_seed,
                                 const LoraAdapter<S>* adapter = nullptr) {
  if (prompt.empty()) throw contract_error("sample: prompt must be non-empty");
  if (!opts.greedy && !(opts.temperature > 0.0))
    throw contract_error("sample: temperature must be positive");
  if (prompt.size() > static_cast<std::size_t>(ckpt.config.max_seq))
    throw contract_error("sample: prompt exceeds max_seq");

  Rng rng(rng_seed);
  std::vector<int> seq(prompt.begin(), prompt.end());
  ForwardOpts<S> fo;
  fo.adapter = adapter;
  const std::size_t vocab = static_cast<std::size_t>(ckpt.config.vocab_size);

  for (int step = 0; step < opts.max_new; ++step) {
    if (seq.size() >= static_cast<std::size_t>(ckpt.config.max_seq)) break;
    TensorPtr<S> logits = forward_logits(ckpt, seq, fo);
    const S* row = logits->data.data() + (seq.size() - 1) * vocab;
    int next = 0;
    if (opts.greedy) {
      for (std::size_t j = 1; j < vocab; ++j)
        if (row[j] > row[next]) next = static_cast<int>(j);
    } else {
      // Stabilized softmax over logits / temperature, then a CDF walk.
      const S inv_t = static_cast<S>(1.0 / opts.temperature);
      S mx = row[0] * inv_t;
      for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j] * inv_t);
      std::vector<double> probs(vocab);
      double sum = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) {
        probs[j] = std::exp(static_cast<double>(row[j] * inv_t - mx));
        sum += probs[j];
      }
      const double u = rng.uniform() * sum;
      double acc = 0.0;
      next = static_cast<int>(vocab) - 1;
      for (std::size_t j = 0; j < vocab; ++j) {
        acc += probs[j];
        if (u < acc) {
          next = static_cast<int>(j);
          break;
        }
      }
    }
    seq.push_back(next);
    if (next == opts.eos_id) break;
  }
  return seq;
}

}  // namespace gift
