#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "gift/common.hpp"
#include "gift/model.hpp"
#include "gift/rng.hpp"
#include "gift/tensor.hpp"

namespace gift {

template <class S>
struct LoraFactors {
  TensorPtr<S> a;  // [r x d_in]
  TensorPtr<S> b;  // [d_out x r]
};

// Low-rank adapter over selected checkpoint matrices. Fresh adapters carry
// b == 0 so an attached model starts out identical to its base.
template <class S>
struct LoraAdapter {
  ModelConfig config;
  std::vector<std::string> targets;       // manifest order
  std::vector<LoraFactors<S>> factors;    // aligned with targets
  std::unordered_map<std::string, std::size_t> index;
  int rank = 8;
  double alpha = 16.0;
  double dropout_p = 0.05;

  S scaling() const { return static_cast<S>(alpha / rank); }

  const LoraFactors<S>* find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &factors[it->second];
  }
};

// Matrices the forward pass applies adapter contributions to; embeddings
// are gathered, not multiplied, so they cannot host low-rank factors.
inline bool is_lora_adaptable(const std::string& name) {
  const auto ends_with = [&name](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() &&
           name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".attn.wq") || ends_with(".attn.wk") ||
         ends_with(".attn.wv") || ends_with(".attn.wo") ||
         ends_with(".mlp.w1") || ends_with(".mlp.w2") || name == "head.w";
}

// Query and value projections of every layer; the paper leaves the target
// set unspecified, so this default stays configurable.
inline std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    out.push_back("layers." + std::to_string(l) + ".attn.wq");
    out.push_back("layers." + std::to_string(l) + ".attn.wv");
  }
  return out;
}

// Every adaptable matrix; the expressive option for hard transfer tasks.
inline std::vector<std::string> all_lora_targets(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back(p + "attn.wq");
    out.push_back(p + "attn.wk");
    out.push_back(p + "attn.wv");
    out.push_back(p + "attn.wo");
    out.push_back(p + "mlp.w1");
    out.push_back(p + "mlp.w2");
  }
  out.push_back("head.w");
  return out;
}

template <class S>
LoraAdapter<S> init_adapter(const ModelConfig& cfg,
                            const std::vector<std::string>& targets, int rank,
                            double alpha, double dropout_p,
                            std::uint64_t seed) {
  cfg.validate();
  if (rank < 1) throw config_error("adapter: rank must be >= 1");
  if (dropout_p < 0.0 || dropout_p >= 1.0)
    throw config_error("adapter: dropout must lie in [0, 1)");
  std::unordered_map<std::string, std::vector<std::size_t>> shapes;
  for (const auto& spec : canonical_manifest(cfg)) shapes[spec.name] = spec.shape;

  LoraAdapter<S> ad;
  ad.config = cfg;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.dropout_p = dropout_p;
  Rng rng(derive_seed(seed, 0x10a0ull));
  const auto r = static_cast<std::size_t>(rank);
  for (const auto& name : targets) {
    auto it = shapes.find(name);
    if (it == shapes.end())
      throw config_error("adapter: unknown target tensor " + name);
    if (it->second.size() != 2 || !is_lora_adaptable(name))
      throw config_error("adapter: target " + name +
                         " is not an adaptable projection matrix");
    const std::size_t d_out = it->second[0], d_in = it->second[1];
    LoraFactors<S> f;
    f.a = make_tensor<S>({r, d_in});
    f.b = make_tensor<S>({d_out, r});
    for (auto& v : f.a->data) v = static_cast<S>(0.02 * rng.normal());
    ad.index.emplace(name, ad.targets.size());
    ad.targets.push_back(name);
    ad.factors.push_back(std::move(f));
  }
  return ad;
}

template <class S>
LoraAdapter<S> clone_adapter(const LoraAdapter<S>& src,
                             bool requires_grad = false) {
  LoraAdapter<S> out;
  out.config = src.config;
  out.targets = src.targets;
  out.index = src.index;
  out.rank = src.rank;
  out.alpha = src.alpha;
  out.dropout_p = src.dropout_p;
  out.factors.reserve(src.factors.size());
  for (const auto& f : src.factors)
    out.factors.push_back(
        {clone_tensor(*f.a, requires_grad), clone_tensor(*f.b, requires_grad)});
  return out;
}

// M(adapter): per target (alpha / r) * B * A, densified.
template <class S>
DeltaSet<S> materialize_delta(const LoraAdapter<S>& adapter) {
  DeltaSet<S> delta;
  delta.config = adapter.config;
  const S scaling = adapter.scaling();
  for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
    const auto& f = adapter.factors[i];
    const std::size_t d_out = f.b->shape[0], r = f.b->shape[1],
                      d_in = f.a->shape[1];
    auto d = make_tensor<S>({d_out, d_in});
    detail::gemm_nn(f.b->data.data(), f.a->data.data(), d->data.data(), d_out,
                    r, d_in);
    for (auto& v : d->data) v *= scaling;
    delta.add(adapter.targets[i], std::move(d));
  }
  return delta;
}

// Pure merge: returns a new checkpoint with target tensors incremented by
// the materialized deltas.
template <class S>
Checkpoint<S> merge_into(const Checkpoint<S>& ckpt,
                         const LoraAdapter<S>& adapter) {
  if (!(ckpt.config == adapter.config))
    throw config_error("merge_into: adapter/checkpoint config mismatch");
  Checkpoint<S> out = clone_checkpoint(ckpt);
  const DeltaSet<S> delta = materialize_delta(adapter);
  for (std::size_t i = 0; i < delta.names.size(); ++i) {
    auto& w = out.at(delta.names[i]);
    const auto& d = delta.tensors[i];
    if (w->shape != d->shape)
      throw shape_error("merge_into: shape mismatch on " + delta.names[i]);
    for (std::size_t j = 0; j < w->data.size(); ++j) w->data[j] += d->data[j];
  }
  return out;
}

}  // namespace gift
