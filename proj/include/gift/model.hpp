#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gift/common.hpp"
#include "gift/rng.hpp"
#include "gift/tensor.hpp"

namespace gift {

struct ModelConfig {
  int vocab_size = 32;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq = 64;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 2 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1)
      throw config_error("model config: all dimensions must be positive");
    if (d_model % n_heads != 0)
      throw config_error("model config: d_model must be divisible by n_heads");
    if (max_seq < 2) throw config_error("model config: max_seq must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
};

// The full tensor set of a checkpoint is a pure function of the config.
inline std::vector<TensorSpec> canonical_manifest(const ModelConfig& cfg) {
  cfg.validate();
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  const auto t = static_cast<std::size_t>(cfg.max_seq);
  std::vector<TensorSpec> m;
  m.push_back({"tok_emb", {v, d}});
  m.push_back({"pos_emb", {t, d}});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    m.push_back({p + "attn_norm.gain", {d}});
    m.push_back({p + "attn.wq", {d, d}});
    m.push_back({p + "attn.wk", {d, d}});
    m.push_back({p + "attn.wv", {d, d}});
    m.push_back({p + "attn.wo", {d, d}});
    m.push_back({p + "mlp_norm.gain", {d}});
    m.push_back({p + "mlp.w1", {f, d}});
    m.push_back({p + "mlp.w2", {d, f}});
  }
  m.push_back({"final_norm.gain", {d}});
  m.push_back({"head.w", {v, d}});
  return m;
}

inline bool is_norm_gain(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
}

template <class S>
struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> names;      // canonical manifest order
  std::vector<TensorPtr<S>> tensors;   // aligned with names
  std::unordered_map<std::string, std::size_t> index;

  bool has(const std::string& name) const { return index.count(name) != 0; }

  const TensorPtr<S>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end())
      throw index_error("checkpoint: no tensor named " + name);
    return tensors[it->second];
  }

  TensorPtr<S>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end())
      throw index_error("checkpoint: no tensor named " + name);
    return tensors[it->second];
  }
};

// Sparse named deltas over a checkpoint; absent names mean zero.
template <class S>
struct DeltaSet {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<TensorPtr<S>> tensors;
  std::unordered_map<std::string, std::size_t> index;

  void add(const std::string& name, TensorPtr<S> t) {
    index.emplace(name, names.size());
    names.push_back(name);
    tensors.push_back(std::move(t));
  }

  const TensorPtr<S>* find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &tensors[it->second];
  }
};

template <class S>
Checkpoint<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Checkpoint<S> ckpt;
  ckpt.config = cfg;
  Rng rng(derive_seed(seed, 0x1417ull));
  for (const auto& spec : canonical_manifest(cfg)) {
    auto t = make_tensor<S>(spec.shape);
    if (is_norm_gain(spec.name)) {
      std::fill(t->data.begin(), t->data.end(), S(1));
    } else {
      for (auto& v : t->data) v = static_cast<S>(0.02 * rng.normal());
    }
    ckpt.index.emplace(spec.name, ckpt.names.size());
    ckpt.names.push_back(spec.name);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

template <class S>
Checkpoint<S> clone_checkpoint(const Checkpoint<S>& src,
                               bool requires_grad = false) {
  Checkpoint<S> out;
  out.config = src.config;
  out.names = src.names;
  out.index = src.index;
  out.tensors.reserve(src.tensors.size());
  for (const auto& t : src.tensors)
    out.tensors.push_back(clone_tensor(*t, requires_grad));
  return out;
}

template <class S>
std::uint64_t checkpoint_hash(const Checkpoint<S>& ckpt) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
    h = fnv1a64(ckpt.names[i].data(), ckpt.names[i].size(), h);
    h = fnv1a64(ckpt.tensors[i]->data.data(),
                ckpt.tensors[i]->data.size() * sizeof(S), h);
  }
  return h;
}

template <class S>
bool checkpoints_equal(const Checkpoint<S>& a, const Checkpoint<S>& b) {
  if (!(a.config == b.config) || a.names != b.names) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i)
    if (a.tensors[i]->data != b.tensors[i]->data) return false;
  return true;
}

}  // namespace gift
