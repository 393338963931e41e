#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gift/common.hpp"
#include "gift/rng.hpp"

namespace gift {

template <class S>
class Tape;

// Dense row-major tensor. grad is allocated lazily when the tensor first
// participates in a recorded operation with requires_grad set.
template <class S>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<S> data;
  std::vector<S> grad;
  bool requires_grad = false;
  const Tape<S>* tape = nullptr;  // tape the value was produced on, if any

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shp, S fill = S(0))
      : shape(std::move(shp)) {
    data.assign(numel_of(shape), fill);
  }
  Tensor(std::vector<std::size_t> shp, std::vector<S> values)
      : shape(std::move(shp)), data(std::move(values)) {
    if (data.size() != numel_of(shape))
      throw shape_error("tensor: data length does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& shp) {
    std::size_t n = 1;
    for (auto d : shp) n *= d;
    return n;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  S& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  S at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  void ensure_grad() {
    if (requires_grad && grad.size() != data.size())
      grad.assign(data.size(), S(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

template <class S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

template <class S>
TensorPtr<S> make_tensor(std::vector<std::size_t> shape, S fill = S(0)) {
  return std::make_shared<Tensor<S>>(std::move(shape), fill);
}

template <class S>
TensorPtr<S> make_tensor(std::vector<std::size_t> shape,
                         std::vector<S> values) {
  return std::make_shared<Tensor<S>>(std::move(shape), std::move(values));
}

template <class S>
TensorPtr<S> make_param(std::vector<std::size_t> shape, S fill = S(0)) {
  auto t = make_tensor<S>(std::move(shape), fill);
  t->requires_grad = true;
  return t;
}

template <class S>
TensorPtr<S> clone_tensor(const Tensor<S>& src, bool requires_grad) {
  auto t = std::make_shared<Tensor<S>>();
  t->shape = src.shape;
  t->data = src.data;
  t->requires_grad = requires_grad;
  return t;
}

// Records primitive operations in construction order, which is already a
// topological order; backward replays the list exactly once in reverse.
template <class S>
class Tape {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  std::size_t size() const { return ops_.size(); }

  void backward(const TensorPtr<S>& loss) {
    if (!loss || loss->numel() != 1)
      throw contract_error("backward: loss must be a scalar tensor");
    if (!loss->requires_grad || loss->tape != this)
      throw contract_error("backward: loss was not produced on this tape");
    loss->ensure_grad();
    loss->grad[0] = S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <class S>
void gemm_nn(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* __restrict__ arow = a + i * k;
    S* __restrict__ crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* __restrict__ brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <class S>
void gemm_nt(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* __restrict__ arow = a + i * k;
    S* __restrict__ crow = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const S* __restrict__ b0 = b + j * k;
      const S* __restrict__ b1 = b + (j + 1) * k;
      const S* __restrict__ b2 = b + (j + 2) * k;
      const S* __restrict__ b3 = b + (j + 3) * k;
      S a0 = S(0), a1 = S(0), a2 = S(0), a3 = S(0);
      for (std::size_t p = 0; p < k; ++p) {
        const S av = arow[p];
        a0 += av * b0[p];
        a1 += av * b1[p];
        a2 += av * b2[p];
        a3 += av * b3[p];
      }
      crow[j] += a0;
      crow[j + 1] += a1;
      crow[j + 2] += a2;
      crow[j + 3] += a3;
    }
    for (; j < n; ++j) {
      const S* __restrict__ brow = b + j * k;
      S acc = S(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <class S>
void gemm_tn(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const S* __restrict__ arow = a + p * m;
    const S* __restrict__ brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const S av = arow[i];
      S* __restrict__ crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class S>
void require_matrix(const TensorPtr<S>& t, const char* op) {
  if (!t || t->shape.size() != 2)
    throw shape_error(std::string(op) + ": operand must be a 2-D tensor");
}

template <class S>
bool grad_wanted(const Tape<S>* tape, const TensorPtr<S>& t) {
  return tape != nullptr && t->requires_grad;
}

template <class S>
TensorPtr<S> make_output(const Tape<S>* tape, std::vector<std::size_t> shape,
                         bool requires_grad) {
  auto out = make_tensor<S>(std::move(shape));
  out->requires_grad = requires_grad && tape != nullptr;
  out->tape = tape;
  if (out->requires_grad) out->ensure_grad();
  return out;
}

}  // namespace detail

template <class S>
TensorPtr<S> add(Tape<S>* tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  if (a->shape != b->shape) throw shape_error("add: shape mismatch");
  auto out = detail::make_output<S>(tape, a->shape,
                                    a->requires_grad || b->requires_grad);
  const std::size_t n = out->numel();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
  if (out->requires_grad) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    tape->record([a, b, out]() {
      const std::size_t n2 = out->numel();
      if (a->requires_grad)
        for (std::size_t i = 0; i < n2; ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < n2; ++i) b->grad[i] += out->grad[i];
    });
  }
  return out;
}

template <class S>
TensorPtr<S> sub(Tape<S>* tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  if (a->shape != b->shape) throw shape_error("sub: shape mismatch");
  auto out = detail::make_output<S>(tape, a->shape,
                                    a->requires_grad || b->requires_grad);
  const std::size_t n = out->numel();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] - b->data[i];
  if (out->requires_grad) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    tape->record([a, b, out]() {
      const std::size_t n2 = out->numel();
      if (a->requires_grad)
        for (std::size_t i = 0; i < n2; ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < n2; ++i) b->grad[i] -= out->grad[i];
    });
  }
  return out;
}

template <class S>
TensorPtr<S> mul(Tape<S>* tape, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  if (a->shape != b->shape) throw shape_error("mul: shape mismatch");
  auto out = detail::make_output<S>(tape, a->shape,
                                    a->requires_grad || b->requires_grad);
  const std::size_t n = out->numel();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
  if (out->requires_grad) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    tape->record([a, b, out]() {
      const std::size_t n2 = out->numel();
      if (a->requires_grad)
        for (std::size_t i = 0; i < n2; ++i)
          a->grad[i] += out->grad[i] * b->data[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < n2; ++i)
          b->grad[i] += out->grad[i] * a->data[i];
    });
  }
  return out;
}

template <class S>
TensorPtr<S> scale(Tape<S>* tape, const TensorPtr<S>& a, S c) {
  auto out = detail::make_output<S>(tape, a->shape, a->requires_grad);
  const std::size_t n = out->numel();
  for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] * c;
  if (out->requires_grad) {
    a->ensure_grad();
    tape->record([a, out, c]() {
      const std::size_t n2 = out->numel();
      for (std::size_t i = 0; i < n2; ++i) a->grad[i] += out->grad[i] * c;
    });
  }
  return out;
}

// Standard matrix product a[m x k] * b[k x n].
template <class S>
TensorPtr<S> matmul(Tape<S>* tape, const TensorPtr<S>& a,
                    const TensorPtr<S>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a->shape[0], k = a->shape[1];
  if (b->shape[0] != k) throw shape_error("matmul: inner dimensions disagree");
  const std::size_t n = b->shape[1];
  auto out = detail::make_output<S>(tape, {m, n},
                                    a->requires_grad || b->requires_grad);
  detail::gemm_nn(a->data.data(), b->data.data(), out->data.data(), m, k, n);
  if (out->requires_grad) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    tape->record([a, b, out, m, k, n]() {
      if (a->requires_grad)
        detail::gemm_nt(out->grad.data(), b->data.data(), a->grad.data(), m, n,
                        k);
      if (b->requires_grad)
        detail::gemm_tn(a->data.data(), out->grad.data(), b->grad.data(), k, m,
                        n);
    });
  }
  return out;
}

// a[m x k] * b[n x k]^T; the usual activation-times-weight product when
// weights are stored [out x in].
template <class S>
TensorPtr<S> matmul_nt(Tape<S>* tape, const TensorPtr<S>& a,
                       const TensorPtr<S>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a->shape[0], k = a->shape[1];
  if (b->shape[1] != k)
    throw shape_error("matmul_nt: inner dimensions disagree");
  const std::size_t n = b->shape[0];
  auto out = detail::make_output<S>(tape, {m, n},
                                    a->requires_grad || b->requires_grad);
  detail::gemm_nt(a->data.data(), b->data.data(), out->data.data(), m, k, n);
  if (out->requires_grad) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    tape->record([a, b, out, m, k, n]() {
      if (a->requires_grad)
        detail::gemm_nn(out->grad.data(), b->data.data(), a->grad.data(), m, n,
                        k);
      if (b->requires_grad)
        detail::gemm_tn(out->grad.data(), a->data.data(), b->grad.data(), n, m,
                        k);
    });
  }
  return out;
}

template <class S>
TensorPtr<S> embedding_rows(Tape<S>* tape, const TensorPtr<S>& table,
                            std::span<const int> ids) {
  detail::require_matrix(table, "embedding_rows");
  const std::size_t v = table->shape[0], d = table->shape[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw index_error("embedding_rows: token id out of range");
  auto out =
      detail::make_output<S>(tape, {ids.size(), d}, table->requires_grad);
  for (std::size_t t = 0; t < ids.size(); ++t)
    std::copy_n(table->data.data() + static_cast<std::size_t>(ids[t]) * d, d,
                out->data.data() + t * d);
  if (out->requires_grad) {
    table->ensure_grad();
    std::vector<int> idv(ids.begin(), ids.end());
    tape->record([table, out, idv, d]() {
      for (std::size_t t = 0; t < idv.size(); ++t) {
        S* dst = table->grad.data() + static_cast<std::size_t>(idv[t]) * d;
        const S* src = out->grad.data() + t * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> slice_rows(Tape<S>* tape, const TensorPtr<S>& x, std::size_t r0,
                        std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  if (r0 + count > x->shape[0]) throw shape_error("slice_rows: out of range");
  const std::size_t c = x->shape[1];
  auto out = detail::make_output<S>(tape, {count, c}, x->requires_grad);
  std::copy_n(x->data.data() + r0 * c, count * c, out->data.data());
  if (out->requires_grad) {
    x->ensure_grad();
    tape->record([x, out, r0, count, c]() {
      S* dst = x->grad.data() + r0 * c;
      const S* src = out->grad.data();
      for (std::size_t i = 0; i < count * c; ++i) dst[i] += src[i];
    });
  }
  return out;
}

template <class S>
TensorPtr<S> slice_cols(Tape<S>* tape, const TensorPtr<S>& x, std::size_t c0,
                        std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t r = x->shape[0], c = x->shape[1];
  if (c0 + count > c) throw shape_error("slice_cols: out of range");
  auto out = detail::make_output<S>(tape, {r, count}, x->requires_grad);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x->data.data() + i * c + c0, count,
                out->data.data() + i * count);
  if (out->requires_grad) {
    x->ensure_grad();
    tape->record([x, out, c0, count, r, c]() {
      for (std::size_t i = 0; i < r; ++i) {
        S* dst = x->grad.data() + i * c + c0;
        const S* src = out->grad.data() + i * count;
        for (std::size_t j = 0; j < count; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> concat_cols(Tape<S>* tape,
                         const std::vector<TensorPtr<S>>& parts) {
  if (parts.empty()) throw contract_error("concat_cols: empty input");
  const std::size_t r = parts[0]->shape[0];
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p->shape[0] != r) throw shape_error("concat_cols: row count mismatch");
    total += p->shape[1];
    rg = rg || p->requires_grad;
  }
  auto out = detail::make_output<S>(tape, {r, total}, rg);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p->shape[1];
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p->data.data() + i * c, c,
                  out->data.data() + i * total + off);
    off += c;
  }
  if (out->requires_grad) {
    for (const auto& p : parts)
      if (p->requires_grad) p->ensure_grad();
    auto parts_copy = parts;
    tape->record([parts_copy, out, r, total]() {
      std::size_t off2 = 0;
      for (const auto& p : parts_copy) {
        const std::size_t c = p->shape[1];
        if (p->requires_grad)
          for (std::size_t i = 0; i < r; ++i) {
            S* dst = p->grad.data() + i * c;
            const S* src = out->grad.data() + i * total + off2;
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
          }
        off2 += c;
      }
    });
  }
  return out;
}

// Row-stabilized softmax; each output row is nonnegative and sums to 1.
template <class S>
TensorPtr<S> softmax_rows(Tape<S>* tape, const TensorPtr<S>& x) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t r = x->shape[0], c = x->shape[1];
  auto out = detail::make_output<S>(tape, x->shape, x->requires_grad);
  for (std::size_t i = 0; i < r; ++i) {
    const S* xi = x->data.data() + i * c;
    S* oi = out->data.data() + i * c;
    S mx = xi[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    S sum = S(0);
    for (std::size_t j = 0; j < c; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      sum += oi[j];
    }
    const S inv = S(1) / sum;
    for (std::size_t j = 0; j < c; ++j) oi[j] *= inv;
  }
  if (out->requires_grad) {
    x->ensure_grad();
    tape->record([x, out, r, c]() {
      for (std::size_t i = 0; i < r; ++i) {
        const S* s = out->data.data() + i * c;
        const S* g = out->grad.data() + i * c;
        S dot = S(0);
        for (std::size_t j = 0; j < c; ++j) dot += s[j] * g[j];
        S* dx = x->grad.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) dx[j] += s[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> log_softmax_rows(Tape<S>* tape, const TensorPtr<S>& x) {
  detail::require_matrix(x, "log_softmax_rows");
  const std::size_t r = x->shape[0], c = x->shape[1];
  auto out = detail::make_output<S>(tape, x->shape, x->requires_grad);
  for (std::size_t i = 0; i < r; ++i) {
    const S* xi = x->data.data() + i * c;
    S* oi = out->data.data() + i * c;
    S mx = xi[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    S sum = S(0);
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(xi[j] - mx);
    const S lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) oi[j] = xi[j] - lse;
  }
  if (out->requires_grad) {
    x->ensure_grad();
    tape->record([x, out, r, c]() {
      for (std::size_t i = 0; i < r; ++i) {
        const S* lp = out->data.data() + i * c;
        const S* g = out->grad.data() + i * c;
        S gsum = S(0);
        for (std::size_t j = 0; j < c; ++j) gsum += g[j];
        S* dx = x->grad.data() + i * c;
        for (std::size_t j = 0; j < c; ++j)
          dx[j] += g[j] - std::exp(lp[j]) * gsum;
      }
    });
  }
  return out;
}

// Picks log_probs[t][targets[t]] per row; shape [T].
template <class S>
TensorPtr<S> gather_log_prob(Tape<S>* tape, const TensorPtr<S>& log_probs,
                             std::span<const int> targets) {
  detail::require_matrix(log_probs, "gather_log_prob");
  const std::size_t t = log_probs->shape[0], v = log_probs->shape[1];
  if (targets.size() != t)
    throw shape_error("gather_log_prob: one target per row required");
  for (int id : targets)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw index_error("gather_log_prob: target id out of vocabulary");
  auto out = detail::make_output<S>(tape, {t}, log_probs->requires_grad);
  for (std::size_t i = 0; i < t; ++i)
    out->data[i] = log_probs->data[i * v + static_cast<std::size_t>(targets[i])];
  if (out->requires_grad) {
    log_probs->ensure_grad();
    std::vector<int> tv(targets.begin(), targets.end());
    tape->record([log_probs, out, tv, v]() {
      for (std::size_t i = 0; i < tv.size(); ++i) {
        const S g = out->grad[i];
        if (g != S(0))
          log_probs->grad[i * v + static_cast<std::size_t>(tv[i])] += g;
      }
    });
  }
  return out;
}

inline constexpr double kRmsNormEps = 1e-5;

// y[i] = gain * x[i] / sqrt(mean(x[i]^2) + eps), rowwise.
template <class S>
TensorPtr<S> rms_norm(Tape<S>* tape, const TensorPtr<S>& x,
                      const TensorPtr<S>& gain) {
  detail::require_matrix(x, "rms_norm");
  const std::size_t r = x->shape[0], d = x->shape[1];
  if (gain->shape != std::vector<std::size_t>{d})
    throw shape_error("rms_norm: gain must match row width");
  auto out = detail::make_output<S>(tape, x->shape,
                                    x->requires_grad || gain->requires_grad);
  auto inv_rms = std::make_shared<std::vector<S>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const S* xi = x->data.data() + i * d;
    S ms = S(0);
    for (std::size_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
    ms = ms / static_cast<S>(d) + static_cast<S>(kRmsNormEps);
    const S inv = S(1) / std::sqrt(ms);
    (*inv_rms)[i] = inv;
    S* oi = out->data.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) oi[j] = gain->data[j] * xi[j] * inv;
  }
  if (out->requires_grad) {
    if (x->requires_grad) x->ensure_grad();
    if (gain->requires_grad) gain->ensure_grad();
    tape->record([x, gain, out, inv_rms, r, d]() {
      for (std::size_t i = 0; i < r; ++i) {
        const S inv = (*inv_rms)[i];
        const S* xi = x->data.data() + i * d;
        const S* gi = out->grad.data() + i * d;
        if (gain->requires_grad)
          for (std::size_t j = 0; j < d; ++j)
            gain->grad[j] += gi[j] * xi[j] * inv;
        if (x->requires_grad) {
          // u = dy .* gain; dx = inv*u - x * inv^3/d * <u, x>
          S dot = S(0);
          for (std::size_t j = 0; j < d; ++j)
            dot += gi[j] * gain->data[j] * xi[j];
          const S k = inv * inv * inv * dot / static_cast<S>(d);
          S* dx = x->grad.data() + i * d;
          for (std::size_t j = 0; j < d; ++j)
            dx[j] += gi[j] * gain->data[j] * inv - xi[j] * k;
        }
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> silu(Tape<S>* tape, const TensorPtr<S>& x) {
  auto out = detail::make_output<S>(tape, x->shape, x->requires_grad);
  const std::size_t n = out->numel();
  for (std::size_t i = 0; i < n; ++i) {
    const S v = x->data[i];
    const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                            : std::exp(v) / (S(1) + std::exp(v));
    out->data[i] = v * sig;
  }
  if (out->requires_grad) {
    x->ensure_grad();
    tape->record([x, out]() {
      const std::size_t n2 = out->numel();
      for (std::size_t i = 0; i < n2; ++i) {
        const S v = x->data[i];
        const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                                : std::exp(v) / (S(1) + std::exp(v));
        x->grad[i] += out->grad[i] * (sig * (S(1) + v * (S(1) - sig)));
      }
    });
  }
  return out;
}

// Inverted dropout on the adapter path; identity when p == 0.
template <class S>
TensorPtr<S> dropout(Tape<S>* tape, const TensorPtr<S>& x, double p,
                     Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw contract_error("dropout: p must be below 1");
  auto out = detail::make_output<S>(tape, x->shape, x->requires_grad);
  const std::size_t n = out->numel();
  auto mask = std::make_shared<std::vector<S>>(n);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < n; ++i) {
    (*mask)[i] = rng.uniform() < p ? S(0) : keep_scale;
    out->data[i] = x->data[i] * (*mask)[i];
  }
  if (out->requires_grad) {
    x->ensure_grad();
    tape->record([x, out, mask]() {
      const std::size_t n2 = out->numel();
      for (std::size_t i = 0; i < n2; ++i)
        x->grad[i] += out->grad[i] * (*mask)[i];
    });
  }
  return out;
}

template <class S>
TensorPtr<S> sum_all(Tape<S>* tape, const TensorPtr<S>& x) {
  auto out = detail::make_output<S>(tape, {std::size_t(1)}, x->requires_grad);
  S acc = S(0);
  for (const S v : x->data) acc += v;
  out->data[0] = acc;
  if (out->requires_grad) {
    x->ensure_grad();
    tape->record([x, out]() {
      const S g = out->grad[0];
      const std::size_t n = x->numel();
      for (std::size_t i = 0; i < n; ++i) x->grad[i] += g;
    });
  }
  return out;
}

}  // namespace gift
