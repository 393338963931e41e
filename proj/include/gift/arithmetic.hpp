#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gift/adapter.hpp"
#include "gift/common.hpp"
#include "gift/model.hpp"
#include "gift/tensor.hpp"

namespace gift {

// a - b per tensor; dense over the full manifest.
template <class S>
DeltaSet<S> extract_delta(const Checkpoint<S>& a, const Checkpoint<S>& b) {
  if (!(a.config == b.config))
    throw config_error("extract_delta: checkpoint configs differ");
  DeltaSet<S> out;
  out.config = a.config;
  for (std::size_t i = 0; i < a.names.size(); ++i) {
    const auto& ta = a.tensors[i];
    const auto& tb = b.at(a.names[i]);
    auto d = make_tensor<S>(ta->shape);
    for (std::size_t j = 0; j < d->data.size(); ++j)
      d->data[j] = ta->data[j] - tb->data[j];
    out.add(a.names[i], std::move(d));
  }
  return out;
}

// base + sum_i coef_i * delta_i, accumulated left to right per element so
// exactness claims about particular term lists are testable.
template <class S>
Checkpoint<S> apply_linear(
    const Checkpoint<S>& base,
    const std::vector<std::pair<double, const DeltaSet<S>*>>& terms) {
  Checkpoint<S> out = clone_checkpoint(base);
  for (const auto& [coef, delta] : terms) {
    if (delta == nullptr) throw contract_error("apply_linear: null delta");
    if (!(delta->config == base.config))
      throw config_error("apply_linear: delta config differs from base");
    const S c = static_cast<S>(coef);
    for (std::size_t i = 0; i < delta->names.size(); ++i) {
      auto& w = out.at(delta->names[i]);
      const auto& d = delta->tensors[i];
      if (w->shape != d->shape)
        throw shape_error("apply_linear: shape mismatch on " + delta->names[i]);
      for (std::size_t j = 0; j < w->data.size(); ++j)
        w->data[j] += c * d->data[j];
    }
  }
  return out;
}

template <class S>
struct TruncatedSvd {
  TensorPtr<S> u;        // [p x k], orthonormal columns
  std::vector<S> s;      // length k, nonincreasing, nonnegative
  TensorPtr<S> v;        // [q x k], orthonormal columns
};

namespace detail {

// One-sided Jacobi on the columns of w (p x q, p >= q), accumulating the
// right rotations into v. Converges when every column pair is orthogonal
// to within tol relative to the column norms.
inline bool jacobi_sweep(std::vector<double>& w, std::vector<double>& v,
                         std::size_t p, std::size_t q, double tol) {
  bool rotated = false;
  for (std::size_t i = 0; i + 1 < q; ++i) {
    for (std::size_t j = i + 1; j < q; ++j) {
      double aii = 0.0, ajj = 0.0, aij = 0.0;
      for (std::size_t r = 0; r < p; ++r) {
        const double wi = w[r * q + i], wj = w[r * q + j];
        aii += wi * wi;
        ajj += wj * wj;
        aij += wi * wj;
      }
      if (std::abs(aij) <= tol * std::sqrt(aii * ajj)) continue;
      rotated = true;
      const double tau = (ajj - aii) / (2.0 * aij);
      const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                       (std::abs(tau) + std::sqrt(1.0 + tau * tau));
      const double cs = 1.0 / std::sqrt(1.0 + t * t);
      const double sn = cs * t;
      for (std::size_t r = 0; r < p; ++r) {
        const double wi = w[r * q + i], wj = w[r * q + j];
        w[r * q + i] = cs * wi - sn * wj;
        w[r * q + j] = sn * wi + cs * wj;
      }
      for (std::size_t r = 0; r < q; ++r) {
        const double vi = v[r * q + i], vj = v[r * q + j];
        v[r * q + i] = cs * vi - sn * vj;
        v[r * q + j] = sn * vi + cs * vj;
      }
    }
  }
  return rotated;
}

}  // namespace detail

inline constexpr double kSvdTol = 1e-12;
inline constexpr int kSvdMaxSweeps = 60;

// Rank-k SVD via cyclic one-sided Jacobi, computed in double regardless of
// the scalar width. U-column signs are fixed so the first nonzero entry of
// each left singular vector is nonnegative.
template <class S>
TruncatedSvd<S> truncated_svd(const TensorPtr<S>& m, std::size_t k) {
  detail::require_matrix(m, "truncated_svd");
  const std::size_t p0 = m->shape[0], q0 = m->shape[1];
  if (k < 1 || k > std::min(p0, q0))
    throw contract_error("truncated_svd: rank out of range");

  const bool transposed = p0 < q0;
  const std::size_t p = transposed ? q0 : p0;
  const std::size_t q = transposed ? p0 : q0;

  std::vector<double> w(p * q);
  if (transposed) {
    for (std::size_t i = 0; i < p0; ++i)
      for (std::size_t j = 0; j < q0; ++j)
        w[j * q + i] = static_cast<double>(m->data[i * q0 + j]);
  } else {
    for (std::size_t i = 0; i < p * q; ++i)
      w[i] = static_cast<double>(m->data[i]);
  }
  std::vector<double> v(q * q, 0.0);
  for (std::size_t i = 0; i < q; ++i) v[i * q + i] = 1.0;

  int sweep = 0;
  while (detail::jacobi_sweep(w, v, p, q, kSvdTol)) {
    if (++sweep >= kSvdMaxSweeps)
      throw numeric_error("truncated_svd: Jacobi sweeps did not converge");
  }

  std::vector<double> sigma(q);
  for (std::size_t j = 0; j < q; ++j) {
    double ss = 0.0;
    for (std::size_t r = 0; r < p; ++r) ss += w[r * q + j] * w[r * q + j];
    sigma[j] = std::sqrt(ss);
  }
  std::vector<std::size_t> order(q);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  auto u_out = make_tensor<S>({p0, k});
  auto v_out = make_tensor<S>({q0, k});
  std::vector<S> s_out(k);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t j = order[c];
    const double sv = sigma[j];
    s_out[c] = static_cast<S>(sv);
    std::vector<double> ucol(p, 0.0);
    if (sv > 0.0)
      for (std::size_t r = 0; r < p; ++r) ucol[r] = w[r * q + j] / sv;
    std::vector<double> vcol(q);
    for (std::size_t r = 0; r < q; ++r) vcol[r] = v[r * q + j];
    // Left singular vectors of the original matrix fix the sign convention.
    std::vector<double>& left = transposed ? vcol : ucol;
    double first = 0.0;
    for (double val : left)
      if (val != 0.0) {
        first = val;
        break;
      }
    if (first < 0.0) {
      for (auto& val : ucol) val = -val;
      for (auto& val : vcol) val = -val;
    }
    const std::vector<double>& orig_u = transposed ? vcol : ucol;
    const std::vector<double>& orig_v = transposed ? ucol : vcol;
    for (std::size_t r = 0; r < orig_u.size(); ++r)
      u_out->data[r * k + c] = static_cast<S>(orig_u[r]);
    for (std::size_t r = 0; r < orig_v.size(); ++r)
      v_out->data[r * k + c] = static_cast<S>(orig_v[r]);
  }
  return {std::move(u_out), std::move(s_out), std::move(v_out)};
}

// U * diag(S) * V^T for a factorization produced by truncated_svd.
template <class S>
TensorPtr<S> svd_reconstruct(const TruncatedSvd<S>& f) {
  const std::size_t p = f.u->shape[0], k = f.u->shape[1], q = f.v->shape[0];
  auto out = make_tensor<S>({p, q});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      const S us = f.u->data[i * k + c] * f.s[c];
      for (std::size_t j = 0; j < q; ++j)
        out->data[i * q + j] += us * f.v->data[j * k + c];
    }
  return out;
}

enum class RecipeKind { shadow_ft, re_adapt, lore_adapt, gift };

inline const char* recipe_name(RecipeKind k) {
  switch (k) {
    case RecipeKind::shadow_ft: return "shadow_ft";
    case RecipeKind::re_adapt: return "re_adapt";
    case RecipeKind::lore_adapt: return "lore_adapt";
    case RecipeKind::gift: return "gift";
  }
  return "?";
}

struct MergeRecipe {
  RecipeKind kind = RecipeKind::gift;
  double lambda_instr = 1.0;
  double lambda_task = 1.0;
  std::optional<int> svd_rank;  // required for lore_adapt

  static MergeRecipe make(RecipeKind kind) {
    MergeRecipe r;
    r.kind = kind;
    if (kind == RecipeKind::re_adapt) {
      r.lambda_instr = 0.5;
      r.lambda_task = 0.5;
    }
    return r;
  }

  void validate() const {
    if (kind == RecipeKind::lore_adapt && !svd_rank.has_value())
      throw config_error("merge recipe: lore_adapt requires svd_rank");
    if (svd_rank.has_value() && *svd_rank < 1)
      throw config_error("merge recipe: svd_rank must be >= 1");
  }
};

// Replaces every matrix in delta by its rank-k approximation; the rank is
// clamped per tensor; 1-D tensors pass through untruncated.
template <class S>
DeltaSet<S> lowrank_delta(const DeltaSet<S>& delta, int rank) {
  DeltaSet<S> out;
  out.config = delta.config;
  for (std::size_t i = 0; i < delta.names.size(); ++i) {
    const auto& t = delta.tensors[i];
    if (t->shape.size() != 2) {
      out.add(delta.names[i], clone_tensor(*t, false));
      continue;
    }
    const std::size_t k = std::min<std::size_t>(
        static_cast<std::size_t>(rank), std::min(t->shape[0], t->shape[1]));
    out.add(delta.names[i], svd_reconstruct(truncated_svd(t, k)));
  }
  return out;
}

// The four merge recipes. shadow_ft and gift share the arithmetic; they
// differ only in how the adapter was trained.
template <class S>
Checkpoint<S> build_merged(const MergeRecipe& recipe, const Checkpoint<S>& base,
                           const Checkpoint<S>& instruct,
                           const LoraAdapter<S>& adapter) {
  recipe.validate();
  if (!(base.config == instruct.config) || !(base.config == adapter.config))
    throw config_error("build_merged: configs disagree");
  const DeltaSet<S> task = materialize_delta(adapter);
  switch (recipe.kind) {
    case RecipeKind::shadow_ft:
    case RecipeKind::gift:
      return apply_linear<S>(instruct, {{1.0, &task}});
    case RecipeKind::re_adapt: {
      const DeltaSet<S> instr = extract_delta(instruct, base);
      return apply_linear<S>(
          base, {{recipe.lambda_instr, &instr}, {recipe.lambda_task, &task}});
    }
    case RecipeKind::lore_adapt: {
      const DeltaSet<S> instr =
          lowrank_delta(extract_delta(instruct, base), *recipe.svd_rank);
      return apply_linear<S>(
          base, {{recipe.lambda_task, &task}, {recipe.lambda_instr, &instr}});
    }
  }
  throw contract_error("build_merged: unknown recipe kind");
}

}  // namespace gift
