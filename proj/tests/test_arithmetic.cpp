#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "gift/arithmetic.hpp"
#include "gift/transformer.hpp"
#include "test_util.hpp"

using namespace gift;
using gift_test::rel_err;

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

// Independent oracle: singular values of M are the square roots of the
// eigenvalues of M^T M, computed by a classical two-sided Jacobi
// eigensolver (a different algorithm from the shipped one-sided SVD).
std::vector<double> singular_values_via_eig(const TensorPtr<double>& m) {
  const std::size_t p = m->shape[0], q = m->shape[1];
  std::vector<double> a(q * q, 0.0);
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < p; ++r)
        acc += m->data[r * q + i] * m->data[r * q + j];
      a[i * q + j] = acc;
    }
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t j = i + 1; j < q; ++j)
        off = std::max(off, std::abs(a[i * q + j]));
    if (off < 1e-13) break;
    for (std::size_t i = 0; i + 1 < q; ++i)
      for (std::size_t j = i + 1; j < q; ++j) {
        if (std::abs(a[i * q + j]) < 1e-300) continue;
        const double theta = (a[j * q + j] - a[i * q + i]) / (2.0 * a[i * q + j]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t r = 0; r < q; ++r) {
          const double ari = a[r * q + i], arj = a[r * q + j];
          a[r * q + i] = c * ari - s * arj;
          a[r * q + j] = s * ari + c * arj;
        }
        for (std::size_t r = 0; r < q; ++r) {
          const double air = a[i * q + r], ajr = a[j * q + r];
          a[i * q + r] = c * air - s * ajr;
          a[j * q + r] = s * air + c * ajr;
        }
      }
  }
  std::vector<double> out(q);
  for (std::size_t i = 0; i < q; ++i) out[i] = std::sqrt(std::max(0.0, a[i * q + i]));
  std::sort(out.rbegin(), out.rend());
  return out;
}

double fro_norm(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("extract_delta basics") {
  const auto cfg = tiny_config();
  auto x = init_params<double>(cfg, 1);
  auto zero = extract_delta(x, x);
  for (const auto& t : zero.tensors)
    for (double v : t->data) CHECK(v == 0.0);

  ModelConfig other = cfg;
  other.d_ff = 64;
  auto y = init_params<double>(other, 1);
  CHECK_THROWS_AS(extract_delta(x, y), config_error);
}

TEST_CASE("apply_linear reproduces the inverse pair bitwise in wide mode") {
  const auto cfg = tiny_config();
  // Float32-precision values inside doubles, matching what wide mode sees
  // after loading serialized checkpoints.
  auto quantize = [](Checkpoint<double>& c) {
    for (auto& t : c.tensors)
      for (auto& v : t->data) v = static_cast<double>(static_cast<float>(v));
  };
  auto base = init_params<double>(cfg, 11);
  auto other = init_params<double>(cfg, 12);
  quantize(base);
  quantize(other);
  auto delta = extract_delta(other, base);
  auto rebuilt = apply_linear<double>(base, {{1.0, &delta}});
  CHECK(checkpoints_equal(rebuilt, other));

  auto copy = apply_linear<double>(base, {});
  CHECK(checkpoints_equal(copy, base));

  auto half_half = apply_linear<double>(base, {{0.5, &delta}, {0.5, &delta}});
  auto full = apply_linear<double>(base, {{1.0, &delta}});
  for (std::size_t i = 0; i < full.tensors.size(); ++i)
    for (std::size_t j = 0; j < full.tensors[i]->numel(); ++j)
      CHECK(std::abs(half_half.tensors[i]->data[j] - full.tensors[i]->data[j]) <
            1e-12);
}

TEST_CASE("truncated_svd on a diagonal matrix") {
  auto m = make_tensor<double>({3, 3});
  m->data[0] = 3.0;
  m->data[4] = 2.0;
  m->data[8] = 1.0;
  auto f = truncated_svd(m, 2);
  CHECK(f.s[0] == doctest::Approx(3.0).epsilon(1e-10));
  CHECK(f.s[1] == doctest::Approx(2.0).epsilon(1e-10));
  auto recon = svd_reconstruct(f);
  double err2 = 0.0;
  for (std::size_t i = 0; i < 9; ++i) {
    const double d = recon->data[i] - m->data[i];
    err2 += d * d;
  }
  CHECK(err2 == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("truncated_svd full rank reconstructs, truncation matches tail energy") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t p = 2 + rng.next_u64() % 15;
    const std::size_t q = 2 + rng.next_u64() % 15;
    auto m = gift_test::random_tensor<double>({p, q}, rng);
    const std::size_t kmax = std::min(p, q);

    auto full = truncated_svd(m, kmax);
    auto recon = svd_reconstruct(full);
    std::vector<double> diff(m->numel());
    for (std::size_t i = 0; i < m->numel(); ++i)
      diff[i] = recon->data[i] - m->data[i];
    CHECK(fro_norm(diff) / fro_norm(m->data) < 1e-8);

    // Orthonormal columns.
    for (std::size_t c1 = 0; c1 < kmax; ++c1)
      for (std::size_t c2 = c1; c2 < kmax; ++c2) {
        double du = 0.0, dv = 0.0;
        for (std::size_t r = 0; r < p; ++r)
          du += full.u->data[r * kmax + c1] * full.u->data[r * kmax + c2];
        for (std::size_t r = 0; r < q; ++r)
          dv += full.v->data[r * kmax + c1] * full.v->data[r * kmax + c2];
        const double want = c1 == c2 ? 1.0 : 0.0;
        CHECK(std::abs(du - want) < 1e-8);
        CHECK(std::abs(dv - want) < 1e-8);
      }

    if (kmax >= 2) {
      const std::size_t k = 1 + rng.next_u64() % (kmax - 1);
      auto part = truncated_svd(m, k);
      for (std::size_t i = 0; i < k; ++i)
        CHECK(std::abs(part.s[i] - full.s[i]) < 1e-8);
      auto approx = svd_reconstruct(part);
      double resid2 = 0.0;
      for (std::size_t i = 0; i < m->numel(); ++i) {
        const double d = m->data[i] - approx->data[i];
        resid2 += d * d;
      }
      double tail2 = 0.0;
      for (std::size_t i = k; i < kmax; ++i) tail2 += full.s[i] * full.s[i];
      if (tail2 > 1e-12) CHECK(rel_err(resid2, tail2) < 1e-8);
    }
  }
}

TEST_CASE("singular values match the independent eigendecomposition oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t p = 2 + rng.next_u64() % 7;
    const std::size_t q = 2 + rng.next_u64() % 7;
    auto m = gift_test::random_tensor<double>({p, q}, rng);
    auto f = truncated_svd(m, std::min(p, q));
    const auto oracle = singular_values_via_eig(m);
    for (std::size_t i = 0; i < f.s.size(); ++i)
      CHECK(rel_err(f.s[i], oracle[i]) < 1e-6);
  }
}

TEST_CASE("truncated_svd validates its rank argument") {
  Rng rng(3);
  auto m = gift_test::random_tensor<double>({4, 6}, rng);
  CHECK_THROWS_AS(truncated_svd(m, 0), contract_error);
  CHECK_THROWS_AS(truncated_svd(m, 5), contract_error);
}

TEST_CASE("U-column sign convention is reproducible") {
  Rng rng(23);
  auto m = gift_test::random_tensor<double>({5, 4}, rng);
  auto f = truncated_svd(m, 4);
  for (std::size_t c = 0; c < 4; ++c) {
    double first = 0.0;
    for (std::size_t r = 0; r < 5 && first == 0.0; ++r) first = f.u->data[r * 4 + c];
    CHECK(first >= 0.0);
  }
}

TEST_CASE("shadow_ft merge equals apply_linear of the materialized delta") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 61);
  auto instruct = init_params<double>(cfg, 62);
  auto ad = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.0, 63);
  Rng rng(64);
  for (auto& f : ad.factors)
    for (auto& v : f.b->data) v = 0.02 * rng.normal();

  auto merged = build_merged(MergeRecipe::make(RecipeKind::shadow_ft), base,
                             instruct, ad);
  auto delta = materialize_delta(ad);
  auto reference = apply_linear<double>(instruct, {{1.0, &delta}});
  CHECK(checkpoints_equal(merged, reference));
  CHECK(checkpoints_equal(merged, merge_into(instruct, ad)));

  // gift shares the arithmetic.
  auto merged_gift =
      build_merged(MergeRecipe::make(RecipeKind::gift), base, instruct, ad);
  CHECK(checkpoints_equal(merged, merged_gift));

  // Fresh adapter: merge returns the instruct checkpoint.
  auto fresh = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.0, 1);
  CHECK(checkpoints_equal(
      build_merged(MergeRecipe::make(RecipeKind::shadow_ft), base, instruct, fresh),
      instruct));
}

TEST_CASE("re_adapt with coefficients (1, 0) reproduces the instruct model") {
  const auto cfg = tiny_config();
  auto quantize = [](Checkpoint<double>& c) {
    for (auto& t : c.tensors)
      for (auto& v : t->data) v = static_cast<double>(static_cast<float>(v));
  };
  auto base = init_params<double>(cfg, 71);
  auto instruct = init_params<double>(cfg, 72);
  quantize(base);
  quantize(instruct);
  auto ad = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.0, 73);
  Rng rng(74);
  for (auto& f : ad.factors)
    for (auto& v : f.b->data) v = 0.02 * rng.normal();

  MergeRecipe recipe = MergeRecipe::make(RecipeKind::re_adapt);
  CHECK(recipe.lambda_instr == 0.5);
  CHECK(recipe.lambda_task == 0.5);
  recipe.lambda_instr = 1.0;
  recipe.lambda_task = 0.0;
  auto merged = build_merged(recipe, base, instruct, ad);
  CHECK(checkpoints_equal(merged, instruct));
}

TEST_CASE("full-rank lore_adapt matches re_adapt on forward logits") {
  const auto cfg = tiny_config();
  auto base = init_params<double>(cfg, 81);
  auto instruct = init_params<double>(cfg, 82);
  auto ad = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.0, 83);
  Rng rng(84);
  for (auto& f : ad.factors)
    for (auto& v : f.b->data) v = 0.02 * rng.normal();

  MergeRecipe lore = MergeRecipe::make(RecipeKind::lore_adapt);
  CHECK_THROWS_AS(build_merged(lore, base, instruct, ad), config_error);
  lore.svd_rank = cfg.d_model;  // clamped per tensor; full rank everywhere
  lore.lambda_task = 0.5;
  MergeRecipe re = MergeRecipe::make(RecipeKind::re_adapt);
  re.lambda_instr = 1.0;
  re.lambda_task = 0.5;

  auto a = build_merged(lore, base, instruct, ad);
  auto b = build_merged(re, base, instruct, ad);
  std::vector<int> tokens = {1, 2, 3, 4, 5, 6};
  auto la = forward_logits(a, tokens);
  auto lb = forward_logits(b, tokens);
  for (std::size_t i = 0; i < la->numel(); ++i)
    CHECK(std::abs(la->data[i] - lb->data[i]) < 1e-6);

  // Per-tensor Frobenius agreement with lambda_task = 0.
  lore.lambda_task = 0.0;
  auto c = build_merged(lore, base, instruct, ad);
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < c.tensors[i]->numel(); ++j) {
      const double d = c.tensors[i]->data[j] - instruct.tensors[i]->data[j];
      num += d * d;
      den += instruct.tensors[i]->data[j] * instruct.tensors[i]->data[j];
    }
    CHECK(std::sqrt(num) <= 1e-6 * std::max(1.0, std::sqrt(den)));
  }
}

TEST_CASE("scaling adapter B by powers of two scales the task delta exactly") {
  const auto cfg = tiny_config();
  auto ad = init_adapter<double>(cfg, default_lora_targets(cfg), 4, 8.0, 0.0, 91);
  Rng rng(92);
  for (auto& f : ad.factors)
    for (auto& v : f.b->data) v = 0.02 * rng.normal();
  auto delta = materialize_delta(ad);
  for (double c : {2.0, 0.5}) {
    auto scaled = clone_adapter(ad);
    for (auto& f : scaled.factors)
      for (auto& v : f.b->data) v *= c;
    auto sdelta = materialize_delta(scaled);
    for (std::size_t i = 0; i < delta.tensors.size(); ++i)
      for (std::size_t j = 0; j < delta.tensors[i]->numel(); ++j)
        CHECK(sdelta.tensors[i]->data[j] == c * delta.tensors[i]->data[j]);
  }
  // Arbitrary scalars hold to rounding.
  auto scaled = clone_adapter(ad);
  for (auto& f : scaled.factors)
    for (auto& v : f.b->data) v *= 3.0;
  auto sdelta = materialize_delta(scaled);
  for (std::size_t i = 0; i < delta.tensors.size(); ++i)
    for (std::size_t j = 0; j < delta.tensors[i]->numel(); ++j)
      CHECK(rel_err(sdelta.tensors[i]->data[j], 3.0 * delta.tensors[i]->data[j]) <
            1e-12);
}
