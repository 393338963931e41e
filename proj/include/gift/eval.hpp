#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
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
#include "gift/train.hpp"
#include "gift/transformer.hpp"
#include "json.hpp"

namespace gift {

// Answer-span extraction: everything after the first occurrence of the
// marker token pair, up to (excluding) the first end-of-sequence token.
struct VerifySpec {
  std::vector<int> marker;  // defaults to the ids of "A:"
  int eos_id = 2;

  static VerifySpec standard() {
    const Vocab& v = Vocab::instance();
    return {{v.id('A'), v.id(':')}, v.eos()};
  }
};

// Exact-match verifier: extracted span must equal gold token-for-token; a
// missing marker verifies false. Total function, never throws.
inline bool verify(std::span<const int> output, std::span<const int> gold,
                   const VerifySpec& spec = VerifySpec::standard()) {
  if (spec.marker.empty() || output.size() < spec.marker.size()) return false;
  bool found = false;
  std::size_t start = 0;
  for (std::size_t i = 0; i + spec.marker.size() <= output.size() && !found; ++i) {
    bool hit = true;
    for (std::size_t j = 0; j < spec.marker.size(); ++j)
      if (output[i + j] != spec.marker[j]) {
        hit = false;
        break;
      }
    if (hit) {
      found = true;
      start = i + spec.marker.size();
    }
  }
  if (!found) return false;
  std::size_t end = start;
  while (end < output.size() && output[end] != spec.eos_id) ++end;
  if (end - start != gold.size()) return false;
  for (std::size_t j = 0; j < gold.size(); ++j)
    if (output[start + j] != gold[j]) return false;
  return true;
}

inline bool pass_at_n(const std::vector<bool>& bits) {
  if (bits.empty()) throw contract_error("pass_at_n: empty bit vector");
  for (bool b : bits)
    if (b) return true;
  return false;
}

inline double average_at_n(const std::vector<bool>& bits) {
  if (bits.empty()) throw contract_error("average_at_n: empty bit vector");
  std::size_t n = 0;
  for (bool b : bits) n += b ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(bits.size());
}

struct EvalProblem {
  std::string id;
  std::vector<int> prompt;
  std::vector<int> gold;
};

struct ProblemResult {
  std::string id;
  std::vector<std::vector<int>> outputs;
  std::vector<bool> bits;
};

struct EvalReport {
  std::vector<ProblemResult> per_problem;
  double average_at_n = 0.0;
  std::map<int, double> pass_at;  // k in {1, 2, 4, ..., N}
  double temperature = 1.0;
  int max_new = 16;
  int n_samples = 0;
  bool greedy = false;
  std::uint64_t seed = 0;
};

// N stochastic samples per problem with per-(problem, sample) derived
// seeds; growing N extends earlier sample sets instead of resampling them.
template <class S>
EvalReport evaluate_suite(const Checkpoint<S>& model,
                          const std::vector<EvalProblem>& testset, int n_samples,
                          double temperature, std::uint64_t seed,
                          int max_new = 16, bool greedy = false,
                          unsigned threads = 1,
                          const VerifySpec& vspec = VerifySpec::standard()) {
  if (n_samples < 1) throw contract_error("evaluate_suite: N must be >= 1");
  EvalReport report;
  report.temperature = temperature;
  report.max_new = max_new;
  report.n_samples = n_samples;
  report.greedy = greedy;
  report.seed = seed;
  report.per_problem.resize(testset.size());

  const std::size_t total =
      testset.size() * static_cast<std::size_t>(n_samples);
  std::vector<std::vector<int>> outputs(total);
  parallel_for(total, threads, [&](std::size_t flat) {
    const std::size_t p = flat / static_cast<std::size_t>(n_samples);
    const std::size_t i = flat % static_cast<std::size_t>(n_samples);
    SampleOpts so;
    so.temperature = temperature;
    so.max_new = max_new;
    so.greedy = greedy;
    so.eos_id = vspec.eos_id;
    // Seeds mix (run seed, problem id hash, sample index) so reports do not
    // depend on suite order and larger N extends earlier sample sets.
    const std::uint64_t pid =
        fnv1a64(testset[p].id.data(), testset[p].id.size());
    outputs[flat] =
        sample_sequence(model, testset[p].prompt, so, derive_seed(seed, pid, i));
  });

  double avg_sum = 0.0;
  std::vector<int> ks;
  for (int k = 1; k <= n_samples; k *= 2) ks.push_back(k);
  if (ks.back() != n_samples) ks.push_back(n_samples);
  std::map<int, double> pass_sum;
  for (int k : ks) pass_sum[k] = 0.0;

  for (std::size_t p = 0; p < testset.size(); ++p) {
    ProblemResult pr;
    pr.id = testset[p].id;
    for (int i = 0; i < n_samples; ++i) {
      auto& out = outputs[p * static_cast<std::size_t>(n_samples) +
                          static_cast<std::size_t>(i)];
      pr.bits.push_back(verify(out, testset[p].gold, vspec));
      pr.outputs.push_back(std::move(out));
    }
    avg_sum += average_at_n(pr.bits);
    for (int k : ks) {
      const std::vector<bool> prefix(pr.bits.begin(),
                                     pr.bits.begin() + k);
      pass_sum[k] += pass_at_n(prefix) ? 1.0 : 0.0;
    }
    report.per_problem[p] = std::move(pr);
  }
  const double np = static_cast<double>(testset.size());
  report.average_at_n = testset.empty() ? 0.0 : avg_sum / np;
  for (int k : ks)
    report.pass_at[k] = testset.empty() ? 0.0 : pass_sum[k] / np;
  return report;
}

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json per_problem = nlohmann::json::array();
  for (const auto& p : r.per_problem) {
    nlohmann::json bits = nlohmann::json::array();
    for (bool b : p.bits) bits.push_back(b ? 1 : 0);
    per_problem.push_back(
        {{"id", p.id}, {"bits", bits}, {"outputs", p.outputs}});
  }
  nlohmann::json pass = nlohmann::json::object();
  for (const auto& [k, v] : r.pass_at) pass[std::to_string(k)] = v;
  return {{"decode",
           {{"temperature", r.temperature},
            {"max_new", r.max_new},
            {"n_samples", r.n_samples},
            {"greedy", r.greedy},
            {"seed", r.seed}}},
          {"average_at_n", r.average_at_n},
          {"pass_at", pass},
          {"per_problem", per_problem}};
}

// Plot-data export: one "method,k,pass_at_k" row per sampling budget.
inline void write_pass_curve_csv(const std::string& path,
                                 const std::string& method,
                                 const EvalReport& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("write_pass_curve_csv: cannot open " + path);
  out << "method,n,pass_at_n\n";
  for (const auto& [k, v] : r.pass_at)
    out << method << "," << k << "," << v << "\n";
}

struct RedistributionBin {
  double lo = 0.0;  // exclusive
  double hi = 1.0;  // inclusive
  std::size_t token_count = 0;
  double mean_loss = 0.0;
  double sft_fraction = 0.0;   // sum(l_t) / sum_all(l_t)
  double gift_fraction = 0.0;  // sum(q_t * l_t) / sum_all(q_t * l_t)
};

struct RedistributionReport {
  std::vector<RedistributionBin> bins;
};

inline std::vector<std::pair<double, double>> bins_from_edges(
    const std::vector<double>& interior_edges) {
  std::vector<double> edges = interior_edges;
  std::sort(edges.begin(), edges.end());
  for (double e : edges)
    if (!(e > 0.0 && e < 1.0))
      throw config_error("redistribution: interior edges must lie in (0, 1)");
  std::vector<std::pair<double, double>> bins;
  double lo = 0.0;
  for (double e : edges) {
    bins.push_back({lo, e});
    lo = e;
  }
  bins.push_back({lo, 1.0});
  return bins;
}

// Bins the (q_t, l_t) stream of a loss report. Kept separate from the
// model pass so training-side reports can be binned identically.
inline RedistributionReport redistribution_from_report(
    const LossReport& lr, const std::vector<double>& interior_edges) {
  const auto spans = bins_from_edges(interior_edges);
  RedistributionReport report;
  report.bins.resize(spans.size());
  for (std::size_t b = 0; b < spans.size(); ++b) {
    report.bins[b].lo = spans[b].first;
    report.bins[b].hi = spans[b].second;
  }
  double sum_l = 0.0, sum_ql = 0.0;
  std::vector<double> bin_l(spans.size(), 0.0), bin_ql(spans.size(), 0.0);
  for (std::size_t t = 0; t < lr.per_token_loss.size(); ++t) {
    const double q = lr.weights[t];
    const double l = lr.per_token_loss[t];
    std::size_t b = spans.size() - 1;
    for (std::size_t i = 0; i < spans.size(); ++i)
      if (q <= spans[i].second) {
        b = i;
        break;
      }
    report.bins[b].token_count += 1;
    bin_l[b] += l;
    bin_ql[b] += q * l;
    sum_l += l;
    sum_ql += q * l;
  }
  for (std::size_t b = 0; b < spans.size(); ++b) {
    if (report.bins[b].token_count > 0)
      report.bins[b].mean_loss =
          bin_l[b] / static_cast<double>(report.bins[b].token_count);
    report.bins[b].sft_fraction = sum_l > 0.0 ? bin_l[b] / sum_l : 0.0;
    report.bins[b].gift_fraction = sum_ql > 0.0 ? bin_ql[b] / sum_ql : 0.0;
  }
  return report;
}

// Per confidence bin, the share of total learning signal under unweighted
// (l_t) and confidence-weighted (q_t * l_t) training. Losses come from the
// same per-token path the training objectives use.
template <class S>
RedistributionReport signal_redistribution(
    const Checkpoint<S>& base, const LoraAdapter<S>* adapter,
    const std::vector<AnnotatedExample>& annotated,
    const std::vector<double>& interior_edges) {
  if (annotated.empty())
    throw contract_error("signal_redistribution: empty annotated set");
  return redistribution_from_report(gift_loss<S>(base, adapter, annotated),
                                    interior_edges);
}

inline nlohmann::json redistribution_to_json(const RedistributionReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : r.bins)
    bins.push_back({{"lo", b.lo},
                    {"hi", b.hi},
                    {"token_count", b.token_count},
                    {"mean_loss", b.mean_loss},
                    {"sft_fraction", b.sft_fraction},
                    {"gift_fraction", b.gift_fraction}});
  return {{"bins", bins}};
}

}  // namespace gift
