#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "gift/common.hpp"
#include "gift/data.hpp"
#include "gift/model.hpp"
#include "gift/parallel.hpp"
#include "gift/transformer.hpp"
#include "json.hpp"

namespace gift {

// (x, y, q): per-target-token teacher confidence alongside the tokens.
struct AnnotatedExample {
  std::vector<int> prompt;
  std::vector<int> target;
  std::vector<double> q;  // each in (0, 1], recorded at float32 precision
};

inline constexpr const char* kAnnotatedSchema = "gift-annotated-v1";

// How the teacher sees prompts during annotation. `shared` scores targets
// under the student's exact prompt; `teacher_template` first reformats the
// prompt with the teacher's own template (the chat-template convention).
enum class PromptView { shared, teacher_template };

inline const char* prompt_view_name(PromptView v) {
  return v == PromptView::shared ? "shared" : "teacher_template";
}

// q_t = teacher probability of target token t given prompt and preceding
// target tokens; one forward pass per example, no gradients recorded.
template <class S>
std::vector<AnnotatedExample> annotate_dataset(const Checkpoint<S>& teacher,
                                               const std::vector<Example>& data,
                                               unsigned threads = 1,
                                               PromptView view = PromptView::shared) {
  const std::size_t vocab = static_cast<std::size_t>(teacher.config.vocab_size);
  std::vector<AnnotatedExample> out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t idx) {
    const Example& ex = data[idx];
    if (ex.prompt.empty())
      throw contract_error("annotate: empty prompt at example " +
                           std::to_string(idx));
    if (ex.target.empty())
      throw contract_error("annotate: empty target at example " +
                           std::to_string(idx));
    std::vector<int> seq = view == PromptView::teacher_template
                               ? teacher_view_prompt(ex.prompt)
                               : ex.prompt;
    const std::size_t prompt_len = seq.size();
    seq.insert(seq.end(), ex.target.begin(), ex.target.end());
    if (seq.size() > static_cast<std::size_t>(teacher.config.max_seq))
      throw contract_error("annotate: example " + std::to_string(idx) +
                           " exceeds max_seq; refusing to truncate");
    TensorPtr<S> logits = forward_logits(teacher, seq);
    AnnotatedExample ann;
    ann.prompt = ex.prompt;
    ann.target = ex.target;
    ann.q.resize(ex.target.size());
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      const S* row = logits->data.data() + (prompt_len - 1 + t) * vocab;
      S mx = row[0];
      for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
      const S prob =
          std::exp(row[static_cast<std::size_t>(ex.target[t])] - mx) / sum;
      // Keep q strictly positive even if the exponential underflows, and
      // quantize to float32, which is the serialized precision.
      const float q32 = std::max(static_cast<float>(prob),
                                 std::numeric_limits<float>::min());
      ann.q[t] = static_cast<double>(q32);
    }
    out[idx] = std::move(ann);
  });
  return out;
}

// GIFT-BaseT: the base model itself supplies the confidence scores.
template <class S>
std::vector<AnnotatedExample> annotate_with_base(const Checkpoint<S>& base,
                                                 const std::vector<Example>& data,
                                                 unsigned threads = 1,
                                                 PromptView view = PromptView::shared) {
  return annotate_dataset(base, data, threads, view);
}

struct AnnotationStats {
  double q_mean = 0.0;
  std::size_t token_count = 0;
  std::map<double, double> frac_ge;
  std::map<double, double> frac_lt;
};

inline AnnotationStats confidence_stats(
    const std::vector<AnnotatedExample>& annotated,
    const std::vector<double>& ge_thresholds,
    const std::vector<double>& lt_thresholds) {
  AnnotationStats stats;
  double sum = 0.0;
  for (const auto& ex : annotated) {
    for (double q : ex.q) sum += q;
    stats.token_count += ex.q.size();
  }
  if (stats.token_count == 0)
    throw contract_error("confidence_stats: no annotated tokens");
  stats.q_mean = sum / static_cast<double>(stats.token_count);
  for (double t : ge_thresholds) {
    std::size_t n = 0;
    for (const auto& ex : annotated)
      for (double q : ex.q) n += (q >= t) ? 1 : 0;
    stats.frac_ge[t] = static_cast<double>(n) / static_cast<double>(stats.token_count);
  }
  for (double t : lt_thresholds) {
    std::size_t n = 0;
    for (const auto& ex : annotated)
      for (double q : ex.q) n += (q < t) ? 1 : 0;
    stats.frac_lt[t] = static_cast<double>(n) / static_cast<double>(stats.token_count);
  }
  return stats;
}

struct ClassShare {
  double overall = 0.0;
  double high_confidence = 0.0;
  double enrichment = 0.0;
};

struct TokenClassShares {
  std::map<std::string, ClassShare> shares;
  double q_threshold = 0.0;
  bool undefined_high = false;  // no token reached the threshold
};

inline TokenClassShares token_class_shares(
    const std::vector<AnnotatedExample>& annotated,
    const std::function<std::string(int)>& classifier, double q_threshold) {
  TokenClassShares out;
  out.q_threshold = q_threshold;
  std::map<std::string, std::size_t> all_counts, high_counts;
  std::size_t all_total = 0, high_total = 0;
  for (const auto& ex : annotated) {
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      const std::string cls = classifier(ex.target[t]);
      ++all_counts[cls];
      ++all_total;
      if (ex.q[t] >= q_threshold) {
        ++high_counts[cls];
        ++high_total;
      }
    }
  }
  if (all_total == 0)
    throw contract_error("token_class_shares: no annotated tokens");
  out.undefined_high = high_total == 0;
  for (const auto& [cls, n] : all_counts) {
    ClassShare share;
    share.overall = static_cast<double>(n) / static_cast<double>(all_total);
    if (!out.undefined_high) {
      const auto it = high_counts.find(cls);
      const std::size_t hn = it == high_counts.end() ? 0 : it->second;
      share.high_confidence =
          static_cast<double>(hn) / static_cast<double>(high_total);
      share.enrichment = share.high_confidence / share.overall;
    }
    out.shares[cls] = share;
  }
  return out;
}

struct AnnotationReport {
  double wall_seconds = 0.0;
  std::size_t examples = 0;
  std::size_t tokens = 0;
  std::size_t output_bytes = 0;
};

inline nlohmann::json annotation_report_to_json(const AnnotationReport& r) {
  return {{"wall_seconds", r.wall_seconds},
          {"examples", r.examples},
          {"tokens", r.tokens},
          {"output_bytes", r.output_bytes}};
}

inline AnnotationReport annotation_report_from_json(const nlohmann::json& j) {
  AnnotationReport r;
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.examples = j.at("examples").get<std::size_t>();
  r.tokens = j.at("tokens").get<std::size_t>();
  r.output_bytes = j.at("output_bytes").get<std::size_t>();
  return r;
}

// Annotated dataset IO. Header line {"schema","vocab_size","teacher_id"},
// then {"prompt","target","q"} per line; q carries float32 precision.
inline void write_annotated_jsonl(const std::string& path,
                                  const std::vector<AnnotatedExample>& records,
                                  const std::string& teacher_id) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("write_annotated_jsonl: cannot open " + path);
  nlohmann::json header = {{"schema", kAnnotatedSchema},
                           {"vocab_size", Vocab::instance().size()},
                           {"teacher_id", teacher_id}};
  out << header.dump() << "\n";
  for (const auto& r : records) {
    nlohmann::json line = {
        {"prompt", r.prompt}, {"target", r.target}, {"q", r.q}};
    out << line.dump() << "\n";
  }
  if (!out) throw io_error("write_annotated_jsonl: write failed for " + path);
}

struct AnnotatedFile {
  std::string teacher_id;
  std::vector<AnnotatedExample> records;
};

inline AnnotatedFile read_annotated_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("read_annotated_jsonl: cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  auto parse = [&](const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded())
      throw schema_error("read_annotated_jsonl: malformed JSON at line " +
                         std::to_string(lineno) + " of " + path);
    return j;
  };
  if (!std::getline(in, line))
    throw schema_error("read_annotated_jsonl: missing header in " + path);
  ++lineno;
  nlohmann::json header = parse(line);
  if (!header.contains("schema") || header["schema"] != kAnnotatedSchema)
    throw schema_error("read_annotated_jsonl: expected schema " +
                       std::string(kAnnotatedSchema) + " in " + path);
  AnnotatedFile out;
  out.teacher_id = header.value("teacher_id", std::string());
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = parse(line);
    if (!j.contains("prompt") || !j.contains("target") || !j.contains("q"))
      throw schema_error("read_annotated_jsonl: missing fields at line " +
                         std::to_string(lineno) + " of " + path);
    AnnotatedExample ex;
    ex.prompt = j["prompt"].get<std::vector<int>>();
    ex.target = j["target"].get<std::vector<int>>();
    ex.q = j["q"].get<std::vector<double>>();
    if (ex.q.size() != ex.target.size())
      throw schema_error("read_annotated_jsonl: q/target length mismatch at line " +
                         std::to_string(lineno) + " of " + path);
    out.records.push_back(std::move(ex));
  }
  return out;
}

}  // namespace gift
