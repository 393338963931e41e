#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gift/common.hpp"

namespace gift {

// Closed character-level vocabulary, 32 symbols. Ids are frozen:
//   0 PAD, 1 BOS, 2 EOS, 3..12 '0'..'9', 13 '+', 14 '-', 15 '*', 16 '=',
//   17 '%', 18 'Q', 19 'A', 20 ':', 21 '?', 22 '.', 23 ' ', 24..31 'a'..'h'.
// '*' renders multiplication and '%' renders the modulus operator.
class Vocab {
 public:
  static const Vocab& instance();

  int size() const { return static_cast<int>(symbols_.size()); }
  int pad() const { return 0; }
  int bos() const { return 1; }
  int eos() const { return 2; }

  int id(char symbol) const;
  char symbol(int id) const;

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids,
                     bool show_special = false) const;

  bool is_digit(int id) const { return id >= 3 && id <= 12; }
  bool is_letter(int id) const { return id >= 24 && id <= 31; }
  bool is_operator(int id) const { return id >= 13 && id <= 17; }
  bool is_marker(int id) const { return id >= 18 && id <= 23; }
  bool is_special(int id) const { return id >= 0 && id <= 2; }

  // Total classifier over the vocabulary: digit/letter/operator/marker/special.
  std::string token_class(int id) const;

 private:
  Vocab();
  std::vector<char> symbols_;
  int char_to_id_[256];
};

enum class TaskKind { base_stream, instruct_qa, downstream_mod_mul };

struct TaskSpec {
  TaskKind kind = TaskKind::instruct_qa;
  int operand_lo = 0;
  int operand_hi = 49;
  int mod_lo = 3;    // downstream only
  int mod_hi = 14;   // downstream only
  double filler_rate = 0.0;
  int n_train = 0;
  int n_test = 0;
  std::uint64_t seed = 0;
  int max_seq = 64;
};

struct Example {
  std::vector<int> prompt;
  std::vector<int> target;
};

// Raw next-token stream for stage-1 pretraining, cut into max_seq chunks.
std::vector<std::vector<int>> gen_base_corpus(const TaskSpec& spec,
                                              std::uint64_t seed);

// "Q:a+b? A:" -> "c." formatted pairs; returns {train, test} splits with
// disjoint (a, op, b) problems.
std::pair<std::vector<Example>, std::vector<Example>> gen_instruct_corpus(
    const TaskSpec& spec, std::uint64_t seed);

struct DownstreamProblem {
  Example example;        // training view (filler possibly inserted)
  std::vector<int> gold;  // clean verification span: product '=' answer '.'
};

// Modular-multiplication task "Q:a*b%m? A:" -> "p=r." with filler letters
// inserted into train targets at filler_rate; test targets stay clean.
std::pair<std::vector<DownstreamProblem>, std::vector<DownstreamProblem>>
gen_downstream(const TaskSpec& spec, std::uint64_t seed);

// Teacher-template prompt view: the downstream task extends the teacher's
// question format with a modulus clause the teacher has never seen.
// Annotating under the teacher's own template drops that clause, mirroring
// how a real teacher would reformat inputs with its chat template.
std::vector<int> teacher_view_prompt(const std::vector<int>& prompt);

// JSONL dataset IO. Schema "gift-data-v1": header line
//   {"schema":"gift-data-v1","vocab_size":V}
// then one {"prompt":[...],"target":[...]} object per line.
inline constexpr const char* kDataSchema = "gift-data-v1";

void write_jsonl(const std::string& path, const std::vector<Example>& records);
std::vector<Example> read_jsonl(const std::string& path);

}  // namespace gift
