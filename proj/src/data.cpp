#include "gift/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>

#include "gift/rng.hpp"
#include "json.hpp"

namespace gift {

Vocab::Vocab() {
  const std::string printable = "0123456789+-*=%QA:?. abcdefgh";
  symbols_.push_back('\0');  // PAD
  symbols_.push_back('\1');  // BOS
  symbols_.push_back('\2');  // EOS
  for (char c : printable) symbols_.push_back(c);
  std::fill(std::begin(char_to_id_), std::end(char_to_id_), -1);
  for (int i = 3; i < static_cast<int>(symbols_.size()); ++i)
    char_to_id_[static_cast<unsigned char>(symbols_[static_cast<std::size_t>(i)])] = i;
}

const Vocab& Vocab::instance() {
  static const Vocab v;
  return v;
}

int Vocab::id(char symbol) const {
  const int i = char_to_id_[static_cast<unsigned char>(symbol)];
  if (i < 0) throw index_error(std::string("vocab: unknown symbol '") + symbol + "'");
  return i;
}

char Vocab::symbol(int id) const {
  if (id < 0 || id >= size()) throw index_error("vocab: id out of range");
  return symbols_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(id(c));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids, bool show_special) const {
  std::string out;
  for (int i : ids) {
    if (is_special(i)) {
      if (show_special) out += (i == 0 ? "<pad>" : i == 1 ? "<bos>" : "<eos>");
      continue;
    }
    out += symbol(i);
  }
  return out;
}

std::string Vocab::token_class(int id) const {
  if (is_digit(id)) return "digit";
  if (is_letter(id)) return "letter";
  if (is_operator(id)) return "operator";
  if (is_marker(id)) return "marker";
  if (is_special(id)) return "special";
  throw index_error("vocab: id out of range");
}

namespace {

std::string digits_of(long v) { return std::to_string(v); }

void validate(const TaskSpec& spec) {
  if (spec.operand_lo > spec.operand_hi)
    throw config_error("task spec: empty operand range");
  if (spec.filler_rate < 0.0 || spec.filler_rate >= 1.0)
    throw config_error("task spec: filler_rate must lie in [0, 1)");
  if (spec.n_train < 0 || spec.n_test < 0)
    throw config_error("task spec: negative split count");
  if (spec.max_seq < 2) throw config_error("task spec: max_seq too small");
}

// One true arithmetic equation, e.g. "12+34=46.". Addition and subtraction
// run over the full operand range (a >= b for subtraction so results stay
// nonnegative); plain multiplication uses small factors. The modular
// reduction of the downstream task never appears here.
std::string base_equation(Rng& rng, const TaskSpec& spec) {
  const double roll = rng.uniform();
  if (roll < 1.0 / 3.0) {
    const long lo = std::max<long>(2, spec.operand_lo);
    const long hi = std::max(lo, std::min<long>(12, spec.operand_hi));
    const long a = rng.uniform_int(lo, hi);
    const long b = rng.uniform_int(lo, hi);
    return digits_of(a) + "*" + digits_of(b) + "=" + digits_of(a * b) + ".";
  }
  long a = rng.uniform_int(spec.operand_lo, spec.operand_hi);
  long b = rng.uniform_int(spec.operand_lo, spec.operand_hi);
  const bool plus = roll < 2.0 / 3.0;
  if (!plus && b > a) std::swap(a, b);
  const long c = plus ? a + b : a - b;
  return digits_of(a) + (plus ? "+" : "-") + digits_of(b) + "=" + digits_of(c) + ".";
}

}  // namespace

std::vector<std::vector<int>> gen_base_corpus(const TaskSpec& spec,
                                              std::uint64_t seed) {
  validate(spec);
  const Vocab& vocab = Vocab::instance();
  Rng rng(derive_seed(seed, 0xba5eull));
  std::vector<std::vector<int>> chunks;
  std::vector<int> pending;
  const std::size_t chunk_len = static_cast<std::size_t>(spec.max_seq);
  while (chunks.size() < static_cast<std::size_t>(spec.n_train)) {
    const std::vector<int> eq = vocab.encode(base_equation(rng, spec));
    pending.insert(pending.end(), eq.begin(), eq.end());
    while (pending.size() >= chunk_len &&
           chunks.size() < static_cast<std::size_t>(spec.n_train)) {
      chunks.emplace_back(pending.begin(),
                          pending.begin() + static_cast<std::ptrdiff_t>(chunk_len));
      pending.erase(pending.begin(),
                    pending.begin() + static_cast<std::ptrdiff_t>(chunk_len));
    }
  }
  return chunks;
}

std::pair<std::vector<Example>, std::vector<Example>> gen_instruct_corpus(
    const TaskSpec& spec, std::uint64_t seed) {
  validate(spec);
  const Vocab& vocab = Vocab::instance();
  // Problem space mirrors the pretraining families: addition, subtraction
  // (a >= b), and small-factor multiplication. Modular reduction is absent.
  // Families are drawn round-robin so multiplication keeps a full share
  // despite its much smaller problem space.
  struct Problem {
    long a, b;
    char op;
  };
  std::vector<std::vector<Problem>> families(3);
  for (long a = spec.operand_lo; a <= spec.operand_hi; ++a)
    for (long b = spec.operand_lo; b <= spec.operand_hi; ++b) {
      families[0].push_back({a, b, '+'});
      if (a >= b) families[1].push_back({a, b, '-'});
    }
  const long mul_lo = std::max<long>(2, spec.operand_lo);
  const long mul_hi = std::max(mul_lo, std::min<long>(12, spec.operand_hi));
  for (long a = mul_lo; a <= mul_hi; ++a)
    for (long b = mul_lo; b <= mul_hi; ++b) families[2].push_back({a, b, '*'});

  const std::size_t need =
      static_cast<std::size_t>(spec.n_train) + static_cast<std::size_t>(spec.n_test);
  std::size_t space_size = 0;
  Rng rng(derive_seed(seed, 0x1257ull));
  for (auto& family : families) {
    space_size += family.size();
    for (std::size_t i = family.size(); i > 1; --i)
      std::swap(family[i - 1],
                family[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);
  }
  if (space_size < need)
    throw config_error("instruct corpus: problem space smaller than requested splits");

  auto build = [&](const Problem& p) {
    Example ex;
    const long c = p.op == '+' ? p.a + p.b : p.op == '-' ? p.a - p.b : p.a * p.b;
    ex.prompt = vocab.encode("Q:" + digits_of(p.a) + std::string(1, p.op) +
                             digits_of(p.b) + "? A:");
    ex.target = vocab.encode(digits_of(c) + ".");
    ex.target.push_back(vocab.eos());
    if (ex.prompt.size() + ex.target.size() > static_cast<std::size_t>(spec.max_seq))
      throw config_error("instruct corpus: example exceeds max_seq");
    return ex;
  };

  std::pair<std::vector<Example>, std::vector<Example>> out;
  std::array<std::size_t, 3> cursor = {0, 0, 0};
  std::size_t family_idx = 0;
  auto next_example = [&]() {
    for (int attempts = 0; attempts < 3; ++attempts) {
      const std::size_t f = family_idx;
      family_idx = (family_idx + 1) % 3;
      if (cursor[f] < families[f].size()) return build(families[f][cursor[f]++]);
    }
    throw config_error("instruct corpus: exhausted problem space");
  };
  for (int i = 0; i < spec.n_train; ++i) out.first.push_back(next_example());
  for (int i = 0; i < spec.n_test; ++i) out.second.push_back(next_example());
  return out;
}

std::pair<std::vector<DownstreamProblem>, std::vector<DownstreamProblem>>
gen_downstream(const TaskSpec& spec, std::uint64_t seed) {
  validate(spec);
  if (spec.mod_lo < 2 || spec.mod_lo > spec.mod_hi)
    throw config_error("downstream: invalid modulus range");
  const Vocab& vocab = Vocab::instance();
  struct Problem {
    long a, b, m;
  };
  std::vector<Problem> space;
  for (long a = spec.operand_lo; a <= spec.operand_hi; ++a)
    for (long b = spec.operand_lo; b <= spec.operand_hi; ++b)
      for (long m = spec.mod_lo; m <= spec.mod_hi; ++m) space.push_back({a, b, m});
  const std::size_t need =
      static_cast<std::size_t>(spec.n_train) + static_cast<std::size_t>(spec.n_test);
  if (space.size() < need)
    throw config_error("downstream: problem space smaller than requested splits");
  Rng rng(derive_seed(seed, 0xd0d0ull));
  for (std::size_t i = space.size(); i > 1; --i)
    std::swap(space[i - 1],
              space[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);

  auto build = [&](const Problem& p, bool with_filler, Rng& frng) {
    DownstreamProblem dp;
    const long prod = p.a * p.b;
    const long r = prod % p.m;
    if (r != ((p.a % p.m) * (p.b % p.m)) % p.m)
      throw numeric_error("downstream: generated congruence is false");
    dp.example.prompt = vocab.encode("Q:" + digits_of(p.a) + "*" + digits_of(p.b) +
                                     "%" + digits_of(p.m) + "? A:");
    // Intermediate product digits, then the final answer digits. Both spans
    // are plain digit runs, so every essential token stays on-distribution
    // for the instruction teacher; filler letters are the only
    // low-confidence channel.
    dp.gold = vocab.encode(digits_of(prod) + digits_of(r) + ".");
    std::vector<int> target;
    for (int tok : dp.gold) {
      if (with_filler && frng.uniform() < spec.filler_rate)
        target.push_back(vocab.id(static_cast<char>('a' + frng.uniform_int(0, 7))));
      target.push_back(tok);
    }
    target.push_back(vocab.eos());
    dp.example.target = std::move(target);
    if (dp.example.prompt.size() + dp.example.target.size() >
        static_cast<std::size_t>(spec.max_seq))
      throw config_error("downstream: example exceeds max_seq");
    return dp;
  };

  std::pair<std::vector<DownstreamProblem>, std::vector<DownstreamProblem>> out;
  for (std::size_t i = 0; i < static_cast<std::size_t>(spec.n_train); ++i) {
    Rng frng(derive_seed(seed, 0xf111ull, i));
    out.first.push_back(build(space[i], true, frng));
  }
  for (std::size_t i = 0; i < static_cast<std::size_t>(spec.n_test); ++i) {
    Rng frng(derive_seed(seed, 0xf222ull, i));
    out.second.push_back(
        build(space[static_cast<std::size_t>(spec.n_train) + i], false, frng));
  }
  return out;
}

std::vector<int> teacher_view_prompt(const std::vector<int>& prompt) {
  const Vocab& vocab = Vocab::instance();
  const int pct = vocab.id('%');
  const int qmark = vocab.id('?');
  std::vector<int> out;
  out.reserve(prompt.size());
  bool dropping = false;
  for (int tok : prompt) {
    if (tok == pct) {
      dropping = true;
      continue;
    }
    if (dropping) {
      if (tok == qmark) dropping = false;
      else continue;
    }
    out.push_back(tok);
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<Example>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("write_jsonl: cannot open " + path);
  nlohmann::json header = {{"schema", kDataSchema},
                           {"vocab_size", Vocab::instance().size()}};
  out << header.dump() << "\n";
  for (const auto& r : records) {
    nlohmann::json line = {{"prompt", r.prompt}, {"target", r.target}};
    out << line.dump() << "\n";
  }
  if (!out) throw io_error("write_jsonl: write failed for " + path);
}

std::vector<Example> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("read_jsonl: cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  auto parse = [&](const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded())
      throw schema_error("read_jsonl: malformed JSON at line " +
                         std::to_string(lineno) + " of " + path);
    return j;
  };
  if (!std::getline(in, line))
    throw schema_error("read_jsonl: missing header line in " + path);
  ++lineno;
  nlohmann::json header = parse(line);
  if (!header.contains("schema") || header["schema"] != kDataSchema)
    throw schema_error("read_jsonl: expected schema " + std::string(kDataSchema) +
                       " in " + path);
  std::vector<Example> records;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = parse(line);
    if (!j.contains("prompt") || !j.contains("target"))
      throw schema_error("read_jsonl: missing fields at line " +
                         std::to_string(lineno) + " of " + path);
    Example ex;
    ex.prompt = j["prompt"].get<std::vector<int>>();
    ex.target = j["target"].get<std::vector<int>>();
    records.push_back(std::move(ex));
  }
  return records;
}

}  // namespace gift
