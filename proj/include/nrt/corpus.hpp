#pragma once

/**
 * Vocabularies, question-answer pairs, and synthetic task generators.
 *
 * All tasks share one vocabulary: four reserved control tokens at fixed ids
 * 0..3 followed by the task alphabet. Generators are pure functions of their
 * TaskSpec; the same spec always yields a byte-identical dataset.
 *
 * Tasks:
 *  - skewed-difficulty: answer = E trivially predictable tokens (copies of
 *    the question's first symbol) followed by one hard token, the symbol-sum
 *    of the question mod m. Built so that easy tokens dominate any per-token
 *    average while the hard token is only predictable from a trace that
 *    re-derives the sum.
 *  - lookup-chain: question encodes a value table over the whole alphabet
 *    plus a start key; the answer is the value reached after following the
 *    chain `depth` hops. Intermediate hops are useful trace content.
 *  - modular-addition: answer is the single sum-mod-m token.
 */

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nrt/rng.hpp"

namespace nrt {

using TokenId = int;

struct Vocabulary {
  static constexpr TokenId kStartThink = 0;
  static constexpr TokenId kEndThink = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kEos = 3;
  static constexpr int kReservedCount = 4;

  int alphabet = 0;  // number of task symbols

  int size() const { return alphabet + kReservedCount; }
  bool is_reserved(TokenId t) const { return t >= 0 && t < kReservedCount; }
  bool is_valid(TokenId t) const { return t >= 0 && t < size(); }

  // i-th task symbol, i in [0, alphabet).
  TokenId symbol(int i) const { return kReservedCount + i; }
  // Inverse of symbol(); -1 for reserved/out-of-range ids.
  int symbol_index(TokenId t) const {
    return (t >= kReservedCount && t < size()) ? t - kReservedCount : -1;
  }
  std::vector<TokenId> symbol_ids() const {
    std::vector<TokenId> ids(static_cast<std::size_t>(alphabet));
    for (int i = 0; i < alphabet; ++i) ids[static_cast<std::size_t>(i)] = symbol(i);
    return ids;
  }

  std::string glyph(TokenId t) const {
    switch (t) {
      case kStartThink: return "<t>";
      case kEndThink: return "</t>";
      case kSep: return "|";
      case kEos: return "$";
      default: break;
    }
    int i = symbol_index(t);
    if (i < 0) throw std::invalid_argument("glyph: token id out of range");
    if (i < 26) return std::string(1, static_cast<char>('a' + i));
    return "s" + std::to_string(i);
  }

  std::optional<TokenId> token_from_glyph(std::string_view g) const {
    if (g == "<t>") return kStartThink;
    if (g == "</t>") return kEndThink;
    if (g == "|") return kSep;
    if (g == "$") return kEos;
    if (g.size() == 1 && g[0] >= 'a' && g[0] <= 'z') {
      int i = g[0] - 'a';
      if (i < alphabet) return symbol(i);
      return std::nullopt;
    }
    if (g.size() > 1 && g[0] == 's') {
      int i = 0;
      for (char ch : g.substr(1)) {
        if (ch < '0' || ch > '9') return std::nullopt;
        i = i * 10 + (ch - '0');
      }
      if (i >= 26 && i < alphabet) return symbol(i);
    }
    return std::nullopt;
  }
};

inline Vocabulary build_vocabulary(int alphabet_size) {
  if (alphabet_size < 2) throw std::invalid_argument("build_vocabulary: alphabet_size must be >= 2");
  Vocabulary v;
  v.alphabet = alphabet_size;
  return v;
}

struct QAPair {
  std::vector<TokenId> question;
  std::vector<TokenId> answer;  // length T >= 1
};

struct Dataset {
  Vocabulary vocab;
  std::vector<QAPair> pairs;
  std::size_t train_count = 0;  // pairs[0..train_count) train, rest eval

  std::size_t size() const { return pairs.size(); }
  std::size_t eval_count() const { return pairs.size() - train_count; }
  const QAPair& train_pair(std::size_t i) const { return pairs[i]; }
  const QAPair& eval_pair(std::size_t i) const { return pairs[train_count + i]; }
};

enum class TaskKind { SkewedDifficulty, LookupChain, ModularAddition };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::SkewedDifficulty: return "skewed";
    case TaskKind::LookupChain: return "lookup";
    case TaskKind::ModularAddition: return "modadd";
  }
  return "?";
}

inline std::optional<TaskKind> parse_task(std::string_view s) {
  if (s == "skewed" || s == "skewed-difficulty") return TaskKind::SkewedDifficulty;
  if (s == "lookup" || s == "lookup-chain") return TaskKind::LookupChain;
  if (s == "modadd" || s == "modular-addition") return TaskKind::ModularAddition;
  return std::nullopt;
}

struct TaskSpec {
  TaskKind kind = TaskKind::SkewedDifficulty;
  int alphabet = 3;
  int question_len = 2;      // skewed, modadd
  int easy_tokens = 3;       // E, skewed only
  int hard_tokens = 1;       // skewed only; must be 1
  int modulus = 3;           // skewed, modadd
  int chain_depth = 2;       // lookup only
  double train_fraction = 0.8;
  std::uint64_t seed = 1;
};

namespace detail {

inline void validate_common(const TaskSpec& spec) {
  if (spec.alphabet < 2) throw std::invalid_argument("task spec: alphabet must be >= 2");
  if (spec.train_fraction < 0.0 || spec.train_fraction > 1.0)
    throw std::invalid_argument("task spec: train_fraction must be in [0,1]");
}

inline std::size_t train_split(const TaskSpec& spec, std::size_t n) {
  return static_cast<std::size_t>(static_cast<double>(n) * spec.train_fraction + 0.5);
}

}  // namespace detail

inline Dataset generate_skewed_difficulty(const TaskSpec& spec, std::size_t n) {
  detail::validate_common(spec);
  if (spec.kind != TaskKind::SkewedDifficulty)
    throw std::invalid_argument("generate_skewed_difficulty: wrong task kind");
  if (spec.easy_tokens < 1) throw std::invalid_argument("skewed task: easy_tokens must be >= 1");
  if (spec.hard_tokens != 1) throw std::invalid_argument("skewed task: exactly 1 hard token");
  if (spec.question_len < 1) throw std::invalid_argument("skewed task: question_len must be >= 1");
  if (spec.modulus < 1 || spec.modulus > spec.alphabet)
    throw std::invalid_argument("skewed task: modulus must be in [1, alphabet]");

  Dataset d;
  d.vocab = build_vocabulary(spec.alphabet);
  d.pairs.reserve(n);
  auto rng = RngStream::derive(spec.seed, RngPurpose::ParamInit, {0x5ce});
  for (std::size_t i = 0; i < n; ++i) {
    QAPair p;
    p.question.resize(static_cast<std::size_t>(spec.question_len));
    int sum = 0;
    for (auto& q : p.question) {
      int sym = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.alphabet)));
      sum += sym;
      q = d.vocab.symbol(sym);
    }
    const int first = d.vocab.symbol_index(p.question.front());
    p.answer.assign(static_cast<std::size_t>(spec.easy_tokens), d.vocab.symbol(first));
    p.answer.push_back(d.vocab.symbol(sum % spec.modulus));
    d.pairs.push_back(std::move(p));
  }
  d.train_count = detail::train_split(spec, n);
  return d;
}

inline Dataset generate_lookup_chain(const TaskSpec& spec, std::size_t n) {
  detail::validate_common(spec);
  if (spec.kind != TaskKind::LookupChain)
    throw std::invalid_argument("generate_lookup_chain: wrong task kind");
  if (spec.chain_depth < 1) throw std::invalid_argument("lookup task: chain_depth must be >= 1");

  Dataset d;
  d.vocab = build_vocabulary(spec.alphabet);
  d.pairs.reserve(n);
  auto rng = RngStream::derive(spec.seed, RngPurpose::ParamInit, {0x10c});
  const int a = spec.alphabet;
  std::vector<int> table(static_cast<std::size_t>(a));
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : table) v = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(a)));
    const int start = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(a)));
    QAPair p;
    p.question.reserve(static_cast<std::size_t>(a) + 1);
    // Position-coded table: question[i] is the value of key i, then the start key.
    for (int k = 0; k < a; ++k) p.question.push_back(d.vocab.symbol(table[static_cast<std::size_t>(k)]));
    p.question.push_back(d.vocab.symbol(start));
    int cur = start;
    for (int hop = 0; hop < spec.chain_depth; ++hop) cur = table[static_cast<std::size_t>(cur)];
    p.answer.push_back(d.vocab.symbol(cur));
    d.pairs.push_back(std::move(p));
  }
  d.train_count = detail::train_split(spec, n);
  return d;
}

inline Dataset generate_modular_addition(const TaskSpec& spec, std::size_t n) {
  detail::validate_common(spec);
  if (spec.kind != TaskKind::ModularAddition)
    throw std::invalid_argument("generate_modular_addition: wrong task kind");
  if (spec.question_len < 1) throw std::invalid_argument("modadd task: question_len must be >= 1");
  if (spec.modulus < 1 || spec.modulus > spec.alphabet)
    throw std::invalid_argument("modadd task: modulus must be in [1, alphabet]");

  Dataset d;
  d.vocab = build_vocabulary(spec.alphabet);
  d.pairs.reserve(n);
  auto rng = RngStream::derive(spec.seed, RngPurpose::ParamInit, {0x30d});
  for (std::size_t i = 0; i < n; ++i) {
    QAPair p;
    p.question.resize(static_cast<std::size_t>(spec.question_len));
    int sum = 0;
    for (auto& q : p.question) {
      int sym = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.alphabet)));
      sum += sym;
      q = d.vocab.symbol(sym);
    }
    p.answer.push_back(d.vocab.symbol(sum % spec.modulus));
    d.pairs.push_back(std::move(p));
  }
  d.train_count = detail::train_split(spec, n);
  return d;
}

inline Dataset generate_dataset(const TaskSpec& spec, std::size_t n) {
  switch (spec.kind) {
    case TaskKind::SkewedDifficulty: return generate_skewed_difficulty(spec, n);
    case TaskKind::LookupChain: return generate_lookup_chain(spec, n);
    case TaskKind::ModularAddition: return generate_modular_addition(spec, n);
  }
  throw std::invalid_argument("generate_dataset: unknown task kind");
}

// ---------------------------------------------------------------------------
// Dataset files: one pair per line, `question<TAB>answer`, glyphs
// space-separated, '#' starts a comment. Header comments carry the alphabet
// size and the train split so a round trip is identity.
// ---------------------------------------------------------------------------

struct DatasetIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void serialize_dataset(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DatasetIoError("cannot open for writing: " + path);
  out << "# alphabet " << d.vocab.alphabet << "\n";
  out << "# train " << d.train_count << "\n";
  for (const auto& p : d.pairs) {
    for (std::size_t i = 0; i < p.question.size(); ++i) {
      if (i) out << ' ';
      out << d.vocab.glyph(p.question[i]);
    }
    out << '\t';
    for (std::size_t i = 0; i < p.answer.size(); ++i) {
      if (i) out << ' ';
      out << d.vocab.glyph(p.answer[i]);
    }
    out << '\n';
  }
  if (!out) throw DatasetIoError("write failed: " + path);
}

namespace detail {

inline std::vector<TokenId> parse_glyphs(const Vocabulary& vocab, std::string_view text,
                                         std::size_t line_no) {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) {
      std::string_view g = text.substr(i, j - i);
      auto tok = vocab.token_from_glyph(g);
      if (!tok)
        throw DatasetIoError("line " + std::to_string(line_no) + ": unknown glyph '" +
                             std::string(g) + "'");
      if (vocab.is_reserved(*tok))
        throw DatasetIoError("line " + std::to_string(line_no) + ": reserved token '" +
                             std::string(g) + "' not allowed in a pair");
      out.push_back(*tok);
    }
    i = j;
  }
  return out;
}

}  // namespace detail

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DatasetIoError("cannot open for reading: " + path);

  std::vector<std::string> data_lines;
  std::vector<std::size_t> data_line_nos;
  int alphabet = -1;
  long long train = -1;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string key;
      hs >> key;
      if (key == "alphabet") hs >> alphabet;
      else if (key == "train") hs >> train;
      continue;
    }
    data_lines.push_back(line);
    data_line_nos.push_back(line_no);
  }

  Dataset d;
  if (alphabet < 0) {
    // Headerless files: infer the alphabet from the largest glyph seen.
    int max_sym = 1;
    for (const auto& l : data_lines)
      for (char ch : l)
        if (ch >= 'a' && ch <= 'z') max_sym = std::max(max_sym, ch - 'a');
    d.vocab = build_vocabulary(max_sym + 1);
  } else {
    d.vocab = build_vocabulary(std::max(alphabet, 2));
  }

  for (std::size_t i = 0; i < data_lines.size(); ++i) {
    const std::string& l = data_lines[i];
    const std::size_t no = data_line_nos[i];
    const std::size_t tab = l.find('\t');
    if (tab == std::string::npos)
      throw DatasetIoError("line " + std::to_string(no) + ": missing question/answer separator");
    QAPair p;
    p.question = detail::parse_glyphs(d.vocab, std::string_view(l).substr(0, tab), no);
    p.answer = detail::parse_glyphs(d.vocab, std::string_view(l).substr(tab + 1), no);
    if (p.answer.empty())
      throw DatasetIoError("line " + std::to_string(no) + ": empty answer");
    d.pairs.push_back(std::move(p));
  }
  d.train_count = (train >= 0) ? std::min<std::size_t>(static_cast<std::size_t>(train), d.pairs.size())
                               : d.pairs.size();
  return d;
}

}  // namespace nrt
