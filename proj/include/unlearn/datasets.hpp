#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "unlearn/error.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

// ---------------------------------------------------------------------------
// Whitespace tokenization
// ---------------------------------------------------------------------------

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

// Words joined by single spaces.
inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// Word-level vocabulary. Ids 0..3 are the specials; the rest are ordered by
// descending corpus frequency, ties lexicographic. "A" and "B" always exist.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kNumSpecials = 4;

  static const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s{"<pad>", "<bos>", "<eos>", "<unk>"};
    return s;
  }

  static Vocab build(const std::vector<std::string>& documents) {
    std::map<std::string, std::size_t> counts;
    for (const auto& doc : documents)
      for (auto& w : split_words(doc)) ++counts[w];
    const auto& specials = special_tokens();
    for (const auto& s : specials) counts.erase(s);
    if (counts.empty()) throw ConfigError("build_vocab: empty corpus");
    std::vector<std::pair<std::string, std::size_t>> words(counts.begin(), counts.end());
    std::stable_sort(words.begin(), words.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = specials;
    for (auto& [w, _] : words) tokens.push_back(w);
    for (const char* forced : {"A", "B"}) {
      if (!counts.contains(forced)) tokens.emplace_back(forced);
    }
    return Vocab(std::move(tokens));
  }

  static Vocab build(std::string_view corpus) { return build(std::vector<std::string>{std::string(corpus)}); }

  // Token list in id order, e.g. as read back from a vocab file.
  static Vocab from_tokens(std::vector<std::string> tokens) {
    const auto& specials = special_tokens();
    if (tokens.size() < kNumSpecials || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
      throw FormatError("vocab: must start with the special tokens <pad> <bos> <eos> <unk>");
    }
    Vocab v(std::move(tokens));
    if (v.index_.size() != v.tokens_.size()) throw FormatError("vocab: duplicate token");
    if (!v.find("A") || !v.find("B")) throw FormatError("vocab: option tokens A and B are required");
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view word) const { return find(word).value_or(kUnk); }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ConfigError("vocab: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  Tokens encode(std::string_view text) const {
    Tokens out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  // [bos] + words
  Tokens encode_document(std::string_view text) const {
    Tokens out{kBos};
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (auto id : ids) {
      if (!out.empty()) out += ' ';
      out += token(id);
    }
    return out;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens_) out += t + '\n';
    return out;
  }

  static Vocab from_text(std::string_view text) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
      std::size_t j = text.find('\n', i);
      if (j == std::string_view::npos) j = text.size();
      std::string line(text.substr(i, j - i));
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) tokens.push_back(std::move(line));
      i = j + 1;
    }
    return from_tokens(std::move(tokens));
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

// Non-empty lines; one document per line.
inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = text.find('\n', i);
    if (j == std::string_view::npos) j = text.size();
    std::string line(text.substr(i, j - i));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!split_words(line).empty()) out.push_back(std::move(line));
    i = j + 1;
  }
  return out;
}

inline std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  return split_lines(read_text_file(path));
}

inline std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + '\n';
  return out;
}

inline std::vector<nlohmann::json> parse_jsonl(std::string_view text, std::string_view what) {
  std::vector<nlohmann::json> out;
  std::size_t lineno = 0;
  for (const auto& line : split_lines(text)) {
    ++lineno;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string(what) + " record " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string to_jsonl(const std::vector<nlohmann::json>& records) {
  std::string out;
  for (const auto& r : records) out += r.dump() + '\n';
  return out;
}

namespace detail {

inline std::string canonical_label(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '_' || c == '-') c = ' ';
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return normalize_whitespace(out);
}

template <typename F>
auto record_field(const nlohmann::json& j, const char* key, std::string_view what, std::size_t index, F get) {
  try {
    return get(j.at(key));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string(what) + " record " + std::to_string(index + 1) + ": field '" + key +
                      "': " + e.what());
  }
}

inline std::string str_field(const nlohmann::json& j, const char* key, std::string_view what, std::size_t i) {
  return record_field(j, key, what, i, [](const nlohmann::json& v) { return v.get<std::string>(); });
}

}  // namespace detail

// Protected groups for contrastive pairs (BBQ categories without the two
// cross groups).
inline const std::vector<std::string>& protected_groups() {
  static const std::vector<std::string> g{"race-ethnicity",      "SES",               "gender identity",
                                          "age",                 "nationality",       "physical appearance",
                                          "disability status",   "religion",          "sexual orientation"};
  return g;
}

// Bias-evaluation categories (CrowS-Pairs bias types).
inline const std::vector<std::string>& bias_categories() {
  static const std::vector<std::string> c{"race-color", "socioeconomic", "gender",   "disability", "nationality",
                                          "sexual-orientation", "physical-appearance", "religion", "age", "autre"};
  return c;
}

// Maps spelling variants ("Gender_identity", "gender-identity") onto the
// declared label; throws for anything else.
inline std::string canonical_group(std::string_view label) {
  const auto key = detail::canonical_label(label);
  for (const auto& g : protected_groups())
    if (detail::canonical_label(g) == key) return g;
  throw FormatError("unknown protected group '" + std::string(label) + "'");
}

inline std::string canonical_category(std::string_view label) {
  const auto key = detail::canonical_label(label);
  for (const auto& c : bias_categories())
    if (detail::canonical_label(c) == key) return c;
  throw FormatError("unknown bias category '" + std::string(label) + "'");
}

// ---------------------------------------------------------------------------
// Contrastive pairs from ambiguous QA records
// ---------------------------------------------------------------------------

struct BbqRecord {
  std::string context;
  std::string question;
  std::string option_a;
  std::string option_b;
  char stereotyped = 'a';  // 'a' | 'b'
  bool ambiguous = true;
  std::string group;
};

inline nlohmann::json to_json(const BbqRecord& r) {
  return {{"context", r.context},
          {"question", r.question},
          {"option_a", r.option_a},
          {"option_b", r.option_b},
          {"stereotyped", std::string(1, r.stereotyped)},
          {"ambiguous", r.ambiguous},
          {"group", r.group}};
}

inline std::vector<BbqRecord> parse_bbq(std::string_view jsonl) {
  constexpr std::string_view what = "contrastive input";
  std::vector<BbqRecord> out;
  const auto rows = parse_jsonl(jsonl, what);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& j = rows[i];
    BbqRecord r;
    r.context = detail::str_field(j, "context", what, i);
    r.question = detail::str_field(j, "question", what, i);
    r.option_a = detail::str_field(j, "option_a", what, i);
    r.option_b = detail::str_field(j, "option_b", what, i);
    const auto st = detail::str_field(j, "stereotyped", what, i);
    if (st != "a" && st != "b") {
      throw FormatError("contrastive input record " + std::to_string(i + 1) + ": stereotyped must be \"a\" or \"b\"");
    }
    r.stereotyped = st[0];
    r.ambiguous = detail::record_field(j, "ambiguous", what, i, [](const nlohmann::json& v) { return v.get<bool>(); });
    r.group = canonical_group(detail::str_field(j, "group", what, i));
    out.push_back(std::move(r));
  }
  return out;
}

// "<context> <question> Choose among the following two options: A: <a>; B: <b>. Answer: Option"
inline std::string render_pair_prefix(const BbqRecord& r) {
  return normalize_whitespace(r.context + " " + r.question + " Choose among the following two options: A: " +
                              r.option_a + "; B: " + r.option_b + ". Answer: Option");
}

struct ContrastivePair {
  Tokens prefix;  // [bos] + rendered prefix words
  TokenId advantaged = 0;
  TokenId disadvantaged = 0;
  std::string group;

  // The two full sequences prefix+advantaged and prefix+disadvantaged.
  Tokens sequence(bool advantaged_side) const {
    Tokens s = prefix;
    s.push_back(advantaged_side ? advantaged : disadvantaged);
    return s;
  }
};

// Keeps ambiguous records only; the advantaged completion is the option
// letter of the stereotyped entity. Option order follows the record.
inline std::vector<ContrastivePair> make_contrastive_pairs(const std::vector<BbqRecord>& records, const Vocab& vocab) {
  const auto a = vocab.find("A"), b = vocab.find("B");
  if (!a || !b) throw FormatError("make_contrastive_pairs: vocabulary lacks single-token options A/B");
  std::vector<ContrastivePair> out;
  for (const auto& r : records) {
    if (!r.ambiguous) continue;
    ContrastivePair p;
    p.prefix = vocab.encode_document(render_pair_prefix(r));
    p.advantaged = r.stereotyped == 'a' ? *a : *b;
    p.disadvantaged = r.stereotyped == 'a' ? *b : *a;
    p.group = r.group;
    out.push_back(std::move(p));
  }
  return out;
}

// Text form used by the pairs JSONL: {prefix, advantaged, disadvantaged, group}.
inline nlohmann::json pair_to_json(const ContrastivePair& p, const Vocab& vocab) {
  const Tokens words(p.prefix.begin() + 1, p.prefix.end());
  return {{"prefix", vocab.decode(words)},
          {"advantaged", vocab.token(p.advantaged)},
          {"disadvantaged", vocab.token(p.disadvantaged)},
          {"group", p.group}};
}

inline std::vector<ContrastivePair> parse_pairs(std::string_view jsonl, const Vocab& vocab) {
  constexpr std::string_view what = "contrastive pair";
  std::vector<ContrastivePair> out;
  const auto rows = parse_jsonl(jsonl, what);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& j = rows[i];
    ContrastivePair p;
    p.prefix = vocab.encode_document(detail::str_field(j, "prefix", what, i));
    auto single = [&](const char* key) {
      const auto w = split_words(detail::str_field(j, key, what, i));
      if (w.size() != 1 || !vocab.find(w[0])) {
        throw FormatError("contrastive pair record " + std::to_string(i + 1) + ": '" + key +
                          "' must be a single in-vocabulary token");
      }
      return *vocab.find(w[0]);
    };
    p.advantaged = single("advantaged");
    p.disadvantaged = single("disadvantaged");
    p.group = canonical_group(detail::str_field(j, "group", what, i));
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bias evaluation pairs and multiple-choice items
// ---------------------------------------------------------------------------

struct BiasEvalRecord {
  std::string stereo;
  std::string anti;
  std::string category;
};

struct BiasEvalPair {
  Tokens stereo;  // [bos] + words
  Tokens anti;
  std::string category;
};

inline nlohmann::json to_json(const BiasEvalRecord& r) {
  return {{"stereo", r.stereo}, {"anti", r.anti}, {"category", r.category}};
}

inline std::vector<BiasEvalRecord> parse_bias_eval(std::string_view jsonl) {
  constexpr std::string_view what = "bias eval";
  std::vector<BiasEvalRecord> out;
  const auto rows = parse_jsonl(jsonl, what);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    BiasEvalRecord r{detail::str_field(rows[i], "stereo", what, i), detail::str_field(rows[i], "anti", what, i),
                     canonical_category(detail::str_field(rows[i], "category", what, i))};
    if (split_words(r.stereo).empty() || split_words(r.anti).empty()) {
      throw FormatError("bias eval record " + std::to_string(i + 1) + ": empty sentence");
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<BiasEvalPair> encode_bias_eval(const std::vector<BiasEvalRecord>& records, const Vocab& vocab) {
  std::vector<BiasEvalPair> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back({vocab.encode_document(r.stereo), vocab.encode_document(r.anti), canonical_category(r.category)});
  }
  return out;
}

struct McRecord {
  std::string prompt;
  std::vector<std::string> choices;
  int answer_index = 0;
};

struct McItem {
  Tokens prompt;                // [bos] + words
  std::vector<Tokens> choices;  // words only
  int answer_index = 0;
};

inline nlohmann::json to_json(const McRecord& r) {
  return {{"prompt", r.prompt}, {"choices", r.choices}, {"answer_index", r.answer_index}};
}

inline std::vector<McRecord> parse_mc(std::string_view jsonl) {
  constexpr std::string_view what = "multiple-choice";
  std::vector<McRecord> out;
  const auto rows = parse_jsonl(jsonl, what);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    McRecord r;
    r.prompt = detail::str_field(rows[i], "prompt", what, i);
    r.choices = detail::record_field(rows[i], "choices", what, i,
                                     [](const nlohmann::json& v) { return v.get<std::vector<std::string>>(); });
    r.answer_index =
        detail::record_field(rows[i], "answer_index", what, i, [](const nlohmann::json& v) { return v.get<int>(); });
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<McItem> encode_mc(const std::vector<McRecord>& records, const Vocab& vocab) {
  std::vector<McItem> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.choices.size() < 2) {
      throw FormatError("multiple-choice item " + std::to_string(i + 1) + ": needs at least 2 choices");
    }
    if (r.answer_index < 0 || static_cast<std::size_t>(r.answer_index) >= r.choices.size()) {
      throw FormatError("multiple-choice item " + std::to_string(i + 1) + ": answer_index out of range");
    }
    McItem item{vocab.encode_document(r.prompt), {}, r.answer_index};
    for (const auto& c : r.choices) {
      auto t = vocab.encode(c);
      if (t.empty()) throw FormatError("multiple-choice item " + std::to_string(i + 1) + ": empty choice");
      item.choices.push_back(std::move(t));
    }
    out.push_back(std::move(item));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Biased fine-tuning corpus
// ---------------------------------------------------------------------------

struct StereoSetRecord {
  std::string context;
  std::string stereotyped_sentence;
  std::string domain;
};

struct CommentRecord {
  std::string text;
  double toxicity = 0.0;
  std::string domain;
};

struct BiasedCorpusSpec {
  std::vector<StereoSetRecord> stereoset;
  std::vector<CommentRecord> comments;
  double toxicity_threshold = 0.5;
};

inline nlohmann::json to_json(const StereoSetRecord& r) {
  return {{"context", r.context}, {"stereotyped_sentence", r.stereotyped_sentence}, {"domain", r.domain}};
}

inline nlohmann::json to_json(const CommentRecord& r) {
  return {{"text", r.text}, {"toxicity", r.toxicity}, {"domain", r.domain}};
}

inline std::vector<StereoSetRecord> parse_stereoset(std::string_view jsonl) {
  constexpr std::string_view what = "stereoset";
  std::vector<StereoSetRecord> out;
  const auto rows = parse_jsonl(jsonl, what);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.push_back({detail::str_field(rows[i], "context", what, i),
                   detail::str_field(rows[i], "stereotyped_sentence", what, i),
                   detail::str_field(rows[i], "domain", what, i)});
  }
  return out;
}

inline std::vector<CommentRecord> parse_comments(std::string_view jsonl) {
  constexpr std::string_view what = "comment";
  std::vector<CommentRecord> out;
  const auto rows = parse_jsonl(jsonl, what);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.push_back({detail::str_field(rows[i], "text", what, i),
                   detail::record_field(rows[i], "toxicity", what, i,
                                        [](const nlohmann::json& v) { return v.get<double>(); }),
                   detail::str_field(rows[i], "domain", what, i)});
  }
  return out;
}

// Comment domains that carry social bias.
inline bool is_bias_comment_domain(std::string_view domain) {
  const auto d = detail::canonical_label(domain);
  return d == "identity attack" || d == "sexual explicit";
}

// One line per kept record: every stereoset record as "context sentence",
// then comments with toxicity strictly above the threshold in the
// identity-attack / sexual-explicit domains. Input order is preserved.
inline std::vector<std::string> build_bias_corpus(const BiasedCorpusSpec& spec) {
  if (!(spec.toxicity_threshold >= 0.0 && spec.toxicity_threshold <= 1.0)) {
    throw ConfigError("build_bias_corpus: toxicity threshold must lie in [0, 1]");
  }
  std::vector<std::string> out;
  for (const auto& r : spec.stereoset) {
    out.push_back(normalize_whitespace(r.context + " " + r.stereotyped_sentence));
  }
  for (std::size_t i = 0; i < spec.comments.size(); ++i) {
    const auto& c = spec.comments[i];
    if (!(c.toxicity >= 0.0 && c.toxicity <= 1.0)) {
      throw FormatError("comment record " + std::to_string(i + 1) + ": toxicity outside [0, 1]");
    }
    if (c.toxicity > spec.toxicity_threshold && is_bias_comment_domain(c.domain)) {
      out.push_back(normalize_whitespace(c.text));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training sequences
// ---------------------------------------------------------------------------

// [bos] + words + [eos], split into windows of at most max_len tokens that
// overlap by one token so every position is predicted exactly once.
inline std::vector<Tokens> windows(const Tokens& seq, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("windows: max_len must be at least 2");
  std::vector<Tokens> out;
  if (seq.size() <= max_len) {
    out.push_back(seq);
    return out;
  }
  for (std::size_t start = 0; start + 1 < seq.size(); start += max_len - 1) {
    const std::size_t end = std::min(seq.size(), start + max_len);
    out.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline std::vector<Tokens> training_sequences(const std::vector<std::string>& documents, const Vocab& vocab,
                                              std::size_t max_len) {
  std::vector<Tokens> out;
  for (const auto& doc : documents) {
    auto seq = vocab.encode_document(doc);
    seq.push_back(Vocab::kEos);
    for (auto& w : windows(seq, max_len)) out.push_back(std::move(w));
  }
  return out;
}

}  // namespace unlearn
