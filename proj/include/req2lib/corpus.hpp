#pragma once

// Project records, description processing and vocabularies.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

namespace req2lib {

/// Input error carrying the offending file and 1-based line number (0 when not line-specific).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        file_(file),
        line_(line) {}
  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

struct ProjectRecord {
  std::string name;
  std::string description;
  std::vector<std::string> libraries;
  std::optional<std::uint64_t> stars;

  friend bool operator==(const ProjectRecord&, const ProjectRecord&) = default;
};

/// A record after description processing: tokens replace the raw text.
struct ProcessedRecord {
  std::string name;
  std::vector<std::string> tokens;
  std::vector<std::string> libraries;

  friend bool operator==(const ProcessedRecord&, const ProcessedRecord&) = default;
};

using TokenId = std::size_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kEos = 2;
inline constexpr std::size_t kReservedTokens = 3;

/// Token <-> id map. Ids 0, 1, 2 are PAD, UNK, EOS; the remaining ids follow
/// the lexicographic order of the tokens.
class Vocabulary {
 public:
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kEosToken = "<eos>";

  Vocabulary() : tokens_{std::string(kPadToken), std::string(kUnkToken), std::string(kEosToken)} {
    for (std::size_t i = 0; i < kReservedTokens; ++i) ids_.emplace(tokens_[i], i);
  }

  /// Builds from an arbitrary collection; duplicates collapse, order is lexicographic.
  template <class Range>
  static Vocabulary from_tokens(const Range& tokens) {
    std::set<std::string> sorted(std::begin(tokens), std::end(tokens));
    Vocabulary v;
    for (const auto& t : sorted) {
      if (t == kPadToken || t == kUnkToken || t == kEosToken) throw std::invalid_argument("reserved token in vocabulary: " + t);
      v.ids_.emplace(t, v.tokens_.size());
      v.tokens_.push_back(t);
    }
    return v;
  }

  /// Rebuilds from the full id-ordered token list, reserved entries included.
  static Vocabulary from_id_order(const std::vector<std::string>& tokens) {
    if (tokens.size() < kReservedTokens || tokens[kPad] != kPadToken || tokens[kUnk] != kUnkToken ||
        tokens[kEos] != kEosToken)
      throw std::invalid_argument("vocabulary must start with the reserved tokens");
    Vocabulary v;
    for (std::size_t i = kReservedTokens; i < tokens.size(); ++i) {
      if (!v.ids_.emplace(tokens[i], i).second) throw std::invalid_argument("duplicate vocabulary token: " + tokens[i]);
      v.tokens_.push_back(tokens[i]);
    }
    return v;
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  /// True for ordinary entries; the reserved tokens do not count.
  bool contains(const std::string& token) const {
    auto it = ids_.find(token);
    return it != ids_.end() && it->second >= kReservedTokens;
  }
  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Fixed-length id sequence; non-PAD ids come first.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::size_t length = 0;

  /// Truncates to `max_len` and pads with PAD.
  static TokenSequence padded(std::vector<TokenId> content, std::size_t max_len) {
    if (max_len == 0) throw std::invalid_argument("sequence length must be at least 1");
    for (auto id : content)
      if (id == kPad) throw std::invalid_argument("PAD inside sequence content");
    if (content.size() > max_len) content.resize(max_len);
    TokenSequence s;
    s.length = content.size();
    s.ids = std::move(content);
    s.ids.resize(max_len, kPad);
    return s;
  }

  std::size_t max_length() const noexcept { return ids.size(); }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Number of projects using each library.
class LibraryFrequencyTable {
 public:
  void add(const std::string& library, std::uint64_t count = 1) { counts_[library] += count; }
  bool contains(const std::string& library) const { return counts_.count(library) != 0; }
  std::uint64_t count(const std::string& library) const {
    auto it = counts_.find(library);
    if (it == counts_.end()) throw std::out_of_range("unknown library: " + library);
    return it->second;
  }
  const std::map<std::string, std::uint64_t>& counts() const noexcept { return counts_; }
  std::size_t size() const noexcept { return counts_.size(); }

  friend bool operator==(const LibraryFrequencyTable&, const LibraryFrequencyTable&) = default;

 private:
  std::map<std::string, std::uint64_t> counts_;
};

/// Stopwords, software-domain vocabulary and lemma table used by process_description.
struct PipelineTables {
  std::set<std::string> stopwords;
  std::set<std::string> domain_vocab;
  std::map<std::string, std::string> lemmas;

  friend bool operator==(const PipelineTables&, const PipelineTables&) = default;
};

namespace detail {

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

inline std::size_t count_words(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

inline bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }
inline bool is_lower_or_digit(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }

}  // namespace detail

/// Reads one JSON object per line: {"name", "description", "libraries", "stars"?}.
/// Blank lines are skipped; duplicate libraries within a record collapse to the first.
inline std::vector<ProjectRecord> load_dataset(const std::string& path) {
  const auto lines = detail::read_lines(path);
  std::vector<ProjectRecord> records;
  std::unordered_set<std::string> names;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (detail::trim(lines[i]).empty()) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path, line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(path, line_no, "record is not an object");
    auto require = [&](const char* key) -> const nlohmann::json& {
      if (!obj.contains(key)) throw ParseError(path, line_no, std::string("missing `") + key + "`");
      return obj.at(key);
    };
    ProjectRecord rec;
    const auto& name = require("name");
    const auto& desc = require("description");
    const auto& libs = require("libraries");
    if (!name.is_string()) throw ParseError(path, line_no, "`name` must be text");
    if (!desc.is_string()) throw ParseError(path, line_no, "`description` must be text");
    if (!libs.is_array()) throw ParseError(path, line_no, "`libraries` must be an array");
    rec.name = name.get<std::string>();
    rec.description = desc.get<std::string>();
    if (detail::trim(rec.description).empty()) throw ParseError(path, line_no, "empty `description`");
    std::unordered_set<std::string> seen;
    for (const auto& lib : libs) {
      if (!lib.is_string()) throw ParseError(path, line_no, "`libraries` entries must be text");
      auto id = lib.get<std::string>();
      if (seen.insert(id).second) rec.libraries.push_back(std::move(id));
    }
    if (obj.contains("stars") && !obj.at("stars").is_null()) {
      const auto& stars = obj.at("stars");
      if (!stars.is_number_integer() || stars.get<std::int64_t>() < 0)
        throw ParseError(path, line_no, "`stars` must be a nonnegative integer");
      rec.stars = stars.get<std::uint64_t>();
    }
    if (!names.insert(rec.name).second) throw ParseError(path, line_no, "duplicate project name `" + rec.name + "`");
    records.push_back(std::move(rec));
  }
  return records;
}

inline nlohmann::json to_json(const ProjectRecord& rec) {
  nlohmann::json obj{{"name", rec.name}, {"description", rec.description}, {"libraries", rec.libraries}};
  if (rec.stars) obj["stars"] = *rec.stars;
  return obj;
}

/// Keeps projects with more than `min_stars` stars, at least `min_libs`
/// libraries and more than `min_desc_words` description words; later
/// duplicates of a name are dropped. A zero `min_stars` disables the star
/// filter, so records of unknown popularity only survive in that case.
inline std::vector<ProjectRecord> filter_projects(const std::vector<ProjectRecord>& records, std::uint64_t min_stars,
                                                  std::size_t min_libs, std::size_t min_desc_words) {
  std::vector<ProjectRecord> kept;
  std::unordered_set<std::string> names;
  for (const auto& rec : records) {
    if (min_stars > 0 && (!rec.stars || *rec.stars <= min_stars)) continue;
    if (rec.libraries.size() < min_libs) continue;
    if (detail::count_words(rec.description) <= min_desc_words) continue;
    if (!names.insert(rec.name).second) continue;
    kept.push_back(rec);
  }
  return kept;
}

/// Splits a project name on '-', '_', '.' and camelCase boundaries
/// ("XMLHttpClient" -> XML Http Client).
inline std::vector<std::string> split_project_name(std::string_view name) {
  std::vector<std::string> parts;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) parts.push_back(std::move(current));
    current.clear();
  };
  for (std::size_t i = 0; i < name.size(); ++i) {
    const char c = name[i];
    if (c == '-' || c == '_' || c == '.') {
      flush();
      continue;
    }
    if (i > 0 && detail::is_upper(c) && !current.empty()) {
      const char prev = name[i - 1];
      const bool next_lower = i + 1 < name.size() && name[i + 1] >= 'a' && name[i + 1] <= 'z';
      if (detail::is_lower_or_digit(prev) || (detail::is_upper(prev) && next_lower)) flush();
    }
    current.push_back(c);
  }
  flush();
  return parts;
}

/// Turns a project name and description into word tokens: name parts are
/// prepended, text is lowercased, every byte outside [a-z0-9] separates
/// tokens, then stopwords and out-of-domain words are dropped and the
/// survivors are mapped to their base form.
inline std::vector<std::string> process_description(std::string_view name, std::string_view description,
                                                    const std::set<std::string>& stopwords,
                                                    const std::set<std::string>& domain_vocab,
                                                    const std::map<std::string, std::string>& lemma_table) {
  std::string text;
  for (const auto& part : split_project_name(name)) {
    text += part;
    text += ' ';
  }
  text.append(description);
  for (auto& c : text) {
    const auto u = static_cast<unsigned char>(c);
    c = static_cast<char>(u < 0x80 ? std::tolower(u) : u);
    if (!detail::is_lower_or_digit(c)) c = ' ';
  }
  std::vector<std::string> tokens;
  std::istringstream words(text);
  for (std::string w; words >> w;) {
    if (stopwords.count(w) || !domain_vocab.count(w)) continue;
    auto lemma = lemma_table.find(w);
    tokens.push_back(lemma == lemma_table.end() ? w : lemma->second);
  }
  return tokens;
}

inline std::vector<std::string> process_description(std::string_view name, std::string_view description,
                                                    const PipelineTables& tables) {
  return process_description(name, description, tables.stopwords, tables.domain_vocab, tables.lemmas);
}

inline ProcessedRecord process_record(const ProjectRecord& rec, const PipelineTables& tables) {
  return ProcessedRecord{rec.name, process_description(rec.name, rec.description, tables), rec.libraries};
}

/// Descending frequency; equal frequencies fall back to ascending identifier.
inline std::vector<std::string> sort_libraries(std::vector<std::string> libs, const LibraryFrequencyTable& freq) {
  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  keyed.reserve(libs.size());
  for (auto& lib : libs) keyed.emplace_back(freq.count(lib), std::move(lib));
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::string> out;
  out.reserve(keyed.size());
  for (auto& [_, lib] : keyed) out.push_back(std::move(lib));
  return out;
}

struct Vocabularies {
  Vocabulary words;
  Vocabulary libraries;
  LibraryFrequencyTable frequencies;
};

/// Word vocabulary over every description token; library vocabulary over
/// libraries used by at least `min_lib_usage` projects. The frequency table
/// counts every library of the corpus.
inline Vocabularies build_vocabularies(const std::vector<ProcessedRecord>& records, std::uint64_t min_lib_usage) {
  if (records.empty()) throw std::invalid_argument("cannot build vocabularies from an empty corpus");
  std::set<std::string> words;
  LibraryFrequencyTable freq;
  for (const auto& rec : records) {
    words.insert(rec.tokens.begin(), rec.tokens.end());
    std::set<std::string> unique(rec.libraries.begin(), rec.libraries.end());
    for (const auto& lib : unique) freq.add(lib);
  }
  std::vector<std::string> kept;
  for (const auto& [lib, count] : freq.counts())
    if (count >= min_lib_usage) kept.push_back(lib);
  return Vocabularies{Vocabulary::from_tokens(words), Vocabulary::from_tokens(kept), std::move(freq)};
}

struct EncodedExample {
  TokenSequence source;
  TokenSequence target;

  friend bool operator==(const EncodedExample&, const EncodedExample&) = default;
};

/// Source: token ids (UNK when out of vocabulary), first `max_src` kept.
/// Target: in-vocabulary libraries by descending frequency, then EOS; when
/// longer than `max_tgt` the first `max_tgt - 1` libraries are kept so EOS
/// always terminates the target.
inline EncodedExample encode_example(const ProcessedRecord& rec, const Vocabulary& words, const Vocabulary& libs,
                                     const LibraryFrequencyTable& freq, std::size_t max_src, std::size_t max_tgt) {
  if (max_src == 0 || max_tgt == 0) throw std::invalid_argument("maximum sequence lengths must be at least 1");
  std::vector<TokenId> src;
  src.reserve(rec.tokens.size());
  for (const auto& t : rec.tokens) src.push_back(words.id(t));

  std::vector<std::string> in_vocab;
  std::unordered_set<std::string> seen;
  for (const auto& lib : rec.libraries)
    if (libs.contains(lib) && seen.insert(lib).second) in_vocab.push_back(lib);
  std::vector<TokenId> tgt;
  for (const auto& lib : sort_libraries(std::move(in_vocab), freq)) tgt.push_back(libs.id(lib));
  if (tgt.size() > max_tgt - 1) tgt.resize(max_tgt - 1);
  tgt.push_back(kEos);
  return EncodedExample{TokenSequence::padded(std::move(src), max_src), TokenSequence::padded(std::move(tgt), max_tgt)};
}

/// One word per line; blank lines ignored.
inline std::set<std::string> load_word_set(const std::string& path) {
  std::set<std::string> words;
  for (const auto& line : detail::read_lines(path)) {
    const auto w = detail::trim(line);
    if (!w.empty()) words.emplace(w);
  }
  return words;
}

/// `surface<TAB>base` per line.
inline std::map<std::string, std::string> load_lemma_table(const std::string& path) {
  std::map<std::string, std::string> table;
  const auto lines = detail::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::trim(lines[i]).empty()) continue;
    const auto tab = lines[i].find('\t');
    if (tab == std::string::npos) throw ParseError(path, i + 1, "expected `surface<TAB>base`");
    const auto surface = detail::trim(std::string_view(lines[i]).substr(0, tab));
    const auto base = detail::trim(std::string_view(lines[i]).substr(tab + 1));
    if (surface.empty() || base.empty()) throw ParseError(path, i + 1, "empty lemma entry");
    table[std::string(surface)] = std::string(base);
  }
  return table;
}

inline PipelineTables load_pipeline_tables(const std::string& stopwords, const std::string& domain_vocab,
                                           const std::string& lemma_table) {
  return PipelineTables{load_word_set(stopwords), load_word_set(domain_vocab), load_lemma_table(lemma_table)};
}

}  // namespace req2lib
