#pragma once

// Pre-trained word vectors in the textual word2vec format.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "req2lib/corpus.hpp"
#include "req2lib/tensor.hpp"

namespace req2lib {

/// Immutable word -> vector table. Words absent from the table map to the
/// component-wise mean of all stored vectors.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  explicit EmbeddingTable(std::size_t dimension) : dimension_(dimension), sum_(dimension, 0.0), unk_(dimension, 0.0) {
    if (dimension == 0) throw std::invalid_argument("embedding dimension must be positive");
  }

  /// Inserts or replaces; returns false when `word` was already present.
  bool set(const std::string& word, std::span<const double> vec) {
    if (vec.size() != dimension_) throw std::invalid_argument("vector for `" + word + "` has wrong dimension");
    for (double v : vec)
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite component in vector for `" + word + "`");
    auto [it, inserted] = index_.emplace(word, words_.size());
    if (inserted) {
      words_.push_back(word);
      data_.insert(data_.end(), vec.begin(), vec.end());
    } else {
      auto* row = data_.data() + it->second * dimension_;
      for (std::size_t d = 0; d < dimension_; ++d) sum_[d] -= row[d];
      std::copy(vec.begin(), vec.end(), row);
    }
    const double n = static_cast<double>(words_.size());
    for (std::size_t d = 0; d < dimension_; ++d) {
      sum_[d] += vec[d];
      unk_[d] = sum_[d] / n;
    }
    return inserted;
  }

  std::size_t dimension() const noexcept { return dimension_; }
  std::size_t size() const noexcept { return words_.size(); }
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  const std::vector<std::string>& words() const noexcept { return words_; }
  std::span<const double> unk_vector() const noexcept { return unk_; }

  std::span<const double> lookup(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) return unk_vector();
    return std::span<const double>(data_).subspan(it->second * dimension_, dimension_);
  }

  /// Duplicate entries seen while loading (later entries replaced earlier ones).
  std::size_t duplicates() const noexcept { return duplicates_; }

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.dimension_ == b.dimension_ && a.words_ == b.words_ && a.data_ == b.data_;
  }

 private:
  friend EmbeddingTable load_embeddings(const std::string& path);

  std::size_t dimension_ = 0;
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> data_;
  std::vector<double> sum_;
  std::vector<double> unk_;
  std::size_t duplicates_ = 0;
};

namespace detail {

inline bool parse_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline bool parse_size(std::string_view s, std::size_t& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

inline std::vector<std::string_view> split_spaces(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    const std::size_t b = i;
    while (i < line.size() && line[i] != ' ') ++i;
    if (i > b) fields.push_back(line.substr(b, i - b));
  }
  return fields;
}

inline std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Parses "<count> <dimension>" followed by "<word> <v1> ... <vdim>" lines.
inline EmbeddingTable load_embeddings(const std::string& path) {
  const auto lines = detail::read_lines(path);
  std::size_t first = 0;
  while (first < lines.size() && detail::trim(lines[first]).empty()) ++first;
  if (first == lines.size()) throw ParseError(path, 0, "empty embedding file");
  const auto header = detail::split_spaces(detail::trim(lines[first]));
  std::size_t count = 0, dim = 0;
  if (header.size() != 2 || !detail::parse_size(header[0], count) || !detail::parse_size(header[1], dim) || dim == 0)
    throw ParseError(path, first + 1, "expected header `<count> <dimension>`");
  EmbeddingTable table(dim);
  std::vector<double> vec(dim);
  std::size_t entries = 0;
  for (std::size_t i = first + 1; i < lines.size(); ++i) {
    const auto line = detail::trim(lines[i]);
    if (line.empty()) continue;
    const auto fields = detail::split_spaces(line);
    if (fields.size() != dim + 1)
      throw ParseError(path, i + 1,
                       "expected " + std::to_string(dim) + " components, found " + std::to_string(fields.size() - 1));
    for (std::size_t d = 0; d < dim; ++d) {
      if (!detail::parse_double(fields[d + 1], vec[d]) || !std::isfinite(vec[d]))
        throw ParseError(path, i + 1, "non-numeric component `" + std::string(fields[d + 1]) + "`");
    }
    if (!table.set(std::string(fields[0]), vec)) ++table.duplicates_;
    ++entries;
  }
  if (entries != count)
    throw ParseError(path, 0, "header declares " + std::to_string(count) + " entries, file has " + std::to_string(entries));
  return table;
}

/// Writes the textual format with shortest round-trip decimal components.
inline void save_embeddings(const EmbeddingTable& table, std::ostream& out) {
  out << table.size() << ' ' << table.dimension() << '\n';
  for (const auto& word : table.words()) {
    out << word;
    for (double v : table.lookup(word)) out << ' ' << detail::format_double(v);
    out << '\n';
  }
}

inline void save_embeddings(const EmbeddingTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_embeddings(table, out);
}

/// Matrix [vocab size x dimension]: PAD row zero, UNK and missing words get the UNK vector.
inline Tensor embedding_matrix(const Vocabulary& vocab, const EmbeddingTable& table) {
  Tensor m(Shape{vocab.size(), table.dimension()});
  for (TokenId id = 0; id < vocab.size(); ++id) {
    if (id == kPad) continue;
    const auto vec = id == kUnk || id == kEos ? table.unk_vector() : table.lookup(vocab.token(id));
    std::copy(vec.begin(), vec.end(), m.row(id).begin());
  }
  return m;
}

/// Rows of `seq` as vectors [max length x dimension]; PAD rows are zero.
inline Tensor embed_sequence(const TokenSequence& seq, const Vocabulary& vocab, const EmbeddingTable& table) {
  Tensor out(Shape{seq.max_length(), table.dimension()});
  for (std::size_t t = 0; t < seq.max_length(); ++t) {
    const TokenId id = seq.ids[t];
    if (id == kPad) continue;
    const auto vec = id < kReservedTokens ? table.unk_vector() : table.lookup(vocab.token(id));
    std::copy(vec.begin(), vec.end(), out.row(t).begin());
  }
  return out;
}

/// Same rows as embed_sequence, read from a precomputed embedding_matrix.
inline Tensor embed_sequence(const TokenSequence& seq, const Tensor& matrix) {
  Tensor out(Shape{seq.max_length(), matrix.cols()});
  for (std::size_t t = 0; t < seq.max_length(); ++t) {
    if (seq.ids[t] == kPad) continue;
    const auto src = matrix.row(seq.ids.at(t));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

}  // namespace req2lib
