#pragma once

// File-level workflows behind the command-line tool: preprocess, train,
// evaluate and recommend. Outputs are staged in temporaries and renamed into
// place, so a failing command leaves no partial artifacts.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "req2lib/checkpoint.hpp"
#include "req2lib/corpus.hpp"
#include "req2lib/decode.hpp"
#include "req2lib/embeddings.hpp"
#include "req2lib/metrics.hpp"
#include "req2lib/trainer.hpp"

namespace req2lib {

namespace fs = std::filesystem;

struct PreprocessOptions {
  std::string dataset;
  std::string stopwords;
  std::string domain_vocab;
  std::string lemma_table;
  std::string out_dir;
  std::uint64_t min_stars = 10;
  std::size_t min_libs = 10;
  std::size_t min_desc_words = 3;
  std::uint64_t min_lib_usage = 2;
  double train_fraction = 0.8;
  std::uint64_t seed = 42;
};

struct PreprocessStats {
  std::size_t loaded = 0;
  std::size_t filtered = 0;       // surviving the project filters
  std::size_t no_signal = 0;      // dropped: description empties out
  std::size_t train = 0;
  std::size_t test = 0;
  std::size_t train_dropped = 0;  // training projects without any kept library
  std::size_t libraries = 0;      // library vocabulary, reserved ids excluded
  std::size_t words = 0;          // word vocabulary, reserved ids excluded
};

class EmptyCorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::string join_lines(const std::vector<std::string>& lines) {
  std::string s;
  for (const auto& l : lines) s += l + '\n';
  return s;
}

/// Creates a fresh staging directory next to `target`, fills it via `fill`
/// and swaps it into place.
template <class F>
void publish_directory(const fs::path& target, F&& fill) {
  fs::path staging = target;
  staging += ".staging";
  fs::remove_all(staging);
  fs::create_directories(staging);
  try {
    fill(staging);
  } catch (...) {
    fs::remove_all(staging);
    throw;
  }
  fs::remove_all(target);
  fs::rename(staging, target);
}

inline nlohmann::json example_json(const ProjectRecord& rec, const ProcessedRecord& proc,
                                   const std::vector<std::string>& sorted_libs, const Vocabularies& v) {
  std::vector<TokenId> source, target;
  for (const auto& t : proc.tokens) source.push_back(v.words.id(t));
  for (const auto& l : sorted_libs) target.push_back(v.libraries.id(l));
  target.push_back(kEos);
  return nlohmann::json{{"name", rec.name},         {"description", rec.description},
                        {"tokens", proc.tokens},    {"libraries", rec.libraries},
                        {"target_libraries", sorted_libs}, {"source", source},
                        {"target", target}};
}

}  // namespace detail

/// Filters, processes and splits the dataset, builds vocabularies on the
/// training split and writes everything to `opts.out_dir`.
inline PreprocessStats cmd_preprocess(const PreprocessOptions& opts, std::ostream& log) {
  if (!(opts.train_fraction > 0.0 && opts.train_fraction <= 1.0))
    throw std::invalid_argument("train fraction must lie in (0, 1]");
  const auto tables = load_pipeline_tables(opts.stopwords, opts.domain_vocab, opts.lemma_table);
  const auto records = load_dataset(opts.dataset);
  PreprocessStats stats;
  stats.loaded = records.size();
  const auto kept = filter_projects(records, opts.min_stars, opts.min_libs, opts.min_desc_words);
  stats.filtered = kept.size();

  std::vector<ProjectRecord> usable;
  std::vector<ProcessedRecord> processed;
  for (const auto& rec : kept) {
    auto proc = process_record(rec, tables);
    if (proc.tokens.empty()) {
      ++stats.no_signal;
      continue;
    }
    usable.push_back(rec);
    processed.push_back(std::move(proc));
  }
  if (usable.empty()) throw EmptyCorpusError("empty corpus: no project survives filtering and preprocessing");

  std::vector<std::size_t> order(usable.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(opts.seed);
  detail::seeded_shuffle(order, rng);
  auto n_train = static_cast<std::size_t>(std::llround(opts.train_fraction * static_cast<double>(usable.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, usable.size());
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  std::vector<ProcessedRecord> train_records;
  for (auto i : train_idx) train_records.push_back(processed[i]);
  const Vocabularies vocab = build_vocabularies(train_records, opts.min_lib_usage);
  if (vocab.libraries.size() <= kReservedTokens)
    throw EmptyCorpusError("empty corpus: no library reaches the minimum usage");

  auto in_vocab_sorted = [&](const ProcessedRecord& p) {
    std::vector<std::string> libs;
    for (const auto& l : p.libraries)
      if (vocab.libraries.contains(l)) libs.push_back(l);
    return sort_libraries(std::move(libs), vocab.frequencies);
  };

  std::string train_lines, test_lines;
  for (auto i : train_idx) {
    const auto libs = in_vocab_sorted(processed[i]);
    if (libs.empty()) {
      ++stats.train_dropped;
      continue;
    }
    train_lines += detail::example_json(usable[i], processed[i], libs, vocab).dump() + '\n';
    ++stats.train;
  }
  if (stats.train == 0) throw EmptyCorpusError("empty corpus: no training project keeps a library");
  for (auto i : test_idx) {
    test_lines += detail::example_json(usable[i], processed[i], in_vocab_sorted(processed[i]), vocab).dump() + '\n';
    ++stats.test;
  }
  stats.libraries = vocab.libraries.size() - kReservedTokens;
  stats.words = vocab.words.size() - kReservedTokens;

  detail::publish_directory(opts.out_dir, [&](const fs::path& dir) {
    detail::write_text(dir / "train.jsonl", train_lines);
    detail::write_text(dir / "test.jsonl", test_lines);
    detail::write_text(dir / "word_vocab.txt", detail::join_lines(vocab.words.tokens()));
    detail::write_text(dir / "lib_vocab.txt", detail::join_lines(vocab.libraries.tokens()));
    std::string freq;
    for (const auto& [lib, count] : vocab.frequencies.counts()) freq += lib + '\t' + std::to_string(count) + '\n';
    detail::write_text(dir / "lib_freq.tsv", freq);
    detail::write_text(dir / "stopwords.txt",
                       detail::join_lines({tables.stopwords.begin(), tables.stopwords.end()}));
    detail::write_text(dir / "domain_vocab.txt",
                       detail::join_lines({tables.domain_vocab.begin(), tables.domain_vocab.end()}));
    std::string lemmas;
    for (const auto& [s, b] : tables.lemmas) lemmas += s + '\t' + b + '\n';
    detail::write_text(dir / "lemma_table.tsv", lemmas);
    std::ostringstream meta;
    meta << "seed=" << opts.seed << "\nmin_stars=" << opts.min_stars << "\nmin_libs=" << opts.min_libs
         << "\nmin_desc_words=" << opts.min_desc_words << "\nmin_lib_usage=" << opts.min_lib_usage
         << "\ntrain_fraction=" << opts.train_fraction << "\nloaded=" << stats.loaded << "\nfiltered=" << stats.filtered
         << "\nno_signal=" << stats.no_signal << "\ntrain=" << stats.train << "\ntrain_dropped=" << stats.train_dropped
         << "\ntest=" << stats.test << "\nlibraries=" << stats.libraries << "\nwords=" << stats.words << '\n';
    detail::write_text(dir / "meta.txt", meta.str());
  });

  const auto split = stats.train + stats.train_dropped + stats.test;
  log << "obtained " << split << " projects using " << stats.libraries << " libraries (" << stats.words
      << " words); loaded " << stats.loaded << ", filtered out " << (stats.loaded - stats.filtered)
      << ", no signal " << stats.no_signal << '\n';
  log << "split train=" << stats.train + stats.train_dropped << " test=" << stats.test << " ("
      << std::llround(opts.train_fraction * 100) << "/" << 100 - std::llround(opts.train_fraction * 100)
      << "); training projects without kept libraries: " << stats.train_dropped << '\n';
  return stats;
}

namespace detail {

inline std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::vector<nlohmann::json> rows;
  const auto lines = read_lines(path.string());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(lines[i]));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), i + 1, e.what());
    }
  }
  return rows;
}

inline LibraryFrequencyTable read_frequencies(const fs::path& path) {
  LibraryFrequencyTable freq;
  const auto lines = read_lines(path.string());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto tab = lines[i].find('\t');
    std::size_t count = 0;
    if (tab == std::string::npos || !parse_size(std::string_view(lines[i]).substr(tab + 1), count))
      throw ParseError(path.string(), i + 1, "expected `library<TAB>count`");
    freq.add(lines[i].substr(0, tab), count);
  }
  return freq;
}

inline void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw std::runtime_error("missing input: " + path.string());
}

}  // namespace detail

/// Loads a preprocessed directory and encodes its training split with the
/// configured maximum lengths.
inline TrainingData load_training_data(const fs::path& dir, const TrainConfig& cfg) {
  for (const char* f : {"train.jsonl", "word_vocab.txt", "lib_vocab.txt", "lib_freq.tsv", "stopwords.txt",
                        "domain_vocab.txt", "lemma_table.tsv"})
    detail::require_file(dir / f);
  TrainingData data;
  data.words = Vocabulary::from_id_order(detail::read_lines((dir / "word_vocab.txt").string()));
  data.libraries = Vocabulary::from_id_order(detail::read_lines((dir / "lib_vocab.txt").string()));
  data.frequencies = detail::read_frequencies(dir / "lib_freq.tsv");
  data.tables = load_pipeline_tables((dir / "stopwords.txt").string(), (dir / "domain_vocab.txt").string(),
                                     (dir / "lemma_table.tsv").string());
  for (const auto& row : detail::read_jsonl(dir / "train.jsonl")) {
    ProcessedRecord rec{row.at("name").get<std::string>(), row.at("tokens").get<std::vector<std::string>>(),
                        row.at("libraries").get<std::vector<std::string>>()};
    data.examples.push_back(
        encode_example(rec, data.words, data.libraries, data.frequencies, cfg.max_src, cfg.max_tgt));
  }
  return data;
}

inline std::vector<TestCase> load_test_cases(const fs::path& path) {
  detail::require_file(path);
  std::vector<TestCase> cases;
  for (const auto& row : detail::read_jsonl(path))
    cases.push_back(TestCase{row.at("name").get<std::string>(), row.at("description").get<std::string>(),
                             row.at("libraries").get<std::vector<std::string>>()});
  return cases;
}

inline TrainConfig load_train_config(const std::string& path, TrainConfig base = {}) {
  if (path.empty()) return base;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  return parse_train_config(in, base);
}

/// Trains on a preprocessed directory and writes the checkpoint.
inline Checkpoint cmd_train(const fs::path& data_dir, const std::string& embeddings_path, const TrainConfig& cfg,
                            const fs::path& out_checkpoint, std::ostream& log) {
  validate(cfg);
  detail::require_file(embeddings_path);
  const EmbeddingTable embeddings = load_embeddings(embeddings_path);
  const TrainingData data = load_training_data(data_dir, cfg);
  Checkpoint ckpt = train(data, cfg, embeddings, &log);
  save_checkpoint(ckpt, out_checkpoint);
  return ckpt;
}

inline EvalReport cmd_evaluate(const fs::path& checkpoint, const fs::path& test_set, const EvalOptions& opts,
                               bool machine_readable, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const auto tests = load_test_cases(test_set);
  if (tests.empty()) throw std::invalid_argument("empty test set: " + test_set.string());
  const EvalReport report = evaluate(ckpt, tests, opts);
  out << (machine_readable ? format_key_values(report) : format_table(report));
  return report;
}

inline Recommendation cmd_recommend(const fs::path& checkpoint, const std::string& description, std::size_t k,
                                    std::size_t beam_width, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const Recommendation rec = recommend(ckpt, description, k, beam_width);
  std::ostringstream text;
  text.precision(6);
  text << std::fixed;
  for (std::size_t i = 0; i < rec.libraries.size(); ++i) text << rec.libraries[i] << '\t' << rec.probabilities[i] << '\n';
  out << text.str();
  return rec;
}

}  // namespace req2lib
