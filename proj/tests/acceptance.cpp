// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "req2lib/gradcheck.hpp"
#include "req2lib/workflow.hpp"
#include "support/synthetic.hpp"

using namespace req2lib;
using testing::ScratchDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1. Gradient correctness on a tiny model, every coordinate of every tensor.
Outcome gradient_check() {
  constexpr double kTolerance = 1e-4, kEpsilon = 1e-4, kBudget = 60.0;
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t coords = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Model m = testing::random_model(seed, 6, 10, 8, 4, 4, 1.0);
    std::mt19937_64 rng(seed + 100);
    const Tensor src = testing::random_tensor({3, 8}, rng);
    const EncodedExample ex{TokenSequence::padded({3, 4, 5}, 3), TokenSequence::padded({5, 3, 7, kEos}, 4)};
    std::vector<std::uint64_t> freq(6);
    std::uniform_int_distribution<int> count(1, 50);
    for (auto& f : freq) f = count(rng);
    const auto lw = library_weights(freq);
    Tensor weights(Shape{9}, 1.0);
    for (std::size_t i = 0; i < 6; ++i) weights[kReservedTokens + i] = lw[i];
    LossBuilder f = [&](Tape& tape, std::span<const Var> v) {
      return example_loss(tape, bind_vars(v), src, ex, weights);
    };
    const auto r = finite_difference_check(f, flatten(m.params), kEpsilon, 100000, seed);
    worst = std::max(worst, r.max_relative_error);
    coords += r.coordinates_checked;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < kTolerance && secs < kBudget,
          "max rel err " + fmt("%.3g", worst) + " < 1e-4 over " + std::to_string(coords) + " coords, 20 seeds, " +
              fmt("%.1f", secs) + "s < 60s"};
}

// 2. Masking: no repeated library, masked entries exactly zero, rows sum to one.
Outcome mask_invariant() {
  std::mt19937_64 rng(2);
  std::size_t repeats = 0, bad_mask = 0, steps = 0;
  double worst_sum = 0.0;
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    const Model m = testing::random_model(trial + 10000, 6, 10, 8, 4, 4, 2.0);
    const TokenSequence src = testing::random_source(rng, 10, 5);
    const DecodeResult r = trial % 2 ? beam_search(m, src, 4, 10) : greedy_decode(m, src, 10);
    if (std::set<TokenId>(r.libraries.begin(), r.libraries.end()).size() != r.libraries.size()) ++repeats;
    DecodeSession session(m, src);
    DecoderState state = session.initial_state();
    std::vector<TokenId> emitted;
    for (std::size_t t = 0; t <= r.libraries.size(); ++t) {
      const DecoderStep step = session.step(state, emitted);
      const auto probs = step.probs.value().values();
      const Tensor mask = repeat_mask(m.dims.lib_vocab, emitted);
      double sum = 0.0;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        sum += probs[i];
        if (is_masked(mask[i]) && probs[i] != 0.0) ++bad_mask;
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      ++steps;
      if (t == r.libraries.size()) break;
      emitted.push_back(r.libraries[t]);
      state = step.state;
    }
  }
  return {repeats == 0 && bad_mask == 0 && worst_sum <= 1e-9,
          std::to_string(repeats) + " repeats, " + std::to_string(bad_mask) + " nonzero masked entries, max |sum-1| " +
              fmt("%.2g", worst_sum) + " <= 1e-9 over " + std::to_string(steps) + " steps, 1000 decodes"};
}

double sequence_score(const Model& m, const TokenSequence& src, const std::vector<TokenId>& libs, bool eos) {
  DecodeSession session(m, src);
  DecoderState state = session.initial_state();
  std::vector<TokenId> emitted;
  double score = 0.0;
  for (std::size_t t = 0; t <= libs.size(); ++t) {
    if (t == libs.size() && !eos) break;
    const DecoderStep step = session.step(state, emitted);
    const TokenId tok = t < libs.size() ? libs[t] : kEos;
    score += std::log(step.probs.value()[tok]);
    if (tok == kEos) break;
    emitted.push_back(tok);
    state = step.state;
  }
  return score;
}

// 3. Wide beam against exhaustive enumeration of no-repeat sequences.
Outcome beam_oracle() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(3);
  std::size_t agree = 0;
  const std::vector<TokenId> libs{3, 4, 5, 6, 7};
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const Model m = testing::random_model(trial + 20000, 5, 10, 8, 4, 4, 2.0);
    const TokenSequence src = testing::random_source(rng, 10, 4);
    double best = -std::numeric_limits<double>::infinity();
    std::vector<TokenId> best_seq;
    auto consider = [&](const std::vector<TokenId>& seq, bool eos) {
      const double s = sequence_score(m, src, seq, eos);
      if (s > best) {
        best = s;
        best_seq = seq;
      }
    };
    consider({}, true);
    for (auto a : libs) {
      consider({a}, true);
      for (auto b : libs) {
        if (b == a) continue;
        consider({a, b}, true);
        for (auto c : libs)
          if (c != a && c != b) consider({a, b, c}, false);
      }
    }
    agree += beam_search(m, src, 200, 3).libraries == best_seq;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {agree == 50 && secs < 30.0,
          std::to_string(agree) + "/50 models agree with exhaustive search, " + fmt("%.1f", secs) + "s < 30s"};
}

// 4. Memorizing the synthetic corpus.
Outcome overfit() {
  const auto start = std::chrono::steady_clock::now();
  const auto corpus = testing::synthetic_corpus();
  const TrainConfig cfg = testing::overfit_config();
  const TrainingData data = testing::synthetic_training_data(corpus, cfg);
  const Checkpoint ckpt = train(data, cfg, corpus.embeddings);
  const Model model = ckpt.model();
  std::vector<EvalCase<TokenId>> cases;
  for (const auto& ex : data.examples) {
    EvalCase<TokenId> c;
    c.recommended = greedy_decode(model, ex.source, 15).libraries;
    c.ground_truth.insert(ex.target.ids.begin(), ex.target.ids.begin() + static_cast<long>(ex.target.length - 1));
    cases.push_back(std::move(c));
  }
  const double recall = recall_rate_at_k(cases, 10);
  const double loss = mean_loss(model, data.examples);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {cfg.max_epochs <= 500 && recall >= 0.95 && loss < 0.10 && secs < 300.0,
          "recall rate@10 " + fmt("%.3f", recall) + " >= 0.95, loss " + fmt("%.2e", loss) + " < 0.10 after " +
              std::to_string(cfg.max_epochs) + " epochs, " + fmt("%.1f", secs) + "s < 300s"};
}

// 5. Metrics against brute-force references plus pinned examples.
Outcome metric_oracles() {
  std::mt19937_64 rng(5);
  std::map<int, int> freq;
  for (int i = 0; i < 25; ++i) freq[i] = std::uniform_int_distribution<int>(1, 300)(rng);
  auto f = [&](int id) { return freq.at(id); };
  std::uniform_int_distribution<std::size_t> len(0, 15), truth(1, 7), kdist(1, 20), ncases(1, 12);
  std::size_t mismatches = 0, p1_mismatches = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<EvalCase<int>> cases(ncases(rng));
    for (auto& c : cases) {
      std::vector<int> pool(25);
      for (int i = 0; i < 25; ++i) pool[i] = i;
      std::shuffle(pool.begin(), pool.end(), rng);
      c.recommended.assign(pool.begin(), pool.begin() + static_cast<long>(len(rng)));
      for (std::size_t i = 0, n = truth(rng); i < n; ++i) c.ground_truth.insert(static_cast<int>(rng() % 25));
    }
    const std::size_t k = kdist(rng);
    const double beta = trial % 3 == 0 ? 0.2 : std::uniform_real_distribution<double>(0, 2)(rng);
    std::size_t found = 0, hits = 0;
    long double psr = 0;
    for (const auto& c : cases) {
      std::set<int> top(c.recommended.begin(), c.recommended.begin() + static_cast<long>(std::min(k, c.recommended.size())));
      long double num = 0, den = 0;
      std::size_t h = 0;
      for (int id : c.ground_truth) {
        const long double s = std::pow(static_cast<long double>(freq[id]), -beta);
        den += s;
        if (top.count(id)) {
          ++h;
          num += s;
        }
      }
      found += h > 0;
      hits += h;
      psr += num / den;
    }
    const double n = static_cast<double>(cases.size());
    if (recall_rate_at_k(cases, k) != static_cast<double>(found) / n) ++mismatches;
    const double dp = std::abs(precision_at_k(cases, k) - static_cast<double>(hits) / (static_cast<double>(k) * n));
    const double ds = std::abs(psr_at_k(cases, k, f, beta) - static_cast<double>(psr / cases.size()));
    worst = std::max({worst, dp, ds});
    if (dp > 1e-12 || ds > 1e-12) ++mismatches;
    if (precision_at_k(cases, 1) != recall_rate_at_k(cases, 1)) ++p1_mismatches;
  }
  const auto w = library_weights(std::vector<std::uint64_t>{1, 3});
  const bool pinned_w = w == std::vector<double>{0.75, 0.25};
  const std::map<std::string, int> pf{{"a", 1}, {"b", 32}};
  const std::vector<EvalCase<std::string>> pc{{{"a", "x"}, {"a", "b"}}};
  const double p = psr_at_k(pc, 2, [&](const std::string& id) { return pf.at(id); }, 0.2);
  const bool pinned_psr = std::abs(p - 2.0 / 3.0) <= 1e-12;
  return {mismatches == 0 && p1_mismatches == 0 && pinned_w && pinned_psr,
          std::to_string(mismatches) + " mismatches in 1000 random case sets (max dev " + fmt("%.2g", worst) +
              " <= 1e-12), precision@1 == recall rate@1 in " + std::to_string(1000 - p1_mismatches) +
              "/1000, w[1,3] = [0.75,0.25] " + (pinned_w ? "ok" : "wrong") + ", PSR " + fmt("%.15f", p) + " vs 2/3"};
}

// 6. Two end-to-end runs with one seed.
Outcome determinism() {
  ScratchDir dir("accept");
  const auto corpus = testing::synthetic_corpus(6, 60, 80, 15, 4, 8);
  const auto files = testing::write_corpus(corpus, dir.path());
  TrainConfig cfg;
  cfg.word_dim = 8;
  cfg.lib_embed = 6;
  cfg.enc_hidden = 8;
  cfg.dec_hidden = 8;
  cfg.max_epochs = 4;
  cfg.batch_size = 8;
  cfg.max_src = 12;
  cfg.max_tgt = 6;
  std::string ckpt_bytes[2], reports[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path data = dir / ("data" + std::to_string(run));
    const fs::path model = dir / ("model" + std::to_string(run) + ".ckpt");
    PreprocessOptions opts;
    opts.dataset = files.dataset.string();
    opts.stopwords = files.stopwords.string();
    opts.domain_vocab = files.domain_vocab.string();
    opts.lemma_table = files.lemma_table.string();
    opts.out_dir = data.string();
    opts.min_libs = 1;
    opts.min_desc_words = 1;
    opts.min_lib_usage = 1;
    std::ostringstream log, report;
    cmd_preprocess(opts, log);
    cmd_train(data, files.embeddings.string(), cfg, model, log);
    cmd_evaluate(model, data / "test.jsonl", EvalOptions{}, true, report);
    ckpt_bytes[run] = testing::slurp(model);
    reports[run] = report.str();
  }
  const bool same_ckpt = !ckpt_bytes[0].empty() && ckpt_bytes[0] == ckpt_bytes[1];
  const bool same_report = !reports[0].empty() && reports[0] == reports[1];
  return {same_ckpt && same_report, std::string("checkpoints ") + (same_ckpt ? "bit-identical" : "differ") + " (" +
                                        std::to_string(ckpt_bytes[0].size()) + " bytes), reports " +
                                        (same_report ? "identical" : "differ")};
}

// 7. Checkpoint and embedding-file round-trips.
Outcome round_trips() {
  ScratchDir dir("accept");
  std::size_t ckpt_ok = 0, emb_ok = 0;
  std::mt19937_64 rng(7);
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const Checkpoint c = testing::random_checkpoint(trial + 500);
    const auto path = dir / "c.ckpt";
    save_checkpoint(c, path);
    const Checkpoint back = load_checkpoint(path);
    ckpt_ok += identical(c, back) && back.params == c.params && back.words == c.words &&
               back.libraries == c.libraries && back.frequencies == c.frequencies && back.config == c.config;

    EmbeddingTable t(std::uniform_int_distribution<std::size_t>(1, 10)(rng));
    const auto n = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
    for (std::size_t w = 0; w < n; ++w) {
      std::vector<double> v(t.dimension());
      for (auto& x : v) x = std::ldexp(std::uniform_real_distribution<double>(-1, 1)(rng),
                                       std::uniform_int_distribution<int>(-40, 40)(rng));
      t.set("tok" + std::to_string(w), v);
    }
    save_embeddings(t, (dir / "e.txt").string());
    emb_ok += load_embeddings((dir / "e.txt").string()) == t;
  }
  return {ckpt_ok == 100 && emb_ok == 100,
          "checkpoints " + std::to_string(ckpt_ok) + "/100, embedding files " + std::to_string(emb_ok) + "/100 lossless"};
}

// 8. Preprocessing fixture and idempotence.
Outcome preprocessing() {
  const std::set<std::string> stop{"a", "for"};
  const std::set<std::string> domain{"json", "parser", "library", "parsing", "parse", "files", "file"};
  const std::map<std::string, std::string> lemmas{{"parsing", "parse"}, {"files", "file"}, {"libraries", "library"}};
  const auto out = process_description("Json-Parser", "A library for parsing JSON files!", stop, domain, lemmas);
  const std::vector<std::string> expected{"json", "parser", "library", "parse", "json", "file"};
  std::mt19937_64 rng(8);
  const std::vector<std::string> pool{"A", "library", "for", "Parsing", "JSON", "files", "!", "parser", "x-y", "Files"};
  std::size_t stable = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::string desc;
    for (int i = 0; i < 12; ++i) desc += pool[rng() % pool.size()] + " ";
    const auto once = process_description("Json-Parser", desc, stop, domain, lemmas);
    std::string joined;
    for (const auto& t : once) joined += t + " ";
    stable += process_description("", joined, stop, domain, lemmas) == once;
  }
  return {out == expected && stable == 200, std::string("fixture ") + (out == expected ? "matches" : "differs") +
                                                ", idempotent on " + std::to_string(stable) + "/200 inputs"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_check}, {"mask invariant", mask_invariant},
      {"beam-search oracle", beam_oracle},      {"overfit oracle", overfit},
      {"metric oracles", metric_oracles},       {"determinism", determinism},
      {"round-trips", round_trips},             {"preprocessing conformance", preprocessing}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
