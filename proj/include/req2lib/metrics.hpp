#pragma once

// Top-k evaluation: recall rate@k, precision@k and popularity-stratified recall@k.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "req2lib/corpus.hpp"
#include "req2lib/decode.hpp"
#include "req2lib/trainer.hpp"

namespace req2lib {

template <class Id>
struct EvalCase {
  std::vector<Id> recommended;  // ranked, no duplicates
  std::set<Id> ground_truth;    // non-empty
};

namespace detail {

template <class Id>
void check_cases(const std::vector<EvalCase<Id>>& cases, std::size_t k) {
  if (cases.empty()) throw std::invalid_argument("metrics: empty case list");
  if (k < 1) throw std::invalid_argument("metrics: k must be >= 1");
  for (const auto& c : cases)
    if (c.ground_truth.empty()) throw std::invalid_argument("metrics: case with empty ground truth");
}

template <class Id>
std::size_t hits_at_k(const EvalCase<Id>& c, std::size_t k) {
  const std::size_t n = std::min(k, c.recommended.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += c.ground_truth.count(c.recommended[i]);
  return hits;
}

}  // namespace detail

/// Fraction of cases with at least one ground-truth library among the top k.
template <class Id>
double recall_rate_at_k(const std::vector<EvalCase<Id>>& cases, std::size_t k) {
  detail::check_cases(cases, k);
  std::size_t found = 0;
  for (const auto& c : cases) found += detail::hits_at_k(c, k) > 0 ? 1 : 0;
  return static_cast<double>(found) / static_cast<double>(cases.size());
}

/// Mean over cases of hits / k; missing slots of short lists count as misses.
template <class Id>
double precision_at_k(const std::vector<EvalCase<Id>>& cases, std::size_t k) {
  detail::check_cases(cases, k);
  double total = 0.0;
  for (const auto& c : cases) total += static_cast<double>(detail::hits_at_k(c, k)) / static_cast<double>(k);
  return total / static_cast<double>(cases.size());
}

/// Mean over cases of sum_{hits} s_i / sum_{truth} s_i with s_i = count_i^-beta.
/// `frequency(id)` returns the corpus count of a library.
template <class Id, class Frequency>
double psr_at_k(const std::vector<EvalCase<Id>>& cases, std::size_t k, Frequency&& frequency, double beta) {
  detail::check_cases(cases, k);
  if (!(beta >= 0.0)) throw std::invalid_argument("psr_at_k: beta must be >= 0");
  auto weight = [&](const Id& id) {
    const double f = static_cast<double>(frequency(id));
    if (!(f > 0.0)) throw std::invalid_argument("psr_at_k: ground-truth library with zero frequency");
    return std::pow(f, -beta);
  };
  double total = 0.0;
  for (const auto& c : cases) {
    double denom = 0.0;
    for (const auto& id : c.ground_truth) denom += weight(id);
    double num = 0.0;
    const std::size_t n = std::min(k, c.recommended.size());
    for (std::size_t i = 0; i < n; ++i)
      if (c.ground_truth.count(c.recommended[i])) num += weight(c.recommended[i]);
    total += num / denom;
  }
  return total / static_cast<double>(cases.size());
}

struct TestCase {
  std::string name;
  std::string description;
  std::vector<std::string> libraries;  // ground truth
};

struct EvalOptions {
  std::vector<std::size_t> ks{1, 5, 10, 20};
  double beta = 0.2;
  std::size_t beam_width = 1;
  std::size_t threads = 1;
};

struct EvalReport {
  std::vector<std::size_t> ks;
  std::vector<double> recall_rate;
  std::vector<double> precision;
  std::vector<double> psr;
  double beta = 0.2;
  std::size_t beam_width = 1;
  std::size_t cases = 0;
  std::size_t skipped = 0;  // test projects without any in-vocabulary library

  std::string decoder() const {
    return beam_width == 1 ? std::string("greedy") : "beam(width=" + std::to_string(beam_width) + ")";
  }
};

class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(std::size_t index, const std::string& what)
      : std::runtime_error("test case " + std::to_string(index) + ": " + what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Decodes every test description with the checkpoint and scores the top-k
/// lists. Ground truth is restricted to the checkpoint's library vocabulary;
/// projects left without ground truth are skipped and counted.
inline EvalReport evaluate(const Checkpoint& ckpt, const std::vector<TestCase>& tests, const EvalOptions& opts = {}) {
  if (tests.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (opts.ks.empty()) throw std::invalid_argument("evaluate: no k values");
  const std::size_t max_k = *std::max_element(opts.ks.begin(), opts.ks.end());
  const Model model = ckpt.model();

  std::vector<EvalCase<TokenId>> cases(tests.size());
  std::vector<bool> usable(tests.size(), false);
  std::vector<std::string> errors(tests.size());
  auto run = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < tests.size(); i += stride) {
      try {
        for (const auto& lib : tests[i].libraries)
          if (ckpt.libraries.contains(lib)) cases[i].ground_truth.insert(ckpt.libraries.id(lib));
        if (cases[i].ground_truth.empty()) continue;
        const TokenSequence src = encode_description(ckpt, tests[i].name, tests[i].description);
        cases[i].recommended = beam_search(model, src, opts.beam_width, max_k).libraries;
        usable[i] = true;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(opts.threads, tests.size()));
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run, t, threads);
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < tests.size(); ++i)
    if (!errors[i].empty()) throw EvaluationError(i, errors[i]);

  std::vector<EvalCase<TokenId>> kept;
  for (std::size_t i = 0; i < tests.size(); ++i)
    if (usable[i]) kept.push_back(std::move(cases[i]));
  if (kept.empty()) throw std::invalid_argument("evaluate: no test project has an in-vocabulary library");

  EvalReport report;
  report.ks = opts.ks;
  report.beta = opts.beta;
  report.beam_width = opts.beam_width;
  report.cases = kept.size();
  report.skipped = tests.size() - kept.size();
  auto freq = [&](TokenId id) { return ckpt.frequencies.count(ckpt.libraries.token(id)); };
  for (auto k : opts.ks) {
    report.recall_rate.push_back(recall_rate_at_k(kept, k));
    report.precision.push_back(precision_at_k(kept, k));
    report.psr.push_back(psr_at_k(kept, k, freq, opts.beta));
  }
  return report;
}

/// Aligned plain-text table: one row per metric, one column per k.
inline std::string format_table(const EvalReport& r) {
  std::ostringstream out;
  out << "# cases=" << r.cases << " skipped=" << r.skipped << " decoder=" << r.decoder()
      << " precision=macro psr=macro beta=" << r.beta << '\n';
  out << std::left << std::setw(16) << "Metrics";
  for (auto k : r.ks) out << std::right << std::setw(9) << ("k=" + std::to_string(k));
  out << '\n';
  auto row = [&](const char* name, const std::vector<double>& values) {
    out << std::left << std::setw(16) << name << std::fixed << std::setprecision(3);
    for (double v : values) out << std::right << std::setw(9) << v;
    out << '\n';
    out.unsetf(std::ios::fixed);
  };
  row("Recall rate@k", r.recall_rate);
  row("Precision@k", r.precision);
  row("PSR@k", r.psr);
  return out.str();
}

/// One `key=value` per line; metric keys are `<metric>@<k>`.
inline std::string format_key_values(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "cases=" << r.cases << '\n' << "skipped=" << r.skipped << '\n' << "decoder=" << r.decoder() << '\n';
  out << "beta=" << r.beta << '\n' << "precision_averaging=macro\n" << "psr_averaging=macro\n";
  for (std::size_t i = 0; i < r.ks.size(); ++i) {
    out << "recall_rate@" << r.ks[i] << '=' << r.recall_rate[i] << '\n';
    out << "precision@" << r.ks[i] << '=' << r.precision[i] << '\n';
    out << "psr@" << r.ks[i] << '=' << r.psr[i] << '\n';
  }
  return out.str();
}

}  // namespace req2lib
