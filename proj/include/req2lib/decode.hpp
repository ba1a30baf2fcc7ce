#pragma once

// Inference: greedy decoding, beam search and the end-to-end recommend call.

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "req2lib/corpus.hpp"
#include "req2lib/embeddings.hpp"
#include "req2lib/model.hpp"
#include "req2lib/trainer.hpp"

namespace req2lib {

struct DecodeResult {
  std::vector<TokenId> libraries;     // emission order, EOS excluded
  std::vector<double> probabilities;  // probability of each library at its step
  double score = 0.0;                 // sum of log-probabilities, EOS included when emitted
  bool finished = false;              // EOS was emitted
};

/// Per-input decoding context: encoder output and bound weights on one tape.
class DecodeSession {
 public:
  DecodeSession(const Model& model, const TokenSequence& source)
      : weights_(bind_constants(tape_, model.params)), vocab_(model.dims.lib_vocab) {
    if (source.length == 0) throw std::invalid_argument("decode: source holds no tokens");
    const EncoderOutput enc = encode(tape_, embed_sequence(source, model.word_embeddings), source.length,
                                     weights_.encoder_forward, weights_.encoder_backward);
    memory_ = attention_memory(enc.states, enc.valid_len, weights_.attention);
    initial_ = initial_decoder_state(tape_, enc, weights_);
  }

  DecodeSession(const DecodeSession&) = delete;
  DecodeSession& operator=(const DecodeSession&) = delete;

  const DecoderState& initial_state() const noexcept { return initial_; }
  std::size_t vocab() const noexcept { return vocab_; }

  /// Decoder step after `emitted` (the previous output is its last element).
  DecoderStep step(const DecoderState& state, std::span<const TokenId> emitted) {
    const std::optional<TokenId> prev = emitted.empty() ? std::nullopt : std::optional<TokenId>(emitted.back());
    return decoder_step(prev, state, memory_, emitted, weights_);
  }

 private:
  Tape tape_;
  BoundWeights weights_;
  std::size_t vocab_;
  AttentionMemory memory_;
  DecoderState initial_;
};

namespace detail {

/// Index of the largest probability; the lowest id wins ties.
inline TokenId argmax(std::span<const double> probs) {
  TokenId best = 0;
  for (TokenId i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = i;
  return best;
}

}  // namespace detail

/// Repeatedly emits the most probable unmasked output until EOS or `max_steps`.
inline DecodeResult greedy_decode(const Model& model, const TokenSequence& source, std::size_t max_steps) {
  if (max_steps < 1) throw std::invalid_argument("greedy_decode: max_steps must be >= 1");
  DecodeSession session(model, source);
  DecodeResult out;
  DecoderState state = session.initial_state();
  for (std::size_t t = 0; t < max_steps; ++t) {
    const DecoderStep step = session.step(state, out.libraries);
    const auto probs = step.probs.value().values();
    const TokenId best = detail::argmax(probs);
    out.score += std::log(probs[best]);
    if (best == kEos) {
      out.finished = true;
      break;
    }
    out.libraries.push_back(best);
    out.probabilities.push_back(probs[best]);
    state = step.state;
  }
  return out;
}

/// Beam search over library sequences scored by summed log-probability.
/// Hypotheses that emit EOS retire into a pool; at `max_steps` the live ones
/// retire as they are. The search stops early once the best retired score
/// cannot be beaten by any live hypothesis. Width 1 reproduces greedy_decode.
inline DecodeResult beam_search(const Model& model, const TokenSequence& source, std::size_t beam_width,
                                std::size_t max_steps) {
  if (beam_width < 1) throw std::invalid_argument("beam_search: beam_width must be >= 1");
  if (max_steps < 1) throw std::invalid_argument("beam_search: max_steps must be >= 1");
  DecodeSession session(model, source);

  struct Hypothesis {
    DecodeResult result;
    DecoderState state;
  };
  struct Candidate {
    std::size_t parent;
    TokenId token;
    double prob;
    double score;
  };

  std::vector<Hypothesis> live{Hypothesis{DecodeResult{}, session.initial_state()}};
  std::vector<DecodeResult> pool;
  auto best_pooled = [&]() {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& r : pool) best = std::max(best, r.score);
    return best;
  };

  for (std::size_t t = 0; t < max_steps && !live.empty(); ++t) {
    std::vector<DecoderStep> steps;
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < live.size(); ++h) {
      steps.push_back(session.step(live[h].state, live[h].result.libraries));
      const auto probs = steps.back().probs.value().values();
      for (TokenId tok = 0; tok < probs.size(); ++tok)
        if (probs[tok] > 0.0) candidates.push_back({h, tok, probs[tok], live[h].result.score + std::log(probs[tok])});
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    if (candidates.size() > beam_width) candidates.resize(beam_width);

    std::vector<Hypothesis> next;
    for (const auto& c : candidates) {
      DecodeResult r = live[c.parent].result;
      r.score = c.score;
      if (c.token == kEos) {
        r.finished = true;
        pool.push_back(std::move(r));
        continue;
      }
      r.libraries.push_back(c.token);
      r.probabilities.push_back(c.prob);
      next.push_back(Hypothesis{std::move(r), steps[c.parent].state});
    }
    live = std::move(next);
    if (!pool.empty() && !live.empty()) {
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& h : live) best_live = std::max(best_live, h.result.score);
      if (best_pooled() >= best_live) live.clear();
    }
  }
  for (auto& h : live) pool.push_back(std::move(h.result));

  // Highest score; earliest retired wins ties.
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i)
    if (pool[i].score > pool[best].score) best = i;
  return pool[best];
}

class NoSignalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Recommendation {
  std::vector<std::string> libraries;
  std::vector<double> probabilities;
  bool truncated = false;  // fewer than k libraries were decoded
};

/// Encodes free text with the checkpoint's pipeline and vocabulary.
inline TokenSequence encode_description(const Checkpoint& ckpt, std::string_view name, std::string_view text) {
  const auto tokens = process_description(name, text, ckpt.tables);
  if (tokens.empty()) throw NoSignalError("no-signal: description has no usable words after preprocessing");
  std::vector<TokenId> ids;
  for (const auto& t : tokens) ids.push_back(ckpt.words.id(t));
  return TokenSequence::padded(std::move(ids), ckpt.config.max_src);
}

/// Top-k libraries for a free-text description, decoded by beam search with
/// max_steps = k + 5. Width 1 is greedy decoding.
inline Recommendation recommend(const Checkpoint& ckpt, const Model& model, std::string_view description, std::size_t k,
                                std::size_t beam_width) {
  if (k < 1) throw std::invalid_argument("recommend: k must be >= 1");
  const TokenSequence source = encode_description(ckpt, "", description);
  const DecodeResult decoded = beam_search(model, source, beam_width, k + 5);
  Recommendation rec;
  const std::size_t n = std::min(k, decoded.libraries.size());
  for (std::size_t i = 0; i < n; ++i) {
    rec.libraries.push_back(ckpt.libraries.token(decoded.libraries[i]));
    rec.probabilities.push_back(decoded.probabilities[i]);
  }
  rec.truncated = n < k;
  return rec;
}

inline Recommendation recommend(const Checkpoint& ckpt, std::string_view description, std::size_t k,
                                std::size_t beam_width) {
  return recommend(ckpt, ckpt.model(), description, k, beam_width);
}

}  // namespace req2lib
