#pragma once

// Bi-LSTM encoder, additive attention and a repeat-masked LSTM decoder
// trained with popularity-weighted cross-entropy.
//
// Weight containers are templated on the element type so the same layout
// serves stored parameters (Tensor) and their tape bindings (Var).

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "req2lib/corpus.hpp"
#include "req2lib/tensor.hpp"

namespace req2lib {

struct ModelDims {
  std::size_t word_dim = 200;
  std::size_t lib_vocab = 0;  // output classes, reserved ids included
  std::size_t lib_embed = 64;
  std::size_t enc_hidden = 128;
  std::size_t dec_hidden = 128;

  std::size_t attention_dim() const noexcept { return dec_hidden; }
  std::size_t output_hidden() const noexcept { return dec_hidden; }
  std::size_t memory_dim() const noexcept { return 2 * enc_hidden; }
  std::size_t decoder_input() const noexcept { return lib_embed + memory_dim(); }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Forget-gate LSTM without peepholes: input, forget, output and candidate
/// gates, each with input-to-hidden and hidden-to-hidden weights and a bias.
template <class T>
struct LstmWeights {
  T input_x, forget_x, output_x, cell_x;  // [H x in]
  T input_h, forget_h, output_h, cell_h;  // [H x H]
  T input_b, forget_b, output_b, cell_b;  // [H]

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".input_x", self.input_x);
    f(prefix + ".forget_x", self.forget_x);
    f(prefix + ".output_x", self.output_x);
    f(prefix + ".cell_x", self.cell_x);
    f(prefix + ".input_h", self.input_h);
    f(prefix + ".forget_h", self.forget_h);
    f(prefix + ".output_h", self.output_h);
    f(prefix + ".cell_h", self.cell_h);
    f(prefix + ".input_b", self.input_b);
    f(prefix + ".forget_b", self.forget_b);
    f(prefix + ".output_b", self.output_b);
    f(prefix + ".cell_b", self.cell_b);
  }
};

/// e_i = score . tanh(state * s + memory * h_i)
template <class T>
struct AttentionWeights {
  T state;   // [A x H_dec]
  T memory;  // [A x 2H_enc]
  T score;   // [A]

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".state", self.state);
    f(prefix + ".memory", self.memory);
    f(prefix + ".score", self.score);
  }
};

/// o = vocab * relu(state * s + context * c)
template <class T>
struct OutputWeights {
  T state;    // [D x H_dec]
  T context;  // [D x 2H_enc]
  T vocab;    // [V x D]

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".state", self.state);
    f(prefix + ".context", self.context);
    f(prefix + ".vocab", self.vocab);
  }
};

template <class T>
struct ModelWeights {
  LstmWeights<T> encoder_forward;
  LstmWeights<T> encoder_backward;
  LstmWeights<T> decoder;
  AttentionWeights<T> attention;
  OutputWeights<T> output;
  T bridge;             // [H_dec x 2H_enc], initial decoder state from final encoder states
  T bridge_b;           // [H_dec]
  T library_embedding;  // [V x E_lib]
  T bos;                // [E_lib], decoder input before the first library

  /// Visits every trainable tensor in a fixed order with a stable name.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    LstmWeights<T>::visit(self.encoder_forward, "encoder_forward", f);
    LstmWeights<T>::visit(self.encoder_backward, "encoder_backward", f);
    LstmWeights<T>::visit(self.decoder, "decoder", f);
    AttentionWeights<T>::visit(self.attention, "attention", f);
    OutputWeights<T>::visit(self.output, "output", f);
    f(std::string("bridge"), self.bridge);
    f(std::string("bridge_b"), self.bridge_b);
    f(std::string("library_embedding"), self.library_embedding);
    f(std::string("bos"), self.bos);
  }
};

using LstmParams = LstmWeights<Tensor>;
using AttentionParams = AttentionWeights<Tensor>;
using OutputParams = OutputWeights<Tensor>;
using ModelParams = ModelWeights<Tensor>;
using BoundWeights = ModelWeights<Var>;

/// Expected shape of every parameter, by name, in for_each order.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelDims& d) {
  std::vector<std::pair<std::string, Shape>> shapes;
  auto lstm = [&](const std::string& prefix, std::size_t in, std::size_t h) {
    for (const char* g : {"input", "forget", "output", "cell"}) shapes.push_back({prefix + "." + g + "_x", {h, in}});
    for (const char* g : {"input", "forget", "output", "cell"}) shapes.push_back({prefix + "." + g + "_h", {h, h}});
    for (const char* g : {"input", "forget", "output", "cell"}) shapes.push_back({prefix + "." + g + "_b", {h}});
  };
  lstm("encoder_forward", d.word_dim, d.enc_hidden);
  lstm("encoder_backward", d.word_dim, d.enc_hidden);
  lstm("decoder", d.decoder_input(), d.dec_hidden);
  shapes.push_back({"attention.state", {d.attention_dim(), d.dec_hidden}});
  shapes.push_back({"attention.memory", {d.attention_dim(), d.memory_dim()}});
  shapes.push_back({"attention.score", {d.attention_dim()}});
  shapes.push_back({"output.state", {d.output_hidden(), d.dec_hidden}});
  shapes.push_back({"output.context", {d.output_hidden(), d.memory_dim()}});
  shapes.push_back({"output.vocab", {d.lib_vocab, d.output_hidden()}});
  shapes.push_back({"bridge", {d.dec_hidden, d.memory_dim()}});
  shapes.push_back({"bridge_b", {d.dec_hidden}});
  shapes.push_back({"library_embedding", {d.lib_vocab, d.lib_embed}});
  shapes.push_back({"bos", {d.lib_embed}});
  return shapes;
}

inline void validate_dims(const ModelDims& d) {
  if (!d.word_dim || !d.lib_embed || !d.enc_hidden || !d.dec_hidden)
    throw std::invalid_argument("model dimensions must be positive");
  if (d.lib_vocab <= kReservedTokens) throw std::invalid_argument("library vocabulary holds no libraries");
}

/// Throws ShapeError unless every tensor has the shape `d` implies.
inline void validate_params(const ModelParams& p, const ModelDims& d) {
  const auto expected = parameter_shapes(d);
  std::size_t i = 0;
  p.for_each([&](const std::string& name, const Tensor& t) {
    if (i >= expected.size() || expected[i].first != name || expected[i].second != t.shape())
      throw ShapeError("parameter " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                       (i < expected.size() ? shape_string(expected[i].second) : "none"));
    ++i;
  });
}

/// Uniform(-r, r) initialization with r = 1/sqrt(fan-in). LSTM tensors use the
/// fan-in of the gate pre-activation (input + hidden).
inline ModelParams init_params(const ModelDims& d, std::mt19937_64& rng) {
  validate_dims(d);
  ModelParams p;
  const auto shapes = parameter_shapes(d);
  std::size_t i = 0;
  p.for_each([&](const std::string& name, Tensor& t) {
    const Shape& shape = shapes[i++].second;
    double fan_in = static_cast<double>(shape.size() == 2 ? shape[1] : shape[0]);
    if (name.starts_with("encoder_")) fan_in = static_cast<double>(d.word_dim + d.enc_hidden);
    if (name.starts_with("decoder.")) fan_in = static_cast<double>(d.decoder_input() + d.dec_hidden);
    if (name == "bridge_b") fan_in = static_cast<double>(d.memory_dim());
    const double r = 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> dist(-r, r);
    t = Tensor(shape);
    for (auto& v : t.values()) v = dist(rng);
  });
  return p;
}

inline std::vector<Tensor> flatten(const ModelParams& p) {
  std::vector<Tensor> out;
  p.for_each([&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

inline ModelParams unflatten(std::span<const Tensor> tensors, const ModelDims& d) {
  ModelParams p;
  std::size_t i = 0;
  p.for_each([&](const std::string&, Tensor& t) {
    if (i >= tensors.size()) throw std::invalid_argument("unflatten: too few tensors");
    t = tensors[i++];
  });
  if (i != tensors.size()) throw std::invalid_argument("unflatten: too many tensors");
  validate_params(p, d);
  return p;
}

/// Binds parameters as gradient-tracked leaves.
inline BoundWeights bind_parameters(Tape& tape, const ModelParams& p) {
  std::vector<Var> vars;
  p.for_each([&](const std::string&, const Tensor& t) { vars.push_back(tape.parameter(t)); });
  BoundWeights w;
  std::size_t i = 0;
  w.for_each([&](const std::string&, Var& v) { v = vars[i++]; });
  return w;
}

/// Binds parameters as constants (inference; no gradient bookkeeping).
inline BoundWeights bind_constants(Tape& tape, const ModelParams& p) {
  std::vector<Var> vars;
  p.for_each([&](const std::string&, const Tensor& t) { vars.push_back(tape.constant(t)); });
  BoundWeights w;
  std::size_t i = 0;
  w.for_each([&](const std::string&, Var& v) { v = vars[i++]; });
  return w;
}

/// Reassembles weights from variables given in for_each order.
inline BoundWeights bind_vars(std::span<const Var> vars) {
  BoundWeights w;
  std::size_t i = 0;
  w.for_each([&](const std::string&, Var& v) {
    if (i >= vars.size()) throw std::invalid_argument("bind_vars: too few variables");
    v = vars[i++];
  });
  if (i != vars.size()) throw std::invalid_argument("bind_vars: too many variables");
  return w;
}

struct ForwardOptions {
  bool training = false;
  double dropout_p = 0.0;
  std::mt19937_64* rng = nullptr;
};

struct LstmState {
  Var h;
  Var c;
};

inline LstmState lstm_step(Var x, Var h_prev, Var c_prev, const LstmWeights<Var>& p) {
  auto gate = [&](Var wx, Var wh, Var b) { return add(add(matvec(wx, x), matvec(wh, h_prev)), b); };
  const Var i = sigmoid(gate(p.input_x, p.input_h, p.input_b));
  const Var f = sigmoid(gate(p.forget_x, p.forget_h, p.forget_b));
  const Var o = sigmoid(gate(p.output_x, p.output_h, p.output_b));
  const Var g = tanh(gate(p.cell_x, p.cell_h, p.cell_b));
  if (c_prev.shape() != f.shape()) throw ShapeError("lstm_step: cell state " + shape_string(c_prev.shape()));
  const Var c = add(mul(f, c_prev), mul(i, g));
  return LstmState{mul(o, tanh(c)), c};
}

struct EncoderOutput {
  Var states;            // [T x 2H_enc]; rows past valid_len are zero
  std::size_t valid_len = 0;
  Var last_forward;      // forward state after the last valid token
  Var first_backward;    // backward state after reading back to the first token
};

/// Runs the forward LSTM over rows [0, valid_len) and the backward LSTM over
/// the same rows in reverse; row t of the result is [forward_t; backward_t].
inline EncoderOutput encode(Tape& tape, const Tensor& inputs, std::size_t valid_len, const LstmWeights<Var>& forward,
                            const LstmWeights<Var>& backward) {
  if (inputs.rank() != 2) throw ShapeError("encode: inputs must be a matrix");
  if (valid_len == 0) throw std::invalid_argument("encode: input holds no tokens");
  if (valid_len > inputs.rows()) throw std::invalid_argument("encode: valid length exceeds input rows");
  const std::size_t rows = inputs.rows();
  const std::size_t hidden = forward.input_b.value().numel();

  std::vector<Var> xs;
  xs.reserve(valid_len);
  for (std::size_t t = 0; t < valid_len; ++t) {
    const auto r = inputs.row(t);
    xs.push_back(tape.constant(Tensor(Shape{inputs.cols()}, std::vector<double>(r.begin(), r.end()))));
  }
  const Var zero = tape.constant(Tensor(Shape{hidden}));

  std::vector<Var> fwd(valid_len), bwd(valid_len);
  LstmState s{zero, zero};
  for (std::size_t t = 0; t < valid_len; ++t) fwd[t] = (s = lstm_step(xs[t], s.h, s.c, forward)).h;
  s = LstmState{zero, zero};
  for (std::size_t t = valid_len; t-- > 0;) bwd[t] = (s = lstm_step(xs[t], s.h, s.c, backward)).h;

  std::vector<Var> out;
  out.reserve(rows);
  for (std::size_t t = 0; t < valid_len; ++t) out.push_back(concat({fwd[t], bwd[t]}));
  if (rows > valid_len) {
    const Var pad = tape.constant(Tensor(Shape{2 * hidden}));
    out.resize(rows, pad);
  }
  return EncoderOutput{stack_rows(out), valid_len, fwd.back(), bwd.front()};
}

/// Encoder states with their attention projections precomputed.
struct AttentionMemory {
  Var states;      // [T x 2H_enc]
  Var states_t;    // [2H_enc x T]
  Var keys;        // [T x A]
  std::size_t valid_len = 0;
};

inline AttentionMemory attention_memory(Var states, std::size_t valid_len, const AttentionWeights<Var>& p) {
  if (valid_len == 0 || valid_len > states.value().rows())
    throw std::invalid_argument("attention: valid length must lie in [1, rows]");
  return AttentionMemory{states, transpose(states), matmul(states, transpose(p.memory)), valid_len};
}

struct AttentionResult {
  Var weights;  // [T], zero past valid_len
  Var context;  // [2H_enc]
};

inline AttentionResult attention(Var s, const AttentionMemory& memory, const AttentionWeights<Var>& p) {
  const Var scores = matvec(tanh(add(memory.keys, matvec(p.state, s))), p.score);
  Tensor mask(scores.shape());
  for (std::size_t i = memory.valid_len; i < mask.numel(); ++i) mask[i] = kMasked;
  const Var alpha = masked_softmax(scores, mask);
  return AttentionResult{alpha, matvec(memory.states_t, alpha)};
}

inline AttentionResult attention(Var s, Var states, std::size_t valid_len, const AttentionWeights<Var>& p) {
  return attention(s, attention_memory(states, valid_len, p), p);
}

struct DecoderState {
  Var s;        // decoder hidden state
  Var cell;     // decoder cell state
  Var context;  // attention context from the previous step
};

/// s_0 = tanh(bridge [forward_last; backward_first] + bridge_b); cell and context start at zero.
inline DecoderState initial_decoder_state(Tape& tape, const EncoderOutput& enc, const BoundWeights& w) {
  const Var s0 = tanh(add(matvec(w.bridge, concat({enc.last_forward, enc.first_backward})), w.bridge_b));
  const std::size_t hidden = w.decoder.input_b.value().numel();
  return DecoderState{s0, tape.constant(Tensor(Shape{hidden})),
                      tape.constant(Tensor(Shape{enc.states.value().cols()}))};
}

/// Additive mask over the output classes: PAD and UNK are never produced and
/// every id in `emitted` is blocked; EOS stays available.
inline Tensor repeat_mask(std::size_t vocab, std::span<const TokenId> emitted) {
  Tensor mask(Shape{vocab});
  mask[kPad] = kMasked;
  mask[kUnk] = kMasked;
  for (auto id : emitted) {
    if (id < kReservedTokens || id >= vocab)
      throw std::invalid_argument("mask set may only hold library ids, got " + std::to_string(id));
    mask[id] = kMasked;
  }
  return mask;
}

struct DecoderStep {
  DecoderState state;
  Var attention;  // alpha_t
  Var logits;     // o_t
  Var probs;      // y_t
};

/// One decoder step. The LSTM consumes [emb(previous); previous context],
/// attention then reads the new state, and the output layer combines both.
/// `previous` is empty for the first step (BOS).
inline DecoderStep decoder_step(std::optional<TokenId> previous, const DecoderState& prev, const AttentionMemory& memory,
                                std::span<const TokenId> emitted, const BoundWeights& w,
                                const ForwardOptions& opts = {}) {
  const std::size_t vocab = w.output.vocab.value().rows();
  Tensor mask = repeat_mask(vocab, emitted);
  if (emitted.size() + 2 >= vocab) {
    bool open = false;
    for (std::size_t i = 0; i < vocab && !open; ++i) open = !is_masked(mask[i]);
    if (!open) throw std::invalid_argument("decoder_step: mask covers the whole vocabulary");
  }
  if (previous && (*previous < kReservedTokens || *previous >= vocab))
    throw std::invalid_argument("decoder_step: previous output must be a library id");
  const Var emb = previous ? row(w.library_embedding, *previous) : w.bos;
  const LstmState next = lstm_step(concat({emb, prev.context}), prev.s, prev.cell, w.decoder);
  const AttentionResult att = attention(next.h, memory, w.attention);
  const Var s_out = dropout(next.h, opts.dropout_p, opts.training, opts.rng);
  const Var hidden = relu(add(matvec(w.output.state, s_out), matvec(w.output.context, att.context)));
  const Var logits = matvec(w.output.vocab, hidden);
  const Var probs = masked_softmax(logits, mask);
  return DecoderStep{DecoderState{next.h, next.c, att.context}, att.weights, logits, probs};
}

/// w_j = 1 - f_j / sum_k f_k over the given libraries.
inline std::vector<double> library_weights(std::span<const std::uint64_t> frequencies) {
  if (frequencies.size() < 2) throw std::invalid_argument("library weights need at least two libraries");
  double total = 0.0;
  for (auto f : frequencies) total += static_cast<double>(f);
  if (!(total > 0.0)) throw std::invalid_argument("library frequencies sum to zero");
  std::vector<double> w;
  w.reserve(frequencies.size());
  for (auto f : frequencies) w.push_back(1.0 - static_cast<double>(f) / total);
  return w;
}

/// Per-class loss weights over the library vocabulary: library weights for
/// library ids, 1 for the reserved ids (EOS is the only one ever targeted).
inline Tensor class_weights(const Vocabulary& libs, const LibraryFrequencyTable& freq) {
  std::vector<std::uint64_t> counts;
  for (std::size_t id = kReservedTokens; id < libs.size(); ++id) counts.push_back(freq.count(libs.token(id)));
  const auto w = library_weights(counts);
  Tensor out(Shape{libs.size()}, 1.0);
  std::copy(w.begin(), w.end(), out.values().begin() + kReservedTokens);
  return out;
}

/// -sum_j w[target_j] * log y_j[target_j] for one target sequence.
inline Var sequence_loss(std::span<const Var> step_probs, std::span<const TokenId> targets, const Tensor& weights) {
  if (step_probs.size() != targets.size() || targets.empty())
    throw std::invalid_argument("sequence_loss: need one probability vector per target");
  std::vector<Var> terms;
  terms.reserve(targets.size());
  for (std::size_t j = 0; j < targets.size(); ++j) {
    const Var p = pick(step_probs[j], targets[j]);
    if (!(p.value().item() > 0.0))
      throw std::domain_error("sequence_loss: target " + std::to_string(targets[j]) + " has zero probability at step " +
                              std::to_string(j));
    terms.push_back(scale(log(p), -weights[targets[j]]));
  }
  return add_n(terms);
}

/// Teacher-forced loss of one encoded example. `source` holds the embedded
/// source rows; dropout applies to encoder outputs and to the decoder state
/// feeding the output layer when `opts.training` is set.
inline Var example_loss(Tape& tape, const BoundWeights& w, const Tensor& source, const EncodedExample& example,
                        const Tensor& weights, const ForwardOptions& opts = {}) {
  const EncoderOutput enc = encode(tape, source, example.source.length, w.encoder_forward, w.encoder_backward);
  const Var states = dropout(enc.states, opts.dropout_p, opts.training, opts.rng);
  const AttentionMemory memory = attention_memory(states, enc.valid_len, w.attention);
  DecoderState state = initial_decoder_state(tape, enc, w);

  const auto& tgt = example.target.ids;
  const std::size_t n = example.target.length;
  if (n == 0) throw std::invalid_argument("example_loss: empty target");
  std::vector<Var> probs;
  probs.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::optional<TokenId> prev = j ? std::optional<TokenId>(tgt[j - 1]) : std::nullopt;
    DecoderStep step = decoder_step(prev, state, memory, std::span<const TokenId>(tgt.data(), j), w, opts);
    probs.push_back(step.probs);
    state = step.state;
  }
  return sequence_loss(probs, std::span<const TokenId>(tgt.data(), n), weights);
}

inline bool operator==(const ModelParams& a, const ModelParams& b) { return flatten(a) == flatten(b); }

/// Trainable parameters plus the frozen inputs a forward pass needs.
struct Model {
  ModelDims dims;
  ModelParams params;
  Tensor word_embeddings;  // [word vocab x word_dim], frozen
  Tensor weights;          // [lib vocab], per-class loss weights

  friend bool operator==(const Model&, const Model&) = default;
};

}  // namespace req2lib
