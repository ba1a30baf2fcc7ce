#pragma once

// Mini-batch training: teacher-forced weighted cross-entropy, gradient
// clipping by global norm and Adam updates.

#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "req2lib/corpus.hpp"
#include "req2lib/embeddings.hpp"
#include "req2lib/model.hpp"
#include "req2lib/tensor.hpp"

namespace req2lib {

struct TrainConfig {
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double clip_max_norm = 5.0;
  double dropout_p = 0.3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  std::uint64_t seed = 42;
  std::size_t max_src = 64;
  std::size_t max_tgt = 32;
  std::size_t word_dim = 200;
  std::size_t lib_embed = 64;
  std::size_t enc_hidden = 128;
  std::size_t dec_hidden = 128;
  double train_fraction = 0.8;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate(const TrainConfig& c) {
  auto fail = [](const std::string& what) { throw ConfigError("invalid training config: " + what); };
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) fail("learning_rate must be > 0");
  if (!(c.dropout_p >= 0.0 && c.dropout_p < 1.0)) fail("dropout_p must lie in [0, 1)");
  if (!(c.clip_max_norm > 0.0)) fail("clip_max_norm must be > 0");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0) || !(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0))
    fail("adam betas must lie in [0, 1)");
  if (!(c.adam_epsilon > 0.0)) fail("adam_epsilon must be > 0");
  if (c.max_src < 1 || c.max_tgt < 1) fail("max_src and max_tgt must be >= 1");
  if (c.word_dim < 1 || c.lib_embed < 1 || c.enc_hidden < 1 || c.dec_hidden < 1) fail("layer sizes must be >= 1");
  if (!(c.train_fraction > 0.0 && c.train_fraction <= 1.0)) fail("train_fraction must lie in (0, 1]");
}

namespace detail {

template <class F>
void visit_config(TrainConfig& c, F&& f) {
  f("learning_rate", c.learning_rate);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_epsilon", c.adam_epsilon);
  f("clip_max_norm", c.clip_max_norm);
  f("dropout_p", c.dropout_p);
  f("batch_size", c.batch_size);
  f("max_epochs", c.max_epochs);
  f("seed", c.seed);
  f("max_src", c.max_src);
  f("max_tgt", c.max_tgt);
  f("word_dim", c.word_dim);
  f("lib_embed", c.lib_embed);
  f("enc_hidden", c.enc_hidden);
  f("dec_hidden", c.dec_hidden);
  f("train_fraction", c.train_fraction);
}

template <class T>
bool parse_number(const std::string& text, T& out) {
  std::istringstream in(text);
  T v{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!text.empty() && text.front() == '-') return false;
  }
  in >> v;
  if (!in || in.peek() != std::char_traits<char>::eof()) return false;
  out = v;
  return true;
}

}  // namespace detail

/// Sets one field by name; unknown keys and unparsable values throw ConfigError.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  bool found = false;
  detail::visit_config(c, [&](const char* name, auto& field) {
    if (key != name) return;
    found = true;
    if (!detail::parse_number(value, field)) throw ConfigError("bad value for " + key + ": `" + value + "`");
  });
  if (!found) throw ConfigError("unknown config key `" + key + "`");
}

/// Flat `key = value` lines; `#` starts a comment.
inline TrainConfig parse_train_config(std::istream& in, TrainConfig base = {}) {
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    set_config_value(base, std::string(detail::trim(body.substr(0, eq))), std::string(detail::trim(body.substr(eq + 1))));
  }
  return base;
}

inline std::vector<std::pair<std::string, std::string>> config_entries(TrainConfig c) {
  std::vector<std::pair<std::string, std::string>> out;
  detail::visit_config(c, [&](const char* name, auto& field) {
    std::ostringstream s;
    s.precision(17);
    s << field;
    out.emplace_back(name, s.str());
  });
  return out;
}

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One Adam update with bias correction at step `t` (1-based).
inline void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state, std::uint64_t t,
                      const TrainConfig& cfg) {
  if (t < 1) throw std::invalid_argument("adam_step: step index starts at 1");
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.shape());
      state.v.emplace_back(p.shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape() || state.m[k].shape() != params[k].shape())
      throw ShapeError("adam_step: shape mismatch for tensor " + std::to_string(k));
    auto p = params[k].values();
    const auto g = grads[k].values();
    auto m = state.m[k].values();
    auto v = state.v[k].values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon);
    }
  }
}

/// Rescales all gradients by max_norm / norm when their global L2 norm
/// exceeds max_norm. Returns the norm before clipping.
inline double clip_gradients(std::span<Tensor> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads) sq += squared_norm(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& g : grads)
      for (auto& v : g.values()) v *= factor;
  }
  return norm;
}

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t epoch, std::size_t batch, const std::string& what)
      : std::runtime_error("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) + ": " + what),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

/// Everything needed to rebuild the model and its preprocessing.
struct Checkpoint {
  TrainConfig config;
  ModelDims dims;
  ModelParams params;
  Tensor word_embeddings;
  Vocabulary words;
  Vocabulary libraries;
  LibraryFrequencyTable frequencies;
  PipelineTables tables;
  std::uint64_t epochs = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> epoch_losses;

  Model model() const { return Model{dims, params, word_embeddings, class_weights(libraries, frequencies)}; }
};

struct TrainingData {
  Vocabulary words;
  Vocabulary libraries;
  LibraryFrequencyTable frequencies;
  PipelineTables tables;
  std::vector<EncodedExample> examples;
};

namespace detail {

inline void seeded_shuffle(std::vector<std::size_t>& order, std::mt19937_64& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
}

}  // namespace detail

/// Mean teacher-forced loss over a set of examples (no dropout).
inline double mean_loss(const Model& model, std::span<const EncodedExample> examples) {
  if (examples.empty()) throw std::invalid_argument("mean_loss: no examples");
  Tape tape;
  const BoundWeights w = bind_constants(tape, model.params);
  double total = 0.0;
  for (const auto& ex : examples)
    total += example_loss(tape, w, embed_sequence(ex.source, model.word_embeddings), ex, model.weights).value().item();
  return total / static_cast<double>(examples.size());
}

/// Trains from a seeded initialization for cfg.max_epochs epochs of shuffled
/// mini-batches and returns the final parameters. Writes "epoch <i> loss <v>"
/// per epoch to `log` when given.
inline Checkpoint train(const TrainingData& data, const TrainConfig& cfg, const EmbeddingTable& embeddings,
                        std::ostream* log = nullptr) {
  validate(cfg);
  if (embeddings.dimension() != cfg.word_dim)
    throw ConfigError("embedding dimension " + std::to_string(embeddings.dimension()) + " does not match word_dim " +
                      std::to_string(cfg.word_dim));
  if (data.examples.empty()) throw std::invalid_argument("train: dataset is empty");
  for (const auto& ex : data.examples) {
    if (ex.source.length == 0) throw std::invalid_argument("train: example with empty source");
    if (ex.target.length == 0) throw std::invalid_argument("train: example with empty target");
  }

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.dims = ModelDims{embeddings.dimension(), data.libraries.size(), cfg.lib_embed, cfg.enc_hidden, cfg.dec_hidden};
  ckpt.words = data.words;
  ckpt.libraries = data.libraries;
  ckpt.frequencies = data.frequencies;
  ckpt.tables = data.tables;
  ckpt.word_embeddings = embedding_matrix(data.words, embeddings);

  std::mt19937_64 init_rng(cfg.seed);
  ckpt.params = init_params(ckpt.dims, init_rng);
  std::mt19937_64 shuffle_rng(cfg.seed + 1);
  std::mt19937_64 dropout_rng(cfg.seed + 2);

  const Tensor weights = class_weights(data.libraries, data.frequencies);
  std::vector<Tensor> sources;
  sources.reserve(data.examples.size());
  for (const auto& ex : data.examples) sources.push_back(embed_sequence(ex.source, ckpt.word_embeddings));

  std::vector<Tensor*> param_refs;
  ckpt.params.for_each([&](const std::string&, Tensor& t) { param_refs.push_back(&t); });
  std::vector<Tensor> param_values;
  AdamState adam;
  std::uint64_t step = 0;
  const ForwardOptions opts{true, cfg.dropout_p, &dropout_rng};

  std::vector<std::size_t> order(data.examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    detail::seeded_shuffle(order, shuffle_rng);
    double epoch_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batches) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      Tape tape;
      const BoundWeights w = bind_parameters(tape, ckpt.params);
      std::vector<Var> losses;
      try {
        for (std::size_t i = begin; i < end; ++i)
          losses.push_back(example_loss(tape, w, sources[order[i]], data.examples[order[i]], weights, opts));
      } catch (const std::domain_error& e) {
        throw TrainingError(epoch, batches, std::string("non-finite loss: ") + e.what());
      }
      const Var loss = scale(add_n(losses), 1.0 / static_cast<double>(end - begin));
      const double value = loss.value().item();
      if (!std::isfinite(value)) throw TrainingError(epoch, batches, "non-finite loss");
      tape.backward(loss);

      std::vector<Tensor> grads;
      grads.reserve(param_refs.size());
      w.for_each([&](const std::string&, const Var& v) { grads.push_back(tape.grad(v)); });
      clip_gradients(grads, cfg.clip_max_norm);

      param_values.clear();
      for (auto* p : param_refs) param_values.push_back(std::move(*p));
      adam_step(param_values, grads, adam, ++step, cfg);
      for (std::size_t k = 0; k < param_refs.size(); ++k) *param_refs[k] = std::move(param_values[k]);
      epoch_total += value;
    }
    const double epoch_loss = epoch_total / static_cast<double>(batches);
    ckpt.epoch_losses.push_back(epoch_loss);
    ckpt.final_loss = epoch_loss;
    ckpt.epochs = epoch;
    if (log) {
      std::ostringstream line;
      line.precision(17);
      line << "epoch " << epoch << " loss " << epoch_loss << '\n';
      *log << line.str() << std::flush;
    }
  }
  return ckpt;
}

}  // namespace req2lib
