#pragma once

// Binary checkpoint container.
//
//   magic "R2LCKPT\0" | u32 version | metadata | tensors | u32 crc32
//
// Integers are little-endian, reals are IEEE-754 binary64 bit patterns,
// strings are u64 length + bytes. The CRC covers every preceding byte.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "req2lib/trainer.hpp"

namespace req2lib {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::string_view kCheckpointMagic{"R2LCKPT\0", 8};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    buf_.append(s);
  }
  void raw(std::string_view s) { buf_.append(s); }
  void strings(const std::vector<std::string>& v) {
    u64(v.size());
    for (const auto& s : v) str(s);
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    u64(t.rank());
    for (auto e : t.shape()) u64(e);
    for (double v : t.values()) f64(v);
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<std::string> strings() {
    const auto n = count(8);
    std::vector<std::string> v;
    v.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) v.push_back(str());
    return v;
  }
  Tensor tensor(const std::string& expected_name) {
    const auto name = str();
    if (name != expected_name) throw CheckpointError("expected tensor `" + expected_name + "`, found `" + name + "`");
    const auto rank = count(8);
    Shape shape(rank);
    for (auto& e : shape) e = u64();
    const auto n = shape_numel(shape);
    if (n > remaining() / 8) throw CheckpointError("truncated checkpoint: tensor `" + name + "`");
    std::vector<double> values(n);
    for (auto& v : values) v = f64();
    try {
      return Tensor(std::move(shape), std::move(values));
    } catch (const ShapeError& e) {
      throw CheckpointError(std::string("bad tensor in checkpoint: ") + e.what());
    }
  }
  /// A count of items each at least `min_bytes` long, bounded by the remaining input.
  std::uint64_t count(std::uint64_t min_bytes) {
    const auto n = u64();
    if (n > remaining() / min_bytes) throw CheckpointError("truncated checkpoint: implausible count");
    return n;
  }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > remaining()) throw CheckpointError("truncated checkpoint");
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const auto len = std::min(kChunk, bytes.size() - off);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), static_cast<uInt>(len));
  }
  return static_cast<std::uint32_t>(crc);
}

/// Writes to a sibling temp file and renames it over `path`.
inline void write_file_atomically(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw std::runtime_error("write failed for " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);

  const auto entries = config_entries(ckpt.config);
  w.u64(entries.size());
  for (const auto& [key, value] : entries) {
    w.str(key);
    w.str(value);
  }
  // Exact config values; the text form above is for inspection.
  TrainConfig cfg = ckpt.config;
  detail::visit_config(cfg, [&](const char*, auto& field) {
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(field)>>)
      w.f64(field);
    else
      w.u64(field);
  });
  const auto& d = ckpt.dims;
  for (auto v : {d.word_dim, d.lib_vocab, d.lib_embed, d.enc_hidden, d.dec_hidden}) w.u64(v);
  w.u64(ckpt.epochs);
  w.f64(ckpt.final_loss);
  w.u64(ckpt.epoch_losses.size());
  for (double l : ckpt.epoch_losses) w.f64(l);

  w.strings(ckpt.words.tokens());
  w.strings(ckpt.libraries.tokens());
  w.u64(ckpt.frequencies.size());
  for (const auto& [lib, count] : ckpt.frequencies.counts()) {
    w.str(lib);
    w.u64(count);
  }
  w.strings(std::vector<std::string>(ckpt.tables.stopwords.begin(), ckpt.tables.stopwords.end()));
  w.strings(std::vector<std::string>(ckpt.tables.domain_vocab.begin(), ckpt.tables.domain_vocab.end()));
  w.u64(ckpt.tables.lemmas.size());
  for (const auto& [surface, base] : ckpt.tables.lemmas) {
    w.str(surface);
    w.str(base);
  }

  std::size_t n = 0;
  ckpt.params.for_each([&](const std::string&, const Tensor&) { ++n; });
  w.u64(n + 1);
  ckpt.params.for_each([&](const std::string& name, const Tensor& t) { w.tensor(name, t); });
  w.tensor("word_embeddings", ckpt.word_embeddings);

  w.u32(detail::crc32_of(w.bytes()));
  return std::move(w.bytes());
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 4 || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw CheckpointVersionError("not a checkpoint file (bad magic bytes)");
  detail::ByteReader r(bytes.substr(kCheckpointMagic.size()));
  if (const auto version = r.u32(); version != kCheckpointVersion)
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version));
  if (bytes.size() < kCheckpointMagic.size() + 8) throw CheckpointError("truncated checkpoint");
  const auto body = bytes.substr(0, bytes.size() - 4);
  detail::ByteReader tail(bytes.substr(bytes.size() - 4));
  if (tail.u32() != detail::crc32_of(body)) throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated)");
  r = detail::ByteReader(body.substr(kCheckpointMagic.size() + 4));

  Checkpoint ckpt;
  const auto n_entries = r.count(16);
  for (std::uint64_t i = 0; i < n_entries; ++i) {
    r.str();
    r.str();
  }
  detail::visit_config(ckpt.config, [&](const char*, auto& field) {
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(field)>>)
      field = r.f64();
    else
      field = r.u64();
  });
  auto& d = ckpt.dims;
  for (auto* v : {&d.word_dim, &d.lib_vocab, &d.lib_embed, &d.enc_hidden, &d.dec_hidden}) *v = r.u64();
  ckpt.epochs = r.u64();
  ckpt.final_loss = r.f64();
  ckpt.epoch_losses.resize(r.count(8));
  for (auto& l : ckpt.epoch_losses) l = r.f64();

  try {
    ckpt.words = Vocabulary::from_id_order(r.strings());
    ckpt.libraries = Vocabulary::from_id_order(r.strings());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("bad vocabulary in checkpoint: ") + e.what());
  }
  const auto n_freq = r.count(16);
  for (std::uint64_t i = 0; i < n_freq; ++i) {
    auto lib = r.str();
    ckpt.frequencies.add(lib, r.u64());
  }
  for (auto& s : r.strings()) ckpt.tables.stopwords.insert(std::move(s));
  for (auto& s : r.strings()) ckpt.tables.domain_vocab.insert(std::move(s));
  const auto n_lemmas = r.count(16);
  for (std::uint64_t i = 0; i < n_lemmas; ++i) {
    auto surface = r.str();
    ckpt.tables.lemmas[surface] = r.str();
  }

  const auto shapes = parameter_shapes(ckpt.dims);
  if (r.u64() != shapes.size() + 1) throw CheckpointError("checkpoint tensor count does not match its dimensions");
  ckpt.params.for_each([&](const std::string& name, Tensor& t) { t = r.tensor(name); });
  ckpt.word_embeddings = r.tensor("word_embeddings");
  if (r.remaining() != 0) throw CheckpointError("trailing bytes in checkpoint");
  try {
    validate_params(ckpt.params, ckpt.dims);
  } catch (const ShapeError& e) {
    throw CheckpointError(e.what());
  }
  if (ckpt.libraries.size() != ckpt.dims.lib_vocab || ckpt.word_embeddings.rank() != 2 ||
      ckpt.word_embeddings.rows() != ckpt.words.size() || ckpt.word_embeddings.cols() != ckpt.dims.word_dim)
    throw CheckpointError("checkpoint vocabularies do not match tensor shapes");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  detail::write_file_atomically(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path));
}

/// Bit-level equality through the serialized form.
inline bool identical(const Checkpoint& a, const Checkpoint& b) { return serialize_checkpoint(a) == serialize_checkpoint(b); }

}  // namespace req2lib
