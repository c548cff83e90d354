// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "legw/errors.hpp"
#include "legw/random.hpp"
#include "legw/tensor.hpp"

namespace legw {

/// Samples as rows of `inputs` with one integer label each.
struct Dataset {
  Tensor inputs;                     // N x features
  std::vector<std::int64_t> labels;  // N entries in [0, classes)
  std::int64_t classes = 0;
  Shape feature_shape;  // logical shape of one sample, e.g. {28, 28}

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t features() const noexcept { return inputs.cols(); }

  void validate() const {
    if (labels.empty()) throw InvalidArgument("dataset is empty");
    if (inputs.rows() != size()) throw InvalidArgument("dataset inputs/labels length mismatch");
    for (auto y : labels) {
      if (y < 0 || y >= classes) {
        throw InvalidArgument("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
      }
    }
  }
};

struct Batch {
  Tensor inputs;
  std::vector<std::int64_t> labels;

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(labels.size()); }
};

/// Rows `indices` of `ds`, in that order.
inline Batch gather(const Dataset& ds, std::span<const std::int64_t> indices) {
  if (indices.empty()) throw InvalidArgument("empty batch");
  const std::int64_t f = ds.features();
  Batch b{Tensor(Shape{static_cast<std::int64_t>(indices.size()), f}), {}};
  b.labels.reserve(indices.size());
  auto src = ds.inputs.data();
  auto dst = b.inputs.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::int64_t i = indices[r];
    std::copy_n(src.begin() + i * f, f, dst.begin() + static_cast<std::int64_t>(r) * f);
    b.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
  }
  return b;
}

inline Batch whole(const Dataset& ds) { return Batch{ds.inputs, ds.labels}; }

/// The first `count` samples after a seeded permutation.
inline Dataset subset(const Dataset& ds, std::int64_t count, std::uint64_t seed) {
  if (count <= 0 || count > ds.size()) {
    throw InvalidArgument("subset size " + std::to_string(count) + " outside [1, " + std::to_string(ds.size()) + "]");
  }
  Rng rng(seed);
  auto perm = rng.permutation(ds.size());
  perm.resize(static_cast<std::size_t>(count));
  Batch b = gather(ds, perm);
  return Dataset{std::move(b.inputs), std::move(b.labels), ds.classes, ds.feature_shape};
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;  // 2051
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;  // 2049

namespace detail {

/// Reads a whole file through zlib, which passes uncompressed files through
/// unchanged, so plain and gzip IDX files load the same way.
inline std::vector<unsigned char> read_maybe_gzip(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw Error("cannot open '" + path + "'");
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  int err = 0;
  const char* msg = gzerror(f, &err);
  const std::string error_text = msg ? msg : "";
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) {
    throw FormatError("error reading '" + path + "': " + error_text);
  }
  return out;
}

inline void write_maybe_gzip(const std::string& path, const std::vector<unsigned char>& bytes) {
  const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  if (gz) {
    gzFile f = gzopen(path.c_str(), "wb9");
    if (!f) throw Error("cannot write '" + path + "'");
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (n != static_cast<int>(bytes.size())) throw Error("short write to '" + path + "'");
  } else {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw Error("cannot write '" + path + "'");
    const std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (n != bytes.size()) throw Error("short write to '" + path + "'");
  }
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& path) {
  if (offset + 4 > b.size()) throw FormatError("'" + path + "' is truncated inside its header");
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

inline void append_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

inline void expect_magic(std::uint32_t found, std::uint32_t expected, const std::string& path) {
  if (found != expected) {
    throw FormatError("'" + path + "': bad IDX magic number, expected " + hex32(expected) + " (" +
                      std::to_string(expected) + "), found " + hex32(found) + " (" + std::to_string(found) + ")");
  }
}

}  // namespace detail

/// Pixel rows of an IDX image file, scaled to [0, 1].
inline Tensor read_idx_images(const std::string& path, Shape* image_shape = nullptr) {
  const auto bytes = detail::read_maybe_gzip(path);
  detail::expect_magic(detail::read_be32(bytes, 0, path), kIdxImagesMagic, path);
  const std::int64_t count = detail::read_be32(bytes, 4, path);
  const std::int64_t rows = detail::read_be32(bytes, 8, path);
  const std::int64_t cols = detail::read_be32(bytes, 12, path);
  if (count == 0 || rows == 0 || cols == 0) throw FormatError("'" + path + "' declares an empty image set");
  const std::int64_t pixels = count * rows * cols;
  if (static_cast<std::int64_t>(bytes.size()) - 16 < pixels) {
    throw FormatError("'" + path + "' is truncated: header declares " + std::to_string(count) + " images of " +
                      std::to_string(rows) + "x" + std::to_string(cols) + " but only " +
                      std::to_string(bytes.size() - 16) + " pixel bytes follow");
  }
  Tensor images(Shape{count, rows * cols});
  auto dst = images.data();
  for (std::int64_t i = 0; i < pixels; ++i) dst[i] = static_cast<double>(bytes[16 + i]) / 255.0;
  if (image_shape) *image_shape = Shape{rows, cols};
  return images;
}

inline std::vector<std::int64_t> read_idx_labels(const std::string& path) {
  const auto bytes = detail::read_maybe_gzip(path);
  detail::expect_magic(detail::read_be32(bytes, 0, path), kIdxLabelsMagic, path);
  const std::int64_t count = detail::read_be32(bytes, 4, path);
  if (static_cast<std::int64_t>(bytes.size()) - 8 < count) {
    throw FormatError("'" + path + "' is truncated: header declares " + std::to_string(count) + " labels but only " +
                      std::to_string(bytes.size() - 8) + " follow");
  }
  return std::vector<std::int64_t>(bytes.begin() + 8, bytes.begin() + 8 + count);
}

/// Loads an image/label IDX pair (plain or gzip) as a 10-class dataset.
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  Dataset ds;
  ds.inputs = read_idx_images(images_path, &ds.feature_shape);
  ds.labels = read_idx_labels(labels_path);
  ds.classes = 10;
  if (ds.size() != ds.inputs.rows()) {
    throw FormatError("'" + images_path + "' holds " + std::to_string(ds.inputs.rows()) + " images but '" +
                      labels_path + "' holds " + std::to_string(ds.size()) + " labels");
  }
  ds.validate();
  return ds;
}

/// Writes images quantized to bytes (round(255 * v), clamped). Samples that
/// came from an IDX file round-trip exactly.
inline void write_idx_images(const std::string& path, const Dataset& ds) {
  if (ds.feature_shape.size() != 2 || shape_size(ds.feature_shape) != ds.features()) {
    throw InvalidArgument("write_idx_images needs a 2-D feature shape");
  }
  std::vector<unsigned char> bytes;
  bytes.reserve(16 + static_cast<std::size_t>(ds.inputs.size()));
  detail::append_be32(bytes, kIdxImagesMagic);
  detail::append_be32(bytes, static_cast<std::uint32_t>(ds.size()));
  detail::append_be32(bytes, static_cast<std::uint32_t>(ds.feature_shape[0]));
  detail::append_be32(bytes, static_cast<std::uint32_t>(ds.feature_shape[1]));
  for (double v : ds.inputs.data()) {
    const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    bytes.push_back(static_cast<unsigned char>(q));
  }
  detail::write_maybe_gzip(path, bytes);
}

inline void write_idx_labels(const std::string& path, const Dataset& ds) {
  std::vector<unsigned char> bytes;
  detail::append_be32(bytes, kIdxLabelsMagic);
  detail::append_be32(bytes, static_cast<std::uint32_t>(ds.size()));
  for (auto y : ds.labels) {
    if (y < 0 || y > 255) throw InvalidArgument("IDX labels must fit in a byte");
    bytes.push_back(static_cast<unsigned char>(y));
  }
  detail::write_maybe_gzip(path, bytes);
}

// ---------------------------------------------------------------------------
// Text corpora
// ---------------------------------------------------------------------------

struct TokenizedCorpus {
  /// Rows are `sequence_length` consecutive token ids; the label is the id
  /// of the token that follows them.
  Dataset dataset;
  /// id -> token; the last entry is always "<unk>".
  std::vector<std::string> vocabulary;
  std::vector<std::int64_t> token_ids;
  double unk_rate = 0.0;

  std::int64_t unk_id() const { return static_cast<std::int64_t>(vocabulary.size()) - 1; }
};

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

/// Whitespace tokenization keeping the `vocab_limit` most frequent tokens
/// (ties broken lexicographically); everything else becomes "<unk>".
inline TokenizedCorpus tokenize_corpus(std::string_view text, std::int64_t vocab_limit,
                                       std::int64_t sequence_length) {
  if (vocab_limit < 1) throw InvalidArgument("vocab_limit must be at least 1");
  if (sequence_length < 1) throw InvalidArgument("sequence length must be at least 1");
  const auto tokens = split_whitespace(text);
  if (tokens.empty()) throw InvalidArgument("corpus text is empty");

  std::map<std::string, std::int64_t> counts;
  for (const auto& t : tokens) ++counts[t];
  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (static_cast<std::int64_t>(ranked.size()) > vocab_limit) ranked.resize(static_cast<std::size_t>(vocab_limit));

  TokenizedCorpus out;
  std::unordered_map<std::string, std::int64_t> index;
  for (const auto& [tok, _] : ranked) {
    index.emplace(tok, static_cast<std::int64_t>(out.vocabulary.size()));
    out.vocabulary.push_back(tok);
  }
  out.vocabulary.emplace_back("<unk>");
  const std::int64_t unk = out.unk_id();

  std::int64_t unknown = 0;
  out.token_ids.reserve(tokens.size());
  for (const auto& t : tokens) {
    const auto it = index.find(t);
    out.token_ids.push_back(it == index.end() ? unk : it->second);
    if (it == index.end()) ++unknown;
  }
  out.unk_rate = static_cast<double>(unknown) / static_cast<double>(tokens.size());

  const auto total = static_cast<std::int64_t>(out.token_ids.size());
  if (total <= sequence_length) {
    throw InvalidArgument("corpus of " + std::to_string(total) + " tokens is too short for sequence length " +
                          std::to_string(sequence_length));
  }
  const std::int64_t pairs = total - sequence_length;
  Dataset& ds = out.dataset;
  ds.inputs = Tensor(Shape{pairs, sequence_length});
  ds.labels.resize(static_cast<std::size_t>(pairs));
  ds.classes = static_cast<std::int64_t>(out.vocabulary.size());
  ds.feature_shape = Shape{sequence_length};
  for (std::int64_t p = 0; p < pairs; ++p) {
    for (std::int64_t t = 0; t < sequence_length; ++t) {
      ds.inputs.at(p, t) = static_cast<double>(out.token_ids[static_cast<std::size_t>(p + t)]);
    }
    ds.labels[static_cast<std::size_t>(p)] = out.token_ids[static_cast<std::size_t>(p + sequence_length)];
  }
  return out;
}

/// exp(entropy) of the empirical unigram distribution of `ids`: the
/// perplexity of the best context-free predictor.
inline double unigram_perplexity(std::span<const std::int64_t> ids) {
  if (ids.empty()) throw InvalidArgument("no tokens");
  std::map<std::int64_t, std::int64_t> counts;
  for (auto id : ids) ++counts[id];
  const double n = static_cast<double>(ids.size());
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return std::exp(h);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Shuffled mini-batches. The order of epoch e is a pure function of
/// (seed, e). Holds a reference: the dataset must outlive the iterator.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::int64_t batch_size, std::uint64_t seed, bool drop_last = false,
                bool auto_advance = false)
      : ds_(&ds), batch_size_(batch_size), seed_(seed), drop_last_(drop_last), auto_advance_(auto_advance) {
    if (batch_size <= 0) throw InvalidArgument("batch size must be positive");
    if (ds.size() == 0) throw InvalidArgument("cannot batch an empty dataset");
    if (drop_last && batch_size > ds.size()) throw InvalidArgument("drop_last with batch larger than dataset");
    start_epoch(0);
  }

  std::int64_t batch_size() const noexcept { return batch_size_; }
  std::int64_t epoch() const noexcept { return epoch_; }
  std::int64_t batches_per_epoch() const noexcept {
    const std::int64_t n = ds_->size();
    return drop_last_ ? n / batch_size_ : (n + batch_size_ - 1) / batch_size_;
  }
  bool epoch_finished() const noexcept {
    const std::int64_t remaining = ds_->size() - cursor_;
    return drop_last_ ? remaining < batch_size_ : remaining <= 0;
  }
  const std::vector<std::int64_t>& order() const noexcept { return order_; }

  void start_epoch(std::int64_t e) {
    epoch_ = e;
    cursor_ = 0;
    Rng rng(seed_, static_cast<std::uint64_t>(e));
    order_ = rng.permutation(ds_->size());
  }

  /// The next batch, or nullopt once the epoch is exhausted (unless the
  /// iterator auto-advances, in which case it reshuffles and continues).
  std::optional<Batch> next_batch() {
    if (epoch_finished()) {
      if (!auto_advance_) return std::nullopt;
      start_epoch(epoch_ + 1);
    }
    const std::int64_t take = std::min(batch_size_, ds_->size() - cursor_);
    std::span<const std::int64_t> idx(order_.data() + cursor_, static_cast<std::size_t>(take));
    cursor_ += take;
    return gather(*ds_, idx);
  }

 private:
  const Dataset* ds_;
  std::int64_t batch_size_;
  std::uint64_t seed_;
  bool drop_last_;
  bool auto_advance_;
  std::int64_t epoch_ = 0;
  std::int64_t cursor_ = 0;
  std::vector<std::int64_t> order_;
};

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Two classes split by a random hyperplane through the origin, with no
/// sample closer to it than `margin`. Inputs uniform in [-1, 1]^dim.
inline Dataset make_separable_blobs(std::int64_t n, std::int64_t dim, std::uint64_t seed, double margin = 0.1) {
  if (n <= 0 || dim <= 0) throw InvalidArgument("synthetic dataset needs positive size and dimension");
  Rng rng(seed);
  std::vector<double> normal(static_cast<std::size_t>(dim));
  double len = 0.0;
  for (double& v : normal) {
    v = rng.normal();
    len += v * v;
  }
  len = std::sqrt(len);
  for (double& v : normal) v /= len;
  Dataset ds;
  ds.inputs = Tensor(Shape{n, dim});
  ds.classes = 2;
  ds.feature_shape = Shape{dim};
  std::vector<double> x(static_cast<std::size_t>(dim));
  for (std::int64_t i = 0; i < n; ++i) {
    double side = 0.0;
    do {
      side = 0.0;
      for (std::int64_t d = 0; d < dim; ++d) {
        x[d] = rng.uniform(-1.0, 1.0);
        side += x[d] * normal[d];
      }
    } while (std::abs(side) < margin);
    for (std::int64_t d = 0; d < dim; ++d) ds.inputs.at(i, d) = x[d];
    ds.labels.push_back(side > 0 ? 1 : 0);
  }
  return ds;
}

/// Labels from the argmax of a random linear teacher; `classes` >= 2.
inline Dataset make_teacher_classification(std::int64_t n, std::int64_t dim, std::int64_t classes,
                                           std::uint64_t seed) {
  if (n <= 0 || dim <= 0 || classes < 2) throw InvalidArgument("invalid synthetic classification shape");
  Rng rng(seed);
  Tensor teacher(Shape{dim, classes});
  for (double& v : teacher.data()) v = rng.normal();
  Dataset ds;
  ds.inputs = Tensor(Shape{n, dim});
  ds.classes = classes;
  ds.feature_shape = Shape{dim};
  for (double& v : ds.inputs.data()) v = rng.uniform(-1.0, 1.0);
  Tensor logits(Shape{n, classes});
  logits.matrix().noalias() = ds.inputs.matrix() * teacher.matrix();
  for (std::int64_t i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    logits.matrix().row(i).maxCoeff(&best);
    ds.labels.push_back(best);
  }
  return ds;
}

/// Text from a random sparse Markov chain over `vocab` word types: each word
/// has `fanout` possible successors. Produces learnable, PTB-like token
/// streams for desk-scale language-model runs.
inline std::string make_markov_corpus(std::int64_t tokens, std::int64_t vocab, std::int64_t fanout,
                                      std::uint64_t seed) {
  if (tokens <= 0 || vocab <= 0 || fanout <= 0) throw InvalidArgument("invalid Markov corpus shape");
  Rng rng(seed);
  std::vector<std::vector<std::int64_t>> successors(static_cast<std::size_t>(vocab));
  for (auto& s : successors) {
    for (std::int64_t k = 0; k < fanout; ++k) s.push_back(static_cast<std::int64_t>(rng.below(vocab)));
  }
  std::string out;
  std::int64_t w = 0;
  for (std::int64_t i = 0; i < tokens; ++i) {
    if (i) out.push_back(' ');
    out += "w" + std::to_string(w);
    // Zipf-flavoured choice among successors: earlier ones are likelier.
    const double u = rng.uniform01();
    const auto k = static_cast<std::int64_t>(std::floor(static_cast<double>(fanout) * u * u));
    w = successors[static_cast<std::size_t>(w)][static_cast<std::size_t>(k)];
  }
  return out;
}

}  // namespace legw
