// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "legw/data.hpp"

using namespace legw;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("legw_data_test_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> idx_header(std::uint32_t magic, std::vector<std::uint32_t> dims) {
  std::vector<unsigned char> b;
  auto put = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
  };
  put(magic);
  for (auto d : dims) put(d);
  return b;
}

Dataset tiny_images(std::int64_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.inputs = Tensor(Shape{n, 12});
  for (double& v : ds.inputs.data()) v = static_cast<double>(rng.below(256)) / 255.0;
  for (std::int64_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<std::int64_t>(rng.below(10)));
  ds.classes = 10;
  ds.feature_shape = {3, 4};
  return ds;
}

}  // namespace

TEST(Idx, RoundTripPlainAndGzip) {
  const Dataset ds = tiny_images(17, 3);
  for (const char* suffix : {"", ".gz"}) {
    const auto img = scratch(std::string("img") + suffix), lab = scratch(std::string("lab") + suffix);
    write_idx_images(img.string(), ds);
    write_idx_labels(lab.string(), ds);
    const Dataset back = load_mnist_idx(img.string(), lab.string());
    EXPECT_EQ(back.inputs, ds.inputs) << suffix;
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.feature_shape, ds.feature_shape);
  }
}

TEST(Idx, SingleZeroImage) {
  auto img = idx_header(0x803, {1, 28, 28});
  img.resize(img.size() + 784, 0);
  auto lab = idx_header(0x801, {1});
  lab.push_back(7);
  write_bytes(scratch("zero_img"), img);
  write_bytes(scratch("zero_lab"), lab);
  const Dataset ds = load_mnist_idx(scratch("zero_img").string(), scratch("zero_lab").string());
  ASSERT_EQ(ds.size(), 1);
  EXPECT_EQ(ds.feature_shape, (Shape{28, 28}));
  EXPECT_EQ(ds.inputs, Tensor(Shape{1, 784}));
  EXPECT_EQ(ds.labels[0], 7);
}

TEST(Idx, WrongMagicNamesBoth) {
  auto lab = idx_header(0x801, {1});
  lab.push_back(0);
  write_bytes(scratch("swapped"), lab);
  try {
    read_idx_images(scratch("swapped").string());
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2051"), std::string::npos) << msg;
    EXPECT_NE(msg.find("2049"), std::string::npos) << msg;
  }
  auto img = idx_header(0x803, {1, 1, 1});
  img.push_back(0);
  write_bytes(scratch("img_as_labels"), img);
  EXPECT_THROW(read_idx_labels(scratch("img_as_labels").string()), FormatError);
}

TEST(Idx, TruncatedFilesAreErrors) {
  auto img = idx_header(0x803, {2, 28, 28});
  img.resize(img.size() + 784 + 100, 0);
  write_bytes(scratch("short_img"), img);
  EXPECT_THROW(read_idx_images(scratch("short_img").string()), FormatError);
  write_bytes(scratch("short_header"), {0, 0, 8});
  EXPECT_THROW(read_idx_images(scratch("short_header").string()), FormatError);
  auto lab = idx_header(0x801, {5});
  lab.push_back(1);
  write_bytes(scratch("short_lab"), lab);
  EXPECT_THROW(read_idx_labels(scratch("short_lab").string()), FormatError);
  EXPECT_THROW(read_idx_labels(scratch("does_not_exist").string()), Error);
}

TEST(Idx, CommittedDigitSubset) {
  const std::string dir = std::string(LEGW_SOURCE_DIR) + "/data/mnist10k/";
  const Dataset train = load_mnist_idx(dir + "train-images-idx3-ubyte.gz", dir + "train-labels-idx1-ubyte.gz");
  const Dataset test = load_mnist_idx(dir + "t10k-images-idx3-ubyte.gz", dir + "t10k-labels-idx1-ubyte.gz");
  EXPECT_EQ(train.size(), 8000);
  EXPECT_EQ(test.size(), 2000);
  EXPECT_EQ(train.feature_shape, (Shape{28, 28}));
  const auto [lo, hi] = std::minmax_element(train.inputs.data().begin(), train.inputs.data().end());
  EXPECT_EQ(*lo, 0.0);
  EXPECT_EQ(*hi, 1.0);
}

TEST(Tokenize, AlternatingPairs) {
  const TokenizedCorpus c = tokenize_corpus("a b a b a b", 10, 2);
  EXPECT_EQ(c.vocabulary, (std::vector<std::string>{"a", "b", "<unk>"}));
  ASSERT_EQ(c.dataset.size(), 4);
  EXPECT_EQ(c.dataset.inputs.at(0, 0), 0.0);
  EXPECT_EQ(c.dataset.inputs.at(0, 1), 1.0);
  EXPECT_EQ(c.dataset.labels[0], 0);
  EXPECT_EQ(c.dataset.labels[1], 1);
  EXPECT_EQ(c.unk_rate, 0.0);
}

TEST(Tokenize, VocabLimitOne) {
  const TokenizedCorpus c = tokenize_corpus("x y x z x", 1, 1);
  EXPECT_EQ(c.vocabulary, (std::vector<std::string>{"x", "<unk>"}));
  EXPECT_EQ(c.token_ids, (std::vector<std::int64_t>{0, 1, 0, 1, 0}));
  EXPECT_DOUBLE_EQ(c.unk_rate, 0.4);
}

TEST(Tokenize, ReducedCorpusStatistics) {
  const std::string text = make_markov_corpus(50000, 3000, 4, 1);
  const TokenizedCorpus c = tokenize_corpus(text, 2000, 20);
  EXPECT_EQ(c.vocabulary.size(), 2001u);
  EXPECT_EQ(c.dataset.size(), 50000 - 20);
  // Unknown fraction recomputed from the ids.
  const auto unk = std::count(c.token_ids.begin(), c.token_ids.end(), c.unk_id());
  EXPECT_DOUBLE_EQ(c.unk_rate, static_cast<double>(unk) / 50000.0);
  // The unigram baseline lies between 1 and the vocabulary size.
  const double ppl = unigram_perplexity(c.token_ids);
  EXPECT_GT(ppl, 1.0);
  EXPECT_LT(ppl, 2001.0);
  EXPECT_EQ(tokenize_corpus(text, 2000, 20).token_ids, c.token_ids);
}

TEST(Tokenize, UnigramPerplexityOfUniformIsItsSize) {
  const std::vector<std::int64_t> ids = {0, 1, 2, 3, 0, 1, 2, 3};
  EXPECT_NEAR(unigram_perplexity(ids), 4.0, 1e-12);
}

TEST(Tokenize, Errors) {
  EXPECT_THROW(tokenize_corpus("", 10, 2), InvalidArgument);
  EXPECT_THROW(tokenize_corpus("   \n ", 10, 2), InvalidArgument);
  EXPECT_THROW(tokenize_corpus("a b", 10, 2), InvalidArgument);
}

TEST(Batches, SingleFullBatchIsAPermutation) {
  const Dataset ds = tiny_images(10, 1);
  BatchIterator it(ds, 10, 5);
  const auto b = it.next_batch();
  ASSERT_TRUE(b);
  EXPECT_EQ(b->size(), 10);
  auto order = it.order();
  std::sort(order.begin(), order.end());
  for (std::int64_t i = 0; i < 10; ++i) EXPECT_EQ(order[i], i);
  EXPECT_FALSE(it.next_batch());
}

TEST(Batches, SizesWithRemainder) {
  const Dataset ds = tiny_images(10, 1);
  BatchIterator it(ds, 4, 5);
  std::vector<std::int64_t> sizes;
  while (auto b = it.next_batch()) sizes.push_back(b->size());
  EXPECT_EQ(sizes, (std::vector<std::int64_t>{4, 4, 2}));
  BatchIterator dropping(ds, 4, 5, true);
  sizes.clear();
  while (auto b = dropping.next_batch()) sizes.push_back(b->size());
  EXPECT_EQ(sizes, (std::vector<std::int64_t>{4, 4}));
}

TEST(Batches, DeterministicPerSeedAndEpoch) {
  const Dataset ds = tiny_images(50, 2);
  BatchIterator a(ds, 8, 77), b(ds, 8, 77);
  b.start_epoch(3);
  b.start_epoch(0);
  while (auto x = a.next_batch()) {
    const auto y = b.next_batch();
    ASSERT_TRUE(y);
    EXPECT_EQ(x->inputs, y->inputs);
    EXPECT_EQ(x->labels, y->labels);
  }
  BatchIterator c(ds, 8, 77);
  c.start_epoch(1);
  EXPECT_NE(c.order(), BatchIterator(ds, 8, 77).order());
}

TEST(Batches, AutoAdvanceReshuffles) {
  const Dataset ds = tiny_images(6, 2);
  BatchIterator it(ds, 4, 1, false, true);
  for (int i = 0; i < 2; ++i) it.next_batch();
  EXPECT_EQ(it.epoch(), 0);
  it.next_batch();
  EXPECT_EQ(it.epoch(), 1);
  BatchIterator fresh(ds, 4, 1);
  fresh.start_epoch(1);
  EXPECT_EQ(it.order(), fresh.order());
}

TEST(Batches, EpochMultisetEqualsDataset) {
  const Dataset ds = tiny_images(37, 9);
  BatchIterator it(ds, 5, 3);
  std::vector<std::vector<double>> seen;
  while (auto b = it.next_batch()) {
    for (std::int64_t r = 0; r < b->size(); ++r) {
      std::vector<double> row(b->inputs.data().begin() + r * 12, b->inputs.data().begin() + (r + 1) * 12);
      row.push_back(static_cast<double>(b->labels[r]));
      seen.push_back(row);
    }
  }
  std::vector<std::vector<double>> all;
  for (std::int64_t r = 0; r < ds.size(); ++r) {
    std::vector<double> row(ds.inputs.data().begin() + r * 12, ds.inputs.data().begin() + (r + 1) * 12);
    row.push_back(static_cast<double>(ds.labels[r]));
    all.push_back(row);
  }
  std::sort(seen.begin(), seen.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(seen, all);
}

TEST(Batches, Errors) {
  const Dataset ds = tiny_images(3, 1);
  EXPECT_THROW(BatchIterator(ds, 0, 1), InvalidArgument);
  EXPECT_THROW(BatchIterator(ds, 4, 1, true), InvalidArgument);
}

TEST(Subset, SeededAndSized) {
  const Dataset ds = tiny_images(40, 1);
  const Dataset a = subset(ds, 15, 4);
  EXPECT_EQ(a.size(), 15);
  EXPECT_EQ(a.inputs, subset(ds, 15, 4).inputs);
  EXPECT_THROW(subset(ds, 41, 4), InvalidArgument);
}

TEST(Synthetic, SeparableBlobsRespectMargin) {
  const Dataset ds = make_separable_blobs(200, 5, 3, 0.2);
  ds.validate();
  EXPECT_EQ(ds.size(), 200);
  const auto ones = std::count(ds.labels.begin(), ds.labels.end(), 1);
  EXPECT_GT(ones, 40);
  EXPECT_LT(ones, 160);
}
