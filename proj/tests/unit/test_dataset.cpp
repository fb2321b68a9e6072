#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>

#include "support/expect.hpp"
#include "xlab/binary_io.hpp"
#include "xlab/dataset.hpp"

using namespace xlab;

namespace {

void put_be32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xff));
}

// IDX writer used only by tests.
std::string idx_images(std::uint32_t magic, std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                       const std::vector<unsigned char>& pixels) {
  std::string out;
  put_be32(out, magic);
  put_be32(out, count);
  put_be32(out, rows);
  put_be32(out, cols);
  out.append(pixels.begin(), pixels.end());
  return out;
}

std::string idx_labels(std::uint32_t count, const std::vector<unsigned char>& labels) {
  std::string out;
  put_be32(out, 0x00000801);
  put_be32(out, count);
  out.append(labels.begin(), labels.end());
  return out;
}

std::filesystem::path write_temp(const std::string& name, const std::string& bytes) {
  const auto dir = std::filesystem::temp_directory_path() / "xlab_test_dataset";
  std::filesystem::create_directories(dir);
  const auto path = dir / name;
  io::write_file(path.string(), bytes);
  return path;
}

SynthConfig small_synth(std::uint64_t seed) {
  SynthConfig s;
  s.num_classes = 10;
  s.samples_per_class = 100;
  s.seed = seed;
  s.template_seed = 5;
  return s;
}

}  // namespace

TEST(LoadIdx, HandBuiltFixture) {
  const auto images = write_temp("two.idx3", idx_images(0x803, 2, 2, 2, {0, 255, 128, 64, 1, 2, 3, 4}));
  const auto labels = write_temp("two.idx1", idx_labels(2, {3, 7}));
  const LabeledDataset ds = load_idx(images, labels);
  ASSERT_EQ(ds.inputs.shape(), (Shape{2, 1, 2, 2}));
  EXPECT_FLOAT_EQ(ds.inputs[0], 0.0f);
  EXPECT_FLOAT_EQ(ds.inputs[1], 1.0f);
  EXPECT_NEAR(ds.inputs[2], 0.50196, 1e-5);
  EXPECT_NEAR(ds.inputs[3], 0.25098, 1e-5);
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 7}));
}

TEST(LoadIdx, WrongMagic) {
  const auto images = write_temp("bad.idx3", idx_images(0x801, 1, 2, 2, {0, 0, 0, 0}));
  const auto labels = write_temp("bad.idx1", idx_labels(1, {0}));
  EXPECT_ERRC(load_idx(images, labels), Errc::bad_magic);
}

TEST(LoadIdx, CountMismatch) {
  const auto images = write_temp("ten.idx3", idx_images(0x803, 10, 2, 2, std::vector<unsigned char>(40, 9)));
  const auto labels = write_temp("nine.idx1", idx_labels(9, std::vector<unsigned char>(9, 1)));
  EXPECT_ERRC(load_idx(images, labels), Errc::count_mismatch);
}

TEST(LoadIdx, TruncatedPayload) {
  const auto images = write_temp("short.idx3", idx_images(0x803, 2, 2, 2, {1, 2, 3}));
  const auto labels = write_temp("short.idx1", idx_labels(2, {0, 1}));
  EXPECT_ERRC(load_idx(images, labels), Errc::truncated_payload);
  EXPECT_ERRC(load_idx(write_temp("stub.idx3", "\x00\x00"), labels), Errc::truncated_payload);
}

TEST(LoadIdx, LabelOutOfRange) {
  const auto images = write_temp("lbl.idx3", idx_images(0x803, 1, 2, 2, {0, 0, 0, 0}));
  const auto labels = write_temp("lbl.idx1", idx_labels(1, {12}));
  EXPECT_ERRC(load_idx(images, labels, 10), Errc::invalid_argument);
}

TEST(LoadIdx, WriterRoundTrip) {
  const LabeledDataset src = synth_generate(small_synth(3));
  std::vector<unsigned char> pixels(src.inputs.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<unsigned char>(std::lround(src.inputs[i] * 255.0f));
  }
  std::vector<unsigned char> labels(src.labels.begin(), src.labels.end());
  const auto ip = write_temp("rt.idx3", idx_images(0x803, 1000, 16, 16, pixels));
  const auto lp = write_temp("rt.idx1", idx_labels(1000, labels));
  const LabeledDataset back = load_idx(ip, lp);
  EXPECT_EQ(back.labels, src.labels);
  for (std::size_t i = 0; i < pixels.size(); ++i) EXPECT_EQ(back.inputs[i], static_cast<float>(pixels[i]) / 255.0f);
}

TEST(Synth, SeedDeterminism) {
  const LabeledDataset a = synth_generate(small_synth(7));
  const LabeledDataset b = synth_generate(small_synth(7));
  const LabeledDataset c = synth_generate(small_synth(8));
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.inputs, c.inputs);
}

TEST(Synth, BalancedClasses) {
  const LabeledDataset ds = synth_generate(small_synth(1));
  EXPECT_EQ(ds.size(), 1000u);
  std::map<int, int> histogram;
  for (int l : ds.labels) ++histogram[l];
  ASSERT_EQ(histogram.size(), 10u);
  for (const auto& [label, count] : histogram) EXPECT_EQ(count, 100) << "class " << label;
}

TEST(Synth, ZeroNoiseReproducesTemplates) {
  SynthConfig s = small_synth(1);
  s.noise = 0.0;
  s.samples_per_class = 5;
  const LabeledDataset ds = synth_generate(s);
  const std::size_t dim = 16 * 16;
  for (std::size_t i = 10; i < ds.size(); ++i) {
    const std::size_t first = static_cast<std::size_t>(ds.labels[i]);
    EXPECT_TRUE(std::equal(ds.inputs.raw() + i * dim, ds.inputs.raw() + (i + 1) * dim, ds.inputs.raw() + first * dim));
  }
}

TEST(Synth, InputsStayInUnitRange) {
  for (double noise : {0.0, 0.2, 0.45}) {
    SynthConfig s = small_synth(2);
    s.noise = noise;
    s.contrast = 0.5;
    const LabeledDataset ds = synth_generate(s);
    EXPECT_GE(ds.inputs.array().minCoeff(), 0.0f);
    EXPECT_LE(ds.inputs.array().maxCoeff(), 1.0f);
  }
}

TEST(Synth, InvalidConfig) {
  SynthConfig s = small_synth(1);
  s.noise = 0.5;
  EXPECT_ERRC(synth_generate(s), Errc::invalid_argument);
  s = small_synth(1);
  s.num_classes = 1;
  EXPECT_ERRC(synth_generate(s), Errc::invalid_argument);
}

TEST(Batches, SizesWithShortTail) {
  SynthConfig s = small_synth(1);
  s.num_classes = 2;
  s.samples_per_class = 5;
  const LabeledDataset ds = synth_generate(s);
  const auto b = batches(ds, 4);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].labels.size(), 4u);
  EXPECT_EQ(b[1].labels.size(), 4u);
  EXPECT_EQ(b[2].labels.size(), 2u);
  EXPECT_ERRC(batches(ds, 0), Errc::invalid_argument);
}

TEST(Batches, OrderAndCoverage) {
  const LabeledDataset ds = synth_generate(small_synth(4));
  std::vector<std::size_t> plain;
  for (const Batch& b : batches(ds, 64)) plain.insert(plain.end(), b.indices.begin(), b.indices.end());
  std::vector<std::size_t> identity(ds.size());
  std::iota(identity.begin(), identity.end(), 0);
  EXPECT_EQ(plain, identity);

  std::vector<std::size_t> first, second;
  for (const Batch& b : batches(ds, 64, 11)) first.insert(first.end(), b.indices.begin(), b.indices.end());
  for (const Batch& b : batches(ds, 64, 11)) second.insert(second.end(), b.indices.begin(), b.indices.end());
  EXPECT_EQ(first, second);
  EXPECT_NE(first, identity);
  std::vector<std::size_t> sorted = first;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, identity);

  for (const Batch& b : batches(ds, 100, 3)) {
    for (std::size_t r = 0; r < b.indices.size(); ++r) {
      EXPECT_EQ(b.labels[r], ds.labels[b.indices[r]]);
      EXPECT_EQ(b.inputs[r * 256], ds.inputs[b.indices[r] * 256]);
    }
  }
}

TEST(LabeledDataset, ValidateCatchesBrokenInvariants) {
  LabeledDataset ds = synth_generate(small_synth(1));
  ds.labels.pop_back();
  EXPECT_ERRC(ds.validate(), Errc::count_mismatch);
  ds = synth_generate(small_synth(1));
  ds.inputs[5] = 1.5f;
  EXPECT_ERRC(ds.validate(), Errc::invalid_argument);
}
