#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "counterfort/data.hpp"
#include "oracles.hpp"

using namespace counterfort;

namespace {

std::vector<unsigned char> cifar10_record(unsigned char label, unsigned char fill) {
  std::vector<unsigned char> r(3073, fill);
  r[0] = label;
  return r;
}

void write(const std::string& path, const std::vector<unsigned char>& bytes) { write_file_bytes(path, bytes); }

}  // namespace

TEST(Cifar, PixelScalingAndRecordOrder) {
  oracle::TempDir dir("cifar");
  std::vector<unsigned char> bytes;
  for (auto r : {cifar10_record(7, 0), cifar10_record(2, 255)}) bytes.insert(bytes.end(), r.begin(), r.end());
  bytes[3073 + 1] = 51;  // first red pixel of the second record
  write(dir.file("test_batch.bin"), bytes);
  const Dataset ds = load_cifar10(dir.file("test_batch.bin"), "test").materialize();
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.images.dims, (Dims{2, 3, 32, 32}));
  EXPECT_EQ(ds.labels, (LabelBatch{7, 2}));
  EXPECT_EQ(ds.labels[0], bytes[0]);
  for (std::size_t i = 0; i < 3072; ++i) ASSERT_EQ(ds.images[i], 0.0);
  EXPECT_EQ(ds.images[3072], 51.0 / 255.0);
  for (std::size_t i = 3073; i < 6144; ++i) ASSERT_EQ(ds.images[i], 1.0);
}

TEST(Cifar, ChannelPlanarLayout) {
  oracle::TempDir dir("cifar-planar");
  auto r = cifar10_record(0, 0);
  r[1 + 1024 + 32 * 5 + 3] = 255;  // green plane, row 5, column 3
  write(dir.file("b.bin"), r);
  const Dataset ds = load_cifar10(dir.file("b.bin"), "test").materialize();
  EXPECT_EQ(ds.images[(1 * 32 + 5) * 32 + 3], 1.0);
}

TEST(Cifar, WrongSizeReportsByteCounts) {
  oracle::TempDir dir("cifar-size");
  write(dir.file("bad.bin"), std::vector<unsigned char>(3073 * 2 + 5, 1));
  try {
    load_cifar10(dir.file("bad.bin"), "test");
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("6151"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3073"), std::string::npos) << msg;
  }
}

TEST(Cifar, Cifar100UsesFineLabel) {
  oracle::TempDir dir("cifar100");
  std::vector<unsigned char> r(3074, 0);
  r[0] = 4;   // coarse
  r[1] = 93;  // fine
  write(dir.file("test.bin"), r);
  const Dataset ds = load_cifar100(dir.path.string(), "test").materialize();
  EXPECT_EQ(ds.labels, (LabelBatch{93}));
  EXPECT_EQ(ds.classes, 100u);
  for (double v : ds.images.values) ASSERT_EQ(v, 0.0);
  write(dir.file("train.bin"), std::vector<unsigned char>(3073, 0));
  EXPECT_THROW(load_cifar100(dir.path.string(), "train"), FormatError);
}

TEST(Cifar, DirectoryLoadingFindsNestedFolderAndTrainBatches) {
  oracle::TempDir dir("cifar-dir");
  const auto nested = dir.path / "cifar-10-batches-bin";
  std::filesystem::create_directories(nested);
  for (int i = 1; i <= 5; ++i) write((nested / ("data_batch_" + std::to_string(i) + ".bin")).string(), cifar10_record(i, 9));
  write((nested / "test_batch.bin").string(), cifar10_record(0, 9));
  const ByteImages train = load_cifar10(dir.path.string(), "train");
  EXPECT_EQ(train.labels, (LabelBatch{1, 2, 3, 4, 5}));
  EXPECT_EQ(load_cifar10(dir.path.string(), "test").size(), 1u);
  EXPECT_THROW(load_cifar10(dir.path.string(), "validation"), ValidationError);
}

TEST(Subset, FullSizeIsAPermutationOfMembership) {
  DatasetHandle h;
  h.count = 50;
  const DatasetHandle s = subset(h, 50, 3);
  EXPECT_EQ(s.members(), h.members());
}

TEST(Subset, SeedDeterministicAndSeedSensitive) {
  DatasetHandle h;
  h.count = 10000;
  EXPECT_EQ(subset(h, 1000, 1).indices, subset(h, 1000, 1).indices);
  std::set<std::vector<std::size_t>> distinct;
  for (std::uint64_t seed = 0; seed < 5; ++seed) distinct.insert(subset(h, 1000, seed).indices);
  EXPECT_GT(distinct.size(), 1u);
  const auto idx = subset(h, 1000, 9).indices;
  EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 1000u);
}

TEST(Subset, RejectsTooLarge) {
  DatasetHandle h;
  h.count = 10;
  try {
    subset(h, 11, 0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "subset.n");
  }
  // Subsetting a subset draws from its members only.
  const DatasetHandle s = subset(h, 4, 1);
  const DatasetHandle ss = subset(s, 2, 2);
  for (std::size_t i : ss.indices) EXPECT_TRUE(std::find(s.indices.begin(), s.indices.end(), i) != s.indices.end());
  EXPECT_THROW(subset(s, 5, 0), ValidationError);
}

TEST(Synthetic, LargeSeparationIsNearestCentroidSeparable) {
  const Dataset ds = synth_blobs(5, 500, {2, 4, 4}, 8.0, 11);
  const std::size_t per = 32;
  std::vector<std::vector<double>> centroid(5, std::vector<double>(per, 0.0));
  std::vector<int> counts(5, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ++counts[static_cast<std::size_t>(ds.labels[i])];
    for (std::size_t k = 0; k < per; ++k) centroid[static_cast<std::size_t>(ds.labels[i])][k] += ds.images[i * per + k];
  }
  for (std::size_t c = 0; c < 5; ++c) {
    for (double& v : centroid[c]) v /= counts[c];
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < 5; ++c) {
      double d = 0;
      for (std::size_t k = 0; k < per; ++k) d += std::pow(ds.images[i * per + k] - centroid[c][k], 2);
      if (d < best_d) best_d = d, best = c;
    }
    correct += static_cast<int>(best) == ds.labels[i];
  }
  EXPECT_EQ(correct, ds.size());
}

TEST(Synthetic, DeterministicBalancedAndInRange) {
  const Dataset a = synth_blobs(10, 1000, {3, 4, 4}, 1.0, 5);
  const Dataset b = synth_blobs(10, 1000, {3, 4, 4}, 1.0, 5);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_TRUE(all_in_unit_interval(a.images.span()));
  std::vector<int> counts(10, 0);
  for (int y : a.labels) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) EXPECT_NEAR(c, 100, 10);
  EXPECT_THROW(synth_blobs(10, 10, {4}, 0.0, 1), ValidationError);
}

TEST(Synthetic, StreamsShareClassPatterns) {
  // Different streams of one seed are draws from the same task: class means agree.
  const Dataset a = synth_blobs(2, 2000, {16}, 4.0, 7, 0);
  const Dataset b = synth_blobs(2, 2000, {16}, 4.0, 7, 1);
  EXPECT_NE(a.images, b.images);
  for (std::size_t k = 0; k < 16; ++k) {
    double ma = 0, mb = 0;
    int na = 0, nb = 0;
    for (std::size_t i = 0; i < 2000; ++i) {
      if (a.labels[i] == 0) ma += a.images[i * 16 + k], ++na;
      if (b.labels[i] == 0) mb += b.images[i * 16 + k], ++nb;
    }
    EXPECT_NEAR(ma / na, mb / nb, 0.02);
  }
}

TEST(DatasetFile, RoundTripAndSourceDescriptors) {
  oracle::TempDir dir("dataset");
  const Dataset ds = synth_blobs(3, 30, {1, 4, 4}, 2.0, 1);
  save_dataset(ds, dir.file("d.cfb"), {{"origin", "synthetic"}});
  const Dataset back = load_dataset(dir.file("d.cfb"));
  EXPECT_EQ(back.images, ds.images);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.classes, 3u);

  const DatasetHandle h = open_dataset({{"kind", "file"}, {"path", dir.file("d.cfb")}});
  EXPECT_EQ(h.count, 30u);
  const Dataset part = materialize(subset(h, 5, 4));
  const auto idx = subset(h, 5, 4).indices;
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(part.labels[i], ds.labels[idx[i]]);

  const nlohmann::json synth = {{"kind", "synthetic"}, {"classes", 3}, {"n", 30}, {"dims", {1, 4, 4}}, {"separation", 2.0}, {"seed", 1}};
  EXPECT_EQ(materialize(open_dataset(synth)).images, ds.images);
  EXPECT_THROW(open_dataset({{"kind", "imagenet"}}), ValidationError);
}
