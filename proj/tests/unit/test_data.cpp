// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "initforge/archive.hpp"
#include "initforge/dataset.hpp"
#include "initforge/errors.hpp"

namespace fs = std::filesystem;

namespace initforge {
namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("initforge_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Archive, RoundTripPreservesTensorsAndMeta) {
  Archive a;
  a.meta["type"] = "demo";
  a.meta["values"] = {1, 2, 3};
  a.put("w", Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6}));
  a.put("d", Tensor<double>({1}, {0.1}));
  const auto bytes = a.to_bytes();
  const auto b = Archive::from_bytes(bytes);
  EXPECT_EQ(b.meta, a.meta);
  EXPECT_EQ(b.f32("w"), a.f32("w"));
  EXPECT_EQ(b.f64("d").data[0], 0.1);
  EXPECT_EQ(b.to_bytes(), bytes);
  EXPECT_TRUE(b.contains("w"));
  EXPECT_FALSE(b.contains("x"));
  EXPECT_THROW(b.f64("w"), std::exception);
}

TEST(Archive, CorruptOrMissingFilesAreArtifactErrors) {
  const auto dir = scratch("archive");
  Archive a;
  a.put("w", Tensor<float>({4}, 1.0f));
  a.save(dir / "a.bin");
  auto bytes = read_file(dir / "a.bin");
  EXPECT_THROW(Archive::from_bytes(bytes.substr(0, bytes.size() - 3)), ArtifactError);
  EXPECT_THROW(Archive::from_bytes("not an archive"), ArtifactError);
  EXPECT_THROW(Archive::load(dir / "absent.bin"), ArtifactError);
}

TEST(Texture, DeterministicBalancedAndInRange) {
  TextureConfig tc;
  tc.num_samples = 301;
  tc.image_size = 12;
  tc.num_classes = 3;
  const auto a = make_texture_dataset(tc);
  EXPECT_EQ(a.images.shape, (Shape{301, 3, 12, 12}));
  EXPECT_EQ(a.images, make_texture_dataset(tc).images);
  EXPECT_NO_THROW(a.check());
  std::vector<int> counts(3, 0);
  for (int y : a.labels) ++counts[static_cast<std::size_t>(y)];
  EXPECT_LE(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()), 1);
  for (float v : a.images.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  tc.seed = 9;
  EXPECT_NE(make_texture_dataset(tc).images, a.images);
  tc.domain = TextureDomain::shifted;
  EXPECT_NE(make_texture_dataset(tc).images, a.images);
}

TEST(Split, DisjointCoverWithRequestedFractions) {
  TextureConfig tc;
  tc.num_samples = 1000;
  tc.image_size = 8;
  auto all = make_texture_dataset(tc);
  // Tag every image by writing its index into the first pixel.
  for (std::int64_t i = 0; i < all.size(); ++i) all.images.data[static_cast<std::size_t>(i * 3 * 64)] = static_cast<float>(i);
  const auto s = split_dataset(all, 0.7, 0.1, 3);
  EXPECT_EQ(s.train.size(), 700);
  EXPECT_EQ(s.val.size(), 100);
  EXPECT_EQ(s.test.size(), 200);
  std::set<float> seen;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (std::int64_t i = 0; i < part->size(); ++i) seen.insert(part->images.data[static_cast<std::size_t>(i * 3 * 64)]);
  }
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_EQ(split_dataset(all, 0.7, 0.1, 3).train.labels, s.train.labels);
}

TEST(Batch, ChannelMajorLayout) {
  LabeledDataset d;
  d.num_classes = 2;
  d.images = Tensor<float>({2, 2, 1, 2}, {0, 1, 2, 3, 10, 11, 12, 13});  // N C H W
  d.labels = {0, 1};
  const std::vector<std::int64_t> idx = {1, 0};
  const auto b = batch_cnhw(d, idx);
  EXPECT_EQ(b.shape, (Shape{2, 2, 1, 2}));
  EXPECT_EQ(b.data, (std::vector<float>{10, 11, 0, 1, 12, 13, 2, 3}));
  EXPECT_EQ(batch_labels(d, idx), (std::vector<int>{1, 0}));
  d.labels = {0, 2};
  EXPECT_THROW(d.check(), std::invalid_argument);
}

TEST(TensorFile, RoundTripWithSidecar) {
  const auto dir = scratch("tensor");
  TextureConfig tc;
  tc.num_samples = 20;
  tc.image_size = 6;
  const auto a = make_texture_dataset(tc);
  save_tensor_file(a, dir / "set.bin");
  EXPECT_TRUE(fs::exists(dir / "set.bin.json"));
  const auto b = load_tensor_file(dir / "set.bin");
  EXPECT_EQ(b.images, a.images);
  EXPECT_EQ(b.labels, a.labels);
  EXPECT_EQ(b.num_classes, a.num_classes);
  fs::remove(dir / "set.bin.json");
  EXPECT_THROW(load_tensor_file(dir / "set.bin"), ArtifactError);
}

void write_pgm(const fs::path& p, int w, int h, unsigned char fill) {
  std::ofstream f(p, std::ios::binary);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (int i = 0; i < w * h; ++i) f.put(static_cast<char>(fill));
}

TEST(ImageFolder, SortedClassFoldersBecomeLabels) {
  const auto dir = scratch("folder");
  fs::create_directories(dir / "b_tumour");
  fs::create_directories(dir / "a_benign");
  write_pgm(dir / "a_benign" / "x.pgm", 4, 4, 0);
  write_pgm(dir / "a_benign" / "y.pgm", 4, 4, 255);
  write_pgm(dir / "b_tumour" / "z.pgm", 4, 4, 51);
  const auto d = load_image_folder(dir);
  EXPECT_EQ(d.num_classes, 2);
  EXPECT_EQ(d.size(), 3);
  std::multiset<int> labels(d.labels.begin(), d.labels.end());
  EXPECT_EQ(labels.count(0), 2u);
  EXPECT_EQ(labels.count(1), 1u);
  for (float v : d.images.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  write_pgm(dir / "b_tumour" / "bad.pgm", 5, 4, 0);
  EXPECT_THROW(load_image_folder(dir), std::exception);
}

}  // namespace
}  // namespace initforge
