// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "initforge/tensor.hpp"

namespace initforge {

enum class Split { train, val, test, all };

// Images are N x C x H x W with pixel values in [0, 1].
struct LabeledDataset {
  Tensor<float> images;
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::all;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t channels() const { return images.shape.at(1); }
  std::int64_t height() const { return images.shape.at(2); }
  std::int64_t width() const { return images.shape.at(3); }

  LabeledDataset subset(std::span<const std::int64_t> indices) const;
  // Throws std::invalid_argument if a label is outside [0, num_classes).
  void check() const;
};

struct DatasetSplits {
  LabeledDataset train, val, test;
};

// Seeded shuffle, then contiguous train/val/test fractions (val gets the
// rounding remainder-free share, test the rest).
DatasetSplits split_dataset(const LabeledDataset& all, double train_fraction,
                            double val_fraction, std::uint64_t seed);

// Gathers a batch as a channel-major [C, B, H, W] tensor for the executor.
Tensor<float> batch_cnhw(const LabeledDataset& data, std::span<const std::int64_t> indices);
std::vector<int> batch_labels(const LabeledDataset& data, std::span<const std::int64_t> indices);

// Bundled desk-scale data: oriented textures whose class is the orientation
// bin (K bins over 180 degrees). The `source` domain renders noisy sine
// gratings in random colours; the `shifted` domain renders square-wave
// stripes in a stain-like palette with heavier noise, keeping the same
// labelling rule.
enum class TextureDomain { source, shifted };
struct TextureConfig {
  std::int64_t num_samples = 8000;
  int num_classes = 2;
  int image_size = 16;
  TextureDomain domain = TextureDomain::source;
  std::uint64_t seed = 0;
  bool balanced = true;  // exact round-robin class assignment before shuffling
};
LabeledDataset make_texture_dataset(const TextureConfig& cfg);

// Single binary tensor file: float32 images followed by int32 labels, with a
// JSON sidecar `<path>.json` = {"shape":[N,C,H,W],"num_classes":K}.
void save_tensor_file(const LabeledDataset& data, const std::filesystem::path& path);
LabeledDataset load_tensor_file(const std::filesystem::path& path);
// Directory of class subfolders (sorted names = class ids) holding binary
// PGM (P5) or PPM (P6) images of equal size.
LabeledDataset load_image_folder(const std::filesystem::path& root);

}  // namespace initforge
