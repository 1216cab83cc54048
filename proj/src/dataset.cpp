// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/dataset.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "initforge/archive.hpp"
#include "initforge/errors.hpp"
#include "initforge/rng.hpp"

namespace initforge {

LabeledDataset LabeledDataset::subset(std::span<const std::int64_t> indices) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.split = split;
  const std::int64_t per = channels() * height() * width();
  out.images = Tensor<float>({static_cast<std::int64_t>(indices.size()), channels(), height(), width()});
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::int64_t src = indices[i];
    if (src < 0 || src >= size()) throw std::out_of_range("dataset index out of range");
    std::copy_n(images.ptr() + src * per, per, out.images.ptr() + static_cast<std::int64_t>(i) * per);
    out.labels.push_back(labels[src]);
  }
  return out;
}

void LabeledDataset::check() const {
  if (images.shape.size() != 4) throw std::invalid_argument("images must be N x C x H x W");
  if (images.shape[0] != size()) throw std::invalid_argument("image and label counts differ");
  if (num_classes < 2) throw std::invalid_argument("dataset needs at least 2 classes");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " at index " +
                                  std::to_string(i) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
}

DatasetSplits split_dataset(const LabeledDataset& all, double train_fraction, double val_fraction,
                            std::uint64_t seed) {
  if (train_fraction <= 0 || val_fraction < 0 || train_fraction + val_fraction > 1) {
    throw std::invalid_argument("invalid split fractions");
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(all.size()));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, 0x5b117ULL);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<std::int64_t>(order.size());
  const auto n_train = static_cast<std::int64_t>(std::floor(train_fraction * n));
  const auto n_val = static_cast<std::int64_t>(std::floor(val_fraction * n));
  std::span<const std::int64_t> idx(order);
  DatasetSplits s;
  s.train = all.subset(idx.subspan(0, n_train));
  s.val = all.subset(idx.subspan(n_train, n_val));
  s.test = all.subset(idx.subspan(n_train + n_val));
  s.train.split = Split::train;
  s.val.split = Split::val;
  s.test.split = Split::test;
  return s;
}

Tensor<float> batch_cnhw(const LabeledDataset& data, std::span<const std::int64_t> indices) {
  const std::int64_t c = data.channels(), hw = data.height() * data.width();
  const auto b = static_cast<std::int64_t>(indices.size());
  Tensor<float> out({c, b, data.height(), data.width()});
  for (std::int64_t i = 0; i < b; ++i) {
    const float* src = data.images.ptr() + indices[i] * c * hw;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      std::copy_n(src + ch * hw, hw, out.ptr() + (ch * b + i) * hw);
    }
  }
  return out;
}

std::vector<int> batch_labels(const LabeledDataset& data, std::span<const std::int64_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.labels.at(static_cast<std::size_t>(i)));
  return out;
}

LabeledDataset make_texture_dataset(const TextureConfig& cfg) {
  if (cfg.num_samples < 1) throw std::invalid_argument("texture dataset needs samples");
  if (cfg.num_classes < 2) throw std::invalid_argument("texture dataset needs >= 2 classes");
  if (cfg.image_size < 4) throw std::invalid_argument("texture images must be at least 4 px");

  const bool shifted = cfg.domain == TextureDomain::shifted;
  auto rng = make_rng(cfg.seed, shifted ? 0x7e47bULL : 0x7e47aULL);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  LabeledDataset out;
  out.num_classes = cfg.num_classes;
  const int s = cfg.image_size;
  out.images = Tensor<float>({cfg.num_samples, 3, s, s});
  out.labels.resize(static_cast<std::size_t>(cfg.num_samples));
  for (std::int64_t i = 0; i < cfg.num_samples; ++i) {
    out.labels[i] = cfg.balanced ? static_cast<int>(i % cfg.num_classes)
                                 : static_cast<int>(unif(rng) * cfg.num_classes);
  }
  if (cfg.balanced) std::shuffle(out.labels.begin(), out.labels.end(), rng);

  const double pi = std::numbers::pi;
  const std::int64_t hw = static_cast<std::int64_t>(s) * s;
  for (std::int64_t i = 0; i < cfg.num_samples; ++i) {
    const int label = out.labels[i];
    // Orientation bins of width pi/K; jitter stays inside the central 70%.
    const double theta = pi * (label + 0.7 * (unif(rng) - 0.5)) / cfg.num_classes;
    const double freq = shifted ? 2.5 + 3.0 * unif(rng) : 1.5 + 3.0 * unif(rng);
    const double phase = 2.0 * pi * unif(rng);
    const double contrast = 0.35 + 0.6 * unif(rng);
    const double noise = shifted ? 0.16 : 0.08;
    std::array<double, 3> fg{}, bg{};
    for (int c = 0; c < 3; ++c) {
      if (shifted) {
        // Stain-like palette: pink foreground on a purple-blue background.
        static constexpr std::array<double, 3> kFg{0.85, 0.45, 0.70}, kBg{0.40, 0.20, 0.55};
        fg[c] = std::clamp(kFg[c] + 0.08 * normal(rng), 0.0, 1.0);
        bg[c] = std::clamp(kBg[c] + 0.08 * normal(rng), 0.0, 1.0);
      } else {
        fg[c] = unif(rng);
        bg[c] = unif(rng);
      }
    }
    const double ct = std::cos(theta), st = std::sin(theta);
    float* img = out.images.ptr() + i * 3 * hw;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double u = (x * ct + y * st) / s;
        double wave = std::sin(2.0 * pi * freq * u + phase);
        if (shifted) wave = wave >= 0 ? 1.0 : -1.0;
        const double mix = 0.5 + 0.5 * contrast * wave;
        for (int c = 0; c < 3; ++c) {
          const double v = mix * fg[c] + (1.0 - mix) * bg[c] + noise * normal(rng);
          img[c * hw + y * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return out;
}

void save_tensor_file(const LabeledDataset& data, const std::filesystem::path& path) {
  data.check();
  std::string bytes(reinterpret_cast<const char*>(data.images.ptr()),
                    data.images.data.size() * sizeof(float));
  for (int label : data.labels) {
    const auto v = static_cast<std::int32_t>(label);
    bytes.append(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  write_file(path, bytes);
  nlohmann::json side = {{"shape", data.images.shape}, {"num_classes", data.num_classes}};
  write_file(path.string() + ".json", side.dump());
}

LabeledDataset load_tensor_file(const std::filesystem::path& path) {
  const auto side_path = std::filesystem::path(path.string() + ".json");
  if (!std::filesystem::exists(side_path)) {
    throw ArtifactError("missing sidecar " + side_path.string());
  }
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_file(side_path));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("unreadable sidecar " + side_path.string() + ": " + e.what());
  }
  LabeledDataset out;
  const Shape shape = side.at("shape").get<Shape>();
  if (shape.size() != 4) throw ArtifactError("sidecar shape must be [N, C, H, W]");
  out.num_classes = side.at("num_classes").get<int>();
  const std::string bytes = read_file(path);
  const std::size_t n_img = static_cast<std::size_t>(numel(shape));
  const std::size_t expect = n_img * sizeof(float) + static_cast<std::size_t>(shape[0]) * 4;
  if (bytes.size() != expect) {
    throw ArtifactError(path.string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(expect));
  }
  out.images = Tensor<float>(shape);
  std::memcpy(out.images.ptr(), bytes.data(), n_img * sizeof(float));
  out.labels.resize(static_cast<std::size_t>(shape[0]));
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    std::int32_t v;
    std::memcpy(&v, bytes.data() + n_img * sizeof(float) + i * 4, 4);
    out.labels[i] = v;
  }
  out.check();
  return out;
}

namespace {

struct Netpbm {
  int channels = 0, width = 0, height = 0;
  std::vector<float> pixels;  // channel-major
};

Netpbm read_netpbm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_space();
    int v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw ArtifactError("malformed image header in " + path.string());
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ArtifactError(path.string() + " is not a binary PGM/PPM image");
  }
  pos = 2;
  Netpbm img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  img.width = read_int();
  img.height = read_int();
  const int maxval = read_int();
  if (maxval <= 0 || maxval > 255) throw ArtifactError(path.string() + ": only 8-bit images");
  ++pos;  // single whitespace before the raster
  const std::size_t hw = static_cast<std::size_t>(img.width) * img.height;
  if (pos + hw * img.channels > bytes.size()) throw ArtifactError(path.string() + " is truncated");
  img.pixels.resize(hw * img.channels);
  for (std::size_t p = 0; p < hw; ++p) {
    for (int c = 0; c < img.channels; ++c) {
      img.pixels[c * hw + p] =
          static_cast<unsigned char>(bytes[pos + p * img.channels + c]) / static_cast<float>(maxval);
    }
  }
  return img;
}

}  // namespace

LabeledDataset load_image_folder(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw ArtifactError("no dataset directory " + root.string());
  std::vector<std::filesystem::path> classes;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory()) classes.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.size() < 2) throw ArtifactError(root.string() + " needs at least 2 class folders");

  std::vector<Netpbm> images;
  std::vector<int> labels;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(classes[k])) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      images.push_back(read_netpbm(f));
      labels.push_back(static_cast<int>(k));
    }
  }
  if (images.empty()) throw ArtifactError(root.string() + " holds no PGM/PPM images");
  const auto& first = images.front();
  LabeledDataset out;
  out.num_classes = static_cast<int>(classes.size());
  out.images = Tensor<float>({static_cast<std::int64_t>(images.size()), first.channels,
                              first.height, first.width});
  const std::size_t per = first.pixels.size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    if (im.channels != first.channels || im.width != first.width || im.height != first.height) {
      throw ArtifactError("images in " + root.string() + " differ in size or channel count");
    }
    std::copy(im.pixels.begin(), im.pixels.end(), out.images.data.begin() + i * per);
  }
  out.labels = std::move(labels);
  return out;
}

}  // namespace initforge
