// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Binary container shared by every artifact (checkpoints, weight datasets,
// generator models, weight sets):
//
//   "IFGARCH1" | u64 header length | JSON header | raw little-endian payload
//
// The header holds free-form metadata plus a directory of named tensors
// ({name, dtype f32|f64, shape, offset, nbytes}). Object keys are sorted, so
// equal contents always serialise to equal bytes.

#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <variant>
#include <vector>

#include "initforge/tensor.hpp"

namespace initforge {

class Archive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, Tensor<float> t);
  void put(const std::string& name, Tensor<double> t);
  bool contains(const std::string& name) const;
  const Tensor<float>& f32(const std::string& name) const;
  const Tensor<double>& f64(const std::string& name) const;
  std::vector<std::string> names() const;

  std::string to_bytes() const;
  static Archive from_bytes(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);  // throws ArtifactError

 private:
  using Entry = std::variant<Tensor<float>, Tensor<double>>;
  std::vector<std::pair<std::string, Entry>> entries_;
  const Entry& find(const std::string& name) const;
};

std::string read_file(const std::filesystem::path& path);
// Writes via a temporary sibling and rename, so readers never see partial files.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace initforge
