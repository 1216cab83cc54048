// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "initforge/errors.hpp"

namespace initforge {

namespace {
constexpr char kMagic[8] = {'I', 'F', 'G', 'A', 'R', 'C', 'H', '1'};
}

void Archive::put(const std::string& name, Tensor<float> t) {
  for (auto& [n, e] : entries_)
    if (n == name) {
      e = std::move(t);
      return;
    }
  entries_.emplace_back(name, std::move(t));
}

void Archive::put(const std::string& name, Tensor<double> t) {
  for (auto& [n, e] : entries_)
    if (n == name) {
      e = std::move(t);
      return;
    }
  entries_.emplace_back(name, std::move(t));
}

bool Archive::contains(const std::string& name) const {
  for (const auto& [n, e] : entries_)
    if (n == name) return true;
  return false;
}

const Archive::Entry& Archive::find(const std::string& name) const {
  for (const auto& [n, e] : entries_)
    if (n == name) return e;
  throw ArtifactError("archive has no tensor '" + name + "'");
}

const Tensor<float>& Archive::f32(const std::string& name) const {
  const auto* t = std::get_if<Tensor<float>>(&find(name));
  if (!t) throw ArtifactError("tensor '" + name + "' is not f32");
  return *t;
}

const Tensor<double>& Archive::f64(const std::string& name) const {
  const auto* t = std::get_if<Tensor<double>>(&find(name));
  if (!t) throw ArtifactError("tensor '" + name + "' is not f64");
  return *t;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto& [n, e] : entries_) out.push_back(n);
  return out;
}

std::string Archive::to_bytes() const {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, entry] : entries_) {
    nlohmann::json d;
    d["name"] = name;
    d["offset"] = payload.size();
    std::visit(
        [&](const auto& t) {
          using V = typename std::decay_t<decltype(t.data)>::value_type;
          d["dtype"] = sizeof(V) == 4 ? "f32" : "f64";
          d["shape"] = t.shape;
          const auto nbytes = t.data.size() * sizeof(V);
          d["nbytes"] = nbytes;
          payload.append(reinterpret_cast<const char*>(t.data.data()), nbytes);
        },
        entry);
    header["tensors"].push_back(std::move(d));
  }
  const std::string h = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += h;
  out += payload;
  return out;
}

Archive Archive::from_bytes(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ArtifactError("not an initforge archive");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof(len));
  if (16 + len > bytes.size()) throw ArtifactError("archive header truncated");
  Archive a;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("archive header unreadable: ") + e.what());
  }
  a.meta = header.value("meta", nlohmann::json::object());
  const std::size_t base = 16 + len;
  for (const auto& d : header.at("tensors")) {
    const auto offset = d.at("offset").get<std::size_t>();
    const auto nbytes = d.at("nbytes").get<std::size_t>();
    if (base + offset + nbytes > bytes.size()) throw ArtifactError("archive payload truncated");
    const Shape shape = d.at("shape").get<Shape>();
    const char* src = bytes.data() + base + offset;
    if (d.at("dtype") == "f32") {
      Tensor<float> t(shape);
      if (t.data.size() * sizeof(float) != nbytes) throw ArtifactError("archive size mismatch");
      std::memcpy(t.data.data(), src, nbytes);
      a.put(d.at("name").get<std::string>(), std::move(t));
    } else {
      Tensor<double> t(shape);
      if (t.data.size() * sizeof(double) != nbytes) throw ArtifactError("archive size mismatch");
      std::memcpy(t.data.data(), src, nbytes);
      a.put(d.at("name").get<std::string>(), std::move(t));
    }
  }
  return a;
}

void Archive::save(const std::filesystem::path& path) const { write_file(path, to_bytes()); }

Archive Archive::load(const std::filesystem::path& path) { return from_bytes(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArtifactError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace initforge
