// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/archspace.hpp"

#include <array>
#include <deque>
#include <nlohmann/json.hpp>

#include "initforge/errors.hpp"

namespace initforge {

namespace {

constexpr std::array<std::string_view, kNumOpKinds> kOpNames = {
    "input", "conv", "linear", "batchnorm", "relu", "add", "pool", "global_pool", "output"};

class GraphBuilder {
 public:
  explicit GraphBuilder(std::string name) { g_.name = std::move(name); }

  int add(OpKind op, std::vector<int> inputs, std::optional<Shape> shape = std::nullopt,
          std::map<std::string, std::int64_t> attrs = {}) {
    const int id = static_cast<int>(g_.nodes.size());
    g_.nodes.push_back(NodeSpec{id, op, std::move(shape), std::move(attrs)});
    for (int src : inputs) g_.edges.emplace_back(src, id);
    return id;
  }

  int conv(int in, std::int64_t out_ch, std::int64_t in_ch, int k, int stride) {
    return add(OpKind::conv, {in}, Shape{out_ch, in_ch, k, k},
               {{"kernel", k}, {"padding", k / 2}, {"stride", stride}});
  }
  int bn(int in, std::int64_t ch) { return add(OpKind::batchnorm, {in}, Shape{ch}); }
  int relu(int in) { return add(OpKind::relu, {in}); }

  CompGraph take() { return std::move(g_); }

 private:
  CompGraph g_;
};

}  // namespace

std::string_view op_name(OpKind op) { return kOpNames.at(static_cast<std::size_t>(op)); }

OpKind op_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  }
  throw GraphError("unknown op kind '" + std::string(name) + "'");
}

bool is_parameterised(OpKind op) {
  return op == OpKind::conv || op == OpKind::linear || op == OpKind::batchnorm;
}

std::string_view param_kind_name(ParamKind kind) {
  switch (kind) {
    case ParamKind::conv_kernel: return "conv_kernel";
    case ParamKind::bn_scale: return "bn_scale";
    case ParamKind::bn_shift: return "bn_shift";
    case ParamKind::bias: return "bias";
    case ParamKind::linear_weight: return "linear_weight";
  }
  return "?";
}

std::vector<std::vector<int>> CompGraph::predecessors() const {
  std::vector<std::vector<int>> out(nodes.size());
  for (auto [s, d] : edges) out.at(d).push_back(s);
  return out;
}

std::vector<std::vector<int>> CompGraph::successors() const {
  std::vector<std::vector<int>> out(nodes.size());
  for (auto [s, d] : edges) out.at(s).push_back(d);
  return out;
}

void validate(const CompGraph& g) {
  const int n = static_cast<int>(g.nodes.size());
  if (n == 0) throw GraphError("graph has no nodes");
  int inputs = 0, outputs = 0;
  for (int i = 0; i < n; ++i) {
    const auto& node = g.nodes[i];
    if (node.id != i) throw GraphError("node ids must be dense and in node order");
    if (is_parameterised(node.op) != node.param_shape.has_value()) {
      throw GraphError("node " + std::to_string(i) + ": param shape presence does not match op " +
                       std::string(op_name(node.op)));
    }
    if (node.param_shape) {
      const auto& s = *node.param_shape;
      const std::size_t rank = node.op == OpKind::conv ? 4 : node.op == OpKind::linear ? 2 : 1;
      if (s.size() != rank) throw GraphError("node " + std::to_string(i) + ": bad param rank");
      for (auto d : s)
        if (d < 1) throw GraphError("node " + std::to_string(i) + ": dimension < 1");
      if (node.op == OpKind::conv && s[2] != s[3]) {
        throw GraphError("node " + std::to_string(i) + ": non-square kernel");
      }
    }
    inputs += node.op == OpKind::input;
    outputs += node.op == OpKind::output;
  }
  if (inputs != 1) throw GraphError("graph must have exactly one input node");
  if (outputs != 1) throw GraphError("graph must have exactly one output node");

  std::vector<int> indegree(n, 0);
  for (auto [s, d] : g.edges) {
    if (s < 0 || s >= n || d < 0 || d >= n) throw GraphError("edge endpoint out of range");
    ++indegree[d];
  }
  // Kahn's algorithm detects cycles independently of the stored order.
  const auto succ = g.successors();
  std::deque<int> ready;
  for (int i = 0; i < n; ++i)
    if (indegree[i] == 0) ready.push_back(i);
  int seen = 0;
  while (!ready.empty()) {
    const int v = ready.front();
    ready.pop_front();
    ++seen;
    for (int w : succ[v])
      if (--indegree[w] == 0) ready.push_back(w);
  }
  if (seen != n) throw GraphError("graph not acyclic");
  for (auto [s, d] : g.edges) {
    if (s >= d) throw GraphError("node order is not a topological order");
  }

  const auto pred = g.predecessors();
  auto reach = [n](int start, const std::vector<std::vector<int>>& adj) {
    std::vector<bool> mark(n, false);
    std::vector<int> stack{start};
    mark[start] = true;
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int w : adj[v])
        if (!mark[w]) {
          mark[w] = true;
          stack.push_back(w);
        }
    }
    return mark;
  };
  int in_id = 0, out_id = 0;
  for (const auto& node : g.nodes) {
    if (node.op == OpKind::input) in_id = node.id;
    if (node.op == OpKind::output) out_id = node.id;
  }
  const auto from_input = reach(in_id, succ);
  const auto to_output = reach(out_id, pred);
  for (int i = 0; i < n; ++i) {
    if (!from_input[i] || !to_output[i]) {
      throw GraphError("node " + std::to_string(i) + " is not on an input-to-output path");
    }
  }
}

std::string resnet_name(int depth, int width) {
  std::string name = "resnet" + std::to_string(depth);
  if (width != 1) name += "w" + std::to_string(width);
  return name;
}

CompGraph build_resnet_graph(int depth, int width, int num_classes) {
  if (depth < 8 || (depth - 2) % 6 != 0) {
    throw std::invalid_argument("resnet depth must be 6n+2 with n >= 1, got " +
                                std::to_string(depth));
  }
  if (width < 1) throw std::invalid_argument("resnet width must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("resnet needs at least 2 classes");

  const int blocks = (depth - 2) / 6;
  GraphBuilder b(resnet_name(depth, width));
  int x = b.add(OpKind::input, {}, std::nullopt, {{"channels", 3}});
  std::int64_t channels = 16 * width;
  x = b.relu(b.bn(b.conv(x, channels, 3, 3, 1), channels));

  for (int stage = 0; stage < 3; ++stage) {
    const std::int64_t out_ch = 16 * width * (std::int64_t{1} << stage);
    for (int block = 0; block < blocks; ++block) {
      const int stride = (stage > 0 && block == 0) ? 2 : 1;
      const int block_in = x;
      int y = b.relu(b.bn(b.conv(block_in, out_ch, channels, 3, stride), out_ch));
      y = b.bn(b.conv(y, out_ch, out_ch, 3, 1), out_ch);
      int shortcut = block_in;
      if (stride != 1 || channels != out_ch) {
        shortcut = b.bn(b.conv(block_in, out_ch, channels, 1, stride), out_ch);
      }
      x = b.relu(b.add(OpKind::add, {y, shortcut}));
      channels = out_ch;
    }
  }
  x = b.add(OpKind::global_pool, {x});
  x = b.add(OpKind::linear, {x}, Shape{num_classes, channels});
  b.add(OpKind::output, {x});
  return b.take();
}

std::vector<ParamSpec> enumerate_params(const CompGraph& g) {
  std::vector<ParamSpec> out;
  for (const auto& node : g.nodes) {
    if (!node.param_shape) continue;
    const Shape& s = *node.param_shape;
    switch (node.op) {
      case OpKind::conv:
        out.push_back({node.id, s, ParamKind::conv_kernel});
        break;
      case OpKind::batchnorm:
        out.push_back({node.id, s, ParamKind::bn_scale});
        out.push_back({node.id, s, ParamKind::bn_shift});
        break;
      case OpKind::linear:
        out.push_back({node.id, Shape{s[0]}, ParamKind::bias});
        out.push_back({node.id, s, ParamKind::linear_weight});
        break;
      default:
        break;
    }
  }
  return out;
}

std::int64_t fan_in(const ParamSpec& spec) {
  switch (spec.kind) {
    case ParamKind::conv_kernel: return spec.shape[1] * spec.shape[2] * spec.shape[3];
    case ParamKind::linear_weight: return spec.shape[1];
    default: return 1;
  }
}

std::int64_t fan_out(const ParamSpec& spec) {
  switch (spec.kind) {
    case ParamKind::conv_kernel: return spec.shape[0] * spec.shape[2] * spec.shape[3];
    case ParamKind::linear_weight: return spec.shape[0];
    default: return 1;
  }
}

std::int64_t total_param_count(const CompGraph& g) {
  std::int64_t total = 0;
  for (const auto& node : g.nodes) {
    if (!node.param_shape) continue;
    const auto& s = *node.param_shape;
    if (node.op == OpKind::conv) total += s[0] * s[1] * s[2] * s[3];
    if (node.op == OpKind::batchnorm) total += 2 * s[0];
    if (node.op == OpKind::linear) total += s[0] * s[1] + s[0];
  }
  return total;
}

std::string serialize_graph(const CompGraph& g) {
  nlohmann::json j;
  j["name"] = g.name;
  j["nodes"] = nlohmann::json::array();
  for (const auto& node : g.nodes) {
    nlohmann::json jn;
    jn["id"] = node.id;
    jn["op"] = op_name(node.op);
    if (node.param_shape) jn["shape"] = *node.param_shape;
    if (!node.attrs.empty()) jn["attrs"] = node.attrs;
    j["nodes"].push_back(std::move(jn));
  }
  j["edges"] = nlohmann::json::array();
  for (auto [s, d] : g.edges) j["edges"].push_back({s, d});
  return j.dump();
}

CompGraph deserialize_graph(std::string_view bytes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw GraphError(std::string("graph parse error: ") + e.what());
  }
  auto field = [](const nlohmann::json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) {
      throw GraphError("graph parse error: missing field '" + where + key + "'");
    }
    return obj.at(key);
  };
  CompGraph g;
  try {
    g.name = field(j, "name", "").get<std::string>();
    const auto nodes = field(j, "nodes", "");
    if (!nodes.is_array()) throw GraphError("graph parse error: field 'nodes' must be an array");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const std::string where = "nodes[" + std::to_string(i) + "].";
      const auto& jn = nodes[i];
      NodeSpec node;
      node.id = field(jn, "id", where).get<int>();
      node.op = op_from_name(field(jn, "op", where).get<std::string>());
      if (jn.contains("shape")) node.param_shape = jn.at("shape").get<Shape>();
      if (jn.contains("attrs")) {
        node.attrs = jn.at("attrs").get<std::map<std::string, std::int64_t>>();
      }
      g.nodes.push_back(std::move(node));
    }
    const auto edges = field(j, "edges", "");
    if (!edges.is_array()) throw GraphError("graph parse error: field 'edges' must be an array");
    for (std::size_t i = 0; i < edges.size(); ++i) {
      const auto& e = edges[i];
      if (!e.is_array() || e.size() != 2) {
        throw GraphError("graph parse error: field 'edges[" + std::to_string(i) +
                         "]' must be a [src,dst] pair");
      }
      g.edges.emplace_back(e[0].get<int>(), e[1].get<int>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw GraphError(std::string("graph parse error: ") + e.what());
  }
  validate(g);
  return g;
}

}  // namespace initforge
