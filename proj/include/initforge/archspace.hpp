// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Computational graphs of convolutional classifiers and the ResNet family
// built on them. One node per operation; parameterised nodes carry the shape
// of their main parameter.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "initforge/tensor.hpp"

namespace initforge {

enum class OpKind { input, conv, linear, batchnorm, relu, add, pool, global_pool, output };
inline constexpr int kNumOpKinds = 9;

std::string_view op_name(OpKind op);
OpKind op_from_name(std::string_view name);  // throws GraphError
bool is_parameterised(OpKind op);

struct NodeSpec {
  int id = 0;
  OpKind op = OpKind::input;
  // conv: out x in x k x k; linear: out x in; batchnorm: channels.
  std::optional<Shape> param_shape;
  std::map<std::string, std::int64_t> attrs;

  std::int64_t attr(const std::string& key, std::int64_t fallback) const {
    auto it = attrs.find(key);
    return it == attrs.end() ? fallback : it->second;
  }
  bool operator==(const NodeSpec&) const = default;
};

struct CompGraph {
  std::string name;
  std::vector<NodeSpec> nodes;
  std::vector<std::pair<int, int>> edges;

  bool operator==(const CompGraph&) const = default;

  // Adjacency in edge insertion order, indexed by node id.
  std::vector<std::vector<int>> predecessors() const;
  std::vector<std::vector<int>> successors() const;
};

enum class ParamKind { conv_kernel, bn_scale, bn_shift, bias, linear_weight };
std::string_view param_kind_name(ParamKind kind);

struct ParamSpec {
  int node_id = 0;
  Shape shape;
  ParamKind kind = ParamKind::conv_kernel;
  bool operator==(const ParamSpec&) const = default;
};

// Throws GraphError on the first violated invariant: dense ids in node order,
// param_shape iff parameterised, acyclic, topological order, a single input
// and output, every node on an input->output path.
void validate(const CompGraph& g);

// Standard 3-stage CIFAR ResNet: (depth-2)/6 basic blocks per stage, 16*width
// base channels doubling per stage, stride-2 stage transitions with 1x1
// projection shortcuts, identity shortcuts elsewhere, global pool and a
// linear head with bias.
CompGraph build_resnet_graph(int depth, int width, int num_classes);
std::string resnet_name(int depth, int width);

// Topological order; within a node conv_kernel < bn_scale < bn_shift < bias <
// linear_weight.
std::vector<ParamSpec> enumerate_params(const CompGraph& g);

std::int64_t fan_in(const ParamSpec& spec);
std::int64_t fan_out(const ParamSpec& spec);
std::int64_t total_param_count(const CompGraph& g);

// JSON: {name, nodes:[{id, op, shape?, attrs?}], edges:[[src,dst],...]}
std::string serialize_graph(const CompGraph& g);
CompGraph deserialize_graph(std::string_view bytes);  // throws GraphError

}  // namespace initforge
