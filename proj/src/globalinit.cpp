// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/globalinit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "initforge/errors.hpp"
#include "initforge/rng.hpp"

namespace initforge {

namespace {

Tensor<float> uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(u(rng));
  return t;
}

constexpr const char* kDirections[2] = {"fwd", "bwd"};

std::array<float, kAttrDims> attribute_code(const NodeSpec& n) {
  std::array<float, kAttrDims> a{};
  if (!n.param_shape) return a;
  const Shape& s = *n.param_shape;
  auto lg = [](std::int64_t v) { return static_cast<float>(std::log2(static_cast<double>(v)) / 8.0); };
  switch (n.op) {
    case OpKind::conv:
      a = {lg(s[0]), lg(s[1]), static_cast<float>(s[2]) / 3.0f,
           static_cast<float>(n.attr("stride", 1)) / 2.0f};
      break;
    case OpKind::linear:
      a = {lg(s[0]), lg(s[1]), 0.0f, 0.0f};
      break;
    case OpKind::batchnorm:
      a = {lg(s[0]), 0.0f, 0.0f, 0.0f};
      break;
    default:
      break;
  }
  return a;
}

VarF row_linear(const VarF& x, const VarF& w, const VarF& b) {
  return ag::add_rowvec(ag::matmul(x, w, false, true), b);
}

// PyTorch-style GRU cell: r, z gates and candidate n from input x and state h.
VarF gru_cell(const VarF& x, const VarF& h, const GHNModel& m, const std::string& dir) {
  auto gate = [&](const char* g) {
    const std::string pre = dir + ".gru.";
    return ag::add(row_linear(x, m.p(pre + "wi_" + g), m.p(pre + "bi_" + g)),
                   row_linear(h, m.p(pre + "wh_" + g), m.p(pre + "bh_" + g)));
  };
  const auto r = ag::sigmoid(gate("r"));
  const auto z = ag::sigmoid(gate("z"));
  const std::string pre = dir + ".gru.";
  const auto n = ag::tanh(ag::add(row_linear(x, m.p(pre + "wi_n"), m.p(pre + "bi_n")),
                                  ag::mul(r, row_linear(h, m.p(pre + "wh_n"), m.p(pre + "bh_n")))));
  // (1 - z) * n + z * h  ==  n + z * (h - n)
  return ag::add(n, ag::mul(z, ag::sub(h, n)));
}

ag::Var<float> rows_of(const VarF& m, std::span<const std::int64_t> rows) {
  const std::int64_t cols = m.shape().at(1);
  std::vector<std::int64_t> idx;
  idx.reserve(rows.size() * static_cast<std::size_t>(cols));
  for (auto r : rows)
    for (std::int64_t c = 0; c < cols; ++c) idx.push_back(r * cols + c);
  return ag::gather(m, std::move(idx), {static_cast<std::int64_t>(rows.size()), cols});
}

void check_noise(const GHNModel& model, const std::optional<std::vector<float>>& noise) {
  const int nd = model.config().noise_dim;
  if (nd == 0 && noise) throw std::invalid_argument("deterministic GHN takes no noise vector");
  if (nd > 0 && !noise) throw std::invalid_argument("Noise GHN needs a noise vector");
  if (noise && static_cast<int>(noise->size()) != nd) {
    throw std::invalid_argument("noise vector has length " + std::to_string(noise->size()) +
                                ", expected " + std::to_string(nd));
  }
}

bool uses_kernel_head(ParamKind k) {
  return k == ParamKind::conv_kernel || k == ParamKind::linear_weight;
}

std::string head_for(ParamKind k) {
  switch (k) {
    case ParamKind::conv_kernel:
    case ParamKind::linear_weight:
      return "dec.kernel";
    case ParamKind::bn_scale:
      return "dec.bn_scale";
    case ParamKind::bn_shift:
      return "dec.bn_shift";
    case ParamKind::bias:
      return "dec.bias";
  }
  return {};
}

VarF decoder_hidden(const VarF& states, const std::optional<std::vector<float>>& noise,
                    const GHNModel& model) {
  VarF in = states;
  if (noise) {
    const std::int64_t rows = states.shape().at(0), nd = static_cast<std::int64_t>(noise->size());
    Tensor<float> tiled({rows, nd});
    for (std::int64_t r = 0; r < rows; ++r) std::copy(noise->begin(), noise->end(), tiled.ptr() + r * nd);
    const std::vector<VarF> parts{states, VarF::constant(std::move(tiled))};
    in = ag::concat_cols<float>(parts);
  }
  return ag::relu(row_linear(in, model.p("dec.fc1.w"), model.p("dec.fc1.b")));
}

VarF normalise(const VarF& fitted, const ParamSpec& spec) {
  switch (spec.kind) {
    case ParamKind::conv_kernel:
    case ParamKind::linear_weight:
      return ag::std_rescale(fitted, static_cast<float>(std::sqrt(2.0 / fan_in(spec))), 1e-12f);
    case ParamKind::bn_scale:
      return ag::recentre(fitted, 1.0f);
    case ParamKind::bn_shift:
    case ParamKind::bias:
      return ag::recentre(fitted, 0.0f);
  }
  throw std::invalid_argument("fit_to_shape: unsupported parameter kind");
}

}  // namespace

// ------------------------------------------------------------------- model

GHNModel::GHNModel(const GHNConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.hidden_dim <= kAttrDims) throw std::invalid_argument("GHN hidden_dim must exceed 4");
  if (cfg.noise_dim != 0 && cfg.noise_dim != 8) throw std::invalid_argument("noise_dim must be 0 or 8");
  if (cfg.decoder_hidden < 1 || cfg.max_channels < 1 || cfg.rounds < 1) {
    throw std::invalid_argument("GHN sizes must be positive");
  }
  auto rng = make_rng(seed, 0x6e0);
  const std::int64_t d = cfg.hidden_dim, dh = cfg.decoder_hidden, c = cfg.max_channels;
  auto add = [&](const std::string& name, Tensor<float> t) {
    names_.push_back(name);
    params_.push_back(VarF::param(std::move(t)));
  };
  {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor<float> emb({kNumOpKinds, d - kAttrDims});
    for (auto& v : emb.data) v = static_cast<float>(normal(rng));
    add("embed", std::move(emb));
  }
  const double gru_bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (const char* dir : kDirections) {
    const std::string pre = dir;
    add(pre + ".msg.w", uniform({d, d}, gru_bound, rng));
    add(pre + ".msg.b", uniform({d}, gru_bound, rng));
    for (const char* g : {"r", "z", "n"}) {
      add(pre + ".gru.wi_" + g, uniform({d, d}, gru_bound, rng));
      add(pre + ".gru.bi_" + g, uniform({d}, gru_bound, rng));
      add(pre + ".gru.wh_" + g, uniform({d, d}, gru_bound, rng));
      add(pre + ".gru.bh_" + g, uniform({d}, gru_bound, rng));
    }
  }
  const std::int64_t in = d + cfg.noise_dim;
  const double b_in = 1.0 / std::sqrt(static_cast<double>(in));
  const double b_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  add("dec.fc1.w", uniform({dh, in}, b_in, rng));
  add("dec.fc1.b", uniform({dh}, b_in, rng));
  add("dec.kernel.w", uniform({c * c * 9, dh}, b_dh, rng));
  add("dec.kernel.b", uniform({c * c * 9}, b_dh, rng));
  for (const char* head : {"dec.bn_scale", "dec.bn_shift", "dec.bias"}) {
    add(std::string(head) + ".w", uniform({c, dh}, b_dh, rng));
    add(std::string(head) + ".b", uniform({c}, b_dh, rng));
  }
}

GHNModel::GHNModel(const GHNModel& other) : cfg_(other.cfg_), names_(other.names_) {
  for (const auto& p : other.params_) params_.push_back(VarF::param(p.value()));
}

GHNModel& GHNModel::operator=(const GHNModel& other) {
  if (this != &other) *this = GHNModel(other);
  return *this;
}

const VarF& GHNModel::p(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return params_[i];
  throw std::logic_error("GHN has no parameter " + name);
}

std::int64_t GHNModel::canonical_size() const {
  return static_cast<std::int64_t>(cfg_.max_channels) * cfg_.max_channels * 9;
}

Archive GHNModel::to_archive() const {
  Archive a;
  a.meta["type"] = "ghn_model";
  a.meta["config"] = {{"hidden_dim", cfg_.hidden_dim},
                      {"noise_dim", cfg_.noise_dim},
                      {"decoder_hidden", cfg_.decoder_hidden},
                      {"max_channels", cfg_.max_channels},
                      {"rounds", cfg_.rounds}};
  a.meta["params"] = names_;
  for (std::size_t i = 0; i < names_.size(); ++i) a.put(names_[i], params_[i].value());
  return a;
}

GHNModel GHNModel::from_archive(const Archive& a) {
  if (a.meta.value("type", "") != "ghn_model") throw ArtifactError("archive is not a GHN model");
  GHNConfig cfg;
  const auto& c = a.meta.at("config");
  cfg.hidden_dim = c.at("hidden_dim");
  cfg.noise_dim = c.at("noise_dim");
  cfg.decoder_hidden = c.at("decoder_hidden");
  cfg.max_channels = c.at("max_channels");
  cfg.rounds = c.at("rounds");
  GHNModel m(cfg, 0);
  for (std::size_t i = 0; i < m.names_.size(); ++i) {
    const auto& t = a.f32(m.names_[i]);
    if (t.shape != m.params_[i].shape()) throw ArtifactError("GHN parameter " + m.names_[i] + " has wrong shape");
    m.params_[i].value_mut() = t;
  }
  return m;
}

// ------------------------------------------------------------- graph network

HiddenStates init_hidden_states(const CompGraph& g, const GHNModel& model) {
  const std::int64_t de = model.config().hidden_dim - kAttrDims;
  const auto& embed = model.p("embed");
  HiddenStates h;
  h.round = 0;
  for (const auto& node : g.nodes) {
    const auto op = static_cast<std::int64_t>(node.op);
    if (op < 0 || op >= kNumOpKinds) throw GraphError("unknown op kind at node " + std::to_string(node.id));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(de));
    std::iota(idx.begin(), idx.end(), op * de);
    const auto a = attribute_code(node);
    const std::vector<VarF> parts{ag::gather(embed, std::move(idx), {1, de}),
                                  VarF::constant(Tensor<float>({1, kAttrDims}, {a.begin(), a.end()}))};
    h.states.push_back(ag::concat_cols<float>(parts));
  }
  return h;
}

HiddenStates propagate(const CompGraph& g, const HiddenStates& h0, const GHNModel& model, int rounds) {
  if (rounds < 1) throw std::invalid_argument("propagate: T must be >= 1");
  if (h0.states.size() != g.nodes.size()) throw std::invalid_argument("propagate: state count mismatch");
  const auto preds = g.predecessors();
  const auto succs = g.successors();
  HiddenStates h = h0;
  const int n = static_cast<int>(g.nodes.size());
  for (int t = 0; t < rounds; ++t) {
    for (int dir = 0; dir < 2; ++dir) {
      const std::string name = kDirections[dir];
      const auto& w = model.p(name + ".msg.w");
      const auto& b = model.p(name + ".msg.b");
      const auto& nbrs = dir == 0 ? preds : succs;
      std::vector<VarF> messages(static_cast<std::size_t>(n));
      for (int k = 0; k < n; ++k) {
        const int v = dir == 0 ? k : n - 1 - k;
        if (nbrs[v].empty()) continue;
        VarF msg;
        for (int u : nbrs[v]) {
          if (!messages[u]) messages[u] = ag::relu(row_linear(h.states[u], w, b));
          msg = msg ? ag::add(msg, messages[u]) : messages[u];
        }
        h.states[v] = gru_cell(msg, h.states[v], model, name);
      }
    }
    h.round = h0.round + t + 1;
  }
  return h;
}

// ----------------------------------------------------------------- decoding

VarF decode_node_weights(const VarF& h, const std::optional<std::vector<float>>& noise,
                         const ParamSpec& spec, const GHNModel& model) {
  check_noise(model, noise);
  const auto hidden = decoder_hidden(h, noise, model);
  const std::string head = head_for(spec.kind);
  auto raw = row_linear(hidden, model.p(head + ".w"), model.p(head + ".b"));
  const std::int64_t c = model.config().max_channels;
  return uses_kernel_head(spec.kind) ? ag::reshape(raw, {c, c, 3, 3}) : ag::reshape(raw, {c});
}

std::vector<std::int64_t> fit_index(const Shape& raw, const ParamSpec& spec) {
  const Shape& t = spec.shape;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(numel(t)));
  if (uses_kernel_head(spec.kind)) {
    if (raw.size() != 4 || raw[2] != 3 || raw[3] != 3) {
      throw std::invalid_argument("fit_to_shape: raw kernel must be C x C x 3 x 3");
    }
    const std::int64_t ro = raw[0], ri = raw[1];
    const bool conv = spec.kind == ParamKind::conv_kernel;
    if ((conv && t.size() != 4) || (!conv && t.size() != 2)) {
      throw std::invalid_argument("fit_to_shape: target rank does not match kind");
    }
    const std::int64_t kh = conv ? t[2] : 1, kw = conv ? t[3] : 1;
    for (std::int64_t o = 0; o < t[0]; ++o)
      for (std::int64_t i = 0; i < t[1]; ++i)
        for (std::int64_t a = 0; a < kh; ++a)
          for (std::int64_t b = 0; b < kw; ++b)
            idx.push_back(((o % ro) * ri + (i % ri)) * 9 + (a % 3) * 3 + (b % 3));
  } else {
    if (raw.size() != 1 || t.size() != 1) throw std::invalid_argument("fit_to_shape: expected vectors");
    for (std::int64_t i = 0; i < t[0]; ++i) idx.push_back(i % raw[0]);
  }
  return idx;
}

VarF fit_to_shape(const VarF& raw, const ParamSpec& spec) {
  return normalise(ag::gather(raw, fit_index(raw.shape(), spec), spec.shape), spec);
}

Tensor<float> fit_to_shape(const Tensor<float>& raw, const ParamSpec& spec) {
  ag::NoGradGuard no_grad;
  return fit_to_shape(VarF::constant(raw), spec).value();
}

std::vector<VarF> ghn_decode_all(const CompGraph& g, const HiddenStates& states,
                                 const GHNModel& model,
                                 const std::optional<std::vector<float>>& noise) {
  check_noise(model, noise);
  const auto specs = enumerate_params(g);
  const std::int64_t c = model.config().max_channels;

  // One decoder pass over all parameterised nodes.
  std::vector<int> nodes;
  std::vector<int> row_of(g.nodes.size(), -1);
  for (const auto& s : specs) {
    if (row_of[s.node_id] < 0) {
      row_of[s.node_id] = static_cast<int>(nodes.size());
      nodes.push_back(s.node_id);
    }
  }
  std::vector<VarF> rows;
  for (int id : nodes) rows.push_back(states.states.at(id));
  const auto hidden = decoder_hidden(ag::stack_rows<float>(rows), noise, model);

  // Per head: gather the rows that need it and run the head once.
  struct HeadOut {
    VarF out;
    std::vector<int> row_in_head;  // indexed by decoder row
    std::int64_t width = 0;
  };
  std::map<std::string, HeadOut> heads;
  for (const auto& s : specs) {
    auto& h = heads[head_for(s.kind)];
    if (h.row_in_head.empty()) h.row_in_head.assign(nodes.size(), -1);
  }
  for (auto& [name, h] : heads) {
    std::vector<std::int64_t> sel;
    for (const auto& s : specs) {
      const int r = row_of[s.node_id];
      if (head_for(s.kind) == name && h.row_in_head[r] < 0) {
        h.row_in_head[r] = static_cast<int>(sel.size());
        sel.push_back(r);
      }
    }
    h.out = row_linear(rows_of(hidden, sel), model.p(name + ".w"), model.p(name + ".b"));
    h.width = h.out.shape().at(1);
  }

  std::vector<VarF> out;
  out.reserve(specs.size());
  for (const auto& s : specs) {
    const auto& h = heads.at(head_for(s.kind));
    const std::int64_t offset = h.row_in_head[row_of[s.node_id]] * h.width;
    const Shape raw_shape = uses_kernel_head(s.kind) ? Shape{c, c, 3, 3} : Shape{c};
    auto idx = fit_index(raw_shape, s);
    for (auto& i : idx) i += offset;
    out.push_back(normalise(ag::gather(h.out, std::move(idx), s.shape), s));
  }
  return out;
}

std::vector<VarF> ghn_generate(const CompGraph& g, const GHNModel& model,
                               const std::optional<std::vector<float>>& noise) {
  check_noise(model, noise);
  const auto states = propagate(g, init_hidden_states(g, model), model, model.config().rounds);
  return ghn_decode_all(g, states, model, noise);
}

WeightSet ghn_forward(const CompGraph& g, const GHNModel& model,
                      const std::optional<std::vector<float>>& noise) {
  ag::NoGradGuard no_grad;
  WeightSet ws = empty_weight_set(g);
  const auto params = ghn_generate(g, model, noise);
  for (std::size_t i = 0; i < params.size(); ++i) ws.tensors[i] = params[i].value();
  return ws;
}

std::optional<std::vector<float>> sample_noise(const GHNModel& model, std::uint64_t seed) {
  const int nd = model.config().noise_dim;
  if (nd == 0) return std::nullopt;
  auto rng = make_rng(seed, 0x4015e);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> xi(static_cast<std::size_t>(nd));
  for (auto& v : xi) v = static_cast<float>(normal(rng));
  return xi;
}

VarF similarity_loss(const VarF& logits1, const VarF& logits2, int* degenerate_rows) {
  if (logits1.shape() != logits2.shape() || logits1.shape().size() != 2 || logits1.shape()[0] < 1) {
    throw std::invalid_argument("similarity_loss: logits must be matching B x C tensors");
  }
  return ag::cosine_rows_mean(logits1, logits2, 1e-12f, degenerate_rows);
}

double similarity_loss(const Tensor<float>& logits1, const Tensor<float>& logits2,
                       int* degenerate_rows) {
  ag::NoGradGuard no_grad;
  return similarity_loss(VarF::constant(logits1), VarF::constant(logits2), degenerate_rows).item();
}

// ----------------------------------------------------------------- training

GHNTrainer::GHNTrainer(GHNModel& model, double weight_decay)
    : model_(model), opt_(model.params(), static_cast<float>(weight_decay)),
      touched_(model.params().size(), false) {}

void GHNTrainer::finish(double lr) {
  auto& params = model_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (touched_[i] || !params[i].has_grad()) continue;
    const auto& g = params[i].grad().data;
    touched_[i] = std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; });
  }
  opt_.step(static_cast<float>(lr));
}

StepLosses GHNTrainer::step(const Tensor<float>& images, std::span<const int> labels,
                            std::span<const CompGraph> archs, double lr) {
  if (archs.empty()) throw std::invalid_argument("GHN training step needs at least one architecture");
  if (model_.config().noise_dim != 0) throw std::invalid_argument("use noise_step for a Noise GHN");
  opt_.zero_grad();
  const auto x = VarF::constant(images);
  StepLosses out;
  for (const auto& arch : archs) {
    const auto params = ghn_generate(arch, model_, std::nullopt);
    const auto loss = ag::softmax_cross_entropy(forward(arch, params, x), labels);
    out.xent1 += loss.item();
    ag::backward(loss);
  }
  out.loss = out.xent1;
  if (!std::isfinite(out.loss)) return out;
  finish(lr);
  return out;
}

StepLosses GHNTrainer::noise_step(const Tensor<float>& images, std::span<const int> labels,
                                  std::span<const CompGraph> archs, const std::vector<float>& xi1,
                                  const std::vector<float>& xi2, double lr,
                                  double similarity_weight) {
  if (archs.empty()) throw std::invalid_argument("GHN training step needs at least one architecture");
  if (model_.config().noise_dim == 0) throw std::invalid_argument("noise_step needs a Noise GHN");
  opt_.zero_grad();
  const auto x = VarF::constant(images);
  StepLosses out;
  out.noisy = true;
  for (const auto& arch : archs) {
    const auto states = propagate(arch, init_hidden_states(arch, model_), model_, model_.config().rounds);
    const auto p1 = ghn_decode_all(arch, states, model_, xi1);
    const auto p2 = ghn_decode_all(arch, states, model_, xi2);
    const auto logits1 = forward(arch, p1, x);
    const auto logits2 = forward(arch, p2, x);
    const auto ce1 = ag::softmax_cross_entropy(logits1, labels);
    const auto ce2 = ag::softmax_cross_entropy(logits2, labels);
    const auto sim = similarity_loss(logits1, logits2);
    const auto loss = ag::add(ag::add(ce1, ce2), ag::scale(sim, static_cast<float>(similarity_weight)));
    out.xent1 += ce1.item();
    out.xent2 += ce2.item();
    out.simloss += sim.item();
    out.loss += loss.item();
    ag::backward(loss);
  }
  if (!std::isfinite(out.loss)) return out;
  finish(lr);
  return out;
}

void GHNTrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch_size", "must be at least 2");
  if (train_depths.empty()) throw ConfigError("train_depths", "needs at least one architecture");
  for (std::size_t i = 0; i < train_depths.size(); ++i) {
    const int d = train_depths[i];
    if (d < 8 || (d - 2) % 6 != 0) {
      throw ConfigError("train_depths[" + std::to_string(i) + "]", "depth must be 6n+2");
    }
  }
  if (width < 1) throw ConfigError("width", "must be positive");
  if (epochs < 0) throw ConfigError("epochs", "must be non-negative");
  if (!(lr > 0)) throw ConfigError("lr", "must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay", "must be non-negative");
  for (std::size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) throw ConfigError("milestones", "must be strictly increasing");
  }
  if (model.noise_dim != 0 && model.noise_dim != 8) throw ConfigError("model.noise_dim", "must be 0 or 8");
  if (model.hidden_dim <= kAttrDims) throw ConfigError("model.hidden_dim", "must exceed 4");
}

std::vector<int> GHNTrainConfig::scaled_milestones(int epochs) {
  std::vector<int> out;
  for (int m : {epochs * 15 / 30, epochs * 20 / 30}) {
    if (m > 0 && (out.empty() || m > out.back())) out.push_back(m);
  }
  return out;
}

std::string variant_name(GHNVariant v) { return v == GHNVariant::ghn ? "ghn" : "noise_ghn"; }

GHNVariant variant_from_name(const std::string& name) {
  if (name == "ghn") return GHNVariant::ghn;
  if (name == "noise_ghn") return GHNVariant::noise_ghn;
  throw ConfigError("variant", "unknown GHN variant '" + name + "'");
}

GHNTrainResult train_ghn(const GHNTrainConfig& cfg, const LabeledDataset& data, GHNVariant variant) {
  cfg.validate();
  data.check();
  GHNConfig mc = cfg.model;
  mc.noise_dim = variant == GHNVariant::noise_ghn ? (mc.noise_dim > 0 ? mc.noise_dim : 8) : 0;
  GHNTrainResult result{GHNModel(mc, derive_seed(cfg.seed, 1)), {}, {}};
  std::vector<CompGraph> archs;
  for (int d : cfg.train_depths) archs.push_back(build_resnet_graph(d, cfg.width, data.num_classes));

  GHNTrainer trainer(result.model, cfg.weight_decay);
  const std::int64_t n = data.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  auto noise_rng = make_rng(cfg.seed, 0x401);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&] {
    std::vector<float> xi(static_cast<std::size_t>(mc.noise_dim));
    for (auto& v : xi) v = static_cast<float>(normal(noise_rng));
    return xi;
  };
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr;
    for (int m : cfg.milestones) {
      if (epoch >= m) lr *= 0.1;
      if (epoch == m) result.milestone_checkpoints.push_back(result.model);
    }
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t start = 0; start + 2 <= n; start += cfg.batch_size) {
      const std::int64_t len = std::min<std::int64_t>(cfg.batch_size, n - start);
      std::span<const std::int64_t> idx(order.data() + start, static_cast<std::size_t>(len));
      const auto images = batch_cnhw(data, idx);
      const auto labels = batch_labels(data, idx);
      ++step;
      StepLosses losses;
      if (variant == GHNVariant::ghn) {
        losses = trainer.step(images, labels, archs, lr);
      } else {
        const auto xi1 = draw();
        const auto xi2 = draw();
        losses = trainer.noise_step(images, labels, archs, xi1, xi2, lr, cfg.similarity_weight);
      }
      if (!std::isfinite(losses.loss)) throw NumericError(step, "non-finite GHN loss");
      result.log.push_back(losses);
    }
  }
  return result;
}

void write_ghn_log(std::ostream& out, const std::vector<StepLosses>& log) {
  out << "step,loss,xent1,xent2,simloss\n";
  char buf[160];
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& s = log[i];
    if (s.noisy) {
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g\n", i + 1, s.loss, s.xent1, s.xent2,
                    s.simloss);
    } else {
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,,\n", i + 1, s.loss, s.xent1);
    }
    out << buf;
  }
}

std::string ghn_model_name(GHNVariant v, const std::string& dataset) {
  return "ghn_" + variant_name(v) + "_" + dataset + ".gm";
}

}  // namespace initforge
