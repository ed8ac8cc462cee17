// Copyright 2026 The xlnet-desk Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Embeddings, the layer stack with both streams, segment memory, the three
// pretraining objectives and the classification head.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xlnet/autodiff.hpp"
#include "xlnet/corpus.hpp"
#include "xlnet/perm_mask.hpp"
#include "xlnet/rel_attention.hpp"
#include "xlnet/rng.hpp"
#include "xlnet/tensor.hpp"

namespace xlnet {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t head_dim = 32;
  std::size_t ffn_dim = 512;
  std::size_t vocab_size = 0;
  std::size_t mem_len = 64;
  std::size_t seq_len = 64;
  double k = 6.0;  // partial prediction: about 1/K of the tokens are targets
  double dropout = 0.1;
  double attention_dropout = 0.1;
  double init_std = 0.02;

  void validate() const {
    if (n_layers == 0) throw std::invalid_argument("config: n_layers must be positive");
    if (n_heads * head_dim != d_model) throw std::invalid_argument("config: n_heads * head_dim must equal d_model");
    if (d_model % 2 != 0) throw std::invalid_argument("config: d_model must be even");
    if (vocab_size == 0) throw std::invalid_argument("config: vocab_size must be positive");
    if (!(k >= 1.0)) throw std::invalid_argument("config: K must be >= 1");
    if (seq_len == 0) throw std::invalid_argument("config: seq_len must be positive");
  }
};

/// Named parameter tensors in a fixed insertion order. The order is the
/// order of checkpoint records and of gradient reduction.
class ParameterStore {
 public:
  void add(std::string name, Tensor t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) { return entries_[index(name)].second; }
  const Tensor& at(const std::string& name) const { return entries_[index(name)].second; }

  std::size_t size() const { return entries_.size(); }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::string layer_prefix(std::size_t m) { return "layer" + std::to_string(m) + "/"; }

/// Layer index (1-based) a parameter belongs to, 0 for embeddings and the
/// query-stream initializer, n_layers + 1 for the classification head.
inline std::size_t parameter_layer(const std::string& name, std::size_t n_layers) {
  if (name.rfind("layer", 0) == 0) return static_cast<std::size_t>(std::stoul(name.substr(5)));
  if (name.rfind("cls/", 0) == 0) return n_layers + 1;
  return 0;
}

/// Cached content states from the previous segment of the same document:
/// layers[m] holds the input of layer m+1, i.e. h^(m), for the last slots.
/// Stored as plain tensors, so nothing flows back into the previous segment.
struct LayerMemory {
  std::vector<Tensor> layers;
  std::vector<long> positions;
  std::vector<int> segments;
  long doc_id = -1;

  std::size_t length() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
};

/// One row of model input. Positions are original-sequence positions; they
/// are what relative distances are computed from.
struct SequenceInput {
  std::vector<int> tokens;
  std::vector<int> segments;
  std::vector<long> positions;
  long doc_id = 0;

  std::size_t size() const { return tokens.size(); }

  static SequenceInput plain(std::vector<int> tokens, long first_position = 1, long doc_id = 0) {
    SequenceInput s;
    s.segments.assign(tokens.size(), 0);
    for (std::size_t i = 0; i < tokens.size(); ++i) s.positions.push_back(first_position + static_cast<long>(i));
    s.tokens = std::move(tokens);
    s.doc_id = doc_id;
    return s;
  }
};

/// The memory that may be attended for `input`: the cached states of the
/// same document, or nothing.
inline const LayerMemory* usable_memory(const LayerMemory* memory, const SequenceInput& input) {
  if (memory == nullptr || memory->empty() || memory->doc_id != input.doc_id) return nullptr;
  return memory;
}

struct ClassifierVars {
  Var summary_w, summary_b, logit_w, logit_b;
};

/// Graph handles for every parameter of a model.
struct BoundModel {
  Var embedding;
  Var query_init;
  std::vector<LayerVars> layers;
  std::optional<ClassifierVars> classifier;
  std::vector<Var> all;  // aligned with ParameterStore order
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.d_model, hd = cfg_.n_heads * cfg_.head_dim;
    auto normal = [&](Shape s) {
      Tensor t(std::move(s));
      for (double& x : t.data()) x = rng.truncated_normal(cfg_.init_std);
      return t;
    };
    params_.add("word_embedding", normal({cfg_.vocab_size, d}));
    params_.add("query_init", normal({d}));
    const Shape head_vec{cfg_.n_heads, cfg_.head_dim};
    for (std::size_t m = 1; m <= cfg_.n_layers; ++m) {
      const std::string p = layer_prefix(m);
      params_.add(p + "attn_q", normal({d, hd}));
      params_.add(p + "attn_k", normal({d, hd}));
      params_.add(p + "attn_v", normal({d, hd}));
      params_.add(p + "attn_r", normal({d, hd}));
      params_.add(p + "attn_o", normal({hd, d}));
      params_.add(p + "content_bias", normal(head_vec));
      params_.add(p + "position_bias", normal(head_vec));
      params_.add(p + "segment_bias", normal(head_vec));
      params_.add(p + "seg_same", normal(head_vec));
      params_.add(p + "seg_diff", normal(head_vec));
      params_.add(p + "ln1_gain", Tensor({d}, 1.0));
      params_.add(p + "ln1_bias", Tensor({d}, 0.0));
      params_.add(p + "ff_w1", normal({d, cfg_.ffn_dim}));
      params_.add(p + "ff_b1", Tensor({cfg_.ffn_dim}, 0.0));
      params_.add(p + "ff_w2", normal({cfg_.ffn_dim, d}));
      params_.add(p + "ff_b2", Tensor({d}, 0.0));
      params_.add(p + "ln2_gain", Tensor({d}, 1.0));
      params_.add(p + "ln2_bias", Tensor({d}, 0.0));
    }
  }

  /// Rebuilds a model from stored tensors. Architecture sizes are read off
  /// the tensor shapes; run-time fields (seq_len, mem_len, K, dropout) come
  /// from `runtime`.
  Model(ParameterStore params, const ModelConfig& runtime) : cfg_(runtime), params_(std::move(params)) {
    const Tensor& emb = params_.at("word_embedding");
    cfg_.vocab_size = emb.dim(0);
    cfg_.d_model = emb.dim(1);
    std::size_t layers = 0;
    while (params_.contains(layer_prefix(layers + 1) + "attn_q")) ++layers;
    cfg_.n_layers = layers;
    if (layers == 0) throw std::runtime_error("checkpoint has no layers");
    const Tensor& u = params_.at(layer_prefix(1) + "content_bias");
    cfg_.n_heads = u.dim(0);
    cfg_.head_dim = u.dim(1);
    cfg_.ffn_dim = params_.at(layer_prefix(1) + "ff_w1").dim(1);
    cfg_.validate();
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }

  bool has_classifier() const { return params_.contains("cls/logit_w"); }

  void add_classifier(std::size_t n_classes, std::uint64_t seed) {
    if (has_classifier()) return;
    Rng rng(seed);
    const std::size_t d = cfg_.d_model;
    Tensor sw({d, d}), lw({d, n_classes});
    for (double& x : sw.data()) x = rng.truncated_normal(cfg_.init_std);
    for (double& x : lw.data()) x = rng.truncated_normal(cfg_.init_std);
    params_.add("cls/summary_w", std::move(sw));
    params_.add("cls/summary_b", Tensor({d}, 0.0));
    params_.add("cls/logit_w", std::move(lw));
    params_.add("cls/logit_b", Tensor({n_classes}, 0.0));
  }

  /// Puts every parameter on `g`, as gradient-taking leaves when `trainable`.
  /// The leaves read the stored tensors in place: the model must outlive the
  /// graph and its parameters must not change while the graph is in use.
  BoundModel bind(Graph& g, bool trainable = true) const {
    BoundModel b;
    for (const auto& [name, t] : params_.entries()) b.all.push_back(trainable ? g.variable_ref(t) : g.constant_ref(t));
    auto at = [&](const std::string& n) { return b.all[params_.index(n)]; };
    b.embedding = at("word_embedding");
    b.query_init = at("query_init");
    for (std::size_t m = 1; m <= cfg_.n_layers; ++m) {
      const std::string p = layer_prefix(m);
      b.layers.push_back(LayerVars{at(p + "attn_q"), at(p + "attn_k"), at(p + "attn_v"), at(p + "attn_r"),
                                   at(p + "attn_o"), at(p + "content_bias"), at(p + "position_bias"),
                                   at(p + "segment_bias"), at(p + "seg_same"), at(p + "seg_diff"),
                                   at(p + "ln1_gain"), at(p + "ln1_bias"), at(p + "ff_w1"), at(p + "ff_b1"),
                                   at(p + "ff_w2"), at(p + "ff_b2"), at(p + "ln2_gain"), at(p + "ln2_bias")});
    }
    if (has_classifier()) {
      b.classifier = ClassifierVars{at("cls/summary_w"), at("cls/summary_b"), at("cls/logit_w"), at("cls/logit_b")};
    }
    return b;
  }

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

struct ForwardOptions {
  Rng* dropout_rng = nullptr;  // training mode when set
  AttentionTrace* trace = nullptr;
  std::optional<Var> input_embeddings;  // replaces the embedding lookup, [T, d]
  bool segment_terms = true;
};

struct ForwardResult {
  std::vector<Var> content;  // h^(0) .. h^(L), each [T, d]
  std::vector<Var> query;    // g^(0) .. g^(L), each [rows, d]; empty without query rows
  LayerMemory memory;        // cache for the next segment
};

/// Runs both streams through every layer.
///
/// `memory` must be the result of usable_memory() for this input, and the
/// masks must carry exactly that many memory columns. `query_rows` lists the
/// 0-based positions whose query stream is computed (the targets); it may be
/// empty, in which case only the content stream runs.
inline ForwardResult forward_two_stream(Graph& g, const BoundModel& bm, const ModelConfig& cfg,
                                        const SequenceInput& in, const LayerMemory* memory,
                                        const AttentionMaskPair& masks, std::span<const std::size_t> query_rows,
                                        const ForwardOptions& opt = {}) {
  const std::size_t n = in.size();
  if (n == 0) throw std::invalid_argument("forward: empty input");
  if (in.segments.size() != n || in.positions.size() != n) {
    throw ShapeError("forward", Shape{n}, Shape{in.segments.size(), in.positions.size()},
                     "tokens vs segments/positions");
  }
  const std::size_t mem_len = memory ? memory->length() : 0;
  if (memory && memory->layers.size() != cfg.n_layers) {
    throw ShapeError("forward", Shape{memory->layers.size()}, Shape{cfg.n_layers}, "memory layers");
  }
  if (masks.mem_len != mem_len || masks.content.rows() != n || masks.content.cols() != mem_len + n ||
      masks.query.rows() != n || masks.query.cols() != mem_len + n) {
    throw ShapeError("forward", Shape{masks.content.rows(), masks.content.cols()}, Shape{n, mem_len + n},
                     "mask vs memory + sequence");
  }
  if (memory) {
    for (const Tensor& t : memory->layers) {
      if (t.shape() != Shape{mem_len, cfg.d_model}) {
        throw ShapeError("forward", t.shape(), Shape{mem_len, cfg.d_model}, "memory tensor");
      }
    }
  }

  std::vector<long> key_pos;
  std::vector<int> key_seg;
  if (memory) {
    key_pos = memory->positions;
    key_seg = memory->segments;
  }
  key_pos.insert(key_pos.end(), in.positions.begin(), in.positions.end());
  key_seg.insert(key_seg.end(), in.segments.begin(), in.segments.end());

  const auto [min_kp, max_kp] = std::minmax_element(key_pos.begin(), key_pos.end());
  const auto [min_qp, max_qp] = std::minmax_element(in.positions.begin(), in.positions.end());
  const RelPosTable table = RelPosTable::build(*min_qp - *max_kp, *max_qp - *min_kp, cfg.d_model);
  const Var rel = g.constant(table.table);

  const StreamGeometry content =
      make_geometry(in.positions, in.segments, key_pos, key_seg, masks.content, table, EmptyRows::kError);

  std::optional<StreamGeometry> query;
  std::vector<long> q_pos;
  std::vector<int> q_seg;
  for (std::size_t r : query_rows) {
    if (r >= n) throw std::out_of_range("forward: query row out of range");
    q_pos.push_back(in.positions[r]);
    q_seg.push_back(in.segments[r]);
  }
  if (!query_rows.empty()) {
    BoolMatrix qmask = masks.query.select_rows(query_rows);
    std::size_t empty_rows = 0;
    for (std::size_t r = 0; r < qmask.rows(); ++r) empty_rows += qmask.row_count(r) == 0;
    // Only the first position of the order can lack any context, and only
    // when there is no memory; its attention output is defined as zero.
    if (empty_rows > (mem_len == 0 ? 1u : 0u)) {
      throw MaskError("forward: query stream has a fully masked row that is not the first-rank target");
    }
    query = make_geometry(q_pos, q_seg, key_pos, key_seg, std::move(qmask), table, EmptyRows::kZero);
  }

  ForwardResult res;
  Var h = opt.input_embeddings ? *opt.input_embeddings : embedding(bm.embedding, in.tokens);
  if (h.shape() != Shape{n, cfg.d_model}) throw ShapeError("forward", h.shape(), Shape{n, cfg.d_model}, "embeddings");
  std::optional<Var> gq;
  if (query) {
    const std::vector<std::size_t> zeros(query_rows.size(), 0);
    gq = take_rows(reshape(bm.query_init, Shape{1, cfg.d_model}), zeros);
  }
  res.content.push_back(h);
  if (gq) res.query.push_back(*gq);

  LayerOptions lopt;
  lopt.n_heads = cfg.n_heads;
  lopt.head_dim = cfg.head_dim;
  lopt.dropout = cfg.dropout;
  lopt.attention_dropout = cfg.attention_dropout;
  lopt.rng = opt.dropout_rng;
  lopt.segment_terms = opt.segment_terms;
  lopt.trace = opt.trace;

  if (opt.dropout_rng) h = dropout(h, cfg.dropout, *opt.dropout_rng);
  if (gq && opt.dropout_rng) gq = dropout(*gq, cfg.dropout, *opt.dropout_rng);

  for (std::size_t m = 0; m < cfg.n_layers; ++m) {
    std::optional<Var> mem;
    if (memory) mem = g.constant(memory->layers[m]);
    LayerOutput out = two_stream_layer(h, gq, mem, rel, content, query ? &*query : nullptr, bm.layers[m], lopt);
    h = out.h;
    gq = out.g;
    res.content.push_back(h);
    if (gq) res.query.push_back(*gq);
  }

  if (cfg.mem_len > 0) {
    LayerMemory next;
    next.doc_id = in.doc_id;
    const std::size_t total = mem_len + n;
    const std::size_t keep = std::min(cfg.mem_len, total);
    const std::size_t drop = total - keep;
    next.positions.assign(key_pos.begin() + static_cast<long>(drop), key_pos.end());
    next.segments.assign(key_seg.begin() + static_cast<long>(drop), key_seg.end());
    for (std::size_t m = 0; m < cfg.n_layers; ++m) {
      Tensor t({keep, cfg.d_model});
      const std::size_t d = cfg.d_model;
      for (std::size_t r = 0; r < keep; ++r) {
        const std::size_t src = drop + r;
        const double* from = src < mem_len ? memory->layers[m].data().data() + src * d
                                           : res.content[m].value().data().data() + (src - mem_len) * d;
        std::copy_n(from, d, t.data().data() + r * d);
      }
      next.layers.push_back(std::move(t));
    }
    res.memory = std::move(next);
  }
  return res;
}

/// log p(x | context) = e(x) . g - logsumexp_x' e(x') . g over the tied
/// embedding table, evaluated at each row's true id. Returns [rows].
inline Var target_log_probs(Var g_last, Var embedding_table, std::span<const int> target_ids) {
  const std::size_t vocab = embedding_table.shape().at(0);
  for (int id : target_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("target_log_probs: target id " + std::to_string(id) + " >= vocabulary size " +
                              std::to_string(vocab));
    }
  }
  return pick(log_softmax(matmul_nt(g_last, embedding_table)), target_ids);
}

/// A row's summed negative log-likelihood and how many terms it has.
struct RowLoss {
  Var nll;
  std::size_t count = 0;
  LayerMemory memory;
};

/// Permutation LM on one row: the order's target suffix is predicted from the
/// last-layer query stream.
inline RowLoss plm_row_loss(Graph& g, const BoundModel& bm, const ModelConfig& cfg, const SequenceInput& in,
                            const PlannedOrder& order, const LayerMemory* memory, const ForwardOptions& opt = {}) {
  if (order.targets.targets.empty()) throw std::invalid_argument("plm_loss: zero targets");
  if (order.perm.size() != in.size()) throw ShapeError("plm_loss", Shape{order.perm.size()}, Shape{in.size()});
  const LayerMemory* mem = usable_memory(memory, in);
  const AttentionMaskPair masks = build_attention_masks(order.perm, order.targets, mem ? mem->length() : 0);
  std::vector<std::size_t> rows;
  std::vector<int> ids;
  for (int pos : order.targets.targets) {
    rows.push_back(static_cast<std::size_t>(pos - 1));
    ids.push_back(in.tokens[static_cast<std::size_t>(pos - 1)]);
  }
  ForwardResult fr = forward_two_stream(g, bm, cfg, in, mem, masks, rows, opt);
  const Var lp = target_log_probs(fr.query.back(), bm.embedding, ids);
  return RowLoss{scale(sum(lp), -1.0), ids.size(), std::move(fr.memory)};
}

/// Forward (left-to-right) factorization: position t is predicted from the
/// target-aware state that sees positions < t and the memory.
inline RowLoss ar_row_loss(Graph& g, const BoundModel& bm, const ModelConfig& cfg, const SequenceInput& in,
                           const LayerMemory* memory, const ForwardOptions& opt = {}) {
  const LayerMemory* mem = usable_memory(memory, in);
  const std::size_t n = in.size();
  const AttentionMaskPair masks = causal_masks(n, mem ? mem->length() : 0);
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  ForwardResult fr = forward_two_stream(g, bm, cfg, in, mem, masks, rows, opt);
  const Var lp = target_log_probs(fr.query.back(), bm.embedding, in.tokens);
  return RowLoss{scale(sum(lp), -1.0), n, std::move(fr.memory)};
}

/// Picks DAE positions: each non-special position independently with
/// probability `mask_rate`.
inline std::vector<std::size_t> select_dae_positions(std::span<const int> tokens, double mask_rate, Rng& rng) {
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw std::invalid_argument("dae: mask_rate must be in (0, 1)");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (Vocab::is_special(tokens[i])) continue;
    if (rng.bernoulli(mask_rate)) out.push_back(i);
  }
  return out;
}

/// Denoising autoencoder on one row: selected positions are replaced by MASK
/// and reconstructed independently from a fully bidirectional content-only
/// encoder. A row with no masked position contributes zero terms.
inline RowLoss dae_row_loss(Graph& g, const BoundModel& bm, const ModelConfig& cfg, const SequenceInput& in,
                            std::span<const std::size_t> masked, const LayerMemory* memory,
                            const ForwardOptions& opt = {}) {
  const LayerMemory* mem = usable_memory(memory, in);
  SequenceInput corrupted = in;
  std::vector<int> ids;
  for (std::size_t r : masked) {
    if (r >= in.size()) throw std::out_of_range("dae: masked position out of range");
    corrupted.tokens[r] = Vocab::kMask;
    ids.push_back(in.tokens[r]);
  }
  const AttentionMaskPair masks = full_masks(in.size(), mem ? mem->length() : 0);
  ForwardResult fr = forward_two_stream(g, bm, cfg, corrupted, mem, masks, {}, opt);
  // Memory carries the uncorrupted-row identity only through doc/positions;
  // its contents are the corrupted encoder states, as in the objective.
  if (masked.empty()) return RowLoss{g.constant(Tensor::scalar(0.0)), 0, std::move(fr.memory)};
  const Var hm = take_rows(fr.content.back(), masked);
  const Var lp = target_log_probs(hm, bm.embedding, ids);
  return RowLoss{scale(sum(lp), -1.0), ids.size(), std::move(fr.memory)};
}

/// Sum and count of negative log-likelihood terms over a batch.
struct LossValue {
  double nll = 0.0;
  std::size_t count = 0;
  std::size_t empty_rows = 0;  // DAE rows without masked positions
  double mean() const { return count ? nll / static_cast<double>(count) : 0.0; }
};

/// One training row for the permutation objective.
struct TrainingInstance {
  SequenceInput seq;
  PlannedOrder order;
};

/// Mean negative log-likelihood over all targets of the batch (evaluation
/// only, no gradients). `memories`, when given, is read and then replaced
/// row by row.
inline LossValue plm_loss(const Model& model, std::span<const TrainingInstance> batch,
                          std::vector<LayerMemory>* memories = nullptr) {
  LossValue v;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    Graph g;
    const BoundModel bm = model.bind(g, false);
    const LayerMemory* mem = memories ? &(*memories)[r] : nullptr;
    RowLoss rl = plm_row_loss(g, bm, model.config(), batch[r].seq, batch[r].order, mem);
    v.nll += rl.nll.value().item();
    v.count += rl.count;
    if (memories) (*memories)[r] = std::move(rl.memory);
  }
  if (v.count == 0) throw std::invalid_argument("plm_loss: zero targets");
  return v;
}

inline LossValue ar_loss(const Model& model, std::span<const SequenceInput> batch,
                         std::vector<LayerMemory>* memories = nullptr) {
  LossValue v;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    Graph g;
    const BoundModel bm = model.bind(g, false);
    const LayerMemory* mem = memories ? &(*memories)[r] : nullptr;
    RowLoss rl = ar_row_loss(g, bm, model.config(), batch[r], mem);
    v.nll += rl.nll.value().item();
    v.count += rl.count;
    if (memories) (*memories)[r] = std::move(rl.memory);
  }
  return v;
}

inline LossValue dae_loss(const Model& model, std::span<const SequenceInput> batch, double mask_rate, Rng& rng,
                          std::vector<LayerMemory>* memories = nullptr) {
  LossValue v;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto masked = select_dae_positions(batch[r].tokens, mask_rate, rng);
    if (masked.empty()) ++v.empty_rows;
    Graph g;
    const BoundModel bm = model.bind(g, false);
    const LayerMemory* mem = memories ? &(*memories)[r] : nullptr;
    RowLoss rl = dae_row_loss(g, bm, model.config(), batch[r], masked, mem);
    v.nll += rl.nll.value().item();
    v.count += rl.count;
    if (memories) (*memories)[r] = std::move(rl.memory);
  }
  return v;
}

namespace detail {

inline std::vector<double> softmax_values(const Tensor& logits) {
  std::vector<double> p(logits.numel());
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : logits.data()) mx = std::max(mx, x);
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& x : p) x /= z;
  return p;
}

}  // namespace detail

/// The deliberately broken head: predicts step `t` of `perm` (1-based) from
/// the content state of the previous step, h(x_{z<t}), which does not know
/// which position is being predicted. With an empty prefix the logits are 0.
inline std::vector<double> naive_parameterization_distribution(const Model& model, const SequenceInput& in,
                                                               const Permutation& perm, std::size_t t) {
  if (t < 1 || t > perm.size()) throw std::out_of_range("naive distribution: step out of range");
  const std::size_t vocab = model.config().vocab_size;
  if (t == 1) return std::vector<double>(vocab, 1.0 / static_cast<double>(vocab));
  Graph g;
  const BoundModel bm = model.bind(g, false);
  const AttentionMaskPair masks = build_attention_masks(perm, TargetSelection{perm.size(), {}}, 0);
  ForwardResult fr = forward_two_stream(g, bm, model.config(), in, nullptr, masks, {});
  const std::size_t prev = static_cast<std::size_t>(perm.at(t - 1) - 1);
  const Var h = take_rows(fr.content.back(), std::vector<std::size_t>{prev});
  return detail::softmax_values(matmul_nt(h, bm.embedding).value());
}

/// The target-aware head for the same question: the query stream at z_t.
inline std::vector<double> target_aware_distribution(const Model& model, const SequenceInput& in,
                                                     const Permutation& perm, std::size_t t) {
  if (t < 1 || t > perm.size()) throw std::out_of_range("target-aware distribution: step out of range");
  Graph g;
  const BoundModel bm = model.bind(g, false);
  const AttentionMaskPair masks = build_attention_masks(perm, TargetSelection{perm.size(), {}}, 0);
  const std::vector<std::size_t> rows{static_cast<std::size_t>(perm.at(t) - 1)};
  ForwardResult fr = forward_two_stream(g, bm, model.config(), in, nullptr, masks, rows);
  return detail::softmax_values(matmul_nt(fr.query.back(), bm.embedding).value());
}

/// Finetuning forward: content stream only, full bidirectional visibility,
/// classifier on the CLS position. Returns logits [n_classes].
inline Var finetune_classify(Graph& g, const BoundModel& bm, const ModelConfig& cfg, std::span<const int> tokens,
                             std::span<const int> segments, const ForwardOptions& opt = {}) {
  if (tokens.empty() || tokens[0] != Vocab::kCls) throw std::invalid_argument("finetune_classify: input must start with CLS");
  if (!bm.classifier) throw std::invalid_argument("finetune_classify: model has no classification head");
  SequenceInput in;
  in.tokens.assign(tokens.begin(), tokens.end());
  in.segments.assign(segments.begin(), segments.end());
  for (std::size_t i = 0; i < tokens.size(); ++i) in.positions.push_back(static_cast<long>(i + 1));
  ForwardResult fr = forward_two_stream(g, bm, cfg, in, nullptr, full_masks(tokens.size(), 0), {}, opt);
  const ClassifierVars& c = *bm.classifier;
  const Var cls = take_rows(fr.content.back(), std::vector<std::size_t>{0});
  const Var summary = tanh(add(matmul(cls, c.summary_w), c.summary_b));
  const Var logits = add(matmul(summary, c.logit_w), c.logit_b);
  return reshape(logits, Shape{logits.shape().at(1)});
}

}  // namespace xlnet
