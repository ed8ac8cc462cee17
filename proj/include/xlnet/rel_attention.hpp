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

// One two-stream self-attention layer with relative positional and relative
// segment encodings.
//
// Attention score between query row i and key column j, per head:
//
//   ((q_i + u) . k_j  +  (q_i + v) . W_r r(d_ij)  +  (q_i + b) . s_ij) / sqrt(dh)
//
// where d_ij is the difference of ORIGINAL positions, r(.) the sinusoid
// table, and s_ij is s_same when i and j share a segment, s_diff otherwise.
// The content stream (queries from h) and the query stream (queries from g)
// use the same parameters and the same keys/values, which always come from
// [memory, h].

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "xlnet/autodiff.hpp"
#include "xlnet/rng.hpp"
#include "xlnet/tensor.hpp"

namespace xlnet {

/// Sinusoid encodings for every relative distance in [min_distance,
/// max_distance]. Row k holds distance min_distance + k: the first d/2
/// columns are sin(d * f_i), the rest cos(d * f_i), f_i = 10000^(-2i/d).
struct RelPosTable {
  long min_distance = 0;
  long max_distance = 0;
  Tensor table;

  std::size_t rows() const { return table.dim(0); }

  std::uint32_t row_of(long distance) const {
    if (distance < min_distance || distance > max_distance) {
      throw std::out_of_range("RelPosTable: distance " + std::to_string(distance) + " not covered");
    }
    return static_cast<std::uint32_t>(distance - min_distance);
  }

  static RelPosTable build(long min_distance, long max_distance, std::size_t d_model) {
    if (d_model == 0 || d_model % 2 != 0) throw std::invalid_argument("RelPosTable: d_model must be even");
    if (max_distance < min_distance) throw std::invalid_argument("RelPosTable: empty distance range");
    const std::size_t half = d_model / 2;
    const auto n = static_cast<std::size_t>(max_distance - min_distance + 1);
    RelPosTable t{min_distance, max_distance, Tensor(Shape{n, d_model})};
    for (std::size_t r = 0; r < n; ++r) {
      const double d = static_cast<double>(min_distance + static_cast<long>(r));
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d_model));
        t.table.at(r, i) = std::sin(d * freq);
        t.table.at(r, half + i) = std::cos(d * freq);
      }
    }
    return t;
  }
};

/// Table for a length-T segment attending M memory slots plus itself:
/// distances -(T-1) .. M+T-1, i.e. M + 2T - 1 rows.
inline RelPosTable relative_position_table(std::size_t length, std::size_t mem_len, std::size_t d_model) {
  if (length < 1) throw std::invalid_argument("relative_position_table: length must be positive");
  return RelPosTable::build(-static_cast<long>(length - 1), static_cast<long>(mem_len + length - 1), d_model);
}

/// a_ij = (q_i + b) . s_ij for one head, s_ij = s_same if the segments match.
inline double segment_bias(int seg_q, int seg_k, std::span<const double> query, std::span<const double> bias,
                           std::span<const double> s_same, std::span<const double> s_diff) {
  if (query.size() != bias.size() || query.size() != s_same.size() || query.size() != s_diff.size()) {
    throw ShapeError("segment_bias", Shape{query.size()}, Shape{s_same.size()});
  }
  const auto& s = seg_q == seg_k ? s_same : s_diff;
  double a = 0.0;
  for (std::size_t i = 0; i < query.size(); ++i) a += (query[i] + bias[i]) * s[i];
  return a;
}

/// Graph handles for one layer's parameters.
struct LayerVars {
  Var w_q, w_k, w_v, w_r, w_o;                // [d, H*dh]; w_o is [H*dh, d]
  Var content_bias, position_bias, seg_bias;  // u, v, b: [H, dh]
  Var seg_same, seg_diff;                     // s_+, s_-: [H, dh]
  Var ln1_gain, ln1_bias;
  Var ff_w1, ff_b1, ff_w2, ff_b2;
  Var ln2_gain, ln2_bias;
};

/// Per-stream lookup tables shared by every layer of one forward pass.
struct StreamGeometry {
  BoolMatrix mask;                       // rows x keys
  std::vector<std::uint32_t> rel_index;  // rows x keys -> RelPosTable row
  std::vector<std::uint32_t> seg_index;  // rows x keys -> 0 same segment, 1 different
  EmptyRows empty_rows = EmptyRows::kError;

  std::size_t rows() const { return mask.rows(); }
  std::size_t keys() const { return mask.cols(); }
};

inline StreamGeometry make_geometry(std::span<const long> query_positions, std::span<const int> query_segments,
                                    std::span<const long> key_positions, std::span<const int> key_segments,
                                    BoolMatrix mask, const RelPosTable& table, EmptyRows empty_rows) {
  const std::size_t rows = query_positions.size(), keys = key_positions.size();
  if (mask.rows() != rows || mask.cols() != keys || query_segments.size() != rows || key_segments.size() != keys) {
    throw ShapeError("make_geometry", Shape{mask.rows(), mask.cols()}, Shape{rows, keys});
  }
  StreamGeometry g{std::move(mask), {}, {}, empty_rows};
  g.rel_index.resize(rows * keys);
  g.seg_index.resize(rows * keys);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < keys; ++j) {
      g.rel_index[i * keys + j] = table.row_of(query_positions[i] - key_positions[j]);
      g.seg_index[i * keys + j] = query_segments[i] == key_segments[j] ? 0 : 1;
    }
  }
  return g;
}

/// Collects attention probabilities, one [H, rows, keys] tensor per layer.
struct AttentionTrace {
  std::vector<Tensor> content;
  std::vector<Tensor> query;
};

struct LayerOptions {
  std::size_t n_heads = 1;
  std::size_t head_dim = 1;
  double dropout = 0.0;
  double attention_dropout = 0.0;
  Rng* rng = nullptr;  // dropout is active only when set
  bool segment_terms = true;
  AttentionTrace* trace = nullptr;
};

struct LayerOutput {
  Var h;
  std::optional<Var> g;
};

/// Applies one layer to both streams:
///   h' = LN(h + RelAttn(h -> [mem, h] under content mask)),  h'' = LN(h' + FF(h'))
///   g' = LN(g + RelAttn(g -> [mem, h] under query mask)),    g'' = LN(g' + FF(g'))
/// `rel_table` is the constant sinusoid table the geometries index into.
inline LayerOutput two_stream_layer(Var h_prev, std::optional<Var> g_prev, std::optional<Var> memory, Var rel_table,
                                    const StreamGeometry& content, const StreamGeometry* query, const LayerVars& p,
                                    const LayerOptions& opt) {
  const std::size_t nh = opt.n_heads, dh = opt.head_dim;
  const std::size_t t_len = h_prev.shape().at(0);
  const std::size_t keys = t_len + (memory ? memory->shape().at(0) : 0);
  if (content.rows() != t_len || content.keys() != keys) {
    throw ShapeError("two_stream_layer", Shape{content.rows(), content.keys()}, Shape{t_len, keys},
                     "content mask vs [memory, h]");
  }
  if (g_prev && (query == nullptr || query->rows() != g_prev->shape().at(0) || query->keys() != keys)) {
    throw ShapeError("two_stream_layer", g_prev->shape(), Shape{keys}, "query mask vs [memory, h]");
  }

  auto split_heads = [&](Var x) {
    const std::size_t n = x.shape().at(0);
    return transpose(reshape(x, Shape{n, nh, dh}), 0, 1);
  };
  auto drop = [&](Var x, double rate) { return opt.rng ? dropout(x, rate, *opt.rng) : x; };

  const Var kv_in = memory ? concat({*memory, h_prev}, 0) : h_prev;
  const Var k = split_heads(matmul(kv_in, p.w_k));
  const Var v = split_heads(matmul(kv_in, p.w_v));
  const Var rk = split_heads(matmul(rel_table, p.w_r));
  const Var seg = concat({reshape(p.seg_same, Shape{nh, 1, dh}), reshape(p.seg_diff, Shape{nh, 1, dh})}, 1);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  auto attend = [&](Var x, const StreamGeometry& geo, std::vector<Tensor>* trace) {
    const std::size_t n = x.shape().at(0);
    const Var q = reshape(matmul(x, p.w_q), Shape{n, nh, dh});
    Var score = bmm_nt(transpose(add(q, p.content_bias), 0, 1), k);
    const Var pos_full = bmm_nt(transpose(add(q, p.position_bias), 0, 1), rk);
    score = add(score, gather_last(pos_full, geo.rel_index, geo.keys()));
    if (opt.segment_terms) {
      const Var seg_full = bmm_nt(transpose(add(q, p.seg_bias), 0, 1), seg);
      score = add(score, gather_last(seg_full, geo.seg_index, geo.keys()));
    }
    Var prob = masked_softmax(scale(score, inv_sqrt_dh), geo.mask, geo.empty_rows);
    if (trace) trace->push_back(prob.value());
    prob = drop(prob, opt.attention_dropout);
    const Var heads = reshape(transpose(bmm(prob, v), 0, 1), Shape{n, nh * dh});
    const Var attn_out = drop(matmul(heads, p.w_o), opt.dropout);
    const Var x1 = layer_norm(add(x, attn_out), p.ln1_gain, p.ln1_bias);
    const Var inner = gelu(add(matmul(x1, p.ff_w1), p.ff_b1));
    const Var ff = drop(add(matmul(inner, p.ff_w2), p.ff_b2), opt.dropout);
    return layer_norm(add(x1, ff), p.ln2_gain, p.ln2_bias);
  };

  LayerOutput out;
  out.h = attend(h_prev, content, opt.trace ? &opt.trace->content : nullptr);
  if (g_prev) out.g = attend(*g_prev, *query, opt.trace ? &opt.trace->query : nullptr);
  return out;
}

}  // namespace xlnet
