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

// Factorization orders, prediction-target selection and the content/query
// attention masks that realize an order without reordering the tokens.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xlnet/corpus.hpp"
#include "xlnet/rng.hpp"
#include "xlnet/tensor.hpp"

namespace xlnet {

/// A factorization order over positions 1..T. The token sequence itself is
/// never reordered; the order only decides who may attend to whom.
class Permutation {
 public:
  Permutation() = default;

  /// Validates that `order` is a bijection on 1..T.
  explicit Permutation(std::vector<int> order) : order_(std::move(order)), rank_(order_.size() + 1, 0) {
    const int n = static_cast<int>(order_.size());
    for (int t = 0; t < n; ++t) {
      const int p = order_[static_cast<std::size_t>(t)];
      if (p < 1 || p > n || rank_[static_cast<std::size_t>(p)] != 0) {
        throw std::invalid_argument("Permutation: order is not a bijection on 1.." + std::to_string(n));
      }
      rank_[static_cast<std::size_t>(p)] = t + 1;
    }
  }

  static Permutation identity(std::size_t n) {
    std::vector<int> o(n);
    for (std::size_t i = 0; i < n; ++i) o[i] = static_cast<int>(i + 1);
    return Permutation(std::move(o));
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<int>& order() const { return order_; }

  /// Position at 1-based step t of the order.
  int at(std::size_t t) const { return order_.at(t - 1); }

  /// 1-based step at which position `pos` is factorized.
  int rank(int pos) const { return rank_.at(static_cast<std::size_t>(pos)); }

  bool operator==(const Permutation&) const = default;

 private:
  std::vector<int> order_;
  std::vector<int> rank_;
};

/// The last |z| - cut elements of the order are prediction targets.
struct TargetSelection {
  std::size_t cut = 0;
  std::vector<int> targets;  // positions, in factorization order
};

/// content(i, j) / query(i, j): row for original position i+1 may attend key
/// column j. The first mem_len columns are memory slots, the rest are the
/// current positions 1..T.
struct AttentionMaskPair {
  BoolMatrix content;
  BoolMatrix query;
  std::size_t mem_len = 0;
};

/// Uniform permutation by Fisher-Yates.
inline Permutation sample_factorization_order(std::size_t length, Rng& rng) {
  if (length == 0) throw std::invalid_argument("sample_factorization_order: length must be positive");
  std::vector<int> o(length);
  for (std::size_t i = 0; i < length; ++i) o[i] = static_cast<int>(i + 1);
  for (std::size_t i = length; i > 1; --i) std::swap(o[i - 1], o[rng.below(i)]);
  return Permutation(std::move(o));
}

/// Number of targets for partial prediction: max(1, round(T / K)).
inline std::size_t partial_target_count(std::size_t length, double k) {
  if (!(k >= 1.0)) throw std::invalid_argument("partial prediction K must be >= 1");
  const auto n = static_cast<std::size_t>(std::llround(static_cast<double>(length) / k));
  return std::min(length, std::max<std::size_t>(1, n));
}

inline TargetSelection select_prediction_targets(const Permutation& perm, double k) {
  const std::size_t n = partial_target_count(perm.size(), k);
  TargetSelection sel;
  sel.cut = perm.size() - n;
  sel.targets.assign(perm.order().begin() + static_cast<long>(sel.cut), perm.order().end());
  return sel;
}

/// One span draw: L uniform in 1..5, a context window of min(K*L, T) placed
/// uniformly, and L consecutive positions uniform inside the window. All
/// positions are 1-based.
struct SpanDraw {
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t window_start = 0;
  std::size_t window_length = 0;
};

inline constexpr std::size_t kMaxSpanLength = 5;

inline SpanDraw sample_target_span(std::size_t length, double k, Rng& rng, std::size_t span_len = 0) {
  if (length < 1) throw std::invalid_argument("sample_target_span: length must be positive");
  if (!(k >= 1.0)) throw std::invalid_argument("sample_target_span: K must be >= 1");
  SpanDraw d;
  std::size_t l = span_len ? span_len : static_cast<std::size_t>(rng.range(1, kMaxSpanLength));
  d.window_length = std::min(length, static_cast<std::size_t>(std::llround(k * static_cast<double>(l))));
  d.window_length = std::max<std::size_t>(d.window_length, 1);
  d.length = std::min(l, d.window_length);
  d.window_start = 1 + rng.below(length - d.window_length + 1);
  d.start = d.window_start + rng.below(d.window_length - d.length + 1);
  return d;
}

/// A factorization order together with its target suffix.
struct PlannedOrder {
  Permutation perm;
  TargetSelection targets;
};

namespace detail {

inline std::vector<int> shuffled(std::vector<int> v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  return v;
}

}  // namespace detail

/// Partial prediction with special positions kept out of the target suffix:
/// a uniform order is drawn, special positions are moved (stably) to the
/// front, and the last max(1, round(n_eligible / K)) positions become targets.
inline PlannedOrder plan_partial_prediction(std::span<const int> tokens, double k, Rng& rng) {
  const Permutation raw = sample_factorization_order(tokens.size(), rng);
  std::vector<int> special, normal;
  for (int p : raw.order()) (Vocab::is_special(tokens[static_cast<std::size_t>(p - 1)]) ? special : normal).push_back(p);
  if (normal.empty()) throw std::invalid_argument("plan_partial_prediction: no eligible target positions");
  const std::size_t n = partial_target_count(normal.size(), k);
  special.insert(special.end(), normal.begin(), normal.end());
  PlannedOrder plan{Permutation(std::move(special)), {}};
  plan.targets.cut = tokens.size() - n;
  plan.targets.targets.assign(plan.perm.order().begin() + static_cast<long>(plan.targets.cut), plan.perm.order().end());
  return plan;
}

/// Span-based prediction. The sequence is tiled with context windows of K*L
/// tokens, each contributing one span of L targets. Non-targets come first in
/// a uniform order; spans follow in a uniform order, each kept left to right.
///
/// The tiling is a stationary renewal process: the first window is drawn
/// with probability proportional to its length and starts at a uniform phase
/// at or before position 1, and the last window may run past the end. Spans
/// are cut to the sequence, so every position is a target with probability
/// 1/K whatever T is.
inline PlannedOrder plan_span_prediction(std::span<const int> tokens, double k, Rng& rng) {
  if (!(k >= 1.0)) throw std::invalid_argument("plan_span_prediction: K must be >= 1");
  const long n = static_cast<long>(tokens.size());
  const auto window_of = [&](std::size_t l) {
    return std::max<long>(1, std::min<long>(n, std::llround(k * static_cast<double>(l))));
  };
  std::vector<std::vector<int>> spans;
  std::vector<char> is_target(tokens.size() + 1, 0);
  long total = 0;
  for (std::size_t l = 1; l <= kMaxSpanLength; ++l) total += window_of(l);
  long pick = static_cast<long>(rng.below(static_cast<std::uint64_t>(total)));
  std::size_t l = 1;
  while (pick >= window_of(l)) pick -= window_of(l++);
  long window_start = 1 - pick;
  while (window_start <= n) {
    const long w = window_of(l);
    const long len = std::min<long>(static_cast<long>(l), w);
    const long first = window_start + static_cast<long>(rng.below(static_cast<std::uint64_t>(w - len + 1)));
    std::vector<int> span;
    for (long pos = std::max<long>(first, 1); pos < first + len && pos <= n; ++pos) {
      if (Vocab::is_special(tokens[static_cast<std::size_t>(pos - 1)])) continue;
      span.push_back(static_cast<int>(pos));
      is_target[static_cast<std::size_t>(pos)] = 1;
    }
    if (!span.empty()) spans.push_back(std::move(span));
    window_start += w;
    l = static_cast<std::size_t>(rng.range(1, kMaxSpanLength));
  }
  if (spans.empty()) return plan_partial_prediction(tokens, k, rng);
  std::vector<int> context;
  for (long p = 1; p <= n; ++p)
    if (!is_target[static_cast<std::size_t>(p)]) context.push_back(static_cast<int>(p));
  std::vector<int> order = detail::shuffled(std::move(context), rng);
  const std::size_t cut = order.size();
  std::vector<int> span_order(spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i) span_order[i] = static_cast<int>(i);
  for (int s : detail::shuffled(std::move(span_order), rng)) {
    const auto& span = spans[static_cast<std::size_t>(s)];
    order.insert(order.end(), span.begin(), span.end());
  }
  PlannedOrder plan{Permutation(std::move(order)), {}};
  plan.targets.cut = cut;
  plan.targets.targets.assign(plan.perm.order().begin() + static_cast<long>(cut), plan.perm.order().end());
  return plan;
}

/// Content row i sees current column j iff rank(j) <= rank(i); query row i
/// iff rank(j) < rank(i). Memory columns are visible to both streams.
inline AttentionMaskPair build_attention_masks(const Permutation& perm, const TargetSelection& targets,
                                               std::size_t mem_len) {
  const std::size_t n = perm.size();
  if (targets.cut > n || targets.targets.size() != n - targets.cut) {
    throw std::invalid_argument("build_attention_masks: target selection does not match the order length");
  }
  for (std::size_t t = 0; t < targets.targets.size(); ++t) {
    const int pos = targets.targets[t];
    if (pos < 1 || static_cast<std::size_t>(pos) > n || perm.rank(pos) != static_cast<int>(targets.cut + t + 1)) {
      throw std::invalid_argument("build_attention_masks: targets are not the suffix of the order");
    }
  }
  for (std::size_t t = 1; t <= n; ++t) {
    if (perm.rank(perm.at(t)) != static_cast<int>(t)) {
      throw std::invalid_argument("build_attention_masks: inconsistent rank table");
    }
  }
  AttentionMaskPair m{BoolMatrix(n, mem_len + n), BoolMatrix(n, mem_len + n), mem_len};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < mem_len; ++j) {
      m.content.set(i, j, true);
      m.query.set(i, j, true);
    }
    const int ri = perm.rank(static_cast<int>(i + 1));
    for (std::size_t j = 0; j < n; ++j) {
      const int rj = perm.rank(static_cast<int>(j + 1));
      m.content.set(i, mem_len + j, rj <= ri);
      m.query.set(i, mem_len + j, rj < ri);
    }
  }
  return m;
}

/// Left-to-right masks: content is lower-triangular with the diagonal, query
/// strictly lower-triangular.
inline AttentionMaskPair causal_masks(std::size_t n, std::size_t mem_len) {
  AttentionMaskPair m{BoolMatrix(n, mem_len + n), BoolMatrix(n, mem_len + n), mem_len};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < mem_len + n; ++j) {
      m.content.set(i, j, j < mem_len || j - mem_len <= i);
      m.query.set(i, j, j < mem_len || j - mem_len < i);
    }
  }
  return m;
}

/// Every row sees every column (bidirectional encoder, finetuning).
inline AttentionMaskPair full_masks(std::size_t n, std::size_t mem_len) {
  return AttentionMaskPair{BoolMatrix(n, mem_len + n, true), BoolMatrix(n, mem_len + n, true), mem_len};
}

/// Text dump: header "perm=<comma list> mem=<M>", then the content matrix and
/// the query matrix, each introduced by its stream name. Rows are original
/// positions 1..T; entries are space-separated 0/1.
inline std::string format_masks(const Permutation& perm, const AttentionMaskPair& masks) {
  std::ostringstream os;
  os << "perm=";
  for (std::size_t i = 0; i < perm.size(); ++i) os << (i ? "," : "") << perm.order()[i];
  os << " mem=" << masks.mem_len << '\n';
  auto matrix = [&](const char* name, const BoolMatrix& m) {
    os << name << '\n';
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? " " : "") << (m(r, c) ? 1 : 0);
      os << '\n';
    }
  };
  matrix("content", masks.content);
  matrix("query", masks.query);
  return os.str();
}

/// One row of the bidirectional input pipeline.
struct PipelineRow {
  bool reversed = false;
  std::vector<Window> segments;
};

/// Half the rows walk the stream forward in consecutive windows, the other
/// half walk a token-reversed copy. Each direction's stream is cut into
/// batch_size / 2 contiguous chunks, one per row.
inline std::vector<PipelineRow> build_bidirectional_batches(const std::vector<int>& stream, std::size_t batch_size,
                                                            std::size_t seq_len) {
  if (batch_size == 0 || batch_size % 2 != 0) {
    throw std::invalid_argument("build_bidirectional_batches: batch_size must be even and positive");
  }
  const std::size_t half = batch_size / 2;
  const std::size_t chunk = stream.size() / half;
  if (chunk == 0) throw std::invalid_argument("build_bidirectional_batches: stream shorter than one row per chunk");
  const std::vector<int> reversed(stream.rbegin(), stream.rend());
  std::vector<PipelineRow> rows;
  for (int dir = 0; dir < 2; ++dir) {
    const std::vector<int>& src = dir == 0 ? stream : reversed;
    for (std::size_t r = 0; r < half; ++r) {
      std::vector<int> piece(src.begin() + static_cast<long>(r * chunk),
                             src.begin() + static_cast<long>((r + 1) * chunk));
      rows.push_back(PipelineRow{dir == 1, stream_windows(piece, seq_len, seq_len)});
    }
  }
  return rows;
}

}  // namespace xlnet
