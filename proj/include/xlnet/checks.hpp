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

// Self-checks shared by the command line and the test suite: the
// finite-difference gradient suite, the exhaustive-permutation oracle and
// the single-pass memory oracle.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "xlnet/autodiff.hpp"
#include "xlnet/gradcheck.hpp"
#include "xlnet/model.hpp"
#include "xlnet/perm_mask.hpp"
#include "xlnet/rel_attention.hpp"
#include "xlnet/rng.hpp"

namespace xlnet {

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  bool pass = false;
};

using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = scale * rng.normal();
  return t;
}

namespace detail {

/// Reduces any output to a scalar with fixed random weights so that every
/// output coordinate matters (a plain sum would hide softmax gradients).
inline Var weighted_total(Graph& g, Var out) {
  if (out.shape().empty()) return out;
  Rng rng(0x5eed);
  return sum(mul(out, g.constant(random_tensor(out.shape(), rng))));
}

}  // namespace detail

/// Compares reverse-mode gradients of f with central differences for every
/// input tensor.
inline GradCheckResult check_gradients(const std::string& name, const std::vector<Tensor>& inputs, const GraphFn& f,
                                       double tol = 1e-4, double step = 1e-5) {
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(g.variable(t));
  const Var total = detail::weighted_total(g, f(g, vars));
  g.backward(total);
  GradCheckResult res{name, 0.0, true};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto eval = [&](const Tensor& x) {
      Graph h;
      std::vector<Var> vs;
      for (std::size_t k = 0; k < inputs.size(); ++k) vs.push_back(h.constant(k == i ? x : inputs[k]));
      return detail::weighted_total(h, f(h, vs)).value().item();
    };
    const Tensor numeric = finite_difference_grad(eval, inputs[i], step);
    res.max_error = std::max(res.max_error, max_relative_error(g.grad(vars[i]), numeric));
  }
  res.pass = res.max_error < tol;
  return res;
}

/// A small model for checks and oracles; dropout off.
inline ModelConfig tiny_config(std::size_t vocab = 12, std::size_t mem_len = 0) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.head_dim = 4;
  c.ffn_dim = 16;
  c.vocab_size = vocab;
  c.mem_len = mem_len;
  c.seq_len = 6;
  c.k = 1.0;
  c.dropout = 0.0;
  c.attention_dropout = 0.0;
  c.init_std = 0.5;  // large enough that attention is far from uniform
  return c;
}

inline std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> t(n);
  for (int& x : t) x = Vocab::kNumReserved + static_cast<int>(rng.below(vocab - Vocab::kNumReserved));
  return t;
}

/// Gradient check of the full two-stream model: permutation-LM loss with
/// memory, with respect to every parameter tensor.
inline GradCheckResult check_model_gradients(std::uint64_t seed = 7, double tol = 1e-4) {
  Rng rng(seed);
  const std::size_t n = 5, mem = 3;
  Model model(tiny_config(12, mem), seed);
  LayerMemory memory;
  memory.doc_id = 0;
  for (std::size_t m = 0; m < model.config().n_layers; ++m) {
    memory.layers.push_back(random_tensor({mem, model.config().d_model}, rng));
  }
  memory.positions = {-2, -1, 0};
  memory.segments = {0, 1, 1};
  SequenceInput in = SequenceInput::plain(random_tokens(n, 12, rng), 1, 0);
  in.segments = {0, 0, 1, 1, 1};
  const Permutation perm = sample_factorization_order(n, rng);
  const PlannedOrder plan{perm, select_prediction_targets(perm, 2.0)};

  auto loss_of = [&](const Model& m, Graph& g, const BoundModel& bm) {
    (void)m;
    return plm_row_loss(g, bm, model.config(), in, plan, &memory).nll;
  };
  Graph g;
  const BoundModel bm = model.bind(g, true);
  g.backward(loss_of(model, g, bm));
  GradCheckResult res{"model/plm_two_stream_2layer", 0.0, true};
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto eval = [&](const Tensor& x) {
      Model m2 = model;
      m2.params().entries()[i].second = x;
      Graph h;
      const BoundModel b2 = m2.bind(h, false);
      return loss_of(m2, h, b2).value().item();
    };
    const Tensor numeric = finite_difference_grad(eval, model.params().entries()[i].second, 1e-5);
    res.max_error = std::max(res.max_error, max_relative_error(g.grad(bm.all[i]), numeric));
  }
  res.pass = res.max_error < tol;
  return res;
}

/// Finite-difference checks of every primitive, one attention layer and the
/// full model.
inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 1, double tol = 1e-4) {
  Rng rng(seed);
  auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };
  std::vector<GradCheckResult> out;
  auto add_check = [&](const std::string& name, std::vector<Tensor> inputs, GraphFn f) {
    out.push_back(check_gradients(name, inputs, f, tol));
  };

  add_check("add", {r({3, 4}), r({3, 4})}, [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); });
  add_check("add_broadcast", {r({2, 3, 4}), r({3, 4})},
            [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); });
  add_check("mul", {r({3, 4}), r({3, 4})}, [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); });
  add_check("mul_broadcast", {r({2, 3, 4}), r({4})},
            [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); });
  add_check("scale", {r({5})}, [](Graph&, const std::vector<Var>& v) { return scale(v[0], -1.7); });
  add_check("matmul", {r({3, 4}), r({4, 5})}, [](Graph&, const std::vector<Var>& v) { return matmul(v[0], v[1]); });
  add_check("matmul_nt", {r({3, 4}), r({5, 4})},
            [](Graph&, const std::vector<Var>& v) { return matmul_nt(v[0], v[1]); });
  add_check("bmm", {r({2, 3, 4}), r({2, 4, 3})}, [](Graph&, const std::vector<Var>& v) { return bmm(v[0], v[1]); });
  add_check("bmm_nt", {r({2, 3, 4}), r({2, 5, 4})},
            [](Graph&, const std::vector<Var>& v) { return bmm_nt(v[0], v[1]); });
  BoolMatrix mask(3, 4, true);
  mask.set(0, 3, false);
  mask.set(1, 0, false);
  mask.set(2, 2, false);
  add_check("masked_softmax", {r({2, 3, 4})},
            [mask](Graph&, const std::vector<Var>& v) { return masked_softmax(v[0], mask); });
  BoolMatrix with_empty(3, 4, true);
  for (std::size_t c = 0; c < 4; ++c) with_empty.set(1, c, false);
  add_check("masked_softmax_empty_row", {r({2, 3, 4})}, [with_empty](Graph&, const std::vector<Var>& v) {
    return masked_softmax(v[0], with_empty, EmptyRows::kZero);
  });
  add_check("softmax", {r({3, 5})}, [](Graph&, const std::vector<Var>& v) { return softmax(v[0]); });
  add_check("log_softmax", {r({3, 5})}, [](Graph&, const std::vector<Var>& v) { return log_softmax(v[0]); });
  add_check("layer_norm", {r({3, 6}), r({6}), r({6})},
            [](Graph&, const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); });
  add_check("gelu", {r({4, 3})}, [](Graph&, const std::vector<Var>& v) { return gelu(v[0]); });
  add_check("tanh", {r({4, 3})}, [](Graph&, const std::vector<Var>& v) { return xlnet::tanh(v[0]); });
  add_check("embedding", {r({6, 3})}, [](Graph&, const std::vector<Var>& v) {
    const std::vector<int> ids{2, 0, 2, 5};
    return embedding(v[0], ids);
  });
  add_check("take_rows", {r({4, 3})}, [](Graph&, const std::vector<Var>& v) {
    const std::vector<std::size_t> rows{3, 1, 3};
    return take_rows(v[0], rows);
  });
  add_check("gather_last", {r({2, 3, 5})}, [](Graph&, const std::vector<Var>& v) {
    const std::vector<std::uint32_t> idx{0, 4, 4, 1, 2, 3, 3, 0, 1, 1, 2, 4};
    return gather_last(v[0], idx, 4);
  });
  add_check("pick", {r({3, 5})}, [](Graph&, const std::vector<Var>& v) {
    const std::vector<int> ids{4, 0, 2};
    return pick(log_softmax(v[0]), ids);
  });
  add_check("concat_axis0", {r({2, 3}), r({4, 3})},
            [](Graph&, const std::vector<Var>& v) { return concat({v[0], v[1]}, 0); });
  add_check("concat_axis1", {r({2, 2, 3}), r({2, 1, 3})},
            [](Graph&, const std::vector<Var>& v) { return concat({v[0], v[1]}, 1); });
  add_check("slice", {r({3, 5})}, [](Graph&, const std::vector<Var>& v) { return slice(v[0], 1, 1, 4); });
  add_check("transpose", {r({2, 3, 4})}, [](Graph&, const std::vector<Var>& v) { return transpose(v[0], 0, 2); });
  add_check("reshape", {r({2, 6})}, [](Graph&, const std::vector<Var>& v) { return reshape(v[0], Shape{3, 4}); });
  add_check("sum", {r({3, 4})}, [](Graph&, const std::vector<Var>& v) { return sum(v[0]); });
  add_check("mean", {r({3, 4})}, [](Graph&, const std::vector<Var>& v) { return mean(v[0]); });
  add_check("dropout", {r({4, 5})}, [](Graph&, const std::vector<Var>& v) {
    Rng d(11);
    return dropout(v[0], 0.3, d);
  });

  // One two-stream layer with memory, relative positions and segments; the
  // gradient flows to the inputs of both streams and to all parameters.
  {
    const std::size_t n = 4, mem = 2, nh = 2, dh = 3, d = nh * dh, ff = 5;
    const std::vector<long> qpos{1, 2, 3, 4}, kpos{-1, 0, 1, 2, 3, 4};
    const std::vector<int> qseg{0, 0, 1, 1}, kseg{1, 0, 0, 0, 1, 1};
    const Permutation perm({3, 1, 4, 2});
    const AttentionMaskPair masks = build_attention_masks(perm, select_prediction_targets(perm, 2.0), mem);
    const std::vector<std::size_t> qrows{static_cast<std::size_t>(perm.at(3) - 1),
                                         static_cast<std::size_t>(perm.at(4) - 1)};
    const RelPosTable table = RelPosTable::build(1 - 4, 4 + 1, d);
    const StreamGeometry cgeo = make_geometry(qpos, qseg, kpos, kseg, masks.content, table, EmptyRows::kError);
    std::vector<long> gpos;
    std::vector<int> gseg;
    for (std::size_t q : qrows) {
      gpos.push_back(qpos[q]);
      gseg.push_back(qseg[q]);
    }
    const StreamGeometry qgeo =
        make_geometry(gpos, gseg, kpos, kseg, masks.query.select_rows(qrows), table, EmptyRows::kError);
    std::vector<Tensor> inputs{r({n, d}), r({qrows.size(), d}), r({mem, d})};
    for (int k = 0; k < 5; ++k) inputs.push_back(random_tensor({d, d}, rng, 0.5));
    for (int k = 0; k < 5; ++k) inputs.push_back(random_tensor({nh, dh}, rng, 0.5));
    inputs.push_back(r({d}));
    inputs.push_back(r({d}));
    inputs.push_back(random_tensor({d, ff}, rng, 0.5));
    inputs.push_back(r({ff}));
    inputs.push_back(random_tensor({ff, d}, rng, 0.5));
    inputs.push_back(r({d}));
    inputs.push_back(r({d}));
    inputs.push_back(r({d}));
    add_check("two_stream_layer", inputs, [=](Graph& g, const std::vector<Var>& v) {
      const LayerVars p{v[3],  v[4],  v[5],  v[6],  v[7],  v[8],  v[9],  v[10], v[11],
                        v[12], v[13], v[14], v[15], v[16], v[17], v[18], v[19], v[20]};
      LayerOptions opt;
      opt.n_heads = nh;
      opt.head_dim = dh;
      const LayerOutput o = two_stream_layer(v[0], v[1], v[2], g.constant(table.table), cgeo, &qgeo, p, opt);
      return concat({o.h, *o.g}, 0);
    });
  }

  out.push_back(check_model_gradients(seed + 6, tol));
  return out;
}

// ---------------------------------------------------------------------------

struct PermutationOracleReport {
  double exhaustive_mean = 0.0;
  double mc_mean = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
  bool pass = false;
};

/// For a fixed T=4 toy model with every position a target, the expectation
/// over orders of the permutation-LM loss, computed exactly over all 24
/// orders, vs a streaming Monte-Carlo estimate over sampled orders.
inline PermutationOracleReport permutation_oracle(std::size_t n_samples, std::uint64_t seed) {
  const std::size_t n = 4;
  Rng rng(seed);
  Model model(tiny_config(10, 0), seed);
  const SequenceInput in = SequenceInput::plain(random_tokens(n, 10, rng));
  auto loss_for = [&](const Permutation& perm) {
    const TrainingInstance inst{in, PlannedOrder{perm, select_prediction_targets(perm, 1.0)}};
    return plm_loss(model, std::span<const TrainingInstance>(&inst, 1)).mean();
  };
  PermutationOracleReport rep;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 1);
  std::size_t count = 0;
  double total = 0.0;
  do {
    total += loss_for(Permutation(order));
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  rep.exhaustive_mean = total / static_cast<double>(count);

  double mean = 0.0, m2 = 0.0;
  for (std::size_t i = 1; i <= n_samples; ++i) {
    const double x = loss_for(sample_factorization_order(n, rng));
    const double delta = x - mean;
    mean += delta / static_cast<double>(i);
    m2 += delta * (x - mean);
  }
  rep.samples = n_samples;
  rep.mc_mean = mean;
  rep.std_error = n_samples > 1 ? std::sqrt(m2 / static_cast<double>(n_samples - 1) / static_cast<double>(n_samples)) : 0.0;
  rep.pass = n_samples > 1 && std::abs(rep.mc_mean - rep.exhaustive_mean) <= 3.0 * rep.std_error;
  return rep;
}

struct MemoryOracleReport {
  double max_content_diff = 0.0;
  double max_query_diff = 0.0;
  double max_segment1_grad = 0.0;
  double segment2_param_grad = 0.0;  // sanity: the segment-2 loss does have gradients
  bool pass = false;
};

/// Two segments run with recurrence vs one pass over both with a block mask:
/// segment-1 rows see only segment 1 (under its own order), segment-2 rows
/// see all of segment 1 plus segment 2 under its order.
inline MemoryOracleReport memory_oracle(std::uint64_t seed, double tol = 1e-8) {
  const std::size_t n = 5;
  Rng rng(seed);
  Model model(tiny_config(12, n), seed);
  const ModelConfig& cfg = model.config();
  SequenceInput s1 = SequenceInput::plain(random_tokens(n, 12, rng), 1, 3);
  SequenceInput s2 = SequenceInput::plain(random_tokens(n, 12, rng), static_cast<long>(n) + 1, 3);
  s1.segments = {0, 0, 1, 1, 1};
  s2.segments = {0, 1, 1, 0, 0};
  const Permutation p1 = sample_factorization_order(n, rng);
  const Permutation p2 = sample_factorization_order(n, rng);
  const TargetSelection t1 = select_prediction_targets(p1, 2.0);
  const TargetSelection t2 = select_prediction_targets(p2, 2.0);
  std::vector<std::size_t> rows1, rows2, rows_joint;
  for (int p : t1.targets) rows1.push_back(static_cast<std::size_t>(p - 1));
  for (int p : t2.targets) {
    rows2.push_back(static_cast<std::size_t>(p - 1));
    rows_joint.push_back(n + static_cast<std::size_t>(p - 1));
  }

  MemoryOracleReport rep;
  Graph g;
  const BoundModel bm = model.bind(g, true);
  const AttentionMaskPair m1 = build_attention_masks(p1, t1, 0);
  const Var e1 = g.variable(embedding(bm.embedding, s1.tokens).value());
  ForwardOptions o1;
  o1.input_embeddings = e1;
  const ForwardResult f1 = forward_two_stream(g, bm, cfg, s1, nullptr, m1, rows1, o1);
  const ForwardResult f2 = forward_two_stream(g, bm, cfg, s2, usable_memory(&f1.memory, s2),
                                              build_attention_masks(p2, t2, n), rows2);

  const RowLoss seg2 = plm_row_loss(g, bm, cfg, s2, PlannedOrder{p2, t2}, &f1.memory);
  g.backward(seg2.nll);
  for (double x : g.grad(e1).data()) rep.max_segment1_grad = std::max(rep.max_segment1_grad, std::abs(x));
  for (const Var& v : bm.all)
    for (double x : g.grad(v).data()) rep.segment2_param_grad = std::max(rep.segment2_param_grad, std::abs(x));

  SequenceInput joint;
  joint.tokens = s1.tokens;
  joint.tokens.insert(joint.tokens.end(), s2.tokens.begin(), s2.tokens.end());
  joint.segments = s1.segments;
  joint.segments.insert(joint.segments.end(), s2.segments.begin(), s2.segments.end());
  joint.positions = s1.positions;
  joint.positions.insert(joint.positions.end(), s2.positions.begin(), s2.positions.end());
  joint.doc_id = 3;
  const AttentionMaskPair m2 = build_attention_masks(p2, t2, 0);
  AttentionMaskPair block{BoolMatrix(2 * n, 2 * n), BoolMatrix(2 * n, 2 * n), 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      block.content.set(i, j, m1.content(i, j));
      block.query.set(i, j, m1.query(i, j));
      block.content.set(n + i, j, true);
      block.query.set(n + i, j, true);
      block.content.set(n + i, n + j, m2.content(i, j));
      block.query.set(n + i, n + j, m2.query(i, j));
    }
  }
  Graph h;
  const BoundModel bj = model.bind(h, false);
  ModelConfig joint_cfg = cfg;
  joint_cfg.mem_len = 0;
  const ForwardResult fj = forward_two_stream(h, bj, joint_cfg, joint, nullptr, block, rows_joint);
  for (std::size_t l = 0; l < f2.content.size(); ++l) {
    const Tensor& a = f2.content[l].value();
    const Tensor& b = fj.content[l].value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < cfg.d_model; ++k)
        rep.max_content_diff = std::max(rep.max_content_diff, std::abs(a.at(i, k) - b.at(n + i, k)));
    const Tensor& qa = f2.query[l].value();
    const Tensor& qb = fj.query[l].value();
    for (std::size_t k = 0; k < qa.numel(); ++k)
      rep.max_query_diff = std::max(rep.max_query_diff, std::abs(qa[k] - qb[k]));
  }
  rep.pass = rep.max_content_diff <= tol && rep.max_query_diff <= tol && rep.max_segment1_grad == 0.0 &&
             rep.segment2_param_grad > 0.0;
  return rep;
}

}  // namespace xlnet
