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

// Optimizer, schedules, run configuration and the training loops.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "xlnet/checkpoint.hpp"
#include "xlnet/corpus.hpp"
#include "xlnet/model.hpp"
#include "xlnet/perm_mask.hpp"
#include "xlnet/rng.hpp"
#include "xlnet/tensor.hpp"

namespace xlnet {

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `total`.
inline double lr_schedule(std::size_t step, double peak, std::size_t warmup, std::size_t total) {
  if (step >= total) return 0.0;
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return peak;
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

/// base * alpha^(M - m) for layer m in 1..M.
inline double layerwise_lr(double base, std::size_t m, std::size_t n_layers, double alpha) {
  if (m < 1 || m > n_layers) throw std::out_of_range("layerwise_lr: layer index out of range");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("layerwise_lr: alpha must be in (0, 1]");
  return base * std::pow(alpha, static_cast<double>(n_layers - m));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double layerwise_alpha = 1.0;
};

struct OptimState {
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static OptimState zeros_like(const ParameterStore& params) {
    OptimState s;
    for (const auto& [name, t] : params.entries()) {
      s.m.emplace_back(t.shape());
      s.v.emplace_back(t.shape());
    }
    return s;
  }
};

/// Learning-rate multiplier of one parameter under layer-wise decay:
/// embeddings and the query initializer sit below layer 1, the classifier
/// head above layer M.
inline double parameter_lr_scale(const std::string& name, std::size_t n_layers, double alpha) {
  if (alpha == 1.0) return 1.0;
  const std::size_t layer = std::min(parameter_layer(name, n_layers), n_layers);
  return std::pow(alpha, static_cast<double>(n_layers - layer));
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.data()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads)
      for (double& x : g.data()) x *= s;
  }
  return norm;
}

/// One AdamW update with bias correction and decoupled weight decay:
///   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
inline void optimizer_step(ParameterStore& params, const std::vector<Tensor>& grads, OptimState& state,
                           const AdamConfig& cfg, double lr, std::size_t n_layers = 0) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("optimizer_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params.entries()[i];
    if (grads[i].shape() != p.shape()) throw ShapeError("optimizer_step", grads[i].shape(), p.shape(), name);
    for (double x : grads[i].data()) {
      if (!std::isfinite(x)) throw std::runtime_error("optimizer_step: non-finite gradient for parameter " + name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params.entries()[i];
    const double lr_i = lr * (n_layers ? parameter_lr_scale(name, n_layers, cfg.layerwise_alpha) : 1.0);
    auto pd = p.data();
    auto gd = grads[i].data();
    auto md = state.m[i].data();
    auto vd = state.v[i].data();
    for (std::size_t k = 0; k < pd.size(); ++k) {
      md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * gd[k];
      vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * gd[k] * gd[k];
      const double mh = md[k] / c1;
      const double vh = vd[k] / c2;
      pd[k] -= lr_i * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * pd[k]);
    }
  }
}

enum class Objective { kPlm, kDae, kAr };

inline Objective parse_objective(const std::string& s) {
  if (s == "plm") return Objective::kPlm;
  if (s == "dae") return Objective::kDae;
  if (s == "ar") return Objective::kAr;
  throw std::invalid_argument("unknown objective '" + s + "' (expected plm, dae or ar)");
}

inline const char* objective_name(Objective o) {
  switch (o) {
    case Objective::kPlm: return "plm";
    case Objective::kDae: return "dae";
    case Objective::kAr: return "ar";
  }
  return "?";
}

struct TrainConfig {
  ModelConfig model;
  std::size_t batch_size = 16;
  double peak_lr = 5e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  AdamConfig adam;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;
  DType checkpoint_dtype = DType::kF32;
  bool span_prediction = true;
  double mask_rate = 0.15;
  TokenizerMode tokenizer = TokenizerMode::kChar;
  std::size_t vocab_size = 256;
  bool log_throughput = false;
  std::size_t threads = 1;
  std::string input = "stream";  // stream | pairs

  void validate() const {
    if (batch_size == 0 || batch_size % 2 != 0) throw std::invalid_argument("config: batch_size must be even and positive");
    if (total_steps == 0) throw std::invalid_argument("config: total_steps must be positive");
    if (warmup_steps >= total_steps) throw std::invalid_argument("config: warmup_steps must be < total_steps");
    if (!(peak_lr > 0.0)) throw std::invalid_argument("config: peak_lr must be positive");
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw std::invalid_argument("config: mask_rate must be in (0, 1)");
    if (!(adam.layerwise_alpha > 0.0 && adam.layerwise_alpha <= 1.0)) {
      throw std::invalid_argument("config: layerwise_alpha must be in (0, 1]");
    }
    if (input != "stream" && input != "pairs") throw std::invalid_argument("config: input must be stream or pairs");
    if (threads == 0) throw std::invalid_argument("config: threads must be positive");
    if (vocab_size <= static_cast<std::size_t>(Vocab::kNumReserved)) {
      throw std::invalid_argument("config: vocab_size must exceed the reserved ids");
    }
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || x < 0) throw std::invalid_argument("config: " + key + " expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: " + key + " expects true or false, got '" + v + "'");
}

inline std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace detail

/// Sets one configuration key. Unknown keys are rejected.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  ModelConfig& m = c.model;
  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"n_layers", [&](const std::string& v) { m.n_layers = to_size(key, v); }},
      {"d_model", [&](const std::string& v) { m.d_model = to_size(key, v); }},
      {"n_heads", [&](const std::string& v) { m.n_heads = to_size(key, v); }},
      {"head_dim", [&](const std::string& v) { m.head_dim = to_size(key, v); }},
      {"ffn_dim", [&](const std::string& v) { m.ffn_dim = to_size(key, v); }},
      {"seq_len", [&](const std::string& v) { m.seq_len = to_size(key, v); }},
      {"mem_len", [&](const std::string& v) { m.mem_len = to_size(key, v); }},
      {"K", [&](const std::string& v) { m.k = to_double(key, v); }},
      {"dropout", [&](const std::string& v) { m.dropout = to_double(key, v); }},
      {"attention_dropout", [&](const std::string& v) { m.attention_dropout = to_double(key, v); }},
      {"init_std", [&](const std::string& v) { m.init_std = to_double(key, v); }},
      {"batch_size", [&](const std::string& v) { c.batch_size = to_size(key, v); }},
      {"peak_lr", [&](const std::string& v) { c.peak_lr = to_double(key, v); }},
      {"warmup_steps", [&](const std::string& v) { c.warmup_steps = to_size(key, v); }},
      {"total_steps", [&](const std::string& v) { c.total_steps = to_size(key, v); }},
      {"weight_decay", [&](const std::string& v) { c.adam.weight_decay = to_double(key, v); }},
      {"adam_eps", [&](const std::string& v) { c.adam.eps = to_double(key, v); }},
      {"beta1", [&](const std::string& v) { c.adam.beta1 = to_double(key, v); }},
      {"beta2", [&](const std::string& v) { c.adam.beta2 = to_double(key, v); }},
      {"layerwise_alpha", [&](const std::string& v) { c.adam.layerwise_alpha = to_double(key, v); }},
      {"clip_norm", [&](const std::string& v) { c.clip_norm = to_double(key, v); }},
      {"seed", [&](const std::string& v) { c.seed = to_size(key, v); }},
      {"checkpoint_every", [&](const std::string& v) { c.checkpoint_every = to_size(key, v); }},
      {"checkpoint_dtype", [&](const std::string& v) { c.checkpoint_dtype = parse_dtype(v); }},
      {"span_prediction", [&](const std::string& v) { c.span_prediction = to_bool(key, v); }},
      {"mask_rate", [&](const std::string& v) { c.mask_rate = to_double(key, v); }},
      {"tokenizer", [&](const std::string& v) { c.tokenizer = parse_tokenizer_mode(v); }},
      {"vocab_size", [&](const std::string& v) { c.vocab_size = to_size(key, v); }},
      {"log_throughput", [&](const std::string& v) { c.log_throughput = to_bool(key, v); }},
      {"threads", [&](const std::string& v) { c.threads = to_size(key, v); }},
      {"input", [&](const std::string& v) { c.input = v; }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  it->second(value);
}

/// Parses "key = value" lines; '#' starts a comment.
inline void parse_config(std::istream& is, TrainConfig& c) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  TrainConfig c;
  parse_config(f, c);
  return c;
}

/// The resolved configuration in the same format parse_config reads.
inline std::string format_config(const TrainConfig& c) {
  using detail::fmt_double;
  const ModelConfig& m = c.model;
  std::ostringstream os;
  os << "n_layers = " << m.n_layers << '\n'
     << "d_model = " << m.d_model << '\n'
     << "n_heads = " << m.n_heads << '\n'
     << "head_dim = " << m.head_dim << '\n'
     << "ffn_dim = " << m.ffn_dim << '\n'
     << "seq_len = " << m.seq_len << '\n'
     << "mem_len = " << m.mem_len << '\n'
     << "K = " << fmt_double(m.k) << '\n'
     << "dropout = " << fmt_double(m.dropout) << '\n'
     << "attention_dropout = " << fmt_double(m.attention_dropout) << '\n'
     << "init_std = " << fmt_double(m.init_std) << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "peak_lr = " << fmt_double(c.peak_lr) << '\n'
     << "warmup_steps = " << c.warmup_steps << '\n'
     << "total_steps = " << c.total_steps << '\n'
     << "weight_decay = " << fmt_double(c.adam.weight_decay) << '\n'
     << "adam_eps = " << fmt_double(c.adam.eps) << '\n'
     << "beta1 = " << fmt_double(c.adam.beta1) << '\n'
     << "beta2 = " << fmt_double(c.adam.beta2) << '\n'
     << "layerwise_alpha = " << fmt_double(c.adam.layerwise_alpha) << '\n'
     << "clip_norm = " << fmt_double(c.clip_norm) << '\n'
     << "seed = " << c.seed << '\n'
     << "checkpoint_every = " << c.checkpoint_every << '\n'
     << "checkpoint_dtype = " << (c.checkpoint_dtype == DType::kF32 ? "f32" : "f64") << '\n'
     << "span_prediction = " << (c.span_prediction ? "true" : "false") << '\n'
     << "mask_rate = " << fmt_double(c.mask_rate) << '\n'
     << "tokenizer = " << (c.tokenizer == TokenizerMode::kChar ? "char" : "word") << '\n'
     << "vocab_size = " << c.vocab_size << '\n'
     << "log_throughput = " << (c.log_throughput ? "true" : "false") << '\n'
     << "threads = " << c.threads << '\n'
     << "input = " << c.input << '\n';
  return os.str();
}

/// Where each batch row reads its segments from.
struct TrainData {
  std::size_t seq_len = 0;
  std::vector<std::vector<Window>> rows;       // stream input: full windows per row
  std::vector<std::vector<int>> documents;     // pair input
  bool pairs = false;

  static TrainData from_stream(const std::vector<int>& stream, std::size_t batch, std::size_t seq_len) {
    TrainData d;
    d.seq_len = seq_len;
    for (PipelineRow& row : build_bidirectional_batches(stream, batch, seq_len)) {
      std::vector<Window> full;
      for (Window& w : row.segments)
        if (!w.padded) full.push_back(std::move(w));
      if (full.empty()) {
        throw std::invalid_argument("corpus too short: each of the " + std::to_string(batch / 2) +
                                    " rows per direction needs at least one window of " + std::to_string(seq_len) +
                                    " tokens (" + std::to_string(stream.size()) + " tokens available)");
      }
      d.rows.push_back(std::move(full));
    }
    return d;
  }

  static TrainData from_documents(std::vector<std::vector<int>> docs, std::size_t seq_len) {
    TrainData d;
    d.seq_len = seq_len;
    d.pairs = true;
    std::erase_if(docs, [](const std::vector<int>& doc) { return doc.size() < 2; });
    if (docs.empty()) throw std::invalid_argument("corpus too short: no document with two or more tokens");
    d.documents = std::move(docs);
    return d;
  }

  /// Row `r`'s input at (1-based) step `step`. Stream rows cycle through
  /// their windows; each pass over the row is a new document id, so memory
  /// is dropped when a row wraps around.
  SequenceInput input(std::size_t r, std::size_t step, Rng& rng) const {
    if (pairs) {
      PackedPair p = sample_pair(documents, seq_len, rng);
      SequenceInput s = SequenceInput::plain(std::move(p.tokens), 1, p.doc_id);
      s.segments = std::move(p.segments);
      return s;
    }
    const auto& w = rows.at(r);
    const std::size_t idx = (step - 1) % w.size();
    const std::size_t pass = (step - 1) / w.size();
    SequenceInput s;
    s.tokens = w[idx].tokens;
    s.positions = w[idx].positions;
    s.segments.assign(s.tokens.size(), 0);
    s.doc_id = static_cast<long>(pass * rows.size() + r);
    return s;
  }
};

struct StepStats {
  double loss = 0.0;
  std::size_t predicted = 0;
  std::size_t tokens = 0;
  std::size_t empty_rows = 0;
  double grad_norm = 0.0;
};

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < std::min(threads, n); ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Computes rows [0, n) in waves of `threads` and hands each result to
/// `consume` in row order, so only one wave of results is alive at a time.
template <typename R>
void ordered_rows(std::size_t n, std::size_t threads, const std::function<R(std::size_t)>& compute,
                  const std::function<void(std::size_t, R&)>& consume) {
  const std::size_t wave = std::max<std::size_t>(threads, 1);
  std::vector<R> buf(wave);
  for (std::size_t start = 0; start < n; start += wave) {
    const std::size_t count = std::min(wave, n - start);
    parallel_for(count, threads, [&](std::size_t i) { buf[i] = compute(start + i); });
    for (std::size_t i = 0; i < count; ++i) {
      consume(start + i, buf[i]);
      buf[i] = R();
    }
  }
}

}  // namespace detail

/// Everything a run needs to continue bitwise: parameters, Adam moments,
/// step counter and the per-row memory.
struct TrainState {
  Model model;
  OptimState optim;
  std::vector<LayerMemory> memories;
};

/// Computes one row's loss and gradients. Randomness comes only from `rng`.
struct RowResult {
  double nll = 0.0;
  std::size_t count = 0;
  std::size_t tokens = 0;
  bool empty = false;
  std::vector<Tensor> grads;
  LayerMemory memory;
};

inline RowResult train_row(const Model& model, const TrainConfig& cfg, Objective obj, const TrainData& data,
                           const LayerMemory& memory, std::size_t row, std::size_t step) {
  Rng rng = Rng::derive(cfg.seed, step, row);
  Rng drop = rng.split();
  const SequenceInput in = data.input(row, step, rng);
  const LayerMemory* mem = data.pairs ? nullptr : &memory;
  Graph g;
  const BoundModel bm = model.bind(g, true);
  ForwardOptions opt;
  opt.dropout_rng = &drop;
  RowResult res;
  res.tokens = in.size();
  RowLoss rl;
  switch (obj) {
    case Objective::kPlm: {
      const PlannedOrder plan = cfg.span_prediction ? plan_span_prediction(in.tokens, cfg.model.k, rng)
                                                    : plan_partial_prediction(in.tokens, cfg.model.k, rng);
      rl = plm_row_loss(g, bm, model.config(), in, plan, mem, opt);
      break;
    }
    case Objective::kDae: {
      const auto masked = select_dae_positions(in.tokens, cfg.mask_rate, rng);
      res.empty = masked.empty();
      rl = dae_row_loss(g, bm, model.config(), in, masked, mem, opt);
      break;
    }
    case Objective::kAr:
      rl = ar_row_loss(g, bm, model.config(), in, mem, opt);
      break;
  }
  res.nll = rl.nll.value().item();
  res.count = rl.count;
  res.memory = std::move(rl.memory);
  if (rl.count > 0) g.backward(rl.nll);
  res.grads.reserve(bm.all.size());
  for (const Var& v : bm.all) res.grads.push_back(g.take_grad(v));
  return res;
}

/// One optimizer step over the batch at (1-based) `step`. The loss is the
/// mean negative log-likelihood over every predicted token of the batch.
inline StepStats train_step(TrainState& st, const TrainConfig& cfg, Objective obj, const TrainData& data,
                            std::size_t step) {
  const std::size_t batch = cfg.batch_size;
  if (st.memories.size() != batch) st.memories.assign(batch, LayerMemory{});
  StepStats stats;
  std::vector<Tensor> grads;
  for (const auto& [name, t] : st.model.params().entries()) grads.emplace_back(t.shape());
  double nll = 0.0;
  detail::ordered_rows<RowResult>(
      batch, cfg.threads,
      [&](std::size_t r) { return train_row(st.model, cfg, obj, data, st.memories[r], r, step); },
      [&](std::size_t r, RowResult& rr) {
        nll += rr.nll;
        stats.predicted += rr.count;
        stats.tokens += rr.tokens;
        stats.empty_rows += rr.empty;
        for (std::size_t i = 0; i < grads.size(); ++i) {
          auto dst = grads[i].data();
          auto src = rr.grads[i].data();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
        st.memories[r] = std::move(rr.memory);
      });
  if (stats.predicted == 0) throw std::runtime_error("train_step: batch has no predicted tokens");
  const double inv = 1.0 / static_cast<double>(stats.predicted);
  for (Tensor& g : grads)
    for (double& x : g.data()) x *= inv;
  stats.loss = nll * inv;
  stats.grad_norm = clip_global_norm(grads, cfg.clip_norm);
  const double lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps);
  optimizer_step(st.model.params(), grads, st.optim, cfg.adam, lr, st.model.config().n_layers);
  return stats;
}

// ---------------------------------------------------------------------------
// Run directory: metrics.tsv, model.xlnt, state.xlnt, vocab.txt, config.txt

inline NamedTensors pack_state(const TrainState& st) {
  NamedTensors out;
  const auto& entries = st.model.params().entries();
  for (const auto& e : entries) out.push_back(e);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out.emplace_back("adam_m/" + entries[i].first, st.optim.m[i]);
    out.emplace_back("adam_v/" + entries[i].first, st.optim.v[i]);
  }
  out.emplace_back("optim/step", Tensor::scalar(static_cast<double>(st.optim.step)));
  for (std::size_t r = 0; r < st.memories.size(); ++r) {
    const LayerMemory& m = st.memories[r];
    const std::string p = "memory/" + std::to_string(r) + "/";
    const std::size_t n = m.length();
    out.emplace_back(p + "doc_id", Tensor::scalar(static_cast<double>(m.doc_id)));
    Tensor pos(Shape{n}), seg(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = static_cast<double>(m.positions[i]);
      seg[i] = static_cast<double>(m.segments[i]);
    }
    out.emplace_back(p + "positions", std::move(pos));
    out.emplace_back(p + "segments", std::move(seg));
    for (std::size_t l = 0; l < m.layers.size(); ++l) out.emplace_back(p + "layer" + std::to_string(l), m.layers[l]);
  }
  return out;
}

inline TrainState unpack_state(const NamedTensors& tensors, const TrainConfig& cfg) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  auto get = [&](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("state file lacks " + name);
    return *it->second;
  };
  ParameterStore params;
  for (const auto& [name, t] : tensors) {
    if (name.find('/') != std::string::npos && (name.rfind("adam_", 0) == 0 || name.rfind("optim/", 0) == 0 ||
                                                name.rfind("memory/", 0) == 0)) {
      continue;
    }
    params.add(name, t);
  }
  TrainState st{Model(std::move(params), cfg.model), {}, {}};
  st.optim.step = static_cast<std::size_t>(get("optim/step").item());
  for (const auto& [name, t] : st.model.params().entries()) {
    st.optim.m.push_back(get("adam_m/" + name));
    st.optim.v.push_back(get("adam_v/" + name));
  }
  for (std::size_t r = 0; by_name.count("memory/" + std::to_string(r) + "/doc_id"); ++r) {
    const std::string p = "memory/" + std::to_string(r) + "/";
    LayerMemory m;
    m.doc_id = static_cast<long>(get(p + "doc_id").item());
    const Tensor& pos = get(p + "positions");
    const Tensor& seg = get(p + "segments");
    for (std::size_t i = 0; i < pos.numel(); ++i) {
      m.positions.push_back(static_cast<long>(pos[i]));
      m.segments.push_back(static_cast<int>(seg[i]));
    }
    for (std::size_t l = 0; by_name.count(p + "layer" + std::to_string(l)); ++l) {
      m.layers.push_back(get(p + "layer" + std::to_string(l)));
    }
    st.memories.push_back(std::move(m));
  }
  return st;
}

inline NamedTensors model_tensors(const Model& m) { return m.params().entries(); }

inline Model load_model(const std::string& path, const ModelConfig& runtime = {}) {
  ParameterStore params;
  for (auto& [name, t] : read_checkpoint(path)) params.add(name, std::move(t));
  ModelConfig cfg = runtime;
  cfg.vocab_size = 1;  // replaced from the tensor shapes
  return Model(std::move(params), cfg);
}

struct PretrainOptions {
  Objective objective = Objective::kPlm;
  std::string out_dir = "run";
  bool resume = false;
  std::size_t stop_after = 0;  // stop (and save state) after this step; 0 = run to total_steps
  std::ostream* progress = nullptr;
  std::size_t progress_every = 100;
};

struct PretrainResult {
  std::vector<double> losses;  // loss of each step run in this invocation
  std::size_t first_step = 1;
  std::size_t last_step = 0;
  std::size_t empty_rows = 0;
};

inline std::string format_metrics_line(std::size_t step, double lr, double loss, std::optional<double> tps) {
  char buf[160];
  if (tps) {
    std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.1f\n", step, lr, loss, *tps);
  } else {
    std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\tNA\n", step, lr, loss);
  }
  return buf;
}

/// Builds the token stream (or documents) for training from raw text.
inline TrainData make_train_data(const std::string& text, const Vocab& vocab, const TrainConfig& cfg) {
  if (cfg.input == "pairs") {
    std::vector<std::vector<int>> docs;
    for (const std::string& d : split_documents(text)) docs.push_back(vocab.encode(d));
    return TrainData::from_documents(std::move(docs), cfg.model.seq_len);
  }
  return TrainData::from_stream(vocab.encode(text), cfg.batch_size, cfg.model.seq_len);
}

/// Pretraining loop. Writes the run directory and returns the step losses.
inline PretrainResult pretrain(TrainConfig cfg, const std::string& corpus_text, const PretrainOptions& opt) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(opt.out_dir);
  const fs::path dir(opt.out_dir);
  const std::string metrics_path = (dir / "metrics.tsv").string();
  const std::string state_path = (dir / "state.xlnt").string();

  Vocab vocab;
  std::optional<TrainState> st;
  if (opt.resume) {
    vocab = Vocab::load((dir / "vocab.txt").string(), cfg.tokenizer);
    cfg.model.vocab_size = vocab.size();
    st.emplace(unpack_state(read_checkpoint(state_path), cfg));
  } else {
    if (corpus_text.empty()) throw std::invalid_argument("pretrain: empty corpus");
    vocab = Vocab::build(corpus_text, cfg.vocab_size, cfg.tokenizer);
    cfg.model.vocab_size = vocab.size();
    Model model(cfg.model, cfg.seed);
    OptimState optim = OptimState::zeros_like(model.params());
    st.emplace(TrainState{std::move(model), std::move(optim), {}});
    vocab.save((dir / "vocab.txt").string());
    std::ofstream(dir / "config.txt") << format_config(cfg);
  }
  const TrainData data = make_train_data(corpus_text, vocab, cfg);

  std::ofstream metrics(metrics_path, opt.resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path);

  auto save = [&](bool with_state) {
    write_checkpoint((dir / "model.xlnt").string(), model_tensors(st->model), cfg.checkpoint_dtype);
    if (with_state) write_checkpoint(state_path, pack_state(*st), DType::kF64);
  };

  PretrainResult res;
  res.first_step = st->optim.step + 1;
  const std::size_t last = opt.stop_after ? std::min(opt.stop_after, cfg.total_steps) : cfg.total_steps;
  for (std::size_t step = res.first_step; step <= last; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const StepStats s = train_step(*st, cfg, opt.objective, data, step);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps);
    std::optional<double> tps;
    if (cfg.log_throughput) tps = static_cast<double>(s.tokens) / std::max(secs, 1e-9);
    metrics << format_metrics_line(step, lr, s.loss, tps);
    metrics.flush();
    res.losses.push_back(s.loss);
    res.empty_rows += s.empty_rows;
    res.last_step = step;
    if (opt.progress && (step % opt.progress_every == 0 || step == res.first_step)) {
      *opt.progress << objective_name(opt.objective) << " step " << step << " loss " << s.loss << '\n';
    }
    if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0) save(true);
  }
  save(true);
  if (res.empty_rows && opt.progress) {
    *opt.progress << "warning: " << res.empty_rows << " DAE rows had no masked token\n";
  }
  return res;
}

/// Held-out perplexity under the left-to-right order, with memory carried
/// across consecutive windows.
struct PerplexityResult {
  double nll = 0.0;
  std::size_t tokens = 0;
  double perplexity() const { return std::exp(nll / static_cast<double>(tokens)); }
};

inline PerplexityResult eval_perplexity(const Model& model, const std::vector<int>& stream) {
  const std::size_t seq_len = model.config().seq_len;
  PerplexityResult res;
  LayerMemory memory;
  for (const Window& w : stream_windows(stream, seq_len, seq_len)) {
    if (w.valid == 0) break;
    SequenceInput in;
    in.tokens.assign(w.tokens.begin(), w.tokens.begin() + static_cast<long>(w.valid));
    in.positions.assign(w.positions.begin(), w.positions.begin() + static_cast<long>(w.valid));
    in.segments.assign(w.valid, 0);
    Graph g;
    const BoundModel bm = model.bind(g, false);
    RowLoss rl = ar_row_loss(g, bm, model.config(), in, &memory);
    res.nll += rl.nll.value().item();
    res.tokens += rl.count;
    memory = std::move(rl.memory);
  }
  if (res.tokens == 0) throw std::invalid_argument("eval-ppl: empty evaluation text");
  return res;
}

// ---------------------------------------------------------------------------
// Finetuning on labeled segment pairs.

struct LabeledPair {
  std::vector<int> tokens;
  std::vector<int> segments;
  int label = 0;
};

inline std::vector<LabeledPair> encode_labeled(const std::vector<OverlapExample>& examples, const Vocab& vocab,
                                               std::size_t seq_len) {
  std::vector<LabeledPair> out;
  for (const auto& e : examples) {
    PackedPair p = pack_two_segments(vocab.encode(e.a), vocab.encode(e.b), seq_len);
    out.push_back(LabeledPair{std::move(p.tokens), std::move(p.segments), e.label});
  }
  return out;
}

struct FinetuneConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  double peak_lr = 1e-4;
  std::size_t warmup_steps = 50;
  std::size_t n_classes = 2;
  std::size_t eval_every = 0;
  std::uint64_t seed = 1;
  double dropout = 0.1;
  AdamConfig adam;
  double clip_norm = 1.0;
  std::size_t threads = 1;
};

inline int predict_class(const Model& model, const LabeledPair& ex) {
  Graph g;
  const BoundModel bm = model.bind(g, false);
  const Tensor logits = finetune_classify(g, bm, model.config(), ex.tokens, ex.segments).value();
  return static_cast<int>(std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin());
}

inline double accuracy(const Model& model, const std::vector<LabeledPair>& data) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty evaluation set");
  std::size_t correct = 0;
  for (const auto& ex : data) correct += predict_class(model, ex) == ex.label;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

struct FinetuneResult {
  std::vector<double> losses;
  std::vector<std::pair<std::size_t, double>> evals;  // (step, accuracy)
  double final_accuracy = 0.0;
};

/// Content-stream classification training. Rows are drawn with replacement
/// from `train` by a per-step generator.
inline FinetuneResult finetune(Model& model, const std::vector<LabeledPair>& train, const std::vector<LabeledPair>& eval,
                               FinetuneConfig cfg, std::ostream* metrics = nullptr, std::ostream* progress = nullptr) {
  if (train.empty()) throw std::invalid_argument("finetune: empty training set");
  for (const auto& ex : train) {
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= cfg.n_classes) {
      throw std::invalid_argument("finetune: label " + std::to_string(ex.label) + " out of range");
    }
  }
  model.add_classifier(cfg.n_classes, cfg.seed ^ 0xC1A55ULL);
  model.config().dropout = cfg.dropout;
  model.config().attention_dropout = cfg.dropout;
  OptimState optim = OptimState::zeros_like(model.params());
  FinetuneResult res;
  const std::size_t warm = std::min(cfg.warmup_steps, cfg.steps - 1);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    struct Row {
      double nll = 0.0;
      std::vector<Tensor> grads;
    };
    std::vector<Tensor> grads;
    for (const auto& [name, t] : model.params().entries()) grads.emplace_back(t.shape());
    double loss = 0.0;
    detail::ordered_rows<Row>(
        cfg.batch_size, cfg.threads,
        [&](std::size_t r) {
          Rng rng = Rng::derive(cfg.seed, step, r);
          const LabeledPair& ex = train[rng.below(train.size())];
          Rng drop = rng.split();
          Graph g;
          const BoundModel bm = model.bind(g, true);
          ForwardOptions opt;
          opt.dropout_rng = &drop;
          const Var logits = finetune_classify(g, bm, model.config(), ex.tokens, ex.segments, opt);
          const std::vector<int> label{ex.label};
          const Var total = sum(scale(pick(log_softmax(reshape(logits, Shape{1, cfg.n_classes})), label), -1.0));
          Row row;
          row.nll = total.value().item();
          g.backward(total);
          for (const Var& v : bm.all) row.grads.push_back(g.take_grad(v));
          return row;
        },
        [&](std::size_t, Row& row) {
          loss += row.nll;
          for (std::size_t i = 0; i < grads.size(); ++i) {
            auto dst = grads[i].data();
            auto src = row.grads[i].data();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k] / static_cast<double>(cfg.batch_size);
          }
        });
    loss /= static_cast<double>(cfg.batch_size);
    clip_global_norm(grads, cfg.clip_norm);
    const double lr = lr_schedule(step, cfg.peak_lr, warm, cfg.steps + 1);
    optimizer_step(model.params(), grads, optim, cfg.adam, lr, model.config().n_layers);
    res.losses.push_back(loss);
    if (metrics) *metrics << format_metrics_line(step, lr, loss, std::nullopt);
    if (cfg.eval_every && !eval.empty() && step % cfg.eval_every == 0) {
      const double acc = accuracy(model, eval);
      res.evals.emplace_back(step, acc);
      if (progress) *progress << "finetune step " << step << " loss " << loss << " accuracy " << acc << '\n';
    }
  }
  if (!eval.empty()) res.final_accuracy = accuracy(model, eval);
  return res;
}

}  // namespace xlnet
