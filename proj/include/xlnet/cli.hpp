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

// The `xlnet` command line. Exit codes: 0 success, 1 runtime error,
// 2 usage error. Diagnostics and the resolved configuration go to `err`.

#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xlnet/checks.hpp"
#include "xlnet/checkpoint.hpp"
#include "xlnet/corpus.hpp"
#include "xlnet/coverage.hpp"
#include "xlnet/model.hpp"
#include "xlnet/perm_mask.hpp"
#include "xlnet/trainer.hpp"

namespace xlnet::cli {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size()) throw UsageError("expected a comma-separated list of integers, got '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("empty integer list");
  return out;
}

inline Permutation parse_permutation(const std::string& s) {
  try {
    return Permutation(parse_int_list(s));
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("--perm: ") + e.what());
  }
}

inline std::string read_file_or_throw(const std::string& path) { return read_text_file(path); }

struct PretrainArgs {
  std::string objective = "plm";
  std::string config;
  std::vector<std::string> overrides;
  std::string out_dir = "run";
  std::string corpus;
  long long seed = -1;
  bool resume = false;
  std::size_t stop_after = 0;
};

struct FinetuneArgs {
  std::string checkpoint, vocab, train, eval, out_dir;
  std::string tokenizer = "char";
  std::size_t seq_len = 64;
  FinetuneConfig cfg;
};

struct EvalArgs {
  std::string checkpoint, vocab, text;
  std::string tokenizer = "char";
  std::size_t seq_len = 64;
  std::size_t mem_len = 64;
};

struct MaskArgs {
  std::string perm;
  std::size_t mem = 0;
  double k = 1.0;
};

struct CoverageArgs {
  std::size_t seq_len = 5;
  std::size_t targets = 2;
  std::size_t orders = 100;
  std::size_t max_context = 0;
  std::uint64_t seed = 1;
};

struct AttentionArgs {
  std::string checkpoint, vocab, text, perm, out_dir = "attention";
  std::string tokenizer = "char";
};

struct CheckArgs {
  std::uint64_t seed = 1;
  double tol = 1e-4;
  std::size_t samples = 10000;
};

inline void check_vocab(const Model& model, const Vocab& vocab) {
  if (model.config().vocab_size != vocab.size()) {
    throw std::runtime_error("vocabulary size " + std::to_string(vocab.size()) + " does not match checkpoint (" +
                             std::to_string(model.config().vocab_size) + ")");
  }
}

inline int cmd_pretrain(const PretrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig cfg;
  if (!a.config.empty()) cfg = load_config(a.config);
  for (const std::string& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    try {
      set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  PretrainOptions opt;
  try {
    opt.objective = parse_objective(a.objective);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  opt.out_dir = a.out_dir;
  opt.resume = a.resume;
  opt.stop_after = a.stop_after;
  opt.progress = &err;
  err << "objective = " << a.objective << '\n' << format_config(cfg);
  const std::string text = read_text_file(a.corpus);
  const PretrainResult res = pretrain(cfg, text, opt);
  if (!res.losses.empty()) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "steps\t%zu-%zu\nfirst_loss\t%.17g\nlast_loss\t%.17g\n", res.first_step,
                  res.last_step, res.losses.front(), res.losses.back());
    out << buf;
  }
  return 0;
}

inline int cmd_finetune(const FinetuneArgs& a, std::ostream& out, std::ostream& err) {
  const Vocab vocab = Vocab::load(a.vocab, parse_tokenizer_mode(a.tokenizer));
  ModelConfig runtime;
  runtime.seq_len = a.seq_len;
  runtime.mem_len = 0;
  Model model = load_model(a.checkpoint, runtime);
  check_vocab(model, vocab);
  auto load_tsv = [&](const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    return encode_labeled(read_labeled_tsv(f), vocab, a.seq_len);
  };
  const auto train = load_tsv(a.train);
  const auto eval = a.eval.empty() ? std::vector<LabeledPair>{} : load_tsv(a.eval);
  err << "seed = " << a.cfg.seed << "\nsteps = " << a.cfg.steps << "\nbatch_size = " << a.cfg.batch_size
      << "\npeak_lr = " << a.cfg.peak_lr << "\nwarmup_steps = " << a.cfg.warmup_steps
      << "\ndropout = " << a.cfg.dropout << "\nseq_len = " << a.seq_len << '\n';
  std::ofstream metrics;
  if (!a.out_dir.empty()) {
    std::filesystem::create_directories(a.out_dir);
    metrics.open(std::filesystem::path(a.out_dir) / "metrics.tsv");
  }
  const FinetuneResult res = finetune(model, train, eval, a.cfg, a.out_dir.empty() ? nullptr : &metrics, &err);
  if (!a.out_dir.empty()) {
    write_checkpoint((std::filesystem::path(a.out_dir) / "model.xlnt").string(), model_tensors(model), DType::kF32);
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "final_loss\t%.17g\n", res.losses.back());
  out << buf;
  if (!eval.empty()) {
    std::snprintf(buf, sizeof buf, "accuracy\t%.6f\n", res.final_accuracy);
    out << buf;
  }
  return 0;
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const Vocab vocab = Vocab::load(a.vocab, parse_tokenizer_mode(a.tokenizer));
  ModelConfig runtime;
  runtime.seq_len = a.seq_len;
  runtime.mem_len = a.mem_len;
  runtime.dropout = 0.0;
  runtime.attention_dropout = 0.0;
  const Model model = load_model(a.checkpoint, runtime);
  check_vocab(model, vocab);
  err << "seq_len = " << a.seq_len << "\nmem_len = " << a.mem_len << "\nseed = none (evaluation is deterministic)\n";
  const PerplexityResult r = eval_perplexity(model, vocab.encode(read_text_file(a.text)));
  char buf[160];
  std::snprintf(buf, sizeof buf, "tokens\t%zu\nnll\t%.17g\nppl\t%.17g\n", r.tokens, r.nll / static_cast<double>(r.tokens),
                r.perplexity());
  out << buf;
  return 0;
}

inline int cmd_dump_masks(const MaskArgs& a, std::ostream& out, std::ostream& err) {
  const Permutation perm = parse_permutation(a.perm);
  if (!(a.k >= 1.0)) throw UsageError("--k must be >= 1");
  err << "perm = " << a.perm << "\nmem = " << a.mem << "\nK = " << a.k << "\nseed = none (no sampling)\n";
  out << format_masks(perm, build_attention_masks(perm, select_prediction_targets(perm, a.k), a.mem));
  return 0;
}

inline int cmd_coverage(const CoverageArgs& a, std::ostream& out, std::ostream& err) {
  if (a.seq_len == 0 || a.seq_len > kMaxCoverageLength) {
    throw UsageError("--seq-len must be in 1.." + std::to_string(kMaxCoverageLength));
  }
  if (a.targets > a.seq_len) throw UsageError("--targets must not exceed --seq-len");
  err << "seq_len = " << a.seq_len << "\ntargets = " << a.targets << "\norders = " << a.orders
      << "\nmax_context = " << a.max_context << "\nseed = " << a.seed << '\n';
  Rng rng(a.seed);
  const CoverageReport rep = coverage_report(a.seq_len, a.targets, a.orders, rng, a.max_context);
  out << format_coverage_report(rep);
  return rep.all_nested ? 0 : 1;
}

inline void write_matrix(const std::string& path, const Tensor& t, std::size_t head) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  const std::size_t rows = t.dim(1), cols = t.dim(2);
  char buf[32];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.6g", t.at(head, r, c));
      f << (c ? " " : "") << buf;
    }
    f << '\n';
  }
}

inline int cmd_dump_attention(const AttentionArgs& a, std::ostream& out, std::ostream& err) {
  const Vocab vocab = Vocab::load(a.vocab, parse_tokenizer_mode(a.tokenizer));
  ModelConfig runtime;
  runtime.mem_len = 0;
  runtime.dropout = 0.0;
  runtime.attention_dropout = 0.0;
  const Model model = load_model(a.checkpoint, runtime);
  check_vocab(model, vocab);
  const SequenceInput in = SequenceInput::plain(vocab.encode(a.text));
  if (in.size() == 0) throw UsageError("--text must not be empty");
  const Permutation perm = a.perm.empty() ? Permutation::identity(in.size()) : parse_permutation(a.perm);
  if (perm.size() != in.size()) {
    throw UsageError("--perm has " + std::to_string(perm.size()) + " positions but the text has " +
                     std::to_string(in.size()) + " tokens");
  }
  err << "tokens = " << in.size() << "\nperm = " << (a.perm.empty() ? "identity" : a.perm)
      << "\nseed = none (no sampling)\n";
  const TargetSelection sel = select_prediction_targets(perm, 1.0);
  std::vector<std::size_t> rows(in.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  Graph g;
  const BoundModel bm = model.bind(g, false);
  AttentionTrace trace;
  ForwardOptions opt;
  opt.trace = &trace;
  forward_two_stream(g, bm, model.config(), in, nullptr, build_attention_masks(perm, sel, 0), rows, opt);
  std::filesystem::create_directories(a.out_dir);
  for (std::size_t l = 0; l < trace.content.size(); ++l) {
    for (std::size_t h = 0; h < model.config().n_heads; ++h) {
      for (int s = 0; s < 2; ++s) {
        const std::string name = "layer" + std::to_string(l + 1) + "_" + (s == 0 ? "content" : "query") + "_head" +
                                 std::to_string(h + 1) + ".txt";
        const std::string path = (std::filesystem::path(a.out_dir) / name).string();
        write_matrix(path, s == 0 ? trace.content[l] : trace.query[l], h);
        out << path << '\n';
      }
    }
  }
  return 0;
}

inline int cmd_grad_check(const CheckArgs& a, std::ostream& out, std::ostream& err) {
  err << "seed = " << a.seed << "\ntol = " << a.tol << '\n';
  bool ok = true;
  char buf[160];
  for (const GradCheckResult& r : run_gradient_suite(a.seed, a.tol)) {
    std::snprintf(buf, sizeof buf, "%s\t%.3e\t%s\n", r.name.c_str(), r.max_error, r.pass ? "PASS" : "FAIL");
    out << buf;
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

inline int cmd_oracle_check(const CheckArgs& a, std::ostream& out, std::ostream& err) {
  err << "seed = " << a.seed << "\nsamples = " << a.samples << '\n';
  const PermutationOracleReport p = permutation_oracle(a.samples, a.seed);
  const MemoryOracleReport m = memory_oracle(a.seed);
  char buf[256];
  std::snprintf(buf, sizeof buf, "permutation\texhaustive=%.12g\tmonte_carlo=%.12g\tstderr=%.3g\tsamples=%zu\t%s\n",
                p.exhaustive_mean, p.mc_mean, p.std_error, p.samples, p.pass ? "PASS" : "FAIL");
  out << buf;
  std::snprintf(buf, sizeof buf, "memory\tcontent_diff=%.3e\tquery_diff=%.3e\tsegment1_grad=%.3e\t%s\n",
                m.max_content_diff, m.max_query_diff, m.max_segment1_grad, m.pass ? "PASS" : "FAIL");
  out << buf;
  return p.pass && m.pass ? 0 : 1;
}

/// Parses `args` (without the program name) and runs one subcommand.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Permutation language modeling with two-stream attention", "xlnet"};
  app.require_subcommand(1);

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Pretrain with the plm, dae or ar objective");
  p->add_option("corpus", pre.corpus, "UTF-8 text corpus")->required();
  p->add_option("--objective", pre.objective, "plm | dae | ar")->check(CLI::IsMember({"plm", "dae", "ar"}));
  p->add_option("--config", pre.config, "config file of key = value lines");
  p->add_option("--set", pre.overrides, "override one config key (key=value), repeatable");
  p->add_option("--out", pre.out_dir, "run directory for metrics.tsv, model.xlnt, state.xlnt, vocab.txt");
  p->add_option("--seed", pre.seed, "overrides the config seed");
  p->add_flag("--resume", pre.resume, "continue from <out>/state.xlnt");
  p->add_option("--stop-after", pre.stop_after, "stop after this step and save the resumable state");

  FinetuneArgs ft;
  ft.out_dir = "";
  auto* f = app.add_subcommand("finetune", "Train a classifier on the content stream from a pretrained checkpoint");
  f->add_option("--checkpoint", ft.checkpoint, "pretrained model.xlnt")->required();
  f->add_option("--vocab", ft.vocab, "vocab.txt of the pretraining run")->required();
  f->add_option("--train", ft.train, "labeled TSV: label<TAB>A<TAB>B")->required();
  f->add_option("--eval", ft.eval, "held-out labeled TSV");
  f->add_option("--out", ft.out_dir, "directory for metrics.tsv and the finetuned model.xlnt");
  f->add_option("--tokenizer", ft.tokenizer, "char | word")->check(CLI::IsMember({"char", "word"}));
  f->add_option("--seq-len", ft.seq_len, "maximum packed length");
  f->add_option("--steps", ft.cfg.steps, "optimizer steps");
  f->add_option("--batch", ft.cfg.batch_size, "examples per step");
  f->add_option("--lr", ft.cfg.peak_lr, "peak learning rate");
  f->add_option("--warmup", ft.cfg.warmup_steps, "warmup steps");
  f->add_option("--dropout", ft.cfg.dropout, "hidden and attention dropout");
  f->add_option("--layerwise-alpha", ft.cfg.adam.layerwise_alpha, "layer-wise learning-rate decay");
  f->add_option("--eval-every", ft.cfg.eval_every, "report held-out accuracy every N steps");
  f->add_option("--seed", ft.cfg.seed, "random seed");
  f->add_option("--threads", ft.cfg.threads, "worker threads for batch rows");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval-ppl", "Held-out perplexity under the left-to-right order");
  e->add_option("text", ev.text, "UTF-8 text file")->required();
  e->add_option("--checkpoint", ev.checkpoint, "model.xlnt")->required();
  e->add_option("--vocab", ev.vocab, "vocab.txt")->required();
  e->add_option("--tokenizer", ev.tokenizer, "char | word")->check(CLI::IsMember({"char", "word"}));
  e->add_option("--seq-len", ev.seq_len, "window length");
  e->add_option("--mem-len", ev.mem_len, "memory length");

  MaskArgs mk;
  auto* d = app.add_subcommand("dump-masks", "Print the content and query attention masks of an order");
  d->add_option("--perm", mk.perm, "factorization order, e.g. 3,2,4,1")->required();
  d->add_option("--mem", mk.mem, "memory length");
  d->add_option("--k", mk.k, "partial prediction constant (1 = every position is a target)");

  CoverageArgs cv;
  auto* c = app.add_subcommand("coverage", "Dependency coverage of bert, xlnet and ar objectives");
  c->add_option("--seq-len", cv.seq_len, "sequence length (at most 12)");
  c->add_option("--targets", cv.targets, "number of target positions");
  c->add_option("--orders", cv.orders, "sampled instances");
  c->add_option("--max-context", cv.max_context, "largest context set size (0 = no cap)");
  c->add_option("--seed", cv.seed, "random seed");

  AttentionArgs at;
  auto* a = app.add_subcommand("dump-attention", "Write per-head attention probabilities to text files");
  a->add_option("--checkpoint", at.checkpoint, "model.xlnt")->required();
  a->add_option("--vocab", at.vocab, "vocab.txt")->required();
  a->add_option("--text", at.text, "input text")->required();
  a->add_option("--perm", at.perm, "factorization order (default: left to right)");
  a->add_option("--tokenizer", at.tokenizer, "char | word")->check(CLI::IsMember({"char", "word"}));
  a->add_option("--out", at.out_dir, "output directory");

  CheckArgs gc;
  auto* g = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  g->add_option("--seed", gc.seed, "random seed");
  g->add_option("--tol", gc.tol, "maximum relative error");

  CheckArgs oc;
  auto* o = app.add_subcommand("oracle-check", "Exhaustive-permutation and single-pass memory oracles");
  o->add_option("--seed", oc.seed, "random seed");
  o->add_option("--samples", oc.samples, "Monte-Carlo samples");

  std::vector<const char*> argv{"xlnet"};
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return 2;
  }

  try {
    if (p->parsed()) return cmd_pretrain(pre, out, err);
    if (f->parsed()) return cmd_finetune(ft, out, err);
    if (e->parsed()) return cmd_eval(ev, out, err);
    if (d->parsed()) return cmd_dump_masks(mk, out, err);
    if (c->parsed()) return cmd_coverage(cv, out, err);
    if (a->parsed()) return cmd_dump_attention(at, out, err);
    if (g->parsed()) return cmd_grad_check(gc, out, err);
    if (o->parsed()) return cmd_oracle_check(oc, out, err);
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << '\n';
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace xlnet::cli
