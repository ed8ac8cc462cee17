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


// Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
// if any fails. Usage: acceptance [work_dir [criterion ids...]]

#include <bit>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xlnet/xlnet.hpp"

namespace fs = std::filesystem;
using namespace xlnet;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int shell(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

/// Step losses from a metrics.tsv, in step order.
std::vector<double> metric_losses(const fs::path& path) {
  std::ifstream f(path);
  std::vector<double> out;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ls(line);
    std::size_t step;
    double lr, loss;
    if (ls >> step >> lr >> loss) out.push_back(loss);
  }
  return out;
}

double tail_mean(const std::vector<double>& v, std::size_t n) {
  n = std::min(n, v.size());
  return std::accumulate(v.end() - static_cast<long>(n), v.end(), 0.0) / static_cast<double>(n);
}

std::string value_after(const std::string& text, const std::string& key) {
  const auto at = text.find(key + "\t");
  if (at == std::string::npos) return "";
  const auto start = at + key.size() + 1;
  return text.substr(start, text.find('\n', start) - start);
}

const std::string kCli = XLNET_CLI_PATH;
const std::string kGendata = XLNET_GENDATA_PATH;

// ---------------------------------------------------------------------------

Verdict gradient_suite() {
  double worst = 0.0;
  std::string failed;
  for (const GradCheckResult& r : run_gradient_suite(1, 1e-4)) {
    worst = std::max(worst, r.max_error);
    if (!r.pass) failed += " " + r.name;
  }
  return {failed.empty(), fmt("max relative error %.2e%s", worst, failed.empty() ? "" : (" failed:" + failed).c_str())};
}

Verdict leakage() {
  Rng rng(2);
  std::size_t nonzero_content = 0, checks = 0;
  bool query_exact = true;
  for (int draw = 0; draw < 100; ++draw) {
    ModelConfig cfg = tiny_config(12, 0);
    const Model model(cfg, 100 + static_cast<std::uint64_t>(draw));
    const std::size_t n = 2 + rng.below(9);
    const SequenceInput in = SequenceInput::plain(random_tokens(n, cfg.vocab_size, rng));
    const Permutation perm = sample_factorization_order(n, rng);
    const TargetSelection sel = select_prediction_targets(perm, 1.0 + rng.uniform() * 3.0);
    const AttentionMaskPair masks = build_attention_masks(perm, sel, 0);
    std::vector<std::size_t> rows;
    for (int p : sel.targets) rows.push_back(static_cast<std::size_t>(p - 1));

    const Tensor& table = model.params().at("word_embedding");
    Tensor base(Shape{n, cfg.d_model});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < cfg.d_model; ++c) base.at(i, c) = table.at(static_cast<std::size_t>(in.tokens[i]), c);
    auto run = [&](const Tensor& emb) {
      Graph g;
      const BoundModel bm = model.bind(g, false);
      ForwardOptions opt;
      opt.input_embeddings = g.constant(emb);
      const ForwardResult fr = forward_two_stream(g, bm, cfg, in, nullptr, masks, rows, opt);
      std::pair<std::vector<Tensor>, std::vector<Tensor>> out;
      for (const Var& h : fr.content) out.first.push_back(h.value());
      for (const Var& q : fr.query) out.second.push_back(q.value());
      return out;
    };
    const auto ref = run(base);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      Tensor emb = base;
      for (std::size_t c = 0; c < cfg.d_model; ++c) emb.at(rows[k], c) += rng.normal();
      const auto got = run(emb);
      for (std::size_t m = 0; m < got.second.size(); ++m) {
        for (std::size_t c = 0; c < cfg.d_model; ++c) {
          if (std::bit_cast<std::uint64_t>(got.second[m].at(k, c)) !=
              std::bit_cast<std::uint64_t>(ref.second[m].at(k, c))) {
            query_exact = false;
          }
        }
      }
      bool moved = false;
      for (std::size_t c = 0; c < cfg.d_model; ++c) moved |= got.first.back().at(rows[k], c) != ref.first.back().at(rows[k], c);
      nonzero_content += moved;
      ++checks;
    }
  }
  return {query_exact && nonzero_content == checks,
          fmt("%zu target perturbations, query stream %s, content changed in %zu", checks,
              query_exact ? "bitwise unchanged" : "CHANGED", nonzero_content)};
}

Verdict causal_reduction() {
  Rng rng(3);
  double worst = 0.0;
  for (int b = 0; b < 20; ++b) {
    const ModelConfig cfg = tiny_config(10 + rng.below(20), 0);
    const Model model(cfg, 40 + static_cast<std::uint64_t>(b));
    std::vector<TrainingInstance> plm;
    std::vector<SequenceInput> ar;
    for (int r = 0; r < 4; ++r) {
      const std::size_t n = 1 + rng.below(12);
      SequenceInput in = SequenceInput::plain(random_tokens(n, cfg.vocab_size, rng));
      const Permutation id = Permutation::identity(n);
      plm.push_back({in, PlannedOrder{id, select_prediction_targets(id, 1.0)}});
      ar.push_back(std::move(in));
    }
    const double a = plm_loss(model, plm).mean();
    const double c = ar_loss(model, ar).mean();
    worst = std::max(worst, std::abs(a - c));
  }
  return {worst <= 1e-10, fmt("max |plm - ar| over 20 batches = %.3e", worst)};
}

Verdict permutation_oracle_check() {
  const PermutationOracleReport r = permutation_oracle(10000, 4);
  return {r.pass, fmt("exhaustive %.10f, monte carlo %.10f, %.2f standard errors", r.exhaustive_mean, r.mc_mean,
                      std::abs(r.mc_mean - r.exhaustive_mean) / r.std_error)};
}

Verdict memory_oracle_check() {
  const MemoryOracleReport r = memory_oracle(5);
  const bool ok = r.max_content_diff <= 1e-8 && r.max_query_diff <= 1e-8 && r.max_segment1_grad == 0.0 && r.pass;
  return {ok, fmt("content diff %.2e, query diff %.2e, segment-1 grad %.1e", r.max_content_diff, r.max_query_diff,
                  r.max_segment1_grad)};
}

Verdict naive_head() {
  // Orders 1,2,3,4 and 1,2,4,3 share the prefix (1,2); step 3 predicts
  // position 3 in one and position 4 in the other.
  const ModelConfig cfg = tiny_config(12, 0);
  double min_tv = 1e300;
  bool identical = true;
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Model model(cfg, 60 + static_cast<std::uint64_t>(trial));
    std::vector<int> tok = random_tokens(4, cfg.vocab_size, rng);
    if (tok[1] == tok[0]) tok[1] = 5 + (tok[0] - 4) % 7;
    const SequenceInput in = SequenceInput::plain(tok);
    const Permutation a({1, 2, 3, 4}), b({1, 2, 4, 3});
    const auto na = naive_parameterization_distribution(model, in, a, 3);
    const auto nb = naive_parameterization_distribution(model, in, b, 3);
    for (std::size_t v = 0; v < na.size(); ++v) identical &= std::bit_cast<std::uint64_t>(na[v]) == std::bit_cast<std::uint64_t>(nb[v]);
    const auto ga = target_aware_distribution(model, in, a, 3);
    const auto gb = target_aware_distribution(model, in, b, 3);
    double tv = 0.0;
    for (std::size_t v = 0; v < ga.size(); ++v) tv += 0.5 * std::abs(ga[v] - gb[v]);
    min_tv = std::min(min_tv, tv);
  }
  return {identical && min_tv > 1e-6,
          fmt("h-head %s over 10 models, g-head min total variation %.3e", identical ? "bitwise identical" : "DIFFERS",
              min_tv)};
}

std::string derived_masks(const std::vector<int>& order) {
  const std::size_t n = order.size();
  std::vector<std::size_t> rank(n + 1);
  for (std::size_t t = 0; t < n; ++t) rank[static_cast<std::size_t>(order[t])] = t;
  std::string s = "perm=";
  for (std::size_t t = 0; t < n; ++t) s += (t ? "," : "") + std::to_string(order[t]);
  s += " mem=0\n";
  for (int query = 0; query < 2; ++query) {
    s += query ? "query\n" : "content\n";
    for (std::size_t i = 1; i <= n; ++i) {
      for (std::size_t j = 1; j <= n; ++j) {
        const bool see = query ? rank[j] < rank[i] : rank[j] <= rank[i];
        s += (j > 1 ? " " : "") + std::string(see ? "1" : "0");
      }
      s += '\n';
    }
  }
  return s;
}

Verdict mask_fidelity(const fs::path& work) {
  const std::string out = (work / "masks.txt").string();
  bool ok = true;
  std::string detail;
  for (const std::vector<int>& order : {std::vector<int>{3, 2, 4, 1}, std::vector<int>{1, 2, 3, 4, 5}}) {
    std::string arg;
    for (int p : order) arg += (arg.empty() ? "" : ",") + std::to_string(p);
    const int rc = shell(kCli + " dump-masks --perm " + arg + " --mem 0 > " + out + " 2>/dev/null");
    const bool same = rc == 0 && slurp(out) == derived_masks(order);
    ok &= same;
    detail += (detail.empty() ? "" : ", ") + arg + (same ? " exact" : " MISMATCH");
  }
  // Identity order: causal and strictly causal.
  const std::string id = derived_masks({1, 2, 3, 4, 5});
  ok &= id.find("content\n1 0 0 0 0\n1 1 0 0 0\n") != std::string::npos &&
        id.find("query\n0 0 0 0 0\n1 0 0 0 0\n") != std::string::npos;
  return {ok, detail};
}

Verdict partial_ratio() {
  Rng rng(8);
  const std::size_t n = 64;
  double partial = 0.0, span = 0.0;
  const std::vector<int> tokens(n, Vocab::kNumReserved);
  for (int s = 0; s < 10000; ++s) {
    partial += static_cast<double>(select_prediction_targets(sample_factorization_order(n, rng), 6.0).targets.size()) / n;
    span += static_cast<double>(plan_span_prediction(tokens, 6.0, rng).targets.targets.size()) / n;
  }
  partial /= 10000.0;
  span /= 10000.0;
  const double want = 1.0 / 6.0;
  return {std::abs(partial - want) <= 0.01 && std::abs(span - want) <= 0.01,
          fmt("mean target fraction %.5f (uniform suffix), %.5f (span), target %.5f", partial, span, want)};
}

// Counts covered (target, context) pairs by enumerating contexts as explicit
// sets, straight from the objective definitions.
std::pair<std::size_t, std::size_t> subset_oracle(int n, const std::set<int>& targets, const std::vector<int>& order) {
  std::size_t bert = 0, xl = 0;
  for (int x : targets) {
    std::vector<int> others;
    for (int p = 1; p <= n; ++p)
      if (p != x) others.push_back(p);
    const auto rx = std::find(order.begin(), order.end(), x) - order.begin();
    for (unsigned mask = 1; mask < (1u << others.size()); ++mask) {
      std::set<int> u;
      for (std::size_t k = 0; k < others.size(); ++k)
        if (mask >> k & 1u) u.insert(others[k]);
      bool b = true, xlnet = true;
      for (int y : u) {
        const bool y_target = targets.count(y) > 0;
        b &= !y_target;
        xlnet &= !y_target || std::find(order.begin(), order.end(), y) - order.begin() < rx;
      }
      bert += b;
      xl += xlnet;
    }
  }
  return {bert, xl};
}

Verdict coverage_theorem() {
  Rng rng(9);
  std::size_t violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.below(8);
    CoverageInstance inst{n, 0, sample_factorization_order(n, rng)};
    for (std::size_t p = 1; p <= n; ++p)
      if (rng.bernoulli(0.5)) inst.targets |= position_bit(static_cast<int>(p));
    violations += !evaluate_coverage(inst).nested;
  }
  const CoverageInstance ny{5, make_set({1, 2}), Permutation({3, 4, 5, 1, 2})};
  const CoverageSample s = evaluate_coverage(ny);
  const auto vb = visible_context(CoverageObjective::kBert, ny);
  const auto vx = visible_context(CoverageObjective::kXlnet, ny);
  bool extras_are_york_new = true;
  for (const auto& p : pairs_of_interest(ny)) {
    if (is_covered(p, vx) && !is_covered(p, vb)) extras_are_york_new &= p.target == 2 && (p.context & position_bit(1));
  }
  const auto [ob, ox] = subset_oracle(5, {1, 2}, {3, 4, 5, 1, 2});
  const bool ok = violations == 0 && extras_are_york_new && s.xlnet_only == 8 && s.bert == 14 && s.xlnet == 22 &&
                  ob == 14 && ox == 22;
  return {ok, fmt("%zu nesting violations in 1000 instances; New/York bert %zu, xlnet %zu (oracle %zu, %zu), %zu extra "
                  "(York, U with New) pairs",
                  violations, s.bert, s.xlnet, ob, ox, s.xlnet_only)};
}

// ---------------------------------------------------------------------------

constexpr std::size_t kPlmSteps = 2000;
constexpr std::size_t kBaselineSteps = 300;

std::string pretrain_cmd(const fs::path& data, const std::string& objective, std::size_t steps, const fs::path& out) {
  return kCli + " pretrain " + (data / "corpus.txt").string() + " --objective " + objective +
         " --set total_steps=" + std::to_string(steps) + " --set init_std=0.1 --set peak_lr=0.001 --set warmup_steps=" +
         std::to_string(steps / 10) + " --seed 1 --out " + out.string() + " > " + out.string() + ".out 2> " +
         out.string() + ".log";
}

Verdict toy_pretraining(const fs::path& work) {
  const fs::path data = work / "data";
  if (shell(kGendata + " --out " + data.string() + " --corpus-bytes 1100000 --seed 1 2>/dev/null") != 0) {
    return {false, "data generation failed"};
  }
  const auto bytes = fs::file_size(data / "corpus.txt");
  std::string detail = fmt("corpus %zu bytes;", static_cast<std::size_t>(bytes));
  bool ok = bytes >= (1u << 20);
  struct Run {
    const char* objective;
    std::size_t steps;
    double max_ratio;  // final / initial must stay below this
  };
  for (const Run& r : {Run{"plm", kPlmSteps, 0.7}, Run{"dae", kBaselineSteps, 1.0}, Run{"ar", kBaselineSteps, 1.0}}) {
    const fs::path out = work / (std::string("pretrain_") + r.objective);
    if (shell(pretrain_cmd(data, r.objective, r.steps, out)) != 0) {
      return {false, std::string(r.objective) + " pretraining failed, see " + out.string() + ".log"};
    }
    const std::vector<double> losses = metric_losses(out / "metrics.tsv");
    if (losses.size() != r.steps) return {false, std::string(r.objective) + ": incomplete metrics"};
    const double initial = losses.front(), final_loss = tail_mean(losses, 100);
    ok &= final_loss < r.max_ratio * initial;
    detail += fmt(" %s %zu steps %.4f -> %.4f (x%.3f);", r.objective, r.steps, initial, final_loss, final_loss / initial);
  }
  detail.pop_back();
  return {ok, detail};
}

constexpr const char* kFinetuneArgs =
    " --seq-len 16 --steps 1000 --batch 64 --lr 1e-3 --warmup 100 --dropout 0 --seed 1";

Verdict finetune_demo(const fs::path& work) {
  const fs::path data = work / "data", run = work / "pretrain_plm", out = work / "finetune";
  if (!fs::exists(run / "model.xlnt")) return {false, "no pretrained checkpoint"};
  const std::string cmd = kCli + " finetune --checkpoint " + (run / "model.xlnt").string() + " --vocab " +
                          (run / "vocab.txt").string() + " --train " + (data / "overlap_train.tsv").string() +
                          " --eval " + (data / "overlap_eval.tsv").string() + kFinetuneArgs + " --out " +
                          out.string() + " > " + out.string() + ".out 2> " + out.string() + ".log";
  if (shell(cmd) != 0) return {false, "finetune failed, see " + out.string() + ".log"};
  const std::string acc = value_after(slurp(out.string() + ".out"), "accuracy");
  const double a = acc.empty() ? 0.0 : std::stod(acc);
  return {a >= 0.95, fmt("held-out accuracy %.4f after 1000 steps (content stream only)", a)};
}

Verdict determinism(const fs::path& work) {
  const fs::path data = work / "det_data";
  if (shell(kGendata + " --out " + data.string() + " --corpus-bytes 30000 --train 64 --eval 32 --seed 3 2>/dev/null")) {
    return {false, "data generation failed"};
  }
  const std::string common = kCli + " pretrain " + (data / "corpus.txt").string() +
                             " --set n_layers=2 --set d_model=32 --set n_heads=2 --set head_dim=16 --set ffn_dim=64"
                             " --set seq_len=32 --set mem_len=16 --set batch_size=4 --set total_steps=20"
                             " --set warmup_steps=2 --seed 7";
  auto run = [&](const std::string& name, const std::string& extra) {
    const fs::path out = work / name;
    return shell(common + extra + " --out " + out.string() + " > /dev/null 2>&1") == 0;
  };
  if (!(run("det_a", "") && run("det_b", "") && run("det_c", " --stop-after 10") && run("det_c", " --resume"))) {
    return {false, "pretrain command failed"};
  }
  auto same = [&](const std::string& x, const std::string& y, const char* file) {
    const std::string a = slurp(work / x / file);
    return !a.empty() && a == slurp(work / y / file);
  };
  const bool repeat = same("det_a", "det_b", "metrics.tsv") && same("det_a", "det_b", "model.xlnt") &&
                      same("det_a", "det_b", "state.xlnt");
  const bool resume = same("det_a", "det_c", "metrics.tsv") && same("det_a", "det_c", "model.xlnt") &&
                      same("det_a", "det_c", "state.xlnt");
  const std::string ft = kCli + " finetune --checkpoint " + (work / "det_a" / "model.xlnt").string() + " --vocab " +
                         (work / "det_a" / "vocab.txt").string() + " --train " + (data / "overlap_train.tsv").string() +
                         " --seq-len 16 --steps 5 --batch 4 --seed 2 --out ";
  const bool ft_ok = shell(ft + (work / "det_ft1").string() + " > /dev/null 2>&1") == 0 &&
                     shell(ft + (work / "det_ft2").string() + " > /dev/null 2>&1") == 0;
  const bool ft_same = ft_ok && same("det_ft1", "det_ft2", "metrics.tsv") && same("det_ft1", "det_ft2", "model.xlnt");
  return {repeat && resume && ft_same,
          fmt("pretrain repeat %s, resume after step 10 %s, finetune repeat %s", repeat ? "byte-identical" : "DIFFERS",
              resume ? "byte-identical" : "DIFFERS", ft_same ? "byte-identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  fs::remove_all(work);
  fs::create_directories(work);

  struct Criterion {
    int id;
    const char* name;
    double seconds;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", 60, gradient_suite},
      {2, "leakage invariant", 30, leakage},
      {3, "causal reduction", 10, causal_reduction},
      {4, "exhaustive permutation oracle", 300, permutation_oracle_check},
      {5, "memory oracle", 30, memory_oracle_check},
      {6, "naive parameterization failure", 10, naive_head},
      {7, "mask fidelity", 1, [&] { return mask_fidelity(work); }},
      {8, "partial prediction ratio", 10, partial_ratio},
      {9, "coverage theorem", 30, coverage_theorem},
      {10, "toy pretraining", 1800, [&] { return toy_pretraining(work); }},
      {11, "finetune demo", 600, [&] { return finetune_demo(work); }},
      {12, "determinism", 600, [&] { return determinism(work); }},
  };
  std::set<int> only;
  for (int i = 2; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0, ran = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.seconds;
    const bool pass = v.pass && in_time;
    failures += !pass;
    std::printf("criterion %2d %-32s %s  %s [%.1f s of %.0f s%s]\n", c.id, c.name, pass ? "PASS" : "FAIL",
                v.detail.c_str(), secs, c.seconds, in_time ? "" : ", TOO SLOW");
    std::fflush(stdout);
  }
  std::printf("%d of %d criteria passed\n", ran - failures, ran);
  return failures ? 1 : 0;
}
