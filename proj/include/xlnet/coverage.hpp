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

// Target-context dependency coverage of the BERT, XLNet and AR objectives.
// Position sets are bitmasks: bit p-1 stands for position p.

#pragma once

#include <bit>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xlnet/perm_mask.hpp"
#include "xlnet/rng.hpp"

namespace xlnet {

using PositionSet = std::uint32_t;

inline constexpr std::size_t kMaxCoverageLength = 12;

inline PositionSet position_bit(int pos) { return PositionSet{1} << (pos - 1); }

inline PositionSet make_set(std::initializer_list<int> positions) {
  PositionSet s = 0;
  for (int p : positions) s |= position_bit(p);
  return s;
}

inline std::vector<int> set_members(PositionSet s) {
  std::vector<int> out;
  for (int p = 1; s; ++p, s >>= 1)
    if (s & 1u) out.push_back(p);
  return out;
}

enum class CoverageObjective { kBert, kXlnet, kAr };

struct CoverageInstance {
  std::size_t length = 0;
  PositionSet targets = 0;
  std::optional<Permutation> order;

  PositionSet all() const { return length >= 32 ? ~PositionSet{0} : (PositionSet{1} << length) - 1; }
  PositionSet non_targets() const { return all() & ~targets; }
};

struct DependencyPair {
  int target = 0;
  PositionSet context = 0;
};

/// Visible context V_x per target x.
///   bert:  N
///   xlnet: N plus the targets placed before x in the order
///   ar:    positions left of x in the sequence
inline std::map<int, PositionSet> visible_context(CoverageObjective obj, const CoverageInstance& inst) {
  if (inst.length == 0 || inst.length > 31) throw std::invalid_argument("visible_context: length must be in 1..31");
  if ((inst.targets & ~inst.all()) != 0) throw std::invalid_argument("visible_context: target outside the sequence");
  if (obj == CoverageObjective::kXlnet) {
    if (!inst.order) throw std::invalid_argument("visible_context: xlnet needs a factorization order");
    if (inst.order->size() != inst.length) throw std::invalid_argument("visible_context: order length mismatch");
  }
  std::map<int, PositionSet> out;
  for (int x : set_members(inst.targets)) {
    PositionSet v = 0;
    switch (obj) {
      case CoverageObjective::kBert:
        v = inst.non_targets();
        break;
      case CoverageObjective::kXlnet:
        v = inst.non_targets();
        for (int y : set_members(inst.targets))
          if (inst.order->rank(y) < inst.order->rank(x)) v |= position_bit(y);
        break;
      case CoverageObjective::kAr:
        v = position_bit(x) - 1;
        break;
    }
    out[x] = v;
  }
  return out;
}

inline bool is_covered(const DependencyPair& pair, const std::map<int, PositionSet>& visible) {
  auto it = visible.find(pair.target);
  if (it == visible.end()) throw std::invalid_argument("is_covered: target has no visible-context entry");
  return (pair.context & ~it->second) == 0;
}

/// All (x, U) with x a target and U a nonempty subset of the other positions
/// of size at most `max_context` (0 = no cap).
inline std::vector<DependencyPair> pairs_of_interest(const CoverageInstance& inst, std::size_t max_context = 0) {
  if (inst.length > kMaxCoverageLength) {
    throw std::invalid_argument("pairs_of_interest: length above " + std::to_string(kMaxCoverageLength));
  }
  std::vector<DependencyPair> out;
  for (int x : set_members(inst.targets)) {
    const PositionSet others = inst.all() & ~position_bit(x);
    for (PositionSet u = others; u; u = (u - 1) & others) {
      if (max_context && static_cast<std::size_t>(std::popcount(u)) > max_context) continue;
      out.push_back(DependencyPair{x, u});
    }
  }
  return out;
}

inline std::size_t count_covered(const std::vector<DependencyPair>& pairs, const std::map<int, PositionSet>& visible) {
  std::size_t n = 0;
  for (const auto& p : pairs) n += is_covered(p, visible);
  return n;
}

struct CoverageSample {
  CoverageInstance instance;
  std::size_t pairs = 0;
  std::size_t bert = 0;
  std::size_t xlnet = 0;
  std::size_t ar = 0;
  std::size_t xlnet_only = 0;  // covered by xlnet and not by bert
  bool nested = true;          // every bert-covered pair is xlnet-covered
};

inline CoverageSample evaluate_coverage(const CoverageInstance& inst, std::size_t max_context = 0) {
  CoverageSample s{inst};
  const auto pairs = pairs_of_interest(inst, max_context);
  const auto vb = visible_context(CoverageObjective::kBert, inst);
  const auto vx = visible_context(CoverageObjective::kXlnet, inst);
  const auto va = visible_context(CoverageObjective::kAr, inst);
  s.pairs = pairs.size();
  for (const auto& p : pairs) {
    const bool b = is_covered(p, vb);
    const bool x = is_covered(p, vx);
    s.bert += b;
    s.xlnet += x;
    s.ar += is_covered(p, va);
    s.xlnet_only += x && !b;
    if (b && !x) s.nested = false;
  }
  return s;
}

struct CoverageReport {
  std::vector<CoverageSample> samples;
  double ar_expected = 0.0;  // mean pairs covered by an AR model trained along the sampled orders
  bool all_nested = true;
};

/// Samples `n_orders` instances: a uniform target set of `n_targets`
/// positions and a uniform order that places the targets last.
inline CoverageReport coverage_report(std::size_t length, std::size_t n_targets, std::size_t n_orders, Rng& rng,
                                      std::size_t max_context = 0) {
  if (length == 0 || length > kMaxCoverageLength) {
    throw std::invalid_argument("coverage_report: seq-len must be in 1.." + std::to_string(kMaxCoverageLength));
  }
  if (n_targets > length) throw std::invalid_argument("coverage_report: more targets than positions");
  CoverageReport rep;
  double ar_sum = 0.0;
  for (std::size_t i = 0; i < n_orders; ++i) {
    const Permutation perm = sample_factorization_order(length, rng);
    CoverageInstance inst{length, 0, perm};
    const TargetSelection sel{length - n_targets, {perm.order().end() - static_cast<long>(n_targets), perm.order().end()}};
    for (int p : sel.targets) inst.targets |= position_bit(p);
    CoverageSample s = evaluate_coverage(inst, max_context);
    rep.all_nested = rep.all_nested && s.nested;
    // An AR model factorizing along this order sees every earlier position.
    std::map<int, PositionSet> along;
    for (int x : set_members(inst.targets)) {
      PositionSet v = 0;
      for (std::size_t t = 1; t < static_cast<std::size_t>(perm.rank(x)); ++t) v |= position_bit(perm.at(t));
      along[x] = v;
    }
    ar_sum += static_cast<double>(count_covered(pairs_of_interest(inst, max_context), along));
    rep.samples.push_back(std::move(s));
  }
  rep.ar_expected = n_orders ? ar_sum / static_cast<double>(n_orders) : 0.0;
  return rep;
}

inline std::string format_set(PositionSet s) {
  std::string out;
  for (int p : set_members(s)) out += (out.empty() ? "" : ",") + std::to_string(p);
  return out.empty() ? "-" : out;
}

/// Tab-separated: one line per sample, then a summary line.
inline std::string format_coverage_report(const CoverageReport& rep) {
  std::ostringstream os;
  os << "sample\ttargets\torder\tpairs\tbert\txlnet\tar\txlnet_only\tnested\n";
  std::size_t bert = 0, xlnet = 0, ar = 0;
  for (std::size_t i = 0; i < rep.samples.size(); ++i) {
    const CoverageSample& s = rep.samples[i];
    os << i + 1 << '\t' << format_set(s.instance.targets) << '\t';
    const auto& order = s.instance.order->order();
    for (std::size_t k = 0; k < order.size(); ++k) os << (k ? "," : "") << order[k];
    os << '\t' << s.pairs << '\t' << s.bert << '\t' << s.xlnet << '\t' << s.ar << '\t' << s.xlnet_only << '\t'
       << (s.nested ? "yes" : "no") << '\n';
    bert += s.bert;
    xlnet += s.xlnet;
    ar += s.ar;
  }
  const double n = rep.samples.empty() ? 1.0 : static_cast<double>(rep.samples.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "summary\tsamples=%zu\tbert_mean=%.6g\txlnet_mean=%.6g\tar_mean=%.6g\tar_along_order_mean=%.6g\tnested=%s\n",
                rep.samples.size(), static_cast<double>(bert) / n, static_cast<double>(xlnet) / n,
                static_cast<double>(ar) / n, rep.ar_expected, rep.all_nested ? "yes" : "no");
  os << buf;
  return os.str();
}

}  // namespace xlnet
