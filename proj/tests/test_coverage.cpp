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


#include <gtest/gtest.h>

#include <set>

#include "xlnet/coverage.hpp"

namespace xlnet {
namespace {

// New York is a city: positions 1..5, targets {New, York}.
CoverageInstance new_york() { return CoverageInstance{5, make_set({1, 2}), Permutation({3, 4, 5, 1, 2})}; }

TEST(VisibleContext, NewYorkExample) {
  const auto bert = visible_context(CoverageObjective::kBert, new_york());
  const auto xlnet = visible_context(CoverageObjective::kXlnet, new_york());
  EXPECT_EQ(bert.at(2), make_set({3, 4, 5}));
  EXPECT_EQ(xlnet.at(2), make_set({1, 3, 4, 5}));
  EXPECT_EQ(bert.at(1), make_set({3, 4, 5}));
  EXPECT_EQ(xlnet.at(1), make_set({3, 4, 5}));
}

TEST(VisibleContext, ForwardArOnlyCoversYorkGivenNew) {
  const auto ar = visible_context(CoverageObjective::kAr, new_york());
  EXPECT_EQ(ar.at(2), make_set({1}));
  EXPECT_EQ(ar.at(1), PositionSet{0});
  EXPECT_TRUE(is_covered({2, make_set({1})}, ar));
  EXPECT_FALSE(is_covered({1, make_set({2})}, ar));
}

TEST(VisibleContext, EmptyTargetsAndErrors) {
  EXPECT_TRUE(visible_context(CoverageObjective::kBert, CoverageInstance{4, 0, std::nullopt}).empty());
  EXPECT_THROW(visible_context(CoverageObjective::kXlnet, CoverageInstance{4, make_set({1}), std::nullopt}),
               std::invalid_argument);
  EXPECT_THROW(visible_context(CoverageObjective::kBert, CoverageInstance{3, make_set({4}), std::nullopt}),
               std::invalid_argument);
}

TEST(IsCovered, Cases) {
  const auto bert = visible_context(CoverageObjective::kBert, new_york());
  const auto xlnet = visible_context(CoverageObjective::kXlnet, new_york());
  const DependencyPair in_n{2, make_set({3, 5})};
  EXPECT_TRUE(is_covered(in_n, bert));
  EXPECT_TRUE(is_covered(in_n, xlnet));
  const DependencyPair with_new{2, make_set({1, 4})};
  EXPECT_FALSE(is_covered(with_new, bert));
  EXPECT_TRUE(is_covered(with_new, xlnet));
  const DependencyPair with_york{1, make_set({2})};
  EXPECT_FALSE(is_covered(with_york, bert));
  EXPECT_FALSE(is_covered(with_york, xlnet));
  EXPECT_THROW(is_covered({3, make_set({1})}, bert), std::invalid_argument);
}

// Independent count: enumerate contexts as std::sets and test inclusion
// straight from the objective definitions.
struct OracleCounts {
  std::size_t bert = 0, xlnet = 0;
};

OracleCounts brute_force(std::size_t n, const std::set<int>& targets, const std::vector<int>& order) {
  OracleCounts c;
  std::set<int> non_targets;
  for (int p = 1; p <= static_cast<int>(n); ++p)
    if (!targets.count(p)) non_targets.insert(p);
  for (int x : targets) {
    std::vector<int> others;
    for (int p = 1; p <= static_cast<int>(n); ++p)
      if (p != x) others.push_back(p);
    std::set<int> xl = non_targets;
    const auto rank_x = std::find(order.begin(), order.end(), x) - order.begin();
    for (int y : targets)
      if (std::find(order.begin(), order.end(), y) - order.begin() < rank_x) xl.insert(y);
    for (std::size_t mask = 1; mask < (std::size_t{1} << others.size()); ++mask) {
      bool in_bert = true, in_xlnet = true;
      for (std::size_t k = 0; k < others.size(); ++k) {
        if (!(mask >> k & 1u)) continue;
        in_bert = in_bert && non_targets.count(others[k]);
        in_xlnet = in_xlnet && xl.count(others[k]);
      }
      c.bert += in_bert;
      c.xlnet += in_xlnet;
    }
  }
  return c;
}

TEST(CoverageCount, NewYorkFourteenVersusTwentyTwo) {
  const CoverageSample s = evaluate_coverage(new_york());
  const OracleCounts oracle = brute_force(5, {1, 2}, {3, 4, 5, 1, 2});
  EXPECT_EQ(oracle.bert, 14u);
  EXPECT_EQ(oracle.xlnet, 22u);
  EXPECT_EQ(s.bert, oracle.bert);
  EXPECT_EQ(s.xlnet, oracle.xlnet);
  EXPECT_EQ(s.pairs, 30u);
  EXPECT_EQ(s.xlnet_only, 8u);
  // The extra pairs all belong to York and contain New.
  const auto bert = visible_context(CoverageObjective::kBert, new_york());
  const auto xlnet = visible_context(CoverageObjective::kXlnet, new_york());
  for (const auto& p : pairs_of_interest(new_york())) {
    if (is_covered(p, xlnet) && !is_covered(p, bert)) {
      EXPECT_EQ(p.target, 2);
      EXPECT_TRUE(p.context & position_bit(1));
    }
  }
}

TEST(CoverageCount, RandomInstancesAgreeWithOracleAndNest) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.below(8);
    const Permutation perm = sample_factorization_order(n, rng);
    CoverageInstance inst{n, 0, perm};
    std::set<int> targets;
    for (int p = 1; p <= static_cast<int>(n); ++p) {
      if (rng.bernoulli(0.4)) {
        inst.targets |= position_bit(p);
        targets.insert(p);
      }
    }
    const CoverageSample s = evaluate_coverage(inst);
    EXPECT_TRUE(s.nested);
    EXPECT_LE(s.bert, s.xlnet);
    if (i < 200) {
      const OracleCounts o = brute_force(n, targets, perm.order());
      EXPECT_EQ(s.bert, o.bert);
      EXPECT_EQ(s.xlnet, o.xlnet);
    }
    const auto vb = visible_context(CoverageObjective::kBert, inst);
    const auto vx = visible_context(CoverageObjective::kXlnet, inst);
    for (const auto& [x, v] : vb) EXPECT_EQ(v & ~vx.at(x), PositionSet{0});
  }
}

TEST(CoverageCount, IdentityOrderOverAllPositionsIsAr) {
  for (std::size_t n = 1; n <= 7; ++n) {
    CoverageInstance inst{n, (PositionSet{1} << n) - 1, Permutation::identity(n)};
    EXPECT_EQ(visible_context(CoverageObjective::kXlnet, inst), visible_context(CoverageObjective::kAr, inst));
  }
}

TEST(CoverageCount, BertIgnoresTheOrder) {
  Rng rng(4);
  CoverageInstance a{6, make_set({2, 5}), sample_factorization_order(6, rng)};
  CoverageInstance b = a;
  b.order = sample_factorization_order(6, rng);
  EXPECT_EQ(visible_context(CoverageObjective::kBert, a), visible_context(CoverageObjective::kBert, b));
}

TEST(CoverageCount, ArCoversSingletonsOnlyFromTheLeft) {
  const CoverageInstance inst{6, (PositionSet{1} << 6) - 1, std::nullopt};
  const auto ar = visible_context(CoverageObjective::kAr, inst);
  for (int x = 1; x <= 6; ++x)
    for (int y = 1; y <= 6; ++y) {
      if (x != y) {
        EXPECT_EQ(is_covered({x, position_bit(y)}, ar), y < x);
      }
    }
}

TEST(CoverageCount, ContextSizeCap) {
  const auto pairs = pairs_of_interest(new_york(), 1);
  EXPECT_EQ(pairs.size(), 8u);
  for (const auto& p : pairs) EXPECT_EQ(std::popcount(p.context), 1);
  EXPECT_THROW(pairs_of_interest(CoverageInstance{13, 1, std::nullopt}), std::invalid_argument);
}

TEST(CoverageReport, NestedEverywhereAndFormatted) {
  Rng rng(5);
  const CoverageReport rep = coverage_report(8, 3, 50, rng);
  EXPECT_TRUE(rep.all_nested);
  ASSERT_EQ(rep.samples.size(), 50u);
  for (const auto& s : rep.samples) {
    EXPECT_EQ(std::popcount(s.instance.targets), 3);
    // Targets are the last three positions of the order.
    const auto& order = s.instance.order->order();
    for (std::size_t k = 5; k < 8; ++k) EXPECT_TRUE(s.instance.targets & position_bit(order[k]));
  }
  const std::string text = format_coverage_report(rep);
  EXPECT_EQ(text.rfind("sample\ttargets\torder\tpairs\tbert\txlnet\tar\txlnet_only\tnested\n", 0), 0u);
  EXPECT_NE(text.find("nested=yes"), std::string::npos);
  EXPECT_GT(rep.ar_expected, 0.0);
  EXPECT_THROW(coverage_report(13, 3, 1, rng), std::invalid_argument);
  EXPECT_THROW(coverage_report(5, 6, 1, rng), std::invalid_argument);
}

}  // namespace
}  // namespace xlnet
