#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "kgedit/error.hpp"
#include "kgedit/metrics.hpp"
#include "test_support.hpp"

using namespace kgedit;
using namespace kgedit::metrics;
using kgedit::testing::HashScorer;
using kgedit::testing::oracle_rank;

namespace {

std::vector<RankPair> pairs_of(std::vector<std::size_t> before, std::vector<std::size_t> after) {
  std::vector<RankPair> p;
  for (std::size_t i = 0; i < before.size(); ++i) p.push_back({i, before[i], after[i]});
  return p;
}

// Toy graph plus edits whose targets are random entities.
struct Toy {
  static constexpr std::size_t kEntities = 300;
  kg::Graph graph = kg::synthesize_graph({kEntities, 7, 1500, 11});
  std::vector<kg::EditRequest> edits;
  std::vector<kg::Probe> ltest;

  Toy() {
    const auto probes = kg::all_probes(graph);
    Rng rng(12);
    for (std::size_t i = 0; i < 24; ++i) {
      const auto& p = probes[rng.below(probes.size())];
      const auto key = p.key();
      edits.push_back({p.direction, key.known, key.relation, p.gold(),
                       static_cast<kg::EntityId>(rng.below(kEntities))});
    }
    for (std::size_t i = 0; i < 80; ++i) ltest.push_back(probes[rng.below(probes.size())]);
  }

  // Replaces the L-Test golds with entities at chosen base ranks so that
  // every cut-off has facts below it: ranks cycle through 1, 2, 3, 7, 40.
  void anchor_ltest(const HashScorer& base) {
    const std::size_t wanted[] = {1, 2, 3, 7, 40};
    for (std::size_t i = 0; i < ltest.size(); ++i) {
      const auto key = ltest[i].key();
      const auto row = base.row(key);
      std::vector<std::size_t> ids(row.size());
      std::iota(ids.begin(), ids.end(), 0);
      std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
      const auto gold = static_cast<kg::EntityId>(ids[wanted[i % 5] - 1]);
      ltest[i] = {key.complete(gold), key.direction};
    }
  }
};

struct OracleResult {
  std::map<std::size_t, double> succ, rk;
  MeanRanks means;
};

// Full sort per query, nothing shared with the pipeline except the scorers.
OracleResult oracle(const HashScorer& base, const std::vector<HashScorer>& edited,
                    const std::vector<kg::EditRequest>& edits, const std::vector<kg::Probe>& ltest,
                    std::size_t n, const std::vector<std::size_t>& ks) {
  const std::size_t groups = edits.size() / n;
  std::vector<std::size_t> before_t, after_t, before_l, after_l_all;
  for (std::size_t i = 0; i < groups * n; ++i) {
    before_t.push_back(oracle_rank(base.row(edits[i].key()), edits[i].target));
    after_t.push_back(oracle_rank(edited[i / n].row(edits[i].key()), edits[i].target));
  }
  for (const auto& p : ltest) before_l.push_back(oracle_rank(base.row(p.key()), p.gold()));
  OracleResult r;
  for (auto k : ks) {
    std::size_t hit = 0;
    for (auto x : after_t) hit += x <= k;
    r.succ[k] = static_cast<double>(hit) / static_cast<double>(after_t.size());
    std::size_t num = 0, den = 0;
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t i = 0; i < ltest.size(); ++i) {
        den += before_l[i] <= k;
        num += oracle_rank(edited[g].row(ltest[i].key()), ltest[i].gold()) <= k;
      }
    }
    r.rk[k] = static_cast<double>(num) / static_cast<double>(den);
  }
  for (std::size_t g = 0; g < groups; ++g) {
    for (const auto& p : ltest) after_l_all.push_back(oracle_rank(edited[g].row(p.key()), p.gold()));
  }
  auto mean = [](const std::vector<std::size_t>& v) {
    std::size_t s = 0;
    for (auto x : v) s += x;
    return static_cast<double>(s) / static_cast<double>(v.size());
  };
  r.means = {mean(before_t), mean(after_t), mean(before_l), mean(after_l_all)};
  return r;
}

}  // namespace

TEST(SuccAtK, Fixtures) {
  const std::vector<std::size_t> ones{1, 1, 1, 1};
  EXPECT_EQ(succ_at_k(ones, 1), 1.0);
  const std::vector<std::size_t> r{1, 4, 2};
  EXPECT_EQ(succ_at_k(r, 3), 2.0 / 3.0);
  EXPECT_EQ(succ_at_k(r, 1), 1.0 / 3.0);
}

TEST(SuccAtK, Errors) {
  EXPECT_THROW(succ_at_k({}, 1), MetricError);
  const std::vector<std::size_t> r{1};
  EXPECT_THROW(succ_at_k(r, 0), ContractError);
}

TEST(SuccAtK, MonotoneInK) {
  Rng rng(1);
  std::vector<std::size_t> r(200);
  for (auto& x : r) x = 1 + rng.below(50);
  double previous = 0.0;
  for (std::size_t k = 1; k <= 60; ++k) {
    const double s = succ_at_k(r, k);
    EXPECT_GE(s, previous);
    previous = s;
  }
  EXPECT_EQ(previous, 1.0);
}

TEST(RkAtK, Fixtures) {
  // Unchanged ranks retain everything.
  const auto same = pairs_of({1, 2, 5, 3}, {1, 2, 5, 3});
  EXPECT_EQ(rk_at_k(same, 3), 1.0);
  // Two facts ranked <= 3 before ([1, 2]); after, ranks [1, 3] are still <= 3.
  const auto p = pairs_of({1, 2, 5}, {1, 3, 9});
  EXPECT_EQ(rk_at_k(p, 3), 2.0 / 2.0);
  EXPECT_EQ(rk_at_k(p, 2), 1.0 / 2.0);
  // Facts can also enter the top k: the ratio may exceed 1.
  const auto up = pairs_of({1, 7, 8}, {1, 2, 3});
  EXPECT_EQ(rk_at_k(up, 3), 3.0);
}

TEST(RkAtK, ZeroDenominatorIsAnError) {
  const auto p = pairs_of({4, 5}, {1, 2});
  EXPECT_THROW(rk_at_k(p, 3), MetricError);
  EXPECT_THROW(rk_at_k({}, 3), MetricError);
  EXPECT_THROW(rk_at_k(p, 0), ContractError);
}

TEST(MeanRank, ExactIntegerSum) {
  const std::vector<std::size_t> r{1, 2, 4};
  EXPECT_EQ(mean_rank(r), 7.0 / 3.0);
  EXPECT_THROW(mean_rank({}), MetricError);
  // Summation order does not matter because the sum is an integer.
  std::vector<std::size_t> big{(1ULL << 53) + 1, 1, (1ULL << 53) - 1};
  const double m1 = mean_rank(big);
  std::reverse(big.begin(), big.end());
  EXPECT_EQ(mean_rank(big), m1);
}

TEST(RocMetrics, Fixtures) {
  MeanRanks m{10.0, 10.0, 2.0, 4.0};
  auto r = roc_metrics(m);
  EXPECT_EQ(r.er_roc, 0.0);
  EXPECT_EQ(r.rk_roc, 0.5);
  // The two rates use different denominators.
  m = {4.0, 1.0, 4.0, 1.0};
  r = roc_metrics(m);
  EXPECT_EQ(r.er_roc, 0.75);
  EXPECT_EQ(r.rk_roc, 3.0);
  EXPECT_THROW(roc_metrics({0.0, 1.0, 1.0, 1.0}), MetricError);
  EXPECT_THROW(roc_metrics({1.0, 1.0, 1.0, 0.0}), MetricError);
}

class EvaluateOracle : public ::testing::TestWithParam<std::tuple<std::size_t, std::size_t>> {};

TEST_P(EvaluateOracle, MatchesFullSortOracle) {
  const auto [n, levels] = GetParam();
  Toy toy;
  const HashScorer base(Toy::kEntities, levels, 0);
  toy.anchor_ltest(base);
  std::vector<HashScorer> edited;
  for (std::size_t g = 0; g < toy.edits.size() / n; ++g) edited.emplace_back(Toy::kEntities, levels, g + 1);
  std::size_t calls = 0;
  const ApplyFn apply = [&](std::span<const kg::EditRequest> group) -> std::shared_ptr<const kg::EntityScorer> {
    EXPECT_EQ(group.size(), n);
    EXPECT_EQ(&group[0], &toy.edits[calls * n]);
    return std::make_shared<HashScorer>(edited[calls++]);
  };
  EvalOptions opts;
  opts.n = n;
  opts.ks = {1, 3, 10, 50};
  const auto report = evaluate(base, toy.edits, apply, toy.ltest, opts);
  const auto want = oracle(base, edited, toy.edits, toy.ltest, n, opts.ks);
  EXPECT_EQ(calls, toy.edits.size() / n);
  EXPECT_EQ(report.succ_at, want.succ);
  EXPECT_EQ(report.rk_at, want.rk);
  EXPECT_EQ(report.mean_ranks, want.means);
  EXPECT_EQ(report.er_roc, std::abs(want.means.edit - want.means.origin) / want.means.origin);
  EXPECT_EQ(report.rk_roc, std::abs(want.means.s_edit - want.means.s_origin) / want.means.s_edit);
  EXPECT_EQ(report.edits, (toy.edits.size() / n) * n);
  EXPECT_EQ(report.groups, toy.edits.size() / n);
  EXPECT_EQ(report.ltest, toy.ltest.size());
}

// Continuous scores and heavily tied scores; group sizes 1, 5 (partial group
// dropped) and 8.
INSTANTIATE_TEST_SUITE_P(Toy, EvaluateOracle,
                         ::testing::Combine(::testing::Values(1, 5, 8), ::testing::Values(0, 4)));

TEST(Evaluate, NoOpEditorRetainsEverything) {
  Toy toy;
  const auto base = std::make_shared<HashScorer>(Toy::kEntities, 0, 0);
  toy.anchor_ltest(*base);
  const ApplyFn apply = [&](std::span<const kg::EditRequest>) -> std::shared_ptr<const kg::EntityScorer> {
    return base;
  };
  const auto r = evaluate(*base, toy.edits, apply, toy.ltest, {});
  EXPECT_EQ(r.rk_at.at(3), 1.0);
  EXPECT_EQ(r.er_roc, 0.0);
  EXPECT_EQ(r.rk_roc, 0.0);
}

TEST(Evaluate, Errors) {
  Toy toy;
  const HashScorer base(Toy::kEntities, 0);
  const ApplyFn apply = [&](std::span<const kg::EditRequest>) -> std::shared_ptr<const kg::EntityScorer> {
    return std::make_shared<HashScorer>(base);
  };
  EvalOptions opts;
  opts.n = 100;
  EXPECT_THROW(evaluate(base, toy.edits, apply, toy.ltest, opts), MetricError);
  opts.n = 0;
  EXPECT_THROW(evaluate(base, toy.edits, apply, toy.ltest, opts), ContractError);
  opts.n = 1;
  EXPECT_THROW(evaluate(base, toy.edits, apply, {}, opts), MetricError);
}

TEST(Evaluate, WallTimeOnlyWhenRequested) {
  Toy toy;
  const auto base = std::make_shared<HashScorer>(Toy::kEntities, 0);
  toy.anchor_ltest(*base);
  const ApplyFn apply = [&](std::span<const kg::EditRequest>) -> std::shared_ptr<const kg::EntityScorer> {
    return base;
  };
  EvalOptions opts;
  opts.record_time = false;
  EXPECT_LT(evaluate(*base, toy.edits, apply, toy.ltest, opts).wall_time_s, 0.0);
  opts.record_time = true;
  EXPECT_GE(evaluate(*base, toy.edits, apply, toy.ltest, opts).wall_time_s, 0.0);
}

TEST(Report, NdjsonRoundTripIsLossless) {
  EvalReport r;
  r.succ_at = {{1, 1.0 / 3.0}, {3, 0.9}};
  r.rk_at = {{3, 0.1 + 0.2}};
  r.er_roc = std::nextafter(1.0, 0.0);
  r.rk_roc = 1e-300;
  r.mean_ranks = {12.5, 1.0 / 7.0, 3.25, 4.0};
  r.params_tuned = 67806;
  r.wall_time_s = -1.0;
  r.edits = 96;
  r.groups = 3;
  r.ltest = 400;
  r.meta = {"abc123", "KGEditor", "EDIT", "test", 32, 42};
  const auto line = to_ndjson(r);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(parse_ndjson(line), r);
  EXPECT_EQ(to_ndjson(parse_ndjson(line)), line);
}

TEST(Report, NdjsonRejectsBadInput) {
  EXPECT_THROW(parse_ndjson("{"), FormatError);
  EXPECT_THROW(parse_ndjson("{\"schema\":\"other\"}"), FormatError);
  EvalReport r;
  auto j = to_ndjson(r);
  const auto pos = j.find("\"schema_version\":1");
  ASSERT_NE(pos, std::string::npos);
  j.replace(pos, 18, "\"schema_version\":9");
  EXPECT_THROW(parse_ndjson(j), FormatError);
}

TEST(Report, TsvColumns) {
  EvalReport r;
  r.succ_at = {{1, 0.5}, {3, 0.75}};
  r.rk_at = {{3, 0.875}};
  r.er_roc = 0.25;
  r.rk_roc = 0.125;
  r.params_tuned = 2128;
  r.wall_time_s = -1.0;
  r.meta.variant = "CALINET";
  r.meta.n = 4;
  EXPECT_EQ(tsv_header(), "Variant\tn\tParams\tTime\tSucc@1\tSucc@3\tER_roc\tRK@3\tRK_roc");
  const auto row = tsv_row(r);
  EXPECT_EQ(std::count(row.begin(), row.end(), '\t'), 8);
  EXPECT_EQ(row.substr(0, 18), "CALINET\t4\t2128\tNA\t");
}
