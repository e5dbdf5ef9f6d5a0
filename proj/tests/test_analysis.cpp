// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "stmoe/analysis.hpp"

using namespace stmoe;

namespace {

std::vector<std::vector<int>> seqs(int n, int len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  for (auto& s : out)
    for (int i = 0; i < len; ++i) s.push_back(static_cast<int>(rng.below(50)));
  return out;
}

TraceAggregate synthetic(const std::vector<std::int64_t>& counts, int k, int hops) {
  TraceAggregate a;
  a.n_layers = 1;
  a.n_experts = static_cast<int>(counts.size());
  a.top_k = k;
  a.hops = hops;
  a.counts = {counts};
  a.n_tokens = std::accumulate(counts.begin(), counts.end(), std::int64_t{0}) / (k * hops);
  a.max_weight_sum = {0.5 * static_cast<double>(a.n_tokens * hops)};
  return a;
}

}  // namespace

TEST_CASE("trace aggregation matches a replay of single forward passes") {
  const Model m(ModelConfig::tiny(), 11);
  const auto ss = seqs(9, 7, 3);
  const auto agg = collect_traces(m, ss, 1);
  const auto& cfg = m.config();
  CHECK(agg.n_tokens == 63);
  CHECK(agg.geometry_hop == 1);
  std::vector<std::vector<std::int64_t>> counts(2, std::vector<std::int64_t>(8, 0));
  std::vector<double> maxw(2, 0.0);
  std::vector<int> toks;
  std::size_t pos = 0;
  for (const auto& s : ss) {
    const auto r = m.forward(s);
    for (std::size_t t = 0; t < s.size(); ++t, ++pos) {
      toks.push_back(s[t]);
      for (int l = 0; l < 2; ++l) {
        const auto& recs = r.trace.hops[t][static_cast<std::size_t>(l)];
        for (const auto& rec : recs) {
          for (int e : rec.expert_ids) ++counts[static_cast<std::size_t>(l)][static_cast<std::size_t>(e)];
          maxw[static_cast<std::size_t>(l)] += *std::max_element(rec.weights.begin(), rec.weights.end());
        }
        CHECK(agg.positions[static_cast<std::size_t>(l)][pos] == recs[1].pos);
      }
    }
  }
  CHECK(agg.tokens == toks);
  for (int l = 0; l < 2; ++l) {
    const auto ul = static_cast<std::size_t>(l);
    CHECK(agg.counts[ul] == counts[ul]);
    CHECK(agg.max_weight_sum[ul] == doctest::Approx(maxw[ul]));
    const auto total = std::accumulate(agg.counts[ul].begin(), agg.counts[ul].end(), std::int64_t{0});
    CHECK(total == agg.n_tokens * cfg.top_k * cfg.hops);
    const auto tok_total = std::accumulate(agg.token_counts[ul].begin(), agg.token_counts[ul].end(), std::int64_t{0});
    CHECK(tok_total == total);
  }

  std::vector<Batch> batches(3);
  for (std::size_t i = 0; i < ss.size(); ++i) batches[i / 3].push_back({ss[i], ss[i]});
  const auto two = collect_traces(m, batches, 2);
  CHECK(two.n_tokens == 42);
  CHECK(collect_traces(m, batches, 0).counts == agg.counts);
}

TEST_CASE("layer statistics against textbook formulas") {
  const Model m(ModelConfig::tiny(), 11);
  const auto agg = collect_traces(m, seqs(6, 8, 4));
  const auto st = layer_stats(agg);
  REQUIRE(st.size() == 2);
  for (const auto& s : st) {
    const std::vector<double> c(s.counts.begin(), s.counts.end());
    const double total = std::accumulate(c.begin(), c.end(), 0.0);
    std::vector<double> p;
    for (double v : c) p.push_back(v / total);
    CHECK(s.gini == doctest::Approx(oracle::gini_pairwise(c)));
    CHECK(s.entropy == doctest::Approx(oracle::entropy(p)));
    CHECK(s.mean_max_weight > 1.0 / m.config().top_k - 1e-9);
    CHECK(s.mean_max_weight <= 1.0 + 1e-9);
    CHECK(s.dead == std::count(s.counts.begin(), s.counts.end(), 0));
  }
}

TEST_CASE("uniform usage has zero Gini and maximal entropy") {
  const auto st = layer_stats(synthetic(std::vector<std::int64_t>(8, 12), 2, 3));
  CHECK(st[0].gini == doctest::Approx(0.0));
  CHECK(st[0].entropy == doctest::Approx(std::log(8.0)));
  CHECK(st[0].dead == 0);
  CHECK(st[0].mean_max_weight == doctest::Approx(0.5));
}

TEST_CASE("usage concentrated on K experts leaves M - K dead") {
  std::vector<std::int64_t> c(8, 0);
  c[2] = c[5] = 30;
  const auto st = layer_stats(synthetic(c, 2, 3));
  CHECK(st[0].dead == 6);
  CHECK(st[0].entropy == doctest::Approx(std::log(2.0)));
  CHECK(st[0].gini == doctest::Approx(0.75));
  CHECK_THROWS_AS((void)layer_stats(synthetic(std::vector<std::int64_t>(8, 0), 2, 3)), Error);
}

TEST_CASE("polysemy Jaccard matches the traces and is symmetric") {
  const Model m(ModelConfig::tiny(), 13);
  const std::vector<int> a{4, 9, 17, 3, 22}, b{30, 17, 1, 2};
  const auto r = polysemy_branching(m, a, b, 17);
  CHECK(r.position_a == 2);
  CHECK(r.position_b == 1);
  const auto ta = m.forward(a).trace, tb = m.forward(b).trace;
  double sum = 0.0;
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h) {
      const auto& ea = ta.hops[2][l][h].expert_ids;
      const auto& eb = tb.hops[1][l][h].expert_ids;
      CHECK(r.jaccard[l][h] == doctest::Approx(oracle::jaccard(ea, eb)));
      std::set<int> sa(ea.begin(), ea.end()), inter;
      for (int e : eb)
        if (sa.count(e)) inter.insert(e);
      CHECK(r.shared[l][h] == std::vector<int>(inter.begin(), inter.end()));
      sum += r.jaccard[l][h];
    }
  CHECK(r.mean == doctest::Approx(sum / 4));
  CHECK(r.hop_mean[0] == doctest::Approx((r.jaccard[0][0] + r.jaccard[1][0]) / 2));

  const auto rev = polysemy_branching(m, b, a, 17);
  CHECK(rev.jaccard == r.jaccard);
  const auto self = polysemy_branching(m, a, a, 17);
  CHECK(self.mean == 1.0);
  try {
    (void)polysemy_branching(m, a, b, 49);
    FAIL("expected TokenAbsent");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::TokenAbsent);
  }
}

TEST_CASE("suppression forces disjoint experts and a low overlap") {
  const Model m(ModelConfig::tiny(), 13);
  const std::vector<int> a{4, 9, 17};
  RoutingControls lo, hi;
  // K = 2 of 8: keeping {0..3} on one side and {4..7} on the other gives empty intersections
  lo.suppress[0] = {4, 5, 6, 7};
  hi.suppress[0] = {0, 1, 2, 3};
  const auto r = polysemy_branching(m, a, a, 17, lo, hi);
  for (double j : r.jaccard[0]) CHECK(j == 0.0);
  for (const auto& s : r.shared[0]) CHECK(s.empty());
}

TEST_CASE("token labels partition the vocabulary") {
  Vocab v;
  v.tokens = {"<unk>", "the", ",", "cat", "of", "dog", "ran", ".", "x1", "zebra"};
  v.freq = {0, 90, 80, 70, 60, 50, 40, 30, 20, 10};
  v.reindex();
  const auto lab = label_tokens(v, function_words(), 2);
  CHECK(lab.list_version == kFunctionListVersion);
  REQUIRE(lab.cls.size() == 10);
  CHECK(lab.cls[0] == TokenClass::Other);
  CHECK(lab.cls[1] == TokenClass::Function);
  CHECK(lab.cls[2] == TokenClass::Other);
  CHECK(lab.cls[3] == TokenClass::HighFreqContent);
  CHECK(lab.cls[4] == TokenClass::Function);
  CHECK(lab.cls[5] == TokenClass::HighFreqContent);
  CHECK(lab.cls[6] == TokenClass::LowFreqContent);
  CHECK(lab.cls[7] == TokenClass::Other);
  CHECK(lab.cls[8] == TokenClass::LowFreqContent);
  const auto sizes = lab.class_sizes();
  CHECK(sizes[0] + sizes[1] + sizes[2] + sizes[3] == 10);
  CHECK(sizes[1] == 2);
  std::set<std::string> unique(function_words().begin(), function_words().end());
  CHECK(unique.size() == function_words().size());
}

namespace {

// 3 layers of synthetic geometry. Function tokens (ids 1-2) sit near one
// direction, content tokens (3-6) near another, irrespective of frequency.
struct Geometry {
  std::vector<std::vector<Vec>> positions;
  std::vector<int> tokens;
  TokenLabels labels;
};

Geometry planted_geometry(double noise, bool structured) {
  Geometry g;
  g.labels.cls = {TokenClass::Other,          TokenClass::Function,       TokenClass::Function,
                  TokenClass::HighFreqContent, TokenClass::HighFreqContent, TokenClass::LowFreqContent,
                  TokenClass::LowFreqContent};
  Rng rng(5);
  g.positions.assign(3, {});
  for (int i = 0; i < 120; ++i) {
    const int tok = 1 + i % 6;
    g.tokens.push_back(tok);
    for (int l = 0; l < 3; ++l) {
      Vec p(4);
      for (auto& x : p) x = noise * rng.normal();
      if (structured) p[g.labels.cls[static_cast<std::size_t>(tok)] == TokenClass::Function ? 0 : 1] += 1.0;
      else p[static_cast<std::size_t>(rng.below(2))] += 1.0;
      g.positions[static_cast<std::size_t>(l)].push_back(p);
    }
  }
  return g;
}

}  // namespace

TEST_CASE("planted syntactic geometry beats the frequency grouping") {
  const auto g = planted_geometry(0.1, true);
  SyntaxOptions opt;
  opt.n_boot = 100;
  const auto r = syntax_vs_frequency(g.positions, g.tokens, g.labels, opt);
  REQUIRE(r.layers.size() == 3);
  for (const auto& l : r.layers) {
    CHECK(l.n_points == 120);
    CHECK(l.delta == doctest::Approx(l.sil_syntax - l.sil_freq));
    CHECK(l.delta > 0.2);
    CHECK(l.p_value == doctest::Approx(1.0 / 201.0));
    CHECK(l.ci.lo <= l.delta);
    CHECK(l.ci.hi >= l.delta);
    // silhouette oracle for the syntax grouping under cosine distance
    std::vector<int> lab;
    for (int t : g.tokens) lab.push_back(g.labels.cls[static_cast<std::size_t>(t)] == TokenClass::Function ? 0 : 1);
    CHECK(l.sil_syntax == doctest::Approx(oracle::silhouette(g.positions[static_cast<std::size_t>(l.layer)], lab, true)));
  }
  CHECK(r.depth_trend.has_value());
}

TEST_CASE("unstructured geometry shows no syntax advantage") {
  const auto g = planted_geometry(0.1, false);
  SyntaxOptions opt;
  opt.n_boot = 50;
  const auto r = syntax_vs_frequency(g.positions, g.tokens, g.labels, opt);
  for (const auto& l : r.layers) {
    CHECK(std::fabs(l.delta) < 0.1);
    CHECK(l.p_value > 0.05);
  }
  std::vector<std::vector<Vec>> two(g.positions.begin(), g.positions.begin() + 2);
  CHECK_FALSE(syntax_vs_frequency(two, g.tokens, g.labels, opt).depth_trend.has_value());
  std::vector<int> only_function(g.tokens.size(), 1);
  CHECK_THROWS_AS((void)syntax_vs_frequency(g.positions, only_function, g.labels, opt), Error);
}

TEST_CASE("pair silhouettes agree with a brute-force silhouette") {
  const auto g = planted_geometry(0.1, true);
  std::vector<MatchedPair> pairs(1);
  pairs[0].function_token = 1;
  pairs[0].content_token = 5;
  score_pairs(pairs, g.positions, g.tokens, 50, 3, 200);
  std::vector<Vec> pts;
  std::vector<int> lab;
  for (std::size_t i = 0; i < g.tokens.size(); ++i)
    if (g.tokens[i] == 1 || g.tokens[i] == 5) {
      pts.push_back(g.positions[0][i]);
      lab.push_back(g.tokens[i] == 1 ? 0 : 1);
    }
  REQUIRE(pairs[0].silhouette[0].has_value());
  CHECK(*pairs[0].silhouette[0] == doctest::Approx(oracle::silhouette(pts, lab, true)));
  CHECK(*pairs[0].p_value[0] == doctest::Approx(1.0 / 51.0));

  std::vector<MatchedPair> missing(1);
  missing[0].function_token = 1;
  missing[0].content_token = 40;
  score_pairs(missing, g.positions, g.tokens, 50, 3, 200);
  CHECK_FALSE(missing[0].silhouette[0].has_value());
}

TEST_CASE("matched pairs respect the frequency ratio cap") {
  Vocab v;
  v.tokens = {"<unk>", "the", "of", "cat", "dog", "and", "emu"};
  v.freq = {0, 100, 60, 90, 55, 20, 5};
  v.reindex();
  const auto lab = label_tokens(v, function_words(), 1);
  const auto pairs = matched_pairs(v, lab, 2.0, 15);
  std::set<int> content;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const double ratio = static_cast<double>(std::max(p.function_freq, p.content_freq)) /
                         static_cast<double>(std::min(p.function_freq, p.content_freq));
    CHECK(ratio < 2.0);
    CHECK(content.insert(p.content_token).second);
    if (i) CHECK(p.function_freq <= pairs[i - 1].function_freq);
  }
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].function_token == 1);
  CHECK(pairs[0].content_token == 3);
  CHECK(pairs[1].function_token == 2);
  CHECK(pairs[1].content_token == 4);
  CHECK(matched_pairs(v, lab, 2.0, 1).size() == 1);
  CHECK_THROWS_AS((void)matched_pairs(v, lab, 1.0), Error);
}

TEST_CASE("enrichment agrees with Fisher and BH oracles") {
  ClassCounts c(1);
  c[0] = {{{40, 5}}, {{10, 30}}, {{12, 14}}, {{0, 0}}, {{3, 50}}, {{8, 9}}};
  const auto rows = enrichment(c);
  REQUIRE(rows.size() == 6);
  std::int64_t tf = 0, tc = 0;
  for (const auto& e : c[0]) {
    tf += e[0];
    tc += e[1];
  }
  std::vector<double> p;
  for (std::size_t e = 0; e < 6; ++e) {
    const auto a = c[0][e][0], b = c[0][e][1];
    p.push_back(oracle::fisher(a, b, tf - a, tc - b));
    CHECK(rows[e].p_value == doctest::Approx(p.back()).epsilon(1e-9));
  }
  const auto flags = oracle::bh(p, 0.05);
  for (std::size_t e = 0; e < 6; ++e) {
    const bool want = flags[e] && (c[0][e][0] + c[0][e][1]) > 0;
    CHECK(rows[e].fdr == want);
  }
  CHECK(rows[0].odds_ratio == doctest::Approx((40.0 * (tc - 5)) / (5.0 * (tf - 40))));
  CHECK(rows[0].tier == "specialist");
  CHECK(rows[3].tier == "none");
  CHECK_FALSE(rows[3].fdr);
  CHECK(tier_for(3.0, true) == "enriched");
  CHECK(tier_for(30.0, false) == "none");
  CHECK(tier_for(1.2, true) == "none");
}

TEST_CASE("class counts fold token counts by label") {
  const Model m(ModelConfig::tiny(), 11);
  const auto agg = collect_traces(m, seqs(4, 8, 9));
  TokenLabels lab;
  lab.cls.assign(50, TokenClass::LowFreqContent);
  for (int t = 0; t < 10; ++t) lab.cls[static_cast<std::size_t>(t)] = TokenClass::Function;
  lab.cls[49] = TokenClass::Other;
  const auto cc = class_counts(agg, lab);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t e = 0; e < 8; ++e) {
      std::int64_t f = 0, c = 0;
      for (std::size_t t = 0; t < 50; ++t) {
        const auto n = agg.token_counts[l][e * 50 + t];
        if (t < 10) f += n;
        else if (t < 49) c += n;
      }
      CHECK(cc[l][e][0] == f);
      CHECK(cc[l][e][1] == c);
    }
  TokenLabels short_lab;
  short_lab.cls.assign(3, TokenClass::Other);
  CHECK_THROWS_AS((void)class_counts(agg, short_lab), Error);
}
