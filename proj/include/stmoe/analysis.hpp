// SPDX-License-Identifier: Apache-2.0
//
// Observational analyses over routing traces: per-layer utilisation,
// polysemy branching, and the syntax-versus-frequency pipeline.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stmoe/model.hpp"
#include "stmoe/trainer.hpp"
#include "stmoe/vocab.hpp"

namespace stmoe {

struct TraceAggregate {
  int n_layers = 0;
  int n_experts = 0;
  int top_k = 0;
  int hops = 0;
  int vocab_size = 0;
  int geometry_hop = 0;
  std::int64_t n_tokens = 0;
  std::vector<std::vector<std::int64_t>> counts;        // [layer][expert]
  std::vector<std::vector<std::int64_t>> token_counts;  // [layer][expert * vocab + token]
  std::vector<double> max_weight_sum;                   // [layer], summed over (token, hop) records
  std::vector<int> tokens;                              // token id of every retained position
  std::vector<std::vector<Vec>> positions;              // [layer][position], routing pos at geometry_hop

  [[nodiscard]] std::int64_t records_per_layer() const { return n_tokens * hops; }
};

// Routes every sequence through the frozen model. Sequences are processed in
// parallel and merged in input order.
TraceAggregate collect_traces(const Model& model, std::span<const std::vector<int>> sequences, int geometry_hop = 0);
// Uses the inputs of the first n_batches batches (all when n_batches <= 0).
TraceAggregate collect_traces(const Model& model, const std::vector<Batch>& batches, int n_batches,
                              int geometry_hop = 0);

struct LayerStat {
  int layer = 0;
  double gini = 0.0;
  double entropy = 0.0;  // nats, of the count-normalised distribution
  double mean_max_weight = 0.0;
  int dead = 0;
  std::vector<std::int64_t> counts;
};
using LayerStats = std::vector<LayerStat>;

LayerStats layer_stats(const TraceAggregate& agg);

struct PolysemyResult {
  int token = 0;
  int position_a = 0;
  int position_b = 0;
  std::vector<std::vector<double>> jaccard;              // [layer][hop]
  std::vector<std::vector<std::vector<int>>> shared;     // [layer][hop], sorted expert ids
  std::vector<double> hop_mean;                          // mean over layers
  double mean = 0.0;
};

// Compares expert sets at the last occurrence of `token` in each prompt.
PolysemyResult polysemy_branching(const Model& model, std::span<const int> prompt_a, std::span<const int> prompt_b,
                                  int token, const RoutingControls& controls_a = {},
                                  const RoutingControls& controls_b = {});

enum class TokenClass { Function, HighFreqContent, LowFreqContent, Other };

std::string token_class_name(TokenClass c);

inline constexpr const char* kFunctionListVersion = "fw-2026.1";
const std::vector<std::string>& function_words();

struct TokenLabels {
  std::vector<TokenClass> cls;  // by token id
  std::string list_version;
  [[nodiscard]] std::array<int, 4> class_sizes() const;
};

// Words are tokens with at least one alphanumeric character; anything else
// (punctuation, <unk>) is Other.
TokenLabels label_tokens(const Vocab& vocab, const std::vector<std::string>& function_list = function_words(),
                         int top_n_content = 50);

struct SyntaxOptions {
  int n_perm = 200;
  int n_boot = 500;
  double level = 0.95;
  std::size_t max_points = 1500;
  std::uint64_t sample_seed = 0;
  std::uint64_t permutation_seed = 1;
  std::uint64_t bootstrap_seed = 2;
};

struct SyntaxLayer {
  int layer = 0;
  std::size_t n_points = 0;
  double sil_syntax = 0.0;
  double sil_freq = 0.0;
  double delta = 0.0;
  Interval ci;
  double p_value = 1.0;
};

struct MatchedPair {
  int function_token = 0;
  int content_token = 0;
  std::int64_t function_freq = 0;
  std::int64_t content_freq = 0;
  std::vector<std::optional<double>> silhouette;  // per layer; empty when a side lacks two positions
  std::vector<std::optional<double>> p_value;
};

struct EnrichmentRow {
  int layer = 0;
  int expert = 0;
  std::int64_t function_count = 0;
  std::int64_t content_count = 0;
  double odds_ratio = 1.0;
  double p_value = 1.0;
  double q_value = 1.0;
  bool fdr = false;
  std::string tier;  // "specialist", "enriched" or "none"
};

struct EnrichmentOptions {
  double alpha = 0.05;
  double enriched_or = 1.5;
  double specialist_or = 10.0;
};

struct SyntaxResult {
  std::vector<SyntaxLayer> layers;
  std::optional<SpearmanResult> depth_trend;  // Spearman of delta against layer index; needs 3+ layers
  std::vector<MatchedPair> pairs;
  std::vector<EnrichmentRow> enrichment;
};

// positions[layer][i] is the routing position of occurrence i, whose token is
// tokens[i]. Only Function/HighFreq/LowFreq occurrences take part.
SyntaxResult syntax_vs_frequency(const std::vector<std::vector<Vec>>& positions, std::span<const int> tokens,
                                 const TokenLabels& labels, const SyntaxOptions& opt = {});

// Function/content pairs with frequency ratio below ratio_cap, greedily
// matched from the most frequent function word down; at most max_pairs.
std::vector<MatchedPair> matched_pairs(const Vocab& vocab, const TokenLabels& labels, double ratio_cap = 2.0,
                                       int max_pairs = 15);
// Fills the per-layer silhouette (cosine) and permutation p of each pair,
// using at most max_per_token occurrences of each token.
void score_pairs(std::vector<MatchedPair>& pairs, const std::vector<std::vector<Vec>>& positions,
                 std::span<const int> tokens, int n_perm = 200, std::uint64_t seed = 1,
                 std::size_t max_per_token = 200);

// [layer][expert] = {function activations, content activations}
using ClassCounts = std::vector<std::vector<std::array<std::int64_t, 2>>>;
ClassCounts class_counts(const TraceAggregate& agg, const TokenLabels& labels);

std::string tier_for(double odds_ratio, bool fdr, const EnrichmentOptions& opt = {});
std::vector<EnrichmentRow> enrichment(const ClassCounts& counts, const EnrichmentOptions& opt = {});

std::string layer_stats_csv(const LayerStats& s);
nlohmann::json layer_stats_json(const LayerStats& s);
nlohmann::json polysemy_json(const PolysemyResult& r, const Vocab& vocab);
nlohmann::json syntax_json(const SyntaxResult& r, const Vocab& vocab);
std::string enrichment_csv(const std::vector<EnrichmentRow>& rows);

}  // namespace stmoe
