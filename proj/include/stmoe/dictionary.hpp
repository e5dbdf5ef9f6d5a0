// SPDX-License-Identifier: Apache-2.0
//
// Semantic dictionary: expert write directions decoded through the
// unembedding, hub filtering, category discovery and density clustering.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stmoe/category.hpp"
#include "stmoe/model.hpp"
#include "stmoe/vocab.hpp"

namespace stmoe {

struct DictEntry {
  int layer = 0;
  int expert = 0;
  std::vector<std::pair<int, double>> top;  // (token id, score), descending
  bool hub = false;
  double hub_score = 0.0;
  std::optional<std::string> category;
  double overlap = 0.0;  // fraction of `top` inside `category`
};

// Top-k vocabulary entries of unembedding * w, ties to the lower id.
std::vector<std::pair<int, double>> decode_vector(std::span<const double> w, const Model& model, int k);
DictEntry decode_expert(int layer, int expert, const Model& model, int k = 10);
std::vector<DictEntry> build_dictionary(const Model& model, int k = 10);

// Mean cosine between an expert's write vector and n_random seeded vocab
// rows, for every expert in (layer, expert) order.
Vec hub_scores(const Model& model, int n_random = 64, std::uint64_t seed = 0);
// Flags experts whose score exceeds the population mean by more than
// `z` population standard deviations.
void apply_hub_filter(std::vector<DictEntry>& dict, const Model& model, int n_random = 64, std::uint64_t seed = 0,
                      double z = 2.0);
bool hub_filter(const DictEntry& entry, const Model& model, int n_random = 64, std::uint64_t seed = 0, double z = 2.0);

struct Candidate {
  int layer = 0;
  int expert = 0;
  int overlap = 0;          // |top-k ∩ seeds|
  double overlap_fraction = 0.0;
  double score_sum = 0.0;   // summed scores of the overlapping tokens
};

// Non-hub experts with nonzero seed overlap, best first.
std::vector<Candidate> discover_category(const CategorySpec& spec, const std::vector<DictEntry>& dict,
                                         const Vocab& vocab);

// Marks each entry with the category it overlaps most (ties to the earlier category).
void label_dictionary(std::vector<DictEntry>& dict, const std::vector<CategorySpec>& categories, const Vocab& vocab);

struct ExpertCluster {
  std::vector<std::pair<int, int>> members;  // (layer, expert)
  double coherence = 0.0;
  std::vector<int> representative_tokens;
};

struct Clustering {
  std::vector<ExpertCluster> clusters;
  std::vector<std::pair<int, int>> unclustered;
};

// Unit-normalized mean unembedding row of each entry's top tokens.
std::vector<Vec> decoded_centroids(const std::vector<DictEntry>& dict, const Model& model);

// Fixed-eps density clustering under cosine distance. Core points have at
// least min_size points (self included) within eps; clusters are connected
// components of core points; a border point joins its nearest core point.
// Returns a label per point, -1 for noise.
std::vector<int> density_cluster(const std::vector<Vec>& points, int min_size, double eps);

double coherence(const std::vector<Vec>& members);

Clustering cluster_experts(const std::vector<DictEntry>& dict, const Model& model, int min_cluster_size = 3,
                           double eps = 0.3);

std::string dictionary_csv(const std::vector<DictEntry>& dict, const Vocab& vocab);
std::string dictionary_json(const std::vector<DictEntry>& dict, const Vocab& vocab);
std::string clusters_json(const Clustering& c, const Vocab& vocab);

}  // namespace stmoe
