// SPDX-License-Identifier: Apache-2.0
#include "stmoe/dictionary.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stmoe/kernels.hpp"

namespace stmoe {

namespace {

Vec to_vec(std::span<const float> s) { return {s.begin(), s.end()}; }

Vec unembed_row(const Model& m, int v) {
  const auto d = static_cast<std::size_t>(m.config().d_model);
  return to_vec(m.unembedding().subspan(static_cast<std::size_t>(v) * d, d));
}

}  // namespace

std::vector<std::pair<int, double>> decode_vector(std::span<const double> w, const Model& model, int k) {
  const int vsz = model.config().vocab_size;
  if (k < 1 || k > vsz) throw Error(Errc::OutOfRange, "decode k=" + std::to_string(k));
  if (w.size() != static_cast<std::size_t>(model.config().d_model))
    throw Error(Errc::ShapeMismatch, "decode vector width");
  const auto U = model.unembedding();
  const auto d = w.size();
  Vec scores(static_cast<std::size_t>(vsz));
  for (int v = 0; v < vsz; ++v) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += static_cast<double>(U[static_cast<std::size_t>(v) * d + i]) * w[i];
    scores[static_cast<std::size_t>(v)] = s;
  }
  std::vector<std::pair<int, double>> out;
  for (int id : top_k<double>(scores, k)) out.emplace_back(id, scores[static_cast<std::size_t>(id)]);
  return out;
}

DictEntry decode_expert(int layer, int expert, const Model& model, int k) {
  const auto& cfg = model.config();
  if (layer < 0 || layer >= cfg.n_layers || expert < 0 || expert >= cfg.n_experts)
    throw Error(Errc::BadIndex, "decode_expert(" + std::to_string(layer) + ", " + std::to_string(expert) + ")");
  DictEntry e;
  e.layer = layer;
  e.expert = expert;
  e.top = decode_vector(to_vec(model.bank(layer).up(expert)), model, k);
  return e;
}

std::vector<DictEntry> build_dictionary(const Model& model, int k) {
  std::vector<DictEntry> out;
  for (int l = 0; l < model.config().n_layers; ++l)
    for (int e = 0; e < model.config().n_experts; ++e) out.push_back(decode_expert(l, e, model, k));
  return out;
}

Vec hub_scores(const Model& model, int n_random, std::uint64_t seed) {
  const auto& cfg = model.config();
  if (n_random < 1) throw Error(Errc::OutOfRange, "n_random must be positive");
  Rng rng(seed);
  std::vector<Vec> rows;
  for (int i = 0; i < n_random; ++i)
    rows.push_back(unembed_row(model, static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size)))));
  Vec scores;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto bank = model.bank(l);
    for (int e = 0; e < cfg.n_experts; ++e) {
      const Vec w = to_vec(bank.up(e));
      double acc = 0.0;
      if (norm2<double>(w) > kNormEps)
        for (const auto& r : rows) acc += cosine_sim<double>(w, r);
      scores.push_back(acc / n_random);
    }
  }
  return scores;
}

void apply_hub_filter(std::vector<DictEntry>& dict, const Model& model, int n_random, std::uint64_t seed, double z) {
  const auto scores = hub_scores(model, n_random, seed);
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  const double sd = std::sqrt(var / static_cast<double>(scores.size()));
  for (auto& e : dict) {
    const double s = scores[static_cast<std::size_t>(e.layer * model.config().n_experts + e.expert)];
    e.hub_score = s;
    e.hub = sd > 0 && (s - mean) / sd > z;
  }
}

bool hub_filter(const DictEntry& entry, const Model& model, int n_random, std::uint64_t seed, double z) {
  std::vector<DictEntry> one{entry};
  apply_hub_filter(one, model, n_random, seed, z);
  return one[0].hub;
}

std::vector<Candidate> discover_category(const CategorySpec& spec, const std::vector<DictEntry>& dict,
                                         const Vocab& vocab) {
  const auto seeds = spec.seed_ids(vocab);
  if (seeds.empty()) throw Error(Errc::NoSeedsInVocab, "category " + spec.name);
  const std::set<int> seed_set(seeds.begin(), seeds.end());
  std::vector<Candidate> out;
  for (const auto& e : dict) {
    if (e.hub) continue;
    Candidate c{e.layer, e.expert, 0, 0.0, 0.0};
    for (const auto& [id, score] : e.top) {
      if (!seed_set.count(id)) continue;
      ++c.overlap;
      c.score_sum += score;
    }
    if (c.overlap == 0) continue;
    c.overlap_fraction = static_cast<double>(c.overlap) / static_cast<double>(e.top.size());
    out.push_back(c);
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.overlap != b.overlap) return a.overlap > b.overlap;
    return a.score_sum > b.score_sum;
  });
  return out;
}

void label_dictionary(std::vector<DictEntry>& dict, const std::vector<CategorySpec>& categories, const Vocab& vocab) {
  std::vector<std::set<int>> sets;
  for (const auto& c : categories) {
    const auto ids = c.seed_ids(vocab);
    sets.emplace_back(ids.begin(), ids.end());
  }
  for (auto& e : dict) {
    e.category.reset();
    e.overlap = 0.0;
    int best = 0;
    for (std::size_t c = 0; c < sets.size(); ++c) {
      int hit = 0;
      for (const auto& t : e.top) hit += static_cast<int>(sets[c].count(t.first));
      if (hit > best) {
        best = hit;
        e.category = categories[c].name;
        e.overlap = static_cast<double>(hit) / static_cast<double>(e.top.size());
      }
    }
  }
}

std::vector<Vec> decoded_centroids(const std::vector<DictEntry>& dict, const Model& model) {
  std::vector<Vec> out;
  const auto d = static_cast<std::size_t>(model.config().d_model);
  for (const auto& e : dict) {
    Vec c(d, 0.0);
    for (const auto& t : e.top) {
      const Vec r = unembed_row(model, t.first);
      for (std::size_t i = 0; i < d; ++i) c[i] += r[i];
    }
    out.push_back(l2_normalize<double>(c));
  }
  return out;
}

std::vector<int> density_cluster(const std::vector<Vec>& points, int min_size, double eps) {
  if (min_size < 2) throw Error(Errc::OutOfRange, "min_cluster_size must be >= 2");
  const std::size_t n = points.size();
  std::vector<int> labels(n, -1);
  if (n == 0) return labels;
  const std::size_t dim = points[0].size();
  Vec flat;
  flat.reserve(n * dim);
  for (const auto& p : points) flat.insert(flat.end(), p.begin(), p.end());
  Vec dist(n * n);
  kernels::parallel::cosine_distance_matrix(flat, n, dim, dist);

  std::vector<char> core(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    int cnt = 0;
    for (std::size_t j = 0; j < n; ++j) cnt += dist[i * n + j] <= eps ? 1 : 0;
    core[i] = cnt >= min_size;
  }
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || labels[i] >= 0) continue;
    std::vector<std::size_t> stack{i};
    labels[i] = next;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (std::size_t v = 0; v < n; ++v) {
        if (core[v] && labels[v] < 0 && dist[u * n + v] <= eps) {
          labels[v] = next;
          stack.push_back(v);
        }
      }
    }
    ++next;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (core[j] && dist[i * n + j] <= eps && dist[i * n + j] < best) {
        best = dist[i * n + j];
        labels[i] = labels[j];
      }
    }
  }
  return labels;
}

double coherence(const std::vector<Vec>& members) {
  if (members.size() < 2) throw Error(Errc::SingletonCluster, "coherence needs at least 2 members");
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < members.size(); ++i)
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      acc += cosine_sim<double>(members[i], members[j]);
      ++pairs;
    }
  return acc / static_cast<double>(pairs);
}

Clustering cluster_experts(const std::vector<DictEntry>& dict, const Model& model, int min_cluster_size, double eps) {
  const auto pts = decoded_centroids(dict, model);
  const auto labels = density_cluster(pts, min_cluster_size, eps);
  Clustering out;
  const int n_clusters = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  out.clusters.resize(static_cast<std::size_t>(std::max(0, n_clusters)));
  std::vector<std::vector<Vec>> member_pts(out.clusters.size());
  std::vector<std::map<int, int>> token_counts(out.clusters.size());
  for (std::size_t i = 0; i < dict.size(); ++i) {
    const auto id = std::make_pair(dict[i].layer, dict[i].expert);
    if (labels[i] < 0) {
      out.unclustered.push_back(id);
      continue;
    }
    const auto c = static_cast<std::size_t>(labels[i]);
    out.clusters[c].members.push_back(id);
    member_pts[c].push_back(pts[i]);
    for (const auto& t : dict[i].top) ++token_counts[c][t.first];
  }
  for (std::size_t c = 0; c < out.clusters.size(); ++c) {
    out.clusters[c].coherence = coherence(member_pts[c]);
    std::vector<std::pair<int, int>> ranked(token_counts[c].begin(), token_counts[c].end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    for (std::size_t i = 0; i < std::min<std::size_t>(10, ranked.size()); ++i)
      out.clusters[c].representative_tokens.push_back(ranked[i].first);
  }
  return out;
}

std::string dictionary_csv(const std::vector<DictEntry>& dict, const Vocab& vocab) {
  std::ostringstream out;
  out.precision(9);
  out << "layer,expert,rank,token,score,hub,category\n";
  for (const auto& e : dict)
    for (std::size_t r = 0; r < e.top.size(); ++r)
      out << e.layer << ',' << e.expert << ',' << r + 1 << ",\"" << vocab.text(e.top[r].first) << "\","
          << e.top[r].second << ',' << (e.hub ? 1 : 0) << ',' << e.category.value_or("") << '\n';
  return out.str();
}

std::string dictionary_json(const std::vector<DictEntry>& dict, const Vocab& vocab) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : dict) {
    nlohmann::json top = nlohmann::json::array();
    for (const auto& [id, s] : e.top) top.push_back({{"token", vocab.text(id)}, {"id", id}, {"score", s}});
    nlohmann::json j = {{"layer", e.layer}, {"expert", e.expert}, {"top", top}, {"hub", e.hub},
                        {"hub_score", e.hub_score}};
    if (e.category) {
      j["category"] = *e.category;
      j["overlap"] = e.overlap;
    }
    arr.push_back(j);
  }
  return arr.dump(2) + "\n";
}

std::string clusters_json(const Clustering& c, const Vocab& vocab) {
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& cl : c.clusters) {
    nlohmann::json members = nlohmann::json::array();
    for (const auto& [l, e] : cl.members) members.push_back({l, e});
    std::vector<std::string> toks;
    for (int t : cl.representative_tokens) toks.push_back(vocab.text(t));
    clusters.push_back({{"members", members}, {"coherence", cl.coherence}, {"representative_tokens", toks}});
  }
  nlohmann::json un = nlohmann::json::array();
  for (const auto& [l, e] : c.unclustered) un.push_back({l, e});
  return nlohmann::json{{"method", "density clustering"}, {"clusters", clusters}, {"unclustered", un}}.dump(2) + "\n";
}

}  // namespace stmoe
