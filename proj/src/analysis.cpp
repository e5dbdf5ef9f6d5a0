// SPDX-License-Identifier: Apache-2.0
#include "stmoe/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "stmoe/kernels.hpp"

namespace stmoe {

// ---------------------------------------------------------------------------
// Trace collection

namespace {

TraceAggregate empty_aggregate(const ModelConfig& cfg, int geometry_hop) {
  if (geometry_hop < 0 || geometry_hop >= cfg.hops)
    throw Error(Errc::OutOfRange, "geometry_hop " + std::to_string(geometry_hop));
  TraceAggregate agg;
  agg.n_layers = cfg.n_layers;
  agg.n_experts = cfg.n_experts;
  agg.top_k = cfg.top_k;
  agg.hops = cfg.hops;
  agg.vocab_size = cfg.vocab_size;
  agg.geometry_hop = geometry_hop;
  const auto L = static_cast<std::size_t>(cfg.n_layers);
  agg.counts.assign(L, std::vector<std::int64_t>(static_cast<std::size_t>(cfg.n_experts), 0));
  agg.token_counts.assign(L, std::vector<std::int64_t>(static_cast<std::size_t>(cfg.n_experts) *
                                                           static_cast<std::size_t>(cfg.vocab_size),
                                                       0));
  agg.max_weight_sum.assign(L, 0.0);
  agg.positions.assign(L, {});
  return agg;
}

struct SequenceTrace {
  std::vector<int> tokens;
  RoutingTrace trace;
};

}  // namespace

TraceAggregate collect_traces(const Model& model, std::span<const std::vector<int>> sequences, int geometry_hop) {
  const auto& cfg = model.config();
  TraceAggregate agg = empty_aggregate(cfg, geometry_hop);
  std::size_t total = 0;
  for (const auto& s : sequences) total += s.size();
  if (total == 0) throw Error(Errc::EmptyInput, "collect_traces: no tokens");

  std::vector<SequenceTrace> per(sequences.size());
  std::vector<std::string> errors(sequences.size());
  const auto n = static_cast<long>(sequences.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    if (sequences[ui].empty()) continue;
    try {
      per[ui].tokens = sequences[ui];
      per[ui].trace = model.forward(sequences[ui], {}, TraceLevel::Routing).trace;
    } catch (const std::exception& e) {
      errors[ui] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw Error(Errc::OutOfRange, "collect_traces: " + e);

  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  for (const auto& s : per) {
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      const int tok = s.tokens[t];
      agg.tokens.push_back(tok);
      ++agg.n_tokens;
      for (int l = 0; l < cfg.n_layers; ++l) {
        const auto ul = static_cast<std::size_t>(l);
        const auto& hops = s.trace.hops[t][ul];
        for (const auto& rec : hops) {
          for (const int e : rec.expert_ids) {
            ++agg.counts[ul][static_cast<std::size_t>(e)];
            ++agg.token_counts[ul][static_cast<std::size_t>(e) * V + static_cast<std::size_t>(tok)];
          }
          agg.max_weight_sum[ul] += *std::max_element(rec.weights.begin(), rec.weights.end());
        }
        agg.positions[ul].push_back(hops[static_cast<std::size_t>(geometry_hop)].pos);
      }
    }
  }
  return agg;
}

TraceAggregate collect_traces(const Model& model, const std::vector<Batch>& batches, int n_batches,
                              int geometry_hop) {
  const std::size_t use =
      n_batches <= 0 ? batches.size() : std::min(batches.size(), static_cast<std::size_t>(n_batches));
  std::vector<std::vector<int>> seqs;
  for (std::size_t b = 0; b < use; ++b)
    for (const auto& ex : batches[b]) seqs.push_back(ex.input);
  return collect_traces(model, std::span<const std::vector<int>>(seqs), geometry_hop);
}

// ---------------------------------------------------------------------------
// Layer statistics

LayerStats layer_stats(const TraceAggregate& agg) {
  LayerStats out;
  for (int l = 0; l < agg.n_layers; ++l) {
    const auto ul = static_cast<std::size_t>(l);
    LayerStat s;
    s.layer = l;
    s.counts = agg.counts[ul];
    Vec c(s.counts.begin(), s.counts.end());
    double total = 0.0;
    for (const double v : c) total += v;
    if (total <= 0.0) throw Error(Errc::AllZero, "layer_stats: layer " + std::to_string(l) + " has no activations");
    s.gini = gini(c);
    Vec p(c.size());
    for (std::size_t e = 0; e < c.size(); ++e) p[e] = c[e] / total;
    s.entropy = entropy_nats(p);
    s.mean_max_weight = agg.max_weight_sum[ul] / static_cast<double>(agg.records_per_layer());
    s.dead = static_cast<int>(std::count(s.counts.begin(), s.counts.end(), 0));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Polysemy branching

namespace {

int last_occurrence(std::span<const int> prompt, int token, const char* which) {
  for (std::size_t i = prompt.size(); i-- > 0;)
    if (prompt[i] == token) return static_cast<int>(i);
  throw Error(Errc::TokenAbsent, std::string("polysemy: token absent from prompt ") + which);
}

}  // namespace

PolysemyResult polysemy_branching(const Model& model, std::span<const int> prompt_a, std::span<const int> prompt_b,
                                  int token, const RoutingControls& controls_a, const RoutingControls& controls_b) {
  PolysemyResult r;
  r.token = token;
  r.position_a = last_occurrence(prompt_a, token, "a");
  r.position_b = last_occurrence(prompt_b, token, "b");
  const auto ta = model.forward(prompt_a, controls_a).trace;
  const auto tb = model.forward(prompt_b, controls_b).trace;
  const auto& cfg = model.config();
  r.hop_mean.assign(static_cast<std::size_t>(cfg.hops), 0.0);
  double sum = 0.0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::vector<double> jl;
    std::vector<std::vector<int>> sl;
    for (int h = 0; h < cfg.hops; ++h) {
      const auto& ea = ta.hops[static_cast<std::size_t>(r.position_a)][static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].expert_ids;
      const auto& eb = tb.hops[static_cast<std::size_t>(r.position_b)][static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].expert_ids;
      const double j = jaccard(ea, eb);
      jl.push_back(j);
      r.hop_mean[static_cast<std::size_t>(h)] += j / cfg.n_layers;
      sum += j;
      std::set<int> sa(ea.begin(), ea.end());
      std::vector<int> shared;
      for (const int e : std::set<int>(eb.begin(), eb.end()))
        if (sa.count(e)) shared.push_back(e);
      sl.push_back(std::move(shared));
    }
    r.jaccard.push_back(std::move(jl));
    r.shared.push_back(std::move(sl));
  }
  r.mean = sum / static_cast<double>(cfg.n_layers * cfg.hops);
  return r;
}

// ---------------------------------------------------------------------------
// Token classes

std::string token_class_name(TokenClass c) {
  switch (c) {
    case TokenClass::Function: return "function";
    case TokenClass::HighFreqContent: return "high-freq-content";
    case TokenClass::LowFreqContent: return "low-freq-content";
    case TokenClass::Other: return "other";
  }
  return "other";
}

const std::vector<std::string>& function_words() {
  static const std::vector<std::string> words{
      // determiners and quantifiers
      "a", "an", "the", "this", "that", "these", "those", "my", "your", "his", "her", "its", "our", "their",
      "some", "any", "no", "every", "each", "either", "neither", "all", "both", "few", "many", "much", "more",
      "most", "less", "least", "several", "such", "what", "which", "whose", "another", "other", "enough",
      // prepositions
      "about", "above", "across", "after", "against", "along", "among", "around", "at", "before", "behind",
      "below", "beneath", "beside", "besides", "between", "beyond", "by", "despite", "down", "during", "except",
      "for", "from", "in", "inside", "into", "like", "near", "of", "off", "on", "onto", "out", "outside", "over",
      "past", "since", "through", "throughout", "till", "to", "toward", "towards", "under", "underneath",
      "until", "unto", "up", "upon", "via", "with", "within", "without",
      // conjunctions
      "and", "but", "or", "nor", "so", "yet", "because", "although", "though", "if", "unless", "whereas",
      "while", "whether", "than", "as", "once", "when", "whenever", "where", "wherever", "then",
      // pronouns
      "i", "me", "mine", "myself", "you", "yours", "yourself", "yourselves", "he", "him", "himself", "she",
      "hers", "herself", "it", "itself", "we", "us", "ours", "ourselves", "they", "them", "theirs",
      "themselves", "who", "whom", "whoever", "whatever", "whichever", "someone", "somebody", "something",
      "anyone", "anybody", "anything", "everyone", "everybody", "everything", "nobody", "nothing", "none",
      "one", "oneself",
      // auxiliaries and modals
      "am", "is", "are", "was", "were", "be", "been", "being", "have", "has", "had", "having", "do", "does",
      "did", "doing", "will", "would", "shall", "should", "can", "could", "may", "might", "must", "ought",
      // particles and adverbial function words
      "not", "there", "here", "how", "why", "too", "very", "just", "also", "only", "even", "ever", "never",
      "again", "still", "already",
  };
  return words;
}

std::array<int, 4> TokenLabels::class_sizes() const {
  std::array<int, 4> n{};
  for (const auto c : cls) ++n[static_cast<std::size_t>(c)];
  return n;
}

namespace {

bool is_word(const std::string& s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char ch) { return std::isalnum(ch) != 0; });
}

}  // namespace

TokenLabels label_tokens(const Vocab& vocab, const std::vector<std::string>& function_list, int top_n_content) {
  if (top_n_content < 0) throw Error(Errc::OutOfRange, "top_n_content < 0");
  TokenLabels out;
  out.list_version = kFunctionListVersion;
  const std::unordered_set<std::string> fw(function_list.begin(), function_list.end());
  out.cls.assign(static_cast<std::size_t>(vocab.size()), TokenClass::Other);
  std::vector<int> content;
  for (int id = 0; id < vocab.size(); ++id) {
    if (id == Vocab::kUnk) continue;
    const auto& w = vocab.text(id);
    if (fw.count(w)) {
      out.cls[static_cast<std::size_t>(id)] = TokenClass::Function;
    } else if (is_word(w)) {
      out.cls[static_cast<std::size_t>(id)] = TokenClass::LowFreqContent;
      content.push_back(id);
    }
  }
  std::stable_sort(content.begin(), content.end(), [&](int a, int b) {
    return vocab.freq[static_cast<std::size_t>(a)] > vocab.freq[static_cast<std::size_t>(b)];
  });
  const std::size_t top = std::min(content.size(), static_cast<std::size_t>(top_n_content));
  for (std::size_t i = 0; i < top; ++i) out.cls[static_cast<std::size_t>(content[i])] = TokenClass::HighFreqContent;
  return out;
}

// ---------------------------------------------------------------------------
// Syntax versus frequency

namespace {

Vec flatten(const std::vector<Vec>& rows, std::span<const std::size_t> pick, std::size_t& dim) {
  dim = rows.empty() ? 0 : rows.front().size();
  Vec flat(pick.size() * dim);
  for (std::size_t i = 0; i < pick.size(); ++i)
    std::copy(rows[pick[i]].begin(), rows[pick[i]].end(), flat.begin() + static_cast<std::ptrdiff_t>(i * dim));
  return flat;
}

Vec distance_matrix(const std::vector<Vec>& rows, std::span<const std::size_t> pick) {
  std::size_t dim = 0;
  const Vec flat = flatten(rows, pick, dim);
  Vec dist(pick.size() * pick.size());
  kernels::parallel::cosine_distance_matrix(flat, pick.size(), dim, dist);
  return dist;
}

double mean_silhouette(std::span<const double> dist, std::size_t n_dist, std::span<const int> labels,
                       std::span<const std::size_t> index) {
  Vec s(labels.size());
  kernels::parallel::silhouette_samples(dist, n_dist, labels, 2, index, s);
  double sum = 0.0;
  for (const double v : s) sum += v;
  return sum / static_cast<double>(s.size());
}

// class codes: 0 function, 1 high-freq content, 2 low-freq content
int syntax_group(int c) { return c == 0 ? 0 : 1; }
int freq_group(int c) { return c == 2 ? 1 : 0; }

double delta_stat(std::span<const double> dist, std::size_t n_dist, std::span<const int> classes,
                  std::span<const std::size_t> index) {
  std::vector<int> syn(classes.size()), frq(classes.size());
  for (std::size_t i = 0; i < classes.size(); ++i) {
    syn[i] = syntax_group(classes[i]);
    frq[i] = freq_group(classes[i]);
  }
  return mean_silhouette(dist, n_dist, syn, index) - mean_silhouette(dist, n_dist, frq, index);
}

}  // namespace

SyntaxResult syntax_vs_frequency(const std::vector<std::vector<Vec>>& positions, std::span<const int> tokens,
                                 const TokenLabels& labels, const SyntaxOptions& opt) {
  if (positions.empty()) throw Error(Errc::EmptyInput, "syntax_vs_frequency: no layers");
  for (const auto& layer : positions)
    if (layer.size() != tokens.size()) throw Error(Errc::LengthMismatch, "syntax_vs_frequency: positions/tokens");

  std::vector<std::size_t> pick;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = static_cast<std::size_t>(tokens[i]);
    if (t >= labels.cls.size()) throw Error(Errc::OutOfVocab, "syntax_vs_frequency: token id");
    if (labels.cls[t] != TokenClass::Other) pick.push_back(i);
  }
  if (opt.max_points > 0 && pick.size() > opt.max_points) {
    Rng rng(opt.sample_seed);
    rng.shuffle(pick.begin(), pick.end());
    pick.resize(opt.max_points);
    std::sort(pick.begin(), pick.end());
  }
  std::vector<int> classes(pick.size());
  std::array<int, 3> per_class{};
  for (std::size_t i = 0; i < pick.size(); ++i) {
    classes[i] = static_cast<int>(labels.cls[static_cast<std::size_t>(tokens[pick[i]])]);
    ++per_class[static_cast<std::size_t>(classes[i])];
  }
  for (const int c : per_class)
    if (c < 2)
      throw Error(Errc::InsufficientClassCounts, "syntax_vs_frequency: each class needs at least 2 tokens (have " +
                                                     std::to_string(per_class[0]) + "/" +
                                                     std::to_string(per_class[1]) + "/" +
                                                     std::to_string(per_class[2]) + ")");

  SyntaxResult res;
  const std::size_t n = pick.size();
  for (std::size_t l = 0; l < positions.size(); ++l) {
    const Vec dist = distance_matrix(positions[l], pick);
    SyntaxLayer s;
    s.layer = static_cast<int>(l);
    s.n_points = n;
    std::vector<int> syn(n), frq(n);
    for (std::size_t i = 0; i < n; ++i) {
      syn[i] = syntax_group(classes[i]);
      frq[i] = freq_group(classes[i]);
    }
    s.sil_syntax = mean_silhouette(dist, n, syn, {});
    s.sil_freq = mean_silhouette(dist, n, frq, {});
    s.delta = s.sil_syntax - s.sil_freq;
    const std::string tag = "layer" + std::to_string(l);
    const auto perm = permutation_test(
        [&](std::span<const int> cls) { return delta_stat(dist, n, cls, {}); }, classes, opt.n_perm,
        derive_seed(opt.permutation_seed, tag));
    s.p_value = perm.p_value;
    s.ci = bootstrap_ci(
        n,
        [&](std::span<const std::size_t> idx) {
          std::vector<int> cls(idx.size());
          for (std::size_t i = 0; i < idx.size(); ++i) cls[i] = classes[idx[i]];
          return delta_stat(dist, n, cls, idx);
        },
        opt.n_boot, opt.level, derive_seed(opt.bootstrap_seed, tag));
    s.ci.lo = std::min(s.ci.lo, s.delta);
    s.ci.hi = std::max(s.ci.hi, s.delta);
    res.layers.push_back(s);
  }
  if (res.layers.size() >= 3) {
    Vec depth, delta;
    for (const auto& s : res.layers) {
      depth.push_back(s.layer);
      delta.push_back(s.delta);
    }
    if (std::adjacent_find(delta.begin(), delta.end(), std::not_equal_to<>()) != delta.end())
      res.depth_trend = spearman_test(depth, delta, derive_seed(opt.permutation_seed, "depth"));
  }
  return res;
}

std::vector<MatchedPair> matched_pairs(const Vocab& vocab, const TokenLabels& labels, double ratio_cap,
                                       int max_pairs) {
  if (!(ratio_cap > 1.0)) throw Error(Errc::OutOfRange, "ratio_cap must exceed 1");
  std::vector<int> fw, content;
  for (int id = 0; id < vocab.size(); ++id) {
    if (vocab.freq[static_cast<std::size_t>(id)] <= 0) continue;
    const auto c = labels.cls[static_cast<std::size_t>(id)];
    if (c == TokenClass::Function) fw.push_back(id);
    if (c == TokenClass::HighFreqContent || c == TokenClass::LowFreqContent) content.push_back(id);
  }
  auto freq = [&](int id) { return vocab.freq[static_cast<std::size_t>(id)]; };
  std::stable_sort(fw.begin(), fw.end(), [&](int a, int b) { return freq(a) > freq(b); });
  std::vector<char> used(content.size(), 0);
  std::vector<MatchedPair> out;
  for (const int f : fw) {
    if (max_pairs > 0 && static_cast<int>(out.size()) >= max_pairs) break;
    std::size_t best = content.size();
    double best_ratio = ratio_cap;
    for (std::size_t j = 0; j < content.size(); ++j) {
      if (used[j]) continue;
      const double a = static_cast<double>(freq(f)), b = static_cast<double>(freq(content[j]));
      const double ratio = std::max(a, b) / std::min(a, b);
      if (ratio < best_ratio) {
        best_ratio = ratio;
        best = j;
      }
    }
    if (best == content.size()) continue;
    used[best] = 1;
    MatchedPair p;
    p.function_token = f;
    p.content_token = content[best];
    p.function_freq = freq(f);
    p.content_freq = freq(content[best]);
    out.push_back(std::move(p));
  }
  return out;
}

void score_pairs(std::vector<MatchedPair>& pairs, const std::vector<std::vector<Vec>>& positions,
                 std::span<const int> tokens, int n_perm, std::uint64_t seed, std::size_t max_per_token) {
  for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
    auto& p = pairs[pi];
    std::vector<std::size_t> pick;
    std::vector<int> lab;
    std::size_t nf = 0, nc = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] == p.function_token && nf < max_per_token) {
        pick.push_back(i);
        lab.push_back(0);
        ++nf;
      } else if (tokens[i] == p.content_token && nc < max_per_token) {
        pick.push_back(i);
        lab.push_back(1);
        ++nc;
      }
    }
    p.silhouette.assign(positions.size(), std::nullopt);
    p.p_value.assign(positions.size(), std::nullopt);
    if (nf < 2 || nc < 2) continue;
    for (std::size_t l = 0; l < positions.size(); ++l) {
      const Vec dist = distance_matrix(positions[l], pick);
      const std::size_t n = pick.size();
      const auto r = permutation_test([&](std::span<const int> g) { return mean_silhouette(dist, n, g, {}); }, lab,
                                      n_perm, derive_seed(seed, "pair" + std::to_string(pi) + "/layer" + std::to_string(l)));
      p.silhouette[l] = r.observed;
      p.p_value[l] = r.p_value;
    }
  }
}

// ---------------------------------------------------------------------------
// Enrichment

ClassCounts class_counts(const TraceAggregate& agg, const TokenLabels& labels) {
  if (labels.cls.size() != static_cast<std::size_t>(agg.vocab_size))
    throw Error(Errc::LengthMismatch, "class_counts: labels do not match the vocabulary");
  const auto V = static_cast<std::size_t>(agg.vocab_size);
  ClassCounts out(static_cast<std::size_t>(agg.n_layers),
                  std::vector<std::array<std::int64_t, 2>>(static_cast<std::size_t>(agg.n_experts), {0, 0}));
  for (std::size_t l = 0; l < out.size(); ++l)
    for (std::size_t e = 0; e < out[l].size(); ++e)
      for (std::size_t t = 0; t < V; ++t) {
        const auto c = agg.token_counts[l][e * V + t];
        if (c == 0) continue;
        if (labels.cls[t] == TokenClass::Function) out[l][e][0] += c;
        else if (labels.cls[t] != TokenClass::Other) out[l][e][1] += c;
      }
  return out;
}

std::string tier_for(double odds_ratio, bool fdr, const EnrichmentOptions& opt) {
  if (!fdr) return "none";
  if (odds_ratio > opt.specialist_or) return "specialist";
  if (odds_ratio > opt.enriched_or) return "enriched";
  return "none";
}

std::vector<EnrichmentRow> enrichment(const ClassCounts& counts, const EnrichmentOptions& opt) {
  std::vector<EnrichmentRow> out;
  for (std::size_t l = 0; l < counts.size(); ++l) {
    std::int64_t tf = 0, tc = 0;
    for (const auto& e : counts[l]) {
      tf += e[0];
      tc += e[1];
    }
    const std::size_t first = out.size();
    Vec pvals;
    for (std::size_t e = 0; e < counts[l].size(); ++e) {
      EnrichmentRow r;
      r.layer = static_cast<int>(l);
      r.expert = static_cast<int>(e);
      r.function_count = counts[l][e][0];
      r.content_count = counts[l][e][1];
      const auto o = odds_ratio({r.function_count, r.content_count, tf - r.function_count, tc - r.content_count});
      r.odds_ratio = o.odds_ratio;
      r.p_value = o.p_value;
      pvals.push_back(r.p_value);
      out.push_back(r);
    }
    const auto flags = bh_fdr(pvals, opt.alpha);
    const auto q = bh_adjust(pvals);
    for (std::size_t e = 0; e < pvals.size(); ++e) {
      auto& r = out[first + e];
      // An expert that never fires carries no evidence either way.
      r.fdr = flags[e] && (r.function_count + r.content_count) > 0;
      r.q_value = q[e];
      r.tier = tier_for(r.odds_ratio, r.fdr, opt);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exports

std::string layer_stats_csv(const LayerStats& s) {
  std::ostringstream o;
  o.precision(10);
  o << "layer,gini,entropy_nats,mean_max_weight,dead,counts\n";
  for (const auto& l : s) {
    o << l.layer << ',' << l.gini << ',' << l.entropy << ',' << l.mean_max_weight << ',' << l.dead << ',';
    for (std::size_t e = 0; e < l.counts.size(); ++e) o << (e ? ";" : "") << l.counts[e];
    o << '\n';
  }
  return o.str();
}

nlohmann::json layer_stats_json(const LayerStats& s) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& l : s)
    j.push_back({{"layer", l.layer},
                 {"gini", l.gini},
                 {"entropy_nats", l.entropy},
                 {"mean_max_weight", l.mean_max_weight},
                 {"dead", l.dead},
                 {"counts", l.counts}});
  return j;
}

nlohmann::json polysemy_json(const PolysemyResult& r, const Vocab& vocab) {
  return {{"token", vocab.text(r.token)},
          {"position_a", r.position_a},
          {"position_b", r.position_b},
          {"jaccard", r.jaccard},
          {"shared", r.shared},
          {"hop_mean_jaccard", r.hop_mean},
          {"mean_jaccard", r.mean},
          {"mean_divergence", 1.0 - r.mean}};
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json syntax_json(const SyntaxResult& r, const Vocab& vocab) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& s : r.layers)
    layers.push_back({{"layer", s.layer},
                      {"n_points", s.n_points},
                      {"silhouette_syntax", s.sil_syntax},
                      {"silhouette_frequency", s.sil_freq},
                      {"delta", s.delta},
                      {"ci", {s.ci.lo, s.ci.hi}},
                      {"p_value", s.p_value}});
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) {
    nlohmann::json sil = nlohmann::json::array(), pv = nlohmann::json::array();
    for (const auto& v : p.silhouette) sil.push_back(opt_json(v));
    for (const auto& v : p.p_value) pv.push_back(opt_json(v));
    pairs.push_back({{"function", vocab.text(p.function_token)},
                     {"content", vocab.text(p.content_token)},
                     {"function_freq", p.function_freq},
                     {"content_freq", p.content_freq},
                     {"silhouette", sil},
                     {"p_value", pv}});
  }
  std::map<std::string, std::vector<int>> tiers;
  for (const auto& e : r.enrichment) {
    auto& v = tiers[e.tier];
    if (v.size() <= static_cast<std::size_t>(e.layer)) v.resize(static_cast<std::size_t>(e.layer) + 1, 0);
    ++v[static_cast<std::size_t>(e.layer)];
  }
  nlohmann::json trend = nullptr;
  if (r.depth_trend) trend = {{"rho", r.depth_trend->rho}, {"p_value", r.depth_trend->p_value}};
  return {{"layers", layers}, {"depth_trend", trend}, {"matched_pairs", pairs}, {"tier_counts", tiers}};
}

std::string enrichment_csv(const std::vector<EnrichmentRow>& rows) {
  std::ostringstream o;
  o.precision(10);
  o << "layer,expert,function_count,content_count,odds_ratio,p_value,q_value,fdr,tier\n";
  for (const auto& r : rows)
    o << r.layer << ',' << r.expert << ',' << r.function_count << ',' << r.content_count << ',' << r.odds_ratio
      << ',' << r.p_value << ',' << r.q_value << ',' << (r.fdr ? 1 : 0) << ',' << r.tier << '\n';
  return o.str();
}

}  // namespace stmoe
