// SPDX-License-Identifier: Apache-2.0
#include "stmoe/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace stmoe {

namespace {

void check_index(const ModelConfig& cfg, int layer, int expert, const char* what) {
  if (layer < 0 || layer >= cfg.n_layers || expert < 0 || expert >= cfg.n_experts)
    throw Error(Errc::BadIndex, std::string(what) + ": (" + std::to_string(layer) + ", " + std::to_string(expert) + ")");
}

Vec last_distribution(const ForwardResult<float>& r, int vocab) {
  const auto v = static_cast<std::size_t>(vocab);
  const std::size_t off = r.logits.size() - v;
  Vec l(r.logits.begin() + static_cast<long>(off), r.logits.end());
  return softmax_temp<double>(l, 1.0);
}

double prompt_nll(const ForwardResult<float>& r, std::span<const int> prompt, int vocab) {
  if (prompt.size() < 2) return 0.0;
  const auto v = static_cast<std::size_t>(vocab);
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < prompt.size(); ++t) {
    Vec l(r.logits.begin() + static_cast<long>(t * v), r.logits.begin() + static_cast<long>((t + 1) * v));
    const double mx = *std::max_element(l.begin(), l.end());
    double z = 0.0;
    for (double x : l) z += std::exp(x - mx);
    total += std::log(z) + mx - l[static_cast<std::size_t>(prompt[t + 1])];
  }
  return total / static_cast<double>(prompt.size() - 1);
}

}  // namespace

ModelView apply_knockout(ModelView view, int layer, int expert) {
  check_index(view.model().config(), layer, expert, "knockout");
  view.controls().knockout[layer].insert(expert);
  return view;
}

ModelView apply_suppression(ModelView view, int layer, const std::set<int>& experts) {
  const auto& cfg = view.model().config();
  if (experts.empty()) return view;
  for (int e : experts) check_index(cfg, layer, e, "suppression");
  auto& set = view.controls().suppress[layer];
  set.insert(experts.begin(), experts.end());
  if (cfg.n_experts - static_cast<int>(set.size()) < cfg.top_k)
    throw Error(Errc::InsufficientCandidates, "suppression leaves " + std::to_string(cfg.n_experts - static_cast<int>(set.size())) +
                                                  " experts for top-" + std::to_string(cfg.top_k));
  return view;
}

ModelView apply_surgery(ModelView view, int layer, int expert, const Vec& replacement) {
  const auto& cfg = view.model().config();
  check_index(cfg, layer, expert, "surgery");
  if (static_cast<int>(replacement.size()) != cfg.d_model)
    throw Error(Errc::ShapeMismatch, "surgery replacement has " + std::to_string(replacement.size()) + " entries");
  for (double x : replacement)
    if (!std::isfinite(x)) throw Error(Errc::OutOfRange, "surgery replacement is not finite");
  view.controls().surgery[layer][expert] = replacement;
  return view;
}

ModelView apply_steer(ModelView view, int layer, int expert, double lambda) {
  const auto& cfg = view.model().config();
  check_index(cfg, layer, expert, "steer");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error(Errc::OutOfRange, "steer: lambda must be >= 0");
  if (cfg.router == RouterMode::Linear) {
    view.controls().linear_bias[layer][expert] += lambda;
    return view;
  }
  const auto c = view.model().bank(layer).centroid(expert);
  view.controls().steer.push_back({layer, l2_normalize<double>(Vec(c.begin(), c.end())), lambda});
  return view;
}

std::set<int> suppression_cluster(const Model& model, int layer, int expert, int n) {
  const auto& cfg = model.config();
  check_index(cfg, layer, expert, "suppression cluster");
  if (n < 0 || n > cfg.n_experts) throw Error(Errc::OutOfRange, "suppression cluster size " + std::to_string(n));
  if (n == 0) return {};
  const auto bank = model.bank(layer);
  const auto c0 = bank.centroid(expert);
  const Vec target(c0.begin(), c0.end());
  Vec sims(static_cast<std::size_t>(cfg.n_experts));
  for (int e = 0; e < cfg.n_experts; ++e) {
    const auto c = bank.centroid(e);
    sims[static_cast<std::size_t>(e)] = e == expert ? 2.0 : cosine_sim<double>(target, Vec(c.begin(), c.end()));
  }
  const auto ids = top_k<double>(sims, n);
  return {ids.begin(), ids.end()};
}

double selection_frequency(const ModelView& view, int layer, int expert, const std::vector<std::vector<int>>& prompts) {
  std::size_t hit = 0, total = 0;
  for (const auto& p : prompts) {
    const auto r = view.forward(p);
    for (const auto& tok : r.trace.hops) {
      for (const auto& rec : tok[static_cast<std::size_t>(layer)]) {
        ++total;
        hit += std::count(rec.expert_ids.begin(), rec.expert_ids.end(), expert) > 0 ? 1 : 0;
      }
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

double category_mass(std::span<const double> dist, const std::vector<int>& category) {
  if (category.empty()) throw Error(Errc::EmptyInput, "category_mass: empty category");
  double s = 0.0;
  for (int id : category) {
    if (id < 0 || static_cast<std::size_t>(id) >= dist.size()) throw Error(Errc::OutOfVocab, "category id " + std::to_string(id));
    s += dist[static_cast<std::size_t>(id)];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Specs

std::string variant_name(InterventionSpec::Variant v) {
  switch (v) {
    case InterventionSpec::Variant::Knockout: return "knockout";
    case InterventionSpec::Variant::Suppress: return "suppress";
    case InterventionSpec::Variant::Steer: return "steer";
    case InterventionSpec::Variant::Surgery: return "surgery";
    case InterventionSpec::Variant::Compose: return "compose";
  }
  return "?";
}

void InterventionSpec::validate(const ModelConfig& cfg, const std::string& path) const {
  auto fail = [&](const std::string& field, const std::string& msg) {
    throw Error(Errc::InvalidSpec, path + "." + field + ": " + msg);
  };
  if (variant == Variant::Compose) {
    if (parts.size() != 2) fail("parts", "compose needs exactly two sub-specs");
    for (std::size_t i = 0; i < 2; ++i) {
      if (parts[i].variant != Variant::Steer) fail("parts[" + std::to_string(i) + "].variant", "must be steer");
      parts[i].validate(cfg, path + ".parts[" + std::to_string(i) + "]");
    }
    return;
  }
  if (layer < 0 || layer >= cfg.n_layers) fail("layer", "out of range [0, " + std::to_string(cfg.n_layers) + ")");
  if (experts.empty() && !(variant == Variant::Suppress && cluster_size == 0)) fail("experts", "missing");
  for (std::size_t i = 0; i < experts.size(); ++i)
    if (experts[i] < 0 || experts[i] >= cfg.n_experts)
      fail("experts[" + std::to_string(i) + "]", "out of range [0, " + std::to_string(cfg.n_experts) + ")");
  switch (variant) {
    case Variant::Steer:
      if (experts.size() != 1) fail("experts", "steer takes one expert");
      if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda", "must be finite and >= 0");
      for (std::size_t i = 0; i < lambdas.size(); ++i) {
        if (!(lambdas[i] >= 0.0)) fail("lambdas[" + std::to_string(i) + "]", "must be >= 0");
        if (i && lambdas[i] < lambdas[i - 1]) fail("lambdas", "must be sorted ascending");
      }
      if (!lambdas.empty() && lambdas.front() != 0.0) fail("lambdas", "must include 0");
      break;
    case Variant::Suppress: {
      if (cluster_size < 0 || cluster_size > cfg.n_experts) fail("n", "out of range");
      const int removed = std::max<int>(cluster_size, static_cast<int>(experts.size()));
      if (cfg.n_experts - removed < cfg.top_k) fail("n", "leaves fewer than top_k experts");
      break;
    }
    case Variant::Surgery:
      if (experts.size() != 1) fail("experts", "surgery takes one expert");
      if (replacement_from) {
        if (replacement_from->first < 0 || replacement_from->first >= cfg.n_layers || replacement_from->second < 0 ||
            replacement_from->second >= cfg.n_experts)
          fail("replacement_from", "out of range");
      } else if (static_cast<int>(replacement.size()) != cfg.d_model) {
        fail("replacement", "needs " + std::to_string(cfg.d_model) + " entries");
      }
      break;
    default: break;
  }
}

InterventionSpec parse_spec(const nlohmann::json& j, const std::string& path) {
  auto fail = [&](const std::string& field, const std::string& msg) {
    throw Error(Errc::InvalidSpec, path + (field.empty() ? "" : "." + field) + ": " + msg);
  };
  if (!j.is_object()) fail("", "expected an object");
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key)) return false;
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
      fail(key, "wrong type");
    }
    return true;
  };
  InterventionSpec s;
  std::string variant;
  if (!get("variant", variant)) fail("variant", "missing");
  if (variant == "knockout") s.variant = InterventionSpec::Variant::Knockout;
  else if (variant == "suppress") s.variant = InterventionSpec::Variant::Suppress;
  else if (variant == "steer") s.variant = InterventionSpec::Variant::Steer;
  else if (variant == "surgery") s.variant = InterventionSpec::Variant::Surgery;
  else if (variant == "compose") s.variant = InterventionSpec::Variant::Compose;
  else fail("variant", "unknown variant '" + variant + "'");

  if (s.variant == InterventionSpec::Variant::Compose) {
    if (!j.contains("a") || !j.contains("b")) fail("a", "compose needs sub-specs 'a' and 'b'");
    s.parts.push_back(parse_spec(j.at("a"), path + ".a"));
    s.parts.push_back(parse_spec(j.at("b"), path + ".b"));
    get("category_b", s.category_b);
    return s;
  }
  get("layer", s.layer);
  int expert = -1;
  if (get("expert", expert)) s.experts.push_back(expert);
  std::vector<int> experts;
  if (get("experts", experts)) s.experts.insert(s.experts.end(), experts.begin(), experts.end());
  get("n", s.cluster_size);
  if (j.contains("lambda")) {
    if (j.at("lambda").is_array()) get("lambda", s.lambdas);
    else get("lambda", s.lambda);
  }
  get("replacement", s.replacement);
  if (j.contains("replacement_from")) {
    std::vector<int> from;
    get("replacement_from", from);
    if (from.size() != 2) fail("replacement_from", "expected [layer, expert]");
    s.replacement_from = std::make_pair(from[0], from[1]);
  }
  get("last_position_only", s.last_position_only);
  return s;
}

ModelView apply_spec(ModelView view, const InterventionSpec& spec) {
  const auto& model = view.model();
  spec.validate(model.config());
  if (spec.last_position_only) view.controls().steer_last_position_only = true;
  switch (spec.variant) {
    case InterventionSpec::Variant::Knockout:
      for (int e : spec.experts) view = apply_knockout(std::move(view), spec.layer, e);
      return view;
    case InterventionSpec::Variant::Suppress: {
      std::set<int> set(spec.experts.begin(), spec.experts.end());
      if (spec.cluster_size > 0) set = suppression_cluster(model, spec.layer, spec.experts.at(0), spec.cluster_size);
      return apply_suppression(std::move(view), spec.layer, set);
    }
    case InterventionSpec::Variant::Steer: return apply_steer(std::move(view), spec.layer, spec.experts[0], spec.lambda);
    case InterventionSpec::Variant::Surgery: {
      Vec rep = spec.replacement;
      if (spec.replacement_from) {
        const auto up = model.bank(spec.replacement_from->first).up(spec.replacement_from->second);
        rep.assign(up.begin(), up.end());
      }
      return apply_surgery(std::move(view), spec.layer, spec.experts[0], rep);
    }
    case InterventionSpec::Variant::Compose:
      for (const auto& p : spec.parts) view = apply_spec(std::move(view), p);
      return view;
  }
  return view;
}

// ---------------------------------------------------------------------------
// Harness

ReportAggregate aggregate_rows(const std::vector<PromptRow>& rows) {
  ReportAggregate a;
  Vec deltas;
  double kl = 0.0;
  int positive = 0;
  for (const auto& r : rows) {
    kl += r.kl;
    if (r.flagged) {
      ++a.n_flagged;
      continue;
    }
    deltas.push_back(r.delta_pct);
    positive += r.delta_pct > 0 ? 1 : 0;
  }
  if (!rows.empty()) a.mean_kl = kl / static_cast<double>(rows.size());
  if (!deltas.empty()) {
    a.median_delta_pct = median(deltas);
    a.q25 = quantile(deltas, 0.25);
    a.q75 = quantile(deltas, 0.75);
    a.percent_positive = 100.0 * positive / static_cast<double>(deltas.size());
  }
  return a;
}

ExperimentReport run_experiment(const ModelView& modified, const std::vector<std::vector<int>>& prompts,
                                const std::vector<int>& category) {
  if (prompts.empty()) throw Error(Errc::EmptyInput, "run_experiment: no prompts");
  const auto& model = modified.model();
  const int vsz = model.config().vocab_size;
  ExperimentReport rep;
  rep.rows.resize(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto base = model.forward(prompts[i], {}, TraceLevel::None);
    const auto mod = modified.forward(prompts[i], TraceLevel::None);
    const Vec pb = last_distribution(base, vsz), pm = last_distribution(mod, vsz);
    PromptRow& r = rep.rows[i];
    r.prompt_id = static_cast<int>(i);
    r.base_mass = category_mass(pb, category);
    r.mod_mass = category_mass(pm, category);
    r.flagged = r.base_mass < 1e-8;
    r.delta_pct = r.flagged ? 0.0 : (r.mod_mass - r.base_mass) / r.base_mass * 100.0;
    r.kl = kl_divergence(pb, pm);
    r.nll_delta = prompt_nll(mod, prompts[i], vsz) - prompt_nll(base, prompts[i], vsz);
  }
  rep.aggregate = aggregate_rows(rep.rows);
  return rep;
}

std::vector<DosePoint> dose_response(const Model& model, int layer, int expert, const std::vector<double>& lambdas,
                                     const std::vector<std::vector<int>>& prompts, const std::vector<int>& category) {
  if (lambdas.empty() || lambdas.front() != 0.0 || !std::is_sorted(lambdas.begin(), lambdas.end()))
    throw Error(Errc::InvalidSpec, "dose_response: grid must be ascending and start at 0");
  std::vector<DosePoint> out;
  const auto c = model.bank(layer).centroid(expert);
  const Vec cv(c.begin(), c.end());
  for (double lam : lambdas) {
    DosePoint p;
    p.lambda = lam;
    const ModelView view = apply_steer(model, layer, expert, lam);
    p.report = run_experiment(view, prompts, category);
    std::size_t n = 0, hit = 0, total = 0;
    double cs = 0.0;
    for (const auto& pr : prompts) {
      const auto r = view.forward(pr);
      for (const auto& tok : r.trace.hops) {
        const auto& recs = tok[static_cast<std::size_t>(layer)];
        if (model.config().router == RouterMode::Cosine) {
          cs += cosine_sim<double>(recs[0].pos, cv);
          ++n;
        }
        for (const auto& rec : recs) {
          ++total;
          hit += std::count(rec.expert_ids.begin(), rec.expert_ids.end(), expert) > 0 ? 1 : 0;
        }
      }
    }
    p.mean_centroid_cos = n ? cs / static_cast<double>(n) : 0.0;
    p.selection_frequency = total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
    out.push_back(std::move(p));
  }
  return out;
}

const char* CompositionReport::condition_name(int c) {
  static const char* names[] = {"none", "A", "B", "A+B"};
  return names[c];
}

CompositionReport compose(const Model& model, const InterventionSpec& a, const InterventionSpec& b,
                          const std::vector<std::vector<int>>& prompts, const std::vector<int>& cat_a,
                          const std::vector<int>& cat_b) {
  if (a.variant != InterventionSpec::Variant::Steer || b.variant != InterventionSpec::Variant::Steer)
    throw Error(Errc::InvalidSpec, "compose: both specs must be steering specs");
  CompositionReport rep;
  rep.same_layer = a.layer == b.layer;
  const ModelView none(model);
  const ModelView va = apply_spec(none, a);
  const ModelView vb = apply_spec(none, b);
  const ModelView vab = apply_spec(va, b);
  for (const ModelView* v : {&none, &va, &vb, &vab})
    rep.reports.push_back({run_experiment(*v, prompts, cat_a), run_experiment(*v, prompts, cat_b)});
  rep.solo_a = rep.reports[1][0].aggregate.median_delta_pct;
  rep.solo_b = rep.reports[2][1].aggregate.median_delta_pct;
  rep.composed_a = rep.reports[3][0].aggregate.median_delta_pct;
  rep.composed_b = rep.reports[3][1].aggregate.median_delta_pct;
  rep.crosstalk_ab = rep.reports[1][1].aggregate.median_delta_pct;
  rep.crosstalk_ba = rep.reports[2][0].aggregate.median_delta_pct;
  rep.interference_a = std::fabs(rep.composed_a - rep.solo_a);
  rep.interference_b = std::fabs(rep.composed_b - rep.solo_b);
  return rep;
}

RwReport read_write_cosine(const Model& model) {
  const auto& cfg = model.config();
  RwReport rep;
  rep.histogram.assign(20, 0);
  double sum = 0.0;
  int n = 0, below = 0, above = 0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto bank = model.bank(l);
    for (int e = 0; e < cfg.n_experts; ++e) {
      const auto dn = bank.down(e), up = bank.up(e);
      const Vec a(dn.begin(), dn.end()), b(up.begin(), up.end());
      RwRow row{l, e, 0.0, norm2<double>(a) <= kNormEps || norm2<double>(b) <= kNormEps};
      if (row.zero_norm) {
        ++rep.n_zero_norm;
      } else {
        row.cos = cosine_sim<double>(a, b);
        sum += row.cos;
        ++n;
        below += std::fabs(row.cos) < 0.2 ? 1 : 0;
        above += std::fabs(row.cos) > 0.8 ? 1 : 0;
        const int bin = std::clamp(static_cast<int>((row.cos + 1.0) / 2.0 * 20.0), 0, 19);
        ++rep.histogram[static_cast<std::size_t>(bin)];
      }
      rep.rows.push_back(row);
    }
  }
  if (n) {
    rep.mean = sum / n;
    rep.frac_below_02 = static_cast<double>(below) / n;
    rep.frac_above_08 = static_cast<double>(above) / n;
  }
  return rep;
}

std::string report_csv(const ExperimentReport& r, const std::vector<std::string>& prompts) {
  std::ostringstream out;
  out.precision(10);
  out << "prompt_id,base_mass,mod_mass,delta_pct,flagged,kl,nll_delta";
  if (!prompts.empty()) out << ",prompt";
  out << '\n';
  for (const auto& row : r.rows) {
    out << row.prompt_id << ',' << row.base_mass << ',' << row.mod_mass << ',';
    if (!row.flagged) out << row.delta_pct;
    out << ',' << (row.flagged ? 1 : 0) << ',' << row.kl << ',' << row.nll_delta;
    if (!prompts.empty()) out << ",\"" << prompts.at(static_cast<std::size_t>(row.prompt_id)) << '"';
    out << '\n';
  }
  return out.str();
}

nlohmann::json aggregate_json(const ReportAggregate& a) {
  return {{"median_delta_pct", a.median_delta_pct}, {"iqr", {a.q25, a.q75}},     {"percent_positive", a.percent_positive},
          {"mean_kl", a.mean_kl},                   {"n_flagged", a.n_flagged}};
}

nlohmann::json composition_json(const CompositionReport& c) {
  nlohmann::json conds = nlohmann::json::object();
  for (int i = 0; i < 4; ++i)
    conds[CompositionReport::condition_name(i)] = {
        {"category_a", aggregate_json(c.reports[static_cast<std::size_t>(i)][0].aggregate)},
        {"category_b", aggregate_json(c.reports[static_cast<std::size_t>(i)][1].aggregate)}};
  return {{"same_layer", c.same_layer},     {"conditions", conds},           {"solo_a", c.solo_a},
          {"solo_b", c.solo_b},             {"composed_a", c.composed_a},   {"composed_b", c.composed_b},
          {"crosstalk_ab", c.crosstalk_ab}, {"crosstalk_ba", c.crosstalk_ba}, {"interference_a", c.interference_a},
          {"interference_b", c.interference_b}};
}

std::string rw_csv(const RwReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << "layer,expert,cos,zero_norm\n";
  for (const auto& row : r.rows) out << row.layer << ',' << row.expert << ',' << row.cos << ',' << (row.zero_norm ? 1 : 0) << '\n';
  return out.str();
}

nlohmann::json rw_json(const RwReport& r) {
  return {{"mean", r.mean},          {"frac_abs_below_0.2", r.frac_below_02}, {"frac_abs_above_0.8", r.frac_above_08},
          {"n_zero_norm", r.n_zero_norm}, {"histogram", r.histogram},          {"n_experts", r.rows.size()}};
}

}  // namespace stmoe
