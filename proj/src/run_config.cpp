// SPDX-License-Identifier: Apache-2.0
#include "stmoe/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <type_traits>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace stmoe {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& msg) {
  throw Error(Errc::Config, "config key '" + key + "': " + msg);
}

template <class T>
T parse_value(const std::string& key, const std::string& s) {
  if constexpr (std::is_same_v<T, std::string>) {
    return s;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    bad(key, "expected true/false, got '" + s + "'");
  } else {
    T v{};
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || s.empty()) bad(key, "cannot parse '" + s + "'");
    return v;
  }
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  } else {
    return std::to_string(v);
  }
}

// Calls f(key, member) for every scalar field, in echo order.
template <class Self, class F>
void visit_fields(Self& c, F&& f) {
  f("seed", c.seed);
  f("model.preset", c.preset);
  f("corpus.dir", c.corpus_dir);
  f("corpus.max_vocab", c.max_vocab);
  f("corpus.train_tokens", c.corpus.train_tokens);
  f("corpus.valid_tokens", c.corpus.valid_tokens);
  f("corpus.filler_fraction", c.corpus.filler_fraction);
  f("corpus.n_prompts", c.corpus.n_prompts);
  f("corpus.n_control_prompts", c.corpus.n_control_prompts);
  f("train.batch_size", c.train.batch_size);
  f("train.seq_len", c.train.seq_len);
  f("train.lr", c.train.lr);
  f("train.min_lr_ratio", c.train.min_lr_ratio);
  f("train.warmup_steps", c.train.warmup_steps);
  f("train.total_steps", c.train.total_steps);
  f("train.beta1", c.train.beta1);
  f("train.beta2", c.train.beta2);
  f("train.eps", c.train.eps);
  f("train.weight_decay", c.train.weight_decay);
  f("train.grad_clip", c.train.grad_clip);
  f("train.eval_interval", c.train.eval_interval);
  f("analysis.n_batches", c.analysis.n_batches);
  f("analysis.geometry_hop", c.analysis.geometry_hop);
  f("analysis.n_perm", c.analysis.n_perm);
  f("analysis.n_boot", c.analysis.n_boot);
  f("analysis.level", c.analysis.level);
  f("analysis.max_points", c.analysis.max_points);
  f("analysis.top_n_content", c.analysis.top_n_content);
  f("analysis.ratio_cap", c.analysis.ratio_cap);
  f("analysis.max_pairs", c.analysis.max_pairs);
  f("analysis.fdr_alpha", c.analysis.fdr_alpha);
  f("dict.top_k", c.dict.top_k);
  f("dict.hub_random", c.dict.hub_random);
  f("dict.hub_z", c.dict.hub_z);
  f("dict.min_cluster_size", c.dict.min_cluster_size);
  f("dict.eps", c.dict.eps);
  f("lens.prompt", c.lens.prompt);
  f("lens.target", c.lens.target);
  f("polysemy.prompt_a", c.polysemy.prompt_a);
  f("polysemy.prompt_b", c.polysemy.prompt_b);
  f("polysemy.token", c.polysemy.token);
  f("intervene.spec", c.intervene.spec);
  f("intervene.category", c.intervene.category);
  f("intervene.prompt_set", c.intervene.prompt_set);
}

void apply_model_key(ModelConfig& m, const std::string& name, const std::string& v) {
  const std::string key = "model." + name;
  if (name == "d_model") m.d_model = parse_value<int>(key, v);
  else if (name == "n_heads") m.n_heads = parse_value<int>(key, v);
  else if (name == "n_layers") m.n_layers = parse_value<int>(key, v);
  else if (name == "d_space") m.d_space = parse_value<int>(key, v);
  else if (name == "n_experts") m.n_experts = parse_value<int>(key, v);
  else if (name == "top_k") m.top_k = parse_value<int>(key, v);
  else if (name == "tau") m.tau = parse_value<double>(key, v);
  else if (name == "hops") m.hops = parse_value<int>(key, v);
  else if (name == "max_seq") m.max_seq = parse_value<int>(key, v);
  else if (name == "init_std") m.init_std = parse_value<double>(key, v);
  else if (name == "tie_embeddings") m.tie_embeddings = parse_value<bool>(key, v);
  else if (name == "router") {
    try {
      m.router = parse_router_mode(v);
    } catch (const Error&) {
      bad(key, "expected cosine or linear");
    }
  } else bad(key, "unknown model field");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key.rfind("model.", 0) == 0 && key != "model.preset") {
    ModelConfig probe;
    apply_model_key(probe, key.substr(6), value);
    model_overrides[key] = value;
    return;
  }
  bool found = false;
  visit_fields(*this, [&](const char* k, auto& member) {
    if (found || key != k) return;
    found = true;
    member = parse_value<std::decay_t<decltype(member)>>(key, value);
  });
  if (!found) bad(key, "unknown key");
  if (key == "model.preset" && preset != "desk" && preset != "marathon") bad(key, "expected desk or marathon");
}

std::string RunConfig::get(const std::string& key) const {
  if (auto it = model_overrides.find(key); it != model_overrides.end()) return it->second;
  std::string out;
  bool found = false;
  visit_fields(*this, [&](const char* k, const auto& member) {
    if (found || key != k) return;
    found = true;
    out = format_value(member);
  });
  if (!found) bad(key, "unknown key");
  return out;
}

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> out;
  visit_fields(*this, [&](const char* k, const auto&) { out.emplace_back(k); });
  for (const auto& [k, v] : model_overrides) out.push_back(k);
  return out;
}

std::string RunConfig::to_ini() const {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  std::vector<std::string> order;
  std::ostringstream top;
  auto add = [&](const std::string& key, const std::string& value) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      top << key << " = " << value << '\n';
      return;
    }
    const auto sec = key.substr(0, dot);
    if (!sections.count(sec)) order.push_back(sec);
    sections[sec].emplace_back(key.substr(dot + 1), value);
  };
  visit_fields(*this, [&](const char* k, const auto& member) {
    add(k, format_value(member));
    if (std::string(k) == "model.preset")
      for (const auto& [mk, mv] : model_overrides) add(mk, mv);
  });
  std::ostringstream o;
  o << top.str();
  for (const auto& sec : order) {
    o << "\n[" << sec << "]\n";
    for (const auto& [k, v] : sections[sec]) o << k << " = " << v << '\n';
  }
  return o.str();
}

RunConfig RunConfig::from_ini_text(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(Errc::Config, std::string("config: ") + e.what());
  }
  RunConfig c;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      c.set(name, node.data());
      continue;
    }
    for (const auto& [k, v] : node) {
      if (!v.empty()) throw Error(Errc::Config, "config: nested section under [" + name + "]");
      c.set(name + "." + k, v.data());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Config, "cannot open config " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return from_ini_text(s.str());
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error(Errc::Config, "override '" + assignment + "': expected key=value");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::uint64_t RunConfig::sub_seed(const std::string& name) const { return derive_seed(seed, name); }

ModelConfig RunConfig::model_config(int vocab_size) const {
  ModelConfig m = preset == "marathon" ? ModelConfig::marathon(vocab_size) : ModelConfig::desk(vocab_size);
  for (const auto& [k, v] : model_overrides) apply_model_key(m, k.substr(6), v);
  m.vocab_size = vocab_size;
  m.validate();
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = sub_seed("train");
  return t;
}

CorpusConfig RunConfig::corpus_config() const {
  CorpusConfig c = corpus;
  c.seed = sub_seed("corpus");
  return c;
}

void RunConfig::validate() const {
  corpus.validate();
  train.validate();
  if (max_vocab < 2) bad("corpus.max_vocab", "must be at least 2");
  if (analysis.n_batches < 0) bad("analysis.n_batches", "must be >= 0");
  if (analysis.n_perm < 1) bad("analysis.n_perm", "must be >= 1");
  if (analysis.n_boot < 1) bad("analysis.n_boot", "must be >= 1");
  if (!(analysis.level > 0.0 && analysis.level < 1.0)) bad("analysis.level", "must be in (0, 1)");
  if (analysis.max_points < 0) bad("analysis.max_points", "must be >= 0");
  if (analysis.top_n_content < 0) bad("analysis.top_n_content", "must be >= 0");
  if (!(analysis.ratio_cap > 1.0)) bad("analysis.ratio_cap", "must exceed 1");
  if (!(analysis.fdr_alpha > 0.0 && analysis.fdr_alpha < 1.0)) bad("analysis.fdr_alpha", "must be in (0, 1)");
  if (dict.top_k < 1) bad("dict.top_k", "must be >= 1");
  if (dict.hub_random < 1) bad("dict.hub_random", "must be >= 1");
  if (dict.min_cluster_size < 1) bad("dict.min_cluster_size", "must be >= 1");
  if (!(dict.eps > 0.0)) bad("dict.eps", "must be positive");
  if (intervene.prompt_set != "prompts" && intervene.prompt_set != "relevant" && intervene.prompt_set != "control")
    bad("intervene.prompt_set", "expected prompts, relevant or control");
  (void)model_config(2);
}

}  // namespace stmoe
