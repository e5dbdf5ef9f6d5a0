// SPDX-License-Identifier: Apache-2.0
//
// stmoe: corpus synthesis, training, analyses and intervention experiments.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "stmoe/analysis.hpp"
#include "stmoe/checkpoint.hpp"
#include "stmoe/corpus.hpp"
#include "stmoe/dictionary.hpp"
#include "stmoe/interventions.hpp"
#include "stmoe/lens.hpp"
#include "stmoe/report.hpp"
#include "stmoe/run_config.hpp"
#include "stmoe/trainer.hpp"
#include "stmoe/vocab.hpp"

namespace fs = std::filesystem;
using namespace stmoe;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "stmoe-out";
  std::string checkpoint;
  std::string preset;
  std::vector<std::string> overrides;
  // subcommand flags mapped onto config keys, applied before --override
  std::vector<std::pair<std::string, std::string>> flag_keys;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (!c.preset.empty()) cfg.set("model.preset", c.preset);
  if (c.seed) cfg.seed = *c.seed;
  for (const auto& [k, v] : c.flag_keys)
    if (!v.empty()) cfg.set(k, v);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  cfg.validate();
  return cfg;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct CorpusFiles {
  std::string train;
  std::string valid;
  std::vector<CategorySpec> categories;
};

CorpusFiles load_corpus(const RunConfig& cfg) {
  if (cfg.corpus_dir.empty()) throw UsageError("no corpus directory (use --corpus or corpus.dir)");
  const fs::path dir = cfg.corpus_dir;
  if (!fs::is_directory(dir)) throw Error(Errc::Io, "corpus directory not found: " + dir.string());
  CorpusFiles c;
  c.train = read_file(dir / "train.txt");
  c.valid = read_file(dir / "valid.txt");
  if (fs::is_directory(dir / "categories")) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir / "categories"))
      if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) c.categories.push_back(load_category(f));
  }
  return c;
}

Checkpoint need_checkpoint(const Common& c) {
  if (c.checkpoint.empty()) throw UsageError("--checkpoint is required");
  return load_checkpoint(c.checkpoint);
}

ReportBundle open_bundle(const Common& c, const RunConfig& cfg, const std::string& command) {
  ReportBundle b(c.out, command, cfg.seed);
  b.write("config.ini", cfg.to_ini());
  return b;
}

std::vector<std::vector<int>> encode_all(const std::vector<std::string>& texts, const Vocab& vocab) {
  std::vector<std::vector<int>> out;
  for (const auto& t : texts) out.push_back(encode(t, vocab));
  return out;
}

int word_id(const Vocab& vocab, const std::string& w, const char* what) {
  if (!vocab.contains(w)) throw Error(Errc::OutOfVocab, std::string(what) + " '" + w + "' is not in the vocabulary");
  return vocab.id(w);
}

// ---------------------------------------------------------------------------

void cmd_synth_corpus(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto pc = synth_corpus(cfg.corpus_config());
  const Vocab vocab = build_vocab(pc.train_text, cfg.max_vocab);
  for (const auto& cat : pc.categories)
    if (cat.in_vocab_fraction(vocab) < 1.0)
      throw Error(Errc::NoSeedsInVocab, "category " + cat.name + " has seeds outside the vocabulary");
  auto b = open_bundle(c, cfg, "synth-corpus");
  b.write("train.txt", pc.train_text);
  b.write("valid.txt", pc.valid_text);
  std::string ctrl;
  for (const auto& p : pc.control_prompts) ctrl += p + "\n";
  b.write("control_prompts.txt", ctrl);
  nlohmann::json names = nlohmann::json::array();
  for (const auto& cat : pc.categories) {
    b.write_json("categories/" + cat.name + ".json", nlohmann::json(cat));
    names.push_back(cat.name);
  }
  b.write_json("corpus.json", {{"categories", names},
                               {"n_categories", pc.categories.size()},
                               {"train_tokens", tokenize(pc.train_text).size()},
                               {"valid_tokens", tokenize(pc.valid_text).size()},
                               {"vocab_size", vocab.size()}});
  b.finalize();
}

void cmd_train(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto corpus = load_corpus(cfg);
  const Vocab vocab = build_vocab(corpus.train, cfg.max_vocab);
  const auto tr = encode_documents(corpus.train, vocab);
  const auto va = encode_documents(corpus.valid, vocab);
  const TrainConfig tc = cfg.train_config();
  Model model(cfg.model_config(vocab.size()), derive_seed(tc.seed, "init"));
  auto b = open_bundle(c, cfg, "train");
  fs::remove(b.path("metrics.csv"));
  MetricsLog log(b.path("metrics.csv"));
  const auto res = train(model, tr, va, tc, [&](const MetricsRow& r) {
    log.append(r);
    if (r.ppl > 0) std::fprintf(stderr, "step %lld loss %.4f val_ppl %.3f\n", static_cast<long long>(r.step), r.loss, r.ppl);
  });
  b.add_existing("metrics.csv");
  save_checkpoint(b.path("model.ckpt"), model, vocab, tc.total_steps, tc.seed);
  b.add_existing("model.ckpt");
  b.write_json("train.json", {{"steps", tc.total_steps},
                              {"final_ppl", res.final_ppl},
                              {"unigram_ppl", unigram_ppl(tr, va, vocab.size())},
                              {"vocab_size", vocab.size()},
                              {"model", config_to_json(model.config())}});
  b.finalize();
}

void cmd_eval(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto ck = need_checkpoint(c);
  const auto corpus = load_corpus(cfg);
  const auto tr = encode_documents(corpus.train, ck.vocab);
  const auto va = encode_documents(corpus.valid, ck.vocab);
  const double ppl = evaluate_ppl(ck.model, va, cfg.train.seq_len);
  const double uni = unigram_ppl(tr, va, ck.vocab.size());
  auto b = open_bundle(c, cfg, "eval");
  b.write_json("eval.json", {{"ppl", ppl}, {"unigram_ppl", uni}, {"below_unigram", ppl < uni}});
  b.finalize();
  std::printf("ppl %.4f unigram %.4f\n", ppl, uni);
}

void cmd_lens(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto ck = need_checkpoint(c);
  if (cfg.lens.prompt.empty() || cfg.lens.target.empty()) throw UsageError("lens needs --prompt and --target");
  const auto prompt = encode(cfg.lens.prompt, ck.vocab);
  const int target = word_id(ck.vocab, cfg.lens.target, "target");
  const auto curve = lens_trace(prompt, target, ck.model);
  std::ostringstream csv;
  csv.precision(10);
  csv << "layer,hop,stage,p,rank\n";
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : curve.points) {
    csv << p.layer << ',' << p.hop << ',' << (p.after ? "after" : "before") << ',' << p.p << ',' << p.rank << '\n';
    pts.push_back({{"layer", p.layer}, {"hop", p.hop}, {"stage", p.after ? "after" : "before"}, {"p", p.p}, {"rank", p.rank}});
  }
  auto b = open_bundle(c, cfg, "lens");
  b.write("lens.csv", csv.str());
  b.write_json("lens.json", {{"prompt", cfg.lens.prompt}, {"target", cfg.lens.target}, {"points", pts}});
  b.finalize();
}

std::vector<DictEntry> hub_filtered_dictionary(const RunConfig& cfg, const Model& model) {
  auto dict = build_dictionary(model, cfg.dict.top_k);
  apply_hub_filter(dict, model, cfg.dict.hub_random, cfg.sub_seed("hub"), cfg.dict.hub_z);
  return dict;
}

void cmd_dict(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto ck = need_checkpoint(c);
  auto dict = hub_filtered_dictionary(cfg, ck.model);
  auto b = open_bundle(c, cfg, "dict");
  if (!cfg.corpus_dir.empty()) {
    const auto corpus = load_corpus(cfg);
    label_dictionary(dict, corpus.categories, ck.vocab);
    nlohmann::json disc = nlohmann::json::object();
    for (const auto& cat : corpus.categories) {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& cand : discover_category(cat, dict, ck.vocab))
        rows.push_back({{"layer", cand.layer},
                        {"expert", cand.expert},
                        {"overlap", cand.overlap},
                        {"overlap_fraction", cand.overlap_fraction},
                        {"score_sum", cand.score_sum}});
      disc[cat.name] = rows;
    }
    b.write_json("discovery.json", disc);
  }
  b.write("dictionary.csv", dictionary_csv(dict, ck.vocab));
  b.write("dictionary.json", dictionary_json(dict, ck.vocab));
  b.finalize();
}

void cmd_cluster(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto ck = need_checkpoint(c);
  const auto dict = hub_filtered_dictionary(cfg, ck.model);
  const auto cl = cluster_experts(dict, ck.model, cfg.dict.min_cluster_size, cfg.dict.eps);
  auto b = open_bundle(c, cfg, "cluster");
  b.write("clusters.json", clusters_json(cl, ck.vocab));
  b.finalize();
}

TraceAggregate traces_for(const RunConfig& cfg, const Checkpoint& ck) {
  const auto corpus = load_corpus(cfg);
  const auto va = encode_documents(corpus.valid, ck.vocab);
  TrainConfig tc = cfg.train;
  tc.seq_len = std::min(tc.seq_len, ck.model.config().max_seq);
  const auto batches = make_batches(va, tc, cfg.sub_seed("sample"));
  return collect_traces(ck.model, batches, cfg.analysis.n_batches, cfg.analysis.geometry_hop);
}

void cmd_stats(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto ck = need_checkpoint(c);
  const auto stats = layer_stats(traces_for(cfg, ck));
  auto b = open_bundle(c, cfg, "stats");
  b.write("layer_stats.csv", layer_stats_csv(stats));
  b.write_json("layer_stats.json", layer_stats_json(stats));
  b.finalize();
}

void cmd_polysemy(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto ck = need_checkpoint(c);
  const auto& p = cfg.polysemy;
  if (p.prompt_a.empty() || p.prompt_b.empty() || p.token.empty())
    throw UsageError("polysemy needs --prompt-a, --prompt-b and --token");
  const int tok = word_id(ck.vocab, p.token, "token");
  const auto r = polysemy_branching(ck.model, encode(p.prompt_a, ck.vocab), encode(p.prompt_b, ck.vocab), tok);
  auto j = polysemy_json(r, ck.vocab);
  nlohmann::json decoded = nlohmann::json::array();
  for (std::size_t l = 0; l < r.shared.size(); ++l) {
    std::set<int> experts;
    for (const auto& hop : r.shared[l]) experts.insert(hop.begin(), hop.end());
    for (const int e : experts) {
      const auto d = decode_expert(static_cast<int>(l), e, ck.model, cfg.dict.top_k);
      nlohmann::json words = nlohmann::json::array();
      for (const auto& [id, s] : d.top) words.push_back(ck.vocab.text(id));
      decoded.push_back({{"layer", l}, {"expert", e}, {"top", words}});
    }
  }
  j["shared_decoded"] = decoded;
  auto b = open_bundle(c, cfg, "polysemy");
  b.write_json("polysemy.json", j);
  b.finalize();
}

void cmd_syntax(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto ck = need_checkpoint(c);
  const auto agg = traces_for(cfg, ck);
  const auto labels = label_tokens(ck.vocab, function_words(), cfg.analysis.top_n_content);
  SyntaxOptions opt;
  opt.n_perm = cfg.analysis.n_perm;
  opt.n_boot = cfg.analysis.n_boot;
  opt.level = cfg.analysis.level;
  opt.max_points = static_cast<std::size_t>(cfg.analysis.max_points);
  opt.sample_seed = cfg.sub_seed("sample");
  opt.permutation_seed = cfg.sub_seed("permutation");
  opt.bootstrap_seed = cfg.sub_seed("bootstrap");
  auto res = syntax_vs_frequency(agg.positions, agg.tokens, labels, opt);
  res.pairs = matched_pairs(ck.vocab, labels, cfg.analysis.ratio_cap, cfg.analysis.max_pairs);
  score_pairs(res.pairs, agg.positions, agg.tokens, cfg.analysis.n_perm, cfg.sub_seed("permutation"));
  EnrichmentOptions eo;
  eo.alpha = cfg.analysis.fdr_alpha;
  res.enrichment = enrichment(class_counts(agg, labels), eo);

  std::ostringstream layers, classes;
  layers.precision(10);
  layers << "layer,n_points,silhouette_syntax,silhouette_frequency,delta,ci_lo,ci_hi,p_value\n";
  for (const auto& s : res.layers)
    layers << s.layer << ',' << s.n_points << ',' << s.sil_syntax << ',' << s.sil_freq << ',' << s.delta << ','
           << s.ci.lo << ',' << s.ci.hi << ',' << s.p_value << '\n';
  classes << "token_id,token,class,freq\n";
  for (int id = 0; id < ck.vocab.size(); ++id)
    classes << id << ',' << '"' << ck.vocab.text(id) << '"' << ',' << token_class_name(labels.cls[static_cast<std::size_t>(id)])
            << ',' << ck.vocab.freq[static_cast<std::size_t>(id)] << '\n';
  auto j = syntax_json(res, ck.vocab);
  j["function_list_version"] = labels.list_version;
  auto b = open_bundle(c, cfg, "syntax");
  b.write_json("syntax.json", j);
  b.write("syntax_layers.csv", layers.str());
  b.write("enrichment.csv", enrichment_csv(res.enrichment));
  b.write("token_classes.csv", classes.str());
  b.finalize();
}

std::vector<std::string> prompt_set(const CategorySpec& cat, const RunConfig& cfg) {
  if (cfg.intervene.prompt_set == "relevant") return cat.relevant_prompts;
  if (cfg.intervene.prompt_set == "control") {
    const fs::path ctrl = fs::path(cfg.intervene.category).parent_path().parent_path() / "control_prompts.txt";
    std::vector<std::string> out;
    std::istringstream in(read_file(ctrl));
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) out.push_back(line);
    return out;
  }
  return cat.prompts;
}

void cmd_intervene(const Common& c) {
  const RunConfig cfg = resolve(c);
  if (cfg.intervene.spec.empty() || cfg.intervene.category.empty())
    throw UsageError("intervene needs --spec and --category");
  const auto ck = need_checkpoint(c);
  nlohmann::json sj;
  try {
    sj = nlohmann::json::parse(read_file(cfg.intervene.spec));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidSpec, std::string("spec: ") + e.what());
  }
  const auto spec = parse_spec(sj);
  spec.validate(ck.model.config());
  const auto cat = load_category(cfg.intervene.category);
  const auto texts = prompt_set(cat, cfg);
  const auto prompts = encode_all(texts, ck.vocab);
  const auto cat_ids = cat.seed_ids(ck.vocab);
  if (cat_ids.empty()) throw Error(Errc::NoSeedsInVocab, "category " + cat.name);

  auto b = open_bundle(c, cfg, "intervene");
  b.write("spec.json", sj.dump(2) + "\n");
  const ModelView base(ck.model);
  const auto baseline = run_experiment(base, prompts, cat_ids);
  b.write("baseline.csv", report_csv(baseline, texts));

  if (spec.variant == InterventionSpec::Variant::Compose) {
    if (spec.category_b.empty()) throw Error(Errc::InvalidSpec, "spec.category_b: missing");
    const auto cat_b = load_category(fs::path(cfg.intervene.category).parent_path() / (spec.category_b + ".json"));
    const auto ids_b = cat_b.seed_ids(ck.vocab);
    if (ids_b.empty()) throw Error(Errc::NoSeedsInVocab, "category " + cat_b.name);
    const auto rep = compose(ck.model, spec.parts[0], spec.parts[1], prompts, cat_ids, ids_b);
    for (int cond = 0; cond < 4; ++cond)
      for (int k = 0; k < 2; ++k)
        b.write(std::string("conditions/") + CompositionReport::condition_name(cond) + "_" +
                    (k == 0 ? cat.name : cat_b.name) + ".csv",
                report_csv(rep.reports[static_cast<std::size_t>(cond)][static_cast<std::size_t>(k)], texts));
    b.write_json("composition.json", composition_json(rep));
  } else if (spec.variant == InterventionSpec::Variant::Steer && !spec.lambdas.empty()) {
    const auto pts = dose_response(ck.model, spec.layer, spec.experts.at(0), spec.lambdas, prompts, cat_ids);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < pts.size(); ++i) {
      b.write("dose/lambda_" + std::to_string(i) + ".csv", report_csv(pts[i].report, texts));
      rows.push_back({{"lambda", pts[i].lambda},
                      {"mean_centroid_cos", pts[i].mean_centroid_cos},
                      {"selection_frequency", pts[i].selection_frequency},
                      {"aggregate", aggregate_json(pts[i].report.aggregate)}});
    }
    b.write_json("dose_response.json", rows);
  } else {
    const auto rep = run_experiment(apply_spec(base, spec), prompts, cat_ids);
    b.write("report.csv", report_csv(rep, texts));
    b.write_json("aggregate.json", {{"variant", variant_name(spec.variant)},
                                    {"category", cat.name},
                                    {"conditions",
                                     {{"baseline", aggregate_json(baseline.aggregate)},
                                      {"modified", aggregate_json(rep.aggregate)}}}});
  }
  b.finalize();
}

void cmd_rw_cosine(const Common& c) {
  const RunConfig cfg = resolve(c);
  const auto ck = need_checkpoint(c);
  const auto r = read_write_cosine(ck.model);
  auto b = open_bundle(c, cfg, "rw-cosine");
  b.write("rw_cosine.csv", rw_csv(r));
  b.write_json("rw_cosine.json", rw_json(r));
  b.finalize();
}

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case Errc::Config:
    case Errc::InvalidSpec: return 1;
    default: return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stmoe: multi-hop cosine-routed MoE language model toolkit"};
  app.require_subcommand(1);
  Common common;
  std::string corpus, prompt, target, prompt_a, prompt_b, token, spec, category, set_name;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "INI configuration file");
    sub->add_option("--seed", common.seed, "top-level seed");
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--checkpoint", common.checkpoint, "model checkpoint");
    sub->add_option("--preset", common.preset, "model preset")->check(CLI::IsMember({"desk", "marathon"}));
    sub->add_option("--override", common.overrides, "key=value config override (repeatable)");
  };
  struct Cmd {
    const char* name;
    const char* help;
    void (*fn)(const Common&);
  };
  const std::vector<Cmd> cmds{
      {"synth-corpus", "generate the planted-category corpus", cmd_synth_corpus},
      {"train", "train a model", cmd_train},
      {"eval", "validation perplexity", cmd_eval},
      {"lens", "logit lens over hops", cmd_lens},
      {"dict", "semantic dictionary and category discovery", cmd_dict},
      {"cluster", "density clustering of decoded experts", cmd_cluster},
      {"stats", "per-layer routing statistics", cmd_stats},
      {"polysemy", "expert trajectory divergence", cmd_polysemy},
      {"syntax", "syntax versus frequency analysis", cmd_syntax},
      {"intervene", "run an intervention spec", cmd_intervene},
      {"rw-cosine", "read/write direction cosine", cmd_rw_cosine},
  };
  std::vector<CLI::App*> subs;
  for (const auto& cmd : cmds) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    add_common(sub);
    subs.push_back(sub);
  }
  auto sub = [&](const char* name) { return app.get_subcommand(name); };
  for (const char* n : {"train", "eval", "dict", "stats", "syntax"})
    sub(n)->add_option("--corpus", corpus, "corpus directory from synth-corpus");
  sub("lens")->add_option("--prompt", prompt);
  sub("lens")->add_option("--target", target);
  sub("polysemy")->add_option("--prompt-a", prompt_a);
  sub("polysemy")->add_option("--prompt-b", prompt_b);
  sub("polysemy")->add_option("--token", token);
  sub("intervene")->add_option("--spec", spec, "intervention spec JSON");
  sub("intervene")->add_option("--category", category, "category spec JSON");
  sub("intervene")->add_option("--prompt-set", set_name)->check(CLI::IsMember({"prompts", "relevant", "control"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  common.flag_keys = {{"corpus.dir", corpus},         {"lens.prompt", prompt},       {"lens.target", target},
                      {"polysemy.prompt_a", prompt_a}, {"polysemy.prompt_b", prompt_b}, {"polysemy.token", token},
                      {"intervene.spec", spec},       {"intervene.category", category},
                      {"intervene.prompt_set", set_name}};
  try {
    for (std::size_t i = 0; i < subs.size(); ++i)
      if (subs[i]->parsed()) cmds[i].fn(common);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
