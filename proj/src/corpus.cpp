// SPDX-License-Identifier: Apache-2.0
#include "stmoe/corpus.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "stmoe/core_math.hpp"
#include "stmoe/vocab.hpp"

namespace stmoe {

// ---------------------------------------------------------------------------
// CategorySpec

std::vector<int> CategorySpec::seed_ids(const Vocab& vocab) const {
  std::set<int> ids;
  for (const auto& s : seeds)
    if (vocab.contains(s)) ids.insert(vocab.id(s));
  return {ids.begin(), ids.end()};
}

double CategorySpec::in_vocab_fraction(const Vocab& vocab) const {
  if (seeds.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : seeds) hit += vocab.contains(s) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(seeds.size());
}

void to_json(nlohmann::json& j, const CategorySpec& c) {
  j = {{"name", c.name}, {"seeds", c.seeds}, {"prompts", c.prompts}, {"relevant_prompts", c.relevant_prompts}};
}

void from_json(const nlohmann::json& j, CategorySpec& c) {
  if (!j.is_object()) throw Error(Errc::InvalidSpec, "category: expected an object");
  auto field = [&](const char* key, auto& out, bool required) {
    if (!j.contains(key)) {
      if (required) throw Error(Errc::InvalidSpec, std::string("category.") + key + ": missing");
      return;
    }
    try {
      j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
      throw Error(Errc::InvalidSpec, std::string("category.") + key + ": wrong type");
    }
  };
  field("name", c.name, true);
  field("seeds", c.seeds, true);
  field("prompts", c.prompts, false);
  field("relevant_prompts", c.relevant_prompts, false);
  if (c.seeds.empty()) throw Error(Errc::InvalidSpec, "category.seeds: empty");
}

CategorySpec load_category(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidSpec, path.string() + ": " + e.what());
  }
  return j.get<CategorySpec>();
}

void save_category(const CategorySpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << nlohmann::json(spec).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Lexicons and templates

const std::vector<Lexicon>& planted_lexicons() {
  static const std::vector<Lexicon> lex{
      {"digit", {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"}},
      {"month",
       {"january", "february", "march", "april", "may", "june", "july", "august", "september", "october", "november",
        "december"}},
      {"country",
       {"france", "germany", "spain", "italy", "japan", "china", "brazil", "canada", "mexico", "egypt", "kenya",
        "india", "peru", "chile", "norway"}},
  };
  return lex;
}

const std::vector<Lexicon>& filler_lexicons() {
  static const std::vector<Lexicon> lex{
      {"noun",
       {"house", "dog", "river", "book", "tree", "car", "door", "window", "garden", "table", "letter", "horse",
        "bridge", "song", "road", "boat", "stone", "cat", "bird", "chair", "lamp", "hill", "field", "kitchen",
        "market", "teacher", "farmer", "painter", "doctor", "child", "friend", "city", "village", "forest", "lake",
        "box", "coat", "clock", "bottle", "shelf", "wall", "engine", "ticket", "picture", "basket", "candle",
        "mirror", "pocket", "ladder", "blanket", "kettle", "drawer", "wagon", "tower", "island", "meadow",
        "orchard", "pebble", "lantern", "saddle"}},
      {"verb",
       {"found", "saw", "carried", "painted", "opened", "watched", "moved", "cleaned", "followed", "lifted",
        "pushed", "pulled", "fixed", "built", "visited", "dropped", "noticed", "bought", "sold", "washed", "hid",
        "touched", "kept", "left", "chose", "broke", "wrapped", "filled", "measured", "described"}},
      {"adjective",
       {"old", "small", "large", "quiet", "bright", "heavy", "green", "cold", "warm", "strange", "narrow", "wide",
        "dark", "soft", "tall", "empty", "busy", "gentle", "rough", "shiny", "dusty", "golden", "hollow",
        "ancient", "simple"}},
      {"name",
       {"anna", "ben", "clara", "david", "emma", "felix", "grace", "henry", "iris", "jonas", "lena", "marco",
        "nora", "oscar", "paula", "ruben", "sara", "tomas", "vera", "walter"}},
  };
  return lex;
}

namespace {

// Slot markers: {D} digit, {M} month, {C} country, {X} month or country,
// {Y} any planted category, {N} noun, {V} verb, {A} adjective, {P} name.
const std::vector<std::string> kDigitT{
    "the code is {D} {D} {D} .", "room {D} is on floor {D} .", "the score was {D} to {D} .",
    "call me at {D} {D} {D} {D} .", "the answer is {D} .", "page {D} has {D} pictures .",
    "she counted to {D} .", "the bus number is {D} {D} .",
};
const std::vector<std::string> kMonthT{
    "the festival starts in {M} .", "we met in early {M} .", "her birthday is in {M} .",
    "from {M} to {M} the weather was {A} .", "the meeting was moved to {M} {D} .", "the rain came in late {M} .",
    "{P} returned last {M} .", "the school year ends in {M} .",
};
const std::vector<std::string> kCountryT{
    "he moved to {C} last year .", "the team from {C} won the match .", "they traveled across {C} and {C} .",
    "the capital of {C} is {A} .", "{P} flew to {C} .", "the embassy of {C} was {A} .",
    "people in {C} speak many languages .", "the border between {C} and {C} is long .",
};
const std::vector<std::string> kAmbiguousT{
    "it happened in {X} .", "she was born in {X} .", "we stayed there in {X} .", "the story takes place in {X} .",
};
const std::vector<std::string> kOpenT{
    "the sign said {Y} .", "she wrote about {Y} .", "he kept thinking of {Y} .", "the label read {Y} .",
};
const std::vector<std::string> kFillerT{
    "the {A} {N} {V} the {N} .",
    "{P} {V} a {N} with the {N} .",
    "{P} said that the {N} was {A} .",
    "and then the {N} {V} over the {N} .",
    "a {A} {N} was near the {N} .",
    "{P} and {P} {V} the {A} {N} .",
    "there is a {N} in the {N} .",
    "why did the {N} stay by the {N} ?",
    "they could not find the {N} because it was {A} .",
    "this {N} is more {A} than that {N} .",
    "we have {V} the {N} for a while .",
    "if the {N} is {A} , we should keep it .",
    "{P} {V} it before the {N} was {A} .",
    "nobody {V} the {N} under the {A} {N} .",
};

class Generator {
 public:
  explicit Generator(std::uint64_t seed) : rng_(seed) {
    for (const auto& l : filler_lexicons()) {
      // Zipf-like weights so filler words span a wide frequency range.
      Vec w;
      for (std::size_t i = 0; i < l.words.size(); ++i) w.push_back(1.0 / static_cast<double>(i + 1));
      zipf_.push_back(std::move(w));
    }
  }

  const std::string& pick_uniform(const std::vector<std::string>& v) { return v[rng_.below(v.size())]; }

  const std::string& pick_filler(std::size_t lex) {
    const auto& w = zipf_[lex];
    double total = std::accumulate(w.begin(), w.end(), 0.0);
    double r = rng_.uniform() * total;
    for (std::size_t i = 0; i < w.size(); ++i) {
      r -= w[i];
      if (r < 0) return filler_lexicons()[lex].words[i];
    }
    return filler_lexicons()[lex].words.back();
  }

  std::string fill_slot(char slot) {
    const auto& p = planted_lexicons();
    switch (slot) {
      case 'D': return pick_uniform(p[0].words);
      case 'M': return pick_uniform(p[1].words);
      case 'C': return pick_uniform(p[2].words);
      case 'X': return rng_.below(2) ? pick_uniform(p[1].words) : pick_uniform(p[2].words);
      case 'Y': return pick_uniform(p[rng_.below(3)].words);
      case 'N': return pick_filler(0);
      case 'V': return pick_filler(1);
      case 'A': return pick_filler(2);
      case 'P': return pick_filler(3);
      default: throw Error(Errc::InvalidSpec, std::string("unknown template slot ") + slot);
    }
  }

  // Fills the template; stops before the first slot in `stop_slots` when
  // `prefix_only` is set.
  std::string fill(const std::string& tmpl, const std::string& stop_slots = "", int* n_words = nullptr) {
    std::string out;
    int words = 0;
    std::istringstream ss(tmpl);
    std::string tok;
    while (ss >> tok) {
      std::string word = tok;
      if (tok.size() == 3 && tok[0] == '{' && tok[2] == '}') {
        if (stop_slots.find(tok[1]) != std::string::npos) break;
        word = fill_slot(tok[1]);
      }
      if (!out.empty()) out.push_back(' ');
      out += word;
      ++words;
    }
    if (n_words) *n_words = words;
    return out;
  }

  std::string sentence(double filler_fraction, int* n_words) {
    if (rng_.uniform() < filler_fraction) return fill(pick_uniform(kFillerT), "", n_words);
    const double r = rng_.uniform();
    const auto& t = r < 0.28 ? kDigitT : r < 0.56 ? kMonthT : r < 0.84 ? kCountryT : r < 0.92 ? kAmbiguousT : kOpenT;
    return fill(pick_uniform(t), "", n_words);
  }

  std::string text(std::int64_t target_tokens, double filler_fraction) {
    std::string out;
    std::int64_t n = 0;
    while (n < target_tokens) {
      const auto len = 8 + static_cast<int>(rng_.below(9));
      for (int s = 0; s < len && n < target_tokens; ++s) {
        int w = 0;
        const auto sent = sentence(filler_fraction, &w);
        if (s) out.push_back(' ');
        out += sent;
        n += w;
      }
      out += "\n\n";
    }
    return out;
  }

  // A held-out prompt: a fresh filler sentence followed by a template prefix
  // cut right before the first slot in `stop`.
  std::string prompt(const std::vector<std::string>& templates, const std::string& stop) {
    const auto lead = fill(pick_uniform(kFillerT));
    const auto* tmpl = &pick_uniform(templates);
    while (tmpl->find('{' + std::string(1, stop[0])) == std::string::npos &&
           (stop.size() < 2 || tmpl->find('{' + std::string(1, stop[1])) == std::string::npos))
      tmpl = &pick_uniform(templates);
    return lead + " " + fill(*tmpl, stop);
  }

 private:
  Rng rng_;
  std::vector<Vec> zipf_;
};

}  // namespace

void CorpusConfig::validate() const {
  if (train_tokens <= 0 || valid_tokens <= 0) throw Error(Errc::Config, "corpus token counts must be positive");
  if (!(filler_fraction >= 0.0 && filler_fraction < 1.0)) throw Error(Errc::Config, "filler_fraction must be in [0,1)");
  if (n_prompts <= 0 || n_control_prompts <= 0) throw Error(Errc::Config, "prompt counts must be positive");
}

PlantedCorpus synth_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  PlantedCorpus out;
  {
    Generator g(derive_seed(cfg.seed, "corpus.train"));
    out.train_text = g.text(cfg.train_tokens, cfg.filler_fraction);
  }
  {
    // Short corpora may miss planted words; close the gap with one sentence
    // per missing word so every seed is in the vocabulary.
    const auto toks = tokenize(out.train_text);
    const std::set<std::string> seen(toks.begin(), toks.end());
    const std::vector<std::string> frames{"the answer is ", "her birthday is in ", "he moved to "};
    std::string extra;
    for (std::size_t c = 0; c < planted_lexicons().size(); ++c)
      for (const auto& w : planted_lexicons()[c].words)
        if (!seen.count(w)) extra += (extra.empty() ? "" : " ") + frames[c] + w + " .";
    if (!extra.empty()) out.train_text += extra + "\n\n";
  }
  {
    Generator g(derive_seed(cfg.seed, "corpus.valid"));
    out.valid_text = g.text(cfg.valid_tokens, cfg.filler_fraction);
  }

  Generator g(derive_seed(cfg.seed, "corpus.prompts"));
  const auto& lex = planted_lexicons();
  const std::vector<const std::vector<std::string>*> own{&kDigitT, &kMonthT, &kCountryT};
  const std::string slots = "DMC";
  for (std::size_t c = 0; c < lex.size(); ++c) {
    CategorySpec spec;
    spec.name = lex[c].name;
    spec.seeds = lex[c].words;
    // Steering set: contexts where the category is possible but not certain
    // (ambiguous), belongs to another category (adversarial), or is absent
    // (neutral). Relevant set: the category's own frames.
    for (int i = 0; i < cfg.n_prompts; ++i) {
      const int kind = i % 5;
      if (kind < 2) {
        if (c != 0 && kind == 0)
          spec.prompts.push_back(g.prompt(kAmbiguousT, "X"));
        else
          spec.prompts.push_back(g.prompt(kOpenT, "Y"));
      } else if (kind < 4) {
        const std::size_t other = (c + 1 + static_cast<std::size_t>(i / 5) % 2) % lex.size();
        spec.prompts.push_back(g.prompt(*own[other], std::string(1, slots[other])));
      } else {
        spec.prompts.push_back(g.prompt(kFillerT, "N"));
      }
    }
    for (int i = 0; i < cfg.n_prompts; ++i) spec.relevant_prompts.push_back(g.prompt(*own[c], std::string(1, slots[c])));
    out.categories.push_back(std::move(spec));
  }
  for (int i = 0; i < cfg.n_control_prompts; ++i) out.control_prompts.push_back(g.prompt(kFillerT, "NA"));
  return out;
}

}  // namespace stmoe
