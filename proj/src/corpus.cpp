#include "fingerlab/corpus.hpp"

#include <array>
#include <fstream>
#include <sstream>
#include <string_view>

#include "json.hpp"

#include "fingerlab/error.hpp"
#include "fingerlab/io.hpp"
#include "fingerlab/rng.hpp"

namespace fingerlab {

std::vector<Document> load_documents(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  const bool jsonl = path.extension() == ".jsonl";
  std::vector<Document> docs;
  std::istringstream in(data);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (!jsonl) {
      docs.push_back({line, -1});
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      docs.push_back({j.at("text").get<std::string>(), j.value("topic", -1)});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

void save_documents(const std::filesystem::path& path, const std::vector<Document>& docs) {
  std::string out;
  for (const auto& d : docs) {
    out += nlohmann::json{{"text", d.text}, {"topic", d.topic}}.dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<std::string> texts_of(const std::vector<Document>& docs) {
  std::vector<std::string> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(d.text);
  return out;
}

namespace {

struct Lexicon {
  std::vector<std::string_view> nouns, verbs, adjectives;
};

const std::array<Lexicon, 8>& lexicons() {
  static const std::array<Lexicon, 8> kLex{{
      {{"cell", "atom", "theory", "sample", "lab", "particle", "energy", "result", "model", "field",
        "signal", "protein", "star", "reaction", "measurement", "gene"},
       {"measures", "predicts", "observes", "explains", "tests", "absorbs", "emits", "binds"},
       {"stable", "quantum", "thermal", "precise", "organic", "random", "faint", "dense"}},
      {{"soup", "bread", "sauce", "oven", "recipe", "onion", "butter", "garlic", "pan", "flour",
        "salad", "pepper", "dough", "kitchen", "spoon", "lemon"},
       {"bakes", "stirs", "roasts", "slices", "seasons", "simmers", "tastes", "mixes"},
       {"crispy", "sweet", "fresh", "salty", "warm", "golden", "spicy", "tender"}},
      {{"team", "goal", "coach", "match", "season", "player", "ball", "league", "score", "field",
        "fan", "trophy", "race", "runner", "referee", "stadium"},
       {"wins", "scores", "defends", "trains", "passes", "kicks", "loses", "celebrates"},
       {"fast", "strong", "tired", "loyal", "final", "young", "rival", "famous"}},
      {{"city", "train", "hotel", "map", "beach", "island", "museum", "passport", "road", "harbor",
        "village", "flight", "ticket", "mountain", "bridge", "market"},
       {"visits", "explores", "crosses", "books", "leaves", "reaches", "follows", "discovers"},
       {"quiet", "crowded", "distant", "ancient", "sunny", "narrow", "scenic", "foreign"}},
      {{"song", "band", "guitar", "melody", "concert", "drum", "album", "singer", "piano", "choir",
        "rhythm", "stage", "chord", "violin", "tune", "orchestra"},
       {"plays", "sings", "records", "tunes", "performs", "composes", "hums", "releases"},
       {"loud", "gentle", "classic", "bright", "soft", "lively", "slow", "electric"}},
      {{"market", "bank", "price", "loan", "stock", "budget", "fund", "profit", "tax", "investor",
        "rate", "share", "debt", "payment", "account", "bond"},
       {"buys", "sells", "invests", "lends", "saves", "borrows", "trades", "raises"},
       {"risky", "steady", "annual", "global", "cheap", "volatile", "private", "modest"}},
      {{"garden", "seed", "rose", "soil", "leaf", "tree", "flower", "root", "hedge", "tomato",
        "compost", "bee", "branch", "meadow", "tulip", "orchard"},
       {"plants", "waters", "grows", "prunes", "digs", "blooms", "harvests", "feeds"},
       {"green", "wild", "rich", "tall", "fragrant", "dry", "shady", "young"}},
      {{"empire", "king", "war", "treaty", "castle", "army", "queen", "century", "revolution",
        "monument", "scroll", "dynasty", "battle", "ruler", "temple", "archive"},
       {"rules", "conquers", "builds", "signs", "defeats", "founds", "records", "restores"},
       {"ancient", "royal", "medieval", "bloody", "lost", "sacred", "early", "powerful"}},
  }};
  return kLex;
}

constexpr std::array<std::string_view, 12> kAdverbs{"quickly", "often", "rarely", "again", "slowly",
                                                    "always", "never", "carefully", "soon", "today",
                                                    "twice", "later"};

std::string_view zipf_pick(const std::vector<std::string_view>& words, Rng& rng) {
  double total = 0.0;
  for (std::size_t r = 0; r < words.size(); ++r) total += 1.0 / static_cast<double>(r + 1);
  double u = rng.uniform() * total;
  for (std::size_t r = 0; r < words.size(); ++r) {
    u -= 1.0 / static_cast<double>(r + 1);
    if (u <= 0.0) return words[r];
  }
  return words.back();
}

std::string capitalize(std::string_view w) {
  std::string s(w);
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

// "bakes" -> "bake", "passes" -> "pass"
std::string base_form(const std::string& verb) {
  const auto n = verb.size();
  const bool es = n > 3 && verb.compare(n - 2, 2, "es") == 0 &&
                  (verb[n - 3] == 's' || verb[n - 3] == 'x' || verb.compare(n - 4, 2, "sh") == 0 ||
                   verb.compare(n - 4, 2, "ch") == 0);
  return verb.substr(0, n - (es ? 2 : 1));
}

std::string sentence(const Lexicon& lex, Rng& rng) {
  // Words are drawn up front, in a fixed order, because the operands of
  // operator+ are unsequenced.
  const std::string n1(zipf_pick(lex.nouns, rng));
  const std::string n2(zipf_pick(lex.nouns, rng));
  const std::string v1(zipf_pick(lex.verbs, rng));
  const std::string v2(zipf_pick(lex.verbs, rng));
  const std::string a1(zipf_pick(lex.adjectives, rng));
  const std::string adv(kAdverbs[rng.below(kAdverbs.size())]);
  const auto number = rng.below(125);
  const std::string bare = base_form(v1);
  switch (rng.below(7)) {
    case 0:
      return "The " + a1 + " " + n1 + " " + v1 + " the " + n2 + ".";
    case 1:
      return capitalize(a1) + " " + n1 + "s " + bare + " " + adv + ".";
    case 2:
      return "A " + n1 + " " + v1 + " a " + a1 + " " + n2 + " in " + std::to_string(1900 + number) + ".";
    case 3:
      return "Every " + n1 + " " + v1 + " " + adv + ", and the " + n2 + " " + v2 + " too.";
    case 4:
      return "Why does the " + n1 + " " + bare + " the " + a1 + " " + n2 + "?";
    case 5:
      return "The " + n1 + " of the " + n2 + " is " + a1 + ".";
    default:
      return "With " + std::to_string(2 + number % 30) + " " + n1 + "s, the " + a1 + " " + n2 + " " + v1 + " " + adv + ".";
  }
}

}  // namespace

std::vector<Document> synthetic_corpus(const SynthOptions& o) {
  if (o.n_docs < 1) throw ConfigError("synthetic_corpus: n_docs must be >= 1");
  if (o.n_topics < 1 || o.n_topics > 8) throw ConfigError("synthetic_corpus: n_topics must be in [1, 8]");
  if (o.min_sentences < 1 || o.max_sentences < o.min_sentences) {
    throw ConfigError("synthetic_corpus: invalid sentence range");
  }
  Rng rng("corpus.synthetic", {o.seed});
  std::vector<Document> docs;
  docs.reserve(o.n_docs);
  for (int d = 0; d < o.n_docs; ++d) {
    const int topic = static_cast<int>(rng.below(o.n_topics));
    const auto& lex = lexicons()[topic];
    const int n = o.min_sentences + static_cast<int>(rng.below(o.max_sentences - o.min_sentences + 1));
    std::string text;
    for (int s = 0; s < n; ++s) {
      if (s > 0) text += ' ';
      text += sentence(lex, rng);
    }
    docs.push_back({std::move(text), topic});
  }
  return docs;
}

std::vector<SftExample> synthetic_instructions(int n, int n_topics, std::uint64_t seed) {
  if (n < 1) throw ConfigError("synthetic_instructions: n must be >= 1");
  if (n_topics < 1 || n_topics > 8) throw ConfigError("synthetic_instructions: n_topics must be in [1, 8]");
  Rng rng("corpus.instructions", {seed});
  std::vector<SftExample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const auto& lex = lexicons()[rng.below(n_topics)];
    const std::string noun(zipf_pick(lex.nouns, rng));
    const std::string adj(zipf_pick(lex.adjectives, rng));
    std::string prompt;
    switch (rng.below(3)) {
      case 0:
        prompt = "Write a sentence about the " + noun + ".";
        break;
      case 1:
        prompt = "Describe a " + adj + " " + noun + ".";
        break;
      default:
        prompt = "Tell me something about " + noun + "s.";
        break;
    }
    out.push_back({std::move(prompt), sentence(lex, rng)});
  }
  return out;
}

std::vector<SftExample> load_sft_examples(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  std::istringstream in(data);
  std::string line;
  std::size_t lineno = 0;
  std::vector<SftExample> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("prompt")) {
        out.push_back({j.at("prompt").get<std::string>(), j.at("response").get<std::string>()});
      } else {
        // instruction / input / output records
        std::string prompt = j.at("instruction").get<std::string>();
        const std::string input = j.value("input", "");
        if (!input.empty()) prompt += "\n" + input;
        out.push_back({std::move(prompt), j.at("output").get<std::string>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_sft_examples(const std::filesystem::path& path, const std::vector<SftExample>& examples) {
  std::string out;
  for (const auto& e : examples) out += nlohmann::json{{"prompt", e.prompt}, {"response", e.response}}.dump() + "\n";
  write_file_atomic(path, out);
}

}  // namespace fingerlab
