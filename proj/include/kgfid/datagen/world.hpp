#pragma once

// Seeded synthetic worlds: an entity graph, one typed article per entity,
// and questions of the form "which <type> relates to <anchor>". Most of a
// question's words point at the anchor article; the answer sits in an
// article of the asked type.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgfid/corpus/knowledge_graph.hpp"
#include "kgfid/corpus/passage.hpp"
#include "kgfid/error.hpp"
#include "kgfid/io/jsonl.hpp"
#include "kgfid/numerics/rng.hpp"

namespace kgfid::datagen {

struct WorldConfig {
  std::uint64_t seed = 0;
  std::size_t n_entities = 400;
  double avg_triples_per_entity = 4.0;  // expected KG degree
  std::size_t n_relations = 8;
  std::size_t words_per_article = 8;
  std::size_t signature_tokens = 4;
  std::size_t vocab_size = 1200;  // size of the shared signature-token pool
  std::size_t n_types = 10;
  std::size_t type_repeat = 3;  // occurrences of the type word per article and question
  std::size_t common_tokens = 32;
  double distractor_strength = 0.5;  // chance a filler word is a foreign signature token
  std::size_t n_questions = 1200;
  std::size_t anchor_words = 4;
  double p_link = 0.8;
  bool title_case_answers = false;
  double train_fraction = 0.6;
  double dev_fraction = 0.1;

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"n_entities", n_entities},
            {"avg_triples_per_entity", avg_triples_per_entity},
            {"n_relations", n_relations},
            {"words_per_article", words_per_article},
            {"signature_tokens", signature_tokens},
            {"vocab_size", vocab_size},
            {"n_types", n_types},
            {"type_repeat", type_repeat},
            {"common_tokens", common_tokens},
            {"distractor_strength", distractor_strength},
            {"n_questions", n_questions},
            {"anchor_words", anchor_words},
            {"p_link", p_link},
            {"title_case_answers", title_case_answers},
            {"train_fraction", train_fraction},
            {"dev_fraction", dev_fraction}};
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("world.") + name + " must be positive");
    };
    positive(n_entities, "n_entities");
    positive(n_relations, "n_relations");
    positive(n_questions, "n_questions");
    positive(signature_tokens, "signature_tokens");
    positive(common_tokens, "common_tokens");
    positive(anchor_words, "anchor_words");
    positive(n_types, "n_types");
    if (n_entities < 3) throw ConfigError("world.n_entities must be at least 3");
    if (words_per_article < signature_tokens + type_repeat + 1) {
      throw ConfigError("world.words_per_article must exceed signature_tokens + type_repeat");
    }
    if (vocab_size < 2 * signature_tokens) throw ConfigError("world.vocab_size must be at least 2 * signature_tokens");
    if (anchor_words > signature_tokens) throw ConfigError("world.anchor_words must not exceed signature_tokens");
    if (n_types < 2) throw ConfigError("world.n_types must be at least 2");
    if (!(p_link >= 0.0 && p_link <= 1.0)) throw ConfigError("world.p_link must lie in [0, 1]");
    if (!(distractor_strength >= 0.0 && distractor_strength <= 1.0)) {
      throw ConfigError("world.distractor_strength must lie in [0, 1]");
    }
    if (!(avg_triples_per_entity >= 0.0 && avg_triples_per_entity <= static_cast<double>(n_entities - 1))) {
      throw ConfigError("world.avg_triples_per_entity must lie in [0, n_entities - 1]");
    }
    if (!(train_fraction > 0.0 && dev_fraction >= 0.0 && train_fraction + dev_fraction < 1.0)) {
      throw ConfigError("world split fractions must leave a non-empty test split");
    }
  }
};

struct QaItem {
  std::string question_id;
  std::string question;
  std::vector<std::string> answers;

  nlohmann::json to_json() const { return {{"question_id", question_id}, {"question", question}, {"answers", answers}}; }
  static QaItem from_json(const nlohmann::json& j) {
    return {j.at("question_id").get<std::string>(), j.at("question").get<std::string>(),
            j.at("answers").get<std::vector<std::string>>()};
  }
};

/// Ground truth behind one question (kept in memory, never written to QA files).
struct QuestionTruth {
  std::size_t gold_entity;
  std::size_t anchor_entity;
  bool linked;  // anchor is a KG neighbour of gold
};

struct World {
  WorldConfig config;
  std::vector<corpus::Article> articles;
  corpus::KnowledgeGraph kg;
  corpus::EntityAlignment alignment;
  std::vector<std::vector<std::string>> signatures;  // per entity
  std::vector<std::size_t> types;                    // per entity
};

struct QuestionSet {
  std::vector<QaItem> items;
  std::vector<QuestionTruth> truth;
  std::vector<std::size_t> train, dev, test;  // indices into items
};

inline std::string entity_id(std::size_t e) { return "Q" + std::to_string(e); }
inline std::string article_id(std::size_t e) { return "A" + std::to_string(e); }
inline std::string fact_token(std::size_t e) { return "f" + std::to_string(e); }
inline std::string type_token(std::size_t t) { return "t" + std::to_string(t); }

inline World gen_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.config = cfg;
  const std::size_t n = cfg.n_entities;
  for (std::size_t e = 0; e < n; ++e) w.kg.add_entity(entity_id(e));
  for (std::size_t r = 0; r < cfg.n_relations; ++r) w.kg.add_relation("P" + std::to_string(r));

  CounterRng edges(cfg.seed, "world.edges");
  const std::uint64_t threshold =
      CounterRng::probability_threshold(cfg.avg_triples_per_entity / static_cast<double>(n - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if ((edges.next() >> 11) >= threshold) continue;
      const auto rel = "P" + std::to_string(edges.below(cfg.n_relations));
      if (edges.below(2) == 0) {
        w.kg.add_triple(entity_id(i), rel, entity_id(j));
      } else {
        w.kg.add_triple(entity_id(j), rel, entity_id(i));
      }
    }

  CounterRng text_rng(cfg.seed, "world.text");
  const std::uint64_t distractor = CounterRng::probability_threshold(cfg.distractor_strength);
  for (std::size_t e = 0; e < n; ++e) {
    std::vector<std::string> sig;
    for (auto t : text_rng.sample_distinct(cfg.vocab_size, cfg.signature_tokens)) sig.push_back("s" + std::to_string(t));
    const std::size_t type = text_rng.below(cfg.n_types);
    std::vector<std::string> words = sig;
    for (std::size_t r = 0; r < cfg.type_repeat; ++r) words.push_back(type_token(type));
    words.push_back(fact_token(e));
    while (words.size() < cfg.words_per_article) {
      if ((text_rng.next() >> 11) < distractor) {
        std::string t;
        do {
          t = "s" + std::to_string(text_rng.below(cfg.vocab_size));
        } while (std::find(sig.begin(), sig.end(), t) != sig.end());
        words.push_back(t);
      } else {
        words.push_back("c" + std::to_string(text_rng.below(cfg.common_tokens)));
      }
    }
    text_rng.shuffle(words);
    std::string body;
    for (const auto& t : words) body += (body.empty() ? "" : " ") + t;
    w.articles.push_back({article_id(e), "Entity " + std::to_string(e), body});
    w.alignment.add(article_id(e), entity_id(e));
    w.signatures.push_back(std::move(sig));
    w.types.push_back(type);
  }
  return w;
}

/// Uppercases the first letter of each word.
inline std::string title_case(const std::string& s) {
  std::string out = s;
  bool start = true;
  for (auto& c : out) {
    if (start && std::isalpha(static_cast<unsigned char>(c))) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    start = c == ' ';
  }
  return out;
}

/// Each question names `anchor_words` signature words of an anchor entity
/// plus `type_repeat` copies of the gold entity's type word; anchor and gold
/// never share a type. The answer is the gold article's fact token. With probability
/// p_link the anchor is a KG neighbour of gold, otherwise a random
/// non-neighbour.
inline QuestionSet gen_questions(const World& w) {
  const auto& cfg = w.config;
  const std::size_t n = cfg.n_entities;
  std::vector<std::size_t> with_neighbors;
  for (std::size_t e = 0; e < n; ++e)
    if (!w.kg.neighbors(static_cast<std::uint32_t>(e)).empty()) with_neighbors.push_back(e);
  if (with_neighbors.empty()) throw ValidationError("cannot generate questions: the knowledge graph has no edges");

  CounterRng rng(cfg.seed, "world.questions");
  const std::uint64_t link = CounterRng::probability_threshold(cfg.p_link);
  auto contains = [](const std::vector<std::string>& v, const std::string& t) {
    return std::find(v.begin(), v.end(), t) != v.end();
  };
  QuestionSet qs;
  while (qs.items.size() < cfg.n_questions) {
    const std::size_t gold = with_neighbors[rng.below(with_neighbors.size())];
    const auto& nbrs = w.kg.neighbors(static_cast<std::uint32_t>(gold));
    const bool linked = (rng.next() >> 11) < link;
    std::size_t anchor;
    if (linked) {
      anchor = nbrs[rng.below(nbrs.size())];
      if (anchor == gold) continue;
    } else {
      anchor = rng.below(n);
      if (anchor == gold || w.kg.connected(static_cast<std::uint32_t>(gold), static_cast<std::uint32_t>(anchor))) {
        continue;
      }
    }
    if (w.types[anchor] == w.types[gold]) continue;
    const auto& gs = w.signatures[gold];
    std::vector<std::string> anchor_only;
    for (const auto& t : w.signatures[anchor])
      if (!contains(gs, t)) anchor_only.push_back(t);
    if (anchor_only.size() < cfg.anchor_words) continue;
    std::vector<std::string> words;
    for (auto i : rng.sample_distinct(anchor_only.size(), cfg.anchor_words)) words.push_back(anchor_only[i]);
    for (std::size_t r = 0; r < cfg.type_repeat; ++r) words.push_back(type_token(w.types[gold]));
    rng.shuffle(words);
    std::string q;
    for (const auto& t : words) q += (q.empty() ? "" : " ") + t;
    std::string answer = fact_token(gold);
    if (cfg.title_case_answers) {
      q = title_case(q);
      answer = title_case(answer);
    }
    qs.items.push_back({"q" + std::to_string(qs.items.size()), q, {answer}});
    qs.truth.push_back({gold, anchor, linked});
  }
  const auto total = qs.items.size();
  const auto n_train = static_cast<std::size_t>(static_cast<double>(total) * cfg.train_fraction);
  const auto n_dev = static_cast<std::size_t>(static_cast<double>(total) * cfg.dev_fraction);
  for (std::size_t i = 0; i < total; ++i) (i < n_train ? qs.train : i < n_train + n_dev ? qs.dev : qs.test).push_back(i);
  return qs;
}

inline std::vector<QaItem> subset(const QuestionSet& qs, const std::vector<std::size_t>& idx) {
  std::vector<QaItem> out;
  for (auto i : idx) out.push_back(qs.items[i]);
  return out;
}

inline void save_qa(const std::filesystem::path& path, const std::vector<QaItem>& items) {
  std::vector<nlohmann::json> rows;
  for (const auto& q : items) rows.push_back(q.to_json());
  io::write_jsonl(path, rows);
}

inline std::vector<QaItem> load_qa(const std::filesystem::path& path) {
  std::vector<QaItem> out;
  io::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) { out.push_back(QaItem::from_json(j)); });
  return out;
}

/// Writes corpus.jsonl, triples.tsv, entities.tsv, alignment.tsv,
/// qa_{train,dev,test}.jsonl and world.json into `dir`.
inline void write_world(const std::filesystem::path& dir, const World& w, const QuestionSet& qs) {
  std::filesystem::create_directories(dir);
  corpus::save_articles(dir / "corpus.jsonl", w.articles);
  corpus::save_kg(dir / "triples.tsv", dir / "entities.tsv", w.kg);
  corpus::save_alignment(dir / "alignment.tsv", w.alignment);
  save_qa(dir / "qa_train.jsonl", subset(qs, qs.train));
  save_qa(dir / "qa_dev.jsonl", subset(qs, qs.dev));
  save_qa(dir / "qa_test.jsonl", subset(qs, qs.test));
  io::write_json(dir / "world.json", {{"config", w.config.to_json()}, {"kg", w.kg.stats().to_json()}});
}

}  // namespace kgfid::datagen
