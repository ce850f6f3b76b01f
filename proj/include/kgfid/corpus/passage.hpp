#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kgfid/error.hpp"
#include "kgfid/io/jsonl.hpp"
#include "kgfid/text/unicode.hpp"

namespace kgfid::corpus {

inline constexpr std::size_t kWordsPerPassage = 100;

struct Article {
  std::string article_id;
  std::string title;
  std::string text;
};

/// A disjoint block of at most 100 whitespace-delimited words of one article.
struct Passage {
  std::uint64_t passage_id = 0;
  std::string article_id;
  std::string title;
  std::string text;
};

/// Greedy left-to-right chunks of `words_per_passage` words; only the last
/// chunk may be shorter. Ids are assigned sequentially from `first_id`.
/// Words are whitespace-split and rejoined with single spaces.
inline std::vector<Passage> chunk_article(const std::string& article_id, const std::string& title,
                                          const std::string& body, std::uint64_t first_id = 0,
                                          std::size_t words_per_passage = kWordsPerPassage) {
  const auto words = text::split_whitespace(body);
  if (words.empty()) throw ArgumentError("article " + article_id + " has an empty body");
  std::vector<Passage> out;
  for (std::size_t start = 0; start < words.size(); start += words_per_passage) {
    const std::size_t end = std::min(words.size(), start + words_per_passage);
    std::string t;
    for (std::size_t i = start; i < end; ++i) {
      if (i > start) t += ' ';
      t += words[i];
    }
    out.push_back({first_id + out.size(), article_id, title, std::move(t)});
  }
  return out;
}

/// All passages of a corpus, ordered by passage_id.
class Corpus {
 public:
  Corpus() = default;

  static Corpus from_articles(const std::vector<Article>& articles) {
    Corpus c;
    for (const auto& a : articles) {
      for (auto& p : chunk_article(a.article_id, a.title, a.text, c.passages_.size())) {
        c.add(std::move(p));
      }
    }
    return c;
  }

  static Corpus from_passages(std::vector<Passage> passages) {
    Corpus c;
    std::sort(passages.begin(), passages.end(),
              [](const Passage& a, const Passage& b) { return a.passage_id < b.passage_id; });
    for (auto& p : passages) c.add(std::move(p));
    return c;
  }

  std::size_t size() const { return passages_.size(); }
  const std::vector<Passage>& passages() const { return passages_; }
  const Passage& at_row(std::size_t row) const { return passages_.at(row); }

  const Passage& by_id(std::uint64_t id) const { return passages_.at(row_of(id)); }

  std::size_t row_of(std::uint64_t id) const {
    auto it = rows_.find(id);
    if (it == rows_.end()) throw ValidationError("unknown passage id " + std::to_string(id));
    return it->second;
  }

  bool contains(std::uint64_t id) const { return rows_.count(id) != 0; }

 private:
  void add(Passage p) {
    if (rows_.count(p.passage_id)) throw ValidationError("duplicate passage id " + std::to_string(p.passage_id));
    rows_.emplace(p.passage_id, passages_.size());
    passages_.push_back(std::move(p));
  }

  std::vector<Passage> passages_;
  std::unordered_map<std::uint64_t, std::size_t> rows_;
};

/// Corpus file: one {"article_id", "title", "text"} object per line.
inline std::vector<Article> load_articles(const std::filesystem::path& path) {
  std::vector<Article> out;
  io::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    out.push_back({j.at("article_id").get<std::string>(), j.value("title", std::string{}),
                   j.at("text").get<std::string>()});
  });
  return out;
}

inline void save_articles(const std::filesystem::path& path, const std::vector<Article>& articles) {
  std::vector<nlohmann::json> rows;
  for (const auto& a : articles) rows.push_back({{"article_id", a.article_id}, {"title", a.title}, {"text", a.text}});
  io::write_jsonl(path, rows);
}

inline void save_passages(const std::filesystem::path& path, const Corpus& corpus) {
  std::vector<nlohmann::json> rows;
  for (const auto& p : corpus.passages()) {
    rows.push_back({{"passage_id", p.passage_id}, {"article_id", p.article_id}, {"title", p.title}, {"text", p.text}});
  }
  io::write_jsonl(path, rows);
}

inline Corpus load_passages(const std::filesystem::path& path) {
  std::vector<Passage> ps;
  io::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    ps.push_back({j.at("passage_id").get<std::uint64_t>(), j.at("article_id").get<std::string>(),
                  j.value("title", std::string{}), j.at("text").get<std::string>()});
  });
  return Corpus::from_passages(std::move(ps));
}

}  // namespace kgfid::corpus
