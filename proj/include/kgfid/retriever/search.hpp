#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kgfid/corpus/passage.hpp"
#include "kgfid/error.hpp"
#include "kgfid/io/jsonl.hpp"
#include "kgfid/numerics/tensor.hpp"
#include "kgfid/retriever/dual_encoder.hpp"

namespace kgfid::retriever {

/// Offline passage embeddings, one row per passage in passage_id order.
struct EmbeddingStore {
  Tensor matrix;  // [N, D]
  std::vector<std::uint64_t> passage_ids;

  std::size_t size() const { return passage_ids.size(); }
  std::size_t width() const { return matrix.cols(); }
  std::span<const double> row(std::size_t r) const { return matrix.data().subspan(r * width(), width()); }

  std::size_t row_of(std::uint64_t passage_id) const {
    if (index_.empty() && !passage_ids.empty()) {
      for (std::size_t i = 0; i < passage_ids.size(); ++i) index_.emplace(passage_ids[i], i);
    }
    auto it = index_.find(passage_id);
    if (it == index_.end()) throw ValidationError("no embedding row for passage " + std::to_string(passage_id));
    return it->second;
  }

  /// Header {"N", "D", "dtype": "f64", "passage_ids"} behind a u64 length,
  /// then the row-major little-endian payload.
  void save(const std::filesystem::path& path) const {
    static_assert(std::endian::native == std::endian::little);
    const nlohmann::json header{{"N", size()}, {"D", width()}, {"dtype", "f64"}, {"passage_ids", passage_ids}};
    const std::string h = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const std::uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(matrix.data().data()),
              static_cast<std::streamsize>(matrix.size() * sizeof(double)));
    if (!out) throw IoError("write failed for " + path.string());
  }

  static EmbeddingStore load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1ULL << 32)) throw IoError("corrupt embedding store " + path.string());
    std::string h(len, '\0');
    in.read(h.data(), static_cast<std::streamsize>(len));
    const auto header = nlohmann::json::parse(h);
    if (header.at("dtype") != "f64") throw IoError("unsupported embedding dtype in " + path.string());
    const std::size_t n = header.at("N"), d = header.at("D");
    std::vector<double> v(n * d);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw IoError("truncated embedding payload in " + path.string());
    EmbeddingStore s;
    s.matrix = Tensor::from({n, d}, std::move(v));
    s.passage_ids = header.at("passage_ids").get<std::vector<std::uint64_t>>();
    if (s.passage_ids.size() != n) throw IoError("passage id list does not match N in " + path.string());
    return s;
  }

 private:
  mutable std::unordered_map<std::uint64_t, std::size_t> index_;
};

inline EmbeddingStore encode_corpus(const corpus::Corpus& corpus, const DualEncoder& enc, const text::Vocab& vocab,
                                    std::size_t batch = 32) {
  NoGradGuard no_grad;
  const std::size_t n = corpus.size(), d = enc.width();
  std::vector<double> all;
  all.reserve(n * d);
  EmbeddingStore s;
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::string> texts;
    for (std::size_t r = start; r < std::min(n, start + batch); ++r) {
      texts.push_back(corpus.at_row(r).text);
      s.passage_ids.push_back(corpus.at_row(r).passage_id);
    }
    Tensor e = enc.encode_passages(vocab, texts);
    all.insert(all.end(), e.data().begin(), e.data().end());
  }
  s.matrix = Tensor::from({n, d}, std::move(all));
  return s;
}

inline std::vector<double> encode_question(const std::string& q, const DualEncoder& enc, const text::Vocab& vocab) {
  NoGradGuard no_grad;
  Tensor e = enc.encode_questions(vocab, {q});
  return {e.data().begin(), e.data().end()};
}

struct RankedEntry {
  std::uint64_t passage_id;
  double score;
};

/// Passages in descending score order.
struct RankedList {
  std::string question_id;
  std::vector<RankedEntry> ranking;

  std::size_t size() const { return ranking.size(); }

  nlohmann::json to_json() const {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& e : ranking) r.push_back({e.passage_id, e.score});
    return {{"question_id", question_id}, {"ranking", r}};
  }
  static RankedList from_json(const nlohmann::json& j) {
    RankedList l{j.at("question_id").get<std::string>(), {}};
    for (const auto& e : j.at("ranking")) l.ranking.push_back({e.at(0).get<std::uint64_t>(), e.at(1).get<double>()});
    return l;
  }
};

inline void save_ranked_lists(const std::filesystem::path& path, const std::vector<RankedList>& lists) {
  std::vector<nlohmann::json> rows;
  for (const auto& l : lists) rows.push_back(l.to_json());
  io::write_jsonl(path, rows);
}

inline std::vector<RankedList> load_ranked_lists(const std::filesystem::path& path) {
  std::vector<RankedList> out;
  io::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) { out.push_back(RankedList::from_json(j)); });
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Exact maximum inner product search. Ties go to the lower row.
inline RankedList top_n0_search(std::span<const double> q, const EmbeddingStore& store, std::size_t n0) {
  if (n0 > store.size()) {
    throw ArgumentError("N0 = " + std::to_string(n0) + " exceeds corpus size " + std::to_string(store.size()));
  }
  if (q.size() != store.width()) throw ShapeError("query width does not match the embedding store");
  std::vector<double> scores(store.size());
  for (std::size_t r = 0; r < store.size(); ++r) scores[r] = dot(q, store.row(r));
  std::vector<std::size_t> order(store.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n0), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  RankedList out;
  for (std::size_t i = 0; i < n0; ++i) out.ranking.push_back({store.passage_ids[order[i]], scores[order[i]]});
  return out;
}

/// Stable descending sort of `items` by `scores`; ties keep their prior order.
inline std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace kgfid::retriever
