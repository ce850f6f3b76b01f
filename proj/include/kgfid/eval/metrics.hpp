#pragma once

// Answer and retrieval metrics: normalized exact match and Hits@K.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kgfid/error.hpp"
#include "kgfid/text/unicode.hpp"

namespace kgfid::eval {

/// Lowercase, drop Unicode punctuation, drop the whitespace tokens
/// "a", "an", "the", then join the remaining tokens with single spaces.
/// Punctuation is removed before articles so the result is idempotent.
inline std::string normalize_answer(std::string_view s) {
  std::string no_punct;
  no_punct.reserve(s.size());
  for (UChar32 c : text::decode_utf8(s)) {
    if (text::is_punctuation(c)) continue;
    text::append_utf8(no_punct, u_tolower(c));
  }
  std::string out;
  for (auto& w : text::split_whitespace(no_punct)) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline int exact_match(std::string_view prediction, const std::vector<std::string>& acceptable) {
  if (acceptable.empty()) throw ArgumentError("exact_match: empty list of acceptable answers");
  const std::string p = normalize_answer(prediction);
  for (const auto& a : acceptable)
    if (normalize_answer(a) == p) return 1;
  return 0;
}

/// Whether `passage_text` contains any acceptable answer after normalization.
/// The answer must occupy whole normalized tokens ("f12" is not found in
/// "f123"). Shared by the reader's gold labels and the Hits@K gold flags.
inline bool contains_answer(std::string_view passage_text, const std::vector<std::string>& answers) {
  const std::string hay = " " + normalize_answer(passage_text) + " ";
  for (const auto& a : answers) {
    const std::string needle = normalize_answer(a);
    if (needle.empty()) continue;
    if (hay.find(" " + needle + " ") != std::string::npos) return true;
  }
  return false;
}

struct HitsAtK {
  std::size_t k = 0;
  double value = 0.0;
  /// Set when some ranking is shorter than k (evaluated on its full length).
  bool truncated = false;
};

/// Fraction of rankings whose top-k prefix holds at least one gold flag.
inline HitsAtK hits_at_k(const std::vector<std::vector<bool>>& gold_flags, std::size_t k) {
  if (k == 0) throw ArgumentError("hits_at_k: K must be >= 1");
  HitsAtK r{k, 0.0, false};
  if (gold_flags.empty()) return r;
  std::size_t hits = 0;
  for (const auto& flags : gold_flags) {
    if (flags.size() < k) r.truncated = true;
    const std::size_t n = std::min(k, flags.size());
    if (std::any_of(flags.begin(), flags.begin() + static_cast<std::ptrdiff_t>(n), [](bool b) { return b; }))
      ++hits;
  }
  r.value = static_cast<double>(hits) / static_cast<double>(gold_flags.size());
  return r;
}

struct EvalResult {
  std::vector<std::string> question_ids;
  std::vector<int> em;
  double exact_match = 0.0;
  std::vector<HitsAtK> hits;
  std::size_t n_questions = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["n_questions"] = n_questions;
    j["exact_match"] = exact_match;
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t i = 0; i < question_ids.size(); ++i) per[question_ids[i]] = em[i];
    j["per_question_em"] = per;
    nlohmann::json h = nlohmann::json::array();
    for (const auto& x : hits) h.push_back({{"k", x.k}, {"value", x.value}, {"truncated", x.truncated}});
    j["hits"] = h;
    return j;
  }
};

/// EM aggregate over predictions plus Hits@K for every k in `ks`.
inline EvalResult evaluate(const std::vector<std::string>& question_ids,
                           const std::vector<std::string>& predictions,
                           const std::vector<std::vector<std::string>>& answers,
                           const std::vector<std::vector<bool>>& gold_flags,
                           const std::vector<std::size_t>& ks) {
  if (predictions.size() != answers.size() || question_ids.size() != predictions.size()) {
    throw ArgumentError("evaluate: predictions, answers and ids must align");
  }
  EvalResult r;
  r.question_ids = question_ids;
  r.n_questions = predictions.size();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    r.em.push_back(exact_match(predictions[i], answers[i]));
    correct += static_cast<std::size_t>(r.em.back());
  }
  r.exact_match = r.n_questions ? static_cast<double>(correct) / static_cast<double>(r.n_questions) : 0.0;
  std::vector<std::size_t> sorted = ks;
  std::sort(sorted.begin(), sorted.end());
  for (auto k : sorted) r.hits.push_back(hits_at_k(gold_flags, k));
  return r;
}

/// CSV with one row per ranking source and Hits@K columns in percent,
/// e.g. "Model,H@10,H@20,H@50,H@100".
inline std::string hits_table_csv(const std::vector<std::pair<std::string, std::vector<HitsAtK>>>& rows) {
  std::ostringstream os;
  os << "Model";
  if (!rows.empty())
    for (const auto& h : rows.front().second) os << ",H@" << h.k;
  os << '\n';
  for (const auto& [name, hits] : rows) {
    os << name;
    for (const auto& h : hits) {
      std::ostringstream v;
      v.setf(std::ios::fixed);
      v.precision(1);
      v << 100.0 * h.value;
      os << ',' << v.str();
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace kgfid::eval
