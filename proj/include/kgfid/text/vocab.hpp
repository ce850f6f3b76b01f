#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kgfid/error.hpp"
#include "kgfid/text/unicode.hpp"

namespace kgfid::text {

/// Lowercased words, with every punctuation character split off as its
/// own token.
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  for (const auto& word : split_whitespace(s)) {
    std::string cur;
    for (UChar32 c : decode_utf8(word)) {
      if (is_punctuation(c)) {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
        std::string p;
        append_utf8(p, c);
        out.push_back(std::move(p));
      } else {
        append_utf8(cur, u_tolower(c));
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
  }
  return out;
}

/// Closed word vocabulary. Ids 0..5 are the special tokens.
class Vocab {
 public:
  static constexpr std::size_t kPad = 0, kCls = 1, kSep = 2, kBos = 3, kEos = 4, kUnk = 5;

  Vocab() : words_{"[PAD]", "[CLS]", "[SEP]", "[BOS]", "[EOS]", "[UNK]"} { reindex(); }

  /// Sorted unique tokens of `texts`, appended after the specials.
  static Vocab build(const std::vector<std::string>& texts) {
    std::set<std::string> seen;
    for (const auto& t : texts)
      for (auto& w : tokenize(t)) seen.insert(std::move(w));
    Vocab v;
    for (const auto& w : seen) v.words_.push_back(w);
    v.reindex();
    return v;
  }

  std::size_t size() const { return words_.size(); }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& word(std::size_t id) const { return words_.at(id); }

  std::vector<std::size_t> encode(std::string_view s) const {
    std::vector<std::size_t> ids;
    for (const auto& w : tokenize(s)) ids.push_back(id(w));
    return ids;
  }

  /// Joins non-special tokens with spaces.
  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (auto i : ids) {
      if (i <= kUnk) continue;
      if (!out.empty()) out += ' ';
      out += words_.at(i);
    }
    return out;
  }

  nlohmann::json to_json() const { return {{"words", words_}}; }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v;
    v.words_ = j.at("words").get<std::vector<std::string>>();
    if (v.words_.size() < 6 || v.words_[0] != "[PAD]") throw ValidationError("vocabulary is missing special tokens");
    v.reindex();
    return v;
  }

  bool operator==(const Vocab& o) const { return words_ == o.words_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], i);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace kgfid::text
