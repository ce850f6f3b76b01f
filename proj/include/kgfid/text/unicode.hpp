#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <unicode/uchar.h>
#include <unicode/utf8.h>

namespace kgfid::text {

/// Decodes UTF-8 into code points; malformed bytes become U+FFFD.
inline std::vector<UChar32> decode_utf8(std::string_view s) {
  std::vector<UChar32> out;
  out.reserve(s.size());
  const auto* p = reinterpret_cast<const uint8_t*>(s.data());
  const int32_t n = static_cast<int32_t>(s.size());
  int32_t i = 0;
  while (i < n) {
    UChar32 c;
    U8_NEXT(p, i, n, c);
    out.push_back(c < 0 ? 0xFFFD : c);
  }
  return out;
}

inline void append_utf8(std::string& out, UChar32 c) {
  uint8_t buf[U8_MAX_LENGTH];
  int32_t len = 0;
  UBool err = false;
  U8_APPEND(buf, len, U8_MAX_LENGTH, c, err);
  if (!err) out.append(reinterpret_cast<const char*>(buf), static_cast<std::size_t>(len));
}

/// Unicode general category P* (Pc, Pd, Ps, Pe, Pi, Pf, Po).
inline bool is_punctuation(UChar32 c) { return u_ispunct(c) != 0; }

inline bool is_space(UChar32 c) { return u_isUWhiteSpace(c) != 0; }

inline std::string lowercase(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (UChar32 c : decode_utf8(s)) append_utf8(out, u_tolower(c));
  return out;
}

/// Splits on Unicode whitespace.
inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> words;
  std::string cur;
  for (UChar32 c : decode_utf8(s)) {
    if (is_space(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      append_utf8(cur, c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace kgfid::text
