#include <gtest/gtest.h>

#include "kgfid/eval/metrics.hpp"
#include "kgfid/numerics/rng.hpp"

namespace kgfid::eval {
namespace {

struct NormCase {
  const char* in;
  const char* out;
};

TEST(NormalizeAnswer, Cases) {
  const NormCase cases[] = {
      {"The Eiffel Tower!", "eiffel tower"},
      {"an  apple", "apple"},
      {"", ""},
      {"A", ""},
      {"the the the", ""},
      {"  Barack   Obama  ", "barack obama"},
      {"U.S.A.", "usa"},
      {"forty-two", "fortytwo"},
      {"Théâtre", "théâtre"},
      {"¿Qué pasa?", "qué pasa"},
      {"«The» Answer", "answer"},
      {"apple, the fruit", "apple fruit"},
      {"theory", "theory"},
      {"Another day", "another day"},
      {"$100", "$100"},
      {"a.n", ""},
      {"tab\tseparated\nlines", "tab separated lines"},
      {"Gödel's theorem", "gödels theorem"},
      {"ÉCOLE", "école"},
      {"(1999)", "1999"},
      {"and/or", "andor"},
      {"the_end", "theend"},
  };
  for (const auto& c : cases) EXPECT_EQ(normalize_answer(c.in), c.out) << "input: " << c.in;
}

TEST(NormalizeAnswer, Idempotent) {
  const char* samples[] = {"The Eiffel Tower!", "a.n the", "th.e cat", "A-n apple", "  ..The.. ", "x a y an z",
                           "«the»", "Q.E.D.", "It's the END"};
  for (const char* s : samples) {
    const auto once = normalize_answer(s);
    EXPECT_EQ(normalize_answer(once), once) << s;
  }
}

TEST(ExactMatch, Examples) {
  EXPECT_EQ(exact_match("The answer", {"answer"}), 1);
  EXPECT_EQ(exact_match("answers", {"answer"}), 0);
  EXPECT_EQ(exact_match("42", {"42", "forty-two"}), 1);
  EXPECT_EQ(exact_match("Forty Two", {"forty-two"}), 0);
  EXPECT_EQ(exact_match("forty two!", {"Forty two"}), 1);
  EXPECT_EQ(exact_match("", {"the"}), 1);
  EXPECT_THROW(exact_match("x", {}), ArgumentError);
}

TEST(ExactMatch, SymmetricUnderSwap) {
  const std::vector<std::pair<std::string, std::string>> pairs{
      {"The Answer", "answer!"}, {"A cat", "cat"}, {"Paris.", "paris"}, {"x", "y"}};
  for (const auto& [p, a] : pairs) EXPECT_EQ(exact_match(p, {a, "zzz"}), exact_match(a, {p}));
}

TEST(ContainsAnswer, WholeTokens) {
  EXPECT_TRUE(contains_answer("the value is F123 here", {"f123"}));
  EXPECT_FALSE(contains_answer("the value is f1234 here", {"f123"}));
  EXPECT_TRUE(contains_answer("New York Yankees won.", {"the new york yankees"}));
  EXPECT_FALSE(contains_answer("anything", {"the"}));
}

TEST(HitsAtK, Definition) {
  std::vector<std::vector<bool>> gold_first(5, std::vector<bool>{true, false, false});
  EXPECT_DOUBLE_EQ(hits_at_k(gold_first, 1).value, 1.0);
  std::vector<std::vector<bool>> second{{false, true, false, false}};
  EXPECT_DOUBLE_EQ(hits_at_k(second, 1).value, 0.0);
  EXPECT_DOUBLE_EQ(hits_at_k(second, 2).value, 1.0);
  auto over = hits_at_k(second, 10);
  EXPECT_TRUE(over.truncated);
  EXPECT_DOUBLE_EQ(over.value, 1.0);
  EXPECT_THROW(hits_at_k(second, 0), ArgumentError);
}

TEST(HitsAtK, RecountOracleAndMonotonicity) {
  CounterRng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::vector<bool>> flags(1 + rng.below(20));
    for (auto& f : flags) {
      f.resize(1 + rng.below(30));
      for (std::size_t i = 0; i < f.size(); ++i) f[i] = rng.below(10) == 0;
    }
    double prev = 0.0;
    for (std::size_t k = 1; k <= 32; ++k) {
      const double h = hits_at_k(flags, k).value;
      std::size_t recount = 0;
      for (const auto& f : flags) {
        bool hit = false;
        for (std::size_t i = 0; i < f.size() && i < k; ++i) hit = hit || f[i];
        recount += hit;
      }
      ASSERT_EQ(h, static_cast<double>(recount) / flags.size());
      ASSERT_GE(h, prev);
      prev = h;
    }
  }
}

TEST(Evaluate, AggregatesAndCsv) {
  auto r = evaluate({"q1", "q2"}, {"Paris", "london"}, {{"paris"}, {"Berlin"}},
                    {{false, true}, {false, false}}, {2, 1});
  EXPECT_DOUBLE_EQ(r.exact_match, 0.5);
  ASSERT_EQ(r.hits.size(), 2u);
  EXPECT_EQ(r.hits[0].k, 1u);
  EXPECT_DOUBLE_EQ(r.hits[1].value, 0.5);
  EXPECT_EQ(r.to_json()["per_question_em"]["q1"], 1);
  auto csv = hits_table_csv({{"DPR", {{10, 0.5, false}, {20, 0.75, false}}}});
  EXPECT_EQ(csv, "Model,H@10,H@20\nDPR,50.0,75.0\n");
}

}  // namespace
}  // namespace kgfid::eval
