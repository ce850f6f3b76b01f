#include <filesystem>

#include <gtest/gtest.h>

#include "kgfid/datagen/world.hpp"
#include "kgfid/eval/metrics.hpp"

namespace kgfid {
namespace {

namespace fs = std::filesystem;

datagen::WorldConfig small(std::uint64_t seed) {
  datagen::WorldConfig c;
  c.seed = seed;
  c.n_entities = 100;
  c.n_questions = 200;
  return c;
}

TEST(GenWorld, SameSeedWritesIdenticalFiles) {
  const auto root = fs::temp_directory_path() / "kgfid_datagen_test";
  fs::remove_all(root);
  for (const char* run : {"a", "b"}) {
    auto w = datagen::gen_world(small(5));
    datagen::write_world(root / run, w, datagen::gen_questions(w));
  }
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    ++files;
    const auto name = entry.path().filename();
    EXPECT_EQ(io::read_text(entry.path()), io::read_text(root / "b" / name)) << name;
  }
  EXPECT_EQ(files, 8u);
  auto other = datagen::gen_world(small(6));
  EXPECT_NE(other.articles[0].text, datagen::gen_world(small(5)).articles[0].text);
  fs::remove_all(root);
}

TEST(GenWorld, ZeroDegreeGivesEmptyKg) {
  auto c = small(1);
  c.avg_triples_per_entity = 0.0;
  auto w = datagen::gen_world(c);
  EXPECT_EQ(w.kg.stats().n_triples, 0u);
  EXPECT_EQ(w.articles.size(), 100u);
  EXPECT_THROW(datagen::gen_questions(w), ValidationError);
}

TEST(GenWorld, TripleCountNearExpectation) {
  // 100 entities with expected degree 4 give 200 triples on average.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto t = static_cast<double>(datagen::gen_world(small(seed)).kg.stats().n_triples);
    EXPECT_GE(t, 140.0) << "seed " << seed;
    EXPECT_LE(t, 260.0) << "seed " << seed;
  }
}

TEST(GenWorld, ArticlesAreAlignedAndSized) {
  auto c = small(2);
  auto w = datagen::gen_world(c);
  for (std::size_t e = 0; e < c.n_entities; ++e) {
    const auto* ent = w.alignment.find(datagen::article_id(e));
    ASSERT_NE(ent, nullptr);
    EXPECT_EQ(*ent, datagen::entity_id(e));
    EXPECT_EQ(text::split_whitespace(w.articles[e].text).size(), c.words_per_article);
  }
}

TEST(GenQuestions, GoldIsTheOnlyPassageWithTheAnswer) {
  auto w = datagen::gen_world(small(3));
  auto qs = datagen::gen_questions(w);
  ASSERT_EQ(qs.items.size(), 200u);
  for (std::size_t i = 0; i < qs.items.size(); ++i) {
    const auto& q = qs.items[i];
    ASSERT_FALSE(eval::normalize_answer(q.answers[0]).empty());
    std::size_t holders = 0;
    for (std::size_t e = 0; e < w.articles.size(); ++e) {
      if (eval::contains_answer(w.articles[e].text, q.answers)) {
        ++holders;
        EXPECT_EQ(e, qs.truth[i].gold_entity);
      }
    }
    EXPECT_EQ(holders, 1u);
    EXPECT_FALSE(eval::contains_answer(w.articles[qs.truth[i].anchor_entity].text, q.answers));
    EXPECT_NE(w.types[qs.truth[i].anchor_entity], w.types[qs.truth[i].gold_entity]);
  }
  EXPECT_EQ(qs.train.size() + qs.dev.size() + qs.test.size(), 200u);
  EXPECT_EQ(qs.train.size(), 120u);
  EXPECT_EQ(qs.dev.size(), 20u);
}

TEST(GenQuestions, LinkProbabilityControlsAnchorAdjacency) {
  for (double p : {0.0, 1.0}) {
    auto c = small(4);
    c.p_link = p;
    auto w = datagen::gen_world(c);
    auto qs = datagen::gen_questions(w);
    for (const auto& t : qs.truth) {
      const bool adjacent = w.kg.connected(static_cast<std::uint32_t>(t.gold_entity),
                                           static_cast<std::uint32_t>(t.anchor_entity));
      EXPECT_EQ(adjacent, p == 1.0);
      EXPECT_EQ(t.linked, p == 1.0);
    }
  }
  auto c = small(4);
  c.p_link = 0.5;
  c.n_questions = 1000;
  auto w = datagen::gen_world(c);
  std::size_t linked = 0;
  for (const auto& t : datagen::gen_questions(w).truth) linked += t.linked;
  EXPECT_NEAR(static_cast<double>(linked) / 1000.0, 0.5, 0.06);
}

TEST(GenQuestions, TitleCaseAnswersSurviveNormalization) {
  auto c = small(7);
  c.title_case_answers = true;
  auto w = datagen::gen_world(c);
  auto qs = datagen::gen_questions(w);
  for (std::size_t i = 0; i < qs.items.size(); ++i) {
    EXPECT_NE(qs.items[i].answers[0], datagen::fact_token(qs.truth[i].gold_entity));
    EXPECT_EQ(eval::exact_match(datagen::fact_token(qs.truth[i].gold_entity), qs.items[i].answers), 1);
  }
}

TEST(WorldConfig, RejectsInvalidValues) {
  auto bad = [](auto mutate) {
    auto c = small(0);
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](auto& c) { c.p_link = 1.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.n_entities = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.words_per_article = 5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.distractor_strength = -0.1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& c) { c.train_fraction = 0.95; }).validate(), ConfigError);
  EXPECT_NO_THROW(small(0).validate());
}

TEST(QaFiles, RoundTrip) {
  const auto path = fs::temp_directory_path() / "kgfid_qa_test.jsonl";
  std::vector<datagen::QaItem> items{{"q0", "t1 s2", {"f3", "F3"}}, {"q1", "x", {"y"}}};
  datagen::save_qa(path, items);
  auto back = datagen::load_qa(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].answers, items[0].answers);
  EXPECT_EQ(back[1].question, "x");
  fs::remove(path);
}

}  // namespace
}  // namespace kgfid
