#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "kgfid/corpus/knowledge_graph.hpp"
#include "kgfid/corpus/passage.hpp"
#include "kgfid/corpus/passage_graph.hpp"
#include "kgfid/numerics/rng.hpp"
#include "kgfid/text/unicode.hpp"

namespace kgfid::corpus {
namespace {

namespace fs = std::filesystem;

std::string words(std::size_t n, const std::string& stem = "w") {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + stem + std::to_string(i);
  return s;
}

fs::path temp_file(const std::string& name, const std::string& content) {
  auto p = fs::temp_directory_path() / ("kgfid_test_" + name);
  std::ofstream(p) << content;
  return p;
}

TEST(ChunkArticle, Examples) {
  auto three = chunk_article("a", "A", words(250), 10);
  ASSERT_EQ(three.size(), 3u);
  EXPECT_EQ(text::split_whitespace(three[0].text).size(), 100u);
  EXPECT_EQ(text::split_whitespace(three[1].text).size(), 100u);
  EXPECT_EQ(text::split_whitespace(three[2].text).size(), 50u);
  EXPECT_EQ(three[0].passage_id, 10u);
  EXPECT_EQ(three[2].passage_id, 12u);
  EXPECT_EQ(chunk_article("a", "A", words(100)).size(), 1u);
  EXPECT_THROW(chunk_article("a", "A", "  \n\t "), ArgumentError);
}

TEST(ChunkArticle, WordCountsAreConservedProperty) {
  CounterRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(450);
    auto ps = chunk_article("a", "t", words(n));
    std::size_t total = 0;
    std::string joined;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto w = text::split_whitespace(ps[i].text).size();
      total += w;
      if (i + 1 < ps.size()) {
        EXPECT_EQ(w, 100u);
      }
      EXPECT_GT(w, 0u);
      EXPECT_LE(w, 100u);
      joined += (i ? " " : "") + ps[i].text;
    }
    EXPECT_EQ(total, n);
    EXPECT_EQ(joined, words(n));
  }
}

TEST(Corpus, SequentialIdsAcrossArticles) {
  auto c = Corpus::from_articles({{"a", "A", words(150)}, {"b", "B", words(20)}});
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.by_id(2).article_id, "b");
  EXPECT_EQ(c.row_of(1), 1u);
  EXPECT_THROW(c.by_id(7), ValidationError);
}

TEST(LoadKg, StatsAndAutoRegistration) {
  auto p = temp_file("triples.tsv", "Q1\tP1\tQ2\nQ2\tP2\tQ3\n\nQ1\tP1\tQ2\n");
  auto kg = load_kg(p);
  EXPECT_EQ(kg.stats(), (KgStats{3, 2, 2}));
  EXPECT_TRUE(kg.connected(*kg.entity("Q2"), *kg.entity("Q1")));
  EXPECT_FALSE(kg.connected(*kg.entity("Q1"), *kg.entity("Q3")));
  auto empty = load_kg(temp_file("empty.tsv", ""));
  EXPECT_EQ(empty.stats(), (KgStats{0, 0, 0}));
  auto ents = temp_file("ents.tsv", "Q9\nQ1\n");
  auto with_entities = load_kg(p, ents);
  EXPECT_EQ(with_entities.stats().n_entities, 4u);
}

TEST(LoadKg, MalformedLineReportsLineNumber) {
  auto p = temp_file("bad.tsv", "Q1\tP1\tQ2\nQ1 P1 Q3\n");
  try {
    load_kg(p);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(KgStats, WikidataScaleRoundTrip) {
  KgStats s{2'700'000, 974, 14'000'000};
  EXPECT_EQ(KgStats::from_json(nlohmann::json::parse(s.to_json().dump())), s);
}

TEST(LoadAlignment, ValidatesTargets) {
  auto kg = load_kg(temp_file("t2.tsv", "E1\tr\tE2\n"));
  auto ok = load_alignment(temp_file("al.tsv", "A1\tE1\nA2\tE2\n"), &kg);
  EXPECT_EQ(*ok.find("A2"), "E2");
  EXPECT_THROW(load_alignment(temp_file("al2.tsv", "A1\tE7\n"), &kg), ValidationError);
  EXPECT_THROW(load_alignment(temp_file("al3.tsv", "A1\tE1\nA1\tE2\n"), &kg), ValidationError);
  EXPECT_THROW(load_alignment(temp_file("al4.tsv", "A1\n")), ParseError);
}

// Independent oracle: checks every pair against every triple.
std::vector<std::pair<std::uint32_t, std::uint32_t>> brute_force_edges(
    const std::vector<Passage>& ps, const std::vector<std::array<std::string, 3>>& triples,
    const std::map<std::string, std::string>& align) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = i + 1; j < ps.size(); ++j) {
      const auto& ei = align.at(ps[i].article_id);
      const auto& ej = align.at(ps[j].article_id);
      for (const auto& t : triples) {
        if ((t[0] == ei && t[2] == ej) || (t[0] == ej && t[2] == ei)) {
          out.emplace_back(i, j);
          break;
        }
      }
    }
  return out;
}

TEST(BuildPassageGraph, FourPassageExample) {
  KnowledgeGraph kg;
  kg.add_triple("A", "r1", "B");
  kg.add_triple("C", "r2", "A");
  EntityAlignment al;
  al.add("artA", "A");
  al.add("artB", "B");
  al.add("artC", "C");
  std::vector<Passage> ps{{1, "artA", "", ""}, {2, "artA", "", ""}, {3, "artB", "", ""}, {4, "artC", "", ""}};
  auto g = build_passage_graph(ps, kg, al);
  using E = std::vector<std::pair<std::uint32_t, std::uint32_t>>;
  // (P1,P3), (P2,P3), (P1,P4), (P2,P4) in sorted index-pair order.
  EXPECT_EQ(g.edges, (E{{0, 2}, {0, 3}, {1, 2}, {1, 3}}));
  EXPECT_EQ(g.edges, brute_force_edges(ps, {{"A", "r1", "B"}, {"C", "r2", "A"}},
                                       {{"artA", "A"}, {"artB", "B"}, {"artC", "C"}}));
  auto same = build_passage_graph(ps, kg, al, {.connect_same_entity = true});
  EXPECT_EQ(same.edges, (E{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}}));

  auto stats = graph_stats({g});
  EXPECT_EQ(stats.edge_count_histogram.at(4), 1u);
  EXPECT_EQ(stats.distinct_articles_histogram.at(3), 1u);
}

TEST(BuildPassageGraph, DegenerateInputs) {
  KnowledgeGraph kg;
  kg.add_entity("A");
  EntityAlignment al;
  al.add("a", "A");
  std::vector<Passage> two{{0, "a", "", ""}, {1, "a", "", ""}};
  EXPECT_TRUE(build_passage_graph(two, kg, al).edges.empty());
  EXPECT_TRUE(build_passage_graph(std::span(two).first(1), kg, al).edges.empty());
  kg.add_triple("A", "self", "A");
  EXPECT_EQ(build_passage_graph(two, kg, al).edges.size(), 1u);
  std::vector<Passage> bad{{0, "a", "", ""}, {1, "zz", "", ""}, {2, "yy", "", ""}};
  try {
    build_passage_graph(bad, kg, al);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("yy zz"), std::string::npos);
  }
}

struct RandomInstance {
  std::vector<Passage> passages;
  std::vector<std::array<std::string, 3>> triples;
  std::map<std::string, std::string> align;
  KnowledgeGraph kg;
  EntityAlignment alignment;
};

RandomInstance random_instance(CounterRng& rng) {
  RandomInstance r;
  const std::size_t n_entities = 1 + rng.below(40);
  const std::size_t n_passages = 1 + rng.below(100);
  const std::size_t n_triples = rng.below(1001);
  for (std::size_t e = 0; e < n_entities; ++e) {
    r.kg.add_entity("E" + std::to_string(e));
    r.align["art" + std::to_string(e)] = "E" + std::to_string(e);
    r.alignment.add("art" + std::to_string(e), "E" + std::to_string(e));
  }
  for (std::size_t t = 0; t < n_triples; ++t) {
    std::array<std::string, 3> tr{"E" + std::to_string(rng.below(n_entities)), "r" + std::to_string(rng.below(5)),
                                  "E" + std::to_string(rng.below(n_entities))};
    r.kg.add_triple(tr[0], tr[1], tr[2]);
    r.triples.push_back(tr);
  }
  for (std::size_t p = 0; p < n_passages; ++p) {
    r.passages.push_back({p, "art" + std::to_string(rng.below(n_entities)), "", ""});
  }
  return r;
}

TEST(BuildPassageGraph, MatchesBruteForceOnRandomInstances) {
  CounterRng rng(2024);
  for (int trial = 0; trial < 150; ++trial) {
    auto inst = random_instance(rng);
    auto g = build_passage_graph(inst.passages, inst.kg, inst.alignment);
    ASSERT_EQ(g.edges, brute_force_edges(inst.passages, inst.triples, inst.align)) << "trial " << trial;
  }
}

TEST(BuildPassageGraph, PermutationConsistent) {
  CounterRng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    auto inst = random_instance(rng);
    const std::size_t n = inst.passages.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<Passage> permuted;
    for (auto p : perm) permuted.push_back(inst.passages[p]);
    auto g = build_passage_graph(inst.passages, inst.kg, inst.alignment);
    auto h = build_passage_graph(permuted, inst.kg, inst.alignment);
    // Map h's edges back through the permutation.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> mapped;
    for (auto [i, j] : h.edges) {
      auto a = static_cast<std::uint32_t>(perm[i]), b = static_cast<std::uint32_t>(perm[j]);
      mapped.emplace_back(std::min(a, b), std::max(a, b));
    }
    std::sort(mapped.begin(), mapped.end());
    EXPECT_EQ(mapped, g.edges);
  }
}

TEST(GraphStats, TriviaSituations) {
  PassageGraph empty{{1, 2}, {"a", "b"}, {}};
  auto all_empty = graph_stats({empty, empty});
  EXPECT_DOUBLE_EQ(all_empty.frac_few_edges, 1.0);
  EXPECT_DOUBLE_EQ(all_empty.frac_single_article, 0.0);
  PassageGraph one_article{{1, 2}, {"a", "a"}, {{0, 1}}};
  PassageGraph rich{{1, 2, 3}, {"a", "b", "c"}, {{0, 1}, {1, 2}}};
  auto mixed = graph_stats({empty, one_article, rich});
  EXPECT_NEAR(mixed.frac_few_edges, 1.0 / 3, 1e-15);
  EXPECT_NEAR(mixed.frac_single_article, 1.0 / 3, 1e-15);
  EXPECT_NEAR(mixed.mean_edges, 1.0, 1e-15);
  std::size_t total = 0;
  for (auto [k, v] : mixed.edge_count_histogram) total += v;
  EXPECT_EQ(total, 3u);
  EXPECT_THROW(graph_stats({}), ArgumentError);
  EXPECT_TRUE(mixed.to_json().contains("edge_count_histogram"));
}

TEST(PassageGraph, SubgraphRelabels) {
  PassageGraph g{{10, 11, 12, 13}, {"a", "b", "c", "d"}, {{0, 1}, {1, 3}, {2, 3}}};
  auto s = g.subgraph({3, 1});
  EXPECT_EQ(s.passage_ids, (std::vector<std::uint64_t>{13, 11}));
  EXPECT_EQ(s.edges, (std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 1}}));
  auto m = g.adjacency_with_self_loops();
  EXPECT_EQ(m[0 * 4 + 1], 1);
  EXPECT_EQ(m[1 * 4 + 0], 1);
  EXPECT_EQ(m[0 * 4 + 2], 0);
  EXPECT_EQ(m[2 * 4 + 2], 1);
}

}  // namespace
}  // namespace kgfid::corpus
