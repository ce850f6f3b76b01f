#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "kgfid/nn/gnn.hpp"
#include "kgfid/retriever/rerank.hpp"

namespace kgfid {
namespace {

using testing::gradcheck;
using testing::random_tensor;

corpus::PassageGraph graph_of(std::size_t n, std::vector<std::pair<std::uint32_t, std::uint32_t>> edges) {
  corpus::PassageGraph g;
  for (std::size_t i = 0; i < n; ++i) {
    g.passage_ids.push_back(i);
    g.article_ids.push_back("A" + std::to_string(i));
  }
  g.edges = std::move(edges);
  return g;
}

corpus::PassageGraph random_graph(CounterRng& rng, std::size_t n, double p) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> e;
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = i + 1; j < n; ++j)
      if (rng.uniform(0.0, 1.0) < p) e.emplace_back(i, j);
  return graph_of(n, e);
}

void set(const ParameterSet& ps, const std::string& name, std::vector<double> v) {
  Tensor t = ps.get(name);
  ASSERT_EQ(t.size(), v.size()) << name;
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

TEST(GraphAttention, MatchesDenseMaskedOracle) {
  CounterRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(9), d = 1 + rng.below(5);
    auto g = random_graph(rng, n, 0.35);
    Tensor z = random_tensor(rng, {n, d}), src = random_tensor(rng, {n, 1}), dst = random_tensor(rng, {n, 1});
    ops::SparseRows pattern;
    std::vector<std::vector<std::uint32_t>> nb(n);
    for (std::uint32_t i = 0; i < n; ++i) nb[i].push_back(i);
    for (auto [i, j] : g.edges) nb[i].push_back(j), nb[j].push_back(i);
    for (auto& r : nb) {
      pattern.cols.insert(pattern.cols.end(), r.begin(), r.end());
      pattern.offsets.push_back(pattern.cols.size());
    }
    Tensor sparse = ops::graph_attention(z, src, dst, pattern, 0.2);
    Tensor dense = ops::matmul(
        ops::masked_softmax_rows(ops::leaky_relu(ops::outer_add(dst, src), 0.2), g.adjacency_with_self_loops()), z);
    for (std::size_t i = 0; i < dense.size(); ++i) ASSERT_NEAR(sparse[i], dense[i], 1e-12);

    auto r = gradcheck(
        [&](const std::vector<Tensor>& in) {
          return ops::sum(ops::mul(ops::graph_attention(in[0], in[1], in[2], pattern, 0.2), in[3]));
        },
        {z, src, dst, random_tensor(rng, {n, d})});
    EXPECT_LT(r.max_relative_error, 1e-6) << r.worst_input;
  }
}

TEST(GatForward, TwoNodePathHandOracle) {
  ParameterSet ps;
  nn::GnnConfig cfg{nn::GnnType::kGat, 1, 1, 0.2};
  auto gat = nn::GraphReranker::create(ps, "g", 2, cfg);
  set(ps, "g.layer0.head0.w", {0.5, 0.1, -0.2, 0.3});
  set(ps, "g.layer0.head0.a_src", {0.4, -0.3});
  set(ps, "g.layer0.head0.a_dst", {0.2, 0.6});
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, -1});
  Tensor y = gat.forward(x, graph_of(2, {{0, 1}}));
  // z = xW = [[0.1, 0.7], [1.7, 0]]; per-row softmax of leaky(dst_i + src_j)
  // over both nodes, residual added, identity output map.
  const double want[] = {2.2209074279583567, 2.2096030002682188, 4.220907427958357, -0.790396999731781};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y[i], want[i], 1e-10);
}

TEST(GatForward, IsolatedNodeDependsOnlyOnItself) {
  CounterRng rng(5);
  ParameterSet ps(1);
  auto gat = nn::GraphReranker::create(ps, "g", 8, {});
  Tensor x = random_tensor(rng, {3, 8});
  auto g = graph_of(3, {{0, 1}});
  Tensor y = gat.forward(x, g);
  Tensor alone = gat.forward(ops::gather_rows(x, {2}), graph_of(1, {}));
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(y.at(2, c), alone.at(0, c));
  // Changing another node leaves the isolated one unchanged.
  Tensor x2 = x.clone(false);
  x2.mutable_data()[0] += 1.0;
  Tensor y2 = gat.forward(x2, g);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(y2.at(2, c), y.at(2, c));
}

TEST(GatForward, PermutationEquivariant) {
  CounterRng rng(9);
  for (auto type : {nn::GnnType::kGat, nn::GnnType::kGcn, nn::GnnType::kMlp}) {
    ParameterSet ps(2);
    auto net = nn::GraphReranker::create(ps, "g", 8, {type, 3, 2, 0.2});
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 2 + rng.below(10);
      auto g = random_graph(rng, n, 0.3);
      Tensor x = random_tensor(rng, {n, 8});
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm);
      std::vector<std::size_t> inv(n);
      for (std::size_t i = 0; i < n; ++i) inv[perm[i]] = i;
      // Node i of the permuted graph is node perm[i] of the original.
      std::vector<std::pair<std::uint32_t, std::uint32_t>> pe;
      for (auto [a, b] : g.edges) {
        auto u = static_cast<std::uint32_t>(inv[a]), v = static_cast<std::uint32_t>(inv[b]);
        pe.emplace_back(std::min(u, v), std::max(u, v));
      }
      std::sort(pe.begin(), pe.end());
      Tensor y = net.forward(x, g);
      Tensor yp = net.forward(ops::gather_rows(x, perm), graph_of(n, pe));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 8; ++c) ASSERT_NEAR(yp.at(i, c), y.at(perm[i], c), 1e-12);
    }
  }
}

TEST(GatForward, MlpIgnoresEdgesAndShapesAreChecked) {
  CounterRng rng(4);
  ParameterSet ps(3);
  auto mlp = nn::GraphReranker::create(ps, "g", 4, {nn::GnnType::kMlp, 2, 2, 0.2});
  Tensor x = random_tensor(rng, {3, 4});
  EXPECT_TRUE(mlp.forward(x, graph_of(3, {{0, 1}, {1, 2}})).bitwise_equal(mlp.forward(x, graph_of(3, {}))));
  EXPECT_THROW(mlp.forward(random_tensor(rng, {3, 5}), graph_of(3, {})), ShapeError);
  EXPECT_THROW(mlp.forward(x, graph_of(2, {})), ShapeError);
  ParameterSet none;
  auto off = nn::GraphReranker::create(none, "g", 4, {nn::GnnType::kGat, 0, 2, 0.2});
  EXPECT_EQ(none.size(), 0u);
  EXPECT_TRUE(off.forward(x, graph_of(3, {{0, 2}})).bitwise_equal(x));
  EXPECT_THROW(nn::parse_gnn_type("gin"), ArgumentError);
}

TEST(GatForward, ParameterGradientsMatchFiniteDifferences) {
  CounterRng rng(8);
  ParameterSet ps(4);
  auto gat = nn::GraphReranker::create(ps, "g", 4, {nn::GnnType::kGat, 2, 2, 0.2});
  Tensor x = random_tensor(rng, {5, 4});
  auto g = random_graph(rng, 5, 0.5);
  Tensor w = random_tensor(rng, {5, 4});
  std::vector<Tensor> params;
  for (const auto& [name, t] : ps.items()) {
    Tensor p = t;
    for (auto& v : p.mutable_data()) v += rng.uniform(-0.3, 0.3);
    params.push_back(p);
  }
  auto r = gradcheck([&](const std::vector<Tensor>&) { return ops::sum(ops::mul(gat.forward(x, g), w)); }, params);
  EXPECT_LT(r.max_relative_error, 1e-6) << r.worst_input << " of " << ps.size();
}

retriever::EmbeddingStore random_store(CounterRng& rng, std::size_t n, std::size_t d) {
  retriever::EmbeddingStore s;
  s.matrix = random_tensor(rng, {n, d});
  for (std::size_t i = 0; i < n; ++i) s.passage_ids.push_back(100 + i);
  return s;
}

TEST(TopN0Search, MatchesArgsortOracle) {
  CounterRng rng(11);
  auto store = random_store(rng, 200, 16);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = random_tensor(rng, {16}).values();
    auto got = retriever::top_n0_search(q, store, 50);
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t r = 0; r < 200; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 16; ++c) s += q[c] * store.matrix.at(r, c);
      all.emplace_back(-s, r);
    }
    std::sort(all.begin(), all.end());
    ASSERT_EQ(got.size(), 50u);
    for (std::size_t i = 0; i < 50; ++i) {
      EXPECT_EQ(got.ranking[i].passage_id, 100 + all[i].second);
      EXPECT_NEAR(got.ranking[i].score, -all[i].first, 1e-12);
    }
  }
}

TEST(TopN0Search, ExhaustiveOrthogonalAndErrors) {
  CounterRng rng(12);
  auto store = random_store(rng, 30, 4);
  auto all = retriever::top_n0_search(store.row(3), store, 30);
  ASSERT_EQ(all.size(), 30u);
  for (std::size_t i = 1; i < 30; ++i) EXPECT_GE(all.ranking[i - 1].score, all.ranking[i].score);
  retriever::EmbeddingStore ortho;
  ortho.matrix = Tensor::eye(4);
  ortho.passage_ids = {7, 8, 9, 10};
  std::vector<double> q{0, 0, 1, 0};
  EXPECT_EQ(retriever::top_n0_search(q, ortho, 1).ranking[0].passage_id, 9u);
  EXPECT_THROW(retriever::top_n0_search(q, ortho, 5), ArgumentError);
  EXPECT_THROW(retriever::top_n0_search(std::vector<double>{1, 0}, ortho, 1), ShapeError);
  // Equal scores keep ascending row order.
  retriever::EmbeddingStore flat;
  flat.matrix = Tensor::from({3, 1}, {1, 1, 1});
  flat.passage_ids = {5, 6, 7};
  auto tied = retriever::top_n0_search(std::vector<double>{1}, flat, 3);
  EXPECT_EQ(tied.ranking[0].passage_id, 5u);
  EXPECT_EQ(tied.ranking[2].passage_id, 7u);
}

TEST(EmbeddingStore, RoundTripsBitExactly) {
  CounterRng rng(13);
  auto store = random_store(rng, 17, 5);
  const auto path = std::filesystem::temp_directory_path() / "kgfid_store_test.bin";
  store.save(path);
  auto back = retriever::EmbeddingStore::load(path);
  EXPECT_TRUE(back.matrix.bitwise_equal(store.matrix));
  EXPECT_EQ(back.passage_ids, store.passage_ids);
  EXPECT_EQ(back.row_of(105), 5u);
  EXPECT_THROW(back.row_of(1), ValidationError);
  std::filesystem::remove(path);
}

TEST(RankedList, JsonLinesRoundTrip) {
  std::vector<retriever::RankedList> lists{{"q1", {{3, 0.5}, {1, -0.25}}}, {"q2", {}}};
  const auto path = std::filesystem::temp_directory_path() / "kgfid_ranked_test.jsonl";
  retriever::save_ranked_lists(path, lists);
  auto back = retriever::load_ranked_lists(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].question_id, "q1");
  EXPECT_EQ(back[0].ranking[1].passage_id, 1u);
  EXPECT_EQ(back[0].ranking[1].score, -0.25);
  std::filesystem::remove(path);
}

struct TinyWorld {
  text::Vocab vocab;
  corpus::Corpus corpus;
  std::vector<std::string> texts;

  TinyWorld() {
    std::vector<corpus::Article> arts;
    for (int i = 0; i < 6; ++i) {
      arts.push_back({"A" + std::to_string(i), "t", "alpha w" + std::to_string(i) + " beta x" + std::to_string(i % 3)});
    }
    corpus = corpus::Corpus::from_articles(arts);
    for (const auto& p : corpus.passages()) texts.push_back(p.text);
    vocab = text::Vocab::build(texts);
  }
};

TEST(DualEncoder, DeterministicAndReplayableFromSavedParameters) {
  TinyWorld w;
  ParameterSet ps(21);
  retriever::RetrieverConfig cfg;
  cfg.dims = {16, 2, 32};
  auto enc = retriever::DualEncoder::create(ps, w.vocab.size(), cfg);
  auto store = retriever::encode_corpus(w.corpus, enc, w.vocab, 4);
  EXPECT_EQ(store.matrix.rows(), 6u);
  EXPECT_EQ(store.width(), 16u);
  // Batch composition does not change a row.
  auto single = retriever::encode_corpus(w.corpus, enc, w.vocab, 1);
  EXPECT_TRUE(single.matrix.bitwise_equal(store.matrix));
  auto q1 = retriever::encode_question("alpha w1", enc, w.vocab);
  EXPECT_EQ(q1, retriever::encode_question("alpha w1", enc, w.vocab));

  const auto path = std::filesystem::temp_directory_path() / "kgfid_dual_params.bin";
  ps.save(path);
  auto loaded = ParameterSet::load(path);
  auto replay = retriever::DualEncoder::bind(loaded, cfg);
  EXPECT_TRUE(retriever::encode_corpus(w.corpus, replay, w.vocab).matrix.bitwise_equal(store.matrix));
  std::filesystem::remove(path);
  EXPECT_THROW(retriever::encode_question("", enc, w.vocab), ArgumentError);
}

TEST(DualEncoder, TowersStartEqualAndTrainingLowersLoss) {
  TinyWorld w;
  ParameterSet ps(22);
  retriever::RetrieverConfig cfg;
  cfg.dims = {16, 2, 32};
  auto enc = retriever::DualEncoder::create(ps, w.vocab.size(), cfg);
  EXPECT_TRUE(ps.get("question.tokens").bitwise_equal(ps.get("passage.tokens")));
  EXPECT_NE(ps.get("question.tokens").node().get(), ps.get("passage.tokens").node().get());
  auto losses = retriever::train_dual_encoder(ps, enc, w.vocab, w.texts, {60, 6, 2, 5e-3, 1});
  ASSERT_EQ(losses.size(), 60u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) head += losses[i], tail += losses[50 + i];
  EXPECT_LT(tail, head);
  EXPECT_FALSE(ps.get("question.tokens").bitwise_equal(ps.get("passage.tokens")));
}

/// Candidates over a random store with a fixed graph and one gold.
struct RerankFixture {
  retriever::EmbeddingStore store;
  std::vector<retriever::RerankExample> examples;

  RerankFixture(std::uint64_t seed, std::size_t n_questions, std::size_t n0) {
    CounterRng rng(seed);
    store = random_store(rng, 60, 8);
    for (std::size_t k = 0; k < n_questions; ++k) {
      retriever::RerankExample ex;
      ex.question_id = "q" + std::to_string(k);
      ex.query = random_tensor(rng, {8}).values();
      ex.candidates = retriever::top_n0_search(ex.query, store, n0);
      for (const auto& e : ex.candidates.ranking) ex.rows.push_back(store.row_of(e.passage_id));
      ex.graph = random_graph(rng, n0, 0.1);
      ex.gold.assign(n0, false);
      ex.gold[rng.below(n0)] = true;
      examples.push_back(std::move(ex));
    }
  }
};

TEST(RetrieverRerank, ZeroLayersKeepsRetrieverOrder) {
  RerankFixture f(31, 10, 20);
  ParameterSet none;
  auto off = nn::GraphReranker::create(none, "r", 8, {nn::GnnType::kGat, 0, 2, 0.2});
  for (const auto& ex : f.examples) {
    auto out = retriever::retriever_rerank(ex, f.store, off);
    ASSERT_EQ(out.size(), ex.candidates.size());
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.ranking[i].passage_id, ex.candidates.ranking[i].passage_id);
  }
}

TEST(RetrieverRerank, OutputIsAPermutation) {
  RerankFixture f(32, 10, 20);
  ParameterSet ps(5);
  auto gat = nn::GraphReranker::create(ps, "r", 8, {});
  for (const auto& ex : f.examples) {
    auto out = retriever::retriever_rerank(ex, f.store, gat);
    std::vector<std::uint64_t> a, b;
    for (const auto& e : out.ranking) a.push_back(e.passage_id);
    for (const auto& e : ex.candidates.ranking) b.push_back(e.passage_id);
    for (std::size_t i = 1; i < out.size(); ++i) EXPECT_GE(out.ranking[i - 1].score, out.ranking[i].score);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(RetrieverRerank, UniformScoresGiveLogNLoss) {
  RerankFixture f(33, 1, 60);
  auto ex = f.examples[0];
  ex.query.assign(8, 0.0);
  ParameterSet ps(6);
  auto gat = nn::GraphReranker::create(ps, "r", 8, {});
  Tensor loss = ops::cross_entropy(retriever::rerank_scores(ex, f.store, gat), retriever::gold_distribution(ex.gold));
  EXPECT_NEAR(loss.item(), std::log(60.0), 1e-12);
}

TEST(RetrieverRerank, ZeroEpochsIsANoOpAndStoreStaysFrozen) {
  RerankFixture f(34, 8, 20);
  ParameterSet ps(7);
  auto gat = nn::GraphReranker::create(ps, "r", 8, {});
  const ParameterSet before = ps.snapshot();
  const Tensor store_before = f.store.matrix.clone(false);
  retriever::RerankTrainConfig cfg;
  cfg.epochs = 0;
  auto rep = retriever::train_retriever_reranker(ps, gat, f.store, f.examples, {}, cfg);
  EXPECT_TRUE(ps.bitwise_equal(before));
  EXPECT_TRUE(rep.step_losses.empty());
  cfg.epochs = 2;
  retriever::train_retriever_reranker(ps, gat, f.store, f.examples, {}, cfg);
  EXPECT_TRUE(f.store.matrix.bitwise_equal(store_before));
}

TEST(RetrieverRerank, SingleQuestionLossDecreasesWithSmallSteps) {
  RerankFixture f(35, 1, 20);
  auto& ex = f.examples[0];
  // Gold already ranked first.
  ex.gold.assign(20, false);
  ex.gold[0] = true;
  ParameterSet ps(8);
  auto gat = nn::GraphReranker::create(ps, "r", 8, {});
  AdamW opt(ps);
  double prev = INFINITY;
  for (int step = 0; step < 10; ++step) {
    Tensor loss = ops::cross_entropy(retriever::rerank_scores(ex, f.store, gat), retriever::gold_distribution(ex.gold));
    EXPECT_LT(loss.item(), prev);
    prev = loss.item();
    loss.backward();
    opt.step(1e-3);
  }
}

TEST(RetrieverRerank, TrainingRejectsQuestionsWithoutGold) {
  RerankFixture f(36, 3, 10);
  for (auto& ex : f.examples) ex.gold.assign(10, false);
  ParameterSet ps(9);
  auto gat = nn::GraphReranker::create(ps, "r", 8, {});
  EXPECT_THROW(retriever::train_retriever_reranker(ps, gat, f.store, f.examples, {}, {}), ArgumentError);
}

}  // namespace
}  // namespace kgfid
