#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "kgfid/reader/train.hpp"

namespace kgfid {
namespace {

namespace fs = std::filesystem;
using reader::ReaderConfig;
using reader::ReaderModel;

ReaderConfig tiny_config() {
  ReaderConfig c;
  c.layers = 2;
  c.dims = {16, 2, 32};
  c.passage_len = 16;
  c.answer_len = 4;
  c.rerank_layer = 1;
  c.n1 = 6;
  c.n2 = 2;
  c.gnn.layers = 2;
  return c;
}

std::string passage_text(std::size_t i) {
  return "s" + std::to_string(i) + " t" + std::to_string(i % 3) + " f" + std::to_string(i);
}

corpus::Corpus toy_corpus(std::size_t n) {
  std::vector<corpus::Passage> ps;
  for (std::size_t i = 0; i < n; ++i) ps.push_back({i, "A" + std::to_string(i), "", passage_text(i)});
  return corpus::Corpus::from_passages(std::move(ps));
}

// Question g asks for f<g>; its six candidates are g plus five others in a
// seeded order, with a few random edges.
std::vector<reader::ReaderExample> toy_examples(const corpus::Corpus& c, std::size_t count, std::uint64_t seed) {
  CounterRng rng(seed, "toy");
  std::vector<reader::ReaderExample> out;
  for (std::size_t q = 0; q < count; ++q) {
    const std::size_t g = rng.below(c.size());
    reader::ReaderExample ex;
    ex.question_id = "q" + std::to_string(q);
    ex.question = "s" + std::to_string(g) + " t" + std::to_string(g % 3);
    ex.answers = {"f" + std::to_string(g)};
    std::vector<std::uint64_t> ids{g};
    while (ids.size() < 6) {
      const std::uint64_t o = rng.below(c.size());
      if (std::find(ids.begin(), ids.end(), o) == ids.end()) ids.push_back(o);
    }
    rng.shuffle(ids);
    for (auto id : ids) ex.candidates.push_back({id, id == g});
    for (std::uint32_t i = 0; i < 6; ++i)
      for (std::uint32_t j = i + 1; j < 6; ++j)
        if (rng.uniform(0.0, 1.0) < 0.3) ex.graph_edges.emplace_back(i, j);
    ex.resolve(c);
    out.push_back(std::move(ex));
  }
  return out;
}

text::Vocab toy_vocab(const corpus::Corpus& c) {
  std::vector<std::string> texts;
  for (const auto& p : c.passages()) texts.push_back(p.text);
  return text::Vocab::build(texts);
}

void set(const ParameterSet& ps, const std::string& name, std::vector<double> v) {
  Tensor t = ps.get(name);
  ASSERT_EQ(t.size(), v.size()) << name;
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

void expect_bitwise(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]) << "element " << i;
}

struct Fixture : ::testing::Test {
  corpus::Corpus corpus = toy_corpus(30);
  text::Vocab vocab = toy_vocab(corpus);
  ParameterSet ps{11};
  ReaderModel model = ReaderModel::create(ps, vocab, tiny_config());
  std::vector<reader::ReaderExample> examples = toy_examples(corpus, 12, 4);
};

using Staged = Fixture;

TEST_F(Staged, StageOneThenTwoEqualsFullEncoding) {
  const auto& ex = examples[0];
  auto batch = model.make_inputs(ex.question, ex.passages);
  std::vector<std::size_t> all(ex.passages.size());
  std::iota(all.begin(), all.end(), 0);
  auto staged = model.encode_stage2(model.encode_stage1(batch), all);
  auto full = model.encode_full(batch);
  expect_bitwise(staged.states, full.states);

  // A subset matches the same rows of the full encoding.
  auto part = model.encode_stage2(model.encode_stage1(batch), {1, 4});
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t src = k == 0 ? 1 : 4;
    for (std::size_t t = 0; t < batch.length; ++t)
      for (std::size_t h = 0; h < 16; ++h) {
        ASSERT_EQ(part.states.at(k * batch.length + t, h), full.states.at(src * batch.length + t, h));
      }
  }
}

TEST_F(Staged, FullSelectionReproducesVanillaLogits) {
  auto cfg = tiny_config();
  cfg.n2 = cfg.n1;
  cfg.lambda = 0.0;
  auto m = ReaderModel::bind(ps, vocab, cfg);
  for (const auto& ex : examples) {
    auto a = m.answer_tokens(ex.answers[0]);
    auto r = reader::forward(m, ex.question, ex.passages, ex.graph, &a.input);
    expect_bitwise(r.logits, reader::vanilla_answer_logits(m, ex.question, ex.passages, a.input));
  }
}

TEST_F(Staged, SecondStageFlopsAreLinearInSelection) {
  // All toy passages tokenize to the same length, so per-passage cost is constant.
  const auto& ex = examples[0];
  auto b1 = model.encode_stage1(model.make_inputs(ex.question, ex.passages));
  std::vector<std::uint64_t> cost;
  for (std::size_t n2 = 1; n2 <= 6; ++n2) {
    std::vector<std::size_t> sel(n2);
    std::iota(sel.begin(), sel.end(), 0);
    FlopCounter counter;
    {
      FlopScope scope(counter);
      model.encode_stage2(b1, sel);
    }
    EXPECT_EQ(counter.stage_total(FlopStage::kEncoderStage1), 0u);
    cost.push_back(counter.stage_total(FlopStage::kEncoderStage2));
  }
  ASSERT_GT(cost[0], 0u);
  for (std::size_t k = 0; k < cost.size(); ++k) EXPECT_EQ(cost[k], (k + 1) * cost[0]);
}

TEST(SelectTopN2, Examples) {
  std::vector<double> a{0.9, 0.1, 0.5};
  EXPECT_EQ(reader::select_top_n2(a, 2), (std::vector<std::size_t>{0, 2}));
  std::vector<double> b{0.5, 0.5, 0.1};
  EXPECT_EQ(reader::select_top_n2(b, 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(reader::select_top_n2(b, 3), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(reader::select_top_n2(a, 4), ArgumentError);
}

TEST(ExtractCls, TakesFirstTokenOfEachPassage) {
  reader::EncodedBatch b;
  b.passages = 2;
  b.length = 3;
  b.states = Tensor::from({6, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  Tensor z = reader::extract_cls(b);
  ASSERT_EQ(z.shape(), (Shape{2, 2}));
  EXPECT_EQ(z.at(0, 0), 1);
  EXPECT_EQ(z.at(0, 1), 2);
  EXPECT_EQ(z.at(1, 0), 7);
  EXPECT_EQ(z.at(1, 1), 8);
}

using Rerank = Fixture;

TEST_F(Rerank, ZeroScorerGivesZeroScores) {
  set(ps, "reader.scorer", std::vector<double>(16, 0.0));
  const auto& ex = examples[0];
  Tensor s = model.rerank(reader::extract_cls(model.encode_stage1(model.make_inputs(ex.question, ex.passages))), ex.graph);
  for (double v : s.data()) EXPECT_EQ(v, 0.0);
}

TEST_F(Rerank, PositiveScorerScalingKeepsSelection) {
  for (const auto& ex : examples) {
    Tensor z0 = reader::extract_cls(model.encode_stage1(model.make_inputs(ex.question, ex.passages)));
    auto before = reader::select_top_n2(model.rerank(z0, ex.graph).data(), 6);
    Tensor w = ps.get("reader.scorer");
    std::vector<double> saved(w.data().begin(), w.data().end());
    for (auto& v : w.mutable_data()) v *= 3.7;
    EXPECT_EQ(reader::select_top_n2(model.rerank(z0, ex.graph).data(), 6), before);
    std::copy(saved.begin(), saved.end(), w.mutable_data().begin());
  }
}

TEST(RerankOracle, ThreeNodePath) {
  text::Vocab vocab;
  auto cfg = tiny_config();
  cfg.dims = {2, 1, 4};
  cfg.gnn = {nn::GnnType::kGat, 1, 1, 0.2};
  ParameterSet ps;
  auto m = ReaderModel::create(ps, vocab, cfg);
  set(ps, "reader.rerank.layer0.head0.w", {0.5, 0.1, -0.2, 0.3});
  set(ps, "reader.rerank.layer0.head0.a_src", {0.4, -0.3});
  set(ps, "reader.rerank.layer0.head0.a_dst", {0.2, 0.6});
  set(ps, "reader.scorer", {1.0, -1.0});
  corpus::PassageGraph g{{0, 1, 2}, {"A", "B", "C"}, {{0, 1}, {1, 2}}};
  Tensor s = m.rerank(Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1}), g);
  // z = xW; node i attends over itself and its path neighbours with
  // softmax(leaky(a_dst.z_i + a_src.z_j)); s = (x + agg) . [1, -1].
  const std::vector<double> expected{1.02402133513522, -1.0190056149332134, -0.28304082369025974};
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], expected[i], 1e-12);
  EXPECT_EQ(reader::select_top_n2(s.data(), 2), (std::vector<std::size_t>{0, 2}));
}

using Decode = Fixture;

TEST_F(Decode, PassageOrderDoesNotChangeLogits) {
  const auto& ex = examples[1];
  std::vector<std::string> reversed(ex.passages.rbegin(), ex.passages.rend());
  auto a = model.answer_tokens(ex.answers[0]);
  Tensor x = reader::vanilla_answer_logits(model, ex.question, ex.passages, a.input);
  Tensor y = reader::vanilla_answer_logits(model, ex.question, reversed, a.input);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-8);
}

TEST_F(Decode, GreedyIsDeterministicAndBounded) {
  const auto& ex = examples[2];
  auto mem = model.encode_full(model.make_inputs(ex.question, ex.passages));
  auto first = model.decode(mem, 4);
  EXPECT_EQ(model.decode(mem, 4), first);
  EXPECT_LE(first.size(), 4u);
  for (auto t : first) EXPECT_GT(t, text::Vocab::kUnk);
  EXPECT_LE(model.decode(mem, 1).size(), 1u);
  EXPECT_THROW(model.decode(mem, 0), ArgumentError);
  EXPECT_THROW(model.decode(mem, 5), ArgumentError);
}

TEST(AnswerTokens, ShiftedAndTruncated) {
  auto vocab = text::Vocab::build({"a1 a2 a3 a4 a5"});
  auto cfg = tiny_config();
  ParameterSet ps;
  auto m = ReaderModel::create(ps, vocab, cfg);
  auto t = m.answer_tokens("a1 a2");
  EXPECT_EQ(t.input, (std::vector<std::size_t>{text::Vocab::kBos, vocab.id("a1"), vocab.id("a2")}));
  EXPECT_EQ(t.target, (std::vector<std::size_t>{vocab.id("a1"), vocab.id("a2"), text::Vocab::kEos}));
  auto long_answer = m.answer_tokens("a1 a2 a3 a4 a5");
  EXPECT_EQ(long_answer.input.size(), 4u);
  EXPECT_EQ(long_answer.target.back(), vocab.id("a4"));
}

TEST(JointLoss, LambdaZeroIsAnswerLoss) {
  CounterRng rng(2);
  Tensor logits = testing::random_tensor(rng, {3, 7});
  Tensor scores = testing::random_tensor(rng, {5, 1});
  scores = ops::reshape(scores, {5});
  const std::vector<std::size_t> target{1, 4, 6};
  const std::vector<bool> gold{false, true, false, true, false};
  auto l0 = reader::joint_loss(logits, target, scores, gold, 0.0);
  EXPECT_EQ(l0.total.item(), ops::cross_entropy_rows(logits, target).item());
  EXPECT_EQ(l0.rank, 0.0);
  auto l1 = reader::joint_loss(logits, target, scores, gold, 0.5);
  EXPECT_NEAR(l1.total.item(), l1.answer + 0.5 * l1.rank, 1e-12);
  auto none = reader::joint_loss(logits, target, scores, std::vector<bool>(5, false), 0.5);
  EXPECT_EQ(none.total.item(), none.answer);
  EXPECT_THROW(reader::joint_loss(logits, target, scores, {true}, 0.5), ShapeError);
  EXPECT_THROW(reader::joint_loss(logits, target, scores, gold, -1.0), ArgumentError);
}

TEST(JointLoss, UniformScoresOverHundredCandidates) {
  Tensor logits = Tensor::zeros({1, 4});
  std::vector<bool> gold(100, false);
  gold[17] = true;
  auto l = reader::joint_loss(logits, {0}, Tensor::zeros({100}), gold, 1.0);
  EXPECT_NEAR(l.rank, std::log(100.0), 1e-12);
  EXPECT_NEAR(l.answer, std::log(4.0), 1e-12);
}

using Training = Fixture;

TEST_F(Training, SmokeRunLowersLossAndReachesBothGroups) {
  reader::ReaderTrainConfig tc;
  tc.epochs = 50;
  tc.max_steps = 50;
  tc.batch = 4;
  tc.lr = 3e-3;
  const double before = reader::mean_loss(model, examples);
  auto rep = reader::train_reader(ps, model, examples, {}, tc);
  EXPECT_EQ(rep.step_losses.size(), 50u);
  EXPECT_GT(rep.last_grad_norm_transformer, 0.0);
  EXPECT_GT(rep.last_grad_norm_reranker, 0.0);
  EXPECT_LT(reader::mean_loss(model, examples), before);
  EXPECT_LT(rep.best_dev_loss, rep.initial_dev_loss);
}

TEST_F(Training, ZeroEpochsLeavesParametersUntouched) {
  auto before = ps.snapshot();
  reader::ReaderTrainConfig tc;
  tc.epochs = 0;
  auto rep = reader::train_reader(ps, model, examples, {}, tc);
  EXPECT_TRUE(rep.step_losses.empty());
  for (const auto& [name, t] : ps.items()) expect_bitwise(t, before.get(name));
  EXPECT_THROW(reader::train_reader(ps, model, {}, {}, tc), ArgumentError);
}

using Persistence = Fixture;

TEST_F(Persistence, DatasetRoundTrip) {
  const auto path = fs::temp_directory_path() / "kgfid_reader_ds.jsonl";
  reader::save_reader_dataset(path, examples);
  auto back = reader::load_reader_dataset(path, corpus);
  ASSERT_EQ(back.size(), examples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].to_json(), examples[i].to_json());
    EXPECT_EQ(back[i].passages, examples[i].passages);
    EXPECT_EQ(back[i].graph.edges, examples[i].graph.edges);
  }
  auto bad = examples[0].to_json();
  bad["graph_edges"] = {{0, 9}};
  EXPECT_THROW(reader::ReaderExample::from_json(bad, corpus), ValidationError);
  fs::remove(path);
}

TEST_F(Persistence, CheckpointRoundTrip) {
  const auto dir = fs::temp_directory_path() / "kgfid_reader_ckpt";
  fs::remove_all(dir);
  reader::save_reader(dir, ps, model);
  auto loaded = reader::load_reader(dir);
  EXPECT_EQ(loaded.model.config().to_json(), model.config().to_json());
  const auto& ex = examples[3];
  auto a = model.answer_tokens(ex.answers[0]);
  auto r0 = reader::forward(model, ex.question, ex.passages, ex.graph, &a.input);
  auto r1 = reader::forward(loaded.model, ex.question, ex.passages, ex.graph, &a.input);
  expect_bitwise(r1.scores, r0.scores);
  expect_bitwise(r1.logits, r0.logits);
  fs::remove_all(dir);
}

TEST(ReaderConfig, Validation) {
  auto c = tiny_config();
  c.n2 = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.rerank_layer = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.lambda = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(ReaderConfig::from_json(tiny_config().to_json()).to_json(), tiny_config().to_json());
}

}  // namespace
}  // namespace kgfid
