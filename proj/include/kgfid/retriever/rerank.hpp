#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgfid/corpus/knowledge_graph.hpp"
#include "kgfid/corpus/passage_graph.hpp"
#include "kgfid/eval/metrics.hpp"
#include "kgfid/nn/gnn.hpp"
#include "kgfid/numerics/optim.hpp"
#include "kgfid/retriever/search.hpp"

namespace kgfid::retriever {

/// One question's retrieved candidates, ready for graph reranking.
struct RerankExample {
  std::string question_id;
  std::vector<double> query;
  RankedList candidates;
  std::vector<std::size_t> rows;  // store rows in candidate order
  corpus::PassageGraph graph;
  std::vector<bool> gold;

  bool has_gold() const { return std::find(gold.begin(), gold.end(), true) != gold.end(); }
};

inline RerankExample make_rerank_example(const std::string& question_id, std::vector<double> query,
                                         RankedList candidates, const EmbeddingStore& store,
                                         const corpus::Corpus& corpus, const corpus::KnowledgeGraph& kg,
                                         const corpus::EntityAlignment& align,
                                         const std::vector<std::string>& answers,
                                         const corpus::GraphOptions& gopt = {}) {
  RerankExample ex;
  ex.question_id = question_id;
  ex.query = std::move(query);
  ex.candidates = std::move(candidates);
  ex.candidates.question_id = question_id;
  std::vector<corpus::Passage> passages;
  for (const auto& e : ex.candidates.ranking) {
    ex.rows.push_back(store.row_of(e.passage_id));
    passages.push_back(corpus.by_id(e.passage_id));
    ex.gold.push_back(!answers.empty() && eval::contains_answer(passages.back().text, answers));
  }
  ex.graph = corpus::build_passage_graph(passages, kg, align, gopt);
  return ex;
}

/// s_i = q . E_i where E are the reranker outputs for the candidate rows.
inline Tensor rerank_scores(const RerankExample& ex, const EmbeddingStore& store, const nn::GraphReranker& reranker) {
  if (ex.query.size() != store.width()) throw ShapeError("query width does not match the embedding store");
  Tensor feats = ops::gather_rows(store.matrix, ex.rows);
  Tensor out = reranker.forward(feats, ex.graph);
  Tensor q = Tensor::from({store.width(), 1}, ex.query);
  KindScope kind(FlopKind::kProjection);
  return ops::reshape(ops::matmul(out, q), {ex.rows.size()});
}

/// Candidates reordered by reranker score; ties keep retriever order.
inline RankedList retriever_rerank(const RerankExample& ex, const EmbeddingStore& store,
                                   const nn::GraphReranker& reranker) {
  NoGradGuard no_grad;
  StageScope stage(FlopStage::kReranker);
  Tensor s = rerank_scores(ex, store, reranker);
  RankedList out{ex.question_id, {}};
  for (auto i : order_by_score(s.data())) out.ranking.push_back({ex.candidates.ranking[i].passage_id, s[i]});
  return out;
}

/// Gold flags of `ex` permuted into the order of `ranked`.
inline std::vector<bool> gold_in_order(const RerankExample& ex, const RankedList& ranked) {
  std::unordered_map<std::uint64_t, bool> flag;
  for (std::size_t i = 0; i < ex.gold.size(); ++i) flag[ex.candidates.ranking[i].passage_id] = ex.gold[i];
  std::vector<bool> out;
  for (const auto& e : ranked.ranking) out.push_back(flag.at(e.passage_id));
  return out;
}

/// Hits@k of the reranked order over `examples` (all of them, gold or not).
inline double reranked_hits(const std::vector<RerankExample>& examples, const EmbeddingStore& store,
                            const nn::GraphReranker& reranker, std::size_t k) {
  std::vector<std::vector<bool>> flags;
  for (const auto& ex : examples) flags.push_back(gold_in_order(ex, retriever_rerank(ex, store, reranker)));
  return eval::hits_at_k(flags, k).value;
}

inline Tensor gold_distribution(const std::vector<bool>& gold) {
  const auto n_gold = static_cast<double>(std::count(gold.begin(), gold.end(), true));
  std::vector<double> t(gold.size(), 0.0);
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (gold[i]) t[i] = 1.0 / n_gold;
  return Tensor::from({gold.size()}, std::move(t));
}

struct RerankTrainConfig {
  std::size_t epochs = 4;
  std::size_t batch = 8;
  double lr = 3e-3;
  std::size_t eval_k = 10;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"eval_k", eval_k}, {"seed", seed}};
  }
};

struct RerankTrainReport {
  std::vector<double> step_losses;
  std::vector<double> dev_hits;  // after each epoch
  double initial_dev_hits = 0.0;
  double best_dev_hits = 0.0;
  std::size_t best_epoch = 0;  // 0 = the initial parameters
  std::size_t skipped = 0;     // training questions without a gold candidate

  nlohmann::json to_json() const {
    return {{"dev_hits", dev_hits},         {"initial_dev_hits", initial_dev_hits},
            {"best_dev_hits", best_dev_hits}, {"best_epoch", best_epoch},
            {"skipped", skipped},           {"steps", step_losses.size()}};
  }
};

/// Trains only the parameters in `ps` (the reranker's own set); passage
/// embeddings and queries are constants. The parameters with the best dev
/// Hits@k, including the initial ones, are left in `ps`.
inline RerankTrainReport train_retriever_reranker(ParameterSet& ps, const nn::GraphReranker& reranker,
                                                  const EmbeddingStore& store,
                                                  const std::vector<RerankExample>& train,
                                                  const std::vector<RerankExample>& dev,
                                                  const RerankTrainConfig& cfg) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (train[i].has_gold()) usable.push_back(i);
  if (usable.empty()) throw ArgumentError("train_retriever_reranker: no training question has a gold candidate");
  RerankTrainReport rep;
  rep.skipped = train.size() - usable.size();
  const std::vector<RerankExample>& val = dev.empty() ? train : dev;
  rep.initial_dev_hits = rep.best_dev_hits = reranked_hits(val, store, reranker, cfg.eval_k);
  if (cfg.epochs == 0 || ps.size() == 0) return rep;

  const std::size_t per_epoch = (usable.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t total = per_epoch * cfg.epochs;
  const LinearSchedule sched{cfg.lr, std::max<std::size_t>(1, total / 20), total};
  AdamW opt(ps);
  CounterRng rng(cfg.seed, "retriever.rerank.shuffle");
  ParameterSet best = ps.snapshot();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = usable;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      Tensor loss;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train[order[i]];
        Tensor l = ops::cross_entropy(rerank_scores(ex, store, reranker), gold_distribution(ex.gold));
        loss = loss.defined() ? ops::add(loss, l) : l;
      }
      loss = ops::scale(loss, 1.0 / static_cast<double>(end - start));
      rep.step_losses.push_back(loss.item());
      loss.backward();
      opt.step(sched.at(step++));
    }
    const double h = reranked_hits(val, store, reranker, cfg.eval_k);
    rep.dev_hits.push_back(h);
    if (h > rep.best_dev_hits) {
      rep.best_dev_hits = h;
      rep.best_epoch = epoch;
      best = ps.snapshot();
    }
  }
  ps.assign(best);
  return rep;
}

}  // namespace kgfid::retriever
