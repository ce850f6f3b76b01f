#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgfid/corpus/knowledge_graph.hpp"
#include "kgfid/corpus/passage.hpp"
#include "kgfid/corpus/passage_graph.hpp"
#include "kgfid/eval/metrics.hpp"
#include "kgfid/io/jsonl.hpp"
#include "kgfid/numerics/optim.hpp"
#include "kgfid/numerics/rng.hpp"
#include "kgfid/reader/model.hpp"
#include "kgfid/retriever/search.hpp"

namespace kgfid::reader {

struct Candidate {
  std::uint64_t passage_id = 0;
  bool gold = false;
};

/// One reader training or evaluation question with its N1 candidates.
/// `passages` and `graph` are resolved against a corpus and are not
/// serialized; graph_edges is.
struct ReaderExample {
  std::string question_id;
  std::string question;
  std::vector<std::string> answers;
  std::vector<Candidate> candidates;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> graph_edges;

  std::vector<std::string> passages;
  corpus::PassageGraph graph;

  std::vector<bool> gold() const {
    std::vector<bool> g;
    for (const auto& c : candidates) g.push_back(c.gold);
    return g;
  }
  bool has_gold() const {
    for (const auto& c : candidates)
      if (c.gold) return true;
    return false;
  }

  nlohmann::json to_json() const {
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : candidates) cands.push_back({{"passage_id", c.passage_id}, {"gold", c.gold}});
    nlohmann::json edges = nlohmann::json::array();
    for (auto [i, j] : graph_edges) edges.push_back({i, j});
    return {{"question_id", question_id}, {"question", question},   {"answers", answers},
            {"candidates", cands},       {"graph_edges", edges}};
  }

  /// Reads the record and resolves passage texts and the graph from `corpus`.
  static ReaderExample from_json(const nlohmann::json& j, const corpus::Corpus& corpus) {
    ReaderExample ex;
    ex.question_id = j.at("question_id").get<std::string>();
    ex.question = j.at("question").get<std::string>();
    ex.answers = j.at("answers").get<std::vector<std::string>>();
    for (const auto& c : j.at("candidates")) {
      ex.candidates.push_back({c.at("passage_id").get<std::uint64_t>(), c.at("gold").get<bool>()});
    }
    const std::size_t n = ex.candidates.size();
    for (const auto& e : j.at("graph_edges")) {
      auto a = e.at(0).get<std::uint32_t>(), b = e.at(1).get<std::uint32_t>();
      if (a >= n || b >= n || a == b) {
        throw ValidationError("question " + ex.question_id + ": bad graph edge [" + std::to_string(a) + "," +
                              std::to_string(b) + "]");
      }
      ex.graph_edges.emplace_back(std::min(a, b), std::max(a, b));
    }
    ex.resolve(corpus);
    return ex;
  }

  void resolve(const corpus::Corpus& corpus) {
    passages.clear();
    graph = {};
    for (const auto& c : candidates) {
      const auto& p = corpus.by_id(c.passage_id);
      passages.push_back(p.text);
      graph.passage_ids.push_back(p.passage_id);
      graph.article_ids.push_back(p.article_id);
    }
    graph.edges = graph_edges;
    std::sort(graph.edges.begin(), graph.edges.end());
    graph.edges.erase(std::unique(graph.edges.begin(), graph.edges.end()), graph.edges.end());
  }
};

/// The first n1 entries of `ranked` become the candidates; gold flags use
/// whole-token answer containment.
inline ReaderExample make_reader_example(const std::string& question_id, const std::string& question,
                                         const std::vector<std::string>& answers,
                                         const retriever::RankedList& ranked, std::size_t n1,
                                         const corpus::Corpus& corpus, const corpus::KnowledgeGraph& kg,
                                         const corpus::EntityAlignment& align,
                                         const corpus::GraphOptions& gopt = {}) {
  if (ranked.size() < n1) {
    throw ArgumentError("question " + question_id + " has " + std::to_string(ranked.size()) +
                        " ranked passages, fewer than N1 = " + std::to_string(n1));
  }
  ReaderExample ex{question_id, question, answers, {}, {}, {}, {}};
  std::vector<corpus::Passage> ps;
  for (std::size_t i = 0; i < n1; ++i) {
    ps.push_back(corpus.by_id(ranked.ranking[i].passage_id));
    ex.candidates.push_back({ps.back().passage_id, eval::contains_answer(ps.back().text, answers)});
  }
  ex.graph_edges = corpus::build_passage_graph(ps, kg, align, gopt).edges;
  ex.resolve(corpus);
  return ex;
}

inline void save_reader_dataset(const std::filesystem::path& path, const std::vector<ReaderExample>& examples) {
  std::vector<nlohmann::json> rows;
  for (const auto& e : examples) rows.push_back(e.to_json());
  io::write_jsonl(path, rows);
}

inline std::vector<ReaderExample> load_reader_dataset(const std::filesystem::path& path,
                                                      const corpus::Corpus& corpus) {
  std::vector<ReaderExample> out;
  io::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) { out.push_back(ReaderExample::from_json(j, corpus)); });
  return out;
}

/// Joint loss of one question. `answer` picks the training target.
inline LossParts example_loss(const ReaderModel& m, const ReaderExample& ex, std::size_t answer) {
  if (ex.answers.empty()) throw ArgumentError("question " + ex.question_id + " has no answer");
  const AnswerTokens a = m.answer_tokens(ex.answers.at(answer));
  ForwardResult r = forward(m, ex.question, ex.passages, ex.graph, &a.input);
  return joint_loss(r.logits, a.target, r.scores, ex.gold(), m.config().lambda);
}

struct ReaderTrainConfig {
  std::size_t epochs = 4;
  std::size_t max_steps = 0;  // 0 = no cap
  std::size_t batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"max_steps", max_steps}, {"batch", batch}, {"lr", lr}, {"seed", seed}};
  }
};

struct ReaderTrainReport {
  std::vector<double> step_losses;
  std::vector<double> dev_losses;  // after each epoch
  double initial_dev_loss = 0.0;
  double best_dev_loss = 0.0;
  std::size_t best_epoch = 0;
  double last_grad_norm_transformer = 0.0;
  double last_grad_norm_reranker = 0.0;

  nlohmann::json to_json() const {
    return {{"steps", step_losses.size()},      {"first_loss", step_losses.empty() ? 0.0 : step_losses.front()},
            {"last_loss", step_losses.empty() ? 0.0 : step_losses.back()},
            {"dev_losses", dev_losses},         {"initial_dev_loss", initial_dev_loss},
            {"best_dev_loss", best_dev_loss},   {"best_epoch", best_epoch}};
  }
};

/// Mean joint loss with the first answer as target.
inline double mean_loss(const ReaderModel& m, const std::vector<ReaderExample>& examples) {
  NoGradGuard no_grad;
  double s = 0.0;
  for (const auto& ex : examples) s += example_loss(m, ex, 0).total.item();
  return examples.empty() ? 0.0 : s / static_cast<double>(examples.size());
}

inline double grad_norm_where(const ParameterSet& ps, bool reranker) {
  double s = 0.0;
  for (const auto& [name, t] : ps.items()) {
    const bool is_rerank = name.rfind("reader.rerank", 0) == 0 || name == "reader.scorer";
    if (is_rerank != reranker || !t.has_grad()) continue;
    for (double g : t.grad()) s += g * g;
  }
  return std::sqrt(s);
}

/// AdamW on the summed joint loss of each batch, linear warmup over 5% of the
/// steps then linear decay. After every epoch the dev loss is measured and
/// the best parameters (initial ones included) are left in `ps`.
inline ReaderTrainReport train_reader(ParameterSet& ps, const ReaderModel& m, const std::vector<ReaderExample>& train,
                                      const std::vector<ReaderExample>& dev, const ReaderTrainConfig& cfg) {
  if (train.empty()) throw ArgumentError("train_reader: empty dataset");
  if (cfg.batch == 0) throw ArgumentError("train_reader: batch must be positive");
  ReaderTrainReport rep;
  const auto& val = dev.empty() ? train : dev;
  rep.initial_dev_loss = rep.best_dev_loss = mean_loss(m, val);
  const std::size_t per_epoch = (train.size() + cfg.batch - 1) / cfg.batch;
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  if (total == 0) return rep;

  AdamW opt(ps);
  const LinearSchedule sched{cfg.lr, std::max<std::size_t>(1, total / 20), total};
  CounterRng rng(cfg.seed, "reader.train");
  ParameterSet best = ps.snapshot();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && step < total; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size() && step < total; start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      Tensor loss;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train[order[i]];
        const std::size_t answer = m.config().sample_answers ? rng.below(ex.answers.size()) : 0;
        Tensor l = example_loss(m, ex, answer).total;
        loss = loss.defined() ? ops::add(loss, l) : l;
      }
      loss = ops::scale(loss, 1.0 / static_cast<double>(end - start));
      rep.step_losses.push_back(loss.item());
      loss.backward();
      rep.last_grad_norm_transformer = grad_norm_where(ps, false);
      rep.last_grad_norm_reranker = grad_norm_where(ps, true);
      opt.step(sched.at(step++));
    }
    const double d = mean_loss(m, val);
    rep.dev_losses.push_back(d);
    if (d < rep.best_dev_loss) {
      rep.best_dev_loss = d;
      rep.best_epoch = epoch;
      best = ps.snapshot();
    }
  }
  ps.assign(best);
  return rep;
}

struct ReaderEval {
  eval::EvalResult answers;
  std::vector<std::string> predictions;
  double gold_in_top_n2 = 0.0;       // over questions with a gold candidate
  std::size_t with_gold = 0;
  std::vector<std::vector<bool>> reranked_gold;  // gold flags in reranked order

  nlohmann::json to_json() const {
    auto j = answers.to_json();
    j["gold_in_top_n2"] = gold_in_top_n2;
    j["questions_with_gold"] = with_gold;
    return j;
  }
};

/// Rate at which a gold candidate survives into the top N2, over questions
/// that have one. Stage-1 encoding and reranking only.
inline double gold_in_top_n2_rate(const ReaderModel& m, const std::vector<ReaderExample>& examples,
                                  std::size_t* with_gold = nullptr) {
  NoGradGuard no_grad;
  std::size_t hit = 0, n = 0;
  for (const auto& ex : examples) {
    if (!ex.has_gold()) continue;
    ++n;
    EncodedBatch b = m.encode_stage1(m.make_inputs(ex.question, ex.passages));
    Tensor s = m.rerank(extract_cls(b), ex.graph);
    for (auto i : select_top_n2(s.data(), std::min(m.config().n2, ex.passages.size()))) {
      if (ex.candidates[i].gold) {
        ++hit;
        break;
      }
    }
  }
  if (with_gold) *with_gold = n;
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

/// Greedy answers for every example plus EM and reranked Hits@K.
inline ReaderEval evaluate_reader(const ReaderModel& m, const std::vector<ReaderExample>& examples,
                                  const std::vector<std::size_t>& ks = {1, 5, 10, 20}) {
  NoGradGuard no_grad;
  ReaderEval r;
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> answers;
  std::size_t hit = 0;
  for (const auto& ex : examples) {
    ForwardResult f = forward(m, ex.question, ex.passages, ex.graph);
    r.predictions.push_back(m.vocab().decode(m.decode(f.memory, m.config().answer_len)));
    ids.push_back(ex.question_id);
    answers.push_back(ex.answers);
    std::vector<bool> flags;
    for (auto i : select_top_n2(f.scores.data(), ex.passages.size())) flags.push_back(ex.candidates[i].gold);
    if (ex.has_gold()) {
      ++r.with_gold;
      if (std::find(flags.begin(), flags.begin() + static_cast<std::ptrdiff_t>(f.selected.size()), true) !=
          flags.begin() + static_cast<std::ptrdiff_t>(f.selected.size())) {
        ++hit;
      }
    }
    r.reranked_gold.push_back(std::move(flags));
  }
  r.gold_in_top_n2 = r.with_gold ? static_cast<double>(hit) / static_cast<double>(r.with_gold) : 0.0;
  r.answers = eval::evaluate(ids, r.predictions, answers, r.reranked_gold, ks);
  return r;
}

/// params.bin plus reader.json holding the config and the vocabulary.
inline void save_reader(const std::filesystem::path& dir, const ParameterSet& ps, const ReaderModel& m) {
  std::filesystem::create_directories(dir);
  ps.save(dir / "params.bin");
  io::write_json(dir / "reader.json", {{"config", m.config().to_json()}, {"vocab", m.vocab().to_json()}});
}

struct LoadedReader {
  ParameterSet params;
  ReaderModel model;
};

inline LoadedReader load_reader(const std::filesystem::path& dir) {
  const auto side = io::read_json(dir / "reader.json");
  LoadedReader r{ParameterSet::load(dir / "params.bin"), {}};
  r.model = ReaderModel::bind(r.params, text::Vocab::from_json(side.at("vocab")),
                              ReaderConfig::from_json(side.at("config")));
  return r;
}

}  // namespace kgfid::reader
