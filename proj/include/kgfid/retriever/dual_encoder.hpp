#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgfid/error.hpp"
#include "kgfid/nn/transformer.hpp"
#include "kgfid/numerics/optim.hpp"
#include "kgfid/numerics/rng.hpp"
#include "kgfid/text/vocab.hpp"

namespace kgfid::retriever {

struct RetrieverConfig {
  std::size_t layers = 2;
  nn::TransformerDims dims{64, 4, 256};
  std::size_t max_len = 48;

  nlohmann::json to_json() const {
    return {{"layers", layers}, {"hidden", dims.hidden}, {"heads", dims.heads}, {"ffn", dims.ffn},
            {"max_len", max_len}};
  }
  static RetrieverConfig from_json(const nlohmann::json& j) {
    RetrieverConfig c;
    c.layers = j.at("layers");
    c.dims = {j.at("hidden"), j.at("heads"), j.at("ffn")};
    c.max_len = j.at("max_len");
    return c;
  }
};

/// [CLS] + tokens, truncated to max_len and right-padded to the longest row.
inline nn::TokenBatch make_token_batch(const text::Vocab& vocab, const std::vector<std::string>& texts,
                                       std::size_t max_len) {
  std::vector<std::vector<std::size_t>> rows;
  std::size_t longest = 1;
  for (const auto& t : texts) {
    auto ids = vocab.encode(t);
    if (ids.empty()) throw ArgumentError("cannot encode empty text");
    ids.insert(ids.begin(), text::Vocab::kCls);
    if (ids.size() > max_len) ids.resize(max_len);
    longest = std::max(longest, ids.size());
    rows.push_back(std::move(ids));
  }
  nn::TokenBatch b{rows.size(), longest, {}, {}};
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < longest; ++i) {
      b.ids.push_back(i < r.size() ? r[i] : text::Vocab::kPad);
      b.valid.push_back(i < r.size() ? 1 : 0);
    }
  }
  return b;
}

/// Two separately parameterised towers with first-token pooling. Both start
/// from the same initial weights and diverge during training.
class DualEncoder {
 public:
  static DualEncoder create(ParameterSet& ps, std::size_t vocab_size, const RetrieverConfig& cfg) {
    ParameterSet init(ps.seed());
    nn::EncoderStack::create(init, "tower", init.uniform("tower.tokens", {vocab_size, cfg.dims.hidden}, 1),
                             cfg.max_len, cfg.layers, cfg.dims);
    for (const char* tower : {"question", "passage"}) {
      for (const auto& [name, t] : init.items()) {
        ps.insert(tower + name.substr(5), t.clone(true));
      }
    }
    return bind(ps, cfg);
  }

  static DualEncoder bind(const ParameterSet& ps, const RetrieverConfig& cfg) {
    DualEncoder e;
    e.cfg_ = cfg;
    e.question_ = nn::EncoderStack::bind(ps, "question", ps.get("question.tokens"), cfg.layers, cfg.dims);
    e.passage_ = nn::EncoderStack::bind(ps, "passage", ps.get("passage.tokens"), cfg.layers, cfg.dims);
    return e;
  }

  const RetrieverConfig& config() const { return cfg_; }
  std::size_t width() const { return cfg_.dims.hidden; }

  Tensor encode_questions(const text::Vocab& vocab, const std::vector<std::string>& texts) const {
    return pool(question_, make_token_batch(vocab, texts, cfg_.max_len));
  }
  Tensor encode_passages(const text::Vocab& vocab, const std::vector<std::string>& texts) const {
    return pool(passage_, make_token_batch(vocab, texts, cfg_.max_len));
  }

 private:
  static Tensor pool(const nn::EncoderStack& stack, const nn::TokenBatch& b) {
    Tensor states = stack.encode(b);
    std::vector<std::size_t> first(b.batch);
    for (std::size_t i = 0; i < b.batch; ++i) first[i] = i * b.length;
    return ops::gather_rows(states, first);
  }

  RetrieverConfig cfg_;
  nn::EncoderStack question_, passage_;
};

struct EncoderTrainConfig {
  std::size_t steps = 300;
  std::size_t batch = 32;
  std::size_t query_tokens = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Inverse-cloze style training: a random token subset of a passage is the
/// query, and the other passages of the batch are the negatives. Returns the
/// per-step losses.
inline std::vector<double> train_dual_encoder(ParameterSet& ps, const DualEncoder& enc, const text::Vocab& vocab,
                                              const std::vector<std::string>& passages,
                                              const EncoderTrainConfig& cfg) {
  if (passages.empty()) throw ArgumentError("train_dual_encoder: empty corpus");
  CounterRng rng(cfg.seed, "retriever.ict");
  AdamW opt(ps);
  const LinearSchedule sched{cfg.lr, std::max<std::size_t>(1, cfg.steps / 20), cfg.steps};
  const std::size_t batch = std::min(cfg.batch, passages.size());
  std::vector<double> losses;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto rows = rng.sample_distinct(passages.size(), batch);
    std::vector<std::string> queries, docs;
    for (auto r : rows) {
      auto toks = text::tokenize(passages[r]);
      auto pick = rng.sample_distinct(toks.size(), std::min(cfg.query_tokens, toks.size()));
      std::string q;
      for (auto i : pick) q += (q.empty() ? "" : " ") + toks[i];
      queries.push_back(std::move(q));
      docs.push_back(passages[r]);
    }
    Tensor qv = enc.encode_questions(vocab, queries);
    Tensor pv = enc.encode_passages(vocab, docs);
    std::vector<std::size_t> targets(batch);
    for (std::size_t i = 0; i < batch; ++i) targets[i] = i;
    Tensor loss = ops::cross_entropy_rows(ops::matmul(qv, ops::transpose(pv)), targets);
    losses.push_back(loss.item());
    loss.backward();
    opt.step(sched.at(step));
  }
  return losses;
}

}  // namespace kgfid::retriever
