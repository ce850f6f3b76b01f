#pragma once

// Fusion-in-decoder reader with intermediate-layer graph reranking: encode
// every candidate to layer L1, score the [CLS] states with a graph network,
// finish encoding only the top N2, and decode over their concatenation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgfid/corpus/passage_graph.hpp"
#include "kgfid/error.hpp"
#include "kgfid/nn/gnn.hpp"
#include "kgfid/nn/transformer.hpp"
#include "kgfid/text/vocab.hpp"

namespace kgfid::reader {

struct ReaderConfig {
  std::size_t layers = 4;  // L, for both encoder and decoder
  nn::TransformerDims dims{64, 4, 256};
  std::size_t passage_len = 48;  // T_p
  std::size_t answer_len = 8;    // T_a
  std::size_t rerank_layer = 2;  // L1
  std::size_t n1 = 20;
  std::size_t n2 = 4;
  double lambda = 0.1;
  nn::GnnConfig gnn{};
  bool sample_answers = false;  // draw a training target among the answers instead of using the first

  void validate() const {
    if (layers == 0) throw ConfigError("reader.layers must be positive");
    if (rerank_layer < 1 || rerank_layer > layers) {
      throw ConfigError("reader.rerank_layer must lie in [1, layers], got " + std::to_string(rerank_layer));
    }
    if (n2 < 1 || n2 > n1) throw ConfigError("reader.n2 must lie in [1, n1]");
    if (lambda < 0.0) throw ConfigError("reader.lambda must be non-negative");
    if (passage_len < 3) throw ConfigError("reader.passage_len must be at least 3");
    if (answer_len < 1) throw ConfigError("reader.answer_len must be positive");
  }

  nlohmann::json to_json() const {
    return {{"layers", layers},
            {"hidden", dims.hidden},
            {"heads", dims.heads},
            {"ffn", dims.ffn},
            {"passage_len", passage_len},
            {"answer_len", answer_len},
            {"rerank_layer", rerank_layer},
            {"n1", n1},
            {"n2", n2},
            {"lambda", lambda},
            {"gnn_type", nn::gnn_type_name(gnn.type)},
            {"gnn_layers", gnn.layers},
            {"gnn_heads", gnn.heads},
            {"sample_answers", sample_answers}};
  }

  static ReaderConfig from_json(const nlohmann::json& j) {
    ReaderConfig c;
    c.layers = j.at("layers");
    c.dims = {j.at("hidden"), j.at("heads"), j.at("ffn")};
    c.passage_len = j.at("passage_len");
    c.answer_len = j.at("answer_len");
    c.rerank_layer = j.at("rerank_layer");
    c.n1 = j.at("n1");
    c.n2 = j.at("n2");
    c.lambda = j.at("lambda");
    c.gnn.type = nn::parse_gnn_type(j.at("gnn_type"));
    c.gnn.layers = j.at("gnn_layers");
    c.gnn.heads = j.at("gnn_heads");
    c.sample_answers = j.at("sample_answers");
    c.validate();
    return c;
  }
};

/// Per-passage token states, all at the same encoder depth.
struct EncodedBatch {
  Tensor states;  // [passages * length, H]
  std::size_t passages = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> valid;  // [passages * length]
  std::size_t layer = 0;            // encoder layers applied so far

  nn::TokenBatch tokens_view() const { return {passages, length, {}, valid}; }
};

/// Decoder input and target for one answer: [BOS] a_1 .. a_k and a_1 .. a_k [EOS],
/// truncated to T_a positions.
struct AnswerTokens {
  std::vector<std::size_t> input;
  std::vector<std::size_t> target;
};

class ReaderModel {
 public:
  ReaderModel() = default;

  static ReaderModel create(ParameterSet& ps, const text::Vocab& vocab, const ReaderConfig& cfg) {
    cfg.validate();
    const std::size_t h = cfg.dims.hidden;
    Tensor tokens = ps.uniform("reader.tokens", {vocab.size(), h}, 1);
    nn::EncoderStack::create(ps, "reader.encoder", tokens, cfg.passage_len, cfg.layers, cfg.dims);
    ps.uniform("reader.decoder.positions", {cfg.answer_len, h}, h);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      nn::DecoderLayer::create(ps, "reader.decoder.layer" + std::to_string(l), cfg.dims);
    }
    nn::LayerNormParams::create(ps, "reader.decoder.ln_final", h);
    nn::GraphReranker::create(ps, "reader.rerank", h, cfg.gnn);
    ps.uniform("reader.scorer", {h}, h);
    return bind(ps, vocab, cfg);
  }

  static ReaderModel bind(const ParameterSet& ps, const text::Vocab& vocab, const ReaderConfig& cfg) {
    cfg.validate();
    ReaderModel m;
    m.cfg_ = cfg;
    m.vocab_ = vocab;
    m.tokens_ = ps.get("reader.tokens");
    if (m.tokens_.dim(0) != vocab.size()) throw ValidationError("reader checkpoint does not match the vocabulary");
    m.encoder_ = nn::EncoderStack::bind(ps, "reader.encoder", m.tokens_, cfg.layers, cfg.dims);
    m.dec_positions_ = ps.get("reader.decoder.positions");
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      m.decoder_.push_back(nn::DecoderLayer::bind(ps, "reader.decoder.layer" + std::to_string(l), cfg.dims));
    }
    m.dec_ln_ = nn::LayerNormParams::bind(ps, "reader.decoder.ln_final");
    m.reranker_ = nn::GraphReranker::bind(ps, "reader.rerank", cfg.dims.hidden, cfg.gnn);
    m.scorer_ = ps.get("reader.scorer");
    return m;
  }

  const ReaderConfig& config() const { return cfg_; }
  const text::Vocab& vocab() const { return vocab_; }
  const nn::EncoderStack& encoder() const { return encoder_; }
  const nn::GraphReranker& reranker() const { return reranker_; }
  const Tensor& scorer() const { return scorer_; }

  /// [CLS] question [SEP] passage, cut to T_p tokens, padded to the longest
  /// sequence of the group.
  nn::TokenBatch make_inputs(const std::string& question, const std::vector<std::string>& passages) const {
    if (passages.empty()) throw ArgumentError("reader input needs at least one passage");
    auto q = vocab_.encode(question);
    std::vector<std::vector<std::size_t>> rows;
    std::size_t longest = 0;
    for (const auto& p : passages) {
      std::vector<std::size_t> ids{text::Vocab::kCls};
      ids.insert(ids.end(), q.begin(), q.end());
      ids.push_back(text::Vocab::kSep);
      const auto pt = vocab_.encode(p);
      ids.insert(ids.end(), pt.begin(), pt.end());
      if (ids.size() > cfg_.passage_len) ids.resize(cfg_.passage_len);
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

  AnswerTokens answer_tokens(const std::string& answer) const {
    AnswerTokens a;
    a.input.push_back(text::Vocab::kBos);
    for (auto id : vocab_.encode(answer)) {
      a.input.push_back(id);
      a.target.push_back(id);
    }
    a.target.push_back(text::Vocab::kEos);
    a.input.resize(std::min(a.input.size(), cfg_.answer_len));
    a.target.resize(a.input.size());
    return a;
  }

  /// Embedding plus encoder layers 1..L1 for each passage independently.
  EncodedBatch encode_stage1(const nn::TokenBatch& b) const {
    StageScope stage(FlopStage::kEncoderStage1);
    EncodedBatch e{encoder_.embed(b), b.batch, b.length, b.valid, 0};
    e.states = encoder_.run_layers(e.states, nn::EncoderStack::mask_for(b), 0, cfg_.rerank_layer);
    e.layer = cfg_.rerank_layer;
    return e;
  }

  /// Layers L1+1..L and the final norm for the `selected` passages only, in
  /// the given order.
  EncodedBatch encode_stage2(const EncodedBatch& b, const std::vector<std::size_t>& selected) const {
    if (selected.empty()) throw ArgumentError("encode_stage2: no passage selected");
    std::vector<std::size_t> rows;
    std::vector<std::uint8_t> valid;
    for (auto s : selected) {
      if (s >= b.passages) {
        throw ArgumentError("encode_stage2: passage index " + std::to_string(s) + " out of range " +
                            std::to_string(b.passages));
      }
      for (std::size_t t = 0; t < b.length; ++t) {
        rows.push_back(s * b.length + t);
        valid.push_back(b.valid[s * b.length + t]);
      }
    }
    StageScope stage(FlopStage::kEncoderStage2);
    EncodedBatch out{ops::gather_rows(b.states, rows), selected.size(), b.length, std::move(valid), b.layer};
    const nn::TokenBatch view = out.tokens_view();
    out.states = encoder_.finalize(
        encoder_.run_layers(out.states, nn::EncoderStack::mask_for(view), b.layer, encoder_.num_layers()));
    out.layer = encoder_.num_layers();
    return out;
  }

  /// All L layers in one pass.
  EncodedBatch encode_full(const nn::TokenBatch& b) const {
    StageScope stage(FlopStage::kEncoderStage1);
    return {encoder_.encode(b), b.batch, b.length, b.valid, encoder_.num_layers()};
  }

  /// s = GNN(Z0) W.
  Tensor rerank(const Tensor& z0, const corpus::PassageGraph& graph) const {
    StageScope stage(FlopStage::kReranker);
    Tensor out = reranker_.forward(z0, graph);
    KindScope kind(FlopKind::kProjection);
    return ops::reshape(ops::matmul(out, ops::reshape(scorer_, {scorer_.size(), 1})), {z0.rows()});
  }

  /// Teacher-forced logits [len(input), V] over the encoded passages.
  Tensor answer_logits(const EncodedBatch& memory, const std::vector<std::size_t>& input) const {
    if (memory.layer != encoder_.num_layers()) throw ArgumentError("decoder memory must be fully encoded");
    if (memory.passages == 0) throw ArgumentError("decode needs at least one passage");
    if (input.empty() || input.size() > cfg_.answer_len) {
      throw ArgumentError("decoder input length " + std::to_string(input.size()) + " outside 1.." +
                          std::to_string(cfg_.answer_len));
    }
    StageScope stage(FlopStage::kDecoder);
    const std::size_t t = input.size();
    std::vector<std::size_t> pos(t);
    std::iota(pos.begin(), pos.end(), 0);
    Tensor x = ops::add(ops::embedding(tokens_, input), ops::embedding(dec_positions_, pos));
    const auto self_mask = ops::AttentionMask::causal(t);
    const auto cross_mask = ops::AttentionMask::cross(1, t, memory.passages * memory.length, memory.valid);
    for (const auto& layer : decoder_) x = layer(x, self_mask, memory.states, cross_mask);
    x = dec_ln_(x);
    KindScope kind(FlopKind::kProjection);
    // Output head tied to the token table, scaled by 1/sqrt(H).
    return ops::scale(ops::matmul(x, ops::transpose(tokens_)), 1.0 / std::sqrt(static_cast<double>(cfg_.dims.hidden)));
  }

  /// Greedy decoding, stopping at [EOS] or after `max_len` tokens.
  std::vector<std::size_t> decode(const EncodedBatch& memory, std::size_t max_len) const {
    if (max_len == 0 || max_len > cfg_.answer_len) {
      throw ArgumentError("decode length must lie in 1.." + std::to_string(cfg_.answer_len));
    }
    NoGradGuard no_grad;
    std::vector<std::size_t> input{text::Vocab::kBos}, out;
    while (out.size() < max_len) {
      Tensor logits = answer_logits(memory, input);
      const std::size_t v = logits.cols();
      auto last = logits.data().subspan((input.size() - 1) * v, v);
      // Specials other than [EOS] are never emitted.
      std::size_t best = text::Vocab::kEos;
      for (std::size_t i = text::Vocab::kUnk + 1; i < v; ++i)
        if (last[i] > last[best]) best = i;
      if (best == text::Vocab::kEos) break;
      out.push_back(best);
      input.push_back(best);
    }
    return out;
  }

 private:
  ReaderConfig cfg_;
  text::Vocab vocab_;
  Tensor tokens_;
  nn::EncoderStack encoder_;
  Tensor dec_positions_;
  std::vector<nn::DecoderLayer> decoder_;
  nn::LayerNormParams dec_ln_;
  nn::GraphReranker reranker_;
  Tensor scorer_;
};

/// Z0: row i is the state of passage i's first ([CLS]) token.
inline Tensor extract_cls(const EncodedBatch& b) {
  std::vector<std::size_t> rows(b.passages);
  for (std::size_t i = 0; i < b.passages; ++i) rows[i] = i * b.length;
  return ops::gather_rows(b.states, rows);
}

/// Indices of the n2 largest scores, best first; ties go to the lower index.
inline std::vector<std::size_t> select_top_n2(std::span<const double> s, std::size_t n2) {
  if (n2 > s.size()) {
    throw ArgumentError("N2 = " + std::to_string(n2) + " exceeds the " + std::to_string(s.size()) + " candidates");
  }
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  idx.resize(n2);
  return idx;
}

struct LossParts {
  Tensor total;
  double answer = 0.0;
  double rank = 0.0;
};

/// L = La + lambda * Lr. La is the mean token cross-entropy; Lr is the
/// cross-entropy between softmax(s) and the uniform distribution over gold
/// candidates, and zero when no candidate is gold.
inline LossParts joint_loss(const Tensor& answer_logits, const std::vector<std::size_t>& target,
                            const Tensor& scores, const std::vector<bool>& gold, double lambda) {
  if (lambda < 0.0) throw ArgumentError("lambda must be non-negative");
  if (gold.size() != scores.size()) throw ShapeError("gold flags do not match the score vector");
  LossParts out;
  Tensor la = ops::cross_entropy_rows(answer_logits, target);
  out.answer = la.item();
  out.total = la;
  const auto n_gold = std::count(gold.begin(), gold.end(), true);
  if (n_gold > 0 && lambda > 0.0) {
    std::vector<double> t(gold.size(), 0.0);
    for (std::size_t i = 0; i < gold.size(); ++i)
      if (gold[i]) t[i] = 1.0 / static_cast<double>(n_gold);
    Tensor lr = ops::cross_entropy(scores, Tensor::from({gold.size()}, std::move(t)));
    out.rank = lr.item();
    out.total = ops::add(la, ops::scale(lr, lambda));
  }
  return out;
}

/// Everything one forward pass produced for a question.
struct ForwardResult {
  Tensor scores;                      // [N1]
  std::vector<std::size_t> selected;  // best first
  EncodedBatch memory;                // selected passages at layer L, in candidate order
  Tensor logits;                      // teacher-forced, when a decoder input was given
};

/// Staged pipeline. The decoder memory lists the selected passages in
/// candidate order, so with N2 = N1 it is the vanilla memory.
inline ForwardResult forward(const ReaderModel& m, const std::string& question,
                             const std::vector<std::string>& passages, const corpus::PassageGraph& graph,
                             const std::vector<std::size_t>* decoder_input = nullptr) {
  const auto& cfg = m.config();
  if (graph.num_nodes() != passages.size()) throw ShapeError("passage graph does not match the candidates");
  ForwardResult r;
  EncodedBatch b1 = m.encode_stage1(m.make_inputs(question, passages));
  r.scores = m.rerank(extract_cls(b1), graph);
  r.selected = select_top_n2(r.scores.data(), std::min(cfg.n2, passages.size()));
  auto order = r.selected;
  std::sort(order.begin(), order.end());
  r.memory = m.encode_stage2(b1, order);
  if (decoder_input != nullptr) r.logits = m.answer_logits(r.memory, *decoder_input);
  return r;
}

/// Plain fusion-in-decoder: every passage through all L layers, decoded
/// together.
inline Tensor vanilla_answer_logits(const ReaderModel& m, const std::string& question,
                                    const std::vector<std::string>& passages,
                                    const std::vector<std::size_t>& decoder_input) {
  return m.answer_logits(m.encode_full(m.make_inputs(question, passages)), decoder_input);
}

}  // namespace kgfid::reader
