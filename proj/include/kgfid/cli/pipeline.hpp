#pragma once

// Pipeline stages shared by the command-line tool and the acceptance runner,
// plus run-directory bookkeeping (manifests, artifact lookup, hashing).

#include <openssl/evp.h>

#include <array>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "kgfid/cli/run_config.hpp"

namespace kgfid::cli {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

inline std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(s);
}

/// Run directories are never reused: the target must be absent or empty.
inline void create_run_dir(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw IoError("run directory " + dir.string() + " already exists; runs are append-only, choose a new --out");
  }
  fs::create_directories(dir);
}

/// Looks for `name` in `dir`, then in the chain of upstream run directories
/// recorded in the manifests.
inline fs::path find_artifact(const fs::path& dir, const std::string& name) {
  fs::path d = dir;
  for (int depth = 0; depth < 32; ++depth) {
    if (fs::exists(d / name)) return d / name;
    const auto m = d / "manifest.json";
    if (!fs::exists(m)) break;
    const auto j = io::read_json(m);
    if (!j.contains("upstream") || j.at("upstream").is_null()) break;
    d = j.at("upstream").get<std::string>();
  }
  throw IoError("artifact " + name + " not found in " + dir.string() + " or its upstream runs");
}

struct Manifest {
  std::string command;
  RunConfig config;
  std::string upstream;                      // empty for the first stage
  std::map<std::string, std::string> inputs;  // artifact name -> path
  nlohmann::json metrics = nlohmann::json::object();

  void write(const fs::path& dir) const {
    const auto cfg = config.to_json();
    nlohmann::json in = nlohmann::json::object();
    for (const auto& [name, path] : inputs) in[name] = {{"path", path}, {"sha256", sha256_file(path)}};
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    io::write_json(dir / "manifest.json",
                   {{"command", command},
                    {"created", stamp},
                    {"seed", config.seed},
                    {"config", cfg},
                    {"config_sha256", sha256_hex(cfg.dump())},
                    {"upstream", upstream.empty() ? nlohmann::json(nullptr) : nlohmann::json(fs::absolute(upstream).string())},
                    {"inputs", in},
                    {"metrics", metrics}});
  }
};

/// Passages, knowledge graph, alignment and the three question splits.
struct WorldData {
  corpus::Corpus corpus;
  corpus::KnowledgeGraph kg;
  corpus::EntityAlignment alignment;
  std::vector<datagen::QaItem> train, dev, test;
};

inline WorldData world_data(const datagen::World& w, const datagen::QuestionSet& qs) {
  return {corpus::Corpus::from_articles(w.articles), w.kg, w.alignment, datagen::subset(qs, qs.train),
          datagen::subset(qs, qs.dev), datagen::subset(qs, qs.test)};
}

inline std::vector<std::string> passage_texts(const corpus::Corpus& c) {
  std::vector<std::string> out;
  for (const auto& p : c.passages()) out.push_back(p.text);
  return out;
}

struct Retriever {
  text::Vocab vocab;
  ParameterSet params;
  retriever::DualEncoder encoder;
  retriever::EmbeddingStore store;
  std::vector<double> losses;
};

/// Dual encoder trained on the corpus, plus the offline passage index.
inline Retriever train_retriever(const corpus::Corpus& corpus, const RunConfig& cfg) {
  Retriever r;
  const auto texts = passage_texts(corpus);
  r.vocab = text::Vocab::build(texts);
  r.params = ParameterSet(cfg.seed);
  r.encoder = retriever::DualEncoder::create(r.params, r.vocab.size(), cfg.retriever.model);
  r.losses = retriever::train_dual_encoder(r.params, r.encoder, r.vocab, texts, cfg.retriever.train);
  r.store = retriever::encode_corpus(corpus, r.encoder, r.vocab);
  return r;
}

/// Top-N0 retrieval and graph construction for each question.
inline std::vector<retriever::RerankExample> retrieve(const std::vector<datagen::QaItem>& qa, const Retriever& r,
                                                      const WorldData& world, const RunConfig& cfg) {
  std::vector<retriever::RerankExample> out;
  for (const auto& q : qa) {
    auto qv = retriever::encode_question(q.question, r.encoder, r.vocab);
    auto ranked = retriever::top_n0_search(qv, r.store, cfg.retriever.n0);
    out.push_back(retriever::make_rerank_example(q.question_id, std::move(qv), std::move(ranked), r.store,
                                                 world.corpus, world.kg, world.alignment, q.answers,
                                                 cfg.rerank.graph));
  }
  return out;
}

struct Reranker {
  ParameterSet params;
  nn::GraphReranker model;
  retriever::RerankTrainReport report;
};

inline Reranker train_reranker(const std::vector<retriever::RerankExample>& train,
                               const std::vector<retriever::RerankExample>& dev, const retriever::EmbeddingStore& store,
                               const nn::GnnConfig& gnn, const RunConfig& cfg) {
  Reranker r;
  r.params = ParameterSet(cfg.seed + 7);
  r.model = nn::GraphReranker::create(r.params, "rerank", store.width(), gnn);
  r.report = retriever::train_retriever_reranker(r.params, r.model, store, train, dev, cfg.rerank.train);
  return r;
}

/// Hits@k per entry of `ks` for the retriever order and for the reranked order.
struct HitsComparison {
  std::vector<std::size_t> ks;
  std::vector<double> base, reranked;

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < ks.size(); ++i) {
      j["hits@" + std::to_string(ks[i])] = {{"retriever", base[i]}, {"reranked", reranked[i]}};
    }
    return j;
  }
};

inline HitsComparison compare_hits(const std::vector<retriever::RerankExample>& examples,
                                   const retriever::EmbeddingStore& store, const nn::GraphReranker& reranker,
                                   const std::vector<std::size_t>& ks) {
  std::vector<std::vector<bool>> base, reranked;
  for (const auto& ex : examples) {
    base.push_back(ex.gold);
    reranked.push_back(retriever::gold_in_order(ex, retriever::retriever_rerank(ex, store, reranker)));
  }
  HitsComparison h{ks, {}, {}};
  for (auto k : ks) {
    h.base.push_back(eval::hits_at_k(base, k).value);
    h.reranked.push_back(eval::hits_at_k(reranked, k).value);
  }
  return h;
}

inline std::vector<retriever::RankedList> rerank_all(const std::vector<retriever::RerankExample>& examples,
                                                     const retriever::EmbeddingStore& store,
                                                     const nn::GraphReranker& reranker) {
  std::vector<retriever::RankedList> out;
  for (const auto& ex : examples) out.push_back(retriever::retriever_rerank(ex, store, reranker));
  return out;
}

/// Reader inputs from the top N1 of each ranked list.
inline std::vector<reader::ReaderExample> reader_examples(const std::vector<datagen::QaItem>& qa,
                                                          const std::vector<retriever::RankedList>& ranked,
                                                          const WorldData& world, const RunConfig& cfg) {
  if (qa.size() != ranked.size()) throw ValidationError("ranked lists do not match the questions");
  std::vector<reader::ReaderExample> out;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    if (ranked[i].question_id != qa[i].question_id) {
      throw ValidationError("ranked list " + ranked[i].question_id + " does not match question " + qa[i].question_id);
    }
    out.push_back(reader::make_reader_example(qa[i].question_id, qa[i].question, qa[i].answers, ranked[i],
                                              cfg.reader.model.n1, world.corpus, world.kg, world.alignment,
                                              cfg.rerank.graph));
  }
  return out;
}

struct TrainedReader {
  ParameterSet params;
  reader::ReaderModel model;
  reader::ReaderTrainReport report;
};

inline TrainedReader train_reader(const text::Vocab& vocab, const std::vector<reader::ReaderExample>& train,
                                  const std::vector<reader::ReaderExample>& dev, const RunConfig& cfg) {
  TrainedReader r;
  r.params = ParameterSet(cfg.seed + 13);
  r.model = reader::ReaderModel::create(r.params, vocab, cfg.reader.model);
  r.report = reader::train_reader(r.params, r.model, train, dev, cfg.reader.train);
  return r;
}

}  // namespace kgfid::cli
