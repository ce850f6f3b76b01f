#pragma once

// One JSON document holding every stage's settings. Missing keys take their
// defaults; unknown keys and mistyped values are rejected with their path.

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgfid/costmodel/cost.hpp"
#include "kgfid/datagen/world.hpp"
#include "kgfid/error.hpp"
#include "kgfid/io/jsonl.hpp"
#include "kgfid/reader/train.hpp"
#include "kgfid/retriever/rerank.hpp"

namespace kgfid::cli {

struct RetrieverSection {
  retriever::RetrieverConfig model;
  retriever::EncoderTrainConfig train;
  std::size_t n0 = 200;
};

struct RerankSection {
  nn::GnnConfig gnn;
  retriever::RerankTrainConfig train;
  corpus::GraphOptions graph;
};

struct ReaderSection {
  reader::ReaderConfig model;
  reader::ReaderTrainConfig train;
};

/// Analytic cost table: one row per entry of rerank_layers.
struct CostSection {
  std::size_t layers = 24;
  std::vector<std::size_t> rerank_layers{6, 12, 18, 24};
  std::size_t n1 = 100;
  std::size_t n2 = 20;
};

struct EvalSection {
  std::vector<std::size_t> ks{1, 5, 10, 20};
};

struct RunConfig {
  std::uint64_t seed = 0;
  datagen::WorldConfig world;
  RetrieverSection retriever;
  RerankSection rerank;
  ReaderSection reader;
  CostSection cost;
  EvalSection eval;

  /// Every stage seed derives from the top-level one.
  void set_seed(std::uint64_t s) {
    seed = s;
    world.seed = s;
    retriever.train.seed = s;
    rerank.train.seed = s;
    reader.train.seed = s;
  }

  void validate() const {
    world.validate();
    reader.model.validate();
    if (retriever.n0 == 0) throw ConfigError("retriever.n0 must be positive");
    if (retriever.n0 > world.n_entities) throw ConfigError("retriever.n0 exceeds the number of passages");
    if (reader.model.n1 > retriever.n0) throw ConfigError("reader.n1 must not exceed retriever.n0");
    if (retriever.model.dims.hidden % retriever.model.dims.heads != 0) {
      throw ConfigError("retriever.heads must divide retriever.hidden");
    }
    if (rerank.gnn.heads == 0 || retriever.model.dims.hidden % rerank.gnn.heads != 0) {
      throw ConfigError("rerank.gnn_heads must divide retriever.hidden");
    }
    if (reader.model.gnn.heads == 0 || reader.model.dims.hidden % reader.model.gnn.heads != 0) {
      throw ConfigError("reader.gnn_heads must divide reader.hidden");
    }
    if (reader.train.batch == 0 || rerank.train.batch == 0 || retriever.train.batch == 0) {
      throw ConfigError("batch sizes must be positive");
    }
    for (auto l1 : cost.rerank_layers) costmodel::CostConfig{cost.layers, l1, cost.n1, cost.n2}.validate();
    if (eval.ks.empty()) throw ConfigError("eval.ks must not be empty");
    for (auto k : eval.ks)
      if (k == 0) throw ConfigError("eval.ks entries must be positive");
  }

  nlohmann::json to_json() const {
    auto w = world.to_json();
    w.erase("seed");
    const auto& rm = retriever.model;
    const auto& rt = retriever.train;
    const auto& rd = reader.model;
    const auto& tr = reader.train;
    auto reader_json = rd.to_json();
    reader_json["train_epochs"] = tr.epochs;
    reader_json["train_max_steps"] = tr.max_steps;
    reader_json["train_batch"] = tr.batch;
    reader_json["train_lr"] = tr.lr;
    return {{"seed", seed},
            {"world", w},
            {"retriever",
             {{"layers", rm.layers},
              {"hidden", rm.dims.hidden},
              {"heads", rm.dims.heads},
              {"ffn", rm.dims.ffn},
              {"max_len", rm.max_len},
              {"n0", retriever.n0},
              {"ict_steps", rt.steps},
              {"ict_batch", rt.batch},
              {"ict_query_tokens", rt.query_tokens},
              {"ict_lr", rt.lr}}},
            {"rerank",
             {{"gnn_type", nn::gnn_type_name(rerank.gnn.type)},
              {"gnn_layers", rerank.gnn.layers},
              {"gnn_heads", rerank.gnn.heads},
              {"epochs", rerank.train.epochs},
              {"batch", rerank.train.batch},
              {"lr", rerank.train.lr},
              {"eval_k", rerank.train.eval_k},
              {"connect_same_entity", rerank.graph.connect_same_entity}}},
            {"reader", reader_json},
            {"cost", {{"layers", cost.layers}, {"rerank_layers", cost.rerank_layers}, {"n1", cost.n1}, {"n2", cost.n2}}},
            {"eval", {{"ks", eval.ks}}}};
  }

  static RunConfig from_json(const nlohmann::json& user) {
    nlohmann::json j = RunConfig{}.to_json();
    check_keys(user, j, "");
    j.merge_patch(user);

    RunConfig c;
    const auto& w = j.at("world");
    auto& wc = c.world;
    wc.n_entities = w.at("n_entities");
    wc.avg_triples_per_entity = w.at("avg_triples_per_entity");
    wc.n_relations = w.at("n_relations");
    wc.words_per_article = w.at("words_per_article");
    wc.signature_tokens = w.at("signature_tokens");
    wc.vocab_size = w.at("vocab_size");
    wc.n_types = w.at("n_types");
    wc.type_repeat = w.at("type_repeat");
    wc.common_tokens = w.at("common_tokens");
    wc.distractor_strength = w.at("distractor_strength");
    wc.n_questions = w.at("n_questions");
    wc.anchor_words = w.at("anchor_words");
    wc.p_link = w.at("p_link");
    wc.title_case_answers = w.at("title_case_answers");
    wc.train_fraction = w.at("train_fraction");
    wc.dev_fraction = w.at("dev_fraction");

    const auto& r = j.at("retriever");
    c.retriever.model.layers = r.at("layers");
    c.retriever.model.dims = {r.at("hidden"), r.at("heads"), r.at("ffn")};
    c.retriever.model.max_len = r.at("max_len");
    c.retriever.n0 = r.at("n0");
    c.retriever.train.steps = r.at("ict_steps");
    c.retriever.train.batch = r.at("ict_batch");
    c.retriever.train.query_tokens = r.at("ict_query_tokens");
    c.retriever.train.lr = r.at("ict_lr");

    const auto& g = j.at("rerank");
    c.rerank.gnn.type = nn::parse_gnn_type(g.at("gnn_type"));
    c.rerank.gnn.layers = g.at("gnn_layers");
    c.rerank.gnn.heads = g.at("gnn_heads");
    c.rerank.train.epochs = g.at("epochs");
    c.rerank.train.batch = g.at("batch");
    c.rerank.train.lr = g.at("lr");
    c.rerank.train.eval_k = g.at("eval_k");
    c.rerank.graph.connect_same_entity = g.at("connect_same_entity");

    auto rd = j.at("reader");
    c.reader.train.epochs = rd.at("train_epochs");
    c.reader.train.max_steps = rd.at("train_max_steps");
    c.reader.train.batch = rd.at("train_batch");
    c.reader.train.lr = rd.at("train_lr");
    for (const char* k : {"train_epochs", "train_max_steps", "train_batch", "train_lr"}) rd.erase(k);
    try {
      c.reader.model = reader::ReaderConfig::from_json(rd);
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }

    const auto& cs = j.at("cost");
    c.cost.layers = cs.at("layers");
    c.cost.rerank_layers = cs.at("rerank_layers").get<std::vector<std::size_t>>();
    c.cost.n1 = cs.at("n1");
    c.cost.n2 = cs.at("n2");
    c.eval.ks = j.at("eval").at("ks").get<std::vector<std::size_t>>();

    c.set_seed(j.at("seed"));
    try {
      c.validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("cost: ") + e.what());
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) { return from_json(io::read_json(path)); }

  /// Sets one value by dotted path ("reader.n2"), as if it came from the file.
  static RunConfig with_override(const RunConfig& base, const std::string& dotted, const nlohmann::json& value) {
    nlohmann::json j = base.to_json();
    const nlohmann::json::json_pointer ptr("/" + replace_dots(dotted));
    if (!j.contains(ptr) || j.at(ptr).is_object()) throw ConfigError("unknown config key: " + dotted);
    j[ptr] = value;
    return from_json(j);
  }

 private:
  static bool non_negative_integer(const nlohmann::json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  static std::string replace_dots(std::string s) {
    for (auto& ch : s)
      if (ch == '.') ch = '/';
    return s;
  }

  static void check_keys(const nlohmann::json& user, const nlohmann::json& defaults, const std::string& path) {
    if (!user.is_object()) throw ConfigError("config " + (path.empty() ? std::string("root") : path) + " must be an object");
    for (const auto& [key, value] : user.items()) {
      const std::string p = path.empty() ? key : path + "." + key;
      if (!defaults.contains(key)) throw ConfigError("unknown config key: " + p);
      const auto& d = defaults.at(key);
      if (d.is_object()) {
        check_keys(value, d, p);
      } else if (d.is_number_unsigned()) {
        if (!non_negative_integer(value)) throw ConfigError(p + " must be a non-negative integer");
      } else if (d.is_number()) {
        if (!value.is_number()) throw ConfigError(p + " must be a number");
      } else if (d.is_array()) {
        if (!value.is_array()) throw ConfigError(p + " must be an array");
        for (const auto& v : value)
          if (!non_negative_integer(v)) throw ConfigError(p + " entries must be non-negative integers");
      } else if (d.type() != value.type()) {
        throw ConfigError(p + " must be a " + std::string(d.type_name()));
      }
    }
  }
};

/// Default root for run directories: $KGFID_DATA_ROOT, else ./runs.
inline std::filesystem::path data_root() {
  const char* env = std::getenv("KGFID_DATA_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

}  // namespace kgfid::cli
