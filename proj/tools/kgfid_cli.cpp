// kgfid: command-line driver for the staged pipeline.
//
//   datagen -> ingest -> train-retriever -> rerank -> train-reader -> evaluate
//
// Every stage writes a fresh run directory with a manifest.json; later stages
// take the previous directory via --in and find older artifacts through the
// manifests' upstream links.

#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "kgfid/cli/pipeline.hpp"

namespace {

using namespace kgfid;
using cli::RunConfig;
namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::string in;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> grid;
};

/// --config if given, else the config recorded upstream, else defaults; then --seed.
RunConfig resolve_config(const Options& o) {
  RunConfig cfg;
  if (!o.config.empty()) {
    cfg = RunConfig::load(o.config);
  } else if (!o.in.empty() && fs::exists(fs::path(o.in) / "manifest.json")) {
    cfg = RunConfig::from_json(io::read_json(fs::path(o.in) / "manifest.json").at("config"));
  }
  if (o.seed) cfg.set_seed(*o.seed);
  return cfg;
}

fs::path out_dir(const Options& o, const std::string& command) {
  if (!o.out.empty()) return o.out;
  const fs::path root = cli::data_root();
  for (int i = 0;; ++i) {
    fs::path p = root / (command + "-" + std::to_string(i));
    if (!fs::exists(p)) return p;
  }
}

fs::path require_in(const Options& o, const std::string& command) {
  if (o.in.empty()) throw ArgumentError(command + " needs --in pointing at the previous stage's run directory");
  if (!fs::is_directory(o.in)) throw IoError("run directory " + o.in + " does not exist");
  return o.in;
}

cli::WorldData load_world(const fs::path& in) {
  cli::WorldData w;
  w.corpus = corpus::load_passages(cli::find_artifact(in, "passages.jsonl"));
  w.kg = corpus::load_kg(cli::find_artifact(in, "triples.tsv"), cli::find_artifact(in, "entities.tsv"));
  w.alignment = corpus::load_alignment(cli::find_artifact(in, "alignment.tsv"), &w.kg);
  w.train = datagen::load_qa(cli::find_artifact(in, "qa_train.jsonl"));
  w.dev = datagen::load_qa(cli::find_artifact(in, "qa_dev.jsonl"));
  w.test = datagen::load_qa(cli::find_artifact(in, "qa_test.jsonl"));
  return w;
}

const char* kSplits[] = {"train", "dev", "test"};

std::vector<datagen::QaItem>& split(cli::WorldData& w, int s) { return s == 0 ? w.train : s == 1 ? w.dev : w.test; }

// ---------------------------------------------------------------- stages

nlohmann::json cmd_datagen(const RunConfig& cfg, const fs::path& out) {
  cli::create_run_dir(out);
  auto world = datagen::gen_world(cfg.world);
  auto qs = datagen::gen_questions(world);
  datagen::write_world(out, world, qs);
  nlohmann::json metrics{{"kg", world.kg.stats().to_json()},
                         {"articles", world.articles.size()},
                         {"questions", {{"train", qs.train.size()}, {"dev", qs.dev.size()}, {"test", qs.test.size()}}}};
  cli::Manifest{"datagen", cfg, "", {}, metrics}.write(out);
  return metrics;
}

nlohmann::json cmd_ingest(const RunConfig& cfg, const fs::path& in, const fs::path& out) {
  const auto articles_path = cli::find_artifact(in, "corpus.jsonl");
  const auto triples = cli::find_artifact(in, "triples.tsv"), entities = cli::find_artifact(in, "entities.tsv");
  const auto align_path = cli::find_artifact(in, "alignment.tsv");
  auto articles = corpus::load_articles(articles_path);
  auto kg = corpus::load_kg(triples, entities);
  auto align = corpus::load_alignment(align_path, &kg);
  auto corpus = corpus::Corpus::from_articles(articles);
  cli::create_run_dir(out);
  corpus::save_passages(out / "passages.jsonl", corpus);
  io::write_json(out / "vocab.json", text::Vocab::build(cli::passage_texts(corpus)).to_json());
  nlohmann::json metrics{{"articles", articles.size()}, {"passages", corpus.size()}, {"kg", kg.stats().to_json()},
                         {"aligned_articles", align.size()}};
  cli::Manifest{"ingest", cfg, in.string(),
                {{"corpus", articles_path.string()}, {"triples", triples.string()}, {"alignment", align_path.string()}},
                metrics}
      .write(out);
  return metrics;
}

struct LoadedRetriever {
  text::Vocab vocab;
  ParameterSet params;
  retriever::DualEncoder encoder;
  retriever::EmbeddingStore store;
};

LoadedRetriever load_retriever(const fs::path& in) {
  const auto side = io::read_json(cli::find_artifact(in, "retriever.json"));
  LoadedRetriever r{text::Vocab::from_json(io::read_json(cli::find_artifact(in, "vocab.json"))),
                    ParameterSet::load(cli::find_artifact(in, "retriever_params.bin")), {}, {}};
  r.encoder = retriever::DualEncoder::bind(r.params, retriever::RetrieverConfig::from_json(side.at("config")));
  r.store = retriever::EmbeddingStore::load(cli::find_artifact(in, "embeddings.bin"));
  return r;
}

nlohmann::json cmd_train_retriever(const RunConfig& cfg, const fs::path& in, const fs::path& out) {
  auto world = load_world(in);
  const auto vocab_path = cli::find_artifact(in, "vocab.json");
  auto r = cli::train_retriever(world.corpus, cfg);
  cli::create_run_dir(out);
  r.params.save(out / "retriever_params.bin");
  io::write_json(out / "retriever.json", {{"config", cfg.retriever.model.to_json()}});
  r.store.save(out / "embeddings.bin");
  nlohmann::json metrics{{"ict_first_loss", r.losses.empty() ? 0.0 : r.losses.front()},
                         {"ict_last_loss", r.losses.empty() ? 0.0 : r.losses.back()}};
  for (int s = 0; s < 3; ++s) {
    auto examples = cli::retrieve(split(world, s), r, world, cfg);
    std::vector<nlohmann::json> rows;
    std::vector<std::vector<bool>> flags;
    for (const auto& ex : examples) {
      rows.push_back(ex.candidates.to_json());
      flags.push_back(ex.gold);
    }
    io::write_jsonl(out / (std::string("ranked_") + kSplits[s] + ".jsonl"), rows);
    if (s == 2) {
      for (auto k : cfg.eval.ks) metrics["test_hits@" + std::to_string(k)] = eval::hits_at_k(flags, k).value;
    }
  }
  cli::Manifest{"train-retriever", cfg, in.string(), {{"vocab", vocab_path.string()}}, metrics}.write(out);
  return metrics;
}

/// Retriever candidates of one split, rebuilt from the stored ranked lists.
std::vector<retriever::RerankExample> stored_candidates(const fs::path& in, const cli::WorldData& world,
                                                        const LoadedRetriever& r, const RunConfig& cfg, int s) {
  const auto lists = retriever::load_ranked_lists(cli::find_artifact(in, std::string("ranked_") + kSplits[s] + ".jsonl"));
  const auto& qa = s == 0 ? world.train : s == 1 ? world.dev : world.test;
  if (lists.size() != qa.size()) throw ValidationError(std::string("ranked_") + kSplits[s] + " does not match the questions");
  std::vector<retriever::RerankExample> out;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    if (lists[i].question_id != qa[i].question_id) throw ValidationError("ranked list order does not match the questions");
    out.push_back(retriever::make_rerank_example(qa[i].question_id,
                                                 retriever::encode_question(qa[i].question, r.encoder, r.vocab),
                                                 lists[i], r.store, world.corpus, world.kg, world.alignment,
                                                 qa[i].answers, cfg.rerank.graph));
  }
  return out;
}

nlohmann::json cmd_rerank(const RunConfig& cfg, const fs::path& in, const fs::path& out) {
  auto world = load_world(in);
  auto r = load_retriever(in);
  std::vector<retriever::RerankExample> ex[3];
  for (int s = 0; s < 3; ++s) ex[s] = stored_candidates(in, world, r, cfg, s);
  auto rr = cli::train_reranker(ex[0], ex[1], r.store, cfg.rerank.gnn, cfg);
  cli::create_run_dir(out);
  rr.params.save(out / "rerank_params.bin");
  io::write_json(out / "rerank.json", {{"gnn_type", nn::gnn_type_name(cfg.rerank.gnn.type)},
                                       {"gnn_layers", cfg.rerank.gnn.layers},
                                       {"gnn_heads", cfg.rerank.gnn.heads},
                                       {"width", r.store.width()}});
  for (int s = 0; s < 3; ++s) {
    std::vector<nlohmann::json> rows;
    for (const auto& l : cli::rerank_all(ex[s], r.store, rr.model)) rows.push_back(l.to_json());
    io::write_jsonl(out / (std::string("reranked_") + kSplits[s] + ".jsonl"), rows);
  }
  auto hits = cli::compare_hits(ex[2], r.store, rr.model, cfg.eval.ks);
  std::vector<eval::HitsAtK> base, reranked;
  for (std::size_t i = 0; i < hits.ks.size(); ++i) {
    base.push_back({hits.ks[i], hits.base[i], false});
    reranked.push_back({hits.ks[i], hits.reranked[i], false});
  }
  io::write_text(out / "hits.csv", eval::hits_table_csv({{"retriever", base},
                                                         {"retriever + " + nn::gnn_type_name(cfg.rerank.gnn.type), reranked}}));
  nlohmann::json metrics{{"train", rr.report.to_json()}, {"test", hits.to_json()}};
  cli::Manifest{"rerank", cfg, in.string(), {}, metrics}.write(out);
  return metrics;
}

std::vector<reader::ReaderExample> load_reader_split(const fs::path& in, const cli::WorldData& world,
                                                     const RunConfig& cfg, int s) {
  const auto lists = retriever::load_ranked_lists(cli::find_artifact(in, std::string("reranked_") + kSplits[s] + ".jsonl"));
  auto& qa = s == 0 ? world.train : s == 1 ? world.dev : world.test;
  return cli::reader_examples(qa, lists, world, cfg);
}

nlohmann::json cmd_train_reader(const RunConfig& cfg, const fs::path& in, const fs::path& out) {
  auto world = load_world(in);
  const auto vocab = text::Vocab::from_json(io::read_json(cli::find_artifact(in, "vocab.json")));
  std::vector<reader::ReaderExample> ex[3];
  for (int s = 0; s < 3; ++s) ex[s] = load_reader_split(in, world, cfg, s);
  ParameterSet init(cfg.seed + 13);
  const double untrained = reader::gold_in_top_n2_rate(reader::ReaderModel::create(init, vocab, cfg.reader.model), ex[1]);
  auto tr = cli::train_reader(vocab, ex[0], ex[1], cfg);
  cli::create_run_dir(out);
  for (int s = 0; s < 3; ++s) reader::save_reader_dataset(out / (std::string("reader_") + kSplits[s] + ".jsonl"), ex[s]);
  reader::save_reader(out / "reader", tr.params, tr.model);
  nlohmann::json metrics{{"train", tr.report.to_json()},
                         {"dev_gold_in_top_n2_untrained", untrained},
                         {"dev_gold_in_top_n2", reader::gold_in_top_n2_rate(tr.model, ex[1])}};
  cli::Manifest{"train-reader", cfg, in.string(), {}, metrics}.write(out);
  return metrics;
}

nlohmann::json cmd_evaluate(const RunConfig& cfg, const fs::path& in, const fs::path& out) {
  auto world = load_world(in);
  auto loaded = reader::load_reader(cli::find_artifact(in, "reader"));
  const auto data_path = cli::find_artifact(in, "reader_test.jsonl");
  auto examples = reader::load_reader_dataset(data_path, world.corpus);
  auto r = reader::evaluate_reader(loaded.model, examples, cfg.eval.ks);
  cli::create_run_dir(out);
  std::vector<nlohmann::json> rows;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    rows.push_back({{"question_id", examples[i].question_id},
                    {"prediction", r.predictions[i]},
                    {"answers", examples[i].answers},
                    {"em", r.answers.em[i]}});
  }
  io::write_jsonl(out / "predictions.jsonl", rows);
  auto metrics = r.to_json();
  metrics.erase("per_question_em");
  io::write_json(out / "metrics.json", metrics);
  cli::Manifest{"evaluate", cfg, in.string(), {{"reader_test", data_path.string()}}, metrics}.write(out);
  return metrics;
}

/// Analytic table for the configured depths plus one instrumented run: on the
/// first test question of --in when it holds a reader, else on random input
/// to an untrained reader of the configured shape.
nlohmann::json cmd_cost_report(const RunConfig& cfg, const std::string& in, const fs::path& out) {
  std::vector<costmodel::CostRow> rows;
  for (auto l1 : cfg.cost.rerank_layers) {
    const costmodel::CostConfig c{cfg.cost.layers, l1, cfg.cost.n1, l1 == cfg.cost.layers ? cfg.cost.n1 : cfg.cost.n2};
    rows.push_back({l1 == cfg.cost.layers ? "FiD" : "KG-FiD (L1=" + std::to_string(l1) + ")", c, {}});
  }
  const std::string table = costmodel::render_cost_table(rows, {});

  costmodel::CostReport rep;
  if (!in.empty()) {
    auto world = load_world(in);
    auto loaded = reader::load_reader(cli::find_artifact(in, "reader"));
    auto ex = reader::load_reader_dataset(cli::find_artifact(in, "reader_test.jsonl"), world.corpus);
    if (ex.empty()) throw ValidationError("no test questions to measure");
    rep = costmodel::measure_run(loaded.model, ex[0].question, ex[0].passages, ex[0].graph);
  } else {
    std::vector<std::string> words;
    std::string all;
    for (int i = 0; i < 200; ++i) all += (words.emplace_back("w" + std::to_string(i))) + " ";
    auto vocab = text::Vocab::build({all});
    ParameterSet ps(cfg.seed);
    auto model = reader::ReaderModel::create(ps, vocab, cfg.reader.model);
    CounterRng rng(cfg.seed, "cost.toy");
    auto sentence = [&](std::size_t n) {
      std::string s;
      for (std::size_t i = 0; i < n; ++i) s += words[rng.below(words.size())] + " ";
      return s;
    };
    std::vector<std::string> passages;
    corpus::PassageGraph g;
    for (std::size_t i = 0; i < cfg.reader.model.n1; ++i) {
      passages.push_back(sentence(cfg.reader.model.passage_len));
      g.passage_ids.push_back(i);
      g.article_ids.push_back("A" + std::to_string(i));
    }
    rep = costmodel::measure_run(model, sentence(4), passages, g);
  }
  cli::create_run_dir(out);
  io::write_text(out / "cost_table.txt", table);
  io::write_json(out / "cost_report.json", rep.to_json());
  std::cout << table << '\n';
  std::ostringstream m;
  m << std::fixed << std::setprecision(4) << "measured (L=" << rep.config.L << " L1=" << rep.config.L1
    << " N1=" << rep.config.N1 << " N2=" << rep.config.N2 << " T_p=" << rep.config.T_p << " T_a=" << rep.config.T_a
    << "): cost ratio " << rep.measured_cost_ratio << " vs analytic " << 1.0 - rep.analytic_saving_ratio
    << " (with decoder term " << rep.analytic_cost_ratio << "), full count " << rep.measured_full_cost_ratio
    << ", reranker " << rep.measured_reranker_flops << " FLOPs\n";
  std::cout << m.str();
  nlohmann::json metrics = rep.to_json();
  cli::Manifest{"cost-report", cfg, in, {}, metrics}.write(out);
  return metrics;
}

// ---------------------------------------------------------------- sweep

std::string config_key(const std::string& k) {
  static const std::map<std::string, std::string> alias{{"gnn_layers", "reader.gnn_layers"},
                                                        {"gnn_type", "reader.gnn_type"},
                                                        {"n2", "reader.n2"},
                                                        {"lambda", "reader.lambda"},
                                                        {"rerank_layer", "reader.rerank_layer"}};
  auto it = alias.find(k);
  return it == alias.end() ? k : it->second;
}

nlohmann::json grid_value(const std::string& s) {
  try {
    return nlohmann::json::parse(s);
  } catch (const nlohmann::json::parse_error&) {
    return s;
  }
}

/// Cross product of --grid axes. Each point re-runs the reader stages (and
/// the retriever reranker when an axis is under rerank.) from --in and
/// writes a row of sweep.csv.
nlohmann::json cmd_sweep(const RunConfig& base, const fs::path& in, const fs::path& out,
                         const std::vector<std::string>& grid) {
  if (grid.empty()) throw ArgumentError("sweep needs at least one --grid KEY=V1,V2");
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;
  bool rerank_axis = false;
  for (const auto& g : grid) {
    const auto eq = g.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == g.size()) throw ArgumentError("bad --grid '" + g + "'");
    std::pair<std::string, std::vector<nlohmann::json>> axis{config_key(g.substr(0, eq)), {}};
    std::stringstream vs(g.substr(eq + 1));
    for (std::string v; std::getline(vs, v, ',');) axis.second.push_back(grid_value(v));
    rerank_axis = rerank_axis || axis.first.rfind("rerank.", 0) == 0;
    axes.push_back(std::move(axis));
  }
  // Validate every point before running any.
  std::vector<std::vector<std::size_t>> points{{}};
  for (const auto& a : axes) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& p : points)
      for (std::size_t i = 0; i < a.second.size(); ++i) {
        auto q = p;
        q.push_back(i);
        next.push_back(q);
      }
    points = std::move(next);
  }
  std::vector<RunConfig> configs;
  for (const auto& p : points) {
    RunConfig c = base;
    for (std::size_t a = 0; a < axes.size(); ++a) c = RunConfig::with_override(c, axes[a].first, axes[a].second[p[a]]);
    configs.push_back(c);
  }

  cli::create_run_dir(out);
  std::ostringstream csv;
  for (const auto& a : axes) csv << a.first << ',';
  csv << "cost";
  for (auto k : base.eval.ks) csv << ",H@" << k;
  csv << ",gold_in_top_n2,EM\n";
  nlohmann::json results = nlohmann::json::array();
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto& c = configs[i];
    const fs::path dir = out / ("point-" + std::to_string(i));
    fs::path reader_in = in;
    if (rerank_axis) {
      cmd_rerank(c, in, dir / "rerank");
      reader_in = dir / "rerank";
    }
    cmd_train_reader(c, reader_in, dir / "train-reader");
    auto m = cmd_evaluate(c, dir / "train-reader", dir / "evaluate");
    const auto& rc = c.reader.model;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const auto& v = axes[a].second[points[i][a]];
      csv << (v.is_string() ? v.get<std::string>() : v.dump()) << ',';
    }
    csv << std::fixed << std::setprecision(2) << 1.0 - costmodel::analytic_saving_ratio(rc.layers, rc.rerank_layer, rc.n1, rc.n2);
    for (const auto& h : m.at("hits")) csv << ',' << std::setprecision(1) << 100.0 * h.at("value").get<double>();
    csv << ',' << std::setprecision(3) << m.at("gold_in_top_n2").get<double>() << ',' << std::setprecision(1)
        << 100.0 * m.at("exact_match").get<double>() << '\n';
    results.push_back({{"point", i}, {"dir", dir.string()}, {"metrics", m}});
  }
  io::write_text(out / "sweep.csv", csv.str());
  std::cout << csv.str();
  nlohmann::json metrics{{"points", results}};
  cli::Manifest{"sweep", base, in.string(), {}, metrics}.write(out);
  return metrics;
}

void print_error(const std::string& code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kgfid: knowledge-graph passage reranking for fusion-in-decoder reading"};
  app.require_subcommand(1);
  Options o;
  auto add = [&](const std::string& name, const std::string& help, bool needs_in) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "RunConfig JSON (defaults, or the upstream run's config, if omitted)")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "New run directory (default: $KGFID_DATA_ROOT/<command>-<n>)");
    sub->add_option("--seed", o.seed, "Override the config seed");
    if (needs_in) sub->add_option("--in", o.in, "Previous stage's run directory")->required();
    return sub;
  };
  add("datagen", "Generate a synthetic world (corpus, KG, alignment, QA splits)", false);
  add("ingest", "Chunk the corpus into passages, validate KG and alignment, build the vocabulary", true);
  add("train-retriever", "Train the dual encoder, index passages and retrieve the top N0", true);
  add("rerank", "Train the graph reranker over retrieved passages and rerank every split", true);
  add("train-reader", "Train the staged reader on the top N1 reranked passages", true);
  add("evaluate", "Greedy answers, EM and reranked Hits@K on the test split", true);
  auto* cost = add("cost-report", "Analytic cost table and one instrumented FLOP measurement", false);
  cost->add_option("--in", o.in, "train-reader run to measure (optional)");
  auto* sweep = add("sweep", "Grid over config keys; re-runs the reader stages per point", true);
  sweep->add_option("--grid", o.grid, "KEY=V1,V2 (repeatable; aliases gnn_layers, gnn_type, n2, lambda)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = resolve_config(o);
    const fs::path out = out_dir(o, cmd);
    nlohmann::json metrics;
    if (cmd == "datagen") metrics = cmd_datagen(cfg, out);
    else if (cmd == "ingest") metrics = cmd_ingest(cfg, require_in(o, cmd), out);
    else if (cmd == "train-retriever") metrics = cmd_train_retriever(cfg, require_in(o, cmd), out);
    else if (cmd == "rerank") metrics = cmd_rerank(cfg, require_in(o, cmd), out);
    else if (cmd == "train-reader") metrics = cmd_train_reader(cfg, require_in(o, cmd), out);
    else if (cmd == "evaluate") metrics = cmd_evaluate(cfg, require_in(o, cmd), out);
    else if (cmd == "cost-report") metrics = cmd_cost_report(cfg, o.in, out);
    else if (cmd == "sweep") metrics = cmd_sweep(cfg, require_in(o, cmd), out, o.grid);
    std::cout << nlohmann::json{{"command", cmd}, {"run_dir", out.string()}}.dump() << std::endl;
    return 0;
  } catch (const ConfigError& e) {
    print_error(e.code(), e.what());
    return 2;
  } catch (const Error& e) {
    print_error(e.code(), e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    print_error("invalid_json", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal_error", e.what());
    return 1;
  }
}
