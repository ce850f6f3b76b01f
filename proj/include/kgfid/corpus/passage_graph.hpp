#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kgfid/corpus/knowledge_graph.hpp"
#include "kgfid/corpus/passage.hpp"
#include "kgfid/error.hpp"

namespace kgfid::corpus {

/// Per-question graph over retrieved passages. Nodes keep retriever rank
/// order; edges are undirected (i < j), sorted and unique.
struct PassageGraph {
  std::vector<std::uint64_t> passage_ids;
  std::vector<std::string> article_ids;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;

  std::size_t num_nodes() const { return passage_ids.size(); }

  /// Dense n*n mask with self-loops: row i lists the nodes i aggregates from.
  std::vector<std::uint8_t> adjacency_with_self_loops() const {
    const std::size_t n = num_nodes();
    std::vector<std::uint8_t> m(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1;
    for (auto [i, j] : edges) {
      m[i * n + j] = 1;
      m[j * n + i] = 1;
    }
    return m;
  }

  /// Same nodes, no edges.
  PassageGraph without_edges() const { return {passage_ids, article_ids, {}}; }

  /// Graph over `nodes` (indices into this graph), relabelled 0..k-1 in the
  /// given order.
  PassageGraph subgraph(const std::vector<std::size_t>& nodes) const {
    PassageGraph g;
    std::vector<std::int64_t> where(num_nodes(), -1);
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      where.at(nodes[k]) = static_cast<std::int64_t>(k);
      g.passage_ids.push_back(passage_ids[nodes[k]]);
      g.article_ids.push_back(article_ids[nodes[k]]);
    }
    for (auto [i, j] : edges) {
      if (where[i] < 0 || where[j] < 0) continue;
      auto a = static_cast<std::uint32_t>(where[i]), b = static_cast<std::uint32_t>(where[j]);
      g.edges.emplace_back(std::min(a, b), std::max(a, b));
    }
    std::sort(g.edges.begin(), g.edges.end());
    return g;
  }
};

struct GraphOptions {
  /// Connect distinct passages of the same entity without a self-triple.
  bool connect_same_entity = false;
};

/// Connects retrieved passages i < j iff some triple links their aligned
/// entities (either direction). Throws ValidationError naming every
/// unaligned article.
inline PassageGraph build_passage_graph(std::span<const Passage> retrieved, const KnowledgeGraph& kg,
                                        const EntityAlignment& align, const GraphOptions& opt = {}) {
  PassageGraph g;
  const std::size_t n = retrieved.size();
  std::vector<std::int64_t> entity(n, -1);
  std::set<std::string> unaligned;
  for (std::size_t i = 0; i < n; ++i) {
    g.passage_ids.push_back(retrieved[i].passage_id);
    g.article_ids.push_back(retrieved[i].article_id);
    const std::string* e = align.find(retrieved[i].article_id);
    if (!e) {
      unaligned.insert(retrieved[i].article_id);
      continue;
    }
    if (auto idx = kg.entity(*e)) entity[i] = *idx;
  }
  if (!unaligned.empty()) {
    std::string msg = "passages from unaligned articles:";
    for (const auto& a : unaligned) msg += " " + a;
    throw ValidationError(msg);
  }
  std::unordered_map<std::uint32_t, std::vector<std::uint32_t>> nodes_of;
  for (std::size_t i = 0; i < n; ++i)
    if (entity[i] >= 0) nodes_of[static_cast<std::uint32_t>(entity[i])].push_back(static_cast<std::uint32_t>(i));

  for (std::size_t i = 0; i < n; ++i) {
    if (entity[i] < 0) continue;
    const auto e = static_cast<std::uint32_t>(entity[i]);
    auto connect_group = [&](std::uint32_t other) {
      auto it = nodes_of.find(other);
      if (it == nodes_of.end()) return;
      for (auto j : it->second)
        if (j > i) g.edges.emplace_back(static_cast<std::uint32_t>(i), j);
    };
    for (auto nb : kg.neighbors(e)) connect_group(nb);
    if (opt.connect_same_entity && !kg.connected(e, e)) connect_group(e);
  }
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
  return g;
}

struct GraphStatsReport {
  std::size_t n_graphs = 0;
  std::size_t few_edges_threshold = 1;
  std::map<std::size_t, std::size_t> edge_count_histogram;
  std::map<std::size_t, std::size_t> distinct_articles_histogram;
  double mean_edges = 0.0;
  double mean_distinct_articles = 0.0;
  /// Questions whose passages all come from one article.
  double frac_single_article = 0.0;
  /// Questions whose graph has fewer than `few_edges_threshold` edges.
  double frac_few_edges = 0.0;

  nlohmann::json to_json() const {
    auto hist = [](const std::map<std::size_t, std::size_t>& h) {
      nlohmann::json j = nlohmann::json::object();
      for (auto [k, v] : h) j[std::to_string(k)] = v;
      return j;
    };
    return {{"n_graphs", n_graphs},
            {"few_edges_threshold", few_edges_threshold},
            {"edge_count_histogram", hist(edge_count_histogram)},
            {"distinct_articles_histogram", hist(distinct_articles_histogram)},
            {"mean_edges", mean_edges},
            {"mean_distinct_articles", mean_distinct_articles},
            {"frac_single_article", frac_single_article},
            {"frac_few_edges", frac_few_edges}};
  }
};

inline GraphStatsReport graph_stats(const std::vector<PassageGraph>& graphs, std::size_t few_edges_threshold = 1) {
  if (graphs.empty()) throw ArgumentError("graph_stats needs at least one graph");
  GraphStatsReport r;
  r.n_graphs = graphs.size();
  r.few_edges_threshold = few_edges_threshold;
  std::size_t single = 0, few = 0, edges = 0, articles = 0;
  for (const auto& g : graphs) {
    const std::size_t distinct = std::set<std::string>(g.article_ids.begin(), g.article_ids.end()).size();
    r.edge_count_histogram[g.edges.size()]++;
    r.distinct_articles_histogram[distinct]++;
    edges += g.edges.size();
    articles += distinct;
    if (distinct <= 1) ++single;
    if (g.edges.size() < few_edges_threshold) ++few;
  }
  const double n = static_cast<double>(graphs.size());
  r.mean_edges = static_cast<double>(edges) / n;
  r.mean_distinct_articles = static_cast<double>(articles) / n;
  r.frac_single_article = static_cast<double>(single) / n;
  r.frac_few_edges = static_cast<double>(few) / n;
  return r;
}

}  // namespace kgfid::corpus
