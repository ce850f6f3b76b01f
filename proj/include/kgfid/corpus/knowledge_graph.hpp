#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kgfid/error.hpp"
#include "kgfid/io/jsonl.hpp"

namespace kgfid::corpus {

struct KgStats {
  std::uint64_t n_entities = 0;
  std::uint64_t n_relations = 0;
  std::uint64_t n_triples = 0;

  nlohmann::json to_json() const {
    return {{"n_entities", n_entities}, {"n_relations", n_relations}, {"n_triples", n_triples}};
  }
  static KgStats from_json(const nlohmann::json& j) {
    return {j.at("n_entities").get<std::uint64_t>(), j.at("n_relations").get<std::uint64_t>(),
            j.at("n_triples").get<std::uint64_t>()};
  }
  bool operator==(const KgStats&) const = default;
};

struct Triple {
  std::uint32_t head;
  std::uint32_t relation;
  std::uint32_t tail;
  auto operator<=>(const Triple&) const = default;
};

/// Entity/relation vocabularies and a deduplicated triple set. Topology
/// queries ignore direction and relation label; relations are kept in
/// storage only.
class KnowledgeGraph {
 public:
  /// Returns the entity's index, registering it if new.
  std::uint32_t add_entity(const std::string& name) {
    auto [it, inserted] = entity_index_.emplace(name, static_cast<std::uint32_t>(entities_.size()));
    if (inserted) {
      entities_.push_back(name);
      adjacency_.emplace_back();
    }
    return it->second;
  }

  std::uint32_t add_relation(const std::string& name) {
    auto [it, inserted] = relation_index_.emplace(name, static_cast<std::uint32_t>(relations_.size()));
    if (inserted) relations_.push_back(name);
    return it->second;
  }

  /// Adds (head, relation, tail); endpoints are auto-registered.
  void add_triple(const std::string& head, const std::string& relation, const std::string& tail) {
    const Triple t{add_entity(head), add_relation(relation), add_entity(tail)};
    if (!triple_set_.insert(t).second) return;
    triples_.push_back(t);
    link(t.head, t.tail);
    link(t.tail, t.head);
  }

  std::optional<std::uint32_t> entity(const std::string& name) const {
    auto it = entity_index_.find(name);
    if (it == entity_index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& entity_name(std::uint32_t e) const { return entities_.at(e); }
  const std::string& relation_name(std::uint32_t r) const { return relations_.at(r); }

  /// Undirected neighbors of `e`, sorted. Contains `e` itself only when a
  /// self-triple (e, r, e) exists.
  const std::vector<std::uint32_t>& neighbors(std::uint32_t e) const { return adjacency_.at(e); }

  bool connected(std::uint32_t a, std::uint32_t b) const {
    const auto& n = adjacency_.at(a);
    return std::binary_search(n.begin(), n.end(), b);
  }

  const std::vector<Triple>& triples() const { return triples_; }
  std::size_t num_entities() const { return entities_.size(); }
  std::size_t num_relations() const { return relations_.size(); }

  KgStats stats() const { return {entities_.size(), relations_.size(), triples_.size()}; }

 private:
  void link(std::uint32_t a, std::uint32_t b) {
    auto& n = adjacency_[a];
    auto it = std::lower_bound(n.begin(), n.end(), b);
    if (it == n.end() || *it != b) n.insert(it, b);
  }

  std::vector<std::string> entities_;
  std::unordered_map<std::string, std::uint32_t> entity_index_;
  std::vector<std::string> relations_;
  std::unordered_map<std::string, std::uint32_t> relation_index_;
  std::vector<Triple> triples_;
  std::set<Triple> triple_set_;
  std::vector<std::vector<std::uint32_t>> adjacency_;
};

/// Triples TSV `head<TAB>relation<TAB>tail` (no header); optional entities
/// file with one entity id per line registers isolated entities. Blank lines
/// are skipped; any other line without exactly three non-empty fields is a
/// ParseError carrying its line number.
inline KnowledgeGraph load_kg(const std::filesystem::path& triples_path,
                              const std::optional<std::filesystem::path>& entities_path = std::nullopt) {
  KnowledgeGraph kg;
  if (entities_path) {
    std::ifstream in(*entities_path);
    if (!in) throw IoError("cannot open " + entities_path->string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto f = io::split_tabs(line);
      if (f.size() == 1 && f[0].empty()) continue;
      if (f.size() != 1) throw ParseError(entities_path->string(), lineno, "expected one entity id per line");
      kg.add_entity(f[0]);
    }
  }
  std::ifstream in(triples_path);
  if (!in) throw IoError("cannot open " + triples_path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto f = io::split_tabs(line);
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() != 3 || f[0].empty() || f[1].empty() || f[2].empty()) {
      throw ParseError(triples_path.string(), lineno, "expected head<TAB>relation<TAB>tail");
    }
    kg.add_triple(f[0], f[1], f[2]);
  }
  return kg;
}

inline void save_kg(const std::filesystem::path& triples_path, const std::filesystem::path& entities_path,
                    const KnowledgeGraph& kg) {
  std::string t;
  for (const auto& tr : kg.triples()) {
    t += kg.entity_name(tr.head) + '\t' + kg.relation_name(tr.relation) + '\t' + kg.entity_name(tr.tail) + '\n';
  }
  io::write_text(triples_path, t);
  std::string e;
  for (std::uint32_t i = 0; i < kg.num_entities(); ++i) e += kg.entity_name(i) + '\n';
  io::write_text(entities_path, e);
}

/// article_id -> entity id; each article maps to at most one entity.
class EntityAlignment {
 public:
  void add(const std::string& article_id, const std::string& entity_id) {
    auto [it, inserted] = map_.emplace(article_id, entity_id);
    if (!inserted && it->second != entity_id) {
      throw ValidationError("article " + article_id + " aligned to both " + it->second + " and " + entity_id);
    }
  }

  const std::string* find(const std::string& article_id) const {
    auto it = map_.find(article_id);
    return it == map_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return map_.size(); }
  const std::map<std::string, std::string>& items() const { return map_; }

 private:
  std::map<std::string, std::string> map_;
};

/// Alignment TSV `article_id<TAB>entity_id`. When `kg` is given, every
/// target must be a known entity (ValidationError otherwise).
inline EntityAlignment load_alignment(const std::filesystem::path& path, const KnowledgeGraph* kg = nullptr) {
  EntityAlignment a;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> dangling;
  while (std::getline(in, line)) {
    ++lineno;
    auto f = io::split_tabs(line);
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() != 2 || f[0].empty() || f[1].empty()) {
      throw ParseError(path.string(), lineno, "expected article_id<TAB>entity_id");
    }
    if (kg && !kg->entity(f[1])) dangling.push_back(f[1]);
    a.add(f[0], f[1]);
  }
  if (!dangling.empty()) {
    std::string msg = "alignment targets missing from the knowledge graph:";
    for (std::size_t i = 0; i < std::min<std::size_t>(dangling.size(), 10); ++i) msg += " " + dangling[i];
    throw ValidationError(msg);
  }
  return a;
}

inline void save_alignment(const std::filesystem::path& path, const EntityAlignment& a) {
  std::string s;
  for (const auto& [article, entity] : a.items()) s += article + '\t' + entity + '\n';
  io::write_text(path, s);
}

}  // namespace kgfid::corpus
