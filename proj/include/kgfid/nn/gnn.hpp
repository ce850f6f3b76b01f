#pragma once

// Graph rerankers over per-question passage graphs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "kgfid/corpus/passage_graph.hpp"
#include "kgfid/numerics/flops.hpp"
#include "kgfid/numerics/ops.hpp"
#include "kgfid/numerics/parameters.hpp"

namespace kgfid::nn {

enum class GnnType { kGat, kGcn, kMlp };

inline std::string gnn_type_name(GnnType t) {
  switch (t) {
    case GnnType::kGat: return "gat";
    case GnnType::kGcn: return "gcn";
    case GnnType::kMlp: return "mlp";
  }
  return "?";
}

inline GnnType parse_gnn_type(const std::string& s) {
  if (s == "gat") return GnnType::kGat;
  if (s == "gcn") return GnnType::kGcn;
  if (s == "mlp") return GnnType::kMlp;
  throw ArgumentError("unknown gnn type '" + s + "' (expected gat, gcn or mlp)");
}

struct GnnConfig {
  GnnType type = GnnType::kGat;
  std::size_t layers = 3;
  std::size_t heads = 2;
  double negative_slope = 0.2;
};

/// Residual message-passing stack followed by a width-preserving output
/// projection. All feature maps start at the identity, so an untrained
/// network passes features through plus neighbourhood averages. Every node
/// always attends to itself. The mlp variant is the gat network run with every edge removed.
/// Zero layers means no parameters and an exact pass-through.
class GraphReranker {
 public:
  GraphReranker() = default;

  static GraphReranker create(ParameterSet& ps, const std::string& prefix, std::size_t width,
                              const GnnConfig& cfg) {
    GraphReranker r(prefix, width, cfg);
    if (cfg.layers == 0) return r;
    if (cfg.heads == 0 || width % cfg.heads != 0) {
      throw ShapeError("gnn heads " + std::to_string(cfg.heads) + " must divide width " + std::to_string(width));
    }
    const std::size_t dh = width / cfg.heads;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = prefix + ".layer" + std::to_string(l);
      if (cfg.type == GnnType::kGcn) {
        ps.identity(p + ".w", width);
        continue;
      }
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = p + ".head" + std::to_string(h);
        // Head h starts as the selector of feature columns [h*dh, (h+1)*dh).
        std::vector<double> sel(width * dh, 0.0);
        for (std::size_t c = 0; c < dh; ++c) sel[(h * dh + c) * dh + c] = 1.0;
        ps.insert(hp + ".w", Tensor::from({width, dh}, std::move(sel)));
        ps.uniform(hp + ".a_src", {dh, 1}, dh);
        ps.uniform(hp + ".a_dst", {dh, 1}, dh);
      }
    }
    ps.identity(prefix + ".out", width);
    return bind(ps, prefix, width, cfg);
  }

  static GraphReranker bind(const ParameterSet& ps, const std::string& prefix, std::size_t width,
                            const GnnConfig& cfg) {
    GraphReranker r(prefix, width, cfg);
    if (cfg.layers == 0) return r;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = prefix + ".layer" + std::to_string(l);
      Layer layer;
      if (cfg.type == GnnType::kGcn) {
        layer.gcn_w = ps.get(p + ".w");
      } else {
        for (std::size_t h = 0; h < cfg.heads; ++h) {
          const std::string hp = p + ".head" + std::to_string(h);
          layer.heads.push_back({ps.get(hp + ".w"), ps.get(hp + ".a_src"), ps.get(hp + ".a_dst")});
        }
      }
      r.layers_.push_back(std::move(layer));
    }
    r.out_ = ps.get(prefix + ".out");
    return r;
  }

  const GnnConfig& config() const { return cfg_; }
  std::size_t width() const { return width_; }

  /// x: [n, width] node features in graph node order.
  Tensor forward(const Tensor& x, const corpus::PassageGraph& graph) const {
    if (x.rank() != 2 || x.cols() != width_) {
      throw ShapeError("gnn expects features [n, " + std::to_string(width_) + "], got " + shape_str(x.shape()));
    }
    if (x.rows() != graph.num_nodes()) {
      throw ShapeError("gnn: " + std::to_string(x.rows()) + " feature rows for " +
                       std::to_string(graph.num_nodes()) + " graph nodes");
    }
    if (cfg_.layers == 0) return x;
    const auto& g = cfg_.type == GnnType::kMlp ? graph.without_edges() : graph;
    Tensor norm_adj;
    ops::SparseRows pattern;
    if (cfg_.type == GnnType::kGcn) {
      norm_adj = normalized_adjacency(g.adjacency_with_self_loops(), x.rows());
    } else {
      pattern = neighborhoods(g);
    }

    Tensor h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Tensor agg = cfg_.type == GnnType::kGcn ? gcn_layer(h, layers_[l], norm_adj) : gat_layer(h, layers_[l], pattern);
      if (l + 1 < layers_.size()) agg = ops::elu(agg);
      h = ops::add(h, agg);
    }
    KindScope kind(FlopKind::kProjection);
    return ops::matmul(h, out_);
  }

 private:
  struct Head {
    Tensor w, a_src, a_dst;
  };
  struct Layer {
    std::vector<Head> heads;
    Tensor gcn_w;
  };

  GraphReranker(std::string prefix, std::size_t width, GnnConfig cfg)
      : prefix_(std::move(prefix)), width_(width), cfg_(cfg) {}

  /// Row i: node i itself, then its neighbours in ascending order.
  static ops::SparseRows neighborhoods(const corpus::PassageGraph& g) {
    const std::size_t n = g.num_nodes();
    std::vector<std::vector<std::uint32_t>> nb(n);
    for (std::size_t i = 0; i < n; ++i) nb[i].push_back(static_cast<std::uint32_t>(i));
    for (auto [i, j] : g.edges) {
      nb[i].push_back(j);
      nb[j].push_back(i);
    }
    ops::SparseRows r;
    for (auto& row : nb) {
      std::sort(row.begin() + 1, row.end());
      r.cols.insert(r.cols.end(), row.begin(), row.end());
      r.offsets.push_back(r.cols.size());
    }
    return r;
  }

  Tensor gat_layer(const Tensor& h, const Layer& layer, const ops::SparseRows& pattern) const {
    std::vector<Tensor> outs;
    for (const auto& head : layer.heads) {
      Tensor z, src, dst;
      {
        KindScope kind(FlopKind::kProjection);
        z = ops::matmul(h, head.w);
        src = ops::matmul(z, head.a_src);
        dst = ops::matmul(z, head.a_dst);
      }
      KindScope kind(FlopKind::kAttention);
      outs.push_back(ops::graph_attention(z, src, dst, pattern, cfg_.negative_slope));
    }
    return outs.size() == 1 ? outs.front() : ops::concat_cols(outs);
  }

  Tensor gcn_layer(const Tensor& h, const Layer& layer, const Tensor& norm_adj) const {
    Tensor mixed;
    {
      KindScope kind(FlopKind::kAttention);
      mixed = ops::matmul(norm_adj, h);
    }
    KindScope kind(FlopKind::kProjection);
    return ops::matmul(mixed, layer.gcn_w);
  }

  /// D^-1/2 (A + I) D^-1/2.
  static Tensor normalized_adjacency(const std::vector<std::uint8_t>& adjacency, std::size_t n) {
    std::vector<double> deg(n, 0.0), a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) deg[i] += adjacency[i * n + j];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (adjacency[i * n + j]) a[i * n + j] = 1.0 / std::sqrt(deg[i] * deg[j]);
    return Tensor::from({n, n}, std::move(a));
  }

  std::string prefix_;
  std::size_t width_ = 0;
  GnnConfig cfg_;
  std::vector<Layer> layers_;
  Tensor out_;
};

}  // namespace kgfid::nn
