#pragma once

// Analytic encoder/decoder cost of staged reading, the instrumented FLOP
// measurement of the same run, and the report that puts them side by side.

#include <chrono>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgfid/error.hpp"
#include "kgfid/numerics/flops.hpp"
#include "kgfid/reader/model.hpp"

namespace kgfid::costmodel {

struct CostConfig {
  std::size_t L = 4;
  std::size_t L1 = 2;
  std::size_t N1 = 20;
  std::size_t N2 = 4;
  std::size_t T_p = 48;
  std::size_t T_a = 8;
  std::size_t H = 64;

  void validate() const {
    if (L1 < 1 || L1 > L) throw ArgumentError("L1 must lie in [1, L], got L1=" + std::to_string(L1) + " L=" + std::to_string(L));
    if (N2 < 1 || N2 > N1) throw ArgumentError("N2 must lie in [1, N1], got N2=" + std::to_string(N2) + " N1=" + std::to_string(N1));
  }

  /// Same model without early exit: every candidate is encoded to layer L.
  CostConfig vanilla() const {
    CostConfig c = *this;
    c.L1 = L;
    c.N2 = N1;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"L", L}, {"L1", L1}, {"N1", N1}, {"N2", N2}, {"T_p", T_p}, {"T_a", T_a}, {"H", H}};
  }
};

/// Fraction of encoder cost saved: (1 - L1/L)(1 - N2/N1).
inline double analytic_saving_ratio(std::size_t L, std::size_t L1, std::size_t N1, std::size_t N2) {
  CostConfig{L, L1, N1, N2}.validate();
  const double l = static_cast<double>(L), n = static_cast<double>(N1);
  return (1.0 - static_cast<double>(L1) / l) * (1.0 - static_cast<double>(N2) / n);
}

struct AnalyticCosts {
  double encoder = 0.0;
  double decoder = 0.0;
  double total() const { return encoder + decoder; }
};

/// Encoder (L1 N1 + (L - L1) N2) T_p^2 and decoder L (N2 T_p T_a + T_a^2),
/// unit constants.
inline AnalyticCosts analytic_costs(const CostConfig& c) {
  c.validate();
  const double L = static_cast<double>(c.L), L1 = static_cast<double>(c.L1);
  const double N1 = static_cast<double>(c.N1), N2 = static_cast<double>(c.N2);
  const double Tp = static_cast<double>(c.T_p), Ta = static_cast<double>(c.T_a);
  return {(L1 * N1 + (L - L1) * N2) * Tp * Tp, L * (N2 * Tp * Ta + Ta * Ta)};
}

/// FLOPs of one pipeline stage split by kind.
struct StageFlops {
  std::uint64_t attention = 0;
  std::uint64_t projection = 0;
  std::uint64_t feed_forward = 0;

  static StageFlops of(const FlopCounter& c, FlopStage s) {
    return {c.get(s, FlopKind::kAttention), c.get(s, FlopKind::kProjection), c.get(s, FlopKind::kFeedForward)};
  }
  std::uint64_t attention_projection() const { return attention + projection; }
  std::uint64_t total() const { return attention + projection + feed_forward; }
  StageFlops& operator+=(const StageFlops& o) {
    attention += o.attention;
    projection += o.projection;
    feed_forward += o.feed_forward;
    return *this;
  }
  nlohmann::json to_json() const {
    return {{"attention", attention}, {"projection", projection}, {"feed_forward", feed_forward}};
  }
};

struct CostReport {
  CostConfig config;
  double analytic_encoder_flops = 0.0;  // unit constants, staged run
  double analytic_decoder_flops = 0.0;
  double analytic_vanilla_encoder_flops = 0.0;
  double analytic_vanilla_decoder_flops = 0.0;
  double analytic_saving_ratio = 0.0;  // encoder-only formula
  double analytic_cost_ratio = 0.0;    // (encoder + decoder) staged over vanilla

  // Measured attention + projection FLOPs; feed-forward is in the stage breakdown.
  std::uint64_t measured_encoder_flops = 0;
  std::uint64_t measured_decoder_flops = 0;
  std::uint64_t measured_vanilla_encoder_flops = 0;
  std::uint64_t measured_vanilla_decoder_flops = 0;
  std::uint64_t measured_reranker_flops = 0;  // all kinds
  double measured_cost_ratio = 0.0;           // encoder + decoder, staged over vanilla
  double measured_saving_ratio = 0.0;         // 1 - measured_cost_ratio
  double measured_encoder_ratio = 0.0;
  double measured_full_cost_ratio = 0.0;      // feed-forward included

  StageFlops stage1, stage2, reranker, decoder, vanilla_encoder, vanilla_decoder;
  double wall_seconds = 0.0;
  double vanilla_wall_seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"config", config.to_json()},
            {"analytic_encoder_flops", analytic_encoder_flops},
            {"analytic_decoder_flops", analytic_decoder_flops},
            {"analytic_vanilla_encoder_flops", analytic_vanilla_encoder_flops},
            {"analytic_vanilla_decoder_flops", analytic_vanilla_decoder_flops},
            {"analytic_saving_ratio", analytic_saving_ratio},
            {"analytic_cost_ratio", analytic_cost_ratio},
            {"measured_encoder_flops", measured_encoder_flops},
            {"measured_decoder_flops", measured_decoder_flops},
            {"measured_vanilla_encoder_flops", measured_vanilla_encoder_flops},
            {"measured_vanilla_decoder_flops", measured_vanilla_decoder_flops},
            {"measured_reranker_flops", measured_reranker_flops},
            {"measured_cost_ratio", measured_cost_ratio},
            {"measured_saving_ratio", measured_saving_ratio},
            {"measured_encoder_ratio", measured_encoder_ratio},
            {"measured_full_cost_ratio", measured_full_cost_ratio},
            {"stages",
             {{"encoder_stage1", stage1.to_json()},
              {"encoder_stage2", stage2.to_json()},
              {"reranker", reranker.to_json()},
              {"decoder", decoder.to_json()},
              {"vanilla_encoder", vanilla_encoder.to_json()},
              {"vanilla_decoder", vanilla_decoder.to_json()}}},
            {"wall_seconds", wall_seconds},
            {"vanilla_wall_seconds", vanilla_wall_seconds}};
  }
};

/// Builds the report from a staged run's counter and a vanilla run's counter.
/// The vanilla encoder is counted under stage 1.
inline CostReport reconcile(const CostConfig& cfg, const FlopCounter& staged, const FlopCounter& vanilla) {
  CostReport r;
  r.config = cfg;
  const auto a = analytic_costs(cfg), v = analytic_costs(cfg.vanilla());
  r.analytic_encoder_flops = a.encoder;
  r.analytic_decoder_flops = a.decoder;
  r.analytic_vanilla_encoder_flops = v.encoder;
  r.analytic_vanilla_decoder_flops = v.decoder;
  r.analytic_saving_ratio = analytic_saving_ratio(cfg.L, cfg.L1, cfg.N1, cfg.N2);
  r.analytic_cost_ratio = a.total() / v.total();

  r.stage1 = StageFlops::of(staged, FlopStage::kEncoderStage1);
  r.stage2 = StageFlops::of(staged, FlopStage::kEncoderStage2);
  r.reranker = StageFlops::of(staged, FlopStage::kReranker);
  r.decoder = StageFlops::of(staged, FlopStage::kDecoder);
  r.vanilla_encoder = StageFlops::of(vanilla, FlopStage::kEncoderStage1);
  r.vanilla_decoder = StageFlops::of(vanilla, FlopStage::kDecoder);
  if (r.vanilla_encoder.total() == 0) throw ArgumentError("vanilla counter recorded no encoder FLOPs");

  r.measured_encoder_flops = r.stage1.attention_projection() + r.stage2.attention_projection();
  r.measured_decoder_flops = r.decoder.attention_projection();
  r.measured_vanilla_encoder_flops = r.vanilla_encoder.attention_projection();
  r.measured_vanilla_decoder_flops = r.vanilla_decoder.attention_projection();
  r.measured_reranker_flops = r.reranker.total();

  auto ratio = [](std::uint64_t x, std::uint64_t y) { return static_cast<double>(x) / static_cast<double>(y); };
  r.measured_cost_ratio = ratio(r.measured_encoder_flops + r.measured_decoder_flops,
                                r.measured_vanilla_encoder_flops + r.measured_vanilla_decoder_flops);
  r.measured_saving_ratio = 1.0 - r.measured_cost_ratio;
  r.measured_encoder_ratio = ratio(r.measured_encoder_flops, r.measured_vanilla_encoder_flops);
  r.measured_full_cost_ratio = ratio(r.stage1.total() + r.stage2.total() + r.decoder.total(),
                                     r.vanilla_encoder.total() + r.vanilla_decoder.total());
  return r;
}

/// Runs one question through the staged reader and through the vanilla path,
/// each under its own counter, with a teacher-forced decoder pass of T_a
/// tokens. Both counters must be fresh.
inline CostReport measure_run(const reader::ReaderModel& m, const std::string& question,
                              const std::vector<std::string>& passages, const corpus::PassageGraph& graph,
                              FlopCounter& staged, FlopCounter& vanilla) {
  if (staged.total() != 0 || vanilla.total() != 0) throw ArgumentError("FLOP counter was not reset before the run");
  const auto& rc = m.config();
  std::vector<std::size_t> input(rc.answer_len, text::Vocab::kUnk);
  input[0] = text::Vocab::kBos;
  NoGradGuard no_grad;
  using clock = std::chrono::steady_clock;

  const auto t0 = clock::now();
  std::size_t length = 0;
  {
    FlopScope scope(staged);
    auto r = reader::forward(m, question, passages, graph, &input);
    length = r.memory.length;
  }
  const auto t1 = clock::now();
  {
    FlopScope scope(vanilla);
    reader::vanilla_answer_logits(m, question, passages, input);
  }
  const auto t2 = clock::now();

  CostConfig cfg{rc.layers, rc.rerank_layer, passages.size(), std::min(rc.n2, passages.size()),
                 length, rc.answer_len, rc.dims.hidden};
  CostReport rep = reconcile(cfg, staged, vanilla);
  rep.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  rep.vanilla_wall_seconds = std::chrono::duration<double>(t2 - t1).count();
  return rep;
}

inline CostReport measure_run(const reader::ReaderModel& m, const std::string& question,
                              const std::vector<std::string>& passages, const corpus::PassageGraph& graph) {
  FlopCounter staged, vanilla;
  return measure_run(m, question, passages, graph, staged, vanilla);
}

/// One row of a cost table: a labelled configuration plus metric values.
struct CostRow {
  std::string label;
  CostConfig config;
  std::vector<double> metrics;
};

/// Rows of model, L, L1, N1, N2, analytic cost (percent of vanilla encoder
/// cost), then one column per metric.
inline std::string render_cost_table(const std::vector<CostRow>& rows, const std::vector<std::string>& metric_names) {
  std::size_t label_w = 5;
  for (const auto& r : rows) label_w = std::max(label_w, r.label.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(label_w) + 2) << "Model" << std::right << std::setw(4) << "L"
      << std::setw(5) << "L1" << std::setw(6) << "N1" << std::setw(6) << "N2" << std::setw(8) << "Cost";
  for (const auto& m : metric_names) out << std::setw(static_cast<int>(std::max<std::size_t>(m.size(), 6) + 2)) << m;
  out << '\n';
  for (const auto& r : rows) {
    if (r.metrics.size() != metric_names.size()) throw ShapeError("row " + r.label + " has the wrong number of metrics");
    const double cost = 1.0 - analytic_saving_ratio(r.config.L, r.config.L1, r.config.N1, r.config.N2);
    std::ostringstream pct;
    pct << std::fixed << std::setprecision(0) << cost * 100.0 << '%';
    out << std::left << std::setw(static_cast<int>(label_w) + 2) << r.label << std::right << std::setw(4)
        << r.config.L << std::setw(5) << r.config.L1 << std::setw(6) << r.config.N1 << std::setw(6) << r.config.N2
        << std::setw(8) << pct.str();
    for (std::size_t i = 0; i < r.metrics.size(); ++i) {
      out << std::setw(static_cast<int>(std::max<std::size_t>(metric_names[i].size(), 6) + 2)) << std::fixed
          << std::setprecision(2) << r.metrics[i];
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace kgfid::costmodel
