#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace kgfid {

/// Pipeline stage a counted matmul is attributed to.
enum class FlopStage : std::uint8_t {
  kOther = 0,
  kEncoderStage1,
  kEncoderStage2,
  kReranker,
  kDecoder,
  kCount
};

/// Kind of matmul: attention scores/mixing, linear projections
/// (Q/K/V/O, reranker, output head), or feed-forward sublayers.
enum class FlopKind : std::uint8_t { kAttention = 0, kProjection, kFeedForward, kCount };

inline constexpr std::string_view stage_name(FlopStage s) {
  switch (s) {
    case FlopStage::kEncoderStage1: return "encoder_stage1";
    case FlopStage::kEncoderStage2: return "encoder_stage2";
    case FlopStage::kReranker: return "reranker";
    case FlopStage::kDecoder: return "decoder";
    default: return "other";
  }
}

inline constexpr std::string_view kind_name(FlopKind k) {
  switch (k) {
    case FlopKind::kAttention: return "attention";
    case FlopKind::kProjection: return "projection";
    default: return "feed_forward";
  }
}

/// Exact integer tally of forward-pass matmul FLOPs (2*m*n*k per product).
/// Counters are installed per thread with FlopScope, so concurrent runs
/// never share one. Backward-pass products are not counted.
class FlopCounter {
 public:
  static constexpr std::size_t kStages = static_cast<std::size_t>(FlopStage::kCount);
  static constexpr std::size_t kKinds = static_cast<std::size_t>(FlopKind::kCount);

  void add(FlopStage stage, FlopKind kind, std::uint64_t flops) {
    counts_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(kind)] += flops;
  }

  std::uint64_t get(FlopStage stage, FlopKind kind) const {
    return counts_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(kind)];
  }

  std::uint64_t stage_total(FlopStage stage) const {
    std::uint64_t t = 0;
    for (auto v : counts_[static_cast<std::size_t>(stage)]) t += v;
    return t;
  }

  /// Attention + projection FLOPs of one stage (feed-forward excluded).
  std::uint64_t stage_attention_projection(FlopStage stage) const {
    return get(stage, FlopKind::kAttention) + get(stage, FlopKind::kProjection);
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& row : counts_)
      for (auto v : row) t += v;
    return t;
  }

  void reset() { counts_ = {}; }

 private:
  std::array<std::array<std::uint64_t, kKinds>, kStages> counts_{};
};

namespace detail {
struct FlopContext {
  FlopCounter* counter = nullptr;
  FlopStage stage = FlopStage::kOther;
  FlopKind kind = FlopKind::kProjection;
};

inline FlopContext& flop_context() {
  thread_local FlopContext ctx;
  return ctx;
}
}  // namespace detail

/// Routes this thread's counted FLOPs into `counter` for the scope's lifetime.
class FlopScope {
 public:
  explicit FlopScope(FlopCounter& counter) : saved_(detail::flop_context().counter) {
    detail::flop_context().counter = &counter;
  }
  ~FlopScope() { detail::flop_context().counter = saved_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* saved_;
};

class StageScope {
 public:
  explicit StageScope(FlopStage stage) : saved_(detail::flop_context().stage) {
    detail::flop_context().stage = stage;
  }
  ~StageScope() { detail::flop_context().stage = saved_; }
  StageScope(const StageScope&) = delete;
  StageScope& operator=(const StageScope&) = delete;

 private:
  FlopStage saved_;
};

class KindScope {
 public:
  explicit KindScope(FlopKind kind) : saved_(detail::flop_context().kind) {
    detail::flop_context().kind = kind;
  }
  ~KindScope() { detail::flop_context().kind = saved_; }
  KindScope(const KindScope&) = delete;
  KindScope& operator=(const KindScope&) = delete;

 private:
  FlopKind saved_;
};

inline void count_flops(std::uint64_t flops) {
  auto& ctx = detail::flop_context();
  if (ctx.counter != nullptr) ctx.counter->add(ctx.stage, ctx.kind, flops);
}

inline void count_flops(FlopKind kind, std::uint64_t flops) {
  auto& ctx = detail::flop_context();
  if (ctx.counter != nullptr) ctx.counter->add(ctx.stage, kind, flops);
}

}  // namespace kgfid
