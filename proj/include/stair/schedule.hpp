#pragma once

#include <algorithm>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "stair/core.hpp"
#include "stair/counters.hpp"
#include "stair/types.hpp"

namespace stair {

// ---------------------------------------------------------------------------
// Variant configuration
// ---------------------------------------------------------------------------

enum class Variant { Staircase, CachedStaircase, GlobalCachedStaircase, Ladder, BaselineXl };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Staircase: return "staircase";
    case Variant::CachedStaircase: return "cached_staircase";
    case Variant::GlobalCachedStaircase: return "global_cached_staircase";
    case Variant::Ladder: return "ladder";
    case Variant::BaselineXl: return "baseline_xl";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "staircase") return Variant::Staircase;
  if (s == "cached_staircase") return Variant::CachedStaircase;
  if (s == "global_cached_staircase") return Variant::GlobalCachedStaircase;
  if (s == "ladder") return Variant::Ladder;
  if (s == "baseline_xl") return Variant::BaselineXl;
  throw ConfigError("unknown variant '" + s + "'");
}

struct VariantConfig {
  Variant variant = Variant::Staircase;
  int recurrent_steps = 1;   // N
  int forward_size = 0;      // C (staircase family; ladder ingests whole segments)
  int cache_threshold = -1;  // M; -1 resolves to N for non-cached variants
  int attention_span = 0;    // S (ladder / baseline only)
  int segment_len = 0;       // BPTT truncation; 0 = whole sequence at once
  // Verification hook: permits M == N on cached_staircase so the cache
  // machinery can be compared against the plain schedule. Never settable
  // from run configs.
  bool allow_degenerate_cache = false;

  bool windowed() const {
    return variant == Variant::Staircase || variant == Variant::CachedStaircase ||
           variant == Variant::GlobalCachedStaircase;
  }

  // Resolved cache threshold: pass count after which a chunk freezes.
  int effective_m() const {
    if (variant == Variant::CachedStaircase || variant == Variant::GlobalCachedStaircase)
      return cache_threshold;
    return recurrent_steps;
  }

  // Pass count a chunk is recomputed for (a chunk always queries at least
  // once, so the memnet-style M=0 configuration still produces outputs).
  int query_passes() const { return std::max(effective_m(), 1); }

  long step_size() const { return static_cast<long>(recurrent_steps) * forward_size; }

  void validate() const {
    if (recurrent_steps < 1) throw ConfigError("variant: recurrent_steps must be >= 1");
    if (segment_len < 0) throw ConfigError("variant: segment_len must be >= 0");
    switch (variant) {
      case Variant::Staircase:
        if (forward_size < 1) throw ConfigError("staircase requires forward_size >= 1");
        if (cache_threshold >= 0 && cache_threshold != recurrent_steps)
          throw ConfigError("staircase does not cache; cache_threshold must equal N or be unset");
        if (attention_span != 0)
          throw ConfigError("staircase context is bounded by the window; attention_span must be 0");
        break;
      case Variant::CachedStaircase:
        if (forward_size < 1) throw ConfigError("cached_staircase requires forward_size >= 1");
        if (cache_threshold < 0)
          throw ConfigError("cached_staircase requires cache_threshold (M)");
        if (cache_threshold >= recurrent_steps + (allow_degenerate_cache ? 1 : 0))
          throw ConfigError("cached_staircase requires M < N (got M=" +
                            std::to_string(cache_threshold) + ", N=" +
                            std::to_string(recurrent_steps) + ")");
        if (attention_span != 0)
          throw ConfigError("cached_staircase attention_span must be 0");
        break;
      case Variant::GlobalCachedStaircase:
        if (forward_size < 1)
          throw ConfigError("global_cached_staircase requires forward_size >= 1");
        if (cache_threshold < 0 || cache_threshold > recurrent_steps)
          throw ConfigError("global_cached_staircase requires 0 <= M <= N");
        if (attention_span != 0)
          throw ConfigError("global_cached_staircase attention_span must be 0");
        break;
      case Variant::Ladder:
        if (attention_span < 1) throw ConfigError("ladder requires attention_span >= 1");
        break;
      case Variant::BaselineXl:
        if (recurrent_steps != 1)
          throw ConfigError("baseline_xl is a Ladder model with N=1; set recurrent_steps=1");
        if (attention_span < 1) throw ConfigError("baseline_xl requires attention_span >= 1");
        break;
    }
  }
};

// ---------------------------------------------------------------------------
// Scheduler state
// ---------------------------------------------------------------------------

// One chunk H_i^n: its states for all batch lanes (stacked), absolute
// positions (shared across lanes), and scheduling bookkeeping.
template <typename S>
struct Chunk {
  long index = 0;
  Var<S> block;             // (B * len) x d
  Var<S> entry_block;       // kept only when M == 0 (cache holds embeddings)
  std::vector<long> pos;    // per-lane positions, strictly increasing
  int passes = 0;           // core passes applied so far
  int age = 0;              // scheduler steps spent in the window
  bool frozen = false;
  bool emitted = false;

  Index len() const { return static_cast<Index>(pos.size()); }
};

template <typename S>
struct WindowState {
  std::deque<Chunk<S>> window;  // position order; frozen chunks form a prefix
  long next_index = 0;
};

template <typename S>
struct VariantState {
  WindowState<S> win;                // staircase family
  std::vector<XlCache<S>> ladder;    // ladder/baseline: one cache per recurrent step
  long stream_pos = 0;               // absolute position of the next new token

  // BPTT truncation: carried values stay, gradients do not cross.
  void detach_all() {
    for (auto& c : win.window) {
      c.block = c.block.detach();
      if (c.entry_block.defined()) c.entry_block = c.entry_block.detach();
    }
    // XL cache slots are detached on append already.
  }
};

// Maturity emission: final-depth states for tokens that completed their
// passes during a step, in position order.
template <typename S>
struct Emission {
  std::vector<long> pos;  // per-lane positions
  Var<S> states;          // (B * n) x d
};

// ---------------------------------------------------------------------------
// Chunking and masks
// ---------------------------------------------------------------------------

// Splits lockstep lane token streams into embedded pass-0 chunks of size
// chunk_len (the final chunk may be shorter). Positions continue from
// start_pos. An empty input yields an empty list.
template <typename S>
std::vector<Chunk<S>> build_chunks(Core<S>& core, const std::vector<std::vector<int>>& lanes,
                                   long start_pos, long first_index, int chunk_len,
                                   ForwardCtx<S>& ctx) {
  if (chunk_len < 1) throw ConfigError("build_chunks: chunk size must be >= 1");
  std::vector<Chunk<S>> out;
  if (lanes.empty() || lanes[0].empty()) return out;
  const size_t t = lanes[0].size();
  for (const auto& l : lanes)
    if (l.size() != t) throw ShapeError("build_chunks: lanes must have equal length");
  for (size_t at = 0; at < t; at += chunk_len) {
    const size_t n = std::min<size_t>(chunk_len, t - at);
    std::vector<int> ids;
    ids.reserve(lanes.size() * n);
    for (const auto& l : lanes) ids.insert(ids.end(), l.begin() + at, l.begin() + at + n);
    Chunk<S> c;
    c.index = first_index + static_cast<long>(out.size());
    c.block = f_in(core, ids, ctx);
    c.pos.resize(n);
    for (size_t i = 0; i < n; ++i) c.pos[i] = start_pos + static_cast<long>(at + i);
    out.push_back(std::move(c));
  }
  return out;
}

// Query/key mask for one scheduler step: query at absolute position p may
// attend any window key at p' <= p; frozen tokens contribute keys only.
inline MaskMat build_step_mask(const std::vector<long>& q_pos, const std::vector<long>& k_pos) {
  for (size_t j = 1; j < k_pos.size(); ++j)
    if (k_pos[j] <= k_pos[j - 1])
      throw ConfigError("build_step_mask: key positions must be strictly increasing");
  return causal_mask(q_pos, k_pos, 0);
}

// ---------------------------------------------------------------------------
// The staircase step
// ---------------------------------------------------------------------------

namespace detail {

// Concatenates per-lane slices of the given chunks so the result is again
// lane-stacked: lane b holds [chunk_0 lane b ; chunk_1 lane b ; ...].
template <typename S>
Var<S> lane_concat(const std::vector<const Chunk<S>*>& chunks, Index batch) {
  if (chunks.size() == 1) return chunks[0]->block;
  std::vector<Var<S>> parts;
  parts.reserve(chunks.size() * batch);
  for (Index b = 0; b < batch; ++b)
    for (const Chunk<S>* c : chunks) parts.push_back(slice_rows(c->block, b * c->len(), c->len()));
  return concat_rows(parts);
}

}  // namespace detail

// Advances the window by one step: optionally ingests a new pass-0 chunk,
// runs one TransCore application over the unfrozen chunks (frozen chunks are
// key/value context only), bumps pass counts, freezes chunks reaching M,
// emits chunks whose states became final, and evicts per the variant's
// policy. Returns the emission, if any.
template <typename S>
std::optional<Emission<S>> staircase_step(WindowState<S>& ws, std::optional<Chunk<S>> incoming,
                                          const VariantConfig& cfg, Core<S>& core, Index batch,
                                          ForwardCtx<S>& ctx) {
  cfg.validate();
  if (!cfg.windowed()) throw ConfigError("staircase_step: not a windowed variant");
  const int m = cfg.effective_m();
  const int qp = cfg.query_passes();

  if (incoming) {
    if (incoming->passes != 0)
      throw ConfigError("staircase_step: incoming chunk must have pass count 0");
    if (m == 0) incoming->entry_block = incoming->block;
    ws.window.push_back(std::move(*incoming));
  }

  // Window invariants.
  long active_tokens = 0;
  int prev_passes = -1;
  bool seen_active = false;
  for (auto it = ws.window.begin(); it != ws.window.end(); ++it) {
    if (it->frozen) {
      if (seen_active)
        throw NumericError("staircase window invariant violated: frozen chunk after active");
      continue;
    }
    seen_active = true;
    active_tokens += it->len();
    if (prev_passes >= 0 && it->passes >= prev_passes)
      throw NumericError("staircase window invariant violated: pass counts not decreasing");
    prev_passes = it->passes;
  }
  if (cfg.variant != Variant::GlobalCachedStaircase && active_tokens > cfg.step_size())
    throw NumericError("staircase window overflow: " + std::to_string(active_tokens) +
                       " active tokens > N*C = " + std::to_string(cfg.step_size()));

  std::vector<Chunk<S>*> active;
  std::vector<const Chunk<S>*> frozen;
  for (auto& c : ws.window)
    (c.frozen ? (void)frozen.push_back(&c) : (void)active.push_back(&c));

  if (!active.empty()) {
    std::vector<long> q_pos;
    for (const Chunk<S>* c : active) q_pos.insert(q_pos.end(), c->pos.begin(), c->pos.end());
    std::vector<long> f_pos;
    for (const Chunk<S>* c : frozen) f_pos.insert(f_pos.end(), c->pos.begin(), c->pos.end());

    Var<S> x = detail::lane_concat<S>({active.begin(), active.end()}, batch);
    Var<S> fz;
    if (!frozen.empty()) fz = detail::lane_concat(frozen, batch);

    Var<S> y = trans_core(core, x, batch, q_pos, fz, f_pos, /*span=*/0, nullptr, ctx);

    // Scatter rows back into per-chunk blocks (lane-stacked per chunk).
    const Index tq = static_cast<Index>(q_pos.size());
    Index offset = 0;
    for (Chunk<S>* c : active) {
      std::vector<Var<S>> parts;
      parts.reserve(batch);
      for (Index b = 0; b < batch; ++b) parts.push_back(slice_rows(y, b * tq + offset, c->len()));
      c->block = batch == 1 ? parts[0] : concat_rows(parts);
      c->passes += 1;
      offset += c->len();
    }
  }
  for (auto& c : ws.window) c.age += 1;

  // Freeze, emit, evict.
  std::optional<Emission<S>> emission;
  for (auto& c : ws.window) {
    if (!c.frozen && c.passes >= qp) {
      if (!c.emitted) {
        if (emission) throw NumericError("staircase_step: multiple chunks matured in one step");
        emission = Emission<S>{c.pos, c.block};
        c.emitted = true;
        if (ctx.counters) {
          ctx.counters->add("emitted_tokens", c.len());
          ctx.counters->add("passes_hist/" + std::to_string(c.passes), c.len());
        }
      }
      if (m < cfg.recurrent_steps || cfg.variant == Variant::GlobalCachedStaircase) {
        c.frozen = true;
        c.block = m == 0 ? c.entry_block.detach() : c.block.detach();
      }
    }
  }
  while (!ws.window.empty()) {
    Chunk<S>& c = ws.window.front();
    const bool expire = cfg.variant == Variant::GlobalCachedStaircase
                            ? false
                            : (c.emitted && c.age >= cfg.recurrent_steps);
    if (!expire) break;
    ws.window.pop_front();
  }
  return emission;
}

// ---------------------------------------------------------------------------
// Segment drivers
// ---------------------------------------------------------------------------

// Staircase-family segment: chunk the incoming tokens, run one step per
// chunk. Tokens left of a segment boundary keep flowing through the window.
template <typename S>
std::vector<Emission<S>> windowed_segment(VariantState<S>& state,
                                          const std::vector<std::vector<int>>& lanes,
                                          const VariantConfig& cfg, Core<S>& core,
                                          ForwardCtx<S>& ctx) {
  std::vector<Emission<S>> out;
  auto chunks = build_chunks(core, lanes, state.stream_pos, state.win.next_index,
                             cfg.forward_size, ctx);
  for (auto& ch : chunks) {
    state.stream_pos += ch.len();
    state.win.next_index += 1;
    auto e = staircase_step(state.win, std::move(ch), cfg, core, static_cast<Index>(lanes.size()),
                            ctx);
    if (e) out.push_back(std::move(*e));
  }
  return out;
}

// End-of-sequence drain: steps with no new chunk until every chunk has
// emitted its final states.
template <typename S>
std::vector<Emission<S>> windowed_drain(VariantState<S>& state, const VariantConfig& cfg,
                                        Core<S>& core, Index batch, ForwardCtx<S>& ctx) {
  std::vector<Emission<S>> out;
  auto pending = [&]() {
    for (const auto& c : state.win.window)
      if (!c.emitted) return true;
    return false;
  };
  while (pending()) {
    auto e = staircase_step<S>(state.win, std::nullopt, cfg, core, batch, ctx);
    if (e) out.push_back(std::move(*e));
  }
  return out;
}

// Ladder/baseline segment: embed the whole segment, apply the core N times,
// each pass reading and extending its own per-(step, layer) segment cache.
template <typename S>
std::vector<Emission<S>> ladder_segment(VariantState<S>& state,
                                        const std::vector<std::vector<int>>& lanes,
                                        const VariantConfig& cfg, Core<S>& core,
                                        ForwardCtx<S>& ctx) {
  const Index batch = static_cast<Index>(lanes.size());
  const size_t t = lanes.empty() ? 0 : lanes[0].size();
  std::vector<Emission<S>> out;
  if (t == 0) return out;
  for (const auto& l : lanes)
    if (l.size() != t) throw ShapeError("ladder_segment: lanes must have equal length");

  std::vector<int> ids;
  ids.reserve(lanes.size() * t);
  for (const auto& l : lanes) ids.insert(ids.end(), l.begin(), l.end());
  std::vector<long> pos(t);
  for (size_t i = 0; i < t; ++i) pos[i] = state.stream_pos + static_cast<long>(i);
  state.stream_pos += static_cast<long>(t);

  if (state.ladder.empty()) state.ladder.resize(cfg.recurrent_steps);
  Var<S> h = f_in(core, ids, ctx);
  for (int n = 0; n < cfg.recurrent_steps; ++n) {
    XlCache<S>& cache = state.ladder[n];
    cache.keep = cfg.attention_span - 1;
    h = trans_core(core, h, batch, pos, Var<S>(), {}, cfg.attention_span, &cache, ctx);
  }
  if (ctx.counters) {
    ctx.counters->add("emitted_tokens", static_cast<long long>(t));
    ctx.counters->add("passes_hist/" + std::to_string(cfg.recurrent_steps),
                      static_cast<long long>(t));
  }
  out.push_back(Emission<S>{std::move(pos), h});
  return out;
}

template <typename S>
std::vector<Emission<S>> run_segment(VariantState<S>& state,
                                     const std::vector<std::vector<int>>& lanes,
                                     const VariantConfig& cfg, Core<S>& core, ForwardCtx<S>& ctx) {
  return cfg.windowed() ? windowed_segment(state, lanes, cfg, core, ctx)
                        : ladder_segment(state, lanes, cfg, core, ctx);
}

// ---------------------------------------------------------------------------
// Whole-sequence entry point
// ---------------------------------------------------------------------------

template <typename S>
struct RunResult {
  Var<S> logits;  // T x V, row t aligned with input position t
  Counters counters;
};

// Full-sequence logits for one sequence: ramp-up, steady march, and drain.
// Logits at position t depend only on tokens 1..t for every variant.
template <typename S>
RunResult<S> run_variant(const TokenSeq& seq, const VariantConfig& cfg, Core<S>& core,
                         ForwardCtx<S>& ctx) {
  cfg.validate();
  if (cfg.windowed() && cfg.segment_len > 0 && cfg.segment_len % cfg.forward_size != 0)
    throw ConfigError("segment_len must be a multiple of forward_size for windowed variants");
  RunResult<S> result;
  Counters local;
  Counters* prev = ctx.counters;
  ctx.counters = &local;

  VariantState<S> state;
  std::vector<Emission<S>> emissions;
  const long t_total = seq.size();
  const long seg = cfg.segment_len > 0 ? cfg.segment_len : std::max<long>(t_total, 1);
  for (long at = 0; at < t_total; at += seg) {
    const long n = std::min(seg, t_total - at);
    std::vector<std::vector<int>> lanes{
        std::vector<int>(seq.ids.begin() + at, seq.ids.begin() + at + n)};
    auto e = run_segment(state, lanes, cfg, core, ctx);
    for (auto& em : e) emissions.push_back(std::move(em));
    if (at + seg < t_total && Tape<S>::active() != nullptr) state.detach_all();
  }
  if (cfg.windowed()) {
    auto e = windowed_drain(state, cfg, core, Index(1), ctx);
    for (auto& em : e) emissions.push_back(std::move(em));
  }
  ctx.counters = prev;
  if (ctx.counters) *ctx.counters += local;
  result.counters = std::move(local);

  if (t_total == 0) {
    result.logits = Var<S>(Mat<S>::Zero(0, core.cfg.vocab_size));
    return result;
  }
  std::vector<Var<S>> blocks;
  long covered = 0;
  long expect = 0;
  for (const auto& em : emissions) {
    for (long p : em.pos) {
      if (p != expect)
        throw NumericError("run_variant: emitted positions not contiguous at " +
                           std::to_string(p));
      ++expect;
    }
    covered += static_cast<long>(em.pos.size());
    blocks.push_back(em.states);
  }
  if (covered != t_total)
    throw NumericError("run_variant: emitted " + std::to_string(covered) + " of " +
                       std::to_string(t_total) + " positions");
  result.logits = f_out(core, blocks.size() == 1 ? blocks[0] : concat_rows(blocks));
  return result;
}

}  // namespace stair
