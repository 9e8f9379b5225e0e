#pragma once

#include <deque>
#include <optional>
#include <string>

#include "stair/counters.hpp"
#include "stair/schedule.hpp"
#include "stair/types.hpp"

namespace stair {

// Analytic work accounting. Everything here is integer arithmetic over the
// schedule layout; no tensors are built. The names in `counters` match the
// instrumentation emitted by run_variant so the two sides can be compared
// for exact equality.
struct CostReport {
  Counters counters;
  long long steady_step_queries = 0;  // query tokens per steady scheduler step (M*C)
  long long steady_step_kv = 0;       // key/value tokens per steady step (N*C)
  long long steady_step_pairs = 0;    // mask-allowed pairs per steady step
  long long steady_token_pairs = 0;   // ladder: allowed pairs per token in steady state
};

namespace detail {

struct SimChunk {
  long lo = 0;
  long len = 0;
  int passes = 0;
  int age = 0;
  bool frozen = false;
  bool emitted = false;
};

// Keys of chunk k visible to a query at absolute position p.
inline long long keys_leq(const SimChunk& k, long p) {
  long long n = p - k.lo + 1;
  if (n < 0) n = 0;
  if (n > k.len) n = k.len;
  return n;
}

}  // namespace detail

// Work counts for one sequence of length T under cfg, with n_applications
// layer applications per core call (the resolved layer-pattern length).
inline CostReport cost_model(const VariantConfig& cfg, long T, int n_applications) {
  cfg.validate();
  if (n_applications < 1) throw ConfigError("cost_model: n_applications must be >= 1");
  CostReport report;
  Counters& ct = report.counters;

  if (cfg.windowed()) {
    const int m = cfg.effective_m();
    const int qp = cfg.query_passes();
    const int n_steps = cfg.recurrent_steps;
    const long c_size = cfg.forward_size;
    std::deque<detail::SimChunk> win;

    auto step = [&](std::optional<detail::SimChunk> incoming) {
      if (incoming) win.push_back(*incoming);
      long long q_tokens = 0;
      for (const auto& c : win)
        if (!c.frozen && c.passes < qp) q_tokens += c.len;
      if (q_tokens > 0) {
        ct.add("core_calls", 1);
        ct.add("query_tokens", q_tokens);
        long long kv = 0;
        for (const auto& c : win) kv += c.len;
        ct.add("kv_tokens", kv);
        long long pairs = 0;
        for (const auto& qc : win) {
          if (qc.frozen || qc.passes >= qp) continue;
          for (long p = qc.lo; p < qc.lo + qc.len; ++p)
            for (const auto& kc : win) pairs += detail::keys_leq(kc, p);
        }
        ct.add("qk_pairs", pairs * n_applications);
        ct.add("ff_tokens", q_tokens * n_applications);
        for (auto& c : win)
          if (!c.frozen && c.passes < qp) c.passes += 1;
      }
      for (auto& c : win) c.age += 1;
      for (auto& c : win) {
        if (!c.frozen && c.passes >= qp) {
          if (!c.emitted) {
            c.emitted = true;
            ct.add("emitted_tokens", c.len);
            ct.add("passes_hist/" + std::to_string(c.passes), c.len);
          }
          if (m < n_steps || cfg.variant == Variant::GlobalCachedStaircase) c.frozen = true;
        }
      }
      while (!win.empty()) {
        const auto& c = win.front();
        const bool expire = cfg.variant == Variant::GlobalCachedStaircase
                                ? false
                                : (c.emitted && c.age >= n_steps);
        if (!expire) break;
        win.pop_front();
      }
    };

    for (long at = 0; at < T; at += c_size) {
      detail::SimChunk c;
      c.lo = at;
      c.len = std::min<long>(c_size, T - at);
      step(c);
    }
    auto pending = [&]() {
      for (const auto& c : win)
        if (!c.emitted) return true;
      return false;
    };
    while (pending()) step(std::nullopt);

    // Steady-state step: a full window of N chunks, the newest M of them
    // queries. Only the non-global variants reach a steady state.
    report.steady_step_queries = static_cast<long long>(qp) * c_size;
    report.steady_step_kv = static_cast<long long>(n_steps) * c_size;
    const long nc = cfg.step_size();
    for (long p = nc - qp * c_size; p < nc; ++p) report.steady_step_pairs += p + 1;
  } else {
    // Ladder / baseline: segments with per-(step, layer) caches of span-1
    // trailing states, span-limited causal attention.
    const long span = cfg.attention_span;
    const long seg = cfg.segment_len > 0 ? cfg.segment_len : std::max<long>(T, 1);
    long cache_len = 0;
    for (long at = 0; at < T; at += seg) {
      const long g = std::min(seg, T - at);
      for (int n = 0; n < cfg.recurrent_steps; ++n) {
        ct.add("core_calls", 1);
        ct.add("query_tokens", g);
        ct.add("kv_tokens", cache_len + g);
        long long pairs = 0;
        const long lo_avail = at - cache_len;
        for (long p = at; p < at + g; ++p) {
          const long lo = std::max(lo_avail, p - span + 1);
          pairs += p - lo + 1;
        }
        ct.add("qk_pairs", pairs * n_applications);
        ct.add("ff_tokens", static_cast<long long>(g) * n_applications);
      }
      cache_len = std::min(span - 1, cache_len + g);
      ct.add("emitted_tokens", g);
      ct.add("passes_hist/" + std::to_string(cfg.recurrent_steps), g);
    }
    report.steady_token_pairs = span;
  }
  return report;
}

}  // namespace stair
