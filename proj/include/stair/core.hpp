#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "stair/counters.hpp"
#include "stair/ops.hpp"
#include "stair/optim.hpp"
#include "stair/rng.hpp"
#include "stair/tensor.hpp"
#include "stair/types.hpp"

namespace stair {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct CoreConfig {
  int vocab_size = 0;
  int d_model = 0;
  int n_layers = 0;
  int n_heads = 0;
  int d_ff = 0;
  int r_max = 0;  // relative-position clip radius
  bool tied_embedding = false;
  std::string layer_pattern;  // letters into the layer stack; "" = each once
  double dropout = 0.0;
  double embed_dropout = 0.0;

  int head_dim() const { return d_model / n_heads; }

  std::string resolved_pattern() const {
    if (!layer_pattern.empty()) return layer_pattern;
    std::string p;
    for (int i = 0; i < n_layers; ++i) p.push_back(static_cast<char>('A' + i));
    return p;
  }

  void validate() const {
    if (vocab_size <= 0) throw ConfigError("core: vocab_size must be positive");
    if (d_model <= 0 || n_layers <= 0 || d_ff <= 0) throw ConfigError("core: bad dimensions");
    if (n_heads <= 0 || d_model % n_heads != 0)
      throw ConfigError("core: n_heads=" + std::to_string(n_heads) + " must divide d_model=" +
                        std::to_string(d_model));
    if (r_max < 1) throw ConfigError("core: r_max must be >= 1");
    for (char c : resolved_pattern())
      if (c < 'A' || c >= 'A' + n_layers)
        throw ConfigError(std::string("core: layer pattern letter '") + c +
                          "' references a missing layer (have " + std::to_string(n_layers) + ")");
  }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename S>
struct LayerParams {
  Var<S> ln1_g, ln1_b;          // pre-attention norm
  Var<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Var<S> ln2_g, ln2_b;          // pre-feedforward norm
  Var<S> w1, b1, w2, b2;
};

// The shared Transformer core: f_in embedding, a layer stack applied in
// layer-pattern order, and the f_out projection. Parameter count depends on
// (V, d, L, heads, d_ff, r_max) only; the scheduling knobs N, C, M, S never
// touch it.
template <typename S>
struct Core {
  CoreConfig cfg;
  Var<S> embed;                  // V x d
  Var<S> rel_pos;                // (2 r_max + 1) x head_dim, shared by all heads
  Var<S> final_ln_g, final_ln_b;
  Var<S> out_proj;               // d x V, absent when tied to the embedding
  Var<S> out_bias;               // 1 x V
  std::vector<LayerParams<S>> layers;

  std::vector<std::pair<std::string, Var<S>*>> named_params() {
    std::vector<std::pair<std::string, Var<S>*>> out;
    out.emplace_back("embed", &embed);
    out.emplace_back("rel_pos", &rel_pos);
    for (size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const std::string p = "layer" + std::to_string(i) + "/";
      out.emplace_back(p + "ln1_g", &l.ln1_g);
      out.emplace_back(p + "ln1_b", &l.ln1_b);
      out.emplace_back(p + "wq", &l.wq);
      out.emplace_back(p + "bq", &l.bq);
      out.emplace_back(p + "wk", &l.wk);
      out.emplace_back(p + "bk", &l.bk);
      out.emplace_back(p + "wv", &l.wv);
      out.emplace_back(p + "bv", &l.bv);
      out.emplace_back(p + "wo", &l.wo);
      out.emplace_back(p + "bo", &l.bo);
      out.emplace_back(p + "ln2_g", &l.ln2_g);
      out.emplace_back(p + "ln2_b", &l.ln2_b);
      out.emplace_back(p + "w1", &l.w1);
      out.emplace_back(p + "b1", &l.b1);
      out.emplace_back(p + "w2", &l.w2);
      out.emplace_back(p + "b2", &l.b2);
    }
    out.emplace_back("final_ln_g", &final_ln_g);
    out.emplace_back("final_ln_b", &final_ln_b);
    if (!cfg.tied_embedding) out.emplace_back("out_proj", &out_proj);
    out.emplace_back("out_bias", &out_bias);
    return out;
  }

  std::vector<ParamRef<S>> param_refs() {
    std::vector<ParamRef<S>> out;
    for (auto& [name, v] : named_params()) out.push_back({name, &v->mutable_value()});
    return out;
  }

  std::vector<Var<S>> param_leaves() {
    std::vector<Var<S>> out;
    for (auto& [name, v] : named_params()) out.push_back(*v);
    return out;
  }

  long param_count() {
    long n = 0;
    for (auto& [name, v] : named_params()) n += static_cast<long>(v->value().size());
    return n;
  }

  void zero_grads() {
    for (auto& [name, v] : named_params()) v->zero_grad();
  }

  std::vector<Mat<S>> grads() {
    std::vector<Mat<S>> out;
    for (auto& [name, v] : named_params()) out.push_back(v->grad());
    return out;
  }

  // Deep copy with fresh leaf storage (worker replicas).
  Core clone() {
    Core out;
    out.cfg = cfg;
    out.embed = Var<S>::leaf(embed.value());
    out.rel_pos = Var<S>::leaf(rel_pos.value());
    out.final_ln_g = Var<S>::leaf(final_ln_g.value());
    out.final_ln_b = Var<S>::leaf(final_ln_b.value());
    if (!cfg.tied_embedding) out.out_proj = Var<S>::leaf(out_proj.value());
    out.out_bias = Var<S>::leaf(out_bias.value());
    out.layers.resize(layers.size());
    auto src = named_params();
    auto dst = out.named_params();
    for (size_t i = 0; i < src.size(); ++i) *dst[i].second = Var<S>::leaf(src[i].second->value());
    return out;
  }

  void load_values(Core& from) {
    auto src = from.named_params();
    auto dst = named_params();
    for (size_t i = 0; i < src.size(); ++i) dst[i].second->mutable_value() = src[i].second->value();
  }
};

namespace detail {

template <typename S>
Mat<S> uniform_fan_in(Index rows, Index cols, Rng& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(rows));
  Mat<S> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<S>(rng.uniform_range(-a, a));
  return m;
}

template <typename S>
Mat<S> normal_scaled(Index rows, Index cols, double std, Rng& rng) {
  Mat<S> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<S>(rng.normal() * std);
  return m;
}

}  // namespace detail

template <typename S>
Core<S> make_core(const CoreConfig& cfg, uint64_t seed) {
  cfg.validate();
  Core<S> core;
  core.cfg = cfg;
  const Index d = cfg.d_model;
  const Index v = cfg.vocab_size;
  const Index dh = cfg.head_dim();

  auto stream = [&](const std::string& name) { return Rng(seed, "init/" + name); };
  {
    Rng r = stream("embed");
    core.embed = Var<S>::leaf(detail::normal_scaled<S>(v, d, 1.0 / std::sqrt(double(d)), r));
  }
  {
    Rng r = stream("rel_pos");
    core.rel_pos = Var<S>::leaf(detail::normal_scaled<S>(2 * cfg.r_max + 1, dh, 0.02, r));
  }
  core.final_ln_g = Var<S>::leaf(Mat<S>::Ones(1, d));
  core.final_ln_b = Var<S>::leaf(Mat<S>::Zero(1, d));
  if (!cfg.tied_embedding) {
    Rng r = stream("out_proj");
    core.out_proj = Var<S>::leaf(detail::uniform_fan_in<S>(d, v, r));
  }
  core.out_bias = Var<S>::leaf(Mat<S>::Zero(1, v));

  core.layers.resize(cfg.n_layers);
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto& l = core.layers[i];
    const std::string p = "layer" + std::to_string(i) + "/";
    l.ln1_g = Var<S>::leaf(Mat<S>::Ones(1, d));
    l.ln1_b = Var<S>::leaf(Mat<S>::Zero(1, d));
    Rng rq = stream(p + "wq"), rk = stream(p + "wk"), rv = stream(p + "wv"), ro = stream(p + "wo");
    l.wq = Var<S>::leaf(detail::uniform_fan_in<S>(d, d, rq));
    l.wk = Var<S>::leaf(detail::uniform_fan_in<S>(d, d, rk));
    l.wv = Var<S>::leaf(detail::uniform_fan_in<S>(d, d, rv));
    l.wo = Var<S>::leaf(detail::uniform_fan_in<S>(d, d, ro));
    l.bq = Var<S>::leaf(Mat<S>::Zero(1, d));
    l.bk = Var<S>::leaf(Mat<S>::Zero(1, d));
    l.bv = Var<S>::leaf(Mat<S>::Zero(1, d));
    l.bo = Var<S>::leaf(Mat<S>::Zero(1, d));
    l.ln2_g = Var<S>::leaf(Mat<S>::Ones(1, d));
    l.ln2_b = Var<S>::leaf(Mat<S>::Zero(1, d));
    Rng r1 = stream(p + "w1"), r2 = stream(p + "w2");
    l.w1 = Var<S>::leaf(detail::uniform_fan_in<S>(d, cfg.d_ff, r1));
    l.b1 = Var<S>::leaf(Mat<S>::Zero(1, cfg.d_ff));
    l.w2 = Var<S>::leaf(detail::uniform_fan_in<S>(cfg.d_ff, d, r2));
    l.b2 = Var<S>::leaf(Mat<S>::Zero(1, d));
  }
  return core;
}

// ---------------------------------------------------------------------------
// Forward context and masks
// ---------------------------------------------------------------------------

template <typename S>
struct CoreProbe {
  bool capture_attn = false;
  std::vector<Mat<S>> attn;  // one entry per (application, head), batch lane 0
};

template <typename S>
struct ForwardCtx {
  bool training = false;
  Rng* rng = nullptr;  // dropout stream, required when training with dropout
  Counters* counters = nullptr;
  CoreProbe<S>* probe = nullptr;
};

// Causal allow mask over absolute positions: query p sees key p' iff
// p' <= p and, with a finite span, p - p' < span.
inline MaskMat causal_mask(const std::vector<long>& q_pos, const std::vector<long>& k_pos,
                           long span = 0) {
  MaskMat m(static_cast<Index>(q_pos.size()), static_cast<Index>(k_pos.size()));
  for (size_t i = 0; i < q_pos.size(); ++i)
    for (size_t j = 0; j < k_pos.size(); ++j) {
      const bool ok = k_pos[j] <= q_pos[i] && (span <= 0 || q_pos[i] - k_pos[j] < span);
      m(static_cast<Index>(i), static_cast<Index>(j)) = ok ? 1 : 0;
    }
  return m;
}

inline long long mask_allowed_pairs(const MaskMat& m) {
  long long n = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) n += m(i, j);
  return n;
}

// Relative offset table index: clip(p_q - p_k, -r, r) + r.
inline IdxMat rel_index(const std::vector<long>& q_pos, const std::vector<long>& k_pos, int r_max) {
  IdxMat idx(static_cast<Index>(q_pos.size()), static_cast<Index>(k_pos.size()));
  for (size_t i = 0; i < q_pos.size(); ++i)
    for (size_t j = 0; j < k_pos.size(); ++j) {
      long diff = q_pos[i] - k_pos[j];
      if (diff > r_max) diff = r_max;
      if (diff < -r_max) diff = -r_max;
      idx(static_cast<Index>(i), static_cast<Index>(j)) = static_cast<int>(diff + r_max);
    }
  return idx;
}

// ---------------------------------------------------------------------------
// Sublayers and the core stack
// ---------------------------------------------------------------------------

// Token embedding scaled by sqrt(d), with embedding dropout in training.
template <typename S>
Var<S> f_in(Core<S>& core, const std::vector<int>& ids, ForwardCtx<S>& ctx) {
  Var<S> h = embedding_lookup(core.embed, ids);
  h = scale(h, static_cast<S>(std::sqrt(double(core.cfg.d_model))));
  if (ctx.training && core.cfg.embed_dropout > 0.0)
    h = dropout(h, core.cfg.embed_dropout, *ctx.rng, true);
  return h;
}

// Pre-norm multi-head attention over [kv_prefix ; x]. The prefix (cached or
// frozen states) supplies keys and values only; queries and the residual
// come from x. Both x and the prefix are B stacked lanes of equal length.
// Returns x + dropout(attn_out), shape of x.
template <typename S>
Var<S> self_attention_sublayer(const LayerParams<S>& l, const Var<S>& rel_table, Var<S> x,
                               Index batch, const Var<S>& prefix, const MaskMat& mask,
                               const IdxMat& rel_idx, int n_heads, double p_drop,
                               ForwardCtx<S>& ctx) {
  const Index tq = x.rows() / batch;
  const Index tp = prefix.defined() ? prefix.rows() / batch : 0;
  const Index tk = tp + tq;
  if (mask.rows() != tq || mask.cols() != tk)
    throw ShapeError("self_attention_sublayer: mask " + shape_str(mask.rows(), mask.cols()) +
                     " for q=" + std::to_string(tq) + " k=" + std::to_string(tk));
  for (Index i = 0; i < mask.rows(); ++i)
    if (!mask.row(i).any())
      throw MaskError("self_attention_sublayer: query row " + std::to_string(i) +
                      " has no allowed keys");

  const Index d = x.cols();
  const Index dh = d / n_heads;

  Var<S> normed_q = layer_norm(x, l.ln1_g, l.ln1_b);
  Var<S> normed_kv = normed_q;
  if (tp > 0) {
    Var<S> normed_p = layer_norm(prefix, l.ln1_g, l.ln1_b);
    // Rebuild per-lane [prefix ; x] ordering.
    std::vector<Var<S>> parts;
    parts.reserve(2 * batch);
    for (Index b = 0; b < batch; ++b) {
      parts.push_back(slice_rows(normed_p, b * tp, tp));
      parts.push_back(slice_rows(normed_q, b * tq, tq));
    }
    normed_kv = concat_rows(parts);
  }

  Var<S> q = add_rowvec(matmul(normed_q, l.wq), l.bq);
  Var<S> k = add_rowvec(matmul(normed_kv, l.wk), l.bk);
  Var<S> v = add_rowvec(matmul(normed_kv, l.wv), l.bv);

  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(double(dh)));
  std::vector<Var<S>> lane_outs;
  lane_outs.reserve(batch);
  for (Index b = 0; b < batch; ++b) {
    Var<S> qb = slice_rows(q, b * tq, tq);
    Var<S> kb = slice_rows(k, b * tk, tk);
    Var<S> vb = slice_rows(v, b * tk, tk);
    std::vector<Var<S>> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
      Var<S> qh = slice_cols(qb, h * dh, dh);
      Var<S> kh = slice_cols(kb, h * dh, dh);
      Var<S> vh = slice_cols(vb, h * dh, dh);
      Var<S> content = matmul_nt(qh, kh);
      Var<S> rel = gather_rel(matmul_nt(qh, rel_table), rel_idx);
      Var<S> scores = scale(add(content, rel), inv_sqrt_dh);
      Var<S> alpha = softmax_rows(scores, mask);
      if (ctx.probe && ctx.probe->capture_attn && b == 0) ctx.probe->attn.push_back(alpha.value());
      if (ctx.training && p_drop > 0.0) alpha = dropout(alpha, p_drop, *ctx.rng, true);
      heads.push_back(matmul(alpha, vh));
    }
    lane_outs.push_back(concat_cols(heads));
  }
  Var<S> merged = batch == 1 ? lane_outs[0] : concat_rows(lane_outs);
  Var<S> attn = add_rowvec(matmul(merged, l.wo), l.bo);
  if (ctx.training && p_drop > 0.0) attn = dropout(attn, p_drop, *ctx.rng, true);
  if (ctx.counters) ctx.counters->add("qk_pairs", mask_allowed_pairs(mask));
  return add(x, attn);
}

// Pre-norm position-wise feedforward: x + dropout(W2 relu(W1 ln(x))).
// Counter semantics are per batch lane, like the cost model.
template <typename S>
Var<S> feedforward_sublayer(const LayerParams<S>& l, Var<S> x, Index batch, double p_drop,
                            ForwardCtx<S>& ctx) {
  Var<S> n = layer_norm(x, l.ln2_g, l.ln2_b);
  Var<S> h = relu(add_rowvec(matmul(n, l.w1), l.b1));
  Var<S> y = add_rowvec(matmul(h, l.w2), l.b2);
  if (ctx.training && p_drop > 0.0) y = dropout(y, p_drop, *ctx.rng, true);
  if (ctx.counters) ctx.counters->add("ff_tokens", x.rows() / batch);
  return add(x, y);
}

inline std::vector<long> cat_positions(const std::vector<long>& a, const std::vector<long>& b) {
  std::vector<long> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// Per-layer-application key/value memory for segment-recurrent (XL-style)
// processing. Slot j belongs to the j-th application in the layer pattern;
// states are value-only (gradient-detached at the segment boundary).
template <typename S>
struct XlCache {
  struct Slot {
    Var<S> states;            // (B * t) x d, lanes stacked
    std::vector<long> pos;    // shared across lanes
  };
  std::vector<Slot> slots;
  long keep = 0;  // retain this many trailing tokens (span - 1)
};

template <typename S>
void append_xl_slot(typename XlCache<S>::Slot& slot, Var<S> states, Index batch,
                    const std::vector<long>& pos, long keep) {
  if (keep <= 0) {  // span 1 means self-attention only, nothing to retain
    slot.states = Var<S>();
    slot.pos.clear();
    return;
  }
  std::vector<long> merged_pos;
  Var<S> merged;
  if (!slot.states.defined()) {
    merged = states;
    merged_pos = pos;
  } else {
    const Index t_old = static_cast<Index>(slot.pos.size());
    const Index t_new = static_cast<Index>(pos.size());
    std::vector<Var<S>> parts;
    parts.reserve(2 * batch);
    for (Index b = 0; b < batch; ++b) {
      parts.push_back(slice_rows(slot.states, b * t_old, t_old));
      parts.push_back(slice_rows(states, b * t_new, t_new));
    }
    merged = concat_rows(parts);
    merged_pos = cat_positions(slot.pos, pos);
  }
  const long t = static_cast<long>(merged_pos.size());
  if (keep > 0 && t > keep) {
    const Index drop = static_cast<Index>(t - keep);
    std::vector<Var<S>> parts;
    parts.reserve(batch);
    for (Index b = 0; b < batch; ++b)
      parts.push_back(slice_rows(merged, b * t + drop, static_cast<Index>(keep)));
    merged = batch == 1 ? parts[0] : concat_rows(parts);
    merged_pos.erase(merged_pos.begin(), merged_pos.begin() + drop);
  }
  slot.states = merged.detach();
  slot.pos = std::move(merged_pos);
}

// One application of the full layer stack in pattern order.
//
// new_block: (B*t) x d token states entering the stack, lanes stacked.
// frozen:    optional constant kv prefix (cached chunks), same at every
//            layer, never recomputed, no gradient.
// xl:        optional per-application kv cache; appended to in place.
// span:      attention span limit (0 = unbounded within the visible window).
// Returns states at full depth (no final norm; that belongs to f_out).
template <typename S>
Var<S> trans_core(Core<S>& core, Var<S> new_block, Index batch, const std::vector<long>& q_pos,
                  const Var<S>& frozen, const std::vector<long>& frozen_pos, long span,
                  XlCache<S>* xl, ForwardCtx<S>& ctx) {
  const std::string pattern = core.cfg.resolved_pattern();
  if (ctx.counters) {
    ctx.counters->add("core_calls", 1);
    ctx.counters->add("query_tokens", static_cast<long long>(q_pos.size()));
  }
  Var<S> x = new_block;
  for (size_t j = 0; j < pattern.size(); ++j) {
    LayerParams<S>& layer = core.layers[pattern[j] - 'A'];
    Var<S> prefix = frozen;
    std::vector<long> prefix_pos = frozen_pos;
    if (xl) {
      if (xl->slots.size() != pattern.size()) xl->slots.resize(pattern.size());
      auto& slot = xl->slots[j];
      if (slot.states.defined()) {
        prefix = slot.states;
        prefix_pos = slot.pos;
      }
    }
    MaskMat mask = causal_mask(q_pos, cat_positions(prefix_pos, q_pos), span);
    IdxMat ridx = rel_index(q_pos, cat_positions(prefix_pos, q_pos), core.cfg.r_max);
    if (ctx.counters && j == 0)
      ctx.counters->add("kv_tokens", static_cast<long long>(prefix_pos.size() + q_pos.size()));
    if (ctx.counters && ctx.counters->trace_layers) ctx.counters->layer_order.push_back(pattern[j]);

    Var<S> x_in = x;  // the states XL memory keeps for this application
    x = self_attention_sublayer(layer, core.rel_pos, x, batch, prefix, mask, ridx,
                                core.cfg.n_heads, core.cfg.dropout, ctx);
    x = feedforward_sublayer(layer, x, batch, core.cfg.dropout, ctx);
    if (xl) append_xl_slot<S>(xl->slots[j], x_in.detach(), batch, q_pos, xl->keep);
  }
  return x;
}

// Final layer norm plus vocabulary projection (tied = embedding transpose).
template <typename S>
Var<S> f_out(Core<S>& core, const Var<S>& h) {
  Var<S> n = layer_norm(h, core.final_ln_g, core.final_ln_b);
  Var<S> logits = core.cfg.tied_embedding ? matmul_nt(n, core.embed) : matmul(n, core.out_proj);
  return add_rowvec(logits, core.out_bias);
}

}  // namespace stair
