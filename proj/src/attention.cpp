#include "sta/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "sta/ops.hpp"

namespace sta {

namespace {
thread_local AttentionTrace* g_trace = nullptr;
thread_local std::vector<int> g_transition_widths;
thread_local std::vector<int> g_standard_widths;
}  // namespace

AttentionTrace* active_trace() { return g_trace; }
void set_active_trace(AttentionTrace* trace) { g_trace = trace; }
std::vector<int>& transition_softmax_widths() { return g_transition_widths; }
std::vector<int>& standard_softmax_widths() { return g_standard_widths; }
void clear_softmax_width_log() {
  g_transition_widths.clear();
  g_standard_widths.clear();
}

void AttentionConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0) {
    throw std::invalid_argument("attention config: d_model and n_heads must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("attention config: d_model " + std::to_string(d_model) +
                                " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_history < 0) {
    throw std::invalid_argument("attention config: max_history must be non-negative");
  }
  if (!(wo_stddev >= 0.0) || !std::isfinite(wo_stddev)) {
    throw std::invalid_argument("attention config: wo_stddev must be finite and non-negative");
  }
}

std::vector<Tensor> same_time_affinity(const TokenBlock& b) {
  std::vector<Tensor> aff;
  aff.reserve(b.q.size());
  for (std::size_t h = 0; h < b.q.size(); ++h) {
    aff.push_back(matmul_nt(b.q[h], b.k[h]));
  }
  return aff;
}

HistoryCache::HistoryCache(int capacity) : capacity_(capacity) {
  if (capacity <= 0) throw std::invalid_argument("history cache: capacity must be positive");
}

void HistoryCache::push(TokenBlock block) {
  if (!entries_.empty() && block.timestep != newest_timestep() + 1) {
    throw std::invalid_argument("cache push: expected timestep " +
                                std::to_string(newest_timestep() + 1) + ", got " +
                                std::to_string(block.timestep));
  }
  Entry e;
  e.affinity = same_time_affinity(block);
  e.block = std::move(block);
  entries_.push_back(std::move(e));
  if (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
}

void HistoryCache::clear() { entries_.clear(); }

int HistoryCache::newest_timestep() const {
  if (entries_.empty()) throw std::logic_error("history cache: empty");
  return entries_.back().block.timestep;
}

RelativePositionTable RelativePositionTable::create(std::mt19937_64& rng, int rows,
                                                   int n_heads, int head_width) {
  RelativePositionTable t;
  t.table = normal_init(rng, {rows, n_heads * head_width});
  t.head_width = head_width;
  return t;
}

Tensor RelativePositionTable::row(int offset, int head) const {
  if (offset < 0 || offset >= rows()) {
    throw std::invalid_argument("position table: offset " + std::to_string(offset) +
                                " outside [0, " + std::to_string(rows() - 1) + "]");
  }
  Tensor r = slice_rows(table, offset, offset + 1);
  return slice_cols(r, head * head_width, (head + 1) * head_width);
}

// ---------------------------------------------------------------------------
// Single-head kernels
// ---------------------------------------------------------------------------

Tensor standard_cross_attention(const Tensor& q_t, const std::vector<Tensor>& keys,
                                const std::vector<Tensor>& values, Tensor* weights_out) {
  if (keys.empty()) throw std::invalid_argument("cross-attention: empty window");
  if (keys.size() != values.size()) {
    throw std::invalid_argument("cross-attention: window holds " +
                                std::to_string(keys.size()) + " key steps but " +
                                std::to_string(values.size()) + " value steps");
  }
  const int d_k = q_t.dim(1);
  Tensor kcat = keys.size() == 1 ? keys[0] : concat_rows(keys);
  Tensor vcat = values.size() == 1 ? values[0] : concat_rows(values);
  Tensor scores = scale(matmul_nt(q_t, kcat), 1.0 / std::sqrt(static_cast<double>(d_k)));
  Tensor w = softmax_rows(scores);
  g_standard_widths.push_back(scores.dim(1));
  if (weights_out) *weights_out = w;
  if (g_trace) {
    AttentionTraceRecord rec;
    rec.layer = g_trace->layer;
    rec.timestep = g_trace->timestep;
    rec.head = g_trace->head;
    rec.m = scores.dim(0);
    rec.n = keys[0].dim(0);
    rec.window = static_cast<int>(keys.size());
    rec.scores = scores.values();
    rec.weights = w.values();
    g_trace->records.push_back(std::move(rec));
  }
  return matmul(w, vcat);
}

Tensor transition_scores(const std::vector<Tensor>& affinities,
                         const std::vector<Tensor>& s_embedded, int d_k,
                         Tensor* transition_out) {
  if (affinities.empty()) throw std::invalid_argument("transition scores: empty window");
  if (affinities.size() != s_embedded.size()) {
    throw std::invalid_argument("transition scores: " + std::to_string(affinities.size()) +
                                " affinities but " + std::to_string(s_embedded.size()) +
                                " state steps");
  }
  const int m = affinities.back().dim(0);
  const int n = affinities.back().dim(1);
  const int d_s = s_embedded.back().dim(1);
  for (std::size_t i = 0; i < affinities.size(); ++i) {
    if (affinities[i].dim(0) != m || affinities[i].dim(1) != n ||
        s_embedded[i].dim(0) != n || s_embedded[i].dim(1) != d_s) {
      throw std::invalid_argument("transition scores: token counts differ across the window at step " +
                                  std::to_string(i));
    }
  }
  const int k = static_cast<int>(affinities.size()) - 1;
  Tensor s_stack = k == 0 ? s_embedded[0] : concat_rows(s_embedded);
  Tensor trans = matmul_nt(s_stack, s_embedded.back());
  Tensor a_cat = k == 0 ? affinities[0] : concat_cols(affinities);
  const double denom =
      std::sqrt(static_cast<double>(d_k) * d_s * std::max(k, 1));
  Tensor z = scale(matmul(a_cat, trans), 1.0 / denom);
  if (transition_out) *transition_out = trans;
  return z;
}

Tensor transition_attention(const std::vector<Tensor>& affinities,
                            const std::vector<Tensor>& s_embedded, const Tensor& v_t,
                            int d_k, Tensor* weights_out) {
  Tensor trans;
  Tensor z = transition_scores(affinities, s_embedded, d_k, &trans);
  if (v_t.dim(0) != z.dim(1)) {
    throw std::invalid_argument("transition attention: " + std::to_string(v_t.dim(0)) +
                                " value rows for " + std::to_string(z.dim(1)) +
                                " state tokens");
  }
  Tensor w = softmax_rows(z);
  g_transition_widths.push_back(z.dim(1));
  if (weights_out) *weights_out = w;
  if (g_trace) {
    AttentionTraceRecord rec;
    rec.layer = g_trace->layer;
    rec.timestep = g_trace->timestep;
    rec.head = g_trace->head;
    rec.m = z.dim(0);
    rec.n = z.dim(1);
    rec.window = static_cast<int>(affinities.size());
    rec.scores = z.values();
    rec.weights = w.values();
    rec.transition = trans.values();
    g_trace->records.push_back(std::move(rec));
  }
  return matmul(w, v_t);
}

Tensor causal_self_attention_single(const Tensor& q, const Tensor& k, const Tensor& v,
                                    int m, int k_cap) {
  if (m <= 0 || q.dim(0) % m != 0) {
    throw std::invalid_argument("self-attention: " + std::to_string(q.dim(0)) +
                                " tokens not divisible by " + std::to_string(m) +
                                " per step");
  }
  const int steps = q.dim(0) / m;
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  std::vector<Tensor> blocks;
  blocks.reserve(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const int w0 = std::max(0, t - k_cap);
    Tensor qs = slice_rows(q, t * m, (t + 1) * m);
    Tensor ks = slice_rows(k, w0 * m, (t + 1) * m);
    Tensor vs = slice_rows(v, w0 * m, (t + 1) * m);
    Tensor w = softmax_rows(scale(matmul_nt(qs, ks), inv));
    blocks.push_back(matmul(w, vs));
  }
  return blocks.size() == 1 ? blocks[0] : concat_rows(blocks);
}

// ---------------------------------------------------------------------------
// Multi-head cross attention
// ---------------------------------------------------------------------------

MultiHeadCrossAttention::MultiHeadCrossAttention(AttentionConfig cfg, Mode mode,
                                                std::mt19937_64& rng)
    : cfg_(cfg), mode_(mode) {
  cfg_.validate();
  wq_ = normal_init(rng, {cfg_.d_model, cfg_.d_model});
  wk_ = normal_init(rng, {cfg_.d_model, cfg_.d_model});
  wv_ = normal_init(rng, {cfg_.d_model, cfg_.d_model});
  if (mode_ == Mode::kStateTransition) {
    ws_ = normal_init(rng, {cfg_.d_model, cfg_.d_model});
  }
  wo_ = normal_init(rng, {cfg_.d_model, cfg_.d_model}, cfg_.wo_stddev);
  const int width = mode_ == Mode::kStateTransition ? cfg_.d_s() : cfg_.d_k();
  pos_ = RelativePositionTable::create(rng, cfg_.max_history + 1, cfg_.n_heads, width);
}

TokenBlock MultiHeadCrossAttention::project(int timestep, const Tensor& x_dec,
                                            const Tensor& x_enc) const {
  TokenBlock b;
  b.timestep = timestep;
  Tensor q = matmul(x_dec, wq_);
  Tensor k = matmul(x_enc, wk_);
  Tensor v = matmul(x_enc, wv_);
  Tensor s;
  if (mode_ == Mode::kStateTransition) s = matmul(x_enc, ws_);
  const int dk = cfg_.d_k(), dv = cfg_.d_v(), ds = cfg_.d_s();
  for (int h = 0; h < cfg_.n_heads; ++h) {
    b.q.push_back(slice_cols(q, h * dk, (h + 1) * dk));
    b.k.push_back(slice_cols(k, h * dk, (h + 1) * dk));
    b.v.push_back(slice_cols(v, h * dv, (h + 1) * dv));
    if (mode_ == Mode::kStateTransition) {
      b.s.push_back(slice_cols(s, h * ds, (h + 1) * ds));
    }
  }
  return b;
}

Tensor MultiHeadCrossAttention::attend(
    const std::vector<const TokenBlock*>& window,
    const std::vector<const std::vector<Tensor>*>& affinities) const {
  const TokenBlock& cur = *window.back();
  const int t = cur.timestep;
  AttentionTrace* tr = active_trace();
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(cfg_.n_heads));
  for (int h = 0; h < cfg_.n_heads; ++h) {
    if (tr) tr->head = h;
    if (mode_ == Mode::kStateTransition) {
      std::vector<Tensor> aff, semb;
      aff.reserve(window.size());
      semb.reserve(window.size());
      for (std::size_t i = 0; i < window.size(); ++i) {
        aff.push_back((*affinities[i])[static_cast<std::size_t>(h)]);
        semb.push_back(add_rowvec(window[i]->s[static_cast<std::size_t>(h)],
                                  pos_.row(t - window[i]->timestep, h)));
      }
      head_outs.push_back(transition_attention(aff, semb, cur.v[static_cast<std::size_t>(h)],
                                               cfg_.d_k()));
    } else {
      std::vector<Tensor> keys, vals;
      keys.reserve(window.size());
      vals.reserve(window.size());
      for (std::size_t i = 0; i < window.size(); ++i) {
        keys.push_back(add_rowvec(window[i]->k[static_cast<std::size_t>(h)],
                                  pos_.row(t - window[i]->timestep, h)));
        vals.push_back(window[i]->v[static_cast<std::size_t>(h)]);
      }
      head_outs.push_back(
          standard_cross_attention(cur.q[static_cast<std::size_t>(h)], keys, vals));
    }
  }
  if (tr) tr->head = -1;
  Tensor cat = head_outs.size() == 1 ? head_outs[0] : concat_cols(head_outs);
  return matmul(cat, wo_);
}

Tensor MultiHeadCrossAttention::forward_streaming(HistoryCache& cache, int timestep,
                                                  const Tensor& x_dec,
                                                  const Tensor& x_enc) const {
  cache.push(project(timestep, x_dec, x_enc));
  std::vector<const TokenBlock*> window;
  std::vector<const std::vector<Tensor>*> affinities;
  window.reserve(static_cast<std::size_t>(cache.size()));
  affinities.reserve(static_cast<std::size_t>(cache.size()));
  for (int i = 0; i < cache.size(); ++i) {
    window.push_back(&cache.block(i));
    affinities.push_back(&cache.affinity(i));
  }
  return attend(window, affinities);
}

std::vector<Tensor> MultiHeadCrossAttention::forward_sequence(
    const std::vector<Tensor>& x_dec, const std::vector<Tensor>& x_enc, int k_cap) const {
  if (x_dec.size() != x_enc.size()) {
    throw std::invalid_argument("cross-attention sequence: " + std::to_string(x_dec.size()) +
                                " decoder steps but " + std::to_string(x_enc.size()) +
                                " state steps");
  }
  if (k_cap < 0 || k_cap > cfg_.max_history) {
    throw std::invalid_argument("cross-attention sequence: history cap " +
                                std::to_string(k_cap) + " outside the position table");
  }
  const int steps = static_cast<int>(x_dec.size());
  AttentionTrace* tr = active_trace();
  std::vector<TokenBlock> blocks;
  std::vector<std::vector<Tensor>> affinities;
  blocks.reserve(static_cast<std::size_t>(steps));
  affinities.reserve(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    blocks.push_back(project(t, x_dec[static_cast<std::size_t>(t)],
                             x_enc[static_cast<std::size_t>(t)]));
    affinities.push_back(same_time_affinity(blocks.back()));
  }
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    if (tr) tr->timestep = t;
    const int w0 = std::max(0, t - k_cap);
    std::vector<const TokenBlock*> window;
    std::vector<const std::vector<Tensor>*> aff;
    for (int i = w0; i <= t; ++i) {
      window.push_back(&blocks[static_cast<std::size_t>(i)]);
      aff.push_back(&affinities[static_cast<std::size_t>(i)]);
    }
    outs.push_back(attend(window, aff));
  }
  return outs;
}

void MultiHeadCrossAttention::collect_params(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".wq", wq_});
  out.push_back({prefix + ".wk", wk_});
  out.push_back({prefix + ".wv", wv_});
  if (mode_ == Mode::kStateTransition) out.push_back({prefix + ".ws", ws_});
  out.push_back({prefix + ".wo", wo_});
  out.push_back({prefix + ".pos", pos_.table});
}

// ---------------------------------------------------------------------------
// Multi-head self attention
// ---------------------------------------------------------------------------

MultiHeadSelfAttention::MultiHeadSelfAttention(AttentionConfig cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  wq_ = normal_init(rng, {cfg_.d_model, cfg_.d_model});
  wk_ = normal_init(rng, {cfg_.d_model, cfg_.d_model});
  wv_ = normal_init(rng, {cfg_.d_model, cfg_.d_model});
  wo_ = normal_init(rng, {cfg_.d_model, cfg_.d_model}, cfg_.wo_stddev);
}

Tensor MultiHeadSelfAttention::forward(const Tensor& tokens, int m, int k_cap) const {
  if (m <= 0 || tokens.dim(0) % m != 0) {
    throw std::invalid_argument("self-attention: " + std::to_string(tokens.dim(0)) +
                                " tokens not divisible by " + std::to_string(m) +
                                " per step");
  }
  Tensor q = matmul(tokens, wq_);
  Tensor k = matmul(tokens, wk_);
  Tensor v = matmul(tokens, wv_);
  const int dk = cfg_.d_k(), dv = cfg_.d_v();
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(cfg_.n_heads));
  for (int h = 0; h < cfg_.n_heads; ++h) {
    head_outs.push_back(causal_self_attention_single(
        slice_cols(q, h * dk, (h + 1) * dk), slice_cols(k, h * dk, (h + 1) * dk),
        slice_cols(v, h * dv, (h + 1) * dv), m, k_cap));
  }
  Tensor cat = head_outs.size() == 1 ? head_outs[0] : concat_cols(head_outs);
  return matmul(cat, wo_);
}

Tensor MultiHeadSelfAttention::forward_streaming(HistoryCache& cache, int timestep,
                                                 const Tensor& tokens) const {
  TokenBlock b;
  b.timestep = timestep;
  Tensor q = matmul(tokens, wq_);
  Tensor k = matmul(tokens, wk_);
  Tensor v = matmul(tokens, wv_);
  const int dk = cfg_.d_k(), dv = cfg_.d_v();
  for (int h = 0; h < cfg_.n_heads; ++h) {
    b.q.push_back(slice_cols(q, h * dk, (h + 1) * dk));
    b.k.push_back(slice_cols(k, h * dk, (h + 1) * dk));
    b.v.push_back(slice_cols(v, h * dv, (h + 1) * dv));
  }
  cache.push(std::move(b));
  const TokenBlock& cur = cache.block(cache.size() - 1);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(cfg_.n_heads));
  for (int h = 0; h < cfg_.n_heads; ++h) {
    std::vector<Tensor> ks, vs;
    ks.reserve(static_cast<std::size_t>(cache.size()));
    vs.reserve(static_cast<std::size_t>(cache.size()));
    for (int i = 0; i < cache.size(); ++i) {
      ks.push_back(cache.block(i).k[static_cast<std::size_t>(h)]);
      vs.push_back(cache.block(i).v[static_cast<std::size_t>(h)]);
    }
    Tensor kcat = ks.size() == 1 ? ks[0] : concat_rows(ks);
    Tensor vcat = vs.size() == 1 ? vs[0] : concat_rows(vs);
    Tensor w = softmax_rows(scale(matmul_nt(cur.q[static_cast<std::size_t>(h)], kcat), inv));
    head_outs.push_back(matmul(w, vcat));
  }
  Tensor cat = head_outs.size() == 1 ? head_outs[0] : concat_cols(head_outs);
  return matmul(cat, wo_);
}

void MultiHeadSelfAttention::collect_params(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".wq", wq_});
  out.push_back({prefix + ".wk", wk_});
  out.push_back({prefix + ".wv", wv_});
  out.push_back({prefix + ".wo", wo_});
}

}  // namespace sta
