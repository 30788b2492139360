#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "sta/nn.hpp"
#include "sta/tensor.hpp"

namespace sta {

struct AttentionConfig {
  int d_model = 512;
  int n_heads = 8;
  int max_history = 15;  // k_max: window spans up to max_history+1 timesteps
  // Spread of the output projection at init. Small values keep a residual
  // branch quiet at the start without pinching off its upstream gradients
  // the way an exact zero would.
  double wo_stddev = 0.02;

  int d_k() const { return d_model / n_heads; }
  int d_s() const { return d_model / n_heads; }
  int d_v() const { return d_model / n_heads; }
  void validate() const;
};

// One timestep's projections, split per head. `s` stays raw in the cache; the
// relative-offset embedding is added at attention time, once the offset to the
// current step is known.
struct TokenBlock {
  int timestep = 0;
  std::vector<Tensor> q;  // per head, m x d_k
  std::vector<Tensor> k;  // per head, n x d_k
  std::vector<Tensor> v;  // per head, n x d_v
  std::vector<Tensor> s;  // per head, n x d_s; empty outside the transition path
};

// A_t = Q_t K_t^T per head, computed once while t is the current step.
std::vector<Tensor> same_time_affinity(const TokenBlock& b);

class HistoryCache {
 public:
  explicit HistoryCache(int capacity);

  // Stores the block and its same-time affinity; evicts oldest past capacity.
  void push(TokenBlock block);
  void clear();

  int size() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }
  int capacity() const { return capacity_; }
  int newest_timestep() const;
  const TokenBlock& block(int i) const { return entries_[static_cast<std::size_t>(i)].block; }
  const std::vector<Tensor>& affinity(int i) const {
    return entries_[static_cast<std::size_t>(i)].affinity;
  }

 private:
  struct Entry {
    TokenBlock block;
    std::vector<Tensor> affinity;
  };
  int capacity_;
  std::deque<Entry> entries_;
};

// Learned embedding per temporal offset delta = t - tau in [0, rows-1], all
// heads packed along columns.
struct RelativePositionTable {
  Tensor table;        // rows x (n_heads * head_width)
  int head_width = 0;

  static RelativePositionTable create(std::mt19937_64& rng, int rows, int n_heads,
                                      int head_width);
  Tensor row(int offset, int head) const;  // 1 x head_width
  int rows() const { return table.numel() ? table.dim(0) : 0; }
};

// ---------------------------------------------------------------------------
// Instrumentation
// ---------------------------------------------------------------------------

struct AttentionTraceRecord {
  int layer = -1;
  int timestep = -1;
  int head = -1;
  int m = 0;
  int n = 0;
  int window = 0;               // timesteps attended over
  std::vector<double> scores;      // pre-softmax, m x n (transition) or m x window*n
  std::vector<double> weights;     // post-softmax, same shape as scores
  std::vector<double> transition;  // stacked S~_tau S~_t^T, window*n x n; empty for Eq.-1 path
};

struct AttentionTrace {
  std::vector<AttentionTraceRecord> records;
  // Context stamped by the enclosing layer/step loop before kernels run.
  int layer = -1;
  int timestep = -1;
  int head = -1;
};

AttentionTrace* active_trace();
void set_active_trace(AttentionTrace* trace);

// Per-call softmax input widths, logged by the two cross-attention kernels.
std::vector<int>& transition_softmax_widths();
std::vector<int>& standard_softmax_widths();
void clear_softmax_width_log();

// ---------------------------------------------------------------------------
// Single-head kernels
// ---------------------------------------------------------------------------

// Softmax(q_t K_window^T / sqrt(d_k)) V_window over the flattened window.
// keys/values are ordered oldest to current and already carry their offset
// embeddings.
Tensor standard_cross_attention(const Tensor& q_t, const std::vector<Tensor>& keys,
                                const std::vector<Tensor>& values,
                                Tensor* weights_out = nullptr);

// Z = sum_tau A_tau (S~_tau S~_t^T) / sqrt(d_k d_s max(k,1)) for the current
// step; affinities and embedded transition tokens ordered oldest to current,
// current last.
Tensor transition_scores(const std::vector<Tensor>& affinities,
                         const std::vector<Tensor>& s_embedded, int d_k,
                         Tensor* transition_out = nullptr);

// Row-softmax of the transition scores applied to the current step's values:
// the softmax spans n columns regardless of history length.
Tensor transition_attention(const std::vector<Tensor>& affinities,
                            const std::vector<Tensor>& s_embedded, const Tensor& v_t,
                            int d_k, Tensor* weights_out = nullptr);

// Causal at timestep granularity: rows of step tau attend to all m tokens of
// steps in [max(0, tau - k_cap), tau]. q, k, v are [(T*m) x d], time-major.
Tensor causal_self_attention_single(const Tensor& q, const Tensor& k, const Tensor& v,
                                    int m, int k_cap);

// ---------------------------------------------------------------------------
// Multi-head wrappers
// ---------------------------------------------------------------------------

class MultiHeadCrossAttention {
 public:
  enum class Mode { kStateTransition, kStandard };

  MultiHeadCrossAttention(AttentionConfig cfg, Mode mode, std::mt19937_64& rng);

  // Projects one step's decoder tokens (m x d_model) and state tokens
  // (n x d_model) into per-head blocks.
  TokenBlock project(int timestep, const Tensor& x_dec, const Tensor& x_enc) const;

  // Streaming step: push the projected block, attend over the cached window.
  Tensor forward_streaming(HistoryCache& cache, int timestep, const Tensor& x_dec,
                           const Tensor& x_enc) const;

  // Whole-trajectory path: per-step outputs, each step attending over its own
  // trailing window of at most k_cap past steps.
  std::vector<Tensor> forward_sequence(const std::vector<Tensor>& x_dec,
                                       const std::vector<Tensor>& x_enc,
                                       int k_cap) const;

  void collect_params(const std::string& prefix, ParamList& out) const;
  const AttentionConfig& config() const { return cfg_; }
  Mode mode() const { return mode_; }

 private:
  Tensor attend(const std::vector<const TokenBlock*>& window,
                const std::vector<const std::vector<Tensor>*>& affinities) const;

  AttentionConfig cfg_;
  Mode mode_;
  Tensor wq_, wk_, wv_, ws_, wo_;   // d_model x d_model; ws_ unused in standard mode
  RelativePositionTable pos_;       // offsets into s (transition) or k (standard)
};

class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention(AttentionConfig cfg, std::mt19937_64& rng);

  // Time-parallel causal pass over [(T*m) x d_model] time-major tokens.
  Tensor forward(const Tensor& tokens, int m, int k_cap) const;

  // Streaming step over a decoder-token cache (blocks carry q/k/v only).
  Tensor forward_streaming(HistoryCache& cache, int timestep, const Tensor& tokens) const;

  void collect_params(const std::string& prefix, ParamList& out) const;

 private:
  AttentionConfig cfg_;
  Tensor wq_, wk_, wv_, wo_;
};

}  // namespace sta
