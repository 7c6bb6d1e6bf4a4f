#pragma once

// Attention as a non-local operation: the generic double-loop form, scaled
// dot-product attention, multi-head wrappers, and co-attention whose V/K/Q
// gates are routed to one of two input channels.

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "thm/graph.hpp"

namespace thm {

enum class Channel { Left, Right };

/// Which channel feeds each gate of one attention branch.
struct GateRouting {
  Channel v_source = Channel::Left;
  Channel k_source = Channel::Left;
  Channel q_source = Channel::Left;

  static GateRouting all(Channel c) { return {c, c, c}; }
  friend bool operator==(const GateRouting&, const GateRouting&) = default;
};

/// Left branch keeps its own V and K and queries with the right channel;
/// the right branch mirrors it.
std::pair<GateRouting, GateRouting> crossed_routing();

class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t n_q, std::size_t n_k);

  std::size_t n_q() const noexcept { return n_q_; }
  std::size_t n_k() const noexcept { return n_k_; }
  bool disallowed(std::size_t i, std::size_t j) const { return bits_[i * n_k_ + j] != 0; }
  void disallow(std::size_t i, std::size_t j) { bits_[i * n_k_ + j] = 1; }
  std::size_t count_disallowed() const;

  /// Throws MaskError naming the first query row with no allowed key.
  void validate() const;

  /// Disallows keys at positions >= valid_keys.
  static AttentionMask key_padding(std::size_t n_q, std::size_t n_k, std::size_t valid_keys);
  /// Elementwise union of disallowed sets.
  AttentionMask& merge(const AttentionMask& other);

 private:
  std::size_t n_q_ = 0;
  std::size_t n_k_ = 0;
  std::vector<unsigned char> bits_;
};

/// disallowed(i, j) = j > i
AttentionMask causal_mask(std::size_t n);

/// Score assigned to disallowed positions before the softmax.
inline constexpr double kMaskedScore = -1e9;

// ---- generic non-local operation ----------------------------------------

using PairwiseFn = std::function<double(std::span<const double> q, std::span<const double> k)>;
using UnaryFn = std::function<std::vector<double>(std::span<const double> v)>;
using NormalizerFn = std::function<double(std::span<const double> q, const Tensor& keys)>;

/// y_i = 1 / C(q_i, K) * sum_j f(q_i, k_j) g(v_j), evaluated as a direct
/// double loop.
Tensor nonlocal_op(const Tensor& queries, const Tensor& keys, const Tensor& values,
                   const PairwiseFn& f, const UnaryFn& g, const NormalizerFn& normalizer);

// ---- dot-product attention ----------------------------------------------

struct AttentionHeadParams {
  Tensor w_q;  // d × d_k
  Tensor w_k;  // d × d_k
  Tensor w_v;  // d × d_v
};

/// How flattened (batch·length) × width inputs split into sequences and heads.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t n_q = 0;
  std::size_t n_k = 0;
  std::size_t heads = 1;
};

/// softmax(mask(scale · Q Kᵀ)) V per (sequence, head) on already projected
/// inputs. `masks` is empty, a single mask shared by the batch, or one per
/// sequence.
Var attend(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout,
           std::span<const AttentionMask> masks, double score_scale);

/// softmax((Q W^Q)(K W^K)ᵀ / √d_k) (V W^V); the 1/√d_k factor only when `scale`.
Var scaled_dot_attention(const Var& queries, const Var& keys, const Var& values, const Var& w_q,
                         const Var& w_k, const Var& w_v, const AttentionMask* mask, bool scale);
Tensor scaled_dot_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const AttentionHeadParams& params, const AttentionMask* mask,
                            bool scale);

/// Multi-head attention with head projections stored side by side: columns
/// [h·d_k, (h+1)·d_k) of w_q/w_k/w_v belong to head h.
struct MultiHeadParams {
  Var w_q;
  Var w_k;
  Var w_v;
  Var w_o;
  std::size_t n_heads = 1;

  std::size_t width() const { return w_q.value().rows(); }
  AttentionHeadParams head(std::size_t h) const;
  static MultiHeadParams from_heads(std::span<const AttentionHeadParams> heads, Tensor w_o);
};

/// Concatenated per-head attention outputs projected by w_o.
/// Inputs are (batch·n_q) × d and (batch·n_k) × d.
Var multi_head(const Var& queries, const Var& keys, const Var& values, const MultiHeadParams& params,
               std::size_t batch, std::span<const AttentionMask> masks, bool scale = true);
Tensor multi_head(const Tensor& queries, const Tensor& keys, const Tensor& values,
                  std::span<const AttentionHeadParams> heads, const Tensor& w_o,
                  const AttentionMask* mask);

// ---- co-attention ----------------------------------------------------------

struct ChannelPair {
  Var left;
  Var right;
  std::size_t left_len = 0;   // per-sequence length of the left channel
  std::size_t right_len = 0;  // per-sequence length of the right channel
  std::size_t batch = 1;
};

struct CoAttentionMasks {
  std::span<const AttentionMask> left;
  std::span<const AttentionMask> right;
};

/// Two attention branches with independent parameters whose gates draw from
/// the channels selected by `alpha` (left branch) and `beta` (right branch).
/// Each output has the length of its branch's query source.
std::pair<Var, Var> coattention(const ChannelPair& inputs, const GateRouting& alpha,
                                const GateRouting& beta, const MultiHeadParams& left_params,
                                const MultiHeadParams& right_params,
                                const CoAttentionMasks& masks = {});

}  // namespace thm
