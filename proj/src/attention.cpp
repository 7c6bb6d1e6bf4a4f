#include "thm/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "graph_detail.hpp"
#include "thm/errors.hpp"

namespace thm {

using detail::ConstStridedMap;
using detail::grad_of;
using detail::make_result;
using detail::Node;
using detail::RowMat;
using detail::StridedMap;

std::pair<GateRouting, GateRouting> crossed_routing() {
  const GateRouting alpha{Channel::Left, Channel::Left, Channel::Right};
  const GateRouting beta{Channel::Right, Channel::Right, Channel::Left};
  return {alpha, beta};
}

AttentionMask::AttentionMask(std::size_t n_q, std::size_t n_k)
    : n_q_(n_q), n_k_(n_k), bits_(n_q * n_k, 0) {}

std::size_t AttentionMask::count_disallowed() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
}

void AttentionMask::validate() const {
  for (std::size_t i = 0; i < n_q_; ++i) {
    bool any_allowed = false;
    for (std::size_t j = 0; j < n_k_ && !any_allowed; ++j) any_allowed = !disallowed(i, j);
    if (!any_allowed) {
      throw MaskError("attention mask disallows every key for query row " + std::to_string(i));
    }
  }
}

AttentionMask AttentionMask::key_padding(std::size_t n_q, std::size_t n_k, std::size_t valid_keys) {
  AttentionMask m(n_q, n_k);
  for (std::size_t i = 0; i < n_q; ++i) {
    for (std::size_t j = valid_keys; j < n_k; ++j) m.disallow(i, j);
  }
  return m;
}

AttentionMask& AttentionMask::merge(const AttentionMask& other) {
  if (other.n_q_ != n_q_ || other.n_k_ != n_k_) {
    throw ShapeError("cannot merge attention masks of different shapes");
  }
  for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] |= other.bits_[i];
  return *this;
}

AttentionMask causal_mask(std::size_t n) {
  AttentionMask m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m.disallow(i, j);
  }
  return m;
}

Tensor nonlocal_op(const Tensor& queries, const Tensor& keys, const Tensor& values,
                   const PairwiseFn& f, const UnaryFn& g, const NormalizerFn& normalizer) {
  require_matrix(queries, "nonlocal_op");
  require_matrix(keys, "nonlocal_op");
  require_matrix(values, "nonlocal_op");
  if (keys.rows() != values.rows()) {
    throw ShapeError("nonlocal_op: keys " + shape_str(keys.shape()) + " and values " +
                     shape_str(values.shape()) + " differ in length");
  }
  std::vector<std::vector<double>> gv;
  gv.reserve(values.rows());
  for (std::size_t j = 0; j < values.rows(); ++j) gv.push_back(g(values.row(j)));
  const std::size_t width = gv.empty() ? 0 : gv.front().size();

  Tensor out({queries.rows(), width});
  for (std::size_t i = 0; i < queries.rows(); ++i) {
    const double c = normalizer(queries.row(i), keys);
    if (c == 0.0) {
      throw NormalizerError("nonlocal_op: normalizer is zero for row " + std::to_string(i));
    }
    for (std::size_t j = 0; j < keys.rows(); ++j) {
      const double w = f(queries.row(i), keys.row(j));
      for (std::size_t c2 = 0; c2 < width; ++c2) out(i, c2) += w * gv[j][c2];
    }
    for (std::size_t c2 = 0; c2 < width; ++c2) out(i, c2) /= c;
  }
  return out;
}

namespace {

const AttentionMask* mask_for(std::span<const AttentionMask> masks, std::size_t b) {
  if (masks.empty()) return nullptr;
  return masks.size() == 1 ? &masks[0] : &masks[b];
}

}  // namespace

Var attend(const Var& q, const Var& k, const Var& v, const AttentionLayout& layout,
           std::span<const AttentionMask> masks, double score_scale) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix(qv, "attend");
  require_matrix(kv, "attend");
  require_matrix(vv, "attend");
  const std::size_t B = layout.batch;
  const std::size_t nq = layout.n_q;
  const std::size_t nk = layout.n_k;
  const std::size_t H = layout.heads;
  const std::size_t d = qv.cols();
  const std::size_t dv = vv.cols();
  if (H == 0 || d % H != 0 || dv % H != 0) {
    throw ShapeError("attend: widths " + std::to_string(d) + "/" + std::to_string(dv) +
                     " do not split into " + std::to_string(H) + " heads");
  }
  if (qv.rows() != B * nq || kv.rows() != B * nk || vv.rows() != B * nk || kv.cols() != d) {
    throw ShapeError("attend: inputs Q" + shape_str(qv.shape()) + " K" + shape_str(kv.shape()) +
                     " V" + shape_str(vv.shape()) + " do not match batch " + std::to_string(B) +
                     ", n_q " + std::to_string(nq) + ", n_k " + std::to_string(nk));
  }
  if (!masks.empty() && masks.size() != 1 && masks.size() != B) {
    throw ShapeError("attend: expected 0, 1 or " + std::to_string(B) + " masks, got " +
                     std::to_string(masks.size()));
  }
  for (const auto& m : masks) {
    if (m.n_q() != nq || m.n_k() != nk) {
      throw ShapeError("attend: mask is " + std::to_string(m.n_q()) + "x" +
                       std::to_string(m.n_k()) + ", expected " + std::to_string(nq) + "x" +
                       std::to_string(nk));
    }
    m.validate();
  }
  if (nk == 0 && nq > 0) throw MaskError("attend: no keys to attend over");

  const std::size_t dk = d / H;
  const std::size_t dvh = dv / H;
  const auto ld = static_cast<Eigen::Index>(d);
  const auto ldv = static_cast<Eigen::Index>(dv);
  const auto enq = static_cast<Eigen::Index>(nq);
  const auto enk = static_cast<Eigen::Index>(nk);

  Tensor out({B * nq, dv});
  // Attention weights, one nq×nk block per (sequence, head).
  auto probs = std::make_shared<std::vector<double>>(B * H * nq * nk);
  for (std::size_t b = 0; b < B; ++b) {
    const AttentionMask* mask = mask_for(masks, b);
    for (std::size_t h = 0; h < H; ++h) {
      ConstStridedMap Q(qv.data() + b * nq * d + h * dk, enq, static_cast<Eigen::Index>(dk),
                        Eigen::OuterStride<>(ld));
      ConstStridedMap K(kv.data() + b * nk * d + h * dk, enk, static_cast<Eigen::Index>(dk),
                        Eigen::OuterStride<>(ld));
      ConstStridedMap V(vv.data() + b * nk * dv + h * dvh, enk, static_cast<Eigen::Index>(dvh),
                        Eigen::OuterStride<>(ldv));
      detail::MatMap P(probs->data() + (b * H + h) * nq * nk, enq, enk);
      P.noalias() = Q * K.transpose();
      P *= score_scale;
      for (std::size_t i = 0; i < nq; ++i) {
        double* row = P.data() + i * nk;
        if (mask) {
          for (std::size_t j = 0; j < nk; ++j) {
            if (mask->disallowed(i, j)) row[j] = kMaskedScore;
          }
        }
        const double mx = *std::max_element(row, row + nk);
        double sum = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < nk; ++j) row[j] /= sum;
      }
      StridedMap O(out.data() + b * nq * dv + h * dvh, enq, static_cast<Eigen::Index>(dvh),
                   Eigen::OuterStride<>(ldv));
      O.noalias() = P * V;
    }
  }

  return make_result(std::move(out), {q, k, v}, [probs, B, nq, nk, H, d, dv, dk, dvh,
                                                  score_scale](Node& self) {
    const Tensor& qv = self.parents[0]->value;
    const Tensor& kv = self.parents[1]->value;
    const Tensor& vv = self.parents[2]->value;
    Tensor* gq = grad_of(*self.parents[0]);
    Tensor* gk = grad_of(*self.parents[1]);
    Tensor* gv = grad_of(*self.parents[2]);
    const auto ld = static_cast<Eigen::Index>(d);
    const auto ldv = static_cast<Eigen::Index>(dv);
    const auto enq = static_cast<Eigen::Index>(nq);
    const auto enk = static_cast<Eigen::Index>(nk);
    const auto edk = static_cast<Eigen::Index>(dk);
    const auto edvh = static_cast<Eigen::Index>(dvh);
    RowMat dP(enq, enk);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        detail::ConstMatMap P(probs->data() + (b * H + h) * nq * nk, enq, enk);
        ConstStridedMap dO(self.grad.data() + b * nq * dv + h * dvh, enq, edvh,
                           Eigen::OuterStride<>(ldv));
        ConstStridedMap V(vv.data() + b * nk * dv + h * dvh, enk, edvh, Eigen::OuterStride<>(ldv));
        if (gv) {
          StridedMap dV(gv->data() + b * nk * dv + h * dvh, enk, edvh, Eigen::OuterStride<>(ldv));
          dV.noalias() += P.transpose() * dO;
        }
        if (!gq && !gk) continue;
        dP.noalias() = dO * V.transpose();
        // Softmax backward, then the score scale.
        for (Eigen::Index i = 0; i < enq; ++i) {
          const double dot = P.row(i).dot(dP.row(i));
          dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix() * score_scale;
        }
        ConstStridedMap Q(qv.data() + b * nq * d + h * dk, enq, edk, Eigen::OuterStride<>(ld));
        ConstStridedMap K(kv.data() + b * nk * d + h * dk, enk, edk, Eigen::OuterStride<>(ld));
        if (gq) {
          StridedMap dQ(gq->data() + b * nq * d + h * dk, enq, edk, Eigen::OuterStride<>(ld));
          dQ.noalias() += dP * K;
        }
        if (gk) {
          StridedMap dK(gk->data() + b * nk * d + h * dk, enk, edk, Eigen::OuterStride<>(ld));
          dK.noalias() += dP.transpose() * Q;
        }
      }
    }
  });
}

Var scaled_dot_attention(const Var& queries, const Var& keys, const Var& values, const Var& w_q,
                         const Var& w_k, const Var& w_v, const AttentionMask* mask, bool scale) {
  const std::size_t dk = w_q.value().cols();
  if (w_k.value().cols() != dk) {
    throw ShapeError("scaled_dot_attention: W^Q and W^K widths differ");
  }
  const AttentionLayout layout{1, queries.value().rows(), keys.value().rows(), 1};
  const double s = scale ? 1.0 / std::sqrt(static_cast<double>(dk)) : 1.0;
  std::span<const AttentionMask> masks;
  if (mask) masks = std::span<const AttentionMask>(mask, 1);
  return attend(matmul(queries, w_q), matmul(keys, w_k), matmul(values, w_v), layout, masks, s);
}

Tensor scaled_dot_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const AttentionHeadParams& params, const AttentionMask* mask,
                            bool scale) {
  NoGradGuard no_grad;
  return scaled_dot_attention(Var::constant(queries), Var::constant(keys), Var::constant(values),
                              Var::constant(params.w_q), Var::constant(params.w_k),
                              Var::constant(params.w_v), mask, scale)
      .value();
}

AttentionHeadParams MultiHeadParams::head(std::size_t h) const {
  auto columns = [&](const Tensor& w) {
    const std::size_t dk = w.cols() / n_heads;
    Tensor out({w.rows(), dk});
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = 0; c < dk; ++c) out(r, c) = w(r, h * dk + c);
    }
    return out;
  };
  return {columns(w_q.value()), columns(w_k.value()), columns(w_v.value())};
}

MultiHeadParams MultiHeadParams::from_heads(std::span<const AttentionHeadParams> heads,
                                            Tensor w_o) {
  if (heads.empty()) throw ShapeError("multi_head: at least one head required");
  const std::size_t d = heads[0].w_q.rows();
  const std::size_t dk = heads[0].w_q.cols();
  const std::size_t dv = heads[0].w_v.cols();
  const std::size_t H = heads.size();
  Tensor wq({d, H * dk});
  Tensor wk({d, H * dk});
  Tensor wv({d, H * dv});
  for (std::size_t h = 0; h < H; ++h) {
    const auto& p = heads[h];
    if (p.w_q.shape() != Shape{d, dk} || p.w_k.shape() != Shape{d, dk} ||
        p.w_v.shape() != Shape{d, dv}) {
      throw ShapeError("multi_head: head " + std::to_string(h) + " has mismatched widths");
    }
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < dk; ++c) {
        wq(r, h * dk + c) = p.w_q(r, c);
        wk(r, h * dk + c) = p.w_k(r, c);
      }
      for (std::size_t c = 0; c < dv; ++c) wv(r, h * dv + c) = p.w_v(r, c);
    }
  }
  if (w_o.rank() != 2 || w_o.rows() != H * dv) {
    throw ShapeError("multi_head: w_o " + shape_str(w_o.shape()) + " does not accept " +
                     std::to_string(H) + " heads of width " + std::to_string(dv));
  }
  return {Var::leaf(std::move(wq)), Var::leaf(std::move(wk)), Var::leaf(std::move(wv)),
          Var::leaf(std::move(w_o)), H};
}

Var multi_head(const Var& queries, const Var& keys, const Var& values, const MultiHeadParams& params,
               std::size_t batch, std::span<const AttentionMask> masks, bool scale) {
  const std::size_t H = params.n_heads;
  const std::size_t inner = params.w_q.value().cols();
  if (H == 0 || inner % H != 0 || params.w_v.value().cols() % H != 0) {
    throw ShapeError("multi_head: projection widths do not split into " + std::to_string(H) +
                     " heads");
  }
  if (params.w_o.value().rows() != params.w_v.value().cols()) {
    throw ShapeError("multi_head: w_o " + shape_str(params.w_o.shape()) +
                     " does not match concatenated head width " +
                     std::to_string(params.w_v.value().cols()));
  }
  if (batch == 0 || queries.value().rows() % batch != 0 || keys.value().rows() % batch != 0) {
    throw ShapeError("multi_head: row counts do not divide into batch " + std::to_string(batch));
  }
  if (keys.value().rows() != values.value().rows()) {
    throw ShapeError("multi_head: keys " + shape_str(keys.shape()) + " and values " +
                     shape_str(values.shape()) + " differ in length");
  }
  const AttentionLayout layout{batch, queries.value().rows() / batch, keys.value().rows() / batch,
                               H};
  const double s = scale ? 1.0 / std::sqrt(static_cast<double>(inner / H)) : 1.0;
  Var heads = attend(matmul(queries, params.w_q), matmul(keys, params.w_k),
                     matmul(values, params.w_v), layout, masks, s);
  return matmul(heads, params.w_o);
}

Tensor multi_head(const Tensor& queries, const Tensor& keys, const Tensor& values,
                  std::span<const AttentionHeadParams> heads, const Tensor& w_o,
                  const AttentionMask* mask) {
  NoGradGuard no_grad;
  const MultiHeadParams params = MultiHeadParams::from_heads(heads, w_o);
  std::span<const AttentionMask> masks;
  if (mask) masks = std::span<const AttentionMask>(mask, 1);
  return multi_head(Var::constant(queries), Var::constant(keys), Var::constant(values), params, 1,
                    masks)
      .value();
}

std::pair<Var, Var> coattention(const ChannelPair& inputs, const GateRouting& alpha,
                                const GateRouting& beta, const MultiHeadParams& left_params,
                                const MultiHeadParams& right_params,
                                const CoAttentionMasks& masks) {
  auto pick = [&](Channel c) -> const Var& {
    return c == Channel::Left ? inputs.left : inputs.right;
  };
  auto length = [&](Channel c) {
    return c == Channel::Left ? inputs.left_len : inputs.right_len;
  };
  auto branch = [&](const GateRouting& r, const MultiHeadParams& p,
                    std::span<const AttentionMask> m, const char* name) {
    if (length(r.k_source) != length(r.v_source)) {
      throw ShapeError(std::string("coattention: ") + name + " branch routes K (length " +
                       std::to_string(length(r.k_source)) + ") and V (length " +
                       std::to_string(length(r.v_source)) + ") from channels of different length");
    }
    return multi_head(pick(r.q_source), pick(r.k_source), pick(r.v_source), p, inputs.batch, m);
  };
  Var y_left = branch(alpha, left_params, masks.left, "left");
  Var y_right = branch(beta, right_params, masks.right, "right");
  return {std::move(y_left), std::move(y_right)};
}

}  // namespace thm
