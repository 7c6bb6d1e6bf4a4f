#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "graph_detail.hpp"
#include "thm/errors.hpp"

namespace thm {

namespace {
thread_local bool g_grad_enabled = true;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}
}  // namespace

namespace detail {

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward = std::move(backward_fn);
    }
  }
  return Var(std::move(node));
}

Tensor* grad_of(Node& parent) {
  if (!parent.requires_grad) return nullptr;
  if (parent.grad.shape() != parent.value.shape()) parent.grad = Tensor(parent.value.shape());
  return &parent.grad;
}

}  // namespace detail

using detail::as_mat;
using detail::grad_of;
using detail::make_result;
using detail::Node;

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Tensor& Var::grad() {
  if (node_->grad.shape() != node_->value.shape()) node_->grad = Tensor(node_->value.shape());
  return node_->grad;
}

const Tensor& Var::grad() const { return const_cast<Var*>(this)->grad(); }

void Var::zero_grad() {
  if (node_) grad().fill(0.0);
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  if (!root.defined() || root.value().size() != 1) {
    throw ShapeError("backward: root must hold exactly one element");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad = Tensor(n->value.shape());
  }
  (*grad_of(*root.node()))[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->backward(*n);
      n->grad = Tensor();
    }
  }
}

// ---- plain tensor math -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  if (a.cols() == 0) return out;
  as_mat(out).noalias() = as_mat(a) * as_mat(b);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  Tensor out({a.rows(), b.rows()});
  if (a.cols() == 0) return out;
  as_mat(out).noalias() = as_mat(a) * as_mat(b).transpose();
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  as_mat(out) = as_mat(a).transpose();
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    if (row.empty()) continue;
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return y;
}

// ---- differentiable operations -----------------------------------------

Var matmul(const Var& a, const Var& b) {
  return make_result(matmul(a.value(), b.value()), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (Tensor* ga = grad_of(*self.parents[0])) {
      as_mat(*ga).noalias() += as_mat(self.grad) * as_mat(bv).transpose();
    }
    if (Tensor* gb = grad_of(*self.parents[1])) {
      as_mat(*gb).noalias() += as_mat(av).transpose() * as_mat(self.grad);
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  return make_result(matmul_nt(a.value(), b.value()), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (Tensor* ga = grad_of(*self.parents[0])) {
      as_mat(*ga).noalias() += as_mat(self.grad) * as_mat(bv);
    }
    if (Tensor* gb = grad_of(*self.parents[1])) {
      as_mat(*gb).noalias() += as_mat(self.grad).transpose() * as_mat(av);
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      if (Tensor* g = grad_of(*self.parents[k])) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var add_rowwise(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  require_matrix(xv, "add_rowwise");
  if (bias.value().size() != xv.cols()) {
    throw ShapeError("add_rowwise: bias " + shape_str(bias.shape()) + " does not fit " +
                     shape_str(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = out.rows();
  const std::size_t d = out.cols();
  const double* b = bias.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) row[c] += b[c];
  }
  return make_result(std::move(out), {x, bias}, [n, d](Node& self) {
    if (Tensor* gx = grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
    }
    if (Tensor* gb = grad_of(*self.parents[1])) {
      for (std::size_t r = 0; r < n; ++r) {
        const double* g = self.grad.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) (*gb)[c] += g[c];
      }
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= s;
  return make_result(std::move(out), {x}, [s](Node& self) {
    if (Tensor* g = grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = grad_of(*self.parents[0])) {
      const Tensor& xv = self.parents[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (xv[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var softmax_rows(const Var& x) {
  require_matrix(x.value(), "softmax_rows");
  return make_result(softmax_rows(x.value()), {x}, [](Node& self) {
    Tensor* g = grad_of(*self.parents[0]);
    if (!g) return;
    const Tensor& y = self.value;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto dy = self.grad.row(r);
      auto dx = g->row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * dy[c];
      for (std::size_t c = 0; c < yr.size(); ++c) dx[c] += yr[c] * (dy[c] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t n = xv.rows();
  const std::size_t d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not fit width " + std::to_string(d));
  }
  Tensor xhat({n, d});
  std::vector<double> inv_std(n);
  Tensor out({n, d});
  const double* g = gain.value().data();
  const double* b = bias.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (row[c] - mean) * inv_std[r];
      out(r, c) = g[c] * xhat(r, c) + b[c];
    }
  }
  return make_result(std::move(out), {x, gain, bias},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](Node& self) {
                       const Tensor& gv = self.parents[1]->value;
                       Tensor* gx = grad_of(*self.parents[0]);
                       Tensor* gg = grad_of(*self.parents[1]);
                       Tensor* gb = grad_of(*self.parents[2]);
                       std::vector<double> dxhat(d);
                       for (std::size_t r = 0; r < n; ++r) {
                         auto dy = self.grad.row(r);
                         auto xh = xhat.row(r);
                         double sum = 0.0;
                         double sum_xh = 0.0;
                         for (std::size_t c = 0; c < d; ++c) {
                           dxhat[c] = dy[c] * gv[c];
                           sum += dxhat[c];
                           sum_xh += dxhat[c] * xh[c];
                           if (gg) (*gg)[c] += dy[c] * xh[c];
                           if (gb) (*gb)[c] += dy[c];
                         }
                         if (gx) {
                           auto dx = gx->row(r);
                           const double k = inv_std[r] / static_cast<double>(d);
                           for (std::size_t c = 0; c < d; ++c) {
                             dx[c] += k * (static_cast<double>(d) * dxhat[c] - sum - xh[c] * sum_xh);
                           }
                         }
                       }
                     });
}

Var dropout(const Var& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.value().size());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] *= mask[i];
  }
  return make_result(std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    if (Tensor* g = grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += mask[i] * self.grad[i];
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "concat_cols");
  require_matrix(bv, "concat_cols");
  if (av.rows() != bv.rows()) {
    throw ShapeError("concat_cols: row counts differ, " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  const std::size_t n = av.rows();
  const std::size_t da = av.cols();
  const std::size_t db = bv.cols();
  Tensor out({n, da + db});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), out.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), out.row(r).begin() + static_cast<long>(da));
  }
  return make_result(std::move(out), {a, b}, [n, da, db](Node& self) {
    Tensor* ga = grad_of(*self.parents[0]);
    Tensor* gb = grad_of(*self.parents[1]);
    for (std::size_t r = 0; r < n; ++r) {
      auto g = self.grad.row(r);
      if (ga) {
        for (std::size_t c = 0; c < da; ++c) (*ga)(r, c) += g[c];
      }
      if (gb) {
        for (std::size_t c = 0; c < db; ++c) (*gb)(r, c) += g[da + c];
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != x.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.value().values().begin(),
                                                   x.value().values().end()));
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_rows");
  if (begin + count > xv.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + shape_str(xv.shape()));
  }
  const std::size_t d = xv.cols();
  Tensor out({count, d});
  std::copy_n(xv.data() + begin * d, count * d, out.data());
  return make_result(std::move(out), {x}, [begin, count, d](Node& self) {
    if (Tensor* g = grad_of(*self.parents[0])) {
      double* dst = g->data() + begin * d;
      for (std::size_t i = 0; i < count * d; ++i) dst[i] += self.grad[i];
    }
  });
}

Var gather_rows(const Var& table, std::span<const TokenId> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  std::vector<TokenId> kept(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw VocabError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(tv.rows()));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  return make_result(std::move(out), {table}, [kept = std::move(kept), d](Node& self) {
    if (Tensor* g = grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < kept.size(); ++i) {
        double* dst = g->data() + static_cast<std::size_t>(kept[i]) * d;
        const double* src = self.grad.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  return add_rowwise(matmul(x, weight), bias);
}

Var cross_entropy(const Var& logits, std::span<const TokenId> targets, double smoothing,
                  TokenId pad_id) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const std::size_t n = lv.rows();
  const std::size_t vocab = lv.cols();
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) {
    throw ParameterError("cross_entropy: smoothing must lie in [0, 1)");
  }
  std::size_t count = 0;
  for (TokenId t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw VocabError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw DataError("cross_entropy: batch holds only padding");

  Tensor probs({n, vocab});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == pad_id) continue;
    auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    double mean = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const double e = std::exp(row[c] - mx);
      probs(r, c) = e;
      sum += e;
      mean += row[c];
    }
    mean /= static_cast<double>(vocab);
    for (std::size_t c = 0; c < vocab; ++c) probs(r, c) /= sum;
    const double lse = mx + std::log(sum);
    total += lse - (1.0 - smoothing) * row[static_cast<std::size_t>(targets[r])] - smoothing * mean;
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<TokenId> kept(targets.begin(), targets.end());
  return make_result(
      Tensor({1}, {total * inv_count}), {logits},
      [probs = std::move(probs), kept = std::move(kept), smoothing, pad_id, inv_count,
       vocab](Node& self) {
        Tensor* g = grad_of(*self.parents[0]);
        if (!g) return;
        const double up = self.grad[0] * inv_count;
        const double uniform = smoothing / static_cast<double>(vocab);
        for (std::size_t r = 0; r < kept.size(); ++r) {
          if (kept[r] == pad_id) continue;
          auto dst = g->row(r);
          for (std::size_t c = 0; c < vocab; ++c) dst[c] += up * (probs(r, c) - uniform);
          dst[static_cast<std::size_t>(kept[r])] -= up * (1.0 - smoothing);
        }
      });
}

}  // namespace thm
