#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <thread>
#include <unordered_set>
#include <vector>

#include "lara/common.hpp"

namespace lara {

/// Storage plus graph record for one tensor. Row-major data, optional
/// gradient buffer of identical shape, and a backward closure that pulls
/// this node's gradient into its parents' gradients.
template <typename S>
struct TensorNode {
  std::vector<int64_t> dims;
  std::vector<S> val;
  std::vector<S> grad;  // empty until first needed, then same numel as val
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void()> backprop;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
  }
};

/// Value-semantic handle to a TensorNode. Copies share storage; all ops
/// allocate fresh outputs, so shared reads are safe.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int64_t> dims) { return full(std::move(dims), S(0)); }

  static TensorT full(std::vector<int64_t> dims, S fill) {
    TensorT t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->dims = std::move(dims);
    for (int64_t d : t.node_->dims)
      LARA_CHECK_SHAPE(d > 0, "tensor dims must be positive, got ", shape_to_string(t.node_->dims));
    t.node_->val.assign(t.node_->numel(), fill);
    AllocStats::record(t.node_->numel());
    return t;
  }

  static TensorT from_data(std::vector<int64_t> dims, std::vector<S> data) {
    TensorT t = zeros(std::move(dims));
    LARA_CHECK_SHAPE(static_cast<int64_t>(data.size()) == t.numel(),
                     "data length ", data.size(), " does not match shape ",
                     shape_to_string(t.dims()));
    t.node_->val = std::move(data);
    return t;
  }

  static TensorT scalar(S v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int64_t>& dims() const { return node_->dims; }
  int64_t rank() const { return static_cast<int64_t>(node_->dims.size()); }
  int64_t dim(int64_t i) const { return node_->dims[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }

  std::span<S> data() { return {node_->val.data(), node_->val.size()}; }
  std::span<const S> data() const { return {node_->val.data(), node_->val.size()}; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<S> grad() {
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  S item() const {
    LARA_CHECK_SHAPE(numel() == 1, "item() on non-scalar tensor ", shape_to_string(dims()));
    return node_->val[0];
  }

  S& at(int64_t i) { return node_->val[static_cast<size_t>(i)]; }
  S at(int64_t i) const { return node_->val[static_cast<size_t>(i)]; }
  S& at(int64_t i, int64_t j) { return node_->val[static_cast<size_t>(i * dim(1) + j)]; }
  S at(int64_t i, int64_t j) const { return node_->val[static_cast<size_t>(i * dim(1) + j)]; }
  S& at(int64_t i, int64_t j, int64_t k) {
    return node_->val[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  S at(int64_t i, int64_t j, int64_t k) const {
    return node_->val[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }

  std::shared_ptr<TensorNode<S>>& node() { return node_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

  /// Copy of the values with no graph attached.
  TensorT detach() const {
    TensorT t = zeros(dims());
    t.node_->val = node_->val;
    return t;
  }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

using Tensor = TensorT<float>;

template <typename S>
bool all_finite(const TensorT<S>& t) {
  for (S v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename S>
bool same_dims(const TensorT<S>& a, const TensorT<S>& b) {
  return a.dims() == b.dims();
}

// ---------------------------------------------------------------------------
// Eigen map helpers (row-major, no copies)

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Map = Eigen::Map<EMat<S>>;
template <typename S>
using ConstMap = Eigen::Map<const EMat<S>>;

template <typename S>
Map<S> as_mat(std::vector<S>& v, int64_t rows, int64_t cols) {
  return Map<S>(v.data(), rows, cols);
}
template <typename S>
ConstMap<S> as_mat(const std::vector<S>& v, int64_t rows, int64_t cols) {
  return ConstMap<S>(v.data(), rows, cols);
}

/// Runs fn(lo, hi) over [0, n) in fixed-size chunks. Chunk boundaries depend
/// only on n, so results are identical for any thread count as long as
/// chunks write disjoint outputs.
inline void parallel_chunks(int64_t n, int64_t chunk, const std::function<void(int64_t, int64_t)>& fn) {
  int threads = max_threads();
  if (threads <= 1 || n <= chunk) {
    for (int64_t lo = 0; lo < n; lo += chunk) fn(lo, std::min(n, lo + chunk));
    return;
  }
  std::atomic<int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      int64_t lo = next.fetch_add(chunk);
      if (lo >= n) break;
      fn(lo, std::min(n, lo + chunk));
    }
  };
  std::vector<std::thread> pool;
  int nthreads = static_cast<int>(std::min<int64_t>(threads, (n + chunk - 1) / chunk));
  pool.reserve(static_cast<size_t>(nthreads - 1));
  for (int i = 1; i < nthreads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

template <typename S>
void attach(TensorT<S>& out, std::vector<std::shared_ptr<TensorNode<S>>> parents,
            std::function<void()> backprop) {
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (!any) return;
  out.node()->requires_grad = true;
  out.node()->parents = std::move(parents);
  out.node()->backprop = std::move(backprop);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  LARA_CHECK_SHAPE(same_dims(a, b), "add: shape mismatch ", shape_to_string(a.dims()), " vs ",
                   shape_to_string(b.dims()));
  TensorT<S> out = TensorT<S>::zeros(a.dims());
  const int64_t n = a.numel();
  {
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* py = out.data().data();
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  }
  auto* ap = a.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node(), b.node()}, [ap, bp, op, n] {
    const S* dy = op->grad.data();
    if (ap->requires_grad) {
      ap->ensure_grad();
      S* da = ap->grad.data();
      for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
    }
    if (bp->requires_grad) {
      bp->ensure_grad();
      S* db = bp->grad.data();
      for (int64_t i = 0; i < n; ++i) db[i] += dy[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  LARA_CHECK_SHAPE(same_dims(a, b), "sub: shape mismatch");
  TensorT<S> out = TensorT<S>::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  auto* ap = a.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node(), b.node()}, [ap, bp, op, n] {
    if (ap->requires_grad) {
      ap->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ap->grad[i] += op->grad[i];
    }
    if (bp->requires_grad) {
      bp->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bp->grad[i] -= op->grad[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  LARA_CHECK_SHAPE(same_dims(a, b), "mul: shape mismatch");
  TensorT<S> out = TensorT<S>::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  auto* ap = a.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node(), b.node()}, [ap, bp, op, n] {
    if (ap->requires_grad) {
      ap->ensure_grad();
      for (int64_t i = 0; i < n; ++i) ap->grad[i] += op->grad[i] * bp->val[i];
    }
    if (bp->requires_grad) {
      bp->ensure_grad();
      for (int64_t i = 0; i < n; ++i) bp->grad[i] += op->grad[i] * ap->val[i];
    }
  });
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S s) {
  TensorT<S> out = TensorT<S>::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
  auto* ap = a.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node()}, [ap, op, s, n] {
    ap->ensure_grad();
    for (int64_t i = 0; i < n; ++i) ap->grad[i] += op->grad[i] * s;
  });
  return out;
}

namespace detail {
template <typename S>
S erf_scalar(S x) {
  if constexpr (std::is_same_v<S, float>) return ::erff(x);
  else return std::erf(x);
}
template <typename S>
S exp_scalar(S x) {
  if constexpr (std::is_same_v<S, float>) return ::expf(x);
  else return std::exp(x);
}
}  // namespace detail

template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  // Exact erf form: x * Phi(x). Phi is cached for the backward pass.
  TensorT<S> out = TensorT<S>::zeros(a.dims());
  const int64_t n = a.numel();
  const S inv_sqrt2 = static_cast<S>(0.7071067811865475244);
  const bool needs_grad = a.requires_grad();
  auto phi_cache = needs_grad ? std::make_shared<std::vector<S>>(static_cast<size_t>(n))
                              : nullptr;
  const S* x = a.data().data();
  S* y = out.data().data();
  for (int64_t i = 0; i < n; ++i) {
    const S phi = S(0.5) * (S(1) + detail::erf_scalar<S>(x[i] * inv_sqrt2));
    if (needs_grad) (*phi_cache)[static_cast<size_t>(i)] = phi;
    y[i] = x[i] * phi;
  }
  auto* ap = a.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node()}, [ap, op, phi_cache, n] {
    ap->ensure_grad();
    const S inv_sqrt2pi = static_cast<S>(0.3989422804014326779);
    const S* x = ap->val.data();
    const S* dy = op->grad.data();
    S* dx = ap->grad.data();
    const S* phi = phi_cache->data();
    for (int64_t i = 0; i < n; ++i) {
      const S pdf = inv_sqrt2pi * detail::exp_scalar<S>(S(-0.5) * x[i] * x[i]);
      dx[i] += dy[i] * (phi[i] + x[i] * pdf);
    }
  });
  return out;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  TensorT<S> out = TensorT<S>::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    S x = a.at(i);
    out.at(i) = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
  }
  auto* ap = a.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node()}, [ap, op, n] {
    ap->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      S y = op->val[i];
      ap->grad[i] += op->grad[i] * y * (S(1) - y);
    }
  });
  return out;
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
  TensorT<S> out = TensorT<S>::zeros({1});
  S acc = S(0);
  for (S v : a.data()) acc += v;
  out.at(0) = acc;
  auto* ap = a.node().get();
  auto* op = out.node().get();
  const int64_t n = a.numel();
  detail::attach(out, {a.node()}, [ap, op, n] {
    ap->ensure_grad();
    for (int64_t i = 0; i < n; ++i) ap->grad[i] += op->grad[0];
  });
  return out;
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& a) {
  return scale(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, std::vector<int64_t> dims) {
  TensorT<S> out = TensorT<S>::zeros(std::move(dims));
  LARA_CHECK_SHAPE(out.numel() == a.numel(), "reshape: numel mismatch ", a.numel(), " -> ",
                   out.numel());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  auto* ap = a.node().get();
  auto* op = out.node().get();
  const int64_t n = a.numel();
  detail::attach(out, {a.node()}, [ap, op, n] {
    ap->ensure_grad();
    for (int64_t i = 0; i < n; ++i) ap->grad[i] += op->grad[i];
  });
  return out;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
  LARA_CHECK_SHAPE(a.rank() == 2, "transpose expects rank-2, got ", shape_to_string(a.dims()));
  const int64_t m = a.dim(0), n = a.dim(1);
  TensorT<S> out = TensorT<S>::zeros({n, m});
  detail::as_mat(out.node()->val, n, m) = detail::as_mat(a.node()->val, m, n).transpose();
  auto* ap = a.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node()}, [ap, op, m, n] {
    ap->ensure_grad();
    detail::as_mat(ap->grad, m, n) += detail::as_mat(op->grad, n, m).transpose();
  });
  return out;
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& a, int64_t c0, int64_t c1) {
  LARA_CHECK_SHAPE(a.rank() == 2, "slice_cols expects rank-2");
  LARA_CHECK_ARG(c0 >= 0 && c1 > c0 && c1 <= a.dim(1), "slice_cols: bad range [", c0, ",", c1,
                 ") for width ", a.dim(1));
  const int64_t m = a.dim(0), n = a.dim(1), w = c1 - c0;
  TensorT<S> out = TensorT<S>::zeros({m, w});
  for (int64_t i = 0; i < m; ++i)
    std::copy_n(a.data().data() + i * n + c0, w, out.data().data() + i * w);
  auto* ap = a.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node()}, [ap, op, m, n, w, c0] {
    ap->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) ap->grad[i * n + c0 + j] += op->grad[i * w + j];
  });
  return out;
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  LARA_CHECK_ARG(!parts.empty(), "concat_cols: empty input");
  const int64_t m = parts[0].dim(0);
  int64_t total = 0;
  for (const auto& p : parts) {
    LARA_CHECK_SHAPE(p.rank() == 2 && p.dim(0) == m, "concat_cols: row mismatch");
    total += p.dim(1);
  }
  TensorT<S> out = TensorT<S>::zeros({m, total});
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.dim(1);
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * w, w, out.data().data() + i * total + off);
    off += w;
  }
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::vector<TensorNode<S>*> raw;
  std::vector<int64_t> widths, offsets;
  off = 0;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    raw.push_back(p.node().get());
    widths.push_back(p.dim(1));
    offsets.push_back(off);
    off += p.dim(1);
  }
  auto* op = out.node().get();
  detail::attach(out, std::move(parents), [raw, widths, offsets, op, m, total] {
    for (size_t k = 0; k < raw.size(); ++k) {
      if (!raw[k]->requires_grad) continue;
      raw[k]->ensure_grad();
      const int64_t w = widths[k], o = offsets[k];
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < w; ++j) raw[k]->grad[i * w + j] += op->grad[i * total + o + j];
    }
  });
  return out;
}

template <typename S>
TensorT<S> concat_cols(const TensorT<S>& a, const TensorT<S>& b) {
  return concat_cols(std::vector<TensorT<S>>{a, b});
}

template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
  LARA_CHECK_ARG(!parts.empty(), "concat_rows: empty input");
  const int64_t n = parts[0].dim(1);
  int64_t total = 0;
  for (const auto& p : parts) {
    LARA_CHECK_SHAPE(p.rank() == 2 && p.dim(1) == n, "concat_rows: col mismatch");
    total += p.dim(0);
  }
  TensorT<S> out = TensorT<S>::zeros({total, n});
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off * n);
    off += p.dim(0);
  }
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::vector<TensorNode<S>*> raw;
  std::vector<int64_t> rows, offsets;
  off = 0;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    raw.push_back(p.node().get());
    rows.push_back(p.dim(0));
    offsets.push_back(off);
    off += p.dim(0);
  }
  auto* op = out.node().get();
  detail::attach(out, std::move(parents), [raw, rows, offsets, op, n] {
    for (size_t k = 0; k < raw.size(); ++k) {
      if (!raw[k]->requires_grad) continue;
      raw[k]->ensure_grad();
      const int64_t r = rows[k], o = offsets[k];
      for (int64_t i = 0; i < r * n; ++i) raw[k]->grad[i] += op->grad[o * n + i];
    }
  });
  return out;
}

/// [c,h,w] feature map to a [h*w, c] token matrix (row-major over pixels).
template <typename S>
TensorT<S> chw_to_tokens(const TensorT<S>& a) {
  LARA_CHECK_SHAPE(a.rank() == 3, "chw_to_tokens expects rank-3");
  const int64_t c = a.dim(0), h = a.dim(1), w = a.dim(2), hw = h * w;
  TensorT<S> out = TensorT<S>::zeros({hw, c});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t p = 0; p < hw; ++p) out.at(p, ch) = a.at(ch * hw + p);
  auto* ap = a.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node()}, [ap, op, c, hw] {
    ap->ensure_grad();
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t p = 0; p < hw; ++p) ap->grad[ch * hw + p] += op->grad[p * c + ch];
  });
  return out;
}

/// Inverse of chw_to_tokens.
template <typename S>
TensorT<S> tokens_to_chw(const TensorT<S>& a, int64_t h, int64_t w) {
  LARA_CHECK_SHAPE(a.rank() == 2 && a.dim(0) == h * w, "tokens_to_chw: bad shape");
  const int64_t c = a.dim(1), hw = h * w;
  TensorT<S> out = TensorT<S>::zeros({c, h, w});
  for (int64_t p = 0; p < hw; ++p)
    for (int64_t ch = 0; ch < c; ++ch) out.at(ch * hw + p) = a.at(p, ch);
  auto* ap = a.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node()}, [ap, op, c, hw] {
    ap->ensure_grad();
    for (int64_t p = 0; p < hw; ++p)
      for (int64_t ch = 0; ch < c; ++ch) ap->grad[p * c + ch] += op->grad[ch * hw + p];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  LARA_CHECK_SHAPE(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
  LARA_CHECK_SHAPE(a.dim(1) == b.dim(0), "matmul: inner dims ", a.dim(1), " vs ", b.dim(0));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<S> out = TensorT<S>::zeros({m, n});
  {
    auto av = detail::as_mat(a.node()->val, m, k);
    auto bv = detail::as_mat(b.node()->val, k, n);
    auto ov = detail::as_mat(out.node()->val, m, n);
    if (max_threads() > 1 && m >= 128 && m * n * k > (int64_t(1) << 22)) {
      detail::parallel_chunks(m, 64, [&](int64_t lo, int64_t hi) {
        detail::as_mat(out.node()->val, m, n).middleRows(lo, hi - lo).noalias() =
            detail::as_mat(a.node()->val, m, k).middleRows(lo, hi - lo) *
            detail::as_mat(b.node()->val, k, n);
      });
    } else {
      ov.noalias() = av * bv;
    }
  }
  auto* ap = a.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  detail::attach(out, {a.node(), b.node()}, [ap, bp, op, m, k, n] {
    auto dy = detail::as_mat(op->grad, m, n);
    if (ap->requires_grad) {
      ap->ensure_grad();
      detail::as_mat(ap->grad, m, k).noalias() += dy * detail::as_mat(bp->val, k, n).transpose();
    }
    if (bp->requires_grad) {
      bp->ensure_grad();
      detail::as_mat(bp->grad, k, n).noalias() += detail::as_mat(ap->val, m, k).transpose() * dy;
    }
  });
  return out;
}

/// y = x W + b with x:[rows,in], W:[in,out], b:[out].
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  LARA_CHECK_SHAPE(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "linear: bad ranks");
  LARA_CHECK_SHAPE(x.dim(1) == w.dim(0), "linear: inner dims ", x.dim(1), " vs ", w.dim(0));
  LARA_CHECK_SHAPE(b.dim(0) == w.dim(1), "linear: bias width ", b.dim(0), " vs ", w.dim(1));
  const int64_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  TensorT<S> out = TensorT<S>::zeros({m, n});
  {
    auto ov = detail::as_mat(out.node()->val, m, n);
    ov.noalias() = detail::as_mat(x.node()->val, m, k) * detail::as_mat(w.node()->val, k, n);
    const S* pb = b.data().data();
    S* py = out.data().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) py[i * n + j] += pb[j];
  }
  auto* xp = x.node().get();
  auto* wp = w.node().get();
  auto* bp = b.node().get();
  auto* op = out.node().get();
  detail::attach(out, {x.node(), w.node(), b.node()}, [xp, wp, bp, op, m, k, n] {
    auto dy = detail::as_mat(op->grad, m, n);
    if (xp->requires_grad) {
      xp->ensure_grad();
      detail::as_mat(xp->grad, m, k).noalias() += dy * detail::as_mat(wp->val, k, n).transpose();
    }
    if (wp->requires_grad) {
      wp->ensure_grad();
      detail::as_mat(wp->grad, k, n).noalias() += detail::as_mat(xp->val, m, k).transpose() * dy;
    }
    if (bp->requires_grad) {
      bp->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) bp->grad[j] += op->grad[i * n + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax

/// Per-row LayerNorm over the last axis with biased (1/d) variance and the
/// epsilon inside the square root, then affine transform by gamma/beta.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta) {
  LARA_CHECK_SHAPE(x.rank() >= 1, "layer_norm: rank must be >= 1");
  const int64_t d = x.dim(x.rank() - 1);
  LARA_CHECK_SHAPE(gamma.rank() == 1 && gamma.dim(0) == d, "layer_norm: gamma width");
  LARA_CHECK_SHAPE(beta.rank() == 1 && beta.dim(0) == d, "layer_norm: beta width");
  const int64_t rows = x.numel() / d;
  constexpr double eps = 1e-5;
  TensorT<S> out = TensorT<S>::zeros(x.dims());
  auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(rows * d));
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.data().data() + r * d;
    double mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) {
      double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = static_cast<S>(inv);
    for (int64_t j = 0; j < d; ++j) {
      S xh = static_cast<S>((xr[j] - mean) * inv);
      (*xhat)[static_cast<size_t>(r * d + j)] = xh;
      out.at(r * d + j) = xh * gamma.at(j) + beta.at(j);
    }
  }
  auto* xp = x.node().get();
  auto* gp = gamma.node().get();
  auto* bp = beta.node().get();
  auto* op = out.node().get();
  detail::attach(out, {x.node(), gamma.node(), beta.node()}, [xp, gp, bp, op, xhat, inv_std, rows, d] {
    for (int64_t r = 0; r < rows; ++r) {
      const S* dy = op->grad.data() + r * d;
      const S* xh = xhat->data() + r * d;
      if (gp->requires_grad) {
        gp->ensure_grad();
        for (int64_t j = 0; j < d; ++j) gp->grad[j] += dy[j] * xh[j];
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (int64_t j = 0; j < d; ++j) bp->grad[j] += dy[j];
      }
      if (xp->requires_grad) {
        xp->ensure_grad();
        double sum_dxh = 0, sum_dxh_xh = 0;
        for (int64_t j = 0; j < d; ++j) {
          double dxh = static_cast<double>(dy[j]) * gp->val[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh[j];
        }
        const double inv = (*inv_std)[static_cast<size_t>(r)];
        for (int64_t j = 0; j < d; ++j) {
          double dxh = static_cast<double>(dy[j]) * gp->val[j];
          xp->grad[r * d + j] += static_cast<S>(
              inv * (dxh - sum_dxh / d - static_cast<double>(xh[j]) * sum_dxh_xh / d));
        }
      }
    }
  });
  return out;
}

/// Row-stabilized softmax over the last axis.
template <typename S>
TensorT<S> softmax_last(const TensorT<S>& x) {
  LARA_CHECK_SHAPE(x.rank() >= 1, "softmax_last: rank must be >= 1");
  const int64_t d = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / d;
  TensorT<S> out = TensorT<S>::zeros(x.dims());
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x.data().data() + r * d;
    S* yr = out.data().data() + r * d;
    S mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double sum = 0;
    for (int64_t j = 0; j < d; ++j) {
      double e = std::exp(static_cast<double>(xr[j] - mx));
      yr[j] = static_cast<S>(e);
      sum += e;
    }
    const S inv = static_cast<S>(1.0 / sum);
    for (int64_t j = 0; j < d; ++j) yr[j] *= inv;
  }
  auto* xp = x.node().get();
  auto* op = out.node().get();
  detail::attach(out, {x.node()}, [xp, op, rows, d] {
    xp->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const S* y = op->val.data() + r * d;
      const S* dy = op->grad.data() + r * d;
      double dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(dy[j]) * y[j];
      for (int64_t j = 0; j < d; ++j)
        xp->grad[r * d + j] += static_cast<S>(y[j] * (dy[j] - dot));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and upsampling

namespace detail {

template <typename S>
void im2col(const S* x, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t oh, int64_t ow, S* cols) {
  // cols: [cin*kh*kw, oh*ow]
  const int64_t ohw = oh * ow;
  for (int64_t c = 0; c < cin; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        S* dst = cols + ((c * kh + ki) * kw + kj) * ohw;
        for (int64_t oi = 0; oi < oh; ++oi) {
          const int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) {
            std::fill_n(dst + oi * ow, ow, S(0));
            continue;
          }
          const S* src = x + (c * h + ii) * w;
          S* row = dst + oi * ow;
          if (stride == 1) {
            // contiguous middle segment, zero-padded edges
            const int64_t lo = std::max<int64_t>(0, pad - kj);
            const int64_t hi = std::min<int64_t>(ow, w - kj + pad);
            if (lo > 0) std::fill_n(row, lo, S(0));
            if (hi > lo) std::copy_n(src + lo + kj - pad, hi - lo, row + lo);
            if (hi < ow) std::fill_n(row + std::max(hi, lo), ow - std::max(hi, lo), S(0));
          } else {
            for (int64_t oj = 0; oj < ow; ++oj) {
              const int64_t jj = oj * stride + kj - pad;
              row[oj] = (jj >= 0 && jj < w) ? src[jj] : S(0);
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_accum(const S* cols, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                  int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* dx) {
  const int64_t ohw = oh * ow;
  for (int64_t c = 0; c < cin; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const S* src = cols + ((c * kh + ki) * kw + kj) * ohw;
        for (int64_t oi = 0; oi < oh; ++oi) {
          const int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          S* dst = dx + (c * h + ii) * w;
          const S* row = src + oi * ow;
          if (stride == 1) {
            const int64_t lo = std::max<int64_t>(0, pad - kj);
            const int64_t hi = std::min<int64_t>(ow, w - kj + pad);
            S* base = dst + kj - pad;
            for (int64_t oj = lo; oj < hi; ++oj) base[oj] += row[oj];
          } else {
            for (int64_t oj = 0; oj < ow; ++oj) {
              const int64_t jj = oj * stride + kj - pad;
              if (jj >= 0 && jj < w) dst[jj] += row[oj];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of x:[cin,h,w] with k:[cout,cin,kh,kw] plus bias, via
/// im2col + GEMM. The column buffer is kept alive for the backward pass.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k, const TensorT<S>& bias, int64_t stride,
                  int64_t pad) {
  LARA_CHECK_SHAPE(x.rank() == 3 && k.rank() == 4, "conv2d: expects x[cin,h,w], k[cout,cin,kh,kw]");
  LARA_CHECK_SHAPE(x.dim(0) == k.dim(1), "conv2d: channel mismatch ", x.dim(0), " vs ", k.dim(1));
  LARA_CHECK_ARG(stride >= 1, "conv2d: stride must be positive");
  LARA_CHECK_ARG(pad >= 0, "conv2d: padding must be non-negative");
  const int64_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  LARA_CHECK_SHAPE(bias.rank() == 1 && bias.dim(0) == cout, "conv2d: bias width");
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (w + 2 * pad - kw) / stride + 1;
  LARA_CHECK_SHAPE(oh >= 1 && ow >= 1, "conv2d: empty output");
  const int64_t kvol = cin * kh * kw, ohw = oh * ow;

  auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(kvol * ohw));
  AllocStats::record(kvol * ohw);
  detail::im2col(x.data().data(), cin, h, w, kh, kw, stride, pad, oh, ow, cols->data());

  TensorT<S> out = TensorT<S>::zeros({cout, oh, ow});
  detail::as_mat(out.node()->val, cout, ohw).noalias() =
      detail::as_mat(k.node()->val, cout, kvol) * detail::as_mat(*cols, kvol, ohw);
  for (int64_t c = 0; c < cout; ++c) {
    S b = bias.at(c);
    S* dst = out.data().data() + c * ohw;
    for (int64_t p = 0; p < ohw; ++p) dst[p] += b;
  }

  auto* xp = x.node().get();
  auto* kp = k.node().get();
  auto* bp = bias.node().get();
  auto* op = out.node().get();
  detail::attach(out, {x.node(), k.node(), bias.node()},
                 [xp, kp, bp, op, cols, cin, h, w, kh, kw, stride, pad, oh, ow, cout, kvol, ohw] {
    auto dy = detail::as_mat(op->grad, cout, ohw);
    if (bp->requires_grad) {
      bp->ensure_grad();
      for (int64_t c = 0; c < cout; ++c) {
        double acc = 0;
        for (int64_t p = 0; p < ohw; ++p) acc += op->grad[c * ohw + p];
        bp->grad[c] += static_cast<S>(acc);
      }
    }
    if (kp->requires_grad) {
      kp->ensure_grad();
      detail::as_mat(kp->grad, cout, kvol).noalias() +=
          dy * detail::as_mat(*cols, kvol, ohw).transpose();
    }
    if (xp->requires_grad) {
      xp->ensure_grad();
      std::vector<S> dcols(static_cast<size_t>(kvol * ohw));
      detail::as_mat(dcols, kvol, ohw).noalias() =
          detail::as_mat(kp->val, cout, kvol).transpose() * dy;
      detail::col2im_accum(dcols.data(), cin, h, w, kh, kw, stride, pad, oh, ow, xp->grad.data());
    }
  });
  return out;
}

/// Bilinear upsampling by an integer factor, align_corners = false.
template <typename S>
TensorT<S> bilinear_upsample(const TensorT<S>& x, int64_t factor) {
  LARA_CHECK_SHAPE(x.rank() == 3, "bilinear_upsample expects [c,h,w]");
  LARA_CHECK_ARG(factor == 2 || factor == 4, "bilinear_upsample: factor must be 2 or 4, got ",
                 factor);
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t oh = h * factor, ow = w * factor;
  TensorT<S> out = TensorT<S>::zeros({c, oh, ow});

  // Precompute the 1-D interpolation taps once per axis.
  struct Tap {
    int64_t lo, hi;
    S wlo, whi;
  };
  auto make_taps = [factor](int64_t src, int64_t dst) {
    std::vector<Tap> taps(static_cast<size_t>(dst));
    for (int64_t o = 0; o < dst; ++o) {
      double pos = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      double fl = std::floor(pos);
      int64_t lo = static_cast<int64_t>(fl);
      double frac = pos - fl;
      int64_t hi = lo + 1;
      lo = std::clamp<int64_t>(lo, 0, src - 1);
      hi = std::clamp<int64_t>(hi, 0, src - 1);
      taps[static_cast<size_t>(o)] = {lo, hi, static_cast<S>(1.0 - frac), static_cast<S>(frac)};
    }
    return taps;
  };
  auto ty = std::make_shared<std::vector<Tap>>(make_taps(h, oh));
  auto tx = std::make_shared<std::vector<Tap>>(make_taps(w, ow));

  for (int64_t ch = 0; ch < c; ++ch) {
    const S* src = x.data().data() + ch * h * w;
    S* dst = out.data().data() + ch * oh * ow;
    for (int64_t oi = 0; oi < oh; ++oi) {
      const Tap& a = (*ty)[static_cast<size_t>(oi)];
      for (int64_t oj = 0; oj < ow; ++oj) {
        const Tap& b = (*tx)[static_cast<size_t>(oj)];
        dst[oi * ow + oj] = a.wlo * (b.wlo * src[a.lo * w + b.lo] + b.whi * src[a.lo * w + b.hi]) +
                            a.whi * (b.wlo * src[a.hi * w + b.lo] + b.whi * src[a.hi * w + b.hi]);
      }
    }
  }

  auto* xp = x.node().get();
  auto* op = out.node().get();
  detail::attach(out, {x.node()}, [xp, op, ty, tx, c, h, w, oh, ow] {
    xp->ensure_grad();
    for (int64_t ch = 0; ch < c; ++ch) {
      S* dx = xp->grad.data() + ch * h * w;
      const S* dy = op->grad.data() + ch * oh * ow;
      for (int64_t oi = 0; oi < oh; ++oi) {
        const auto& a = (*ty)[static_cast<size_t>(oi)];
        for (int64_t oj = 0; oj < ow; ++oj) {
          const auto& b = (*tx)[static_cast<size_t>(oj)];
          const S g = dy[oi * ow + oj];
          dx[a.lo * w + b.lo] += a.wlo * b.wlo * g;
          dx[a.lo * w + b.hi] += a.wlo * b.whi * g;
          dx[a.hi * w + b.lo] += a.whi * b.wlo * g;
          dx[a.hi * w + b.hi] += a.whi * b.whi * g;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean binary cross entropy from logits, computed in the overflow-safe
/// form max(z,0) - z*y + log(1 + exp(-|z|)).
template <typename S>
TensorT<S> bce_with_logits_mean(const TensorT<S>& logits, const TensorT<S>& targets) {
  LARA_CHECK_SHAPE(same_dims(logits, targets), "bce: shape mismatch ",
                   shape_to_string(logits.dims()), " vs ", shape_to_string(targets.dims()));
  const int64_t n = logits.numel();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    double z = logits.at(i), y = targets.at(i);
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  auto* lp = logits.node().get();
  auto* tp = targets.node().get();
  auto* op = out.node().get();
  detail::attach(out, {logits.node(), targets.node()}, [lp, tp, op, n] {
    if (!lp->requires_grad) return;
    lp->ensure_grad();
    const S g = op->grad[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) {
      double z = lp->val[i];
      double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      lp->grad[i] += g * static_cast<S>(sig - tp->val[i]);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Backward

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// requires_grad tensor reachable from the loss; call zero_grad between
/// steps, otherwise repeated sweeps add up.
template <typename S>
void backward(TensorT<S>& loss) {
  LARA_CHECK_SHAPE(loss.numel() == 1, "backward: loss must be scalar, got ",
                   shape_to_string(loss.dims()));
  LARA_CHECK_ARG(loss.requires_grad(),
                 "backward: loss does not depend on any requires_grad tensor");
  // Iterative post-order DFS; reversing it yields a topological order from
  // the loss toward the leaves.
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> visited;
  struct Frame {
    TensorNode<S>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode<S>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop();
  }
}

}  // namespace lara
