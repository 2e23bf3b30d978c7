#pragma once

#include <optional>
#include <string>

#include "lara/param_store.hpp"
#include "lara/tensor.hpp"

namespace lara {

template <typename S>
struct LayerNormParamsT {
  TensorT<S> gamma, beta;
};

template <typename S>
LayerNormParamsT<S> make_layer_norm(ParamStoreT<S>& store, const std::string& prefix, int64_t d) {
  return {store.create(prefix + ".gamma", {d}, Init::kOne),
          store.create(prefix + ".beta", {d}, Init::kZero)};
}

template <typename S>
TensorT<S> apply_layer_norm(const TensorT<S>& x, const LayerNormParamsT<S>& p) {
  return layer_norm(x, p.gamma, p.beta);
}

/// Packed multi-head projections. Column block i of wq/wk/wv holds the
/// per-head matrix W_i (d_emb = d_model/heads columns each); wo maps the
/// concatenated heads to the output width. Projections carry no biases,
/// matching the plain matrix-product formulation.
template <typename S>
struct MultiheadWeightsT {
  TensorT<S> wq;  // [d_q, d_model]
  TensorT<S> wk;  // [d_k, d_model]
  TensorT<S> wv;  // [d_v, d_model]
  TensorT<S> wo;  // [d_model, d_out]
  int64_t heads = 1;

  int64_t d_model() const { return wq.dim(1); }
  int64_t d_emb() const { return d_model() / heads; }
  int64_t d_out() const { return wo.dim(1); }
};

template <typename S>
MultiheadWeightsT<S> make_multihead(ParamStoreT<S>& store, const std::string& prefix, int64_t d_q,
                                    int64_t d_k, int64_t d_v, int64_t d_model, int64_t d_out,
                                    int64_t heads) {
  LARA_CHECK_ARG(heads >= 1 && d_model % heads == 0, "heads (", heads,
                 ") must divide d_model (", d_model, ")");
  MultiheadWeightsT<S> w;
  w.wq = store.create(prefix + ".wq", {d_q, d_model}, Init::kHeTruncNormal);
  w.wk = store.create(prefix + ".wk", {d_k, d_model}, Init::kHeTruncNormal);
  w.wv = store.create(prefix + ".wv", {d_v, d_model}, Init::kHeTruncNormal);
  w.wo = store.create(prefix + ".wo", {d_model, d_out}, Init::kHeTruncNormal);
  w.heads = heads;
  return w;
}

template <typename S>
struct MlpWeightsT {
  TensorT<S> w1, b1, w2, b2;
};

template <typename S>
MlpWeightsT<S> make_mlp(ParamStoreT<S>& store, const std::string& prefix, int64_t d_in,
                        int64_t d_hidden, int64_t d_out) {
  MlpWeightsT<S> w;
  w.w1 = store.create(prefix + ".layer1.weight", {d_in, d_hidden}, Init::kHeTruncNormal);
  w.b1 = store.create(prefix + ".layer1.bias", {d_hidden}, Init::kZero);
  w.w2 = store.create(prefix + ".layer2.weight", {d_hidden, d_out}, Init::kHeTruncNormal);
  w.b2 = store.create(prefix + ".layer2.bias", {d_out}, Init::kZero);
  return w;
}

/// W2 GELU(W1 x + b1) + b2.
template <typename S>
TensorT<S> mlp_forward(const TensorT<S>& x, const MlpWeightsT<S>& w) {
  return linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2);
}

/// softmax(Q K^T / sqrt(d_K)) V. When `weights_out` is given it receives a
/// detached copy of the softmax weights [n_q, n_k].
template <typename S>
TensorT<S> scaled_dot_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                                TensorT<S>* weights_out = nullptr) {
  LARA_CHECK_SHAPE(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
                   "attention operands must be rank-2");
  LARA_CHECK_SHAPE(q.dim(1) == k.dim(1), "attention: query width ", q.dim(1), " vs key width ",
                   k.dim(1));
  LARA_CHECK_SHAPE(k.dim(0) == v.dim(0), "attention: key count ", k.dim(0), " vs value count ",
                   v.dim(0));
  const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  TensorT<S> scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
  TensorT<S> weights = softmax_last(scores);
  if (weights_out != nullptr) *weights_out = weights.detach();
  return matmul(weights, v);
}

template <typename S>
struct MultiheadResult {
  TensorT<S> out;
  // Captured softmax weights, [heads, n_q, n_k]; values only, no graph.
  std::optional<TensorT<S>> attention;
};

/// Concat(head_1, ..., head_h) W^O with head_i = Attn(Q W_i^Q, K W_i^K, V W_i^V).
/// `bottleneck`, when non-negative, asserts that the small side of the
/// score matrix never exceeds the latent count: the pairwise buffer stays
/// O(heads * N * tokens), never tokens^2 or bev_cells * tokens.
template <typename S>
MultiheadResult<S> multihead_attention(const TensorT<S>& q, const TensorT<S>& k,
                                       const TensorT<S>& v, const MultiheadWeightsT<S>& w,
                                       bool capture = false, int64_t bottleneck = -1) {
  LARA_CHECK_SHAPE(q.dim(1) == w.wq.dim(0), "multihead: query width ", q.dim(1), " vs wq ",
                   w.wq.dim(0));
  LARA_CHECK_SHAPE(k.dim(1) == w.wk.dim(0), "multihead: key width mismatch");
  LARA_CHECK_SHAPE(v.dim(1) == w.wv.dim(0), "multihead: value width mismatch");
  const int64_t n_q = q.dim(0), n_k = k.dim(0);
  if (bottleneck >= 0) {
    LARA_CHECK_SHAPE(std::min(n_q, n_k) <= bottleneck, "attention bottleneck violated: min(",
                     n_q, ",", n_k, ") > ", bottleneck);
  }
  const int64_t d_emb = w.d_emb();

  TensorT<S> qp = matmul(q, w.wq);
  TensorT<S> kp = matmul(k, w.wk);
  TensorT<S> vp = matmul(v, w.wv);

  MultiheadResult<S> res;
  if (capture) res.attention = TensorT<S>::zeros({w.heads, n_q, n_k});

  std::vector<TensorT<S>> heads;
  heads.reserve(static_cast<size_t>(w.heads));
  for (int64_t h = 0; h < w.heads; ++h) {
    TensorT<S> qh = slice_cols(qp, h * d_emb, (h + 1) * d_emb);
    TensorT<S> kh = slice_cols(kp, h * d_emb, (h + 1) * d_emb);
    TensorT<S> vh = slice_cols(vp, h * d_emb, (h + 1) * d_emb);
    TensorT<S> weights;
    heads.push_back(scaled_dot_attention(qh, kh, vh, capture ? &weights : nullptr));
    if (capture) {
      std::copy(weights.data().begin(), weights.data().end(),
                res.attention->data().begin() + h * n_q * n_k);
    }
  }
  res.out = matmul(concat_cols(heads), w.wo);
  return res;
}

// ---------------------------------------------------------------------------
// Block compositions

template <typename S>
struct CrossBlockWeightsT {
  LayerNormParamsT<S> ln_q, ln_kv;
  MultiheadWeightsT<S> attn;
  LayerNormParamsT<S> ln_mlp;
  MlpWeightsT<S> mlp;
};

template <typename S>
struct SelfBlockWeightsT {
  LayerNormParamsT<S> ln;
  MultiheadWeightsT<S> attn;
  LayerNormParamsT<S> ln_mlp;
  MlpWeightsT<S> mlp;
};

/// Cross-attention block that compresses the input tokens into the latents:
///   latents := MultiheadAttn(LN(latents), LN(input), LN(input)) + latents
///   latents := MLP(LN(latents)) + latents
template <typename S>
struct BlockResult {
  TensorT<S> out;
  std::optional<TensorT<S>> attention;
};

template <typename S>
BlockResult<S> latent_input_cross_block(const TensorT<S>& latents, const TensorT<S>& input,
                                        const CrossBlockWeightsT<S>& w, bool capture = false) {
  LARA_CHECK_SHAPE(input.dim(0) >= 1, "latent_input_cross_block: empty input sequence");
  TensorT<S> q = apply_layer_norm(latents, w.ln_q);
  TensorT<S> kv = apply_layer_norm(input, w.ln_kv);
  MultiheadResult<S> mh = multihead_attention(q, kv, kv, w.attn, capture, latents.dim(0));
  TensorT<S> x = add(mh.out, latents);
  TensorT<S> out = add(mlp_forward(apply_layer_norm(x, w.ln_mlp), w.mlp), x);
  return {out, std::move(mh.attention)};
}

/// Residual pre-norm self-attention block over the latents.
template <typename S>
TensorT<S> latent_self_block(const TensorT<S>& latents, const SelfBlockWeightsT<S>& w) {
  TensorT<S> n = apply_layer_norm(latents, w.ln);
  TensorT<S> x = add(multihead_attention(n, n, n, w.attn, false, latents.dim(0)).out, latents);
  return add(mlp_forward(apply_layer_norm(x, w.ln_mlp), w.mlp), x);
}

/// BEV decoding block. The attention step carries NO residual from the
/// query (the query holds coordinates, not features); the MLP step does:
///   output := MultiheadAttn(LN(query), LN(latents), LN(latents))
///   output := MLP(LN(output)) + output
template <typename S>
TensorT<S> bev_cross_block(const TensorT<S>& query, const TensorT<S>& latents,
                           const CrossBlockWeightsT<S>& w) {
  TensorT<S> q = apply_layer_norm(query, w.ln_q);
  TensorT<S> kv = apply_layer_norm(latents, w.ln_kv);
  TensorT<S> out = multihead_attention(q, kv, kv, w.attn, false, latents.dim(0)).out;
  return add(mlp_forward(apply_layer_norm(out, w.ln_mlp), w.mlp), out);
}

}  // namespace lara
