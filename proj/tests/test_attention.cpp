#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <vector>

#include "doctest.h"
#include "lara/attention.hpp"
#include "attention_oracle.hpp"
#include "test_util.hpp"

using namespace lara;
using lara::testing::fill_random;
using namespace lara::testing;

namespace {

// naive transcription helpers shared with the acceptance suite
// ----- builders --------------------------------------------------------------

Tensor random_tensor(std::vector<int64_t> dims, Rng& rng, double s = 1.0) {
  Tensor t = Tensor::zeros(std::move(dims));
  fill_random(t, rng, s);
  return t;
}

MultiheadWeightsT<float> random_mha(int64_t d_q, int64_t d_k, int64_t d_model, int64_t d_out,
                                    int64_t heads, Rng& rng) {
  MultiheadWeightsT<float> w;
  w.wq = random_tensor({d_q, d_model}, rng, 0.5);
  w.wk = random_tensor({d_k, d_model}, rng, 0.5);
  w.wv = random_tensor({d_k, d_model}, rng, 0.5);
  w.wo = random_tensor({d_model, d_out}, rng, 0.5);
  w.heads = heads;
  return w;
}

CrossBlockWeightsT<float> random_cross(int64_t d_q, int64_t d_kv, int64_t d_model, int64_t d_out,
                                       int64_t mlp_hidden, int64_t heads, Rng& rng) {
  CrossBlockWeightsT<float> w;
  w.ln_q = {Tensor::full({d_q}, 1.0f), Tensor::zeros({d_q})};
  w.ln_kv = {Tensor::full({d_kv}, 1.0f), Tensor::zeros({d_kv})};
  // random affine parameters so the oracle exercises them
  fill_random(w.ln_q.gamma, rng, 0.2);
  for (auto& v : w.ln_q.gamma.data()) v += 1.0f;
  fill_random(w.ln_q.beta, rng, 0.1);
  fill_random(w.ln_kv.beta, rng, 0.1);
  w.attn = random_mha(d_q, d_kv, d_model, d_out, heads, rng);
  w.ln_mlp = {Tensor::full({d_out}, 1.0f), Tensor::zeros({d_out})};
  fill_random(w.ln_mlp.beta, rng, 0.1);
  w.mlp.w1 = random_tensor({d_out, mlp_hidden}, rng, 0.5);
  w.mlp.b1 = random_tensor({mlp_hidden}, rng, 0.1);
  w.mlp.w2 = random_tensor({mlp_hidden, d_out}, rng, 0.5);
  w.mlp.b2 = random_tensor({d_out}, rng, 0.1);
  return w;
}

Mat ln_row(const LayerNormParamsT<float>& p, bool gamma) {
  const Tensor& t = gamma ? p.gamma : p.beta;
  Mat m{1, t.dim(0), {}};
  m.v.assign(t.data().begin(), t.data().end());
  return m;
}

}  // namespace

TEST_CASE("scaled_dot_attention: singleton, saturation, naive oracle") {
  Rng rng(1);
  SUBCASE("single key: output equals the lone value row for any query") {
    Tensor q = random_tensor({5, 4}, rng);
    Tensor k = random_tensor({1, 4}, rng);
    Tensor v = random_tensor({1, 3}, rng);
    Tensor out = scaled_dot_attention(q, k, v);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 3; ++j) CHECK(out.at(i, j) == doctest::Approx(v.at(0, j)));
  }

  SUBCASE("saturated one-hot keys select the matching value row") {
    const float big = 80.0f;
    Tensor k = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) k.at(i, i) = big;
    Tensor q = Tensor::zeros({1, 3});
    q.at(0, 1) = big;
    Tensor v = random_tensor({3, 2}, rng);
    Tensor out = scaled_dot_attention(q, k, v);
    CHECK(out.at(0, 0) == doctest::Approx(v.at(1, 0)).epsilon(1e-5));
    CHECK(out.at(0, 1) == doctest::Approx(v.at(1, 1)).epsilon(1e-5));
  }

  SUBCASE("random case matches explicit softmax + weighted sum") {
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({5, 4}, rng);
    Tensor v = random_tensor({5, 2}, rng);
    Tensor map;
    Tensor out = scaled_dot_attention(q, k, v, &map);
    Mat scores = naive_matmul(from_tensor(q), transpose_mat(from_tensor(k)));
    for (auto& s : scores.v) s /= 2.0;  // sqrt(d_K) = 2
    naive_softmax_rows(scores);
    Mat expect = naive_matmul(scores, from_tensor(v));
    CHECK(max_abs_diff(out, expect) < 1e-6);
    CHECK(max_abs_diff(map, scores) < 1e-6);
  }

  SUBCASE("query/key width mismatch raises") {
    Tensor q = random_tensor({2, 3}, rng);
    Tensor k = random_tensor({2, 4}, rng);
    CHECK_THROWS_AS((void)scaled_dot_attention(q, k, k), ShapeError);
  }
}

TEST_CASE("multihead_attention: identity case, permutation invariance, oracle") {
  Rng rng(2);
  SUBCASE("h=1 identity projections with one key return the value row") {
    auto eye = [](int64_t n) {
      Tensor t = Tensor::zeros({n, n});
      for (int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
      return t;
    };
    MultiheadWeightsT<float> w{eye(3), eye(3), eye(3), eye(3), 1};
    Tensor q = random_tensor({4, 3}, rng);
    Tensor k = random_tensor({1, 3}, rng);
    Tensor v = random_tensor({1, 3}, rng);
    auto res = multihead_attention(q, k, v, w);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 3; ++j) CHECK(res.out.at(i, j) == doctest::Approx(v.at(0, j)));
  }

  SUBCASE("output is invariant to joint (k,v) row permutation") {
    MultiheadWeightsT<float> w = random_mha(4, 6, 8, 4, 2, rng);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({5, 6}, rng);
    Tensor v = random_tensor({5, 6}, rng);
    Tensor out1 = multihead_attention(q, k, v, w).out;

    const std::vector<int> perm = {3, 0, 4, 1, 2};
    Tensor kp = Tensor::zeros({5, 6}), vp = Tensor::zeros({5, 6});
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 6; ++j) {
        kp.at(i, j) = k.at(perm[size_t(i)], j);
        vp.at(i, j) = v.at(perm[size_t(i)], j);
      }
    Tensor out2 = multihead_attention(q, kp, vp, w).out;
    for (int64_t i = 0; i < out1.numel(); ++i)
      CHECK(out1.at(i) == doctest::Approx(out2.at(i)).epsilon(1e-5));
  }

  SUBCASE("h=2 matches the per-head decomposition oracle") {
    MultiheadWeightsT<float> w = random_mha(4, 5, 8, 3, 2, rng);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({6, 5}, rng);
    Tensor v = random_tensor({6, 5}, rng);
    auto res = multihead_attention(q, k, v, w, true);
    Mat expect = naive_multihead(from_tensor(q), from_tensor(k), from_tensor(v),
                                 from_tensor(w.wq), from_tensor(w.wk), from_tensor(w.wv),
                                 from_tensor(w.wo), 2);
    CHECK(max_abs_diff(res.out, expect) < 1e-6);

    REQUIRE(res.attention.has_value());
    CHECK(res.attention->dims() == std::vector<int64_t>{2, 3, 6});
    for (int h = 0; h < 2; ++h)
      for (int i = 0; i < 3; ++i) {
        double sum = 0;
        for (int j = 0; j < 6; ++j) {
          const float a = res.attention->at((h * 3 + i) * 6 + j);
          CHECK(a >= 0.0f);
          sum += a;
        }
        CHECK(std::abs(sum - 1.0) < 1e-5);
      }
  }

  SUBCASE("bottleneck assertion fires when both sides exceed the budget") {
    MultiheadWeightsT<float> w = random_mha(4, 4, 4, 4, 1, rng);
    Tensor q = random_tensor({5, 4}, rng);
    CHECK_THROWS_AS((void)multihead_attention(q, q, q, w, false, 2), ShapeError);
    CHECK_NOTHROW((void)multihead_attention(q, q, q, w, false, 5));
  }
}

TEST_CASE("latent_input_cross_block: zero-residual identity, permutation, oracle") {
  Rng rng(3);
  const int64_t n = 2, t_count = 3, m = 4, d_kv = 5;

  SUBCASE("zeroed output projection and MLP final layer give the identity") {
    CrossBlockWeightsT<float> w = random_cross(m, d_kv, m, m, m, 2, rng);
    for (auto& v : w.attn.wo.data()) v = 0;
    for (auto& v : w.mlp.w2.data()) v = 0;
    for (auto& v : w.mlp.b2.data()) v = 0;
    Tensor latents = random_tensor({n, m}, rng);
    Tensor input = random_tensor({t_count, d_kv}, rng);
    auto res = latent_input_cross_block(latents, input, w);
    for (int64_t i = 0; i < latents.numel(); ++i) CHECK(res.out.at(i) == latents.at(i));
  }

  SUBCASE("output is invariant to permuting the input tokens") {
    CrossBlockWeightsT<float> w = random_cross(m, d_kv, m, m, m, 2, rng);
    Tensor latents = random_tensor({n, m}, rng);
    Tensor input = random_tensor({6, d_kv}, rng);
    auto out1 = latent_input_cross_block(latents, input, w).out;
    const std::vector<int> perm = {5, 2, 0, 4, 1, 3};
    Tensor shuffled = Tensor::zeros({6, d_kv});
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < d_kv; ++j) shuffled.at(i, j) = input.at(perm[size_t(i)], j);
    auto out2 = latent_input_cross_block(latents, shuffled, w).out;
    for (int64_t i = 0; i < out1.numel(); ++i)
      CHECK(out1.at(i) == doctest::Approx(out2.at(i)).epsilon(1e-5));
  }

  SUBCASE("micro case matches the two quoted lines step by step") {
    CrossBlockWeightsT<float> w = random_cross(m, d_kv, m, m, m, 2, rng);
    Tensor latents = random_tensor({n, m}, rng);
    Tensor input = random_tensor({t_count, d_kv}, rng);
    auto res = latent_input_cross_block(latents, input, w, true);

    Mat lat = from_tensor(latents);
    Mat inp = from_tensor(input);
    Mat attn_out = naive_multihead(
        naive_layer_norm(lat, ln_row(w.ln_q, true), ln_row(w.ln_q, false)),
        naive_layer_norm(inp, ln_row(w.ln_kv, true), ln_row(w.ln_kv, false)),
        naive_layer_norm(inp, ln_row(w.ln_kv, true), ln_row(w.ln_kv, false)),
        from_tensor(w.attn.wq), from_tensor(w.attn.wk), from_tensor(w.attn.wv),
        from_tensor(w.attn.wo), 2);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) attn_out.at(i, j) += lat.at(i, j);
    Mat mlp_out = naive_mlp(
        naive_layer_norm(attn_out, ln_row(w.ln_mlp, true), ln_row(w.ln_mlp, false)),
        from_tensor(w.mlp.w1), {1, m, std::vector<double>(w.mlp.b1.data().begin(), w.mlp.b1.data().end())},
        from_tensor(w.mlp.w2), {1, m, std::vector<double>(w.mlp.b2.data().begin(), w.mlp.b2.data().end())});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) mlp_out.at(i, j) += attn_out.at(i, j);
    CHECK(max_abs_diff(res.out, mlp_out) < 1e-6);
    REQUIRE(res.attention.has_value());
  }
}

TEST_CASE("latent_self_block: identity under zeroed residual branches, N=1, oracle") {
  Rng rng(4);
  const int64_t m = 4;

  auto make_self = [&](int64_t heads) {
    SelfBlockWeightsT<float> w;
    CrossBlockWeightsT<float> c = random_cross(m, m, m, m, m, heads, rng);
    w.ln = c.ln_q;
    w.attn = c.attn;
    w.ln_mlp = c.ln_mlp;
    w.mlp = c.mlp;
    return w;
  };

  SUBCASE("zeroed branches give the identity") {
    SelfBlockWeightsT<float> w = make_self(2);
    for (auto& v : w.attn.wo.data()) v = 0;
    for (auto& v : w.mlp.w2.data()) v = 0;
    for (auto& v : w.mlp.b2.data()) v = 0;
    Tensor latents = random_tensor({3, m}, rng);
    Tensor out = latent_self_block(latents, w);
    for (int64_t i = 0; i < latents.numel(); ++i) CHECK(out.at(i) == latents.at(i));
  }

  SUBCASE("N=1: the attention weight on the single latent is exactly 1") {
    SelfBlockWeightsT<float> w = make_self(2);
    Tensor latents = random_tensor({1, m}, rng);
    Tensor q = apply_layer_norm(latents, w.ln);
    auto res = multihead_attention(q, q, q, w.attn, true);
    for (int64_t i = 0; i < res.attention->numel(); ++i)
      CHECK(res.attention->at(i) == 1.0f);
  }

  SUBCASE("N=3 micro case vs transcription oracle") {
    SelfBlockWeightsT<float> w = make_self(2);
    Tensor latents = random_tensor({3, m}, rng);
    Tensor out = latent_self_block(latents, w);

    Mat lat = from_tensor(latents);
    Mat nrm = naive_layer_norm(lat, ln_row(w.ln, true), ln_row(w.ln, false));
    Mat attn_out = naive_multihead(nrm, nrm, nrm, from_tensor(w.attn.wq), from_tensor(w.attn.wk),
                                   from_tensor(w.attn.wv), from_tensor(w.attn.wo), 2);
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < m; ++j) attn_out.at(i, j) += lat.at(i, j);
    Mat mlp_out = naive_mlp(
        naive_layer_norm(attn_out, ln_row(w.ln_mlp, true), ln_row(w.ln_mlp, false)),
        from_tensor(w.mlp.w1), {1, m, std::vector<double>(w.mlp.b1.data().begin(), w.mlp.b1.data().end())},
        from_tensor(w.mlp.w2), {1, m, std::vector<double>(w.mlp.b2.data().begin(), w.mlp.b2.data().end())});
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < m; ++j) mlp_out.at(i, j) += attn_out.at(i, j);
    CHECK(max_abs_diff(out, mlp_out) < 1e-6);
  }
}

TEST_CASE("bev_cross_block: N=1 uniformity, row function property, oracle") {
  Rng rng(5);
  const int64_t p = 4, n = 2, m = 6, d_bev = 4, d_out = 8;

  SUBCASE("N=1: every cell's pre-MLP feature is the same projected latent") {
    CrossBlockWeightsT<float> w = random_cross(d_bev, m, d_bev, d_out, d_bev, 2, rng);
    Tensor query = random_tensor({p, d_bev}, rng);
    Tensor latents = random_tensor({1, m}, rng);
    Tensor q = apply_layer_norm(query, w.ln_q);
    Tensor kv = apply_layer_norm(latents, w.ln_kv);
    Tensor pre = multihead_attention(q, kv, kv, w.attn).out;
    for (int64_t i = 1; i < p; ++i)
      for (int64_t j = 0; j < d_out; ++j)
        CHECK(pre.at(i, j) == doctest::Approx(pre.at(0, j)).epsilon(1e-6));
  }

  SUBCASE("identical query rows produce identical output rows") {
    CrossBlockWeightsT<float> w = random_cross(d_bev, m, d_bev, d_out, d_bev, 2, rng);
    Tensor query = random_tensor({p, d_bev}, rng);
    for (int64_t j = 0; j < d_bev; ++j) query.at(2, j) = query.at(0, j);
    Tensor latents = random_tensor({n, m}, rng);
    Tensor out = bev_cross_block(query, latents, w);
    for (int64_t j = 0; j < d_out; ++j)
      CHECK(out.at(2, j) == doctest::Approx(out.at(0, j)).epsilon(1e-7));
  }

  SUBCASE("P=4, N=2 micro case vs transcription oracle (non-residual attention)") {
    CrossBlockWeightsT<float> w = random_cross(d_bev, m, d_bev, d_out, d_bev, 2, rng);
    Tensor query = random_tensor({p, d_bev}, rng);
    Tensor latents = random_tensor({n, m}, rng);
    Tensor out = bev_cross_block(query, latents, w);

    Mat attn_out = naive_multihead(
        naive_layer_norm(from_tensor(query), ln_row(w.ln_q, true), ln_row(w.ln_q, false)),
        naive_layer_norm(from_tensor(latents), ln_row(w.ln_kv, true), ln_row(w.ln_kv, false)),
        naive_layer_norm(from_tensor(latents), ln_row(w.ln_kv, true), ln_row(w.ln_kv, false)),
        from_tensor(w.attn.wq), from_tensor(w.attn.wk), from_tensor(w.attn.wv),
        from_tensor(w.attn.wo), 2);
    // NO residual here: the attention output replaces the query entirely.
    Mat mlp_out = naive_mlp(
        naive_layer_norm(attn_out, ln_row(w.ln_mlp, true), ln_row(w.ln_mlp, false)),
        from_tensor(w.mlp.w1),
        {1, d_bev, std::vector<double>(w.mlp.b1.data().begin(), w.mlp.b1.data().end())},
        from_tensor(w.mlp.w2),
        {1, d_out, std::vector<double>(w.mlp.b2.data().begin(), w.mlp.b2.data().end())});
    for (int64_t i = 0; i < p; ++i)
      for (int64_t j = 0; j < d_out; ++j) mlp_out.at(i, j) += attn_out.at(i, j);
    CHECK(max_abs_diff(out, mlp_out) < 1e-6);
  }
}

TEST_CASE("memory contract: no T*T or P*T buffer in the attention path") {
  Rng rng(6);
  const int64_t n = 4, t_count = 64, m = 8, d_kv = 8;
  CrossBlockWeightsT<float> w = random_cross(m, d_kv, m, m, m, 2, rng);
  Tensor latents = random_tensor({n, m}, rng);
  Tensor input = random_tensor({t_count, d_kv}, rng);

  AllocStats::reset();
  auto res = latent_input_cross_block(latents, input, w, true);
  (void)res;
  const int64_t peak = AllocStats::peak();
  CHECK(peak < t_count * t_count);
  // the captured map itself is heads*N*T; nothing may exceed it except the
  // input sequence
  CHECK(peak <= std::max<int64_t>(t_count * d_kv, 2 * n * t_count));
}
