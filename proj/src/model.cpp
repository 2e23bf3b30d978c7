#include "lara/model.hpp"

namespace lara {

std::vector<TokenCoord> build_token_index(int cameras, int feature_h, int feature_w) {
  std::vector<TokenCoord> idx;
  idx.reserve(static_cast<size_t>(cameras) * feature_h * feature_w);
  for (int c = 0; c < cameras; ++c)
    for (int i = 0; i < feature_h; ++i)
      for (int j = 0; j < feature_w; ++j) idx.push_back({c, i, j});
  return idx;
}

namespace {

// Encoder stage widths, scaled from the feature width c.
std::vector<int64_t> encoder_widths(int64_t c) {
  return {std::max<int64_t>(8, c / 2), std::max<int64_t>(8, 3 * c / 4), c, c};
}

struct CnnWidths {
  int64_t c0, c1, c2;
};
CnnWidths bev_cnn_widths(int64_t c) {
  return {std::max<int64_t>(8, c), std::max<int64_t>(12, 3 * c / 2), std::max<int64_t>(16, 2 * c)};
}

int64_t raw_query_width(const LaRaConfig& cfg) {
  switch (cfg.query_mode) {
    case QueryMode::kCoordsRadial: return 3;
    case QueryMode::kFourier: return 2 * (2 * static_cast<int64_t>(cfg.fourier_bands) + 1);
    case QueryMode::kLearned: return kLearnedQueryDim;
  }
  return 3;
}

}  // namespace

template <typename S>
LaRaModelT<S>::LaRaModelT(const LaRaConfig& cfg, ParamStoreT<S>& store) : cfg_(cfg) {
  cfg_.validate();
  const int64_t c = cfg.feat_channels, d = cfg.ray_dim;
  const int64_t n = cfg.latent_count, m = cfg.latent_dim;
  const int64_t heads = cfg.heads, d_bev = cfg.d_bev;

  auto ensure = [&store](const std::string& name, std::vector<int64_t> dims, Init init,
                         double gain = 1.0) -> TensorT<S>& {
    if (store.has(name)) {
      auto& t = store.get(name);
      LARA_CHECK_SHAPE(t.dims() == dims, "parameter ", name, " has shape ",
                       shape_to_string(t.dims()), ", model expects ", shape_to_string(dims));
      return t;
    }
    return store.create(name, std::move(dims), init, gain);
  };

  // Image encoder: four [conv3x3, GELU, conv3x3(s), GELU] stages; the first
  // log2(stride) stages downsample, the rest run plain.
  const auto widths = encoder_widths(c);
  int downsamples = 0;
  for (int s = cfg.stride; s > 1; s /= 2) ++downsamples;
  LARA_CHECK_ARG(downsamples <= static_cast<int>(widths.size()),
                 "stride ", cfg.stride, " needs more downsampling stages than the encoder has");
  // GELU attenuates sub-unit activations by ~0.5x per layer; the extra gain
  // keeps the encoder's output variance healthy through eight activations.
  constexpr double kGeluGain = 1.7;
  int64_t in_ch = 3;
  for (size_t i = 0; i < widths.size(); ++i) {
    EncoderStage st;
    const std::string p = "encoder.stage" + std::to_string(i);
    st.k1 = ensure(p + ".conv1.weight", {widths[i], in_ch, 3, 3}, Init::kHeTruncNormal,
                   kGeluGain);
    st.b1 = ensure(p + ".conv1.bias", {widths[i]}, Init::kZero);
    st.k2 = ensure(p + ".conv2.weight", {widths[i], widths[i], 3, 3}, Init::kHeTruncNormal,
                   kGeluGain);
    st.b2 = ensure(p + ".conv2.bias", {widths[i]}, Init::kZero);
    st.stride2 = i < static_cast<size_t>(downsamples) ? 2 : 1;
    enc_stages_.push_back(st);
    in_ch = widths[i];
  }
  enc_proj_k_ = ensure("encoder.proj.weight", {c, in_ch, 1, 1}, Init::kHeTruncNormal);
  enc_proj_b_ = ensure("encoder.proj.bias", {c}, Init::kZero);

  // Geometry path and latent bottleneck.
  auto ensure_mlp = [&](const std::string& prefix, int64_t din, int64_t dh, int64_t dout,
                        bool residual_out = false) {
    MlpWeightsT<S> w;
    w.w1 = ensure(prefix + ".layer1.weight", {din, dh}, Init::kHeTruncNormal);
    w.b1 = ensure(prefix + ".layer1.bias", {dh}, Init::kZero);
    w.w2 = ensure(prefix + ".layer2.weight", {dh, dout},
                  residual_out ? Init::kResidualScaled : Init::kHeTruncNormal);
    w.b2 = ensure(prefix + ".layer2.bias", {dout}, Init::kZero);
    return w;
  };
  auto ensure_ln = [&](const std::string& prefix, int64_t dim) {
    return LayerNormParamsT<S>{ensure(prefix + ".gamma", {dim}, Init::kOne),
                               ensure(prefix + ".beta", {dim}, Init::kZero)};
  };
  auto ensure_mha = [&](const std::string& prefix, int64_t d_q, int64_t d_k, int64_t d_model,
                        int64_t d_out, bool residual_out = false) {
    MultiheadWeightsT<S> w;
    w.wq = ensure(prefix + ".wq", {d_q, d_model}, Init::kHeTruncNormal);
    w.wk = ensure(prefix + ".wk", {d_k, d_model}, Init::kHeTruncNormal);
    w.wv = ensure(prefix + ".wv", {d_k, d_model}, Init::kHeTruncNormal);
    w.wo = ensure(prefix + ".wo", {d_model, d_out},
                  residual_out ? Init::kResidualScaled : Init::kHeTruncNormal);
    w.heads = heads;
    return w;
  };

  mlp_ray_ = ensure_mlp("mlp_ray", 6, d, d);
  // unit-scale latents plus damped residual writes keep the N rows
  // separated through the bottleneck; see the note on ensure_mlp
  latents_ = ensure("latents", {n, m}, Init::kLatentNormal);

  cross_in_.ln_q = ensure_ln("cross_in.ln_q", m);
  cross_in_.ln_kv = ensure_ln("cross_in.ln_kv", c + d);
  cross_in_.attn = ensure_mha("cross_in.attn", m, c + d, m, m);
  cross_in_.ln_mlp = ensure_ln("cross_in.ln_mlp", m);
  cross_in_.mlp = ensure_mlp("cross_in.mlp", m, m, m);

  for (int l = 0; l < cfg.self_layers; ++l) {
    const std::string p = "self" + std::to_string(l);
    SelfBlockWeightsT<S> b;
    b.ln = ensure_ln(p + ".ln", m);
    b.attn = ensure_mha(p + ".attn", m, m, m, m);
    b.ln_mlp = ensure_ln(p + ".ln_mlp", m);
    b.mlp = ensure_mlp(p + ".mlp", m, m, m);
    self_blocks_.push_back(b);
  }

  if (cfg.query_mode == QueryMode::kLearned) {
    learned_query_ = ensure("query.learned", {cfg.bev_cells(), kLearnedQueryDim},
                            Init::kTokenNormal);
  }
  mlp_bev_ = ensure_mlp("mlp_bev", raw_query_width(cfg_), d_bev, d_bev);

  cross_bev_.ln_q = ensure_ln("cross_bev.ln_q", d_bev);
  cross_bev_.ln_kv = ensure_ln("cross_bev.ln_kv", m);
  cross_bev_.attn = ensure_mha("cross_bev.attn", d_bev, m, d_bev, kBevFeatureChannels);
  cross_bev_.ln_mlp = ensure_ln("cross_bev.ln_mlp", kBevFeatureChannels);
  cross_bev_.mlp =
      ensure_mlp("cross_bev.mlp", kBevFeatureChannels, d_bev, kBevFeatureChannels, true);

  // BEV refinement CNN (1:1, 1:2, 1:8 pyramid with skip connections).
  const auto cw = bev_cnn_widths(c);
  auto ensure_conv = [&](const std::string& p, int64_t cout, int64_t cin, int64_t k,
                         TensorT<S>& kw, TensorT<S>& kb) {
    kw = ensure(p + ".weight", {cout, cin, k, k}, Init::kHeTruncNormal);
    kb = ensure(p + ".bias", {cout}, Init::kZero);
  };
  auto ensure_res = [&](const std::string& p, int64_t ch) {
    ResStage r;
    ensure_conv(p + ".conv1", ch, ch, 3, r.k1, r.b1);
    r.k2 = ensure(p + ".conv2.weight", {ch, ch, 3, 3}, Init::kResidualScaled);
    r.b2 = ensure(p + ".conv2.bias", {ch}, Init::kZero);
    return r;
  };
  ensure_conv("bev_cnn.in", cw.c0, kBevFeatureChannels, 3, cnn_in_k_, cnn_in_b_);
  cnn_res1_ = ensure_res("bev_cnn.res1", cw.c0);
  ensure_conv("bev_cnn.down1", cw.c1, cw.c0, 3, cnn_down1_k_, cnn_down1_b_);
  cnn_res2_ = ensure_res("bev_cnn.res2", cw.c1);
  ensure_conv("bev_cnn.down2", cw.c2, cw.c1, 3, cnn_down2_k_, cnn_down2_b_);
  ensure_conv("bev_cnn.down3", cw.c2, cw.c2, 3, cnn_down3_k_, cnn_down3_b_);
  cnn_res3_ = ensure_res("bev_cnn.res3", cw.c2);
  ensure_conv("bev_cnn.up2", cw.c1, cw.c1 + cw.c2, 3, cnn_up2_k_, cnn_up2_b_);
  ensure_conv("bev_cnn.up1", cw.c0, cw.c0 + cw.c1, 3, cnn_up1_k_, cnn_up1_b_);
  ensure_conv("bev_cnn.head", 1, cw.c0, 1, cnn_head_k_, cnn_head_b_);
}

template <typename S>
TensorT<S> LaRaModelT<S>::res_stage(const TensorT<S>& x, const ResStage& s) const {
  TensorT<S> y = conv2d(x, s.k1, s.b1, 1, 1);
  y = conv2d(gelu(y), s.k2, s.b2, 1, 1);
  return add(x, y);
}

template <typename S>
TensorT<S> LaRaModelT<S>::encode_image(const TensorT<S>& image) const {
  LARA_CHECK_SHAPE(image.rank() == 3 && image.dim(0) == 3, "encoder expects [3,H,W]");
  LARA_CHECK_SHAPE(image.dim(1) == cfg_.image_h && image.dim(2) == cfg_.image_w,
                   "encoder: image is ", image.dim(1), "x", image.dim(2), ", config says ",
                   cfg_.image_h, "x", cfg_.image_w);
  LARA_CHECK_ARG(cfg_.image_h % cfg_.stride == 0 && cfg_.image_w % cfg_.stride == 0,
                 "stride must divide image dims");
  TensorT<S> x = image;
  for (const auto& st : enc_stages_) {
    x = gelu(conv2d(x, st.k1, st.b1, 1, 1));
    x = gelu(conv2d(x, st.k2, st.b2, st.stride2, 1));
  }
  return conv2d(x, enc_proj_k_, enc_proj_b_, 1, 0);
}

template <typename S>
TensorT<S> LaRaModelT<S>::ray_embedding(const RayField& field) const {
  const int64_t t_count = field.token_count();
  TensorT<S> in = TensorT<S>::zeros({t_count, 6});
  for (int64_t t = 0; t < t_count; ++t) {
    const Eigen::Vector3d& o = field.origins[static_cast<size_t>(t)];
    Eigen::Vector3d r = field.directions[static_cast<size_t>(t)];
    if (cfg_.normalize_rays) r.normalize();
    in.at(t, 0) = static_cast<S>(o.x());
    in.at(t, 1) = static_cast<S>(o.y());
    in.at(t, 2) = static_cast<S>(o.z());
    in.at(t, 3) = static_cast<S>(r.x());
    in.at(t, 4) = static_cast<S>(r.y());
    in.at(t, 5) = static_cast<S>(r.z());
  }
  return mlp_forward(in, mlp_ray_);
}

template <typename S>
TensorT<S> LaRaModelT<S>::raw_query() const {
  switch (cfg_.query_mode) {
    case QueryMode::kCoordsRadial: {
      TensorT<S> coords = build_query_coords<S>(cfg_.bev_h, cfg_.bev_w);
      return concat_cols(coords, build_query_radial(coords));
    }
    case QueryMode::kFourier: {
      TensorT<S> coords = build_query_coords<S>(cfg_.bev_h, cfg_.bev_w);
      return build_query_fourier(coords, cfg_.fourier_bands, cfg_.fourier_max_freq);
    }
    case QueryMode::kLearned: return learned_query_;
  }
  throw ArgumentError("unreachable query mode");
}

template <typename S>
TensorT<S> LaRaModelT<S>::bev_cnn(const TensorT<S>& features) const {
  LARA_CHECK_SHAPE(features.rank() == 3 && features.dim(0) == kBevFeatureChannels,
                   "bev_cnn expects [256, h, w]");
  const int64_t h = features.dim(1), w = features.dim(2);
  LARA_CHECK_ARG(h % 8 == 0 && w % 8 == 0, "bev_cnn: dims must be divisible by 8, got ", h, "x",
                 w);
  auto cat_chan = [](const TensorT<S>& a, const TensorT<S>& b) {
    const int64_t ha = a.dim(1), wa = a.dim(2);
    TensorT<S> flat = concat_rows<S>({reshape(a, {a.dim(0), ha * wa}),
                                      reshape(b, {b.dim(0), ha * wa})});
    return reshape(flat, {a.dim(0) + b.dim(0), ha, wa});
  };

  TensorT<S> s1 = res_stage(gelu(conv2d(features, cnn_in_k_, cnn_in_b_, 1, 1)), cnn_res1_);
  TensorT<S> s2 = res_stage(gelu(conv2d(s1, cnn_down1_k_, cnn_down1_b_, 2, 1)), cnn_res2_);
  TensorT<S> s8 = gelu(conv2d(s2, cnn_down2_k_, cnn_down2_b_, 2, 1));
  s8 = res_stage(gelu(conv2d(s8, cnn_down3_k_, cnn_down3_b_, 2, 1)), cnn_res3_);

  TensorT<S> u2 = gelu(conv2d(cat_chan(bilinear_upsample(s8, 4), s2), cnn_up2_k_, cnn_up2_b_, 1, 1));
  TensorT<S> u1 = gelu(conv2d(cat_chan(bilinear_upsample(u2, 2), s1), cnn_up1_k_, cnn_up1_b_, 1, 1));
  return conv2d(u1, cnn_head_k_, cnn_head_b_, 1, 0);
}

template <typename S>
typename LaRaModelT<S>::ForwardResult LaRaModelT<S>::forward(
    const CameraRig& rig, const std::vector<TensorT<S>>& images, bool capture_attention) const {
  LARA_CHECK_SHAPE(static_cast<int>(images.size()) == cfg_.cameras, "forward: got ",
                   images.size(), " images, config says ", cfg_.cameras, " cameras");
  LARA_CHECK_SHAPE(rig.camera_count() == cfg_.cameras, "forward: rig has ", rig.camera_count(),
                   " cameras, config says ", cfg_.cameras);

  // Semantic tokens: shared encoder, camera-major then row-major flatten.
  std::vector<TensorT<S>> per_camera;
  per_camera.reserve(images.size());
  for (const auto& img : images) per_camera.push_back(chw_to_tokens(encode_image(img)));
  TensorT<S> feats = concat_rows(per_camera);

  // Geometric tokens at feature resolution.
  RayField field = rig_ray_field(rig, cfg_.feature_h(), cfg_.feature_w());
  TensorT<S> rays = ray_embedding(field);

  TensorT<S> tokens = concat_cols(feats, rays);

  BlockResult<S> fused = latent_input_cross_block(latents_, tokens, cross_in_, capture_attention);
  TensorT<S> lat = fused.out;
  for (const auto& blk : self_blocks_) lat = latent_self_block(lat, blk);

  TensorT<S> query = mlp_forward(raw_query(), mlp_bev_);
  TensorT<S> bev = bev_cross_block(query, lat, cross_bev_);
  TensorT<S> grid = tokens_to_chw(bev, cfg_.bev_h, cfg_.bev_w);
  TensorT<S> logits = reshape(bev_cnn(grid), {cfg_.bev_h, cfg_.bev_w});

  return {logits, std::move(fused.attention)};
}

std::vector<float> logits_to_probabilities(const Tensor& logits) {
  std::vector<float> p(static_cast<size_t>(logits.numel()));
  for (int64_t i = 0; i < logits.numel(); ++i) {
    const float z = logits.at(i);
    p[static_cast<size_t>(i)] =
        z >= 0 ? 1.0f / (1.0f + std::exp(-z)) : std::exp(z) / (1.0f + std::exp(z));
  }
  return p;
}

std::vector<uint8_t> logits_to_mask(const Tensor& logits, float prob_threshold) {
  std::vector<float> p = logits_to_probabilities(logits);
  std::vector<uint8_t> m(p.size());
  for (size_t i = 0; i < p.size(); ++i) m[i] = p[i] > prob_threshold ? 1 : 0;
  return m;
}

template class LaRaModelT<float>;
template class LaRaModelT<double>;

}  // namespace lara
