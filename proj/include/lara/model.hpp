#pragma once

#include <optional>
#include <vector>

#include "lara/attention.hpp"
#include "lara/config.hpp"
#include "lara/geometry.hpp"
#include "lara/param_store.hpp"
#include "lara/tensor.hpp"

namespace lara {

/// Width of the learned BEV query embedding (d_bev-query).
constexpr int64_t kLearnedQueryDim = 32;
/// Channel width of the BEV feature map produced by the decoding
/// cross-attention, ahead of the refinement CNN.
constexpr int64_t kBevFeatureChannels = 256;

struct TokenCoord {
  int camera, row, col;
};

/// Maps flat token index -> (camera, row, col); camera-major, then row-major.
std::vector<TokenCoord> build_token_index(int cameras, int feature_h, int feature_w);

// --- BEV query builders ----------------------------------------------------

/// Ego-centered normalized coordinates: row i, col j ->
/// (2i/(h-1) - 1, 2j/(w-1) - 1), flattened row-major into [h*w, 2].
template <typename S>
TensorT<S> build_query_coords(int h_bev, int w_bev) {
  LARA_CHECK_ARG(h_bev >= 2 && w_bev >= 2, "BEV query grid must be at least 2x2");
  TensorT<S> q = TensorT<S>::zeros({static_cast<int64_t>(h_bev) * w_bev, 2});
  for (int i = 0; i < h_bev; ++i) {
    for (int j = 0; j < w_bev; ++j) {
      const int64_t r = static_cast<int64_t>(i) * w_bev + j;
      q.at(r, 0) = static_cast<S>(2.0 * i / (h_bev - 1) - 1.0);
      q.at(r, 1) = static_cast<S>(2.0 * j / (w_bev - 1) - 1.0);
    }
  }
  return q;
}

/// Euclidean distance of each normalized coordinate pair from the origin.
template <typename S>
TensorT<S> build_query_radial(const TensorT<S>& coords) {
  LARA_CHECK_SHAPE(coords.rank() == 2 && coords.dim(1) == 2, "radial query expects [cells, 2]");
  TensorT<S> r = TensorT<S>::zeros({coords.dim(0), 1});
  for (int64_t i = 0; i < coords.dim(0); ++i) {
    const double x = coords.at(i, 0), y = coords.at(i, 1);
    r.at(i, 0) = static_cast<S>(std::sqrt(x * x + y * y));
  }
  return r;
}

/// fourier(z) = (z, sin(f1 pi z), cos(f1 pi z), ..., sin(fB pi z), cos(fB pi z))
/// per axis, frequencies linearly spaced from 1 to max_freq, axes concatenated.
template <typename S>
TensorT<S> build_query_fourier(const TensorT<S>& coords, int bands, double max_freq) {
  LARA_CHECK_ARG(bands >= 1, "fourier_bands must be >= 1");
  LARA_CHECK_ARG(max_freq >= 1.0, "fourier_max_freq must be >= 1");
  const int64_t per_axis = 2 * bands + 1;
  std::vector<double> freqs(static_cast<size_t>(bands));
  for (int b = 0; b < bands; ++b)
    freqs[static_cast<size_t>(b)] =
        bands == 1 ? 1.0 : 1.0 + (max_freq - 1.0) * b / (bands - 1);
  TensorT<S> out = TensorT<S>::zeros({coords.dim(0), 2 * per_axis});
  for (int64_t i = 0; i < coords.dim(0); ++i) {
    for (int axis = 0; axis < 2; ++axis) {
      const double z = coords.at(i, axis);
      int64_t o = axis * per_axis;
      out.at(i, o++) = static_cast<S>(z);
      for (int b = 0; b < bands; ++b) {
        out.at(i, o++) = static_cast<S>(std::sin(freqs[static_cast<size_t>(b)] * M_PI * z));
        out.at(i, o++) = static_cast<S>(std::cos(freqs[static_cast<size_t>(b)] * M_PI * z));
      }
    }
  }
  return out;
}

// --- Full model --------------------------------------------------------------

/// LaRa: shared CNN image encoder, per-pixel ray embeddings, cross-attention
/// into N latents, L self-attention blocks, BEV-query cross-attention and a
/// U-Net style refinement CNN producing one logit per BEV cell.
///
/// The constructor either creates all parameters in the store (fresh store)
/// or re-binds to existing entries (store restored from a checkpoint).
template <typename S>
class LaRaModelT {
 public:
  LaRaModelT(const LaRaConfig& cfg, ParamStoreT<S>& store);

  struct ForwardResult {
    TensorT<S> logits;                          // [bev_h, bev_w], pre-sigmoid
    std::optional<TensorT<S>> input_attention;  // [heads, N, T] when captured
  };

  ForwardResult forward(const CameraRig& rig, const std::vector<TensorT<S>>& images,
                        bool capture_attention = false) const;

  /// Shared-weight encoder for one [3,H,W] image -> [c, H/s, W/s].
  TensorT<S> encode_image(const TensorT<S>& image) const;

  /// MLP_ray over (t (+) r) for every token of the field -> [T, ray_dim].
  TensorT<S> ray_embedding(const RayField& field) const;

  /// Raw BEV query grid for the configured mode (pre-MLP_bev).
  TensorT<S> raw_query() const;

  /// BEV refinement CNN: [256, bev_h, bev_w] -> [1, bev_h, bev_w].
  TensorT<S> bev_cnn(const TensorT<S>& features) const;

  const LaRaConfig& config() const { return cfg_; }

 private:
  struct EncoderStage {
    TensorT<S> k1, b1, k2, b2;  // conv3x3 (stride 1), conv3x3 (stride 1 or 2)
    int64_t stride2 = 1;
  };
  struct ResStage {
    TensorT<S> k1, b1, k2, b2;
  };

  TensorT<S> res_stage(const TensorT<S>& x, const ResStage& s) const;

  LaRaConfig cfg_;

  std::vector<EncoderStage> enc_stages_;
  TensorT<S> enc_proj_k_, enc_proj_b_;  // final 1x1 to feat_channels

  MlpWeightsT<S> mlp_ray_;
  TensorT<S> latents_;
  CrossBlockWeightsT<S> cross_in_;
  std::vector<SelfBlockWeightsT<S>> self_blocks_;

  TensorT<S> learned_query_;  // only in learned mode
  MlpWeightsT<S> mlp_bev_;
  CrossBlockWeightsT<S> cross_bev_;

  // BEV CNN
  TensorT<S> cnn_in_k_, cnn_in_b_;
  ResStage cnn_res1_;                  // 1:1
  TensorT<S> cnn_down1_k_, cnn_down1_b_;
  ResStage cnn_res2_;                  // 1:2
  TensorT<S> cnn_down2_k_, cnn_down2_b_;
  TensorT<S> cnn_down3_k_, cnn_down3_b_;
  ResStage cnn_res3_;                  // 1:8
  TensorT<S> cnn_up2_k_, cnn_up2_b_;   // after x4 upsample + skip
  TensorT<S> cnn_up1_k_, cnn_up1_b_;   // after x2 upsample + skip
  TensorT<S> cnn_head_k_, cnn_head_b_;
};

using LaRaModel = LaRaModelT<float>;

/// Probability map and 0.5-threshold binary mask from a logit tensor.
std::vector<float> logits_to_probabilities(const Tensor& logits);
std::vector<uint8_t> logits_to_mask(const Tensor& logits, float prob_threshold = 0.5f);

extern template class LaRaModelT<float>;
extern template class LaRaModelT<double>;

}  // namespace lara
