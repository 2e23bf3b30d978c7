#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lara/image_io.hpp"
#include "lara/model.hpp"
#include "lara/train.hpp"

namespace lara {

/// Input-to-latent attention captured from one forward pass, with the token
/// geometry needed to map attention mass back onto cameras and azimuths.
struct AttentionRecord {
  Tensor weights;  // [heads, N, T], softmax rows
  std::vector<TokenCoord> token_index;
  CameraRig rig;
  int feature_h = 0, feature_w = 0;
  int image_h = 0, image_w = 0;

  int64_t heads() const { return weights.dim(0); }
  int64_t latents() const { return weights.dim(1); }
  int64_t tokens() const { return weights.dim(2); }
};

/// Runs the model with attention capture on one sample.
AttentionRecord capture_attention(const LaRaModel& model, const CameraRig& rig,
                                  const std::vector<Tensor>& images);

/// Latent/head selection: an index, or -1 for "average over all".
struct Selection {
  int latent = -1;
  int head = -1;

  std::string tag() const;  // "n{X}_h{Y}" with "avg" for -1
};

/// Parses "n=10,h=5", "n=avg,h=3", "h=avg", ... Missing fields mean avg.
Selection parse_selection(const std::string& expr);

/// Token mass for a selection: averages the chosen rows; the result is a
/// distribution over tokens (sums to 1).
std::vector<double> select_token_mass(const AttentionRecord& rec, const Selection& sel);

/// Per-camera heatmaps of the selected attention at feature resolution.
struct CameraHeatmaps {
  int height = 0, width = 0;  // per-map dims
  std::vector<std::vector<float>> maps;  // one per camera
};
CameraHeatmaps reproject_to_images(const AttentionRecord& rec, const Selection& sel,
                                   bool upsample_to_image = false);

/// Directional attention profile: vertical dimension collapsed per feature
/// column, masses binned by the azimuth of each column's central-row ray.
struct PolarProfile {
  int buckets = 360;
  std::vector<double> intensity;     // per bucket, >= 0; total equals the attention mass
  std::vector<int> dominant_camera;  // per bucket, -1 where empty
  double raw_max = 0.0;              // largest bucket before plot normalization
};
PolarProfile polar_collapse(const AttentionRecord& rec, const Selection& sel, int buckets = 360);

/// Self-contained SVG polar plot with exactly `buckets` radial spokes,
/// colored by dominant camera; byte-deterministic for fixed input.
std::string polar_profile_svg(const PolarProfile& profile);

/// Camera image with the (upsampled) heatmap blended on top.
ImageU8 overlay_heatmap(const ImageU8& camera, const std::vector<float>& heat, int heat_h,
                        int heat_w);

/// Writes polar_<tag>.svg and cam<k>_<tag>.png for every selection plus an
/// index.json; returns the emitted paths (relative to out_dir).
std::vector<std::string> emit_plots(const AttentionRecord& rec,
                                    const std::vector<ImageU8>& camera_images,
                                    const std::vector<Selection>& selections,
                                    const std::string& out_dir);

/// Checkpoint-format dump ("attn.input.head<h>" tensors) plus a JSON sidecar
/// mapping token index -> (camera, row, col).
void save_attention_record(const AttentionRecord& rec, const std::string& path);

}  // namespace lara
