#pragma once

#include <cstdint>
#include <string>

#include "lara/common.hpp"

namespace lara {

enum class QueryMode { kCoordsRadial, kFourier, kLearned };

std::string query_mode_name(QueryMode m);
QueryMode query_mode_from_name(const std::string& s);

/// Full architecture description. Defaults are the CPU-friendly "desk"
/// profile; configs/paper.toml holds the full-scale counterpart.
struct LaRaConfig {
  int cameras = 4;
  int image_h = 64;
  int image_w = 112;
  int stride = 8;          // encoder output stride
  int feat_channels = 32;  // c
  int ray_dim = 32;        // d
  int latent_count = 32;   // N
  int latent_dim = 64;     // M
  int self_layers = 2;     // L
  int heads = 4;
  int bev_h = 64;
  int bev_w = 64;
  double cell_meters = 0.5;  // BEV extent per cell
  int d_bev = 64;
  QueryMode query_mode = QueryMode::kCoordsRadial;
  int fourier_bands = 8;       // B
  double fourier_max_freq = 8.0;  // f_B
  bool normalize_rays = false;

  int feature_h() const { return image_h / stride; }
  int feature_w() const { return image_w / stride; }
  int64_t token_count() const {
    return static_cast<int64_t>(cameras) * feature_h() * feature_w();
  }
  int64_t bev_cells() const { return static_cast<int64_t>(bev_h) * bev_w; }
  double extent_h_meters() const { return bev_h * cell_meters; }
  double extent_w_meters() const { return bev_w * cell_meters; }

  void validate() const;
};

struct DataConfig {
  double fov_deg = 100.0;
  int min_boxes = 2;
  int max_boxes = 8;
  double camera_height = 1.5;
  double camera_offset = 0.3;
};

struct TrainConfig {
  int epochs = 40;
  int batch_size = 2;
  int steps = 0;  // when > 0, overrides epochs with an exact optimizer-step count
  double lr = 5e-4;
  double weight_decay = 1e-7;
  uint64_t seed = 1;
  std::string dataset = "data/train";
  std::string val_dataset;  // optional; empty = no validation
  std::string out_dir = "runs/default";
  int eval_interval = 100;

  void validate() const;
};

struct AppConfig {
  LaRaConfig model;
  DataConfig data;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
  }
};

/// Key = value configuration in a TOML-compatible subset: [section] headers,
/// #-comments, bare ints/floats/bools and quoted strings.
AppConfig parse_config_text(const std::string& text, const AppConfig& base = AppConfig());
AppConfig load_config(const std::string& path, const AppConfig& base = AppConfig());

/// Applies a dotted-key override such as "model.latent_count=64".
/// Unknown keys raise ArgumentError listing every valid key.
void apply_override(AppConfig& cfg, const std::string& key_value);

/// Serializes the fully resolved configuration (valid input for load_config).
std::string config_to_toml(const AppConfig& cfg);

}  // namespace lara
