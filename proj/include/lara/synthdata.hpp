#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "lara/config.hpp"
#include "lara/geometry.hpp"
#include "lara/image_io.hpp"

namespace lara {

/// One upright box: footprint center (cx, cy) in ego meters, yaw around +z,
/// car-like dimensions, resting on the ground plane z = 0.
struct Box {
  double cx = 0, cy = 0;
  double yaw = 0;
  double length = 4.5, width = 1.9, height = 1.6;
  Eigen::Vector3d albedo{0.5, 0.5, 0.5};
};

struct SceneSpec {
  std::vector<Box> boxes;
  Eigen::Vector3d ground_color_a{0.32, 0.33, 0.35};
  Eigen::Vector3d ground_color_b{0.45, 0.46, 0.48};
  uint64_t seed = 0;
};

struct RenderedSample {
  std::vector<ImageU8> images;   // C cameras, RGB
  CameraRig rig;
  int bev_h = 0, bev_w = 0;
  std::vector<uint8_t> bev_gt;   // bev_h * bev_w, values 0/1
  std::vector<double> occlusion; // per box, fraction of projected pixels hidden
  SceneSpec scene;
};

/// Surround rig: cameras at `camera_height` meters, yaw k*360/C degrees,
/// optical centers pushed `camera_offset` meters radially outward;
/// fx = (W/2) / tan(fov/2), principal point at the image center.
CameraRig default_rig(int cameras, int image_h, int image_w, double fov_deg,
                      double camera_height = 1.5, double camera_offset = 0.3);

/// Uniform box layout within the BEV extent; deterministic in `seed`.
SceneSpec sample_scene(uint64_t seed, double extent_x_m, double extent_y_m, int min_boxes,
                       int max_boxes);

/// Ego position of the center of BEV cell (i, j): row 0 is the far-forward
/// edge (+x), column 0 the far-left edge (+y).
inline Eigen::Vector2d bev_cell_center(int i, int j, int h_bev, int w_bev, double cell_m) {
  return {(h_bev / 2.0 - i - 0.5) * cell_m, (w_bev / 2.0 - j - 0.5) * cell_m};
}

/// True when an ego-plane point lies inside the box's rotated footprint
/// (boundaries inclusive).
bool point_in_box_footprint(const Eigen::Vector2d& p, const Box& box);

/// Z-buffer rasterization of the box meshes over a checkered ground plane;
/// flat Lambert shading, fixed sun. Also reports per-box occlusion.
struct RenderResult {
  std::vector<ImageU8> images;
  std::vector<double> occlusion;
};
RenderResult render_cameras(const SceneSpec& scene, const CameraRig& rig);

/// Binary occupancy: cell = 1 iff its center lies in any box footprint.
std::vector<uint8_t> rasterize_bev_gt(const SceneSpec& scene, int h_bev, int w_bev,
                                      double cell_m);

RenderedSample render_sample(const SceneSpec& scene, const CameraRig& rig, int h_bev, int w_bev,
                             double cell_m);

/// Dataset layout: dir/manifest.json, dir/sample_00000/{cam_k.png, calib.json,
/// bev_gt.pgm, scene.json}.
void write_dataset(const std::vector<RenderedSample>& samples, const std::string& dir,
                   const AppConfig& cfg);
std::vector<RenderedSample> read_dataset(const std::string& dir);

std::string scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const std::string& text);

/// Convenience: generate `count` samples from sequential seeds.
std::vector<RenderedSample> generate_dataset(const AppConfig& cfg, int count, uint64_t seed);

}  // namespace lara
