#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "lara/common.hpp"

namespace lara {

// Coordinate conventions used throughout:
//   ego frame:    x forward, y left, z up, origin at vehicle center.
//   camera frame: z along the optical axis, x right in the image, y down.
//   extrinsics:   rotation maps camera-frame vectors INTO the ego frame
//                 (ego-from-camera); translation is the camera center in ego.
// Pixel coordinates place integer indices at pixel centers.

/// Pinhole intrinsics with zero skew: fx, fy focal lengths and cx, cy
/// principal point, all in pixels.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
    k(0, 0) = fx;
    k(1, 1) = fy;
    k(0, 2) = cx;
    k(1, 2) = cy;
    return k;
  }
};

struct CameraExtrinsics {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // ego-from-camera
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();   // camera center, meters
};

struct Camera {
  int width = 0;
  int height = 0;
  CameraIntrinsics intrinsics;
  CameraExtrinsics extrinsics;
};

struct CameraRig {
  std::vector<Camera> cameras;

  int camera_count() const { return static_cast<int>(cameras.size()); }
  void validate() const;
};

/// Per-feature-pixel viewing rays for a whole rig: origins are the camera
/// centers, directions are unnormalized and expressed in the ego frame.
/// Index layout is camera-major, then row-major over the feature grid.
struct RayField {
  int cameras = 0;
  int height = 0;
  int width = 0;
  std::vector<Eigen::Vector3d> origins;
  std::vector<Eigen::Vector3d> directions;

  int64_t token_count() const { return static_cast<int64_t>(cameras) * height * width; }
  int64_t index(int cam, int row, int col) const {
    return (static_cast<int64_t>(cam) * height + row) * width + col;
  }
};

/// Throws unless R is orthonormal with det +1 (tolerance 1e-6).
void validate_rotation(const Eigen::Matrix3d& r);

/// Rescales intrinsics to a feature map downsampled by `stride`, keeping
/// pixel centers aligned: c' = (c + 0.5)/s - 0.5.
CameraIntrinsics scale_intrinsics(const CameraIntrinsics& k, int stride);

/// Direction of the viewing ray through pixel x, computed literally as
/// R^-1 K^-1 (x0, x1, 1)^T. The rotation argument is the camera-from-ego
/// matrix, i.e. the transpose of the stored ego-from-camera extrinsic, so
/// the result comes out in ego coordinates. Not normalized.
Eigen::Vector3d pixel_ray_direction(const Eigen::Vector2d& pixel, const CameraIntrinsics& k,
                                    const Eigen::Matrix3d& cam_from_ego);

/// Builds the ray field at feature resolution: intrinsics are scaled by the
/// implied stride and rays are evaluated at every feature-pixel center.
RayField rig_ray_field(const CameraRig& rig, int feature_h, int feature_w);

struct PixelProjection {
  Eigen::Vector2d pixel;
  double depth = 0.0;
};

/// Forward pinhole projection q = K R^T (p - t); returns nullopt when the
/// point is at or behind the camera plane (depth <= 1e-6).
std::optional<PixelProjection> project_point(const Eigen::Vector3d& point, const Camera& cam);

/// Calibration JSON: {"cameras": [{"fx","fy","cx","cy","rotation": 9
/// row-major floats, "translation": 3 floats, "width","height"}, ...]}.
std::string rig_to_json(const CameraRig& rig);
CameraRig rig_from_json(const std::string& json_text);
void save_rig(const CameraRig& rig, const std::string& path);
CameraRig load_rig(const std::string& path);

}  // namespace lara
